//! Checkpoint file format.
//!
//! One file holds the network configuration, its build seed, and every
//! parameter tensor plus batch-norm running statistic, named, with raw
//! little-endian values. Byte layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  b"HCSEGCK1"
//! header_len       u32
//! header           JSON: {"config": NetworkConfig, "seed": u64}
//! dtype            u8       4 = f32, 8 = f64
//! entry_count      u32
//! entry*:
//!   name_len       u16
//!   name           UTF-8
//!   trainable      u8       1 = parameter, 0 = running statistic
//!   ndim           u8
//!   dims           u32 * ndim
//!   values         product(dims) * dtype bytes, little-endian
//! ```
//!
//! Entries appear in the network's deterministic parameter order, followed by
//! `<bn>.running_mean` / `<bn>.running_var` pairs in batch-norm order, so a
//! checkpoint of a given network state is byte-identical across runs.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{build_network, Network, NetworkConfig};
use crate::scalar::{Dtype, Scalar};

const MAGIC: &[u8; 8] = b"HCSEGCK1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    seed: u64,
}

struct Entry<T> {
    name: String,
    trainable: bool,
    dims: Vec<usize>,
    values: Vec<T>,
}

fn entries_of<T: Scalar>(net: &Network<T>) -> Vec<Entry<T>> {
    let mut entries = Vec::new();
    for (name, p) in net.parameters() {
        entries.push(Entry {
            name,
            trainable: true,
            dims: p.shape().to_vec(),
            values: p.to_vec(),
        });
    }
    for (name, state) in net.batchnorm_states() {
        entries.push(Entry {
            name: format!("{name}.running_mean"),
            trainable: false,
            dims: vec![state.channels()],
            values: state.running_mean(),
        });
        entries.push(Entry {
            name: format!("{name}.running_var"),
            trainable: false,
            dims: vec![state.channels()],
            values: state.running_var(),
        });
    }
    entries
}

pub fn save_checkpoint<T: Scalar>(path: &Path, net: &Network<T>) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: net.config().clone(),
        seed: net.seed(),
    })
    .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
    let entries = entries_of(net);

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(header.len() as u32).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&[T::DTYPE.tag()])?;
    f.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in &entries {
        let name = e.name.as_bytes();
        f.write_all(&(name.len() as u16).to_le_bytes())?;
        f.write_all(name)?;
        f.write_all(&[e.trainable as u8])?;
        f.write_all(&[e.dims.len() as u8])?;
        for &d in &e.dims {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &e.values {
            f.write_all(&v.to_le_bytes_vec())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn read_exact_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact_vec(r, 4)?.try_into().unwrap()))
}

/// Rebuild a network from a checkpoint. The scalar type must match the
/// stored dtype.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_exact_vec(&mut f, 8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let header_len = read_u32(&mut f)? as usize;
    let header: Header = serde_json::from_slice(&read_exact_vec(&mut f, header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let dtype_tag = read_exact_vec(&mut f, 1)?[0];
    let dtype = Dtype::from_tag(dtype_tag)
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {dtype_tag}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {:?}, loader instantiated for {:?}",
            dtype,
            T::DTYPE
        )));
    }
    let entry_count = read_u32(&mut f)? as usize;

    let net = build_network::<T>(&header.config, header.seed)?;
    let params = net.parameters();
    let bn_states = net.batchnorm_states();
    let elem = dtype.size_bytes();

    let mut seen = std::collections::HashSet::new();
    for _ in 0..entry_count {
        let name_len = u16::from_le_bytes(read_exact_vec(&mut f, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact_vec(&mut f, name_len)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 entry name".into()))?;
        let _trainable = read_exact_vec(&mut f, 1)?[0] == 1;
        let ndim = read_exact_vec(&mut f, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut f)? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = read_exact_vec(&mut f, numel * elem)?;
        let values: Vec<T> = raw.chunks_exact(elem).map(T::from_le_slice).collect();
        seen.insert(name.clone());

        if let Some((_, p)) = params.iter().find(|(n, _)| *n == name) {
            if p.shape() != dims {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?} does not match built shape {:?}",
                    dims,
                    p.shape()
                )));
            }
            p.set_values(&values);
        } else if let Some(stat) = name.strip_suffix(".running_mean") {
            let (_, state) = bn_states
                .iter()
                .find(|(n, _)| n == stat)
                .ok_or_else(|| Error::Checkpoint(format!("unknown entry {name}")))?;
            state.set_running_stats(&values, &state.running_var());
        } else if let Some(stat) = name.strip_suffix(".running_var") {
            let (_, state) = bn_states
                .iter()
                .find(|(n, _)| n == stat)
                .ok_or_else(|| Error::Checkpoint(format!("unknown entry {name}")))?;
            state.set_running_stats(&state.running_mean(), &values);
        } else {
            return Err(Error::Checkpoint(format!("unknown entry {name}")));
        }
    }
    for (name, _) in &params {
        if !seen.contains(name) {
            return Err(Error::Checkpoint(format!("missing parameter {name}")));
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Variant;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    fn toy_net(seed: u64) -> Network<f32> {
        let cfg = NetworkConfig::new(Variant::MsMiniLinknet, (32, 32), 4);
        build_network::<f32>(&cfg, seed).unwrap()
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = toy_net(5);
        // give the running stats non-default values via a train forward
        let batch = Tensor::<f32>::full(&[2, 1, 32, 32], 0.4);
        net.forward(&batch, Mode::Train).unwrap();
        save_checkpoint(&path, &net).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        for ((na, pa), (nb, pb)) in net.parameters().iter().zip(loaded.parameters().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.to_vec(), pb.to_vec(), "parameter {na}");
        }
        for ((na, sa), (nb, sb)) in net
            .batchnorm_states()
            .iter()
            .zip(loaded.batchnorm_states().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(sa.running_mean(), sb.running_mean());
            assert_eq!(sa.running_var(), sb.running_var());
        }
        // identical eval outputs
        let a = net.forward(&batch, Mode::Eval).unwrap().to_vec();
        let b = loaded.forward(&batch, Mode::Eval).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &toy_net(7)).unwrap();
        save_checkpoint(&p2, &toy_net(7)).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &toy_net(1)).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
