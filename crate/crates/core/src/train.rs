//! Adam optimizer, training loop, and validation-time evaluation.
//!
//! The loop is sequential and fully deterministic for a fixed seed: one
//! seeded generator drives the epoch shuffles, batches are assembled in
//! shuffle order (last partial batch kept), and every numeric path is
//! single-threaded.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resize_nearest, resize_record, DatasetRecord};
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::loss::{l_ln_with_weights, soft_dice, weight_tensor_for, LossConfig};
use crate::metrics::{evaluate_set, EvalPair, MetricsReport};
use crate::net::{Network, Variant};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Standard Adam with bias correction.
pub struct AdamState<T: Scalar> {
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
    step_count: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[(String, Tensor<T>)], lr: f64) -> Self {
        AdamState {
            first_moment: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
            second_moment: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
            step_count: 0,
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over all parameters, reading gradients off the tensors.
    /// A missing gradient counts as zero. Non-finite gradients abort, naming
    /// the parameter.
    pub fn step(&mut self, params: &[(String, Tensor<T>)]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::InvalidArgument(
                "optimizer state does not match parameter list".into(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (i, (name, p)) in params.iter().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let finite = p.with_grad(|grad| {
                let zero = T::zero();
                for j in 0..m.len() {
                    let g = grad.map(|g| g[j]).unwrap_or(zero);
                    if !g.to_f64().is_finite() {
                        return false;
                    }
                    m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g * g;
                }
                true
            });
            if !finite {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            p.update_values(|theta| {
                for j in 0..theta.len() {
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    theta[j] = theta[j] - self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Config and history
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub input_size: (usize, usize),
    pub variant: Variant,
    pub base_channels: usize,
    #[serde(skip)]
    pub loss: LossConfig,
    /// Save a checkpoint every this many epochs (plus the final state).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 10,
            lr: 0.001,
            seed: 0,
            input_size: (256, 384),
            variant: Variant::Linknet,
            base_channels: 64,
            loss: LossConfig::default(),
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_soft_dice: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub optimizer_steps: u64,
}

impl TrainHistory {
    /// Tab-delimited table, one row per epoch.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_soft_dice\twall_time_s\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.3}\n",
                e.epoch, e.train_loss, e.val_soft_dice, e.wall_time_s
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Batch preparation
// ---------------------------------------------------------------------------

struct Prepared<T: Scalar> {
    image: Vec<T>,
    mask: Vec<T>,
    weights: Vec<T>,
}

fn prepare_records<T: Scalar>(
    records: &[DatasetRecord],
    input_size: (usize, usize),
    loss: &LossConfig,
) -> Result<Vec<Prepared<T>>> {
    let (h, w) = input_size;
    records
        .iter()
        .map(|rec| {
            let resized = resize_record(rec, input_size);
            let image: Vec<T> = resized
                .image
                .data()
                .iter()
                .map(|&v| T::from_f64(v as f64))
                .collect();
            let mask: Vec<T> = resized
                .mask
                .data()
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect();
            let gt = Tensor::from_vec(&[1, 1, h, w], mask.clone())?;
            let weights = weight_tensor_for(&gt, loss)
                .map_err(|e| Error::Data(format!("record {}: {e}", rec.id)))?
                .to_vec();
            Ok(Prepared {
                image,
                mask,
                weights,
            })
        })
        .collect()
}

fn assemble<T: Scalar>(
    prepared: &[Prepared<T>],
    indices: &[usize],
    input_size: (usize, usize),
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, w) = input_size;
    let n = indices.len();
    let mut images = Vec::with_capacity(n * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    let mut weights = Vec::with_capacity(n * h * w);
    for &i in indices {
        images.extend_from_slice(&prepared[i].image);
        masks.extend_from_slice(&prepared[i].mask);
        weights.extend_from_slice(&prepared[i].weights);
    }
    let shape = [n, 1, h, w];
    Ok((
        Tensor::from_vec(&shape, images)?,
        Tensor::from_vec(&shape, masks)?,
        Tensor::from_vec(&shape, weights)?,
    ))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Train `net` in place. Per epoch: seeded shuffle, fixed-size batches (last
/// partial kept), forward, weighted Dice+BCE loss, backward, Adam step.
pub fn train<T: Scalar>(
    net: &Network<T>,
    train_records: &[DatasetRecord],
    val_records: &[DatasetRecord],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if train_records.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if net.config().input_size != cfg.input_size {
        return Err(Error::InvalidArgument(format!(
            "network input size {:?} does not match train config {:?}",
            net.config().input_size,
            cfg.input_size
        )));
    }

    let prepared = prepare_records::<T>(train_records, cfg.input_size, &cfg.loss)?;
    let val_prepared = prepare_records::<T>(val_records, cfg.input_size, &cfg.loss)?;
    let params = net.parameters();
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_indices in order.chunks(cfg.batch_size) {
            let (images, masks, weights) = assemble(&prepared, batch_indices, cfg.input_size)?;
            let pred = net.forward(&images, Mode::Train)?;
            let loss = l_ln_with_weights(&pred, &masks, &weights, &cfg.loss)?;
            let loss_value = loss.item()?.to_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batches}"
                )));
            }
            net.zero_grad();
            loss.backward()?;
            adam.step(&params)?;
            epoch_loss += loss_value;
            batches += 1;
        }

        let val_soft_dice = validation_soft_dice(net, &val_prepared, cfg)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_soft_dice,
            wall_time_s: started.elapsed().as_secs_f64(),
        });

        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_ref()) {
            if every > 0 && (epoch + 1) % every == 0 {
                std::fs::create_dir_all(dir)?;
                crate::checkpoint::save_checkpoint(
                    &dir.join(format!("epoch_{:05}.ckpt", epoch + 1)),
                    net,
                )?;
            }
        }
    }
    history.optimizer_steps = adam.step_count();
    Ok(history)
}

fn validation_soft_dice<T: Scalar>(
    net: &Network<T>,
    val_prepared: &[Prepared<T>],
    cfg: &TrainConfig,
) -> Result<f64> {
    if val_prepared.is_empty() {
        return Ok(f64::NAN);
    }
    let (h, w) = cfg.input_size;
    let mut total = 0.0;
    for p in val_prepared {
        let image = Tensor::from_vec(&[1, 1, h, w], p.image.clone())?;
        let mask = Tensor::from_vec(&[1, 1, h, w], p.mask.clone())?;
        let pred = net.forward(&image, Mode::Eval)?;
        total += soft_dice(&pred, &mask, &cfg.loss)?.item()?.to_f64();
    }
    Ok(total / val_prepared.len() as f64)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Run the frozen network over records at the configured input size,
/// threshold at 0.5, map the predicted mask back to each record's native
/// resolution, and score with native pixel sizes.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    records: &[DatasetRecord],
    input_size: (usize, usize),
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let (h, w) = input_size;
    let half = T::from_f64(0.5);
    let mut pairs = Vec::with_capacity(records.len());
    for rec in records {
        let resized = resize_record(rec, input_size);
        let image: Vec<T> = resized
            .image
            .data()
            .iter()
            .map(|&v| T::from_f64(v as f64))
            .collect();
        let input = Tensor::from_vec(&[1, 1, h, w], image)?;
        let prob = net.forward(&input, Mode::Eval)?;
        let mut pred_small = Mask::new(h, w);
        {
            let values = prob.values();
            for r in 0..h {
                for c in 0..w {
                    pred_small.set(r, c, values[r * w + c] > half);
                }
            }
        }
        let pred = resize_nearest(&pred_small, (rec.mask.height(), rec.mask.width()));
        pairs.push(EvalPair {
            id: rec.id.clone(),
            pred,
            gt: rec.mask.clone(),
            gt_hc_mm: rec.hc_gt_mm,
            pixel_size_mm: rec.pixel_size_mm,
        });
    }
    evaluate_set(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::net::{build_network, NetworkConfig};

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let p = Tensor::<f64>::param(&[1], vec![0.0]).unwrap();
        let params = vec![("theta".to_string(), p.clone())];
        let mut adam = AdamState::new(&params, 0.001);
        p.accumulate_grad(&[1.0]);
        adam.step(&params).unwrap();
        // bias-corrected m_hat = v_hat = 1 at t = 1
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.to_vec()[0] - expected).abs() < 1e-15);
        assert!((p.to_vec()[0] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let p = Tensor::<f64>::param(&[3], vec![0.5, -0.25, 2.0]).unwrap();
        let params = vec![("w".to_string(), p.clone())];
        let mut adam = AdamState::new(&params, 0.01);
        for _ in 0..3 {
            p.zero_grad();
            p.accumulate_grad(&[0.0, 0.0, 0.0]);
            adam.step(&params).unwrap();
        }
        assert_eq!(p.to_vec(), vec![0.5, -0.25, 2.0]);
    }

    #[test]
    fn adam_is_deterministic_across_identical_runs() {
        let run = || {
            let p = Tensor::<f64>::param(&[2], vec![1.0, -1.0]).unwrap();
            let params = vec![("w".to_string(), p.clone())];
            let mut adam = AdamState::new(&params, 0.05);
            for k in 0..5 {
                p.zero_grad();
                p.accumulate_grad(&[0.1 * k as f64, -0.3]);
                adam.step(&params).unwrap();
            }
            p.to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let p = Tensor::<f64>::param(&[1], vec![0.0]).unwrap();
        let params = vec![("w.bad".to_string(), p.clone())];
        let mut adam = AdamState::new(&params, 0.01);
        p.accumulate_grad(&[f64::NAN]);
        let err = adam.step(&params).unwrap_err().to_string();
        assert!(err.contains("w.bad"), "{err}");
    }

    #[test]
    fn paper_default_train_config() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.epochs, 150);
        assert_eq!(cfg.batch_size, 10);
    }

    fn toy_setup(epochs: usize, batch: usize) -> (Network<f32>, Vec<DatasetRecord>, TrainConfig) {
        let records = synth_generate(&SynthSpec::desk_default(8, 32, 123)).unwrap();
        let cfg = TrainConfig {
            epochs,
            batch_size: batch,
            lr: 0.01,
            seed: 7,
            input_size: (32, 32),
            variant: Variant::MsMiniLinknet,
            base_channels: 4,
            ..TrainConfig::default()
        };
        let net_cfg = NetworkConfig::new(cfg.variant, cfg.input_size, cfg.base_channels);
        let net = build_network::<f32>(&net_cfg, cfg.seed).unwrap();
        (net, records, cfg)
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let (net, records, cfg) = toy_setup(0, 4);
        let before: Vec<Vec<f32>> = net.parameters().iter().map(|(_, p)| p.to_vec()).collect();
        let history = train(&net, &records, &records, &cfg).unwrap();
        assert!(history.epochs.is_empty());
        assert_eq!(history.optimizer_steps, 0);
        let after: Vec<Vec<f32>> = net.parameters().iter().map(|(_, p)| p.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn one_epoch_performs_ceil_n_over_batch_steps() {
        let (net, records, cfg) = toy_setup(1, 3);
        let history = train(&net, &records, &[], &cfg).unwrap();
        // 8 records, batch 3 -> 3 optimizer steps (last partial batch kept)
        assert_eq!(history.optimizer_steps, 3);
        assert_eq!(history.epochs.len(), 1);
    }

    #[test]
    fn short_training_reduces_loss() {
        let (net, records, cfg) = toy_setup(12, 4);
        let history = train(&net, &records, &records, &cfg).unwrap();
        let first = history.epochs.first().unwrap().train_loss;
        let last = history.epochs.last().unwrap().train_loss;
        assert!(
            last < first,
            "loss should drop over 12 toy epochs: {first} -> {last}"
        );
        assert!(history.epochs.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (net, records, cfg) = toy_setup(3, 4);
            let history = train(&net, &records, &records, &cfg).unwrap();
            let params: Vec<Vec<f32>> = net.parameters().iter().map(|(_, p)| p.to_vec()).collect();
            (
                params,
                history
                    .epochs
                    .iter()
                    .map(|e| (e.train_loss, e.val_soft_dice))
                    .collect::<Vec<_>>(),
            )
        };
        let (p1, h1) = run();
        let (p2, h2) = run();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn evaluate_is_deterministic_and_reports_all_records() {
        let (net, records, cfg) = toy_setup(2, 4);
        train(&net, &records, &[], &cfg).unwrap();
        let a = evaluate(&net, &records, cfg.input_size).unwrap();
        let b = evaluate(&net, &records, cfg.input_size).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.rows.len() + a.failed.len(), records.len());
    }

    #[test]
    fn history_tsv_has_one_row_per_epoch() {
        let (net, records, cfg) = toy_setup(2, 8);
        let history = train(&net, &records, &records, &cfg).unwrap();
        let tsv = history.to_tsv();
        assert_eq!(tsv.lines().count(), 3); // header + 2 epochs
        assert!(tsv.starts_with("epoch\ttrain_loss\tval_soft_dice\twall_time_s"));
    }
}
