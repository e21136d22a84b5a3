//! The four network variants: LinkNet, multi-scale LinkNet, mini-LinkNet,
//! and multi-scale mini-LinkNet.
//!
//! Encoder: an initial 7x7/stride-2 conv + 3x3/stride-2 max pool, then
//! stages of two residual basic blocks each at channel widths
//! `base * {1, 2, 4, 8}` (stages 2+ halve resolution with a projected
//! shortcut). Decoders mirror the encoder with 1x1 reduce, 3x3 transposed
//! conv, 1x1 expand, and additive skips from the matching encoder stage.
//! The head upsamples back to input resolution and ends in a sigmoid, so
//! outputs are probability maps in (0, 1).
//!
//! The mini variants drop the deepest encoder/decoder pair (channels stop at
//! `base * 4`), which is what cuts the parameter count to about a quarter.
//! The multi-scale variants concatenate a half-resolution copy of the raw
//! input with the initial conv output and fuse with a 1x1 conv.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    batchnorm2d, conv2d, downsample_half, maxpool2d, transposed_conv2d, BatchNormState, ConvSpec,
    Mode,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Linknet,
    MsLinknet,
    MiniLinknet,
    MsMiniLinknet,
}

impl Variant {
    pub fn encoder_blocks(self) -> usize {
        match self {
            Variant::Linknet | Variant::MsLinknet => 4,
            Variant::MiniLinknet | Variant::MsMiniLinknet => 3,
        }
    }

    pub fn multi_scale(self) -> bool {
        matches!(self, Variant::MsLinknet | Variant::MsMiniLinknet)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Linknet => "linknet",
            Variant::MsLinknet => "ms-linknet",
            Variant::MiniLinknet => "mini-linknet",
            Variant::MsMiniLinknet => "ms-mini-linknet",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linknet" => Ok(Variant::Linknet),
            "ms-linknet" => Ok(Variant::MsLinknet),
            "mini-linknet" => Ok(Variant::MiniLinknet),
            "ms-mini-linknet" => Ok(Variant::MsMiniLinknet),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}' (expected linknet, ms-linknet, mini-linknet, ms-mini-linknet)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// (height, width) of network inputs.
    pub input_size: (usize, usize),
    pub input_channels: usize,
    /// 64 for paper-faithful builds, smaller for desk scale.
    pub base_channels: usize,
    pub encoder_blocks: usize,
}

impl NetworkConfig {
    pub fn new(variant: Variant, input_size: (usize, usize), base_channels: usize) -> Self {
        NetworkConfig {
            variant,
            input_size,
            input_channels: 1,
            base_channels,
            encoder_blocks: variant.encoder_blocks(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_blocks != self.variant.encoder_blocks() {
            return Err(Error::InvalidArgument(format!(
                "variant {} requires {} encoder blocks, config has {}",
                self.variant.as_str(),
                self.variant.encoder_blocks(),
                self.encoder_blocks
            )));
        }
        if self.input_channels == 0 || self.base_channels == 0 {
            return Err(Error::InvalidArgument(
                "channel counts must be positive".into(),
            ));
        }
        let divisor = 1usize << (self.encoder_blocks + 2);
        if self.input_size.0 % divisor != 0 || self.input_size.1 % divisor != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {}x{} must be divisible by {divisor}",
                self.input_size.0, self.input_size.1
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Conv<T: Scalar> {
    name: String,
    weights: Tensor<T>,
    bias: Option<Tensor<T>>,
    spec: ConvSpec,
    transposed: bool,
}

impl<T: Scalar> Conv<T> {
    fn init(name: &str, spec: ConvSpec, transposed: bool, rng: &mut ChaCha8Rng) -> Self {
        let shape = if transposed {
            [spec.in_channels, spec.out_channels, spec.kernel.0, spec.kernel.1]
        } else {
            [spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1]
        };
        // Uniform fan-in scaling with relu gain; keeps activation magnitude
        // roughly constant through depth so a freshly built net is live even
        // in eval mode.
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values: Vec<T> = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        let weights = Tensor::param(&shape, values).expect("conv weight shape");
        let bias = spec.has_bias.then(|| {
            Tensor::param(&[spec.out_channels], vec![T::zero(); spec.out_channels])
                .expect("conv bias shape")
        });
        Conv {
            name: name.to_string(),
            weights,
            bias,
            spec,
            transposed,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.transposed {
            transposed_conv2d(x, &self.weights, self.bias.as_ref(), &self.spec)
        } else {
            conv2d(x, &self.weights, self.bias.as_ref(), &self.spec)
        }
    }

    fn collect(&self, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{}.weight", self.name), self.weights.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{}.bias", self.name), b.clone()));
        }
    }
}

struct Bn<T: Scalar> {
    name: String,
    state: BatchNormState<T>,
}

impl<T: Scalar> Bn<T> {
    fn new(name: &str, channels: usize) -> Self {
        Bn {
            name: name.to_string(),
            state: BatchNormState::new(channels),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        batchnorm2d(x, &self.state, mode)
    }

    fn collect(&self, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{}.gamma", self.name), self.state.gamma.clone()));
        out.push((format!("{}.beta", self.name), self.state.beta.clone()));
    }
}

fn conv_bn<T: Scalar>(
    name: &str,
    spec: ConvSpec,
    transposed: bool,
    rng: &mut ChaCha8Rng,
) -> (Conv<T>, Bn<T>) {
    let ch = spec.out_channels;
    let conv = Conv::init(name, spec.bias(false), transposed, rng);
    let bn = Bn::new(&format!("{name}.bn"), ch);
    (conv, bn)
}

/// Residual basic block: two 3x3 convs with a projected shortcut when the
/// shape changes.
struct BasicBlock<T: Scalar> {
    conv1: Conv<T>,
    bn1: Bn<T>,
    conv2: Conv<T>,
    bn2: Bn<T>,
    projection: Option<(Conv<T>, Bn<T>)>,
}

impl<T: Scalar> BasicBlock<T> {
    fn init(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let (conv1, bn1) = conv_bn(
            &format!("{name}.conv1"),
            ConvSpec::new(in_ch, out_ch, (3, 3))
                .stride((stride, stride))
                .padding((1, 1)),
            false,
            rng,
        );
        let (conv2, bn2) = conv_bn(
            &format!("{name}.conv2"),
            ConvSpec::new(out_ch, out_ch, (3, 3)).padding((1, 1)),
            false,
            rng,
        );
        let projection = (stride != 1 || in_ch != out_ch).then(|| {
            conv_bn(
                &format!("{name}.proj"),
                ConvSpec::new(in_ch, out_ch, (1, 1)).stride((stride, stride)),
                false,
                rng,
            )
        });
        BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let main = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let main = self.bn2.forward(&self.conv2.forward(&main)?, mode)?;
        let shortcut = match &self.projection {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        main.add(&shortcut)?.relu()
    }

    fn collect(&self, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv1.collect(out);
        self.bn1.collect(out);
        self.conv2.collect(out);
        self.bn2.collect(out);
        if let Some((conv, bn)) = &self.projection {
            conv.collect(out);
            bn.collect(out);
        }
    }

    fn bn_states(&self) -> Vec<(&str, &BatchNormState<T>)> {
        let mut v = vec![
            (self.bn1.name.as_str(), &self.bn1.state),
            (self.bn2.name.as_str(), &self.bn2.state),
        ];
        if let Some((_, bn)) = &self.projection {
            v.push((bn.name.as_str(), &bn.state));
        }
        v
    }
}

/// Encoder stage: two basic blocks; the first downsamples for stages 2+.
struct EncoderStage<T: Scalar> {
    block1: BasicBlock<T>,
    block2: BasicBlock<T>,
}

impl<T: Scalar> EncoderStage<T> {
    fn init(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderStage {
            block1: BasicBlock::init(&format!("{name}.block1"), in_ch, out_ch, stride, rng),
            block2: BasicBlock::init(&format!("{name}.block2"), out_ch, out_ch, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.block2.forward(&self.block1.forward(x, mode)?, mode)
    }
}

/// Decoder block: 1x1 reduce to a quarter, 3x3 transposed conv (stride 2 for
/// the upsampling stages), 1x1 expand.
struct DecoderBlock<T: Scalar> {
    reduce: Conv<T>,
    bn1: Bn<T>,
    up: Conv<T>,
    bn2: Bn<T>,
    expand: Conv<T>,
    bn3: Bn<T>,
}

impl<T: Scalar> DecoderBlock<T> {
    fn init(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = (in_ch / 4).max(1);
        let (reduce, bn1) = conv_bn(
            &format!("{name}.reduce"),
            ConvSpec::new(in_ch, mid, (1, 1)),
            false,
            rng,
        );
        let up_spec = ConvSpec::new(mid, mid, (3, 3))
            .stride((stride, stride))
            .padding((1, 1))
            .output_padding(if stride == 2 { (1, 1) } else { (0, 0) });
        let (up, bn2) = conv_bn(&format!("{name}.up"), up_spec, true, rng);
        let (expand, bn3) = conv_bn(
            &format!("{name}.expand"),
            ConvSpec::new(mid, out_ch, (1, 1)),
            false,
            rng,
        );
        DecoderBlock {
            reduce,
            bn1,
            up,
            bn2,
            expand,
            bn3,
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let x = self.bn1.forward(&self.reduce.forward(x)?, mode)?.relu()?;
        let x = self.bn2.forward(&self.up.forward(&x)?, mode)?.relu()?;
        self.bn3.forward(&self.expand.forward(&x)?, mode)?.relu()
    }

    fn collect(&self, out: &mut Vec<(String, Tensor<T>)>) {
        self.reduce.collect(out);
        self.bn1.collect(out);
        self.up.collect(out);
        self.bn2.collect(out);
        self.expand.collect(out);
        self.bn3.collect(out);
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

pub struct Network<T: Scalar> {
    config: NetworkConfig,
    seed: u64,
    init_conv: Conv<T>,
    init_bn: Bn<T>,
    /// 1x1 fusion conv after concatenating the half-scale input (ms only).
    ms_fuse: Option<(Conv<T>, Bn<T>)>,
    encoders: Vec<EncoderStage<T>>,
    decoders: Vec<DecoderBlock<T>>,
    head_up1: Conv<T>,
    head_bn1: Bn<T>,
    head_conv: Conv<T>,
    head_bn2: Bn<T>,
    head_up2: Conv<T>,
}

/// Build a parameterized network from its configuration, deterministically
/// for a fixed seed.
pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = config.base_channels;
    let blocks = config.encoder_blocks;
    let channels: Vec<usize> = (0..blocks).map(|i| base << i).collect();

    let (init_conv, init_bn) = conv_bn(
        "init.conv",
        ConvSpec::new(config.input_channels, base, (7, 7))
            .stride((2, 2))
            .padding((3, 3)),
        false,
        &mut rng,
    );
    let ms_fuse = config.variant.multi_scale().then(|| {
        conv_bn(
            "init.fuse",
            ConvSpec::new(base + config.input_channels, base, (1, 1)),
            false,
            &mut rng,
        )
    });

    let mut encoders = Vec::new();
    for i in 0..blocks {
        let in_ch = if i == 0 { base } else { channels[i - 1] };
        let stride = if i == 0 { 1 } else { 2 };
        encoders.push(EncoderStage::init(
            &format!("enc{}", i + 1),
            in_ch,
            channels[i],
            stride,
            &mut rng,
        ));
    }

    // Deepest decoder first; decoder i upsamples iff encoder i downsampled.
    let mut decoders = Vec::new();
    for i in (0..blocks).rev() {
        let out_ch = if i == 0 { base } else { channels[i - 1] };
        let stride = if i == 0 { 1 } else { 2 };
        decoders.push(DecoderBlock::init(
            &format!("dec{}", i + 1),
            channels[i],
            out_ch,
            stride,
            &mut rng,
        ));
    }

    let (head_up1, head_bn1) = conv_bn(
        "head.up1",
        ConvSpec::new(base, base / 2, (3, 3))
            .stride((2, 2))
            .padding((1, 1))
            .output_padding((1, 1)),
        true,
        &mut rng,
    );
    let (head_conv, head_bn2) = conv_bn(
        "head.conv",
        ConvSpec::new(base / 2, base / 2, (3, 3)).padding((1, 1)),
        false,
        &mut rng,
    );
    let head_up2 = Conv::init(
        "head.up2",
        ConvSpec::new(base / 2, 1, (2, 2)).stride((2, 2)),
        true,
        &mut rng,
    );

    Ok(Network {
        config: config.clone(),
        seed,
        init_conv,
        init_bn,
        ms_fuse,
        encoders,
        decoders,
        head_up1,
        head_bn1,
        head_conv,
        head_bn2,
        head_up2,
    })
}

impl<T: Scalar> Network<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Probability map forward pass: `(n, c, h, w) -> (n, 1, h, w)` in (0, 1).
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.forward_ablated(batch, mode, false)
    }

    /// Forward pass with an optional ablation that zeroes the half-scale
    /// input branch. Non-multi-scale variants ignore the flag entirely.
    pub fn forward_ablated(
        &self,
        batch: &Tensor<T>,
        mode: Mode,
        zero_half_scale: bool,
    ) -> Result<Tensor<T>> {
        let shape = batch.shape();
        let expected = [
            shape.first().copied().unwrap_or(0),
            self.config.input_channels,
            self.config.input_size.0,
            self.config.input_size.1,
        ];
        if shape.len() != 4 || shape[1..] != expected[1..] {
            return Err(Error::shape_mismatch(shape, &expected, "network input"));
        }

        let mut x = self
            .init_bn
            .forward(&self.init_conv.forward(batch)?, mode)?
            .relu()?;
        if let Some((fuse, bn)) = &self.ms_fuse {
            let half = downsample_half(batch)?;
            let half = if zero_half_scale {
                half.mul_scalar(T::zero())?
            } else {
                half
            };
            let cat = Tensor::concat(&[x, half], 1)?;
            x = bn.forward(&fuse.forward(&cat)?, mode)?.relu()?;
        }
        let x = maxpool2d(&x, (3, 3), (2, 2), (1, 1))?;

        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut cur = x;
        for enc in &self.encoders {
            cur = enc.forward(&cur, mode)?;
            skips.push(cur.clone());
        }

        // decoders[0] is the deepest stage.
        let mut d = self.decoders[0].forward(&cur, mode)?;
        for (k, dec) in self.decoders.iter().enumerate().skip(1) {
            let skip_idx = self.encoders.len() - 1 - k;
            d = dec.forward(&d.add(&skips[skip_idx])?, mode)?;
        }

        let h = self
            .head_bn1
            .forward(&self.head_up1.forward(&d)?, mode)?
            .relu()?;
        let h = self
            .head_bn2
            .forward(&self.head_conv.forward(&h)?, mode)?
            .relu()?;
        self.head_up2.forward(&h)?.sigmoid()
    }

    /// Trainable parameters, named, in a fixed deterministic order. Every
    /// tensor appears exactly once.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.init_conv.collect(&mut out);
        self.init_bn.collect(&mut out);
        if let Some((fuse, bn)) = &self.ms_fuse {
            fuse.collect(&mut out);
            bn.collect(&mut out);
        }
        for enc in &self.encoders {
            enc.block1.collect(&mut out);
            enc.block2.collect(&mut out);
        }
        for dec in &self.decoders {
            dec.collect(&mut out);
        }
        self.head_up1.collect(&mut out);
        self.head_bn1.collect(&mut out);
        self.head_conv.collect(&mut out);
        self.head_bn2.collect(&mut out);
        self.head_up2.collect(&mut out);
        out
    }

    /// Batch-norm states (for running statistics), named, fixed order.
    pub fn batchnorm_states(&self) -> Vec<(String, &BatchNormState<T>)> {
        let mut out: Vec<(String, &BatchNormState<T>)> = Vec::new();
        out.push((self.init_bn.name.clone(), &self.init_bn.state));
        if let Some((_, bn)) = &self.ms_fuse {
            out.push((bn.name.clone(), &bn.state));
        }
        for enc in &self.encoders {
            for (name, state) in enc
                .block1
                .bn_states()
                .into_iter()
                .chain(enc.block2.bn_states())
            {
                out.push((name.to_string(), state));
            }
        }
        for dec in &self.decoders {
            for bn in [&dec.bn1, &dec.bn2, &dec.bn3] {
                out.push((bn.name.clone(), &bn.state));
            }
        }
        out.push((self.head_bn1.name.clone(), &self.head_bn1.state));
        out.push((self.head_bn2.name.clone(), &self.head_bn2.state));
        out
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }
}

/// Total element count across trainable tensors (conv weights and biases,
/// batch-norm gamma/beta; running statistics excluded).
pub fn count_parameters<T: Scalar>(net: &Network<T>) -> usize {
    net.parameters().iter().map(|(_, p)| p.numel()).sum()
}
