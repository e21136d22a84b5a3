//! Training objective: boundary-weighted binary cross-entropy plus soft Dice.
//!
//! The per-pixel weight emphasizes ground-truth boundary neighborhoods:
//! `w(x) = 1 + omega0 * exp(-d(x)^2 / (2 sigma^2))` where `d(x)` is the exact
//! Euclidean distance (in pixels) to the nearest mask boundary pixel. The
//! exponent as printed in the source material grows with distance instead;
//! it is available behind [`ExponentForm::Literal`] for comparison.

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExponentForm {
    /// `exp(-d^2 / (2 sigma^2))`: decays away from the boundary (default).
    Gaussian,
    /// `exp(d / (2 sigma^2))`: the formula exactly as printed; grows with
    /// distance. Kept for side-by-side comparison, not for training.
    Literal,
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub omega0: f64,
    /// Gaussian kernel width in pixels.
    pub sigma: f64,
    /// Probabilities are clamped to `[eps, 1-eps]` before logs.
    pub clamp_epsilon: f64,
    /// Additive smoothing in the soft Dice ratio.
    pub smooth_epsilon: f64,
    pub exponent_form: ExponentForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            omega0: 30.0,
            sigma: 10.0,
            clamp_epsilon: 1e-7,
            smooth_epsilon: 1.0,
            exponent_form: ExponentForm::Gaussian,
        }
    }
}

impl LossConfig {
    fn validate(&self) -> Result<()> {
        if self.omega0 < 0.0 {
            return Err(Error::InvalidArgument("omega0 must be >= 0".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidArgument("sigma must be > 0".into()));
        }
        if self.clamp_epsilon <= 0.0 || self.smooth_epsilon <= 0.0 {
            return Err(Error::InvalidArgument("epsilons must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-pixel loss weights derived from a ground-truth mask.
#[derive(Debug, Clone)]
pub struct WeightMap {
    weights: Grid<f64>,
}

impl WeightMap {
    pub fn grid(&self) -> &Grid<f64> {
        &self.weights
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.weights
    }
}

// ---------------------------------------------------------------------------
// Exact Euclidean distance transform (squared-distance lower envelope).
// ---------------------------------------------------------------------------

/// Large finite stand-in for "no seed here"; squared pixel distances on any
/// realistic grid stay far below it.
const EDT_INF: f64 = 1e20;

/// One-dimensional squared distance transform of sampled cost `f`.
fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] {
                if k == 0 {
                    // Replace the lone parabola.
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        d[q] = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest seed, for every pixel.
fn edt_squared(seeds: &Grid<bool>) -> Grid<f64> {
    let h = seeds.height();
    let w = seeds.width();
    let mut field = Grid::<f64>::new(h, w);
    // Column pass over initial costs.
    {
        let mut f = vec![0.0; h];
        let mut d = vec![0.0; h];
        let mut v = vec![0usize; h];
        let mut z = vec![0.0; h + 1];
        for col in 0..w {
            for row in 0..h {
                f[row] = if seeds.get(row, col) { 0.0 } else { EDT_INF };
            }
            dt1d(&f, &mut d, &mut v, &mut z);
            for row in 0..h {
                field.set(row, col, d[row]);
            }
        }
    }
    // Row pass over the column result.
    {
        let mut f = vec![0.0; w];
        let mut d = vec![0.0; w];
        let mut v = vec![0usize; w];
        let mut z = vec![0.0; w + 1];
        for row in 0..h {
            for col in 0..w {
                f[col] = field.get(row, col);
            }
            dt1d(&f, &mut d, &mut v, &mut z);
            for col in 0..w {
                field.set(row, col, d[col]);
            }
        }
    }
    field
}

/// Exact Euclidean distance from each pixel to the nearest ground-truth
/// boundary pixel; zero exactly on boundary pixels.
///
/// Boundary pixels are foreground pixels 4-adjacent to background or on the
/// image border. A mask with no foreground has no boundary and errors.
pub fn distance_map(mask: &Mask) -> Result<Grid<f64>> {
    let boundary = mask.boundary_pixels();
    if boundary.is_empty() {
        return Err(Error::EmptyBoundary(
            "weight map undefined for a mask without foreground".into(),
        ));
    }
    let mut seeds = Grid::<bool>::new(mask.height(), mask.width());
    for &(r, c) in &boundary {
        seeds.set(r, c, true);
    }
    let sq = edt_squared(&seeds);
    Ok(sq.map(|v| v.sqrt()))
}

/// Per-pixel weights `w(x) = 1 + omega0 * exp(.)` per the configured
/// exponent form.
pub fn weight_map(mask: &Mask, cfg: &LossConfig) -> Result<WeightMap> {
    cfg.validate()?;
    let d = distance_map(mask)?;
    let two_sigma_sq = 2.0 * cfg.sigma * cfg.sigma;
    let omega0 = cfg.omega0;
    let weights = match cfg.exponent_form {
        ExponentForm::Gaussian => d.map(|d| 1.0 + omega0 * (-d * d / two_sigma_sq).exp()),
        ExponentForm::Literal => d.map(|d| 1.0 + omega0 * (d / two_sigma_sq).exp()),
    };
    Ok(WeightMap { weights })
}

// ---------------------------------------------------------------------------
// Differentiable loss terms
// ---------------------------------------------------------------------------

/// Soft Dice similarity `(2 sum(p*g) + eps) / (sum p + sum g + eps)`.
///
/// On binary `pred` this reduces to `2TP / (2TP + FN + FP)` as `eps -> 0`.
pub fn soft_dice<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if pred.shape() != gt.shape() {
        return Err(Error::shape_mismatch(pred.shape(), gt.shape(), "soft_dice"));
    }
    let eps = T::from_f64(cfg.smooth_epsilon);
    let inter = pred.mul(gt)?.sum(None)?;
    let num = inter.mul_scalar(T::from_f64(2.0))?.add_scalar(eps)?;
    let den = pred.sum(None)?.add(&gt.sum(None)?)?.add_scalar(eps)?;
    num.div(&den)
}

/// Per-pixel binary cross-entropy `-(G log P + (1-G) log(1-P))`, with `P`
/// clamped to `[eps, 1-eps]`.
pub fn bce_pixelwise<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if pred.shape() != gt.shape() {
        return Err(Error::shape_mismatch(pred.shape(), gt.shape(), "bce"));
    }
    let eps = T::from_f64(cfg.clamp_epsilon);
    let p = pred.clamp(eps, T::one() - eps)?;
    let pos = gt.mul(&p.log()?)?;
    let neg = gt
        .sub_from_scalar(T::one())?
        .mul(&p.sub_from_scalar(T::one())?.log()?)?;
    pos.add(&neg)?.mul_scalar(-T::one())
}

/// Mean binary cross-entropy over all pixels.
pub fn bce<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    bce_pixelwise(pred, gt, cfg)?.mean(None)
}

/// Combined training loss: `mean(w * bce) + (1 - soft_dice)`.
///
/// The weight map is derived from `gt`, which must hold binary values laid
/// out as one or more 2-D masks in its trailing two dimensions.
pub fn l_ln<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    let weights = weight_tensor_for(gt, cfg)?;
    l_ln_with_weights(pred, gt, &weights, cfg)
}

/// [`l_ln`] with precomputed weights (training hot path caches them per mask).
pub fn l_ln_with_weights<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    weights: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape_mismatch(pred.shape(), gt.shape(), "l_ln"));
    }
    if weights.shape() != gt.shape() {
        return Err(Error::shape_mismatch(
            weights.shape(),
            gt.shape(),
            "l_ln weights",
        ));
    }
    let weighted_bce = bce_pixelwise(pred, gt, cfg)?.mul(weights)?.mean(None)?;
    let dice_term = soft_dice(pred, gt, cfg)?.sub_from_scalar(T::one())?;
    weighted_bce.add(&dice_term)
}

/// Build the per-pixel weight tensor for a batch of ground-truth masks.
///
/// The trailing two dimensions of `gt` are interpreted as (height, width);
/// any leading dimensions are batch-like and get independent weight maps.
pub fn weight_tensor_for<T: Scalar>(gt: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    let shape = gt.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "weight map needs at least 2-D ground truth, got {shape:?}"
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let images = gt.numel() / (h * w);
    let mut out = Vec::with_capacity(gt.numel());
    {
        let gt_values = gt.values();
        for i in 0..images {
            let offset = i * h * w;
            let mut mask = Mask::new(h, w);
            for r in 0..h {
                for c in 0..w {
                    mask.set(r, c, gt_values[offset + r * w + c].to_f64() > 0.5);
                }
            }
            let wm = weight_map(&mask, cfg)?;
            out.extend(wm.grid().data().iter().map(|&v| T::from_f64(v)));
        }
    }
    Tensor::from_vec(&shape, out)
}
