//! Evaluation suite: pixel Dice, Hausdorff distance, ellipse-based head
//! circumference extraction, and the per-image / aggregate report.
//!
//! Head circumference is measured by fitting an ellipse to the boundary of
//! the predicted mask (direct least-squares conic fit constrained to
//! ellipses) and evaluating Ramanujan's second perimeter approximation,
//! scaled by the physical pixel size.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Mask;

/// Geometric ellipse: center and semi-axes in pixels, rotation of the major
/// axis in radians, normalized to `[0, pi)` with `a >= b > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EllipseParams {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation: f64,
}

impl EllipseParams {
    /// Sample `n` points on the boundary, as `(x, y)`.
    pub fn sample_points(&self, n: usize) -> Vec<(f64, f64)> {
        let (cx, cy) = self.center;
        let (a, b) = self.semi_axes;
        let (sin_t, cos_t) = self.rotation.sin_cos();
        (0..n)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let px = a * t.cos();
                let py = b * t.sin();
                (cx + cos_t * px - sin_t * py, cy + sin_t * px + cos_t * py)
            })
            .collect()
    }

    /// Whether the point `(x, y)` lies inside or on the ellipse.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.center;
        let (a, b) = self.semi_axes;
        let (sin_t, cos_t) = self.rotation.sin_cos();
        let dx = x - cx;
        let dy = y - cy;
        let u = cos_t * dx + sin_t * dy;
        let v = -sin_t * dx + cos_t * dy;
        (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
    }
}

// ---------------------------------------------------------------------------
// Pixel Dice
// ---------------------------------------------------------------------------

/// Dice overlap `2TP / (2TP + FN + FP)` from exact confusion counts.
/// Two empty masks count as a perfect match.
pub fn pixel_dice(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape_mismatch(&a.shape(), &b.shape(), "pixel_dice"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        match (x, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fn_ + fp == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fn_ + fp) as f64)
}

// ---------------------------------------------------------------------------
// Boundary extraction and Hausdorff distance
// ---------------------------------------------------------------------------

/// Foreground pixels 4-adjacent to background or on the image border, as
/// `(x, y)` points in row-major order.
pub fn extract_boundary(mask: &Mask) -> Result<Vec<(f64, f64)>> {
    if mask.count_foreground() == 0 {
        return Err(Error::EmptyBoundary("empty mask".into()));
    }
    Ok(mask
        .boundary_pixels()
        .into_iter()
        .map(|(r, c)| (c as f64, r as f64))
        .collect())
}

fn directed_hausdorff(s: &[(f64, f64)], r: &[(f64, f64)]) -> f64 {
    let mut worst = 0.0f64;
    for &(sx, sy) in s {
        let mut best = f64::INFINITY;
        for &(rx, ry) in r {
            let d2 = (sx - rx) * (sx - rx) + (sy - ry) * (sy - ry);
            if d2 < best {
                best = d2;
                if best == 0.0 {
                    break;
                }
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst.sqrt()
}

/// Symmetric Hausdorff distance `max(h(S,R), h(R,S))` with the Euclidean
/// norm, scaled to millimetres by `pixel_size_mm`.
pub fn hausdorff(s: &[(f64, f64)], r: &[(f64, f64)], pixel_size_mm: f64) -> Result<f64> {
    if s.is_empty() || r.is_empty() {
        return Err(Error::EmptyBoundary(
            "hausdorff distance needs two nonempty point sets".into(),
        ));
    }
    Ok(directed_hausdorff(s, r).max(directed_hausdorff(r, s)) * pixel_size_mm)
}

// ---------------------------------------------------------------------------
// Direct least-squares ellipse fit
// ---------------------------------------------------------------------------

/// Real roots of `x^3 + c2 x^2 + c1 x + c0 = 0`.
fn cubic_real_roots(c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    let p = c1 - c2 * c2 / 3.0;
    let q = 2.0 * c2 * c2 * c2 / 27.0 - c2 * c1 / 3.0 + c0;
    let shift = -c2 / 3.0;
    let disc = (q / 2.0) * (q / 2.0) + (p / 3.0) * (p / 3.0) * (p / 3.0);
    if disc > 1e-300 {
        let s = disc.sqrt();
        let t = (-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt();
        vec![t + shift]
    } else if p.abs() < 1e-300 {
        vec![(-q).cbrt() + shift]
    } else {
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + shift)
            .collect()
    }
}

/// Null vector of a (near) rank-2 matrix via the largest row cross product.
fn null_vector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let r0 = Vector3::new(m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let r1 = Vector3::new(m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let r2 = Vector3::new(m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let candidates = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = candidates
        .iter()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))?;
    if best.norm() < 1e-12 {
        return None;
    }
    Some(best / best.norm())
}

/// Direct least-squares conic fit constrained to ellipses.
///
/// Needs at least 6 points in general position; collinear or otherwise
/// degenerate input is rejected.
pub fn fit_ellipse(points: &[(f64, f64)]) -> Result<EllipseParams> {
    if points.len() < 6 {
        return Err(Error::EllipseFit(format!(
            "need at least 6 points, got {}",
            points.len()
        )));
    }
    // Normalize for conditioning: centroid at origin, mean radius sqrt(2).
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let scale = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        return Err(Error::EllipseFit("all points coincide".into()));
    };

    // Scatter blocks of the design matrix [x^2 xy y^2 | x y 1].
    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for &(px, py) in points {
        let x = (px - mx) * scale;
        let y = (py - my) * scale;
        let d1 = Vector3::new(x * x, x * y, y * y);
        let d2 = Vector3::new(x, y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let s3_inv = s3
        .try_inverse()
        .ok_or_else(|| Error::EllipseFit("degenerate point configuration".into()))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // Reduced system: C1^-1 * M, with C1 encoding 4ac - b^2 > 0.
    let reduced = Matrix3::new(
        m[(2, 0)] / 2.0,
        m[(2, 1)] / 2.0,
        m[(2, 2)] / 2.0,
        -m[(1, 0)],
        -m[(1, 1)],
        -m[(1, 2)],
        m[(0, 0)] / 2.0,
        m[(0, 1)] / 2.0,
        m[(0, 2)] / 2.0,
    );

    let trace = reduced.trace();
    let minors = reduced[(0, 0)] * reduced[(1, 1)] - reduced[(0, 1)] * reduced[(1, 0)]
        + reduced[(0, 0)] * reduced[(2, 2)]
        - reduced[(0, 2)] * reduced[(2, 0)]
        + reduced[(1, 1)] * reduced[(2, 2)]
        - reduced[(1, 2)] * reduced[(2, 1)];
    let det = reduced.determinant();
    let mut best: Option<Vector3<f64>> = None;
    for lambda in cubic_real_roots(-trace, minors, -det) {
        let shifted = reduced - Matrix3::identity() * lambda;
        if let Some(v) = null_vector(&shifted) {
            if 4.0 * v[0] * v[2] - v[1] * v[1] > 0.0 {
                best = Some(v);
                break;
            }
        }
    }
    let a1 = best.ok_or_else(|| Error::EllipseFit("no elliptic solution".into()))?;
    let a2 = t * a1;

    // Denormalize x' = s(x-mx), y' = s(y-my) back to pixel coordinates.
    let (na, nb, nc, nd, ne, nf) = (a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]);
    let s2f = scale * scale;
    let a = na * s2f;
    let b = nb * s2f;
    let c = nc * s2f;
    let d = -2.0 * na * s2f * mx - nb * s2f * my + nd * scale;
    let e = -nb * s2f * mx - 2.0 * nc * s2f * my + ne * scale;
    let f = na * s2f * mx * mx + nb * s2f * mx * my + nc * s2f * my * my
        - nd * scale * mx
        - ne * scale * my
        + nf;

    conic_to_ellipse([a, b, c, d, e, f])
}

/// Convert `A x^2 + B xy + C y^2 + D x + E y + F = 0` to geometric form.
fn conic_to_ellipse(coeffs: [f64; 6]) -> Result<EllipseParams> {
    let [a, b, c, d, e, f] = coeffs;
    if b * b - 4.0 * a * c >= 0.0 {
        return Err(Error::EllipseFit("conic is not an ellipse".into()));
    }
    let q = Matrix2::new(a, b / 2.0, b / 2.0, c);
    let center = q
        .try_inverse()
        .map(|qi| qi * Vector2::new(-d / 2.0, -e / 2.0))
        .ok_or_else(|| Error::EllipseFit("degenerate quadratic form".into()))?;
    let (cx, cy) = (center[0], center[1]);
    let f0 = a * cx * cx + b * cx * cy + c * cy * cy + d * cx + e * cy + f;
    // Eigen-decompose the quadratic form; semi-axis_i = sqrt(-F0 / lambda_i).
    let half_tr = (a + c) / 2.0;
    let det_term = (((a - c) / 2.0).powi(2) + (b / 2.0).powi(2)).sqrt();
    let l1 = half_tr + det_term;
    let l2 = half_tr - det_term;
    let r1_sq = -f0 / l1;
    let r2_sq = -f0 / l2;
    if !(r1_sq > 0.0 && r2_sq > 0.0) {
        return Err(Error::EllipseFit("degenerate (point or imaginary) conic".into()));
    }
    // Smaller |lambda| carries the major axis.
    let (major_sq, minor_sq, major_lambda) = if r1_sq >= r2_sq {
        (r1_sq, r2_sq, l1)
    } else {
        (r2_sq, r1_sq, l2)
    };
    // Eigenvector of the quadratic form for major_lambda.
    let (vx, vy) = if (b / 2.0).abs() > 1e-12 {
        (b / 2.0, major_lambda - a)
    } else if (major_lambda - a).abs() < (major_lambda - c).abs() {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let mut rotation = vy.atan2(vx);
    if rotation < 0.0 {
        rotation += std::f64::consts::PI;
    }
    if rotation >= std::f64::consts::PI {
        rotation -= std::f64::consts::PI;
    }
    Ok(EllipseParams {
        center: (cx, cy),
        semi_axes: (major_sq.sqrt(), minor_sq.sqrt()),
        rotation,
    })
}

// ---------------------------------------------------------------------------
// Perimeter and head-circumference measurement
// ---------------------------------------------------------------------------

/// Ramanujan's second approximation of the ellipse perimeter, scaled to mm.
///
/// `pi (a+b) (1 + 3h / (10 + sqrt(4 - 3h)))`, `h = ((a-b)/(a+b))^2`.
/// Worst-case error over all eccentricities is below 0.05% (degenerate
/// `b -> 0` limit gives 3.9984 vs the exact 4).
pub fn ellipse_perimeter(e: &EllipseParams, pixel_size_mm: f64) -> f64 {
    let (a, b) = e.semi_axes;
    let h = ((a - b) / (a + b)).powi(2);
    std::f64::consts::PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
        * pixel_size_mm
}

/// One head-circumference measurement against ground truth.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HcMeasurement {
    pub hc_pred_mm: f64,
    /// Signed difference `HC_pred - HC_gt`.
    pub df_mm: f64,
    /// Absolute difference `|HC_pred - HC_gt|`.
    pub adf_mm: f64,
    pub ellipse: EllipseParams,
}

/// Fit an ellipse to the predicted mask boundary and compare its perimeter
/// against the ground-truth circumference.
///
/// The boundary points are centers of the outermost foreground pixels and
/// sit on average half a pixel inside the continuous head contour, so the
/// fitted semi-axes are grown by 0.5 px before the perimeter is evaluated.
pub fn measure_hc(pred: &Mask, gt_hc_mm: f64, pixel_size_mm: f64) -> Result<HcMeasurement> {
    let boundary = extract_boundary(pred)?;
    let fitted = fit_ellipse(&boundary)?;
    let ellipse = EllipseParams {
        semi_axes: (fitted.semi_axes.0 + 0.5, fitted.semi_axes.1 + 0.5),
        ..fitted
    };
    let hc_pred_mm = ellipse_perimeter(&ellipse, pixel_size_mm);
    let df_mm = hc_pred_mm - gt_hc_mm;
    Ok(HcMeasurement {
        hc_pred_mm,
        df_mm,
        adf_mm: df_mm.abs(),
        ellipse,
    })
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

/// Inputs for one evaluated image.
pub struct EvalPair {
    pub id: String,
    pub pred: Mask,
    pub gt: Mask,
    pub gt_hc_mm: f64,
    pub pixel_size_mm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub id: String,
    pub dice: f64,
    pub df_mm: f64,
    pub adf_mm: f64,
    pub hd_mm: f64,
    pub hc_pred_mm: f64,
    pub hc_gt_mm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FailedImage {
    pub id: String,
    pub reason: String,
}

/// Column mean and population standard deviation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    pub failed: Vec<FailedImage>,
    pub dice: Aggregate,
    pub df_mm: Aggregate,
    pub adf_mm: Aggregate,
    pub hd_mm: Aggregate,
}

fn aggregate(values: impl Iterator<Item = f64> + Clone) -> Aggregate {
    let n = values.clone().count();
    if n == 0 {
        return Aggregate {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Aggregate {
        mean,
        std: var.sqrt(),
    }
}

/// Evaluate a set of (prediction, ground truth) pairs.
///
/// Per-image failures (empty or unfittable predictions) are recorded and
/// excluded from the aggregates instead of aborting the whole run.
pub fn evaluate_set(pairs: &[EvalPair]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("evaluate_set on empty list".into()));
    }
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for pair in pairs {
        match evaluate_one(pair) {
            Ok(row) => rows.push(row),
            Err(err) => failed.push(FailedImage {
                id: pair.id.clone(),
                reason: err.to_string(),
            }),
        }
    }
    let report = MetricsReport {
        dice: aggregate(rows.iter().map(|r| r.dice)),
        df_mm: aggregate(rows.iter().map(|r| r.df_mm)),
        adf_mm: aggregate(rows.iter().map(|r| r.adf_mm)),
        hd_mm: aggregate(rows.iter().map(|r| r.hd_mm)),
        rows,
        failed,
    };
    Ok(report)
}

fn evaluate_one(pair: &EvalPair) -> Result<ReportRow> {
    if !pair.pred.same_shape(&pair.gt) {
        return Err(Error::shape_mismatch(
            &pair.pred.shape(),
            &pair.gt.shape(),
            "evaluate pair",
        ));
    }
    let dice = pixel_dice(&pair.pred, &pair.gt)?;
    let pred_boundary = extract_boundary(&pair.pred)?;
    let gt_boundary = extract_boundary(&pair.gt)?;
    let hd_mm = hausdorff(&pred_boundary, &gt_boundary, pair.pixel_size_mm)?;
    let hc = measure_hc(&pair.pred, pair.gt_hc_mm, pair.pixel_size_mm)?;
    Ok(ReportRow {
        id: pair.id.clone(),
        dice,
        df_mm: hc.df_mm,
        adf_mm: hc.adf_mm,
        hd_mm,
        hc_pred_mm: hc.hc_pred_mm,
        hc_gt_mm: pair.gt_hc_mm,
    })
}

impl MetricsReport {
    /// Per-image table, tab-delimited, one row per image plus failures.
    pub fn per_image_table(&self) -> String {
        let mut out = String::from("id\tDice\tDF(mm)\tADF(mm)\tHD(mm)\tHC_pred(mm)\tHC_gt(mm)\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                r.id, r.dice, r.df_mm, r.adf_mm, r.hd_mm, r.hc_pred_mm, r.hc_gt_mm
            ));
        }
        for f in &self.failed {
            out.push_str(&format!("{}\tFAILED\t{}\n", f.id, f.reason));
        }
        out
    }

    /// Aggregate table with the four headline columns.
    pub fn aggregate_table(&self) -> String {
        let mut out = String::from("stat\tDice\tDF(mm)\tADF(mm)\tHD(mm)\n");
        out.push_str(&format!(
            "mean\t{:.6}\t{:.4}\t{:.4}\t{:.4}\n",
            self.dice.mean, self.df_mm.mean, self.adf_mm.mean, self.hd_mm.mean
        ));
        out.push_str(&format!(
            "std\t{:.6}\t{:.4}\t{:.4}\t{:.4}\n",
            self.dice.std, self.df_mm.std, self.adf_mm.std, self.hd_mm.std
        ));
        out
    }

    /// Machine-readable JSON summary.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
