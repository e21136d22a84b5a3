//! Dataset ingestion, augmentation, splitting, and synthetic generation.
//!
//! On-disk layout (shared by real imports and synthetic datasets):
//!   - `<id>.pgm`             grayscale image (binary PGM, 8-bit)
//!   - `<id>_Annotation.pgm`  head-outline annotation (closed curve)
//!   - `dataset.csv`          header + `filename,pixel_size_mm,head_circumference_mm`
//!
//! Annotation outlines are flood-filled into solid masks at load time.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Gray, Grid, Mask};
use crate::metrics::{ellipse_perimeter, EllipseParams};

/// Soft plausibility band for per-image pixel sizes (mm); values outside
/// produce warnings, not failures.
pub const PIXEL_SIZE_WARN_BAND: (f64, f64) = (0.052, 0.326);

pub const METADATA_FILE: &str = "dataset.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    Synthetic,
    Augmented { source: String, transform: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    /// Grayscale image, values in [0, 1].
    pub image: Gray,
    /// Binary head mask, same size as the image.
    pub mask: Mask,
    pub pixel_size_mm: f64,
    pub hc_gt_mm: f64,
    pub provenance: Provenance,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.image.same_shape(&self.mask) {
            return Err(Error::shape_mismatch(
                &self.image.shape(),
                &self.mask.shape(),
                format!("record {}", self.id),
            ));
        }
        if !(self.pixel_size_mm > 0.0 && self.pixel_size_mm < 1.0) {
            return Err(Error::Data(format!(
                "record {}: pixel size {} mm outside plausibility bound (0, 1)",
                self.id, self.pixel_size_mm
            )));
        }
        if self.hc_gt_mm <= 0.0 {
            return Err(Error::Data(format!(
                "record {}: head circumference {} mm must be positive",
                self.id, self.hc_gt_mm
            )));
        }
        if self.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data(format!(
                "record {}: image values outside [0, 1]",
                self.id
            )));
        }
        Ok(())
    }

    /// Source id this record derives from (itself, unless augmented).
    pub fn source_id(&self) -> &str {
        match &self.provenance {
            Provenance::Augmented { source, .. } => source,
            _ => &self.id,
        }
    }
}

// ---------------------------------------------------------------------------
// PGM I/O (binary P5, 8-bit)
// ---------------------------------------------------------------------------

pub fn write_pgm(path: &Path, image: &Grid<u8>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", image.width(), image.height())?;
    f.write_all(image.data())?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Grid<u8>> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    // magic, width, height, maxval; comments allowed
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Data(format!("{}: truncated PGM header", path.display())));
        }
        for tok in line.split('#').next().unwrap_or("").split_whitespace() {
            tokens.push(tok.to_string());
        }
    }
    if tokens[0] != "P5" {
        return Err(Error::Data(format!(
            "{}: expected binary PGM (P5), got {}",
            path.display(),
            tokens[0]
        )));
    }
    let width: usize = tokens[1]
        .parse()
        .map_err(|_| Error::Data(format!("{}: bad width", path.display())))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| Error::Data(format!("{}: bad height", path.display())))?;
    let maxval: usize = tokens[3]
        .parse()
        .map_err(|_| Error::Data(format!("{}: bad maxval", path.display())))?;
    if maxval != 255 {
        return Err(Error::Data(format!(
            "{}: only 8-bit PGM supported (maxval {maxval})",
            path.display()
        )));
    }
    let mut data = vec![0u8; width * height];
    reader.read_exact(&mut data).map_err(|_| {
        Error::Data(format!("{}: truncated PGM pixel data", path.display()))
    })?;
    Grid::from_vec(height, width, data)
}

pub fn gray_to_u8(image: &Gray) -> Grid<u8> {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn u8_to_gray(image: &Grid<u8>) -> Gray {
    image.map(|v| v as f32 / 255.0)
}

pub fn mask_to_u8(mask: &Mask) -> Grid<u8> {
    mask.map(|b| if b { 255u8 } else { 0 })
}

pub fn u8_to_mask(image: &Grid<u8>) -> Mask {
    image.map(|v| v >= 128)
}

/// The 1-pixel boundary ring of a filled mask (the annotation form).
pub fn boundary_ring(mask: &Mask) -> Mask {
    let mut ring = Mask::new(mask.height(), mask.width());
    for (r, c) in mask.boundary_pixels() {
        ring.set(r, c, true);
    }
    ring
}

// ---------------------------------------------------------------------------
// Outline filling
// ---------------------------------------------------------------------------

/// Fill a closed outline into a solid mask: flood from the border marks the
/// exterior; everything else (outline included) is foreground.
///
/// Leak detection: a closed digital curve of `n > 8` pixels encloses interior
/// area; if the flood reaches (almost) everything, the outline was open.
pub fn fill_outline(outline: &Mask) -> Result<Mask> {
    let h = outline.height();
    let w = outline.width();
    let outline_count = outline.count_foreground();
    if outline_count == 0 {
        return Err(Error::Data("empty outline".into()));
    }
    let mut exterior = Grid::<bool>::new(h, w);
    let mut queue = std::collections::VecDeque::new();
    for r in 0..h {
        for c in [0, w - 1] {
            if !outline.get(r, c) && !exterior.get(r, c) {
                exterior.set(r, c, true);
                queue.push_back((r, c));
            }
        }
    }
    for c in 0..w {
        for r in [0, h - 1] {
            if !outline.get(r, c) && !exterior.get(r, c) {
                exterior.set(r, c, true);
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        let mut visit = |rr: usize, cc: usize, queue: &mut std::collections::VecDeque<_>| {
            if !outline.get(rr, cc) && !exterior.get(rr, cc) {
                exterior.set(rr, cc, true);
                queue.push_back((rr, cc));
            }
        };
        if r > 0 {
            visit(r - 1, c, &mut queue);
        }
        if r + 1 < h {
            visit(r + 1, c, &mut queue);
        }
        if c > 0 {
            visit(r, c - 1, &mut queue);
        }
        if c + 1 < w {
            visit(r, c + 1, &mut queue);
        }
    }
    let mut filled = Mask::new(h, w);
    for r in 0..h {
        for c in 0..w {
            filled.set(r, c, !exterior.get(r, c));
        }
    }
    let interior = filled.count_foreground() - outline_count;
    let lower_bound = outline_count.saturating_sub(8) / 4;
    if interior < lower_bound {
        return Err(Error::Data(format!(
            "outline is not a closed curve: {outline_count} outline pixels enclose only {interior} interior pixels"
        )));
    }
    Ok(filled)
}

// ---------------------------------------------------------------------------
// Exact isometry augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// Exact pixel-grid isometry: flip first, then rotate counter-clockwise by
/// `quarter_turns * 90` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    pub flip: Flip,
    pub quarter_turns: u8,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip: Flip::None,
        quarter_turns: 0,
    };

    /// The 9 non-identity flip/rotation combinations used for augmentation.
    /// `(h, 180)` and `(v, 180)` are omitted: they coincide pixelwise with
    /// the plain flips. `(h, 90)` ~ `(v, 270)` and `(h, 270)` ~ `(v, 90)`
    /// also coincide but keep distinct tags to fill the 10-image protocol.
    pub fn augmentation_set() -> [Transform; 9] {
        [
            Transform { flip: Flip::None, quarter_turns: 1 },
            Transform { flip: Flip::None, quarter_turns: 2 },
            Transform { flip: Flip::None, quarter_turns: 3 },
            Transform { flip: Flip::Horizontal, quarter_turns: 0 },
            Transform { flip: Flip::Horizontal, quarter_turns: 1 },
            Transform { flip: Flip::Horizontal, quarter_turns: 3 },
            Transform { flip: Flip::Vertical, quarter_turns: 0 },
            Transform { flip: Flip::Vertical, quarter_turns: 1 },
            Transform { flip: Flip::Vertical, quarter_turns: 3 },
        ]
    }

    pub fn tag(&self) -> String {
        let flip = match self.flip {
            Flip::None => "",
            Flip::Horizontal => "fliph",
            Flip::Vertical => "flipv",
        };
        let rot = match self.quarter_turns % 4 {
            0 => "",
            q => return if flip.is_empty() {
                format!("rot{}", 90 * q as usize)
            } else {
                format!("{flip}-rot{}", 90 * q as usize)
            },
        };
        if flip.is_empty() && rot.is_empty() {
            "orig".to_string()
        } else {
            flip.to_string()
        }
    }

    /// Inverse transform. Reflections are involutions; pure rotations invert
    /// the turn count.
    pub fn inverse(&self) -> Transform {
        match self.flip {
            Flip::None => Transform {
                flip: Flip::None,
                quarter_turns: (4 - self.quarter_turns % 4) % 4,
            },
            _ => *self,
        }
    }

    pub fn apply<T: Copy + Default>(&self, grid: &Grid<T>) -> Grid<T> {
        let flipped = match self.flip {
            Flip::None => grid.clone(),
            Flip::Horizontal => {
                let (h, w) = (grid.height(), grid.width());
                let mut out = Grid::new(h, w);
                for r in 0..h {
                    for c in 0..w {
                        out.set(r, c, grid.get(r, w - 1 - c));
                    }
                }
                out
            }
            Flip::Vertical => {
                let (h, w) = (grid.height(), grid.width());
                let mut out = Grid::new(h, w);
                for r in 0..h {
                    for c in 0..w {
                        out.set(r, c, grid.get(h - 1 - r, c));
                    }
                }
                out
            }
        };
        let mut cur = flipped;
        for _ in 0..self.quarter_turns % 4 {
            // 90 degrees counter-clockwise: out[r][c] = in[c][W-1-r]
            let (h, w) = (cur.height(), cur.width());
            let mut out = Grid::new(w, h);
            for r in 0..w {
                for c in 0..h {
                    out.set(r, c, cur.get(c, w - 1 - r));
                }
            }
            cur = out;
        }
        cur
    }
}

/// Expand one record into exactly 10: the original plus 9 transformed copies.
/// All transforms are pixel-exact isometries, so pixel size and ground-truth
/// circumference carry over unchanged.
pub fn augment(record: &DatasetRecord) -> Vec<DatasetRecord> {
    let mut out = Vec::with_capacity(10);
    out.push(record.clone());
    for (k, t) in Transform::augmentation_set().iter().enumerate() {
        out.push(DatasetRecord {
            id: format!("{}_aug{}", record.id, k + 1),
            image: t.apply(&record.image),
            mask: t.apply(&record.mask),
            pixel_size_mm: record.pixel_size_mm,
            hc_gt_mm: record.hc_gt_mm,
            provenance: Provenance::Augmented {
                source: record.id.clone(),
                transform: t.tag(),
            },
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

/// Seeded shuffle split. Records sharing a source image always land in the
/// same partition; with unaugmented input the train side gets exactly
/// `floor(n * fraction)` records.
pub fn split(
    records: &[DatasetRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("split of empty record list".into()));
    }
    // Group by source id, preserving first-seen order for determinism.
    let mut group_order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = r.source_id();
        if !groups.contains_key(key) {
            group_order.push(key);
        }
        groups.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates over the group order.
    for i in (1..group_order.len()).rev() {
        let j = rng.gen_range(0..=i);
        group_order.swap(i, j);
    }
    let target = (records.len() as f64 * train_fraction).floor() as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for key in group_order {
        let idxs = &groups[key];
        if train.len() + idxs.len() <= target {
            train.extend(idxs.iter().map(|&i| records[i].clone()));
        } else {
            val.extend(idxs.iter().map(|&i| records[i].clone()));
        }
    }
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    /// (height, width)
    pub image_size: (usize, usize),
    /// Semi-major axis range in pixels.
    pub a_range: (f64, f64),
    /// Semi-minor axis range in pixels (draws above `a` are clamped to `a`).
    pub b_range: (f64, f64),
    /// Rotation range in radians.
    pub rotation_range: (f64, f64),
    /// Multiplicative speckle amplitude, in [0, 1).
    pub speckle_level: f64,
    /// Smooth background texture amplitude, in [0, 0.2].
    pub background_amplitude: f64,
    pub pixel_size_mm: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Desk-scale default: small images, mid-sized heads, mild noise.
    pub fn desk_default(count: usize, size: usize, seed: u64) -> Self {
        let s = size as f64;
        SynthSpec {
            count,
            image_size: (size, size),
            a_range: (0.22 * s, 0.34 * s),
            b_range: (0.16 * s, 0.28 * s),
            rotation_range: (0.0, std::f64::consts::PI),
            speckle_level: 0.15,
            background_amplitude: 0.1,
            pixel_size_mm: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("synth count must be > 0".into()));
        }
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::InvalidArgument("synth image size too small".into()));
        }
        if !(self.a_range.0 > 0.0 && self.a_range.1 >= self.a_range.0) {
            return Err(Error::InvalidArgument("bad semi-major axis range".into()));
        }
        if !(self.b_range.0 > 0.0 && self.b_range.1 >= self.b_range.0) {
            return Err(Error::InvalidArgument("bad semi-minor axis range".into()));
        }
        let margin = 2.0;
        if self.a_range.1 + margin > (h.min(w) as f64) / 2.0 {
            return Err(Error::InvalidArgument(format!(
                "semi-major axis up to {} does not fit inside {}x{} with margin",
                self.a_range.1, h, w
            )));
        }
        if !(0.0..1.0).contains(&self.speckle_level) {
            return Err(Error::InvalidArgument("speckle level outside [0, 1)".into()));
        }
        if !(0.0..=0.2).contains(&self.background_amplitude) {
            return Err(Error::InvalidArgument(
                "background amplitude outside [0, 0.2]".into(),
            ));
        }
        if !(self.pixel_size_mm > 0.0 && self.pixel_size_mm < 1.0) {
            return Err(Error::InvalidArgument("pixel size outside (0, 1) mm".into()));
        }
        Ok(())
    }
}

/// Generate a deterministic synthetic dataset: filled-ellipse masks with a
/// bright rim, smooth background texture, and multiplicative speckle noise.
/// Ground-truth circumference is the analytic perimeter of the generating
/// ellipse.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<DatasetRecord>> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.count);
    for idx in 0..spec.count {
        let a = rng.gen_range(spec.a_range.0..=spec.a_range.1);
        let b_raw = rng.gen_range(spec.b_range.0..=spec.b_range.1);
        let b = b_raw.min(a);
        let rotation = rng.gen_range(spec.rotation_range.0..=spec.rotation_range.1);
        // Jitter the center while keeping the ellipse inside with margin.
        let margin = 2.0;
        let slack_x = (w as f64 / 2.0 - a - margin).max(0.0);
        let slack_y = (h as f64 / 2.0 - a - margin).max(0.0);
        let cx = w as f64 / 2.0 + rng.gen_range(-0.5..=0.5) * slack_x;
        let cy = h as f64 / 2.0 + rng.gen_range(-0.5..=0.5) * slack_y;
        let ellipse = EllipseParams {
            center: (cx, cy),
            semi_axes: (a, b),
            rotation: rotation.rem_euclid(std::f64::consts::PI),
        };

        let mut mask = Mask::new(h, w);
        for r in 0..h {
            for c in 0..w {
                mask.set(r, c, ellipse.contains(c as f64, r as f64));
            }
        }

        // Smooth low-frequency background texture.
        let phase: [f64; 4] = [
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ];
        let dist = crate::loss::distance_map(&mask)?;
        let rim_sigma = 1.5f64;
        let rim_gain = 0.5f64;
        let mut image = Gray::new(h, w);
        for r in 0..h {
            for c in 0..w {
                let x = c as f64 / w as f64;
                let y = r as f64 / h as f64;
                let texture = 0.5
                    * ((std::f64::consts::TAU * (1.7 * x + 0.6 * y) + phase[0]).sin()
                        + (std::f64::consts::TAU * (0.9 * y - 1.3 * x) + phase[1]).sin()
                        + 0.5 * (std::f64::consts::TAU * (2.9 * x) + phase[2]).sin()
                        + 0.5 * (std::f64::consts::TAU * (2.3 * y) + phase[3]).sin())
                    / 3.0;
                let d = dist.get(r, c);
                let rim = rim_gain * (-d * d / (2.0 * rim_sigma * rim_sigma)).exp();
                let base = 0.25 + spec.background_amplitude * texture + rim;
                let speckle = 1.0 + spec.speckle_level * rng.gen_range(-1.0..=1.0);
                image.set(r, c, (base * speckle).clamp(0.0, 1.0) as f32);
            }
        }
        // Quantize to the on-disk 8-bit scale so write/read round-trips exactly.
        let image = u8_to_gray(&gray_to_u8(&image));

        let record = DatasetRecord {
            id: format!("synth_{idx:04}"),
            image,
            mask,
            pixel_size_mm: spec.pixel_size_mm,
            hc_gt_mm: ellipse_perimeter(&ellipse, spec.pixel_size_mm),
            provenance: Provenance::Synthetic,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Dataset directory read/write
// ---------------------------------------------------------------------------

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.pgm"))
}

fn annotation_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_Annotation.pgm"))
}

/// Write records in the shared dataset layout. Annotations are stored as the
/// boundary ring of each mask, which `fill_outline` reconstructs exactly.
pub fn write_dataset(dir: &Path, records: &[DatasetRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("filename,pixel_size_mm,head_circumference_mm\n");
    for r in records {
        r.validate()?;
        write_pgm(&image_path(dir, &r.id), &gray_to_u8(&r.image))?;
        write_pgm(
            &annotation_path(dir, &r.id),
            &mask_to_u8(&boundary_ring(&r.mask)),
        )?;
        csv.push_str(&format!(
            "{}.pgm,{},{}\n",
            r.id, r.pixel_size_mm, r.hc_gt_mm
        ));
    }
    std::fs::write(dir.join(METADATA_FILE), csv)?;
    Ok(())
}

#[derive(Debug)]
pub struct LoadResult {
    pub records: Vec<DatasetRecord>,
    pub warnings: Vec<String>,
}

/// Load a dataset directory: metadata rows drive the record list; outlines
/// are filled into masks. Unfillable outlines are skipped with a warning;
/// missing files are hard errors naming the id.
pub fn load_hc18(dir: &Path) -> Result<LoadResult> {
    let meta_path = dir.join(METADATA_FILE);
    if !meta_path.exists() {
        return Err(Error::Data(format!(
            "missing metadata file {}",
            meta_path.display()
        )));
    }
    let content = std::fs::read_to_string(&meta_path)?;
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue; // header
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected 3 comma-separated fields, got {}",
                meta_path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let id = fields[0]
            .strip_suffix(".pgm")
            .unwrap_or(fields[0])
            .to_string();
        let pixel_size: f64 = fields[1].parse().map_err(|_| {
            Error::Data(format!("{}: bad pixel size '{}'", id, fields[1]))
        })?;
        let hc: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad circumference '{}'", id, fields[2])))?;
        rows.push((id, pixel_size, hc));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (id, pixel_size, hc) in rows {
        let img_path = image_path(dir, &id);
        let ann_path = annotation_path(dir, &id);
        if !img_path.exists() {
            return Err(Error::Data(format!("{id}: missing image {}", img_path.display())));
        }
        if !ann_path.exists() {
            return Err(Error::Data(format!(
                "{id}: missing annotation {}",
                ann_path.display()
            )));
        }
        let image = u8_to_gray(&read_pgm(&img_path)?);
        let outline = u8_to_mask(&read_pgm(&ann_path)?);
        if !image.same_shape(&outline) {
            return Err(Error::Data(format!(
                "{id}: image {}x{} and annotation {}x{} sizes differ",
                image.height(),
                image.width(),
                outline.height(),
                outline.width()
            )));
        }
        let mask = match fill_outline(&outline) {
            Ok(mask) => mask,
            Err(err) => {
                warnings.push(format!("{id}: skipped ({err})"));
                continue;
            }
        };
        if pixel_size < PIXEL_SIZE_WARN_BAND.0 || pixel_size > PIXEL_SIZE_WARN_BAND.1 {
            warnings.push(format!(
                "{id}: pixel size {pixel_size} mm outside the expected band {:?}",
                PIXEL_SIZE_WARN_BAND
            ));
        }
        let record = DatasetRecord {
            id,
            image,
            mask,
            pixel_size_mm: pixel_size,
            hc_gt_mm: hc,
            provenance: Provenance::Real,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(LoadResult { records, warnings })
}

// ---------------------------------------------------------------------------
// Resizing (batch assembly and eval-time mapping back)
// ---------------------------------------------------------------------------

/// Area-average (box filter) resize with fractional source boxes.
pub fn resize_area(image: &Gray, new_size: (usize, usize)) -> Gray {
    let (nh, nw) = new_size;
    let (h, w) = (image.height(), image.width());
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let mut out = Gray::new(nh, nw);
    for r in 0..nh {
        let y0 = r as f64 * sy;
        let y1 = (r + 1) as f64 * sy;
        for c in 0..nw {
            let x0 = c as f64 * sx;
            let x1 = (c + 1) as f64 * sx;
            let mut acc = 0.0f64;
            let mut area = 0.0f64;
            let mut y = y0;
            while y < y1 - 1e-12 {
                let yi = y.floor() as usize;
                let y_next = (yi as f64 + 1.0).min(y1);
                let wy = y_next - y;
                let mut x = x0;
                while x < x1 - 1e-12 {
                    let xi = x.floor() as usize;
                    let x_next = (xi as f64 + 1.0).min(x1);
                    let wx = x_next - x;
                    acc += image.get(yi.min(h - 1), xi.min(w - 1)) as f64 * wy * wx;
                    area += wy * wx;
                    x = x_next;
                }
                y = y_next;
            }
            out.set(r, c, (acc / area) as f32);
        }
    }
    out
}

/// Nearest-neighbour resize for masks.
pub fn resize_nearest(mask: &Mask, new_size: (usize, usize)) -> Mask {
    let (nh, nw) = new_size;
    let (h, w) = (mask.height(), mask.width());
    let mut out = Mask::new(nh, nw);
    for r in 0..nh {
        let sr = ((r as f64 + 0.5) * h as f64 / nh as f64).floor() as usize;
        for c in 0..nw {
            let sc = ((c as f64 + 0.5) * w as f64 / nw as f64).floor() as usize;
            out.set(r, c, mask.get(sr.min(h - 1), sc.min(w - 1)));
        }
    }
    out
}

/// Resize a record to the network input size: area-average for the image,
/// nearest for the mask. Pixel size is rescaled by the geometric mean of the
/// two axis scale factors (metrics in mm always map masks back to native
/// resolution instead of using this).
pub fn resize_record(record: &DatasetRecord, new_size: (usize, usize)) -> DatasetRecord {
    let (nh, nw) = new_size;
    let scale_y = record.image.height() as f64 / nh as f64;
    let scale_x = record.image.width() as f64 / nw as f64;
    DatasetRecord {
        id: record.id.clone(),
        image: resize_area(&record.image, new_size),
        mask: resize_nearest(&record.mask, new_size),
        pixel_size_mm: record.pixel_size_mm * (scale_y * scale_x).sqrt(),
        hc_gt_mm: record.hc_gt_mm,
        provenance: record.provenance.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::measure_hc;

    /// Digital outline: the boundary ring of the rasterized filled region
    /// (the form annotations written by `write_dataset` take).
    fn raster_outline(e: &EllipseParams, h: usize, w: usize) -> Mask {
        let mut filled = Mask::new(h, w);
        for r in 0..h {
            for c in 0..w {
                filled.set(r, c, e.contains(c as f64, r as f64));
            }
        }
        boundary_ring(&filled)
    }

    fn toy_record(id: &str, seed: u64) -> DatasetRecord {
        let spec = SynthSpec::desk_default(1, 48, seed);
        let mut rec = synth_generate(&spec).unwrap().remove(0);
        rec.id = id.to_string();
        rec
    }

    #[test]
    fn fill_circle_outline_area() {
        let e = EllipseParams {
            center: (32.0, 32.0),
            semi_axes: (20.0, 20.0),
            rotation: 0.0,
        };
        let outline = raster_outline(&e, 64, 64);
        let filled = fill_outline(&outline).unwrap();
        let area = filled.count_foreground() as f64;
        let expected = std::f64::consts::PI * 400.0;
        assert!(
            (area - expected).abs() / expected < 0.03,
            "area {area} vs {expected}"
        );
    }

    #[test]
    fn fill_single_dot_is_degenerate_area_one() {
        let mut outline = Mask::new(16, 16);
        outline.set(8, 8, true);
        let filled = fill_outline(&outline).unwrap();
        assert_eq!(filled.count_foreground(), 1);
    }

    #[test]
    fn fill_gapped_outline_errors() {
        let e = EllipseParams {
            center: (32.0, 32.0),
            semi_axes: (20.0, 20.0),
            rotation: 0.0,
        };
        let mut outline = raster_outline(&e, 64, 64);
        // punch a 3-pixel gap at the rightmost point
        for dr in -1isize..=1 {
            outline.set((32 + dr) as usize, 52, false);
            outline.set((32 + dr) as usize, 51, false);
            outline.set((32 + dr) as usize, 53, false);
        }
        assert!(fill_outline(&outline).is_err());
    }

    #[test]
    fn augment_produces_ten_distinct_tags() {
        let rec = toy_record("r0", 1);
        let out = augment(&rec);
        assert_eq!(out.len(), 10);
        let mut tags: Vec<String> = out
            .iter()
            .map(|r| match &r.provenance {
                Provenance::Augmented { transform, .. } => transform.clone(),
                _ => "orig".to_string(),
            })
            .collect();
        tags.sort();
        tags.dedup();
        assert_eq!(tags.len(), 10, "tags not distinct: {tags:?}");
        for r in &out {
            assert_eq!(r.pixel_size_mm, rec.pixel_size_mm);
            assert_eq!(r.hc_gt_mm, rec.hc_gt_mm);
            assert_eq!(
                r.mask.count_foreground(),
                rec.mask.count_foreground(),
                "foreground count must be exactly preserved"
            );
            r.validate().unwrap();
        }
    }

    #[test]
    fn transform_inverse_roundtrip() {
        let rec = toy_record("r1", 2);
        for t in Transform::augmentation_set() {
            let forward = t.apply(&rec.image);
            let back = t.inverse().apply(&forward);
            assert_eq!(back, rec.image, "transform {:?} round trip", t);
            let fm = t.apply(&rec.mask);
            assert_eq!(t.inverse().apply(&fm), rec.mask);
        }
    }

    #[test]
    fn rotation_preserves_measured_hc() {
        let rec = toy_record("r2", 3);
        let base = measure_hc(&rec.mask, rec.hc_gt_mm, rec.pixel_size_mm).unwrap();
        let rot = Transform {
            flip: Flip::None,
            quarter_turns: 1,
        };
        let rotated = rot.apply(&rec.mask);
        let m = measure_hc(&rotated, rec.hc_gt_mm, rec.pixel_size_mm).unwrap();
        let rel = (m.hc_pred_mm - base.hc_pred_mm).abs() / base.hc_pred_mm;
        assert!(rel < 0.005, "rotation changed HC by {rel}");
    }

    #[test]
    fn split_999_records_gives_799_200() {
        let proto = toy_record("proto", 4);
        let records: Vec<DatasetRecord> = (0..999)
            .map(|i| DatasetRecord {
                id: format!("rec{i:04}"),
                ..proto.clone()
            })
            .collect();
        let (train, val) = split(&records, 0.8, 17).unwrap();
        assert_eq!(train.len(), 799);
        assert_eq!(val.len(), 200);
        let (train2, val2) = split(&records, 0.8, 17).unwrap();
        assert_eq!(
            train.iter().map(|r| &r.id).collect::<Vec<_>>(),
            train2.iter().map(|r| &r.id).collect::<Vec<_>>()
        );
        assert_eq!(val.len(), val2.len());
    }

    #[test]
    fn split_keeps_augmented_with_source() {
        let mut records = Vec::new();
        for i in 0..12 {
            let rec = toy_record(&format!("s{i}"), 5 + i as u64);
            records.extend(augment(&rec));
        }
        let (train, val) = split(&records, 0.8, 3).unwrap();
        assert_eq!(train.len() + val.len(), 120);
        let train_sources: std::collections::HashSet<&str> =
            train.iter().map(|r| r.source_id()).collect();
        let val_sources: std::collections::HashSet<&str> =
            val.iter().map(|r| r.source_id()).collect();
        assert!(
            train_sources.is_disjoint(&val_sources),
            "augmented records crossed the partition"
        );
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let records = vec![toy_record("x", 6)];
        assert!(split(&records, 0.0, 1).is_err());
        assert!(split(&records, 1.0, 1).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec::desk_default(3, 48, 99);
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn synth_hc_consistent_with_pipeline() {
        let spec = SynthSpec::desk_default(4, 96, 11);
        for rec in synth_generate(&spec).unwrap() {
            let m = measure_hc(&rec.mask, rec.hc_gt_mm, rec.pixel_size_mm).unwrap();
            assert!(
                m.adf_mm / rec.hc_gt_mm < 0.02,
                "{}: measured {} vs gt {}",
                rec.id,
                m.hc_pred_mm,
                rec.hc_gt_mm
            );
        }
    }

    #[test]
    fn synth_noiseless_rim_traces_boundary() {
        let mut spec = SynthSpec::desk_default(1, 64, 21);
        spec.speckle_level = 0.0;
        let rec = synth_generate(&spec).unwrap().remove(0);
        let dist = crate::loss::distance_map(&rec.mask).unwrap();
        let mut min_rim = f32::INFINITY;
        let mut max_far = f32::NEG_INFINITY;
        for r in 0..64 {
            for c in 0..64 {
                let d = dist.get(r, c);
                let v = rec.image.get(r, c);
                if d == 0.0 {
                    min_rim = min_rim.min(v);
                } else if d > 6.0 {
                    max_far = max_far.max(v);
                }
            }
        }
        assert!(
            min_rim > max_far,
            "rim pixels ({min_rim}) must outshine far pixels ({max_far})"
        );
    }

    #[test]
    fn dataset_write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::desk_default(3, 48, 33);
        let records = synth_generate(&spec).unwrap();
        write_dataset(dir.path(), &records).unwrap();
        let loaded = load_hc18(dir.path()).unwrap();
        assert!(loaded.warnings.is_empty(), "{:?}", loaded.warnings);
        assert_eq!(loaded.records.len(), records.len());
        for (orig, back) in records.iter().zip(&loaded.records) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.image, back.image);
            assert_eq!(orig.mask, back.mask, "mask round trip for {}", orig.id);
            assert!((orig.pixel_size_mm - back.pixel_size_mm).abs() < 1e-12);
            assert!((orig.hc_gt_mm - back.hc_gt_mm).abs() < 1e-9);
        }
    }

    #[test]
    fn load_missing_metadata_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_hc18(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn load_missing_annotation_names_id() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::desk_default(1, 48, 7);
        let records = synth_generate(&spec).unwrap();
        write_dataset(dir.path(), &records).unwrap();
        std::fs::remove_file(dir.path().join("synth_0000_Annotation.pgm")).unwrap();
        let err = load_hc18(dir.path()).unwrap_err().to_string();
        assert!(err.contains("synth_0000"), "{err}");
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let mut img = Grid::<u8>::new(5, 7);
        for r in 0..5 {
            for c in 0..7 {
                img.set(r, c, (r * 7 + c) as u8 * 3);
            }
        }
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn resize_area_constant_stays_constant() {
        let img = Gray::from_vec(10, 14, vec![0.37; 140]).unwrap();
        let out = resize_area(&img, (4, 5));
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_area_halving_matches_box_mean() {
        let mut img = Gray::new(4, 4);
        for r in 0..4 {
            for c in 0..4 {
                img.set(r, c, (r * 4 + c) as f32);
            }
        }
        let out = resize_area(&img, (2, 2));
        assert!((out.get(0, 0) - (0.0 + 1.0 + 4.0 + 5.0) / 4.0).abs() < 1e-6);
        assert!((out.get(1, 1) - (10.0 + 11.0 + 14.0 + 15.0) / 4.0).abs() < 1e-6);
    }

    #[test]
    fn resize_record_rescales_pixel_size() {
        let rec = toy_record("rz", 8);
        let resized = resize_record(&rec, (24, 24));
        assert_eq!(resized.image.shape(), [24, 24]);
        assert_eq!(resized.mask.shape(), [24, 24]);
        // 48 -> 24 halves resolution, doubling the mm-per-pixel scale
        assert!((resized.pixel_size_mm - rec.pixel_size_mm * 2.0).abs() < 1e-12);
    }

    #[test]
    fn every_generated_record_is_valid() {
        let spec = SynthSpec::desk_default(8, 32, 44);
        for rec in synth_generate(&spec).unwrap() {
            rec.validate().unwrap();
        }
    }
}
