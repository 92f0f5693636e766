//! Dataset generation and ingestion: the synthetic multi-modal regression
//! benchmark, IDX-format image files, binarization, the half-digit
//! completion task, and deterministic splits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::math::Matrix;
use crate::network::{NetworkSpec, TargetsRef};
use crate::rng::RngStream;
use crate::{Error, Result};

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Matrix),
}

/// Row-stacked inputs plus per-row targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
    pub task: Task,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn targets_ref(&self) -> TargetsRef<'_> {
        match &self.targets {
            Targets::Labels(l) => TargetsRef::Labels(l),
            Targets::Values(v) => TargetsRef::Values(v),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    /// Structural consistency: row counts match, labels in range, finite.
    pub fn validate(&self) -> Result<()> {
        if !self.inputs.all_finite() {
            return Err(Error::NonFinite("dataset inputs".into()));
        }
        match (&self.targets, &self.task) {
            (Targets::Labels(l), Task::Classification { classes }) => {
                if l.len() != self.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} inputs vs {} labels",
                        self.len(),
                        l.len()
                    )));
                }
                if let Some(&bad) = l.iter().find(|&&k| k >= *classes) {
                    return Err(Error::Data(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
            }
            (Targets::Values(v), Task::Regression) => {
                if v.rows() != self.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} inputs vs {} target rows",
                        self.len(),
                        v.rows()
                    )));
                }
                if !v.all_finite() {
                    return Err(Error::NonFinite("dataset targets".into()));
                }
            }
            _ => return Err(Error::Data("targets do not match task kind".into())),
        }
        Ok(())
    }

    /// Check this dataset feeds a given architecture.
    pub fn validate_for(&self, spec: &NetworkSpec) -> Result<()> {
        self.validate()?;
        if self.input_dim() != spec.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "dataset dim {} vs network input dim {}",
                self.input_dim(),
                spec.input_dim
            )));
        }
        let head_dim = spec.head.dim();
        match (&self.targets, &self.task) {
            (Targets::Labels(_), Task::Classification { classes }) if *classes == head_dim => {
                Ok(())
            }
            (Targets::Values(v), Task::Regression) if v.cols() == head_dim => Ok(()),
            _ => Err(Error::ShapeMismatch(
                "dataset targets do not match network head".into(),
            )),
        }
    }

    /// Select rows by index, in order.
    pub fn gather(&self, idx: &[usize]) -> Dataset {
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => Targets::Values(v.gather_rows(idx)),
        };
        Dataset {
            inputs: self.inputs.gather_rows(idx),
            targets,
            task: self.task,
        }
    }

    /// Contiguous row range `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Dataset {
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(l[start..start + len].to_vec()),
            Targets::Values(v) => Targets::Values(v.slice_rows(start, len)),
        };
        Dataset {
            inputs: self.inputs.slice_rows(start, len),
            targets,
            task: self.task,
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic multi-modal regression benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Half-width of the uniform observation noise on x.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train: 1000,
            n_test: 1000,
            noise: 0.1,
            seed: 0,
        }
    }
}

fn synthetic_split(n: usize, noise: f64, stream: RngStream) -> Dataset {
    let mut rng = stream.rng();
    let mut xs = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    for _ in 0..n {
        let t: f64 = rng.gen_range(0.0..1.0);
        let eps: f64 = rng.gen_range(-noise..noise);
        let x = t + 0.3 * (2.0 * std::f64::consts::PI * t).sin() + eps;
        xs.push(x);
        ts.push(t);
    }
    Dataset {
        inputs: Matrix::from_vec(n, 1, xs).unwrap(),
        targets: Targets::Values(Matrix::from_vec(n, 1, ts).unwrap()),
        task: Task::Regression,
    }
}

/// The inverse-sinusoid benchmark: latent `t ~ U(0,1)`,
/// `x = t + 0.3 sin(2 pi t) + eps`, learn the one-to-many map x -> t.
/// Train and test come from disjoint substreams of the seed.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> (Dataset, Dataset) {
    let root = RngStream::new(cfg.seed);
    (
        synthetic_split(cfg.n_train, cfg.noise, root.substream(0)),
        synthetic_split(cfg.n_test, cfg.noise, root.substream(1)),
    )
}

// ---------------------------------------------------------------------------
// IDX container (big-endian)
// ---------------------------------------------------------------------------

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("truncated IDX header: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Parse paired IDX image/label files into a classification dataset with
/// pixels scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut img = BufReader::new(File::open(images)?);
    let magic = read_u32_be(&mut img)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "image file has magic {magic}, expected {IDX_IMAGE_MAGIC}"
        )));
    }
    let n = read_u32_be(&mut img)? as usize;
    let rows = read_u32_be(&mut img)? as usize;
    let cols = read_u32_be(&mut img)? as usize;
    if (rows, cols) != (28, 28) {
        return Err(Error::Data(format!(
            "expected 28x28 images, got {rows}x{cols}"
        )));
    }
    let mut pixels = vec![0u8; n * rows * cols];
    img.read_exact(&mut pixels)
        .map_err(|e| Error::Data(format!("truncated IDX image payload: {e}")))?;

    let mut lbl = BufReader::new(File::open(labels)?);
    let magic = read_u32_be(&mut lbl)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Data(format!(
            "label file has magic {magic}, expected {IDX_LABEL_MAGIC}"
        )));
    }
    let n_labels = read_u32_be(&mut lbl)? as usize;
    if n_labels != n {
        return Err(Error::Data(format!("{n} images but {n_labels} labels")));
    }
    let mut raw_labels = vec![0u8; n];
    lbl.read_exact(&mut raw_labels)
        .map_err(|e| Error::Data(format!("truncated IDX label payload: {e}")))?;

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Dataset {
        inputs: Matrix::from_vec(n, rows * cols, data)?,
        targets: Targets::Labels(raw_labels.iter().map(|&b| b as usize).collect()),
        task: Task::Classification { classes: 10 },
    })
}

/// Serialize a 784-dim classification dataset back to IDX (inverse of
/// [`load_idx`]; pixel floats are rescaled to bytes).
pub fn save_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let lbls = ds
        .labels()
        .ok_or_else(|| Error::Data("IDX export needs a classification dataset".into()))?;
    if ds.input_dim() != 784 {
        return Err(Error::Data("IDX export needs 28x28 images".into()));
    }
    let mut img = BufWriter::new(File::create(images)?);
    img.write_all(&IDX_IMAGE_MAGIC.to_be_bytes())?;
    img.write_all(&(ds.len() as u32).to_be_bytes())?;
    img.write_all(&28u32.to_be_bytes())?;
    img.write_all(&28u32.to_be_bytes())?;
    let bytes: Vec<u8> = ds
        .inputs
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    img.write_all(&bytes)?;
    img.flush()?;

    let mut lbl = BufWriter::new(File::create(labels)?);
    lbl.write_all(&IDX_LABEL_MAGIC.to_be_bytes())?;
    lbl.write_all(&(ds.len() as u32).to_be_bytes())?;
    lbl.write_all(&lbls.iter().map(|&l| l as u8).collect::<Vec<u8>>())?;
    lbl.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Pixel transforms and task construction
// ---------------------------------------------------------------------------

/// Threshold pixels: `>= threshold` becomes 1, else 0. Idempotent.
pub fn binarize(ds: &Dataset, threshold: f64) -> Dataset {
    Dataset {
        inputs: ds.inputs.map(|v| if v >= threshold { 1.0 } else { 0.0 }),
        targets: ds.targets.clone(),
        task: ds.task,
    }
}

/// Half-digit completion: input is the upper 14 pixel rows, target the lower
/// 14, as a regression task.
pub fn split_half_digit(ds: &Dataset) -> Result<Dataset> {
    if ds.input_dim() != 784 {
        return Err(Error::ShapeMismatch(format!(
            "half-digit split needs 784-dim rows, got {}",
            ds.input_dim()
        )));
    }
    let n = ds.len();
    let mut upper = Matrix::zeros(n, 392);
    let mut lower = Matrix::zeros(n, 392);
    for r in 0..n {
        let row = ds.inputs.row(r);
        upper.row_mut(r).copy_from_slice(&row[..392]);
        lower.row_mut(r).copy_from_slice(&row[392..]);
    }
    Ok(Dataset {
        inputs: upper,
        targets: Targets::Values(lower),
        task: Task::Regression,
    })
}

/// Deterministic tail split: the last `n_val` rows become the validation set
/// and the rest stay in training, preserving order.
pub fn train_val_split(ds: &Dataset, n_val: usize) -> Result<(Dataset, Dataset)> {
    if n_val >= ds.len() {
        return Err(Error::Data(format!(
            "validation size {n_val} not below dataset size {}",
            ds.len()
        )));
    }
    let n_train = ds.len() - n_val;
    Ok((ds.slice(0, n_train), ds.slice(n_train, n_val)))
}

// ---------------------------------------------------------------------------
// CSV import/export for the synthetic task
// ---------------------------------------------------------------------------

/// Write a 1-d regression dataset as CSV with header `x,t`. Floats use the
/// shortest round-trip encoding.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let values = match &ds.targets {
        Targets::Values(v) if v.cols() == 1 && ds.input_dim() == 1 => v,
        _ => {
            return Err(Error::Data(
                "CSV export is for the 1-d regression task".into(),
            ))
        }
    };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,t")?;
    for r in 0..ds.len() {
        writeln!(w, "{},{}", ds.inputs.get(r, 0), values.get(r, 0))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut content = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut content)?;
    let mut lines = content.lines();
    match lines.next() {
        Some(h) if h.trim() == "x,t" => {}
        other => {
            return Err(Error::Data(format!(
                "expected CSV header 'x,t', got {other:?}"
            )))
        }
    }
    let mut xs = Vec::new();
    let mut ts = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (x, t) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("line {}: expected two columns", i + 2)))?;
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("line {}: {e}", i + 2)))
        };
        xs.push(parse(x)?);
        ts.push(parse(t)?);
    }
    let n = xs.len();
    Ok(Dataset {
        inputs: Matrix::from_vec(n, 1, xs)?,
        targets: Targets::Values(Matrix::from_vec(n, 1, ts)?),
        task: Task::Regression,
    })
}

// ---------------------------------------------------------------------------
// Procedural digit glyphs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DigitsConfig {
    pub n: usize,
    pub seed: u64,
}

/// Control polylines per digit in a unit box (x right, y down).
fn digit_strokes(digit: usize) -> Vec<Vec<(f64, f64)>> {
    match digit {
        0 => vec![closed_ellipse(0.5, 0.5, 0.30, 0.42)],
        1 => vec![vec![(0.35, 0.25), (0.52, 0.10), (0.52, 0.90)]],
        2 => vec![vec![
            (0.22, 0.28),
            (0.35, 0.10),
            (0.62, 0.12),
            (0.72, 0.32),
            (0.55, 0.55),
            (0.25, 0.88),
            (0.78, 0.88),
        ]],
        3 => vec![vec![
            (0.25, 0.15),
            (0.60, 0.10),
            (0.72, 0.28),
            (0.48, 0.48),
            (0.75, 0.68),
            (0.60, 0.90),
            (0.24, 0.86),
        ]],
        4 => vec![vec![(0.62, 0.90), (0.62, 0.10), (0.20, 0.62), (0.80, 0.62)]],
        5 => vec![vec![
            (0.72, 0.12),
            (0.30, 0.12),
            (0.28, 0.45),
            (0.60, 0.42),
            (0.75, 0.65),
            (0.58, 0.90),
            (0.24, 0.84),
        ]],
        6 => vec![vec![
            (0.68, 0.12),
            (0.38, 0.30),
            (0.27, 0.62),
            (0.42, 0.88),
            (0.68, 0.80),
            (0.70, 0.58),
            (0.45, 0.52),
            (0.28, 0.62),
        ]],
        7 => vec![vec![(0.22, 0.12), (0.78, 0.12), (0.42, 0.90)]],
        8 => vec![
            closed_ellipse(0.5, 0.30, 0.22, 0.20),
            closed_ellipse(0.5, 0.70, 0.26, 0.22),
        ],
        9 => vec![vec![
            (0.70, 0.38),
            (0.55, 0.14),
            (0.30, 0.22),
            (0.28, 0.44),
            (0.52, 0.52),
            (0.70, 0.38),
            (0.66, 0.68),
            (0.52, 0.90),
        ]],
        _ => unreachable!("digit out of range"),
    }
}

fn closed_ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
    let steps = 14;
    (0..=steps)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / steps as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Synthetic handwritten-style digits: stroke templates with per-sample
/// rotation, shear, scale, shift, stroke-width jitter, control-point noise,
/// and background speckle. 28x28 grayscale in [0, 1], 10 classes.
///
/// A self-contained stand-in for handwriting scans; [`load_idx`] accepts
/// real data with the identical layout.
pub fn gen_digits(cfg: &DigitsConfig) -> Dataset {
    let mut rng = RngStream::new(cfg.seed).rng();
    let n = cfg.n;
    let mut inputs = Matrix::zeros(n, 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = rng.gen_range(0..10usize);
        labels.push(digit);

        let rot: f64 = rng.gen_range(-0.30..0.30);
        let shear: f64 = rng.gen_range(-0.30..0.30);
        let scale: f64 = rng.gen_range(0.70..1.15);
        let dx: f64 = rng.gen_range(-2.5..2.5);
        let dy: f64 = rng.gen_range(-2.5..2.5);
        let stroke: f64 = rng.gen_range(0.9..1.9);
        let (sin, cos) = rot.sin_cos();

        let mut canvas = [0.0f64; 784];
        for stroke_points in digit_strokes(digit) {
            // jitter control points, then walk the polyline densely
            let pts: Vec<(f64, f64)> = stroke_points
                .iter()
                .map(|&(x, y)| {
                    (
                        x + rng.gen_range(-0.05..0.05),
                        y + rng.gen_range(-0.05..0.05),
                    )
                })
                .collect();
            for w in pts.windows(2) {
                let (x0, y0) = w[0];
                let (x1, y1) = w[1];
                let segs = 24;
                for s in 0..=segs {
                    let t = s as f64 / segs as f64;
                    let ux = x0 + t * (x1 - x0) - 0.5;
                    let uy = y0 + t * (y1 - y0) - 0.5;
                    // shear, rotate, scale, then place on the canvas
                    let sx = ux + shear * uy;
                    let rx = cos * sx - sin * uy;
                    let ry = sin * sx + cos * uy;
                    let px = 14.0 + scale * 22.0 * rx + dx;
                    let py = 14.0 + scale * 22.0 * ry + dy;
                    stamp(&mut canvas, px, py, stroke);
                }
            }
        }
        // speckle noise
        for _ in 0..8 {
            let px = rng.gen_range(0..784);
            canvas[px] = (canvas[px] + rng.gen_range(0.0..0.6)).min(1.0);
        }
        // quantize like an 8-bit scan so IDX round-trips exactly
        let row = inputs.row_mut(i);
        for (o, &v) in row.iter_mut().zip(canvas.iter()) {
            *o = (v * 255.0).round() / 255.0;
        }
    }
    Dataset {
        inputs,
        targets: Targets::Labels(labels),
        task: Task::Classification { classes: 10 },
    }
}

/// Stamp a soft disc of the given radius at (px, py).
fn stamp(canvas: &mut [f64; 784], px: f64, py: f64, radius: f64) {
    let r_ceil = radius.ceil() as i64 + 1;
    let cx = px.round() as i64;
    let cy = py.round() as i64;
    for yy in (cy - r_ceil).max(0)..=(cy + r_ceil).min(27) {
        for xx in (cx - r_ceil).max(0)..=(cx + r_ceil).min(27) {
            let d2 = (xx as f64 - px).powi(2) + (yy as f64 - py).powi(2);
            let v = (1.2 - d2 / (radius * radius)).clamp(0.0, 1.0);
            let idx = (yy * 28 + xx) as usize;
            canvas[idx] = canvas[idx].max(v);
        }
    }
}
