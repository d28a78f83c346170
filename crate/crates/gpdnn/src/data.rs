//! Data ingestion and synthesis: IDX-format digit loading, Semeion ASCII
//! loading, grayscale/resize preprocessing for cross-dataset evaluation,
//! half-moon generation, and train/val splitting.
//!
//! Image datasets are normalized to [-1, 1]. Loaders are pure functions of
//! file bytes; generators are pure functions of their seed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::Normal;
use std::io::{Read, Write};
use std::path::Path;

/// A labeled dataset. `x` keeps its natural item shape (`[N,H,W,C]` for
/// images, `[N,D]` for vectors); models consume the flattened view.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    /// Inclusive value range of `x`; attacks clip perturbed inputs to it.
    pub range: (f64, f64),
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        x: Tensor,
        y: Vec<usize>,
        classes: usize,
        range: (f64, f64),
    ) -> Result<Dataset> {
        if x.rank() == 0 || x.shape()[0] != y.len() {
            return Err(Error::Data(format!(
                "dataset item count {} does not match label count {}",
                if x.rank() == 0 { 0 } else { x.shape()[0] },
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {} out of range [0,{})", bad, classes)));
        }
        for &v in x.data() {
            if !v.is_finite() || v < range.0 || v > range.1 {
                return Err(Error::Data(format!(
                    "value {} outside declared range [{}, {}]",
                    v, range.0, range.1
                )));
            }
        }
        Ok(Dataset { name: name.into(), x, y, classes, range })
    }

    pub fn n(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn item_numel(&self) -> usize {
        self.x.shape()[1..].iter().product()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Dataset {
        self.name = name.into();
        self
    }

    /// All items flattened to `[N, item_numel]` — the model input layout.
    pub fn flat_x(&self) -> Tensor {
        self.x.reshaped(&[self.n(), self.item_numel()]).expect("flatten view")
    }

    /// Gather the given items as a flat `[B, item_numel]` batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.item_numel();
        let src = self.x.data();
        let mut out = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.n() {
                return Err(Error::Data(format!("batch index {} out of range {}", i, self.n())));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
            labels.push(self.y[i]);
        }
        Ok((Tensor::new(&[idx.len(), d], out)?, labels))
    }

    /// New dataset holding the given items (in the given order).
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let (flat, y) = self.batch(idx)?;
        let mut shape = self.x.shape().to_vec();
        shape[0] = idx.len();
        Ok(Dataset {
            name: self.name.clone(),
            x: flat.reshaped(&shape)?,
            y,
            classes: self.classes,
            range: self.range,
        })
    }

    /// First `n` items (useful for bounded evaluation runs).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let k = n.min(self.n());
        self.subset(&(0..k).collect::<Vec<_>>())
    }
}

// ---------------------------------------------------------------------------
// IDX format (big-endian): magic u32 (0x803 images / 0x801 labels), dims u32
// each, u8 payload. Pixels map to [-1,1] via v*2/255 - 1.
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Data(format!("{}: truncated header", path.display())))
}

/// Load an images/labels IDX file pair into a normalized image dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = read_file(images_path)?;
    if be_u32(&ib, 0, images_path)? != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!("{}: bad IDX image magic", images_path.display())));
    }
    let n = be_u32(&ib, 4, images_path)? as usize;
    let h = be_u32(&ib, 8, images_path)? as usize;
    let w = be_u32(&ib, 12, images_path)? as usize;
    let payload = &ib[16.min(ib.len())..];
    if payload.len() != n * h * w {
        return Err(Error::Data(format!(
            "{}: payload holds {} bytes, header promises {}",
            images_path.display(),
            payload.len(),
            n * h * w
        )));
    }

    let lb = read_file(labels_path)?;
    if be_u32(&lb, 0, labels_path)? != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!("{}: bad IDX label magic", labels_path.display())));
    }
    let ln = be_u32(&lb, 4, labels_path)? as usize;
    let labels_raw = &lb[8.min(lb.len())..];
    if labels_raw.len() != ln {
        return Err(Error::Data(format!("{}: truncated label payload", labels_path.display())));
    }
    if ln != n {
        return Err(Error::Data(format!(
            "image/label count mismatch: {} images vs {} labels",
            n, ln
        )));
    }

    let x: Vec<f64> = payload.iter().map(|&p| p as f64 * 2.0 / 255.0 - 1.0).collect();
    let y: Vec<usize> = labels_raw.iter().map(|&l| l as usize).collect();
    let classes = y.iter().copied().max().map_or(10, |m| (m + 1).max(10));
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, Tensor::new(&[n, h, w, 1], x)?, y, classes, (-1.0, 1.0))
}

/// Serialize normalized images back to IDX bytes (inverse of `load_idx`).
/// Parsing then re-serializing a file reproduces it bit-for-bit.
pub fn idx_image_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let shape = ds.x.shape();
    if shape.len() != 4 || shape[3] != 1 {
        return Err(Error::Data("IDX serialization needs [N,H,W,1] images".into()));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(16 + n * h * w);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in ds.x.data() {
        out.push(((v + 1.0) * 255.0 / 2.0).round() as u8);
    }
    Ok(out)
}

pub fn idx_label_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + ds.n());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.n() as u32).to_be_bytes());
    out.extend(ds.y.iter().map(|&l| l as u8));
    out
}

// ---------------------------------------------------------------------------
// Semeion ASCII format: one digit per line, 256 binary pixel values (16x16)
// followed by a 10-element one-hot label, whitespace separated.
// ---------------------------------------------------------------------------

/// Load a Semeion-format file: 16x16 binary digits upscaled to 28x28 by
/// bilinear interpolation, normalized to [-1,1].
pub fn load_semeion(path: &Path) -> Result<Dataset> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::Data(format!("{}: not valid UTF-8", path.display())))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 266 {
            return Err(Error::Data(format!(
                "{}:{}: expected 266 fields, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let mut img16 = Vec::with_capacity(256);
        for f in &fields[..256] {
            let v: f64 = f.parse().map_err(|_| {
                Error::Data(format!("{}:{}: bad pixel value '{}'", path.display(), lineno + 1, f))
            })?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Data(format!(
                    "{}:{}: pixel value {} is not binary",
                    path.display(),
                    lineno + 1,
                    v
                )));
            }
            img16.push(v);
        }
        let mut label = None;
        for (c, f) in fields[256..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| {
                Error::Data(format!("{}:{}: bad label field '{}'", path.display(), lineno + 1, f))
            })?;
            match v {
                0.0 => {}
                1.0 if label.is_none() => label = Some(c),
                _ => {
                    return Err(Error::Data(format!(
                        "{}:{}: label is not one-hot",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        let label = label.ok_or_else(|| {
            Error::Data(format!("{}:{}: label is not one-hot", path.display(), lineno + 1))
        })?;
        let up = bilinear_resize(&img16, 16, 16, 28, 28);
        images.extend(up.iter().map(|&v| v * 2.0 - 1.0));
        labels.push(label);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Dataset::new("semeion", Tensor::new(&[rows, 28, 28, 1], images)?, labels, 10, (-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Resizing & external-image preprocessing
// ---------------------------------------------------------------------------

/// Bilinear resample with half-pixel-center alignment. A constant image maps
/// to the same constant; equal sizes are the identity.
pub fn bilinear_resize(src: &[f64], sh: usize, sw: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert_eq!(src.len(), sh * sw, "source size");
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sh as f64 / oh as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sw as f64 / ow as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = (1.0 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1];
            let bot = (1.0 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1];
            out.push((1.0 - wy) * top + wy * bot);
        }
    }
    out
}

/// Convert decoded external images (values in [0,1], 1 or 3 channels) to the
/// digit-model input distribution: luminance grayscale, bilinear resize to
/// 28x28, normalize to [-1,1]. Labels are supplied by the caller's decoder.
pub fn preprocess_external(
    images: &Tensor,
    labels: &[usize],
    classes: usize,
    name: &str,
) -> Result<Dataset> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::Data(format!("expected [N,H,W,C] images, got rank {}", shape.len())));
    }
    let (n, h, w, ch) = (shape[0], shape[1], shape[2], shape[3]);
    if ch != 1 && ch != 3 {
        return Err(Error::Data(format!("unsupported channel count {}", ch)));
    }
    if labels.len() != n {
        return Err(Error::Data(format!("{} images but {} labels", n, labels.len())));
    }
    let src = images.data();
    let mut out = Vec::with_capacity(n * 28 * 28);
    let mut gray = vec![0.0; h * w];
    for i in 0..n {
        let base = i * h * w * ch;
        for p in 0..h * w {
            gray[p] = if ch == 1 {
                src[base + p]
            } else {
                let r = src[base + p * 3];
                let g = src[base + p * 3 + 1];
                let b = src[base + p * 3 + 2];
                0.299 * r + 0.587 * g + 0.114 * b
            };
        }
        let resized = bilinear_resize(&gray, h, w, 28, 28);
        out.extend(resized.iter().map(|&v| (v * 2.0 - 1.0).clamp(-1.0, 1.0)));
    }
    Dataset::new(name, Tensor::new(&[n, 28, 28, 1], out)?, labels.to_vec(), classes, (-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Half moons
// ---------------------------------------------------------------------------

/// Two interleaving crescents in the plane: class 0 on the upper unit
/// semicircle (cos t, sin t), class 1 on (1 - cos t, 0.5 - sin t), with
/// isotropic Gaussian noise. Items alternate classes so any prefix is
/// roughly balanced.
pub fn half_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Data(format!("half_moons needs an even positive count, got {}", n)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = Vec::with_capacity(n * 2);
    let mut y = Vec::with_capacity(n);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        let t = rng.gen_range(0.0..std::f64::consts::PI);
        let (mut px, mut py) = if i % 2 == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        if noise > 0.0 {
            px += noise * gauss.sample(&mut rng);
            py += noise * gauss.sample(&mut rng);
        }
        lo = lo.min(px).min(py);
        hi = hi.max(px).max(py);
        x.push(px);
        x.push(py);
        y.push(i % 2);
    }
    Dataset::new("half-moons", Tensor::new(&[n, 2], x)?, y, 2, (lo, hi))
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Split off a fixed validation set (the first `val_size` items, never
/// shuffled, so its membership is identical across runs) and draw the
/// training set as a seeded uniform subsample of `proportion` of the
/// remainder. Train and validation are disjoint by construction.
pub fn split(
    ds: &Dataset,
    val_size: usize,
    proportion: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if val_size >= ds.n() {
        return Err(Error::Data(format!(
            "validation size {} must be below dataset size {}",
            val_size,
            ds.n()
        )));
    }
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::Data(format!("proportion {} outside (0, 1]", proportion)));
    }
    let val = ds.subset(&(0..val_size).collect::<Vec<_>>())?;
    let mut rest: Vec<usize> = (val_size..ds.n()).collect();
    let k = (proportion * rest.len() as f64).round().max(1.0) as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    let mut chosen = rest[..k.min(rest.len())].to_vec();
    chosen.sort_unstable();
    let train = ds.subset(&chosen)?;
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// Synthetic digit corpus
// ---------------------------------------------------------------------------

/// Procedurally rendered digit corpus, written through the real file formats.
///
/// Each digit class has a fixed stroke skeleton; every sample applies a
/// seeded random affine warp (rotation, scale, aspect, shear, translation),
/// vertex jitter, pen-width and intensity variation, and light background
/// noise before rasterizing with a Gaussian pen. The result is a learnable
/// but non-trivial stand-in used whenever no real digit files are supplied,
/// and it exercises the IDX/Semeion loaders over genuine format bytes.
pub mod synth {
    use super::*;

    fn line(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
        points.to_vec()
    }

    /// Elliptical arc, y-axis pointing down, sampled as a polyline.
    /// Degrees: 90 is the top of the ellipse, 0 the right, -90 the bottom.
    fn arc(cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64) -> Vec<(f64, f64)> {
        let steps = 24;
        (0..=steps)
            .map(|i| {
                let a = (a0 + (a1 - a0) * i as f64 / steps as f64).to_radians();
                (cx + rx * a.cos(), cy - ry * a.sin())
            })
            .collect()
    }

    /// Quadratic Bezier sampled as a polyline.
    fn bez(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64)) -> Vec<(f64, f64)> {
        let steps = 24;
        (0..=steps)
            .map(|i| {
                let t = i as f64 / steps as f64;
                let u = 1.0 - t;
                (
                    u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
                    u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
                )
            })
            .collect()
    }

    /// Stroke skeletons per digit in a print-like style, in a unit box with
    /// y pointing down.
    fn digit_strokes(d: usize) -> Vec<Vec<(f64, f64)>> {
        match d {
            0 => vec![arc(0.5, 0.5, 0.28, 0.40, 90.0, 450.0)],
            1 => vec![line(&[(0.34, 0.26), (0.54, 0.10), (0.54, 0.90)])],
            2 => vec![
                arc(0.5, 0.32, 0.27, 0.22, 165.0, -10.0),
                line(&[(0.766, 0.362), (0.24, 0.88)]),
                line(&[(0.24, 0.88), (0.78, 0.88)]),
            ],
            3 => vec![
                arc(0.5, 0.30, 0.25, 0.21, 150.0, -90.0),
                arc(0.5, 0.70, 0.27, 0.21, 90.0, -150.0),
            ],
            4 => vec![
                line(&[(0.58, 0.10), (0.22, 0.60), (0.82, 0.60)]),
                line(&[(0.64, 0.34), (0.64, 0.90)]),
            ],
            5 => vec![
                line(&[(0.74, 0.11), (0.30, 0.11), (0.27, 0.46)]),
                arc(0.48, 0.66, 0.29, 0.23, 130.0, -140.0),
            ],
            6 => vec![
                bez((0.66, 0.08), (0.38, 0.20), (0.29, 0.56)),
                arc(0.5, 0.68, 0.25, 0.21, 90.0, 450.0),
            ],
            7 => vec![line(&[(0.22, 0.11), (0.79, 0.11), (0.40, 0.90)])],
            8 => vec![
                arc(0.5, 0.30, 0.21, 0.19, 90.0, 450.0),
                arc(0.5, 0.70, 0.25, 0.21, 90.0, 450.0),
            ],
            9 => vec![
                arc(0.5, 0.32, 0.23, 0.21, 90.0, 450.0),
                bez((0.73, 0.36), (0.73, 0.70), (0.50, 0.90)),
            ],
            _ => unreachable!("digit class"),
        }
    }

    /// Stroke skeletons in a handwriting style: serifed 1, flat-topped 3,
    /// open-topped 4, crossed 7, straight-tailed 9, and so on — the kind of
    /// allograph variation a different pool of writers produces.
    fn handwritten_strokes(d: usize) -> Vec<Vec<(f64, f64)>> {
        match d {
            0 => vec![arc(0.5, 0.5, 0.23, 0.40, 90.0, 450.0)],
            1 => vec![
                line(&[(0.36, 0.24), (0.52, 0.10), (0.52, 0.90)]),
                line(&[(0.36, 0.90), (0.68, 0.90)]),
            ],
            2 => vec![
                arc(0.5, 0.30, 0.26, 0.20, 170.0, -15.0),
                bez((0.76, 0.35), (0.42, 0.62), (0.22, 0.88)),
                line(&[(0.22, 0.88), (0.80, 0.85)]),
            ],
            3 => vec![
                line(&[(0.28, 0.12), (0.71, 0.12)]),
                line(&[(0.71, 0.12), (0.46, 0.40)]),
                arc(0.49, 0.66, 0.27, 0.24, 65.0, -155.0),
            ],
            4 => vec![
                line(&[(0.32, 0.10), (0.22, 0.56)]),
                line(&[(0.22, 0.56), (0.80, 0.56)]),
                line(&[(0.66, 0.10), (0.66, 0.90)]),
            ],
            5 => vec![
                line(&[(0.74, 0.12), (0.33, 0.12)]),
                line(&[(0.33, 0.12), (0.30, 0.44)]),
                arc(0.49, 0.66, 0.28, 0.24, 135.0, -145.0),
            ],
            6 => vec![
                line(&[(0.63, 0.08), (0.37, 0.50)]),
                arc(0.49, 0.68, 0.25, 0.22, 90.0, 450.0),
            ],
            7 => vec![
                line(&[(0.22, 0.13), (0.79, 0.13), (0.44, 0.90)]),
                line(&[(0.29, 0.50), (0.67, 0.50)]),
            ],
            8 => vec![
                arc(0.53, 0.29, 0.19, 0.18, 90.0, 450.0),
                arc(0.47, 0.70, 0.24, 0.21, 90.0, 450.0),
            ],
            9 => vec![
                arc(0.50, 0.31, 0.22, 0.20, 90.0, 450.0),
                line(&[(0.72, 0.33), (0.69, 0.90)]),
            ],
            _ => unreachable!("digit class"),
        }
    }

    fn dist2_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
        let (abx, aby) = (b.0 - a.0, b.1 - a.1);
        let (apx, apy) = (p.0 - a.0, p.1 - a.1);
        let len2 = abx * abx + aby * aby;
        let t = if len2 > 0.0 { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (dx, dy) = (apx - t * abx, apy - t * aby);
        dx * dx + dy * dy
    }

    /// How a rendering stream draws its digits: which stroke skeletons, how
    /// much geometric wobble, and what pen it holds.
    struct GlyphStyle {
        strokes: fn(usize) -> Vec<Vec<(f64, f64)>>,
        vertex_sd: f64,
        rot: f64,
        scale: (f64, f64),
        aspect: (f64, f64),
        shear: f64,
        trans: f64,
        pen: (f64, f64),
        amp: (f64, f64),
        noise: f64,
    }

    /// Clean print-like digits: modest wobble, a fine pen.
    const PRINT: GlyphStyle = GlyphStyle {
        strokes: digit_strokes,
        vertex_sd: 0.015,
        rot: 0.21,
        scale: (0.82, 1.18),
        aspect: (0.92, 1.08),
        shear: 0.15,
        trans: 0.06,
        pen: (0.042, 0.062),
        amp: (0.80, 1.0),
        noise: 0.04,
    };

    /// Handwriting: different allographs, stronger slant/shear/size wobble,
    /// a broader pen.
    const HANDWRITTEN: GlyphStyle = GlyphStyle {
        strokes: handwritten_strokes,
        vertex_sd: 0.028,
        rot: 0.30,
        scale: (0.78, 1.22),
        aspect: (0.88, 1.12),
        shear: 0.25,
        trans: 0.09,
        pen: (0.050, 0.085),
        amp: (0.85, 1.0),
        noise: 0.05,
    };

    /// Rasterize one jittered sample of digit `d` onto a `px`-by-`px` grid,
    /// values in [0,1].
    fn render(d: usize, px: usize, rng: &mut ChaCha20Rng, style: &GlyphStyle) -> Vec<f64> {
        let gauss = Normal::new(0.0, style.vertex_sd).expect("vertex jitter");
        let mut segs: Vec<((f64, f64), (f64, f64))> = Vec::new();
        for stroke in (style.strokes)(d) {
            let jittered: Vec<(f64, f64)> = stroke
                .iter()
                .map(|&(x, y)| (x + gauss.sample(rng), y + gauss.sample(rng)))
                .collect();
            for w in jittered.windows(2) {
                segs.push((w[0], w[1]));
            }
        }

        let theta: f64 = rng.gen_range(-style.rot..style.rot);
        let scale: f64 = rng.gen_range(style.scale.0..style.scale.1);
        let aspect: f64 = rng.gen_range(style.aspect.0..style.aspect.1);
        let shear: f64 = rng.gen_range(-style.shear..style.shear);
        let (tx, ty): (f64, f64) =
            (rng.gen_range(-style.trans..style.trans), rng.gen_range(-style.trans..style.trans));
        let pen: f64 = rng.gen_range(style.pen.0..style.pen.1);
        let amp: f64 = rng.gen_range(style.amp.0..style.amp.1);
        let noise: f64 = rng.gen_range(0.0..style.noise);

        // forward map: p = c + t + M (q - c), M = scale.aspect * rot * shear;
        // rasterize by pulling each pixel back through M^-1.
        let (ct, st) = (theta.cos(), theta.sin());
        let m = [
            scale * aspect * ct,
            scale * aspect * (ct * shear - st),
            scale / aspect * st,
            scale / aspect * (st * shear + ct),
        ];
        let det = m[0] * m[3] - m[1] * m[2];
        let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];

        let mut out = Vec::with_capacity(px * px);
        let two_pen2 = 2.0 * pen * pen;
        for iy in 0..px {
            let py = (iy as f64 + 0.5) / px as f64;
            for ix in 0..px {
                let pxc = (ix as f64 + 0.5) / px as f64;
                let (dx, dy) = (pxc - 0.5 - tx, py - 0.5 - ty);
                let q = (0.5 + inv[0] * dx + inv[1] * dy, 0.5 + inv[2] * dx + inv[3] * dy);
                let mut d2 = f64::INFINITY;
                for &(a, b) in &segs {
                    d2 = d2.min(dist2_to_segment(q, a, b));
                    if d2 == 0.0 {
                        break;
                    }
                }
                let ink = amp * (-d2 / two_pen2).exp();
                let speck: f64 = rng.gen_range(0.0..1.0);
                out.push((ink + noise * speck).clamp(0.0, 1.0));
            }
        }
        out
    }

    /// Generate `n` samples cycling through the ten classes, as raw bytes
    /// (pixels 0..=255 row-major, one label byte per image).
    pub fn digit_bytes(n: usize, px: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n * px * px);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let d = i % 10;
            let img = render(d, px, &mut rng, &PRINT);
            images.extend(img.iter().map(|&v| (v * 255.0).round() as u8));
            labels.push(d as u8);
        }
        (images, labels)
    }

    fn write_idx_pair(
        dir: &Path,
        images_name: &str,
        labels_name: &str,
        images: &[u8],
        labels: &[u8],
        px: usize,
    ) -> Result<()> {
        let n = labels.len();
        let mut ib = Vec::with_capacity(16 + images.len());
        ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        ib.extend_from_slice(&(n as u32).to_be_bytes());
        ib.extend_from_slice(&(px as u32).to_be_bytes());
        ib.extend_from_slice(&(px as u32).to_be_bytes());
        ib.extend_from_slice(images);
        let mut lb = Vec::with_capacity(8 + n);
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(n as u32).to_be_bytes());
        lb.extend_from_slice(labels);
        std::fs::create_dir_all(dir)?;
        std::fs::File::create(dir.join(images_name))?.write_all(&ib)?;
        std::fs::File::create(dir.join(labels_name))?.write_all(&lb)?;
        Ok(())
    }

    pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
    pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
    pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
    pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

    /// Write a train/test IDX corpus into `dir` unless all four files are
    /// already present. Deterministic in (sizes, seed).
    pub fn ensure_idx_corpus(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
        let all = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS];
        if all.iter().all(|f| dir.join(f).exists()) {
            return Ok(());
        }
        let (ti, tl) = digit_bytes(n_train, 28, seed);
        write_idx_pair(dir, TRAIN_IMAGES, TRAIN_LABELS, &ti, &tl, 28)?;
        // distinct stream for the test side so it is not a prefix of train
        let (si, sl) = digit_bytes(n_test, 28, seed ^ 0x9e37_79b9_7f4a_7c15);
        write_idx_pair(dir, TEST_IMAGES, TEST_LABELS, &si, &sl, 28)?;
        Ok(())
    }

    /// Write a Semeion-format file of binarized 16x16 digits. Handwriting-
    /// styled strokes, heavier geometric wobble, and the binarizing threshold
    /// give it a genuine domain shift relative to the IDX corpus.
    pub fn ensure_semeion_file(path: &Path, n: usize, seed: u64) -> Result<()> {
        if path.exists() {
            return Ok(());
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut text = String::new();
        for i in 0..n {
            let d = i % 10;
            let img = render(d, 16, &mut rng, &HANDWRITTEN);
            for &v in &img {
                text.push_str(if v > 0.45 { "1.0000 " } else { "0.0000 " });
            }
            for c in 0..10 {
                text.push(if c == d { '1' } else { '0' });
                text.push(if c == 9 { '\n' } else { ' ' });
            }
        }
        std::fs::File::create(path)?.write_all(text.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_dir() -> std::path::PathBuf {
        use std::sync::OnceLock;
        static CORPUS: OnceLock<std::path::PathBuf> = OnceLock::new();
        CORPUS
            .get_or_init(|| {
                let td = tempfile::tempdir().unwrap();
                let path = td.path().to_path_buf();
                std::mem::forget(td); // keep the directory for the whole test run
                synth::ensure_idx_corpus(&path, 200, 60, 11).unwrap();
                path
            })
            .clone()
    }

    #[test]
    fn idx_load_and_bit_exact_round_trip() {
        let dir = corpus_dir();
        let ds = load_idx(&dir.join(synth::TRAIN_IMAGES), &dir.join(synth::TRAIN_LABELS)).unwrap();
        assert_eq!(ds.x.shape(), &[200, 28, 28, 1]);
        assert_eq!(ds.classes, 10);
        assert!(ds.y.iter().all(|&l| l < 10));
        let (lo, hi) = ds.x.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
        assert!(lo >= -1.0 && hi <= 1.0, "range [{}, {}]", lo, hi);

        let original = std::fs::read(dir.join(synth::TRAIN_IMAGES)).unwrap();
        assert_eq!(idx_image_bytes(&ds).unwrap(), original, "image bytes round trip");
        let original_labels = std::fs::read(dir.join(synth::TRAIN_LABELS)).unwrap();
        assert_eq!(idx_label_bytes(&ds), original_labels, "label bytes round trip");
    }

    #[test]
    fn idx_pixel_endpoints_map_to_unit_interval() {
        assert_eq!(0.0 * 2.0 / 255.0 - 1.0, -1.0);
        assert_eq!(255.0 * 2.0 / 255.0 - 1.0, 1.0);
    }

    #[test]
    fn idx_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let good = corpus_dir();
        let img = good.join(synth::TRAIN_IMAGES);
        let lab = good.join(synth::TRAIN_LABELS);

        // bad magic, named in the error
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[2] = 0xff;
        let bad = dir.path().join("bad-magic");
        std::fs::write(&bad, &bytes).unwrap();
        let err = load_idx(&bad, &lab).unwrap_err().to_string();
        assert!(err.contains("bad-magic"), "error names the file: {}", err);

        // truncated payload
        let bytes = std::fs::read(&img).unwrap();
        let trunc = dir.path().join("truncated");
        std::fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_idx(&trunc, &lab).is_err());

        // count mismatch: labels from a smaller set
        let err = load_idx(&img, &good.join(synth::TEST_LABELS)).unwrap_err().to_string();
        assert!(err.contains("mismatch"), "{}", err);
    }

    #[test]
    fn semeion_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("semeion.data");
        synth::ensure_semeion_file(&path, 50, 3).unwrap();
        let ds = load_semeion(&path).unwrap();
        assert_eq!(ds.x.shape(), &[50, 28, 28, 1]);
        assert_eq!(ds.y[9], 9, "tenth item is digit 9 (classes cycle)");

        // all-zero row upscales to constant -1
        let mut row = String::new();
        for _ in 0..256 {
            row.push_str("0.0000 ");
        }
        row.push_str("0 0 0 0 0 0 0 0 0 1\n");
        let zp = dir.path().join("zeros.data");
        std::fs::write(&zp, &row).unwrap();
        let z = load_semeion(&zp).unwrap();
        assert!(z.x.data().iter().all(|&v| v == -1.0), "constant image stays constant");
        assert_eq!(z.y, vec![9]);

        // malformed rows
        std::fs::write(dir.path().join("short.data"), "1.0 0.0\n").unwrap();
        assert!(load_semeion(&dir.path().join("short.data")).is_err());
        let mut two_hot = String::new();
        for _ in 0..256 {
            two_hot.push_str("0.0000 ");
        }
        two_hot.push_str("1 1 0 0 0 0 0 0 0 0\n");
        std::fs::write(dir.path().join("twohot.data"), &two_hot).unwrap();
        assert!(load_semeion(&dir.path().join("twohot.data")).is_err());
    }

    #[test]
    fn bilinear_identity_and_block_average() {
        // same-size resize is the identity
        let src: Vec<f64> = (0..28 * 28).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(bilinear_resize(&src, 28, 28, 28, 28), src);

        // 2x downscale of a checkerboard averages each 2x2 block to mid-gray
        let mut checker = vec![0.0; 56 * 56];
        for y in 0..56 {
            for x in 0..56 {
                checker[y * 56 + x] = ((x + y) % 2) as f64;
            }
        }
        let down = bilinear_resize(&checker, 56, 56, 28, 28);
        for &v in &down {
            assert!((v - 0.5).abs() < 1e-12, "checkerboard averages to 0.5, got {}", v);
        }
    }

    #[test]
    fn preprocess_external_grayscale_and_identity() {
        // pure gray RGB keeps its value (luminance weights sum to 1)
        let v = 0.37;
        let img = Tensor::full(&[1, 28, 28, 3], v);
        let ds = preprocess_external(&img, &[0], 10, "ext").unwrap();
        for &p in ds.x.data() {
            assert!((p - (v * 2.0 - 1.0)).abs() < 1e-12);
        }
        assert_eq!(ds.x.shape(), &[1, 28, 28, 1]);

        // single-channel 28x28 input keeps its geometry and values
        let data: Vec<f64> = (0..28 * 28).map(|i| (i % 7) as f64 / 7.0).collect();
        let img = Tensor::new(&[1, 28, 28, 1], data.clone()).unwrap();
        let ds = preprocess_external(&img, &[3], 10, "ext").unwrap();
        for (a, &b) in ds.x.data().iter().zip(&data) {
            assert!((a - (b * 2.0 - 1.0)).abs() < 1e-12);
        }

        let bad = Tensor::zeros(&[1, 8, 8, 4]);
        assert!(preprocess_external(&bad, &[0], 10, "ext").is_err());
    }

    #[test]
    fn half_moons_geometry_and_determinism() {
        let ds = half_moons(100, 0.0, 5).unwrap();
        assert_eq!(ds.n(), 100);
        assert_eq!(ds.y.iter().filter(|&&l| l == 0).count(), 50);
        for i in 0..100 {
            let (px, py) = (ds.x.at(&[i, 0]), ds.x.at(&[i, 1]));
            if ds.y[i] == 0 {
                let r = (px * px + py * py).sqrt();
                assert!((r - 1.0).abs() < 1e-12, "class 0 on the unit circle, r={}", r);
            }
        }
        let a = half_moons(40, 0.1, 9).unwrap();
        let b = half_moons(40, 0.1, 9).unwrap();
        assert_eq!(a.x.data(), b.x.data());
        assert_eq!(a.y, b.y);
        assert!(half_moons(7, 0.1, 0).is_err(), "odd count rejected");
    }

    #[test]
    fn split_contract() {
        let ds = half_moons(200, 0.1, 1).unwrap();
        let (train, val) = split(&ds, 40, 1.0, 7).unwrap();
        assert_eq!(val.n(), 40);
        assert_eq!(train.n(), 160, "p=1 takes the full remainder");
        // validation is exactly the first items, in order
        for i in 0..40 {
            assert_eq!(val.x.at(&[i, 0]), ds.x.at(&[i, 0]));
            assert_eq!(val.y[i], ds.y[i]);
        }
        let (small, _) = split(&ds, 40, 0.1, 7).unwrap();
        assert_eq!(small.n(), 16, "p=0.1 of 160");
        // train items all come from beyond the validation prefix
        let val_set: Vec<f64> = (0..40).map(|i| ds.x.at(&[i, 0])).collect();
        for i in 0..small.n() {
            let vx = small.x.at(&[i, 0]);
            assert!(!val_set.contains(&vx), "train and validation are disjoint");
        }
        assert!(split(&ds, 200, 0.5, 0).is_err());
        assert!(split(&ds, 10, 0.0, 0).is_err());
        assert!(split(&ds, 10, 1.5, 0).is_err());
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_balanced() {
        let (a_img, a_lab) = synth::digit_bytes(30, 28, 123);
        let (b_img, b_lab) = synth::digit_bytes(30, 28, 123);
        assert_eq!(a_img, b_img);
        assert_eq!(a_lab, b_lab);
        let (c_img, _) = synth::digit_bytes(30, 28, 124);
        assert_ne!(a_img, c_img, "different seeds differ");
        for d in 0..10u8 {
            assert_eq!(a_lab.iter().filter(|&&l| l == d).count(), 3);
        }
        // glyphs have real ink: mean intensity in a plausible band
        let mean = a_img.iter().map(|&v| v as f64).sum::<f64>() / a_img.len() as f64;
        assert!(mean > 10.0 && mean < 120.0, "mean pixel {}", mean);
    }
}
