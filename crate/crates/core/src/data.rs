//! Datasets: IDX files, synthetic generators, splits, downsampling and manifests.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Lp, Tensor};

pub const IDX_IMAGES_U8: u32 = 0x0000_0803;
pub const IDX_LABELS_U8: u32 = 0x0000_0801;
/// Images stored as big-endian `f64` (used for real-valued synthetic data).
pub const IDX_IMAGES_F64: u32 = 0x0000_0E03;

pub const DEFAULT_HOLDOUT: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    x: Tensor,
    y: Vec<usize>,
    num_classes: usize,
    sample_shape: Vec<usize>,
    clamp: Option<(f64, f64)>,
    pub split: Split,
}

impl Dataset {
    /// `x` is `[N, ..sample_shape]`; every label must be below `num_classes`.
    pub fn new(name: &str, x: Tensor, y: Vec<usize>, num_classes: usize, clamp: Option<(f64, f64)>) -> Result<Self> {
        if x.ndim() < 2 || x.shape()[0] != y.len() {
            return Err(Error::Dataset(format!(
                "{} labels for feature tensor {:?}",
                y.len(),
                x.shape()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label: bad,
                classes: num_classes,
            });
        }
        if let Some((lo, hi)) = clamp {
            if x.data().iter().any(|&v| v < lo || v > hi || v.is_nan()) {
                return Err(Error::Dataset(format!("features outside declared range [{lo}, {hi}]")));
            }
        }
        let sample_shape = x.shape()[1..].to_vec();
        Ok(Dataset {
            name: name.to_string(),
            x,
            y,
            num_classes,
            sample_shape,
            clamp,
            split: Split::Full,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn clamp(&self) -> Option<(f64, f64)> {
        self.clamp
    }

    pub fn sample(&self, i: usize) -> Tensor {
        let d = self.sample_dim();
        Tensor::new(self.sample_shape.clone(), self.x.data()[i * d..(i + 1) * d].to_vec())
            .expect("row matches sample shape")
    }

    /// Stacked samples `[len, ..sample_shape]` and their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.sample_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        (
            Tensor::new(shape, data).expect("sized from indices"),
            indices.iter().map(|&i| self.y[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (x, y) = self.batch(indices);
        Dataset {
            name: self.name.clone(),
            x,
            y,
            num_classes: self.num_classes,
            sample_shape: self.sample_shape.clone(),
            clamp: self.clamp,
            split: self.split,
        }
    }

    /// First `n` samples of a seeded class-balanced draw (round-robin over classes).
    pub fn stratified_subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::config(
                "subset",
                format!("need 1..={} samples, got {n}", self.len()),
            ));
        }
        let mut r = rng::stream(seed, &[0x5u64]);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.y.iter().enumerate() {
            by_class[y].push(i);
        }
        for c in &mut by_class {
            c.shuffle(&mut r);
        }
        let mut picked = Vec::with_capacity(n);
        let mut round = 0;
        while picked.len() < n {
            for c in &by_class {
                if let Some(&i) = c.get(round) {
                    if picked.len() < n {
                        picked.push(i);
                    }
                }
            }
            round += 1;
        }
        picked.sort_unstable();
        Ok(self.subset(&picked))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let res = if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        std::io::BufReader::new(file).read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Raw IDX array: element type byte, big-endian extents and payload.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl IdxArray {
    fn element_size(magic: u32) -> Option<usize> {
        match (magic >> 8) & 0xff {
            0x08 | 0x09 => Some(1),
            0x0B => Some(2),
            0x0C | 0x0D => Some(4),
            0x0E => Some(8),
            _ => None,
        }
    }

    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(path, "truncated IDX header"));
        }
        let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
        let ndim = (magic & 0xff) as usize;
        let size = Self::element_size(magic)
            .filter(|_| magic >> 16 == 0 && ndim > 0)
            .ok_or_else(|| Error::format(path, format!("bad IDX magic {magic:#010x}")))?;
        let header = 4 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::format(path, "truncated IDX header"));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize)
            .collect();
        let expected = dims.iter().product::<usize>() * size;
        let payload = &bytes[header..];
        if payload.len() < expected {
            return Err(Error::format(
                path,
                format!("truncated IDX payload: {} of {expected} bytes", payload.len()),
            ));
        }
        if payload.len() > expected {
            return Err(Error::format(path, "trailing bytes after IDX payload"));
        }
        Ok(IdxArray {
            magic,
            dims,
            payload: payload.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_all(path)?, path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&self.magic.to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Loads an image/label IDX pair; `u8` pixels are scaled by 1/255 into `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = IdxArray::read(images_path)?;
    let labels = IdxArray::read(labels_path)?;
    if labels.magic != IDX_LABELS_U8 || labels.dims.len() != 1 {
        return Err(Error::format(
            labels_path,
            format!(
                "expected label magic {IDX_LABELS_U8:#010x}, found {:#010x}",
                labels.magic
            ),
        ));
    }
    if images.dims.len() < 2 {
        return Err(Error::format(images_path, "image file needs at least two dimensions"));
    }
    let (pixels, clamp) = match images.magic & 0xffff_ff00 {
        0x0800 => (
            images.payload.iter().map(|&b| b as f64 / 255.0).collect::<Vec<_>>(),
            Some((0.0, 1.0)),
        ),
        0x0E00 => (
            images
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
                .collect(),
            None,
        ),
        m => {
            return Err(Error::format(
                images_path,
                format!("expected image magic {IDX_IMAGES_U8:#010x}, found {m:#010x}"),
            ))
        }
    };
    let n = images.dims[0];
    if n != labels.dims[0] {
        return Err(Error::Dataset(format!("{n} images but {} labels", labels.dims[0])));
    }
    // [N, H, W] images gain a channel axis
    let mut shape = vec![n];
    if images.dims.len() == 3 {
        shape.push(1);
    }
    shape.extend_from_slice(&images.dims[1..]);
    let y: Vec<usize> = labels.payload.iter().map(|&b| b as usize).collect();
    let k = y.iter().max().map_or(0, |m| m + 1).max(2);
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(&name, Tensor::new(shape, pixels)?, y, k, clamp)
}

/// Writes a dataset as an IDX pair; `[0, 1]`-clamped data is quantized to bytes.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let n = ds.len();
    let mut dims = vec![n];
    let shape = ds.sample_shape();
    if shape.len() == 3 && shape[0] == 1 {
        dims.extend_from_slice(&shape[1..]);
    } else {
        dims.extend_from_slice(shape);
    }
    let ndim = dims.len() as u32;
    let images = if ds.clamp() == Some((0.0, 1.0)) {
        IdxArray {
            magic: 0x0800 | ndim,
            dims: dims.clone(),
            payload: ds.x().data().iter().map(|&v| (v * 255.0).round() as u8).collect(),
        }
    } else {
        IdxArray {
            magic: 0x0E00 | ndim,
            dims: dims.clone(),
            payload: ds.x().data().iter().flat_map(|v| v.to_be_bytes()).collect(),
        }
    };
    if ds.labels().iter().any(|&l| l > 255) {
        return Err(Error::Dataset("labels above 255 do not fit IDX bytes".into()));
    }
    let labels = IdxArray {
        magic: IDX_LABELS_U8,
        dims: vec![n],
        payload: ds.labels().iter().map(|&l| l as u8).collect(),
    };
    images.write(images_path)?;
    labels.write(labels_path)
}

/// Reads `label,pixel...` or `pixel...,label` rows of 0–255 integers.
pub fn load_csv(path: &Path, label_first: bool, image_side: Option<usize>) -> Result<Dataset> {
    let text = String::from_utf8(read_all(path)?).map_err(|_| Error::format(path, "CSV is not valid UTF-8"))?;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let Ok(mut row) = parsed else {
            if lineno == 0 {
                // header line
                continue;
            }
            return Err(Error::format(path, format!("line {}: non-numeric field", lineno + 1)));
        };
        if *width.get_or_insert(row.len()) != row.len() || row.len() < 2 {
            return Err(Error::format(path, format!("line {}: ragged row", lineno + 1)));
        }
        let label = if label_first { row.remove(0) } else { row.pop().unwrap() };
        if label < 0.0 || label.fract() != 0.0 {
            return Err(Error::format(path, format!("line {}: bad label {label}", lineno + 1)));
        }
        if row.iter().any(|&p| !(0.0..=255.0).contains(&p)) {
            return Err(Error::format(path, format!("line {}: pixel outside 0–255", lineno + 1)));
        }
        labels.push(label as usize);
        pixels.extend(row.into_iter().map(|p| p / 255.0));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Dataset(format!("{} has no rows", path.display())));
    }
    let d = pixels.len() / n;
    let shape = match image_side {
        Some(s) if s * s == d => vec![n, 1, s, s],
        Some(s) => {
            return Err(Error::Dataset(format!("{d} pixels do not form a {s}×{s} image")));
        }
        None => vec![n, d],
    };
    let k = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(&name, Tensor::new(shape, pixels)?, labels, k, Some((0.0, 1.0)))
}

/// `K` Gaussian clusters (unit variance) whose centers lie at distance
/// `separation` from the origin; labels cycle through the classes.
pub fn make_blobs(n: usize, k: usize, d: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || n < k || d == 0 {
        return Err(Error::config(
            "blobs",
            format!("need n ≥ K ≥ 2 and d ≥ 1, got n={n}, K={k}, d={d}"),
        ));
    }
    let mut r = rng::stream(seed, &[0xb10b]);
    let mut centers: Vec<Tensor> = (0..k)
        .map(|_| rng::unit_direction(&mut r, &[d], Lp::L2).scale(separation))
        .collect();
    if k == 2 {
        centers[1] = centers[0].scale(-1.0);
    }
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let noise = rng::normal(&mut r, &[d]);
        data.extend(centers[c].data().iter().zip(noise.data()).map(|(a, b)| a + b));
        y.push(c);
    }
    Dataset::new("blobs", Tensor::new(vec![n, d], data)?, y, k, None)
}

/// Two-class planar data labelled by the sign of `1 − ½x₁²` (class 0 where positive).
pub fn make_quadratic_boundary(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::config("quadratic", "need at least two samples"));
    }
    let mut r = rng::stream(seed, &[0x9d]);
    let root2 = 2f64.sqrt();
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let x1 = loop {
            let u: f64 = r.random_range(-2.0 * root2..2.0 * root2);
            let f = 1.0 - 0.5 * u * u;
            if (class == 0 && f > 0.0) || (class == 1 && f < 0.0) {
                break u;
            }
        };
        let x2: f64 = r.random_range(-2.0..2.0);
        data.extend_from_slice(&[x1, x2]);
        y.push(class);
    }
    Dataset::new("quadratic", Tensor::new(vec![n, 2], data)?, y, 2, None)
}

/// Seeded disjoint partition into `(train, eval)` with `round(N·fraction)` eval samples.
pub fn holdout_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(
            "holdout",
            format!("fraction must lie in (0, 1), got {fraction}"),
        ));
    }
    let n = ds.len();
    let n_eval = (n as f64 * fraction).round() as usize;
    if n_eval == 0 || n_eval >= n {
        return Err(Error::config(
            "holdout",
            format!("fraction {fraction} of {n} samples leaves an empty side"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0x5917]));
    let (eval_idx, train_idx) = order.split_at(n_eval);
    let (mut eval_idx, mut train_idx) = (eval_idx.to_vec(), train_idx.to_vec());
    eval_idx.sort_unstable();
    train_idx.sort_unstable();
    let mut train = ds.subset(&train_idx);
    let mut eval = ds.subset(&eval_idx);
    train.split = Split::Train;
    eval.split = Split::Eval;
    Ok((train, eval))
}

/// Average pooling by `factor` over the two spatial axes of `[C, H, W]` samples.
pub fn downsample(ds: &Dataset, factor: usize) -> Result<Dataset> {
    let s = ds.sample_shape();
    if s.len() != 3 {
        return Err(Error::Dataset(format!("downsampling needs image samples, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Dataset(format!("{h}×{w} is not divisible by factor {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let n = ds.len();
    let src = ds.x().data();
    let mut out = vec![0.0; n * c * oh * ow];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += src[base + (oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    out[((i * c + ch) * oh + oy) * ow + ox] = acc / area;
                }
            }
        }
    }
    let mut res = Dataset::new(
        &ds.name,
        Tensor::new(vec![n, c, oh, ow], out)?,
        ds.labels().to_vec(),
        ds.num_classes(),
        ds.clamp(),
    )?;
    res.split = ds.split;
    Ok(res)
}

/// Zero-pads `[C, H, W]` samples to `[C, h, w]`, centered (extra row or column goes last).
pub fn pad_spatial(ds: &Dataset, h: usize, w: usize) -> Result<Dataset> {
    let s = ds.sample_shape();
    if s.len() != 3 || s[1] > h || s[2] > w {
        return Err(Error::Dataset(format!("cannot pad samples of shape {s:?} to {h}×{w}")));
    }
    let (c, ih, iw) = (s[0], s[1], s[2]);
    let (top, left) = ((h - ih) / 2, (w - iw) / 2);
    let n = ds.len();
    let src = ds.x().data();
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        for y in 0..ih {
            let from = (plane * ih + y) * iw;
            let to = (plane * h + top + y) * w + left;
            out[to..to + iw].copy_from_slice(&src[from..from + iw]);
        }
    }
    let mut res = Dataset::new(
        &ds.name,
        Tensor::new(vec![n, c, h, w], out)?,
        ds.labels().to_vec(),
        ds.num_classes(),
        ds.clamp(),
    )?;
    res.split = ds.split;
    Ok(res)
}

/// Pools image samples down to `side × side`, zero-padding first when the
/// sides are not a multiple of `side` (28×28 to 8×8 pads to 32 and pools by 4).
pub fn shrink_to(ds: &Dataset, side: usize) -> Result<Dataset> {
    let s = ds.sample_shape();
    if s.len() != 3 || side == 0 || s[1] != s[2] || s[1] < side {
        return Err(Error::Dataset(format!(
            "cannot shrink samples of shape {s:?} to {side}×{side}"
        )));
    }
    let factor = s[1].div_ceil(side);
    let padded = if factor * side == s[1] {
        ds.clone()
    } else {
        pad_spatial(ds, factor * side, factor * side)?
    };
    downsample(&padded, factor)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// JSON description of a dataset on disk. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub images: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<String>,
    /// SHA-256 hex digest per file name.
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
    #[serde(default)]
    pub clamp: Option<(f64, f64)>,
    /// Overrides the class count inferred from the largest label.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, dir))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Records the SHA-256 of every referenced file found under `dir`.
    pub fn record_checksums(&mut self, dir: &Path) -> Result<()> {
        let files: Vec<String> = [
            Some(&self.images),
            Some(&self.labels),
            self.test_images.as_ref(),
            self.test_labels.as_ref(),
        ]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
        for f in files {
            let digest = sha256_file(&dir.join(&f))?;
            self.checksums.insert(f, digest);
        }
        Ok(())
    }

    fn verified(&self, dir: &Path, file: &str) -> Result<PathBuf> {
        let path = dir.join(file);
        if let Some(expected) = self.checksums.get(file) {
            let found = sha256_file(&path)?;
            if &found != expected {
                return Err(Error::Checksum {
                    path,
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(path)
    }

    /// Loads the training pair (or the test pair when `test` is set), verifying checksums.
    pub fn load(&self, dir: &Path, test: bool) -> Result<Dataset> {
        let (images, labels) = if test {
            match (&self.test_images, &self.test_labels) {
                (Some(i), Some(l)) => (i, l),
                _ => return Err(Error::Dataset(format!("manifest {} has no test split", self.name))),
            }
        } else {
            (&self.images, &self.labels)
        };
        let mut ds = load_idx(&self.verified(dir, images)?, &self.verified(dir, labels)?)?;
        ds.name = self.name.clone();
        if self.clamp.is_some() || self.num_classes.is_some() {
            let k = self.num_classes.unwrap_or(ds.num_classes);
            let clamp = self.clamp.or(ds.clamp);
            ds = Dataset::new(&ds.name, ds.x.clone(), ds.y.clone(), k, clamp)?;
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    fn write_pair(dir: &Path, n_img: u32, n_lab: u32) -> (PathBuf, PathBuf) {
        let imgs: Vec<u8> = (0..n_img * 4)
            .map(|i| if i == 0 { 255 } else { (i * 7 % 256) as u8 })
            .collect();
        let labs: Vec<u8> = (0..n_lab).map(|i| (i % 10) as u8).collect();
        let (pi, pl) = (dir.join("img.idx"), dir.join("lab.idx"));
        std::fs::write(&pi, idx_bytes(IDX_IMAGES_U8, &[n_img, 2, 2], &imgs)).unwrap();
        std::fs::write(&pl, idx_bytes(IDX_LABELS_U8, &[n_lab], &labs)).unwrap();
        (pi, pl)
    }

    #[test]
    fn idx_header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = write_pair(dir.path(), 5, 5);
        let ds = load_idx(&pi, &pl).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.sample_shape(), &[1, 2, 2]);
        assert_eq!(ds.x().data()[0], 1.0);
        assert_eq!(ds.clamp(), Some((0.0, 1.0)));
        let hdr = IdxArray::parse(&idx_bytes(IDX_IMAGES_U8, &[60000, 28, 28], &vec![0; 60000 * 784]), &pi).unwrap();
        assert_eq!(hdr.dims, vec![60000, 28, 28]);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = write_pair(dir.path(), 5, 4);
        assert!(matches!(load_idx(&pi, &pl), Err(Error::Dataset(_))));
        // labels file passed as images
        assert!(load_idx(&pl, &pl).is_err());
        let mut bytes = std::fs::read(&pi).unwrap();
        bytes.pop();
        std::fs::write(&pi, &bytes).unwrap();
        assert!(matches!(IdxArray::read(&pi), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = write_pair(dir.path(), 6, 6);
        let ds = load_idx(&pi, &pl).unwrap();
        let (qi, ql) = (dir.path().join("i2"), dir.path().join("l2"));
        write_idx(&ds, &qi, &ql).unwrap();
        assert_eq!(std::fs::read(&pi).unwrap(), std::fs::read(&qi).unwrap());
        assert_eq!(std::fs::read(&pl).unwrap(), std::fs::read(&ql).unwrap());

        let blobs = make_blobs(10, 2, 3, 2.0, 1).unwrap();
        write_idx(&blobs, &qi, &ql).unwrap();
        let back = load_idx(&qi, &ql).unwrap();
        assert_eq!(back.x(), blobs.x());
    }

    #[test]
    fn blobs_are_seeded_balanced_and_separable() {
        let a = make_blobs(100, 2, 2, 8.0, 3).unwrap();
        assert_eq!(a, make_blobs(100, 2, 2, 8.0, 3).unwrap());
        assert_eq!(a.labels().iter().filter(|&&l| l == 0).count(), 50);
        // class-mean direction separates the clusters
        let (mut m0, mut m1) = (vec![0.0; 2], vec![0.0; 2]);
        for i in 0..100 {
            let m = if a.labels()[i] == 0 { &mut m0 } else { &mut m1 };
            for k in 0..2 {
                m[k] += a.sample(i).data()[k] / 50.0;
            }
        }
        let w = [m0[0] - m1[0], m0[1] - m1[1]];
        let correct = (0..100)
            .filter(|&i| {
                let s: f64 = a.sample(i).data().iter().zip(w).map(|(x, w)| x * w).sum();
                (s > 0.0) == (a.labels()[i] == 0)
            })
            .count();
        assert_eq!(correct, 100);
    }

    #[test]
    fn quadratic_labels_follow_sign_oracle() {
        let ds = make_quadratic_boundary(200, 4).unwrap();
        for i in 0..ds.len() {
            let x1 = ds.sample(i).data()[0];
            assert_eq!(ds.labels()[i], usize::from(1.0 - 0.5 * x1 * x1 < 0.0));
        }
    }

    #[test]
    fn holdout_split_protocol() {
        let ds = make_blobs(1000, 4, 3, 3.0, 0).unwrap();
        let (tr, ev) = holdout_split(&ds, DEFAULT_HOLDOUT, 7).unwrap();
        assert_eq!((tr.len(), ev.len()), (950, 50));
        let mut all: Vec<Vec<u64>> = (0..tr.len())
            .map(|i| tr.sample(i).data().iter().map(|v| v.to_bits()).collect())
            .chain((0..ev.len()).map(|i| ev.sample(i).data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let mut orig: Vec<Vec<u64>> = (0..ds.len())
            .map(|i| ds.sample(i).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(holdout_split(&ds, 0.05, 7).unwrap().1, ev);
        assert!(holdout_split(&ds, 0.0, 7).is_err());
        assert!(holdout_split(&ds, 1.0, 7).is_err());
    }

    #[test]
    fn downsample_pools_blocks() {
        let x = Tensor::new(vec![1, 1, 28, 28], (0..784).map(|i| (i % 13) as f64 / 12.0).collect()).unwrap();
        let ds = Dataset::new("t", x, vec![0], 10, Some((0.0, 1.0))).unwrap();
        let half = downsample(&ds, 2).unwrap();
        assert_eq!(half.sample_shape(), &[1, 14, 14]);
        let src = ds.x().data();
        let want = (src[0] + src[1] + src[28] + src[29]) / 4.0;
        assert!((half.x().data()[0] - want).abs() < 1e-15);
        assert!((half.x().sum() - ds.x().sum() / 4.0).abs() < 1e-9);

        let flat = Dataset::new("c", Tensor::full(&[2, 1, 8, 8], 0.25), vec![0, 1], 2, Some((0.0, 1.0))).unwrap();
        assert!(downsample(&flat, 4).unwrap().x().data().iter().all(|&v| v == 0.25));
        assert!(downsample(&flat, 3).is_err());
    }

    #[test]
    fn manifest_checksums_are_verified() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), 5, 5);
        let mut m = Manifest {
            name: "toy".into(),
            images: "img.idx".into(),
            labels: "lab.idx".into(),
            test_images: None,
            test_labels: None,
            checksums: BTreeMap::new(),
            clamp: Some((0.0, 1.0)),
            num_classes: Some(10),
        };
        m.record_checksums(dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        let (back, d) = Manifest::read(&path).unwrap();
        assert_eq!(back.load(&d, false).unwrap().len(), 5);
        std::fs::write(
            dir.path().join("lab.idx"),
            idx_bytes(IDX_LABELS_U8, &[5], &[1, 1, 1, 1, 1]),
        )
        .unwrap();
        assert!(matches!(back.load(&d, false), Err(Error::Checksum { .. })));
    }

    #[test]
    fn stratified_subset_is_balanced() {
        let ds = make_blobs(300, 3, 2, 2.0, 1).unwrap();
        let sub = ds.stratified_subset(60, 2).unwrap();
        for c in 0..3 {
            assert_eq!(sub.labels().iter().filter(|&&l| l == c).count(), 20);
        }
    }

    #[test]
    fn csv_reads_label_last() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "0,255,0,128,3\n255,255,255,255,7\n").unwrap();
        let ds = load_csv(&p, false, Some(2)).unwrap();
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.sample_shape(), &[1, 2, 2]);
        assert_eq!(ds.x().data()[1], 1.0);
    }

    #[test]
    fn shrink_pads_then_pools() {
        let x = Tensor::full(&[2, 1, 28, 28], 1.0);
        let ds = Dataset::new("ones", x, vec![0, 1], 2, Some((0.0, 1.0))).unwrap();
        let small = shrink_to(&ds, 8).unwrap();
        assert_eq!(small.sample_shape(), &[1, 8, 8]);
        // 2 zero rows/cols of padding per side fall into the border blocks
        assert_eq!(small.x().data()[0], 0.25 * 0.25 * 4.0);
        assert_eq!(small.x().data()[9], 1.0);
        assert_eq!(shrink_to(&ds, 7).unwrap().sample_shape(), &[1, 7, 7]);
    }
}
