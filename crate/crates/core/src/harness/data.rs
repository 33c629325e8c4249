use std::f32::consts::PI;
use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microgradnet::{Dataset, Tensor};
use crate::searchspace::{binarize_labels, Task};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed at byte {offset}: {msg}")]
    Malformed {
        path: PathBuf,
        offset: u64,
        msg: String,
    },
    #[error("requested {requested} examples but only {available} are available")]
    SplitOverflow { requested: usize, available: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Images `[n, c, h, w]` with labels, before splitting.
#[derive(Clone, Debug, PartialEq)]
pub struct RawData {
    pub shape: [usize; 3],
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl RawData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn features(&self) -> usize {
        self.shape.iter().product()
    }

    fn check(&self) -> Result<(), DataError> {
        if self.images.len() != self.len() * self.features() {
            return Err(DataError::Invalid(format!(
                "{} values do not fill {} images of {:?}",
                self.images.len(),
                self.len(),
                self.shape
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(DataError::Invalid(format!(
                "label {l} outside {} classes",
                self.classes
            )));
        }
        Ok(())
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Dimensions and unsigned-byte payload of an IDX file (optionally gzipped).
/// Offsets in errors refer to the decompressed stream.
pub fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let bytes = read_maybe_gz(path)?;
    let bad = |offset: usize, msg: String| DataError::Malformed {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 4 {
        return Err(bad(bytes.len(), "truncated header".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad(
            0,
            format!("bad magic {:02x}{:02x}", bytes[0], bytes[1]),
        ));
    }
    if bytes[2] != 0x08 {
        return Err(bad(
            2,
            format!("element type {:#04x}; only unsigned bytes", bytes[2]),
        ));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(bad(3, "zero dimensions".into()));
    }
    let head = 4 + 4 * rank;
    if bytes.len() < head {
        return Err(bad(bytes.len(), "truncated dimension table".into()));
    }
    let dims: Vec<usize> = bytes[4..head]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() < head + n {
        return Err(bad(
            bytes.len(),
            format!("payload ends early; dimensions {dims:?} need {n} bytes"),
        ));
    }
    if bytes.len() > head + n {
        return Err(bad(head + n, "trailing bytes after payload".into()));
    }
    Ok((dims, bytes[head..].to_vec()))
}

/// Image/label IDX files under `dir`. Every `*images*idx3*` file is paired
/// with the `labels`/`idx1` file of the same name; pairs are concatenated in
/// file-name order and pixels scaled to [0, 1].
pub fn load_idx_dir(dir: &Path) -> Result<RawData, DataError> {
    let entries = std::fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut image_files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.contains("images") && n.contains("idx3"))
        })
        .collect();
    image_files.sort();
    if image_files.is_empty() {
        return Err(DataError::Invalid(format!(
            "{}: no *images*idx3* files",
            dir.display()
        )));
    }
    let mut out: Option<RawData> = None;
    for img in image_files {
        let name = img.file_name().unwrap().to_string_lossy();
        let lab = img.with_file_name(name.replace("images", "labels").replace("idx3", "idx1"));
        let part = load_idx_pair(&img, &lab)?;
        match &mut out {
            None => out = Some(part),
            Some(acc) => {
                if acc.shape != part.shape {
                    return Err(DataError::Invalid(format!(
                        "{}: image shape {:?} differs from {:?}",
                        img.display(),
                        part.shape,
                        acc.shape
                    )));
                }
                acc.images.extend(part.images);
                acc.labels.extend(part.labels);
                acc.classes = acc.classes.max(part.classes);
            }
        }
    }
    Ok(out.expect("at least one pair"))
}

/// One image file (`[n, h, w]` or `[n, c, h, w]`) and its label file.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<RawData, DataError> {
    let (idims, pixels) = read_idx(images)?;
    let (ldims, lbytes) = read_idx(labels)?;
    let shape = match idims[..] {
        [_, h, w] => [1, h, w],
        [_, c, h, w] => [c, h, w],
        _ => {
            return Err(DataError::Malformed {
                path: images.to_path_buf(),
                offset: 3,
                msg: format!("images need 3 or 4 dimensions, got {}", idims.len()),
            })
        }
    };
    if ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(DataError::Malformed {
            path: labels.to_path_buf(),
            offset: 4,
            msg: format!("{ldims:?} labels for {} images", idims[0]),
        });
    }
    let labels: Vec<usize> = lbytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(RawData {
        shape,
        images: pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        labels,
        classes,
    })
}

/// Header names the label column then one column per feature,
/// `c{c}y{y}x{x}`; the last one fixes the image shape.
fn csv_header(shape: [usize; 3]) -> Vec<String> {
    let mut h = vec!["label".to_string()];
    for c in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                h.push(format!("c{c}y{y}x{x}"));
            }
        }
    }
    h
}

fn parse_shape(last: &str) -> Option<[usize; 3]> {
    let rest = last.strip_prefix('c')?;
    let (c, rest) = rest.split_once('y')?;
    let (y, x) = rest.split_once('x')?;
    Some([
        c.parse::<usize>().ok()? + 1,
        y.parse::<usize>().ok()? + 1,
        x.parse::<usize>().ok()? + 1,
    ])
}

/// One row per example: label, then features in `[c, h, w]` order.
pub fn write_csv(path: &Path, data: &RawData) -> Result<(), DataError> {
    let io = |e: csv::Error| DataError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = csv_header(data.shape);
    header[0] = format!("label/{}", data.classes);
    w.write_record(&header).map_err(io)?;
    let f = data.features();
    for (i, &l) in data.labels.iter().enumerate() {
        let mut row = vec![l.to_string()];
        row.extend(
            data.images[i * f..(i + 1) * f]
                .iter()
                .map(|v| v.to_string()),
        );
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads the layout written by [`write_csv`]. A `label/K` header fixes the
/// class count; otherwise it is one more than the largest label.
pub fn load_csv(path: &Path) -> Result<RawData, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let bad = |offset: u64, msg: String| DataError::Malformed {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    let header = r.headers().map_err(|e| bad(0, e.to_string()))?.clone();
    let shape = header
        .iter()
        .next_back()
        .and_then(parse_shape)
        .ok_or_else(|| bad(0, "last header column is not c<C>y<Y>x<X>".into()))?;
    let features: usize = shape.iter().product();
    if header.len() != features + 1 {
        return Err(bad(
            0,
            format!("{} columns for shape {shape:?}", header.len()),
        ));
    }
    let declared = match header.get(0).and_then(|h| h.strip_prefix("label/")) {
        Some(k) => Some(
            k.parse::<usize>()
                .map_err(|_| bad(0, format!("bad class count {k:?}")))?,
        ),
        None => None,
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let off = e.position().map_or(0, |p| p.byte());
            bad(off, e.to_string())
        })?;
        let off = rec.position().map_or(0, |p| p.byte());
        if rec.len() != features + 1 {
            return Err(bad(
                off,
                format!("{} fields, expected {}", rec.len(), features + 1),
            ));
        }
        labels.push(
            rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| bad(off, format!("bad label {:?}", &rec[0])))?,
        );
        for v in rec.iter().skip(1) {
            images.push(
                v.trim()
                    .parse::<f32>()
                    .map_err(|_| bad(off, format!("bad value {v:?}")))?,
            );
        }
    }
    let classes = declared.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let data = RawData {
        shape,
        images,
        labels,
        classes,
    };
    data.check()?;
    Ok(data)
}

/// Row weights of an area-averaging resample from `from` to `to` samples.
fn area_weights(from: usize, to: usize) -> Vec<Vec<(usize, f32)>> {
    let ratio = from as f64 / to as f64;
    (0..to)
        .map(|o| {
            let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            (lo.floor() as usize..(hi.ceil() as usize).min(from))
                .filter_map(|i| {
                    let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / ratio;
                    (w > 0.0).then_some((i, w as f32))
                })
                .collect()
        })
        .collect()
}

/// Area-averaged resize of every channel to `side x side`.
pub fn resize(data: &RawData, side: usize) -> RawData {
    let [c, h, w] = data.shape;
    if h == side && w == side {
        return data.clone();
    }
    let wy = area_weights(h, side);
    let wx = area_weights(w, side);
    let mut images = Vec::with_capacity(data.len() * c * side * side);
    for plane in data.images.chunks_exact(h * w) {
        for ry in &wy {
            for rx in &wx {
                let mut s = 0.0;
                for &(y, a) in ry {
                    for &(x, b) in rx {
                        s += a * b * plane[y * w + x];
                    }
                }
                images.push(s);
            }
        }
    }
    RawData {
        shape: [c, side, side],
        images,
        ..data.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Mean and standard deviation of every input feature.
    PerFeature,
    PerChannel,
}

/// Statistics from the training split, broadcast to one entry per feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    /// Features with zero spread are centred only.
    pub fn fit(images: &[f32], shape: [usize; 3], mode: Normalization) -> Self {
        let f: usize = shape.iter().product();
        let n = images.len() / f.max(1);
        let group = match mode {
            Normalization::None => {
                return Self {
                    mean: vec![0.0; f],
                    std: vec![1.0; f],
                }
            }
            Normalization::PerFeature => 1,
            Normalization::PerChannel => shape[1] * shape[2],
        };
        let groups = f / group;
        let mut sum = vec![0f64; groups];
        let mut sq = vec![0f64; groups];
        for row in images.chunks_exact(f) {
            for (j, &v) in row.iter().enumerate() {
                sum[j / group] += v as f64;
            }
        }
        let count = (n * group) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        for row in images.chunks_exact(f) {
            for (j, &v) in row.iter().enumerate() {
                sq[j / group] += (v as f64 - mean[j / group]).powi(2);
            }
        }
        let std: Vec<f64> = sq
            .iter()
            .map(|s| {
                let s = (s / count).sqrt();
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            mean: (0..f).map(|j| mean[j / group] as f32).collect(),
            std: (0..f).map(|j| std[j / group] as f32).collect(),
        }
    }

    pub fn apply(&self, images: &mut [f32]) {
        let f = self.mean.len();
        for row in images.chunks_exact_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub classes: usize,
    pub shape: [usize; 3],
    pub stats: NormStats,
    /// Source indices of each split, in split order.
    pub indices: [Vec<usize>; 3],
}

impl DatasetBundle {
    pub fn task(&self) -> Task {
        Task {
            input: self.shape,
            classes: self.classes,
        }
    }

    /// Relabels every split to two classes.
    pub fn binarize(mut self, first: &[usize], second: &[usize]) -> Result<Self, DataError> {
        let inv = |e: crate::searchspace::SpaceError| DataError::Invalid(e.to_string());
        self.train = binarize_labels(&self.train, first, second).map_err(inv)?;
        self.val = binarize_labels(&self.val, first, second).map_err(inv)?;
        self.test = binarize_labels(&self.test, first, second).map_err(inv)?;
        self.classes = 2;
        Ok(self)
    }
}

fn take(data: &RawData, idx: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let f = data.features();
    let mut images = Vec::with_capacity(idx.len() * f);
    for &i in idx {
        images.extend_from_slice(&data.images[i * f..(i + 1) * f]);
    }
    (images, idx.iter().map(|&i| data.labels[i]).collect())
}

/// Seeded shuffle into disjoint train/val/test splits, normalized with
/// statistics of the training split.
pub fn split_dataset(
    data: &RawData,
    sizes: SplitSizes,
    norm: Normalization,
    seed: u64,
) -> Result<DatasetBundle, DataError> {
    data.check()?;
    if sizes.total() > data.len() {
        return Err(DataError::SplitOverflow {
            requested: sizes.total(),
            available: data.len(),
        });
    }
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(DataError::Invalid(
            "every split needs at least one example".into(),
        ));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tr = order[..sizes.train].to_vec();
    let va = order[sizes.train..sizes.train + sizes.val].to_vec();
    let te = order[sizes.train + sizes.val..sizes.total()].to_vec();
    let (train_x, _) = take(data, &tr);
    let stats = NormStats::fit(&train_x, data.shape, norm);
    let [c, h, w] = data.shape;
    let make = |idx: &[usize]| -> Result<Dataset, DataError> {
        let (mut x, y) = take(data, idx);
        stats.apply(&mut x);
        let t = Tensor::new(vec![idx.len(), c, h, w], x)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        Dataset::new(t, y, data.classes).map_err(|e| DataError::Invalid(e.to_string()))
    };
    Ok(DatasetBundle {
        train: make(&tr)?,
        val: make(&va)?,
        test: make(&te)?,
        classes: data.classes,
        shape: data.shape,
        stats,
        indices: [tr, va, te],
    })
}

/// Two-class grayscale textures: noisy sinusoidal gratings whose
/// orientation is drawn near 0 (class 0) or near 90 degrees (class 1),
/// with random frequency and phase.
pub fn synthetic_textures(n: usize, side: usize, seed: u64) -> RawData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.35).expect("valid sigma");
    let mut images = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..2usize);
        let theta = class as f32 * PI / 2.0 + rng.random_range(-0.5f32..0.5);
        let freq = rng.random_range(0.15f32..0.35);
        let phase = rng.random_range(0.0..2.0 * PI);
        let (s, c) = theta.sin_cos();
        for y in 0..side {
            for x in 0..side {
                let u = x as f32 * c + y as f32 * s;
                images.push((2.0 * PI * freq * u + phase).sin() + noise.sample(&mut rng));
            }
        }
        labels.push(class);
    }
    RawData {
        shape: [1, side, side],
        images,
        labels,
        classes: 2,
    }
}
