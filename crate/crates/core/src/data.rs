//! Dataset loading, normalization and the synthetic desk-scale dataset.
//!
//! Images are stored as `f64` in `[−1, 1]`. Labels travel separately from
//! the pixels: training code only ever receives an [`ImageSet`].

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "CLUSTERDDPM_DATA";

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

/// Maps a byte intensity in `[0, 255]` to `[−1, 1]`.
pub fn normalize(v: f64) -> f64 {
    v / 127.5 - 1.0
}

pub fn denormalize(x: f64) -> f64 {
    (x + 1.0) * 127.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train, test or all"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        })
    }
}

/// Pixels only. This is what training sees.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub name: String,
    pub split: Split,
    shape: [usize; 3],
    data: Vec<f64>,
}

impl ImageSet {
    pub fn new(name: impl Into<String>, split: Split, shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || data.len() % per != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not divide into images of shape {shape:?}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self {
            name: name.into(),
            split,
            shape,
            data,
        })
    }

    /// `[C, H, W]`.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.per_image()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.per_image();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    /// The selected images as an `[n, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let data = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let [c, h, w] = self.shape;
        Tensor::new(vec![indices.len(), c, h, w], data).expect("length matches shape")
    }

    pub fn to_tensor(&self) -> Tensor {
        let [c, h, w] = self.shape;
        Tensor::new(vec![self.len(), c, h, w], self.data.clone()).expect("length matches shape")
    }

    /// Flattened rows, for pixel-space baselines.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.image(i).to_vec()).collect()
    }

    pub fn truncate(&mut self, n: usize) {
        let p = self.per_image();
        self.data.truncate(n * p);
    }

    pub fn select(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            name: self.name.clone(),
            split: self.split,
            shape: self.shape,
            data: indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
        }
    }
}

/// Ground-truth classes, consumed only by evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels(Vec<usize>);

impl Labels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.0.iter().max().map_or(0, |m| m + 1)
    }

    pub fn select(&self, indices: &[usize]) -> Labels {
        Labels(indices.iter().map(|&i| self.0[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: ImageSet,
    pub labels: Option<Labels>,
}

impl Dataset {
    pub fn new(images: ImageSet, labels: Option<Labels>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        if let Some(l) = &mut self.labels {
            l.0.truncate(n);
        }
    }

    /// Keeps the images whose label is in `classes`, in their original order.
    pub fn retain_classes(self, classes: &[usize]) -> Result<Self> {
        let labels = self
            .labels
            .ok_or_else(|| Error::InvalidArgument("class filtering needs a labeled dataset".into()))?;
        let keep: Vec<usize> = (0..labels.len()).filter(|&i| classes.contains(&labels.0[i])).collect();
        Dataset::new(self.images.select(&keep), Some(labels.select(&keep)))
    }

    /// Separates pixels from labels.
    pub fn split(self) -> (ImageSet, Option<Labels>) {
        (self.images, self.labels)
    }
}

/// Options that only some sources use.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadOptions {
    /// Square side to resize directory and COIL20 images to.
    pub resize: Option<usize>,
    /// Cache directory overriding the environment variable.
    pub data_dir: Option<PathBuf>,
}

/// Loads a named dataset (`mnist`, `fashion-mnist`, `cifar10`, `coil20`,
/// `synth[:k=..,n=..,size=..,seed=..]`) or a directory containing
/// `manifest.csv`.
pub fn load_dataset(source: &str, split: Split, limit: Option<usize>, options: &LoadOptions) -> Result<Dataset> {
    let root = options.data_dir.clone().unwrap_or_else(data_dir);
    let mut ds = match source {
        "mnist" => load_idx_pair(&root.join("mnist"), "mnist", split)?,
        "fashion-mnist" => load_idx_pair(&root.join("fashion-mnist"), "fashion-mnist", split)?,
        "cifar10" => load_cifar10(&root.join("cifar-10-batches-bin"), split)?,
        "coil20" => load_coil20(&root.join("coil-20-proc"), options.resize)?,
        s if s == "synth" || s.starts_with("synth:") => synth_mixture_images(&SynthSpec::parse(s)?)?,
        path => {
            let dir = Path::new(path);
            if !dir.is_dir() {
                return Err(Error::Dataset {
                    path: dir.to_path_buf(),
                    reason: "not a known dataset name or an existing directory".into(),
                });
            }
            load_manifest_dir(dir, options.resize)?
        }
    };
    if let Some(n) = limit {
        ds.truncate(n);
    }
    Ok(ds)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let gz = path.with_file_name(format!(
        "{}.gz",
        path.file_name().and_then(|n| n.to_str()).unwrap_or_default()
    ));
    let (actual, zipped) = if path.exists() {
        (path.to_path_buf(), false)
    } else if gz.exists() {
        (gz, true)
    } else {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            reason: "file not found (also tried .gz)".into(),
        });
    };
    let raw = fs::read(&actual).map_err(|e| Error::io(&actual, e))?;
    if !zipped {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::Dataset {
            path: actual.clone(),
            reason: format!("gzip: {e}"),
        })?;
    Ok(out)
}

fn be_u32(bytes: &[u8], at: usize) -> usize {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
}

/// Parses an IDX file of unsigned bytes, returning dims and payload.
fn parse_idx(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let corrupt = |reason: String| Error::Dataset {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(corrupt("not an unsigned-byte IDX file".into()));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(corrupt("truncated header".into()));
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i)).collect();
    let len: usize = dims.iter().product();
    if bytes.len() != header + len {
        return Err(corrupt(format!("expected {} payload bytes, found {}", len, bytes.len() - header)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn load_idx_split(dir: &Path, prefix: &str) -> Result<(Vec<f64>, [usize; 3], Vec<usize>)> {
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (dims, pixels) = parse_idx(&read_maybe_gz(&img_path)?, &img_path)?;
    let (ldims, labels) = parse_idx(&read_maybe_gz(&lbl_path)?, &lbl_path)?;
    if dims.len() != 3 || ldims.len() != 1 || dims[0] != ldims[0] {
        return Err(Error::Dataset {
            path: img_path,
            reason: format!("image dims {dims:?} disagree with label dims {ldims:?}"),
        });
    }
    let data = pixels.iter().map(|&b| normalize(b as f64)).collect();
    Ok((data, [1, dims[1], dims[2]], labels.iter().map(|&l| l as usize).collect()))
}

fn load_idx_pair(dir: &Path, name: &str, split: Split) -> Result<Dataset> {
    let prefixes: &[&str] = match split {
        Split::Train => &["train"],
        Split::Test => &["t10k"],
        Split::All => &["train", "t10k"],
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape = [1, 28, 28];
    for prefix in prefixes {
        let (d, s, l) = load_idx_split(dir, prefix)?;
        data.extend(d);
        labels.extend(l);
        shape = s;
    }
    Dataset::new(ImageSet::new(name, split, shape, data)?, Some(Labels::new(labels)))
}

fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let mut files: Vec<String> = Vec::new();
    if split != Split::Test {
        files.extend((1..=5).map(|i| format!("data_batch_{i}.bin")));
    }
    if split != Split::Train {
        files.push("test_batch.bin".into());
    }
    const RECORD: usize = 1 + 3 * 32 * 32;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(&f);
        let bytes = read_maybe_gz(&path)?;
        if bytes.len() % RECORD != 0 {
            return Err(Error::Dataset {
                path,
                reason: format!("length {} is not a multiple of {RECORD}", bytes.len()),
            });
        }
        for rec in bytes.chunks(RECORD) {
            if rec[0] > 9 {
                return Err(Error::Dataset {
                    path: path.clone(),
                    reason: format!("label {} out of range", rec[0]),
                });
            }
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&b| normalize(b as f64)));
        }
    }
    Dataset::new(ImageSet::new("cifar10", split, [3, 32, 32], data)?, Some(Labels::new(labels)))
}

fn decode_image(path: &Path, resize: Option<usize>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let img = match resize {
        Some(s) => img.resize_exact(s as u32, s as u32, image::imageops::FilterType::Triangle),
        None => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = normalize(p[c] as f64);
            }
        }
        Ok((3, h, w, data))
    } else {
        let data = img.to_luma8().into_raw().into_iter().map(|b| normalize(b as f64)).collect();
        Ok((1, h, w, data))
    }
}

fn load_images(name: &str, files: &[PathBuf], labels: Option<Vec<usize>>, resize: Option<usize>) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut shape = None;
    for f in files {
        let (c, h, w, pixels) = decode_image(f, resize)?;
        match shape {
            None => shape = Some([c, h, w]),
            Some(s) if s != [c, h, w] => {
                return Err(Error::Dataset {
                    path: f.clone(),
                    reason: format!("shape {:?} differs from {s:?}", [c, h, w]),
                })
            }
            Some(_) => {}
        }
        data.extend(pixels);
    }
    let shape = shape.ok_or_else(|| Error::InvalidArgument(format!("{name}: no images")))?;
    Dataset::new(ImageSet::new(name, Split::All, shape, data)?, labels.map(Labels::new))
}

/// `obj{1..20}__{0..71}.png`, ordered by object then pose.
fn load_coil20(dir: &Path, resize: Option<usize>) -> Result<Dataset> {
    let mut files = Vec::new();
    let mut labels = Vec::new();
    for obj in 1..=20 {
        for pose in 0..72 {
            files.push(dir.join(format!("obj{obj}__{pose}.png")));
            labels.push(obj - 1);
        }
    }
    if let Some(missing) = files.iter().find(|f| !f.exists()) {
        return Err(Error::Dataset {
            path: missing.clone(),
            reason: "file not found".into(),
        });
    }
    load_images("coil20", &files, Some(labels), resize)
}

/// A directory with `manifest.csv` listing `file,label` rows (label may be
/// empty for unlabeled data). Rows are loaded in manifest order.
fn load_manifest_dir(dir: &Path, resize: Option<usize>) -> Result<Dataset> {
    let manifest = dir.join("manifest.csv");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let bad = |line: usize, reason: &str| Error::Dataset {
        path: manifest.clone(),
        reason: format!("line {line}: {reason}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "file,label" => {}
        _ => return Err(bad(1, "expected header `file,label`")),
    }
    let mut files = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line.split_once(',').ok_or_else(|| bad(i + 1, "expected two columns"))?;
        files.push(dir.join(file.trim()));
        let label = label.trim();
        labels.push(if label.is_empty() {
            None
        } else {
            Some(label.parse().map_err(|_| bad(i + 1, "label is not a non-negative integer"))?)
        });
    }
    let labels = if labels.iter().all(Option::is_some) && !labels.is_empty() {
        Some(labels.into_iter().flatten().collect())
    } else if labels.iter().all(Option::is_none) {
        None
    } else {
        return Err(bad(0, "either every row or no row may carry a label"));
    };
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("images").to_string();
    load_images(&name, &files, labels, resize)
}

/// Parameters of the synthetic blob dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub k: usize,
    pub n_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            k: 3,
            n_per_class: 200,
            size: 16,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Parses `synth` or `synth:k=3,n=200,size=16,seed=0` (any subset).
    pub fn parse(source: &str) -> Result<Self> {
        let mut spec = Self::default();
        let Some(rest) = source.strip_prefix("synth:") else {
            return Ok(spec);
        };
        for pair in rest.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synthetic option {pair:?} is not key=value")))?;
            let parse = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| Error::Config(format!("synthetic option {key} needs an integer, got {v:?}")))
            };
            match key {
                "k" => spec.k = parse(value)? as usize,
                "n" => spec.n_per_class = parse(value)? as usize,
                "size" => spec.size = parse(value)? as usize,
                "seed" => spec.seed = parse(value)?,
                other => return Err(Error::Config(format!("unknown synthetic option {other:?}"))),
            }
        }
        Ok(spec)
    }

    pub fn source(&self) -> String {
        format!("synth:k={},n={},size={},seed={}", self.k, self.n_per_class, self.size, self.seed)
    }
}

/// `K` classes of single-channel images. Class `c` is a Gaussian blob at a
/// class-specific position on a ring around the centre; each image jitters
/// the blob's position and brightness slightly and adds pixel noise. Samples
/// are interleaved (class `i % K` for image `i`).
pub fn synth_mixture_images(spec: &SynthSpec) -> Result<Dataset> {
    if spec.k < 2 {
        return Err(Error::InvalidArgument("synthetic dataset needs at least 2 classes".into()));
    }
    if spec.size < 4 || spec.n_per_class == 0 {
        return Err(Error::InvalidArgument("synthetic images need size >= 4 and n >= 1".into()));
    }
    let s = spec.size as f64;
    let mut r = rng::stream(spec.seed, "synth", 0);
    let centre = (s - 1.0) / 2.0;
    let ring = 0.28 * s;
    let width = 0.11 * s;
    let at = |angle: f64| (centre + ring * angle.cos(), centre + ring * angle.sin());
    let n = spec.k * spec.n_per_class;
    let mut data = Vec::with_capacity(n * spec.size * spec.size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.k;
        let angle = std::f64::consts::TAU * class as f64 / spec.k as f64;
        let (mut cx, mut cy) = at(angle);
        cx += r.random_range(-0.06..0.06) * s;
        cy += r.random_range(-0.06..0.06) * s;
        let amp = r.random_range(0.8..1.0);
        for y in 0..spec.size {
            for x in 0..spec.size {
                let (xf, yf) = (x as f64, y as f64);
                let blob = |bx: f64, by: f64, w: f64| (-((xf - bx).powi(2) + (yf - by).powi(2)) / (2.0 * w * w)).exp();
                let v = amp * blob(cx, cy, width) + 0.03 * rng::normal_vec(&mut r, 1)[0];
                data.push((2.0 * v - 1.0).clamp(-1.0, 1.0));
            }
        }
        labels.push(class);
    }
    let images = ImageSet::new("synth", Split::All, [1, spec.size, spec.size], data)?;
    Dataset::new(images, Some(Labels::new(labels)))
}

/// Fraction of images closest (in pixel space) to their own class centroid.
pub fn nearest_centroid_accuracy(images: &ImageSet, labels: &Labels) -> f64 {
    let k = labels.num_classes();
    let p: usize = images.shape().iter().product();
    let mut centroids = vec![vec![0.0; p]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.as_slice().iter().enumerate() {
        counts[l] += 1;
        for (c, v) in centroids[l].iter_mut().zip(images.image(i)) {
            *c += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = labels
        .as_slice()
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let img = images.image(i);
            let d = |c: &[f64]| c.iter().zip(img).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..k).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))) == Some(l)
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Writes images as a grid PNG, one row per entry of `rows`.
pub fn save_image_grid(path: &Path, shape: [usize; 3], rows: &[Vec<&[f64]>]) -> Result<()> {
    let [c, h, w] = shape;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if cols == 0 {
        return Err(Error::InvalidArgument("empty image grid".into()));
    }
    let pad = 1;
    let (gw, gh) = (cols * (w + pad) + pad, rows.len() * (h + pad) + pad);
    let mut buf = image::RgbImage::new(gw as u32, gh as u32);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| {
                        let v = img[ch * h * w + y * w + x].clamp(-1.0, 1.0);
                        denormalize(v).round() as u8
                    };
                    let rgb = if c >= 3 { [px(0), px(1), px(2)] } else { [px(0); 3] };
                    let (gx, gy) = (pad + ci * (w + pad) + x, pad + ri * (h + pad) + y);
                    buf.put_pixel(gx as u32, gy as u32, image::Rgb(rgb));
                }
            }
        }
    }
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
