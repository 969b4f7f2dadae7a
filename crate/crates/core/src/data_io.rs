//! Image files, dataset indexing, batching, and the synthetic dataset.
//!
//! Layout on disk: `root/{train,test}/<class>/*.ppm`, binary PPM (P6) with
//! maxval 255.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::resize;
pub use crate::augment::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn decode_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Decode {
        offset,
        message: message.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    /// Skips whitespace and `#` comments; requires at least one separator.
    fn separator(&mut self) -> Result<()> {
        let start = self.pos;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        if self.pos == start {
            return Err(decode_err(self.pos, "expected whitespace"));
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(decode_err(start, format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        let v = text
            .parse::<usize>()
            .map_err(|_| decode_err(start, format!("{what} {text} out of range")))?;
        Ok((v, start))
    }
}

/// Decodes a binary PPM (`P6`, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(decode_err(0, "missing P6 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    h.separator()?;
    let (width, at) = h.number("width")?;
    if width == 0 {
        return Err(decode_err(at, "zero width"));
    }
    h.separator()?;
    let (height, at) = h.number("height")?;
    if height == 0 {
        return Err(decode_err(at, "zero height"));
    }
    h.separator()?;
    let (maxval, at) = h.number("maxval")?;
    if maxval != 255 {
        return Err(decode_err(at, format!("maxval {maxval} unsupported (only 255)")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => {
            return Err(decode_err(
                h.pos,
                "expected a single whitespace byte after maxval",
            ))
        }
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| decode_err(0, "image dimensions overflow"))?;
    let have = bytes.len() - h.pos;
    if have < need {
        return Err(decode_err(
            bytes.len(),
            format!("truncated pixel data: {have} of {need} bytes"),
        ));
    }
    Image::new(width, height, bytes[h.pos..h.pos + need].to_vec())
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Decode { offset, message } => Error::Decode {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?} (train or test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

/// Immediate subdirectories of `root` as (name, path), sorted by name.
pub fn list_class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut classes: Vec<(String, PathBuf)> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    classes.sort();
    Ok(classes)
}

/// Files in `dir`, sorted; only `.ppm` files unless `all_files`.
pub fn list_images(dir: &Path, all_files: bool) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.is_file())
        .filter(|p| all_files || p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    /// Sorted class names; the label of a class is its position.
    pub classes: Vec<String>,
    pub samples: Vec<(PathBuf, usize)>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Indexes a class-per-subdirectory tree. The split tag is `Test` when the
/// directory is named `test`, `Train` otherwise.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    let split = if root.file_name().is_some_and(|n| n == "test") {
        Split::Test
    } else {
        Split::Train
    };
    let dirs = list_class_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "{} has no class directories",
            root.display()
        )));
    }
    let mut classes = Vec::with_capacity(dirs.len());
    let mut samples = Vec::new();
    for (label, (name, dir)) in dirs.into_iter().enumerate() {
        let files = list_images(&dir, false)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!("class {name:?} has no images")));
        }
        samples.extend(files.into_iter().map(|f| (f, label)));
        classes.push(name);
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        classes,
        samples,
    })
}

/// Per-channel mean and standard deviation of [0,1]-scaled pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Standardization {
    fn default() -> Self {
        Standardization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Standardization {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.pixels.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += img.width * img.height;
        }
        if n == 0 {
            return Standardization::default();
        }
        let mut out = Standardization::default();
        for c in 0..3 {
            let m = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - m * m).max(0.0);
            out.mean[c] = m as f32;
            out.std[c] = if var.sqrt() < 1e-6 { 1.0 } else { var.sqrt() as f32 };
        }
        out
    }
}

/// A split loaded into memory at the network input size.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub index: DatasetIndex,
    pub images: Vec<Image>,
}

impl LoadedSplit {
    /// Decodes every sample; images of another size are bilinearly resized
    /// to `size` (height, width).
    pub fn load(index: DatasetIndex, size: (usize, usize)) -> Result<Self> {
        let mut images = Vec::with_capacity(index.len());
        for (path, _) in &index.samples {
            let img = load_image(path)?;
            images.push(if (img.height, img.width) == size {
                img
            } else {
                resize(&img, size.0, size.1)
            });
        }
        Ok(LoadedSplit { index, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.index.samples.iter().map(|s| s.1)
    }
}

/// Both splits of `root/{train,test}` with standardization constants
/// computed on the train split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub train: LoadedSplit,
    pub test: LoadedSplit,
    pub standardization: Standardization,
}

impl Dataset {
    pub fn open(root: &Path, size: (usize, usize)) -> Result<Self> {
        let train = scan_dataset(&root.join("train"))?;
        let test = scan_dataset(&root.join("test"))?;
        if train.classes != test.classes {
            return Err(Error::Dataset(format!(
                "train classes {:?} differ from test classes {:?}",
                train.classes, test.classes
            )));
        }
        let classes = train.classes.clone();
        let train = LoadedSplit::load(train, size)?;
        let test = LoadedSplit::load(test, size)?;
        let standardization = Standardization::from_images(&train.images);
        Ok(Dataset {
            root: root.to_path_buf(),
            classes,
            train,
            test,
            standardization,
        })
    }

    pub fn split(&self, split: Split) -> &LoadedSplit {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// N×3×H×W, scaled to [0,1] then standardized per channel.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Positions of the samples in the split index.
    pub indices: Vec<usize>,
}

/// Sample order for one epoch: shuffled by (`seed`, `epoch`) for the train
/// split, index order for the test split.
pub fn epoch_order(split: Split, len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if split == Split::Train {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

pub fn make_batch(data: &LoadedSplit, indices: &[usize], std: &Standardization) -> Result<Batch> {
    let first = &data.images[indices[0]];
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut buf = vec![0f32; indices.len() * 3 * plane];
    for (b, &i) in indices.iter().enumerate() {
        let img = &data.images[i];
        if (img.height, img.width) != (h, w) {
            return Err(Error::shape(format!(
                "sample {i} is {}x{}, batch is {h}x{w}",
                img.height, img.width
            )));
        }
        for (p, px) in img.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                buf[(b * 3 + c) * plane + p] = (px[c] as f32 / 255.0 - std.mean[c]) / std.std[c];
            }
        }
    }
    Ok(Batch {
        images: Tensor::new(vec![indices.len(), 3, h, w], buf)?,
        labels: indices.iter().map(|&i| data.index.samples[i].1).collect(),
        indices: indices.to_vec(),
    })
}

/// Batches for one epoch; the final partial batch is kept.
pub fn batches(
    data: &LoadedSplit,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    std: &Standardization,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    epoch_order(data.index.split, data.len(), seed, epoch)
        .chunks(batch_size)
        .map(|chunk| make_batch(data, chunk, std))
        .collect()
}

/// Hue (degrees) of class `k`'s palette; the golden angle spreads classes.
fn class_hue(k: usize) -> f64 {
    (k as f64 * 137.507_764).rem_euclid(360.0)
}

fn hsv8(h: f64, s: f64, v: f64) -> [f64; 3] {
    crate::augment::hsv_to_rgb([h / 360.0, s, v]).map(|c| c * 255.0)
}

/// One procedural texture sample of class `k`.
fn synth_image(k: usize, size: (usize, usize), rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = size;
    let family = k % 3;
    let freq = 2.0 + (k / 3) as f64 * 1.5;
    let fg = hsv8(
        class_hue(k) + rng.gen_range(-10.0..10.0),
        0.8,
        rng.gen_range(0.75..1.0),
    );
    let bg = hsv8(class_hue(k) + 180.0, 0.3, rng.gen_range(0.15..0.35));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let theta = (k as f64 * 47.0 + rng.gen_range(-10.0..10.0)).to_radians();
    let blobs: Vec<(f64, f64, f64)> = (0..3 + k / 3)
        .map(|_| {
            (
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.08..0.2) / (1.0 + (k / 3) as f64 * 0.3),
            )
        })
        .collect();
    let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-12.0..12.0)).collect();
    Image::from_fn(w, h, |x, y| {
        let u = x as f64 / w as f64;
        let v = y as f64 / h as f64;
        let t = match family {
            0 => {
                let a = u * theta.cos() + v * theta.sin();
                0.5 + 0.5 * (std::f64::consts::TAU * freq * a + phase).sin()
            }
            1 => {
                let cell = |c: f64| ((c * freq * 2.0 + phase).floor() as i64).rem_euclid(2);
                ((cell(u) + cell(v)) % 2) as f64
            }
            _ => blobs
                .iter()
                .map(|&(cx, cy, r)| (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * r * r)).exp())
                .sum::<f64>()
                .min(1.0),
        };
        let n = noise[y * w + x];
        [0, 1, 2].map(|c| crate::augment::quantize(bg[c] * (1.0 - t) + fg[c] * t + n))
    })
}

/// Writes `classes`×`per_class` procedural images to
/// `root/class_XX/img_YYYY.ppm`. Each class is a texture family (stripes,
/// checkerboard, blobs) at its own frequency and palette.
pub fn make_synthetic(
    root: &Path,
    classes: usize,
    per_class: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<()> {
    if classes < 2 {
        return Err(Error::config("synthetic dataset needs at least 2 classes"));
    }
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::config("synthetic image size must be positive"));
    }
    for k in 0..classes {
        let dir = root.join(format!("class_{k:02}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((k * per_class + i) as u64);
            let img = synth_image(k, size, &mut rng);
            write_image(&dir.join(format!("img_{i:04}.ppm")), &img)?;
        }
    }
    Ok(())
}

/// A `root/{train,test}` tree of synthetic data; the two splits use
/// different sample streams.
pub fn make_synthetic_dataset(
    root: &Path,
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<()> {
    make_synthetic(&root.join("train"), classes, train_per_class, size, seed)?;
    make_synthetic(
        &root.join("test"),
        classes,
        test_per_class,
        size,
        seed ^ 0x7465_7374,
    )
}
