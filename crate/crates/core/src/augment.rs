//! Offline data augmentation: per-image geometric and color transforms and
//! expansion of a class-per-directory image tree.
//!
//! Every stage maps 8-bit RGB to 8-bit RGB (round half away from zero, clamp
//! to 0..=255), so each one can be checked against a per-pixel reference.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::{list_class_dirs, list_images, load_image, write_image};
use crate::error::{Error, Result};
use crate::nn::fnv1a;

/// Luma weights for RGB.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("image size {width}x{height}")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "{}x{} image needs {} bytes, got {}",
                width,
                height,
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn map_pixels(&self, mut f: impl FnMut([u8; 3]) -> [u8; 3]) -> Image {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for px in self.pixels.chunks_exact(3) {
            pixels.extend_from_slice(&f([px[0], px[1], px[2]]));
        }
        Image {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

/// Round half away from zero and clamp to 0..=255. Values within 1e-9 of a
/// half step are rounded as that exact half step, so floating-point noise
/// cannot flip a tie.
pub fn quantize(v: f64) -> u8 {
    let snapped = (v * 1e9).round() / 1e9;
    snapped.round().clamp(0.0, 255.0) as u8
}

pub fn luma(px: [u8; 3]) -> f64 {
    LUMA[0] * px[0] as f64 + LUMA[1] * px[1] as f64 + LUMA[2] * px[2] as f64
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

fn bilinear(img: &Image, sx: f64, sy: f64, index: impl Fn(i64, usize) -> usize) -> [u8; 3] {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let xs = [index(x0, img.width), index(x0 + 1, img.width)];
    let ys = [index(y0, img.height), index(y0 + 1, img.height)];
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let at = |x: usize, y: usize| img.pixels[3 * (y * img.width + x) + c] as f64;
        let top = at(xs[0], ys[0]) * (1.0 - fx) + at(xs[1], ys[0]) * fx;
        let bottom = at(xs[0], ys[1]) * (1.0 - fx) + at(xs[1], ys[1]) * fx;
        *o = quantize(top * (1.0 - fy) + bottom * fy);
    }
    out
}

/// Rotation about the image center, counter-clockwise as displayed, with
/// bilinear sampling and reflect padding. Output size equals input size.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    Image::from_fn(img.width, img.height, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = cx + c * dx - s * dy;
        let sy = cy + s * dx + c * dy;
        bilinear(img, sx, sy, reflect)
    })
}

pub fn hflip(img: &Image) -> Image {
    Image::from_fn(img.width, img.height, |x, y| img.get(img.width - 1 - x, y))
}

pub fn vflip(img: &Image) -> Image {
    Image::from_fn(img.width, img.height, |x, y| img.get(x, img.height - 1 - y))
}

/// The `width`×`height` window with top-left corner (`x`, `y`), clamped to
/// the image.
pub fn crop(img: &Image, x: usize, y: usize, width: usize, height: usize) -> Image {
    let w = width.clamp(1, img.width);
    let h = height.clamp(1, img.height);
    let x = x.min(img.width - w);
    let y = y.min(img.height - h);
    Image::from_fn(w, h, |i, j| img.get(x + i, y + j))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize(img: &Image, height: usize, width: usize) -> Image {
    let rx = img.width as f64 / width as f64;
    let ry = img.height as f64 / height as f64;
    let (w, h) = (img.width as f64 - 1.0, img.height as f64 - 1.0);
    Image::from_fn(width, height, |x, y| {
        let sx = ((x as f64 + 0.5) * rx - 0.5).clamp(0.0, w);
        let sy = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, h);
        bilinear(img, sx, sy, |i, n| (i.max(0) as usize).min(n - 1))
    })
}

/// `p·f` per channel.
pub fn adjust_brightness(img: &Image, factor: f64) -> Image {
    img.map_pixels(|px| px.map(|p| quantize(p as f64 * factor)))
}

/// `(p − m)·f + m`, with `m` the mean luma of the whole image.
pub fn adjust_contrast(img: &Image, factor: f64) -> Image {
    let n = (img.width * img.height) as f64;
    let mean = img
        .pixels
        .chunks_exact(3)
        .map(|p| luma([p[0], p[1], p[2]]))
        .sum::<f64>()
        / n;
    img.map_pixels(|px| px.map(|p| quantize((p as f64 - mean) * factor + mean)))
}

/// Interpolates each pixel between its luma gray (`f = 0`) and itself
/// (`f = 1`); `f > 1` extrapolates away from gray.
pub fn adjust_saturation(img: &Image, factor: f64) -> Image {
    img.map_pixels(|px| {
        let l = luma(px);
        px.map(|p| quantize(l + (p as f64 - l) * factor))
    })
}

pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotates hue by `degrees` in HSV space.
pub fn adjust_hue(img: &Image, degrees: f64) -> Image {
    let shift = degrees / 360.0;
    img.map_pixels(|px| {
        let [h, s, v] = rgb_to_hsv(px.map(|p| p as f64 / 255.0));
        hsv_to_rgb([(h + shift).rem_euclid(1.0), s, v]).map(|c| quantize(c * 255.0))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    /// Uniform rotation range in degrees.
    pub rotation_degrees: (f64, f64),
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Crop side length as a fraction of the (rotated) image side.
    pub crop_scale: (f64, f64),
    /// (height, width) of every output image.
    pub output_size: (usize, usize),
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    /// Hue rotation range in degrees.
    pub hue: (f64, f64),
    pub copies_per_image: usize,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            rotation_degrees: (-30.0, 30.0),
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            crop_scale: (0.7, 1.0),
            output_size: (224, 224),
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            saturation: (0.8, 1.2),
            hue: (-18.0, 18.0),
            copies_per_image: 4,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// A spec whose every transform is the identity, producing `h`×`w` output.
    pub fn identity(output_size: (usize, usize)) -> Self {
        AugmentSpec {
            rotation_degrees: (0.0, 0.0),
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            crop_scale: (1.0, 1.0),
            output_size,
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            hue: (0.0, 0.0),
            copies_per_image: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min && hi <= max) {
                return Err(Error::config(format!(
                    "augment.{name} = {lo},{hi} (need {min} <= lo <= hi <= {max})"
                )));
            }
            Ok(())
        };
        range("rotation_degrees", self.rotation_degrees, -180.0, 180.0)?;
        range("hflip_prob", (self.hflip_prob, self.hflip_prob), 0.0, 1.0)?;
        range("vflip_prob", (self.vflip_prob, self.vflip_prob), 0.0, 1.0)?;
        range("crop_scale", self.crop_scale, f64::MIN_POSITIVE, 1.0)?;
        range("brightness", self.brightness, 0.0, f64::MAX)?;
        range("contrast", self.contrast, 0.0, f64::MAX)?;
        range("saturation", self.saturation, 0.0, f64::MAX)?;
        range("hue", self.hue, -180.0, 180.0)?;
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::config("augment.output_size must be positive"));
        }
        Ok(())
    }
}

/// The parameters drawn for one augmented sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub angle: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub crop_scale: f64,
    pub crop_x: f64,
    pub crop_y: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Draw {
    /// All draws come from the ChaCha stream `sample_seed` of key
    /// `spec.seed`, in a fixed order. A range with `lo == hi` consumes no
    /// draw.
    pub fn sample(spec: &AugmentSpec, sample_seed: u64) -> Draw {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(sample_seed);
        let mut u = || rng.gen::<f64>();
        let mut span = |(lo, hi): (f64, f64)| if lo == hi { lo } else { lo + (hi - lo) * u() };
        let angle = span(spec.rotation_degrees);
        let hflip = span((0.0, 1.0)) < spec.hflip_prob;
        let vflip = span((0.0, 1.0)) < spec.vflip_prob;
        let crop_scale = span(spec.crop_scale);
        let crop_x = span((0.0, 1.0));
        let crop_y = span((0.0, 1.0));
        Draw {
            angle,
            hflip,
            vflip,
            crop_scale,
            crop_x,
            crop_y,
            brightness: span(spec.brightness),
            contrast: span(spec.contrast),
            saturation: span(spec.saturation),
            hue: span(spec.hue),
        }
    }
}

/// Applies a drawn parameter set; stages whose parameter is the identity are
/// skipped, so an identity draw returns the input unchanged.
pub fn apply(img: &Image, d: &Draw, output_size: (usize, usize)) -> Image {
    let mut out = if d.angle != 0.0 {
        rotate(img, d.angle)
    } else {
        img.clone()
    };
    if d.hflip {
        out = hflip(&out);
    }
    if d.vflip {
        out = vflip(&out);
    }
    let cw = ((d.crop_scale * out.width as f64).round() as usize).clamp(1, out.width);
    let ch = ((d.crop_scale * out.height as f64).round() as usize).clamp(1, out.height);
    if cw != out.width || ch != out.height {
        let x = (d.crop_x * (out.width - cw + 1) as f64) as usize;
        let y = (d.crop_y * (out.height - ch + 1) as f64) as usize;
        out = crop(&out, x, y, cw, ch);
    }
    if (out.height, out.width) != output_size {
        out = resize(&out, output_size.0, output_size.1);
    }
    if d.brightness != 1.0 {
        out = adjust_brightness(&out, d.brightness);
    }
    if d.contrast != 1.0 {
        out = adjust_contrast(&out, d.contrast);
    }
    if d.saturation != 1.0 {
        out = adjust_saturation(&out, d.saturation);
    }
    if d.hue != 0.0 {
        out = adjust_hue(&out, d.hue);
    }
    out
}

/// rotate → hflip → vflip → crop → resize → brightness → contrast →
/// saturation → hue, with parameters drawn by [`Draw::sample`].
pub fn augment_one(img: &Image, spec: &AugmentSpec, sample_seed: u64) -> Result<Image> {
    spec.validate()?;
    Ok(apply(img, &Draw::sample(spec, sample_seed), spec.output_size))
}

/// Original images are resized to the output size without other changes.
pub fn resize_original(img: &Image, spec: &AugmentSpec) -> Image {
    if (img.height, img.width) == spec.output_size {
        img.clone()
    } else {
        resize(img, spec.output_size.0, spec.output_size.1)
    }
}

pub const MANIFEST_HEADER: [&str; 4] = ["output_path", "source_path", "class", "sample_seed"];

/// One manifest row. A skipped source has no output and carries the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestEntry {
    Written {
        output: String,
        source: String,
        class: String,
        sample_seed: u64,
    },
    Skipped {
        source: String,
        class: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn outputs(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e, ManifestEntry::Written { .. }))
            .count()
    }

    pub fn skipped(&self) -> usize {
        self.entries.len() - self.outputs()
    }

    /// CSV with header `output_path,source_path,class,sample_seed`. Skipped
    /// rows have an empty output path and `skipped: <reason>` as the seed.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            match e {
                ManifestEntry::Written {
                    output,
                    source,
                    class,
                    sample_seed,
                } => w.write_record([output, source, class, &sample_seed.to_string()])?,
                ManifestEntry::Skipped {
                    source,
                    class,
                    reason,
                } => w.write_record(["", source, class, &format!("skipped: {reason}")])?,
            }
        }
        w.into_inner()
            .map_err(|e| Error::Dataset(format!("manifest encoding: {e}")))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        if r.headers()?.iter().ne(MANIFEST_HEADER) {
            return Err(Error::Dataset("manifest header mismatch".into()));
        }
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").to_string();
            entries.push(if field(0).is_empty() {
                ManifestEntry::Skipped {
                    source: field(1),
                    class: field(2),
                    reason: field(3).trim_start_matches("skipped: ").to_string(),
                }
            } else {
                ManifestEntry::Written {
                    output: field(0),
                    source: field(1),
                    class: field(2),
                    sample_seed: field(3)
                        .parse()
                        .map_err(|_| Error::Dataset(format!("bad sample_seed {:?}", field(3))))?,
                }
            });
        }
        Ok(Manifest { entries })
    }
}

/// Per-output seed: a hash of the source path relative to its class root and
/// the copy index, so it does not depend on the order images are visited.
pub fn sample_seed(class: &str, file: &str, copy: usize) -> u64 {
    fnv1a(format!("{class}/{file}#{copy}").as_bytes())
}

fn rel(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Writes each source image resized to `spec.output_size` plus
/// `spec.copies_per_image` augmented variants into the same class directory
/// under `dst_root`, and `dst_root/manifest.csv`.
///
/// Unreadable images are skipped and recorded in the manifest; a class
/// directory without any files is an error.
pub fn expand_dataset(src_root: &Path, dst_root: &Path, spec: &AugmentSpec) -> Result<Manifest> {
    spec.validate()?;
    let classes = list_class_dirs(src_root)?;
    let mut manifest = Manifest::default();
    for (class, dir) in &classes {
        let files = list_images(dir, true)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {class:?} is empty")));
        }
        let out_dir = dst_root.join(class);
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        for file in files {
            let name = file.file_name().unwrap().to_string_lossy().into_owned();
            let source = rel(&file, src_root);
            let img = match load_image(&file) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    manifest.entries.push(ManifestEntry::Skipped {
                        source,
                        class: class.clone(),
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
            for copy in 0..=spec.copies_per_image {
                let seed = sample_seed(class, &name, copy);
                let (out_name, out) = if copy == 0 {
                    (format!("{stem}_orig.ppm"), resize_original(&img, spec))
                } else {
                    (format!("{stem}_aug{copy}.ppm"), augment_one(&img, spec, seed)?)
                };
                let path: PathBuf = out_dir.join(&out_name);
                write_image(&path, &out)?;
                manifest.entries.push(ManifestEntry::Written {
                    output: rel(&path, dst_root),
                    source: source.clone(),
                    class: class.clone(),
                    sample_seed: seed,
                });
            }
        }
    }
    let path = dst_root.join("manifest.csv");
    fs::write(&path, manifest.to_csv()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_about_edge_samples() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[1.0, 0.0, 0.0], [0.2, 0.7, 0.4], [0.5, 0.5, 0.5], [0.1, 0.2, 0.9]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for (a, b) in rgb.iter().zip(back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn draw_is_stable_for_identity_ranges() {
        let d = Draw::sample(&AugmentSpec::identity((4, 4)), 99);
        assert_eq!(d.angle, 0.0);
        assert!(!d.hflip && !d.vflip);
        assert_eq!((d.crop_scale, d.brightness, d.hue), (1.0, 1.0, 0.0));
    }
}
