//! Synthetic shape dataset, PPM/PGM codecs, and the dataset manifest.
//!
//! Each image holds one filled shape over either a smooth two-color gradient
//! or a fine checkerboard, plus mild pixel noise. Masks are the exact shape
//! region sampled at pixel centers.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
    Ellipse,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Bar,
        ShapeKind::Ellipse,
        ShapeKind::Diamond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Bar => "bar",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Diamond => "diamond",
        }
    }
}

pub fn class_names() -> Vec<String> {
    ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect()
}

/// A shape placed in pixel coordinates; `size` is its outer radius.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub angle: f64,
}

impl ShapeSpec {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        // rotate into the shape frame
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = self.size;
        match self.kind {
            ShapeKind::Disk => u * u + v * v <= r * r,
            ShapeKind::Ring => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= (0.55 * r).powi(2)
            }
            ShapeKind::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
            ShapeKind::Diamond => u.abs() / r + v.abs() / (0.7 * r) <= 1.0,
            ShapeKind::Ellipse => (u / r).powi(2) + (v / (0.55 * r)).powi(2) <= 1.0,
            ShapeKind::Bar => u.abs() <= r && v.abs() <= 0.3 * r,
            ShapeKind::Cross => {
                let arm = 0.28 * r;
                (u.abs() <= r && v.abs() <= arm) || (v.abs() <= r && u.abs() <= arm)
            }
            ShapeKind::Triangle => {
                // equilateral, circumradius r, apex along -v
                let inner = 0.5 * r;
                (0..3).all(|k| {
                    let a = -PI / 2.0 + PI + 2.0 * PI * k as f64 / 3.0;
                    u * a.cos() + v * a.sin() <= inner
                })
            }
        }
    }

    /// Binary mask sampled at pixel centers.
    pub fn mask(&self, size: usize) -> Vec<u8> {
        let mut m = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m[y * size + x] = 255;
                }
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Background {
    Gradient { from: [f64; 3], to: [f64; 3], angle: f64 },
    Checker { a: [f64; 3], b: [f64; 3], period: usize },
}

impl Background {
    fn color(&self, x: usize, y: usize, size: usize) -> [f64; 3] {
        match *self {
            Background::Gradient { from, to, angle } => {
                let (s, c) = angle.sin_cos();
                let half = size as f64 / 2.0;
                let t = ((x as f64 - half) * c + (y as f64 - half) * s) / size as f64 + 0.5;
                let t = t.clamp(0.0, 1.0);
                [0, 1, 2].map(|i| from[i] * (1.0 - t) + to[i] * t)
            }
            Background::Checker { a, b, period } => {
                if (x / period + y / period).is_multiple_of(2) {
                    a
                } else {
                    b
                }
            }
        }
    }

    fn mean(&self) -> [f64; 3] {
        match *self {
            Background::Gradient { from, to, .. } => [0, 1, 2].map(|i| 0.5 * (from[i] + to[i])),
            Background::Checker { a, b, .. } => [0, 1, 2].map(|i| 0.5 * (a[i] + b[i])),
        }
    }
}

/// Saturated foreground color whose hue is tied to the class, with jitter.
fn class_color(kind: ShapeKind, rng: &mut impl Rng) -> [f64; 3] {
    let idx = ShapeKind::ALL.iter().position(|&k| k == kind).unwrap_or(0);
    let hue = (idx as f64 / ShapeKind::ALL.len() as f64 + rng.gen_range(-0.03..0.03)).rem_euclid(1.0);
    hsv_to_rgb(hue, rng.gen_range(0.6..1.0), rng.gen_range(0.55..1.0))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Low-saturation background color.
fn muted_color(rng: &mut impl Rng) -> [f64; 3] {
    hsv_to_rgb(
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..0.25),
        rng.gen_range(0.1..0.95),
    )
}

/// A second background color within a bounded distance of `base`.
fn near_color(base: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    let shift = rng.gen_range(-0.3..0.3);
    base.map(|v| (v + shift + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0))
}

/// One rendered sample as 8-bit buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    pub rgb: Vec<u8>,
    pub mask: Vec<u8>,
    pub spec: ShapeSpec,
}

pub fn render_sample(kind: ShapeKind, size: usize, rng: &mut impl Rng) -> RenderedSample {
    let scale = size as f64 / IMAGE_SIZE as f64;
    let radius = rng.gen_range(11.0..18.0) * scale;
    let margin = radius + 2.0 * scale;
    let spec = ShapeSpec {
        kind,
        cx: rng.gen_range(margin..size as f64 - margin),
        cy: rng.gen_range(margin..size as f64 - margin),
        size: radius,
        angle: rng.gen_range(0.0..PI),
    };
    let base = muted_color(rng);
    let background = if rng.gen_bool(0.5) {
        Background::Gradient {
            from: base,
            to: near_color(base, rng),
            angle: rng.gen_range(0.0..2.0 * PI),
        }
    } else {
        Background::Checker {
            a: base,
            b: near_color(base, rng),
            period: rng.gen_range(2..=4),
        }
    };
    // The background never depends on the class; the foreground color is
    // redrawn until some channel differs from the background mean by 0.3.
    let mean = background.mean();
    let fg = loop {
        let c = class_color(kind, rng);
        if (0..3).map(|i| (c[i] - mean[i]).abs()).fold(0.0, f64::max) >= 0.3 {
            break c;
        }
    };
    let mask = spec.mask(size);
    let mut rgb = vec![0u8; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let base = if mask[y * size + x] > 0 {
                fg
            } else {
                background.color(x, y, size)
            };
            for ch in 0..3 {
                let noise: f64 = rng.gen_range(-0.04..0.04);
                rgb[(y * size + x) * 3 + ch] = ((base[ch] + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    RenderedSample { rgb, mask, spec }
}

/// An image with its ground-truth mask and class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    /// `1 x H x W`, values in `{0, 1}`.
    pub mask: Tensor,
    pub class_id: usize,
}

impl Sample {
    pub fn from_bytes(rgb: &[u8], mask: &[u8], size: usize, class_id: usize) -> Self {
        let plane = size * size;
        let image = Tensor::from_fn(&[3, size, size], |i| {
            let (ch, p) = (i / plane, i % plane);
            rgb[p * 3 + ch] as f32 / 255.0
        });
        let mask = Tensor::from_fn(&[1, size, size], |i| if mask[i] >= 128 { 1.0 } else { 0.0 });
        Self { image, mask, class_id }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn indices_of_class(&self, class_id: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class_id == class_id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let img = read_pnm(&fs::read(dir.join(&e.image))?)?;
            let mask = read_pnm(&fs::read(dir.join(&e.mask))?)?;
            if img.channels != 3
                || mask.channels != 1
                || img.width != img.height
                || (mask.width, mask.height) != (img.width, img.height)
            {
                return Err(format_err(
                    "dataset",
                    format!("unexpected image layout for {}", e.image),
                ));
            }
            samples.push(Sample::from_bytes(&img.pixels, &mask.pixels, img.width, e.class_id));
        }
        Ok(Self {
            class_names: manifest.classes,
            samples,
        })
    }
}

/// Per-class sample streams are seeded independently so classes do not
/// shift when `per_class` changes.
fn class_rng(seed: u64, class_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (0x5bd1_e995u64.wrapping_mul(class_id as u64 + 1)))
}

fn render_all(seed: u64, per_class: usize, size: usize) -> Vec<(usize, RenderedSample)> {
    let mut out = Vec::with_capacity(per_class * ShapeKind::ALL.len());
    for (cid, &kind) in ShapeKind::ALL.iter().enumerate() {
        let mut rng = class_rng(seed, cid);
        for _ in 0..per_class {
            out.push((cid, render_sample(kind, size, &mut rng)));
        }
    }
    out
}

/// Renders the dataset in memory; identical to what [`gen_dataset`] writes.
pub fn synth_dataset(seed: u64, per_class: usize) -> Dataset {
    let samples = render_all(seed, per_class, IMAGE_SIZE)
        .into_iter()
        .map(|(cid, r)| Sample::from_bytes(&r.rgb, &r.mask, IMAGE_SIZE, cid))
        .collect();
    Dataset {
        class_names: class_names(),
        samples,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub class_id: usize,
    pub class_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub per_class: usize,
    pub image_size: usize,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        m.validate(dir)?;
        Ok(m)
    }

    /// Class ids must be dense and every listed file must exist.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        for e in &self.entries {
            if e.class_id >= self.classes.len() || self.classes[e.class_id] != e.class_name {
                return Err(format_err("manifest", format!("bad class for {}", e.image)));
            }
            for f in [&e.image, &e.mask] {
                if !dir.join(f).is_file() {
                    return Err(format_err("manifest", format!("missing file {f}")));
                }
            }
        }
        for cid in 0..self.classes.len() {
            if !self.entries.iter().any(|e| e.class_id == cid) {
                return Err(format_err("manifest", format!("class id {cid} has no entries")));
            }
        }
        Ok(())
    }
}

/// Writes `images/*.ppm`, `masks/*.pgm` and `manifest.json` under `out_dir`.
pub fn gen_dataset(seed: u64, per_class: usize, out_dir: &Path) -> Result<DatasetManifest> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let names = class_names();
    let mut entries = Vec::new();
    let mut counters = vec![0usize; names.len()];
    for (cid, r) in render_all(seed, per_class, IMAGE_SIZE) {
        let stem = format!("{}_{:04}", names[cid], counters[cid]);
        counters[cid] += 1;
        let image: PathBuf = ["images", &format!("{stem}.ppm")].iter().collect();
        let mask: PathBuf = ["masks", &format!("{stem}.pgm")].iter().collect();
        fs::write(out_dir.join(&image), encode_pnm(&r.rgb, IMAGE_SIZE, IMAGE_SIZE, 3))?;
        fs::write(out_dir.join(&mask), encode_pnm(&r.mask, IMAGE_SIZE, IMAGE_SIZE, 1))?;
        entries.push(ManifestEntry {
            image: format!("images/{stem}.ppm"),
            mask: format!("masks/{stem}.pgm"),
            class_id: cid,
            class_name: names[cid].clone(),
        });
    }
    let manifest = DatasetManifest {
        seed,
        per_class,
        image_size: IMAGE_SIZE,
        classes: names,
        entries,
    };
    let mut f = fs::File::create(out_dir.join(MANIFEST_FILE))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

/// Binary PGM (`P5`, one channel) or PPM (`P6`, three channels), maxval 255.
pub fn encode_pnm(pixels: &[u8], width: usize, height: usize, channels: usize) -> Vec<u8> {
    assert!(channels == 1 || channels == 3);
    assert_eq!(pixels.len(), width * height * channels);
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn read_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("PNM", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format_err("PNM", format!("unsupported magic {other:?}"))),
    };
    let mut num = || -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|e| format_err("PNM", format!("bad header number: {e}")))
    };
    let (width, height, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(format_err("PNM", format!("only maxval 255 is supported, got {maxval}")));
    }
    let start = pos + 1;
    let n = width * height * channels;
    if bytes.len() < start + n {
        return Err(format_err("PNM", "truncated pixel data"));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        pixels: bytes[start..start + n].to_vec(),
    })
}

/// Writes a `[0, 1]` single-channel tensor as an 8-bit PGM.
pub fn mask_to_pgm(mask: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = mask.dims3()?;
    if c != 1 {
        return Err(Error::InvalidArgument(format!("mask must have one channel, got {c}")));
    }
    let px: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(encode_pnm(&px, w, h, 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_area_matches_analytic() {
        let spec = ShapeSpec {
            kind: ShapeKind::Disk,
            cx: 32.0,
            cy: 32.0,
            size: 16.0,
            angle: 0.3,
        };
        let count = spec.mask(64).iter().filter(|&&v| v > 0).count() as f64;
        let area = PI * 256.0;
        assert!((count - area).abs() / area < 0.02, "count {count} vs {area}");
    }

    #[test]
    fn every_shape_is_nonempty_and_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in ShapeKind::ALL {
            for _ in 0..20 {
                let r = render_sample(kind, IMAGE_SIZE, &mut rng);
                let fg = r.mask.iter().filter(|&&v| v > 0).count();
                assert!(fg > 60, "{kind:?} has only {fg} pixels");
                assert!(fg < IMAGE_SIZE * IMAGE_SIZE / 2);
                // nothing on the outermost border
                for i in 0..IMAGE_SIZE {
                    assert_eq!(r.mask[i], 0);
                    assert_eq!(r.mask[(IMAGE_SIZE - 1) * IMAGE_SIZE + i], 0);
                }
            }
        }
    }

    #[test]
    fn pnm_round_trip_with_comments() {
        let px: Vec<u8> = (0..12).collect();
        let enc = encode_pnm(&px, 2, 2, 3);
        assert_eq!(read_pnm(&enc).unwrap().pixels, px);
        let mut commented = b"P5\n# made by hand\n3 1\n255\n".to_vec();
        commented.extend_from_slice(&[1, 2, 3]);
        let img = read_pnm(&commented).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 1, 1));
        assert_eq!(img.pixels, [1, 2, 3]);
        assert!(read_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(read_pnm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn synth_is_deterministic_and_sized() {
        let a = synth_dataset(3, 2);
        let b = synth_dataset(3, 2);
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 16);
        assert_eq!(a.indices_of_class(5).len(), 2);
        assert_ne!(synth_dataset(4, 2).samples[0], a.samples[0]);
    }
}
