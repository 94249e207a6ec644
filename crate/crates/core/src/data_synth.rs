//! Procedural shape images with known content and per-domain styles.
//!
//! Content (shape kind, position, size, rotation) is drawn from one
//! distribution shared by every domain; style (palette, texture, outline)
//! is drawn from a distribution owned by the domain.

use std::f32::consts::PI;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Blank border every shape must leave, in pixels.
pub const MARGIN: f32 = 2.0;
pub const RADIUS_RANGE: (f32, f32) = (5.0, 9.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

/// Content factors of one image. `radius` is the circumradius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    /// (row, col) in pixels.
    pub center: (f32, f32),
    pub radius: f32,
    pub rotation: f32,
}

impl SceneSpec {
    pub fn check(&self, size: usize) -> Result<()> {
        let (r, c) = self.center;
        let lo = MARGIN + self.radius;
        let hi = size as f32 - MARGIN - self.radius;
        if !(self.radius >= 0.0) || r < lo || r > hi || c < lo || c > hi {
            return Err(Error::Invalid(format!(
                "shape at {:?} with radius {} leaves the {size}px canvas margin",
                self.center, self.radius
            )));
        }
        Ok(())
    }

    /// Signed distance to the shape boundary, positive inside.
    fn signed_distance(&self, row: f32, col: f32) -> f32 {
        let (dy, dx) = (row - self.center.0, col - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let r = self.radius;
        match self.shape {
            ShapeKind::Circle => r - (u * u + v * v).sqrt(),
            ShapeKind::Square => r / 2f32.sqrt() - u.abs().max(v.abs()),
            ShapeKind::Triangle => [-0.5 * PI, PI / 6.0, 5.0 * PI / 6.0]
                .iter()
                .map(|a| u * a.cos() + v * a.sin() + r / 2.0)
                .fold(f32::INFINITY, f32::min),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Texture {
    Flat,
    Stripes { period: f32, angle: f32, depth: f32 },
    NoiseGrain { amplitude: f32, seed: u64 },
}

/// Style factors of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub domain_id: String,
    pub foreground: [f32; 3],
    pub background: [f32; 3],
    pub outline: [f32; 3],
    pub texture: Texture,
    /// Outline width in pixels; 0 disables the outline.
    pub stroke: f32,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.rem_euclid(360.0)) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Built-in domain style distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleFamily {
    /// Grayscale filled shapes with a dark outline on a light ground.
    Ink,
    /// Saturated red–orange shapes on a dark blue ground.
    Paint,
    /// Saturated green shapes on a dark violet ground.
    Neon,
}

impl StyleFamily {
    pub const ALL: [StyleFamily; 3] = [StyleFamily::Ink, StyleFamily::Paint, StyleFamily::Neon];

    pub fn id(self) -> &'static str {
        match self {
            StyleFamily::Ink => "ink",
            StyleFamily::Paint => "paint",
            StyleFamily::Neon => "neon",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|f| f.id() == id).ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    /// Foreground and background hue intervals in degrees; `None` for
    /// achromatic palettes.
    pub fn hue_ranges(self) -> Option<[(f32, f32); 2]> {
        match self {
            StyleFamily::Ink => None,
            StyleFamily::Paint => Some([(0.0, 40.0), (190.0, 230.0)]),
            StyleFamily::Neon => Some([(90.0, 140.0), (270.0, 310.0)]),
        }
    }

    pub fn sample_style(self, rng: &mut Rng) -> StyleSpec {
        let u = |rng: &mut Rng, lo: f32, hi: f32| rng.random_range(lo..hi);
        let id = self.id().to_string();
        match self {
            StyleFamily::Ink => {
                let gray = |v: f32| [v, v, v];
                let background = gray(u(rng, 0.82, 0.97));
                let foreground = gray(u(rng, 0.25, 0.5));
                let outline = gray(u(rng, 0.0, 0.12));
                let stroke = if rng.random_bool(0.5) { 1.0 } else { 2.0 };
                let texture = if rng.random_bool(0.5) {
                    Texture::Flat
                } else {
                    Texture::NoiseGrain { amplitude: 0.04, seed: rng.random() }
                };
                StyleSpec { domain_id: id, foreground, background, outline, texture, stroke }
            }
            StyleFamily::Paint | StyleFamily::Neon => {
                let [fg_h, bg_h] = self.hue_ranges().expect("chromatic");
                let foreground = hsv(u(rng, fg_h.0, fg_h.1), u(rng, 0.75, 1.0), u(rng, 0.55, 0.8));
                let background = hsv(u(rng, bg_h.0, bg_h.1), u(rng, 0.15, 0.3), u(rng, 0.85, 0.97));
                let texture = match (self, rng.random_bool(0.5)) {
                    (_, false) => Texture::Flat,
                    (StyleFamily::Paint, true) => {
                        Texture::Stripes { period: u(rng, 4.0, 6.0), angle: u(rng, 0.0, PI), depth: 0.25 }
                    }
                    (_, true) => Texture::NoiseGrain { amplitude: 0.05, seed: rng.random() },
                };
                StyleSpec { domain_id: id, foreground, background, outline: foreground, texture, stroke: 0.0 }
            }
        }
    }
}

/// Draws content factors from the distribution shared by all domains.
pub fn sample_scene(rng: &mut Rng, size: usize) -> SceneSpec {
    let shape = ShapeKind::ALL[rng.random_range(0..3)];
    let radius = rng.random_range(RADIUS_RANGE.0..RADIUS_RANGE.1);
    let lo = MARGIN + radius;
    let hi = size as f32 - MARGIN - radius;
    let center = (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let rotation = rng.random_range(0.0..2.0 * PI);
    SceneSpec { shape, center, radius, rotation }
}

/// One rendered image (HWC, [0, 1]) and its shape mask (HW, 0/1).
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub pixels: Vec<f32>,
    pub mask: Vec<u8>,
}

pub fn render(scene: &SceneSpec, style: &StyleSpec, size: usize) -> Result<Rendered> {
    scene.check(size)?;
    let mut pixels = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    let mut grain = match style.texture {
        Texture::NoiseGrain { seed, .. } => Some(rng::stream(seed, "grain", 0)),
        _ => None,
    };
    for row in 0..size {
        for col in 0..size {
            let (pr, pc) = (row as f32 + 0.5, col as f32 + 0.5);
            let sd = scene.signed_distance(pr, pc);
            let inside = sd > 0.0;
            mask.push(inside as u8);
            let mut color = if !inside {
                style.background
            } else if sd <= style.stroke {
                style.outline
            } else {
                let mut fg = style.foreground;
                if let Texture::Stripes { period, angle, depth } = style.texture {
                    let t = (pc * angle.cos() + pr * angle.sin()) / period;
                    if (t.floor() as i64).rem_euclid(2) == 1 {
                        fg = fg.map(|c| c * (1.0 - depth));
                    }
                }
                fg
            };
            if let (Some(g), Texture::NoiseGrain { amplitude, .. }) = (grain.as_mut(), style.texture) {
                let n = g.random_range(-amplitude..amplitude);
                color = color.map(|c| c + n);
            }
            pixels.extend(color.iter().map(|c| c.clamp(0.0, 1.0)));
        }
    }
    Ok(Rendered { pixels, mask })
}

/// Images with domain labels and optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    /// `[B, H, W, C]` in [0, 1].
    pub images: Tensor<f32>,
    pub domains: Vec<String>,
    /// `[B, H, W]` content masks.
    pub masks: Option<Vec<Vec<u8>>>,
    pub scenes: Option<Vec<SceneSpec>>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.images.rows(i, 1).expect("index in range")
    }

    /// Sub-batch of the given rows, ground truth included.
    pub fn select(&self, idx: &[usize]) -> Result<ImageBatch> {
        let rows: Vec<_> = idx.iter().map(|&i| self.images.rows(i, 1)).collect::<std::result::Result<_, _>>()?;
        Ok(ImageBatch {
            images: Tensor::stack_rows(&rows)?,
            domains: idx.iter().map(|&i| self.domains[i].clone()).collect(),
            masks: self.masks.as_ref().map(|m| idx.iter().map(|&i| m[i].clone()).collect()),
            scenes: self.scenes.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
        })
    }
}

/// Renders `n` images of one domain. Sample `i` draws its content from
/// stream `(seed, "scene/{domain}", i)` and its style from
/// `(seed, "style/{domain}", i)`, so any prefix of a dataset is stable.
pub fn generate_dataset(family: StyleFamily, n: usize, seed: u64, size: usize) -> Result<ImageBatch> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    let id = family.id();
    let mut data = Vec::with_capacity(n * size * size * 3);
    let mut masks = Vec::with_capacity(n);
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let scene = sample_scene(&mut rng::stream(seed, &format!("scene/{id}"), i), size);
        let style = family.sample_style(&mut rng::stream(seed, &format!("style/{id}"), i));
        let r = render(&scene, &style, size)?;
        data.extend_from_slice(&r.pixels);
        masks.push(r.mask);
        scenes.push(scene);
    }
    Ok(ImageBatch {
        images: Tensor::new(vec![n, size, size, 3], data)?,
        domains: vec![id.to_string(); n],
        masks: Some(masks),
        scenes: Some(scenes),
    })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `[H, W, 3]` (or `[1, H, W, 3]`) image as 8-bit RGB PNG.
pub fn save_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image_hw(image)?;
    let bytes: Vec<u8> = image.data().iter().map(|v| quantize(*v)).collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_png(BufWriter::new(file), w, h, png::ColorType::Rgb, &bytes)
}

/// PNG bytes of an image, as served over HTTP.
pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = image_hw(image)?;
    let bytes: Vec<u8> = image.data().iter().map(|v| quantize(*v)).collect();
    let mut out = Vec::new();
    write_png(&mut out, w, h, png::ColorType::Rgb, &bytes)?;
    Ok(out)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &[u8], size: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = mask.iter().map(|m| if *m > 0 { 255 } else { 0 }).collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_png(BufWriter::new(file), size, size, png::ColorType::Grayscale, &bytes)
}

fn image_hw(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w, 3] | [1, h, w, 3] => Ok((*h, *w)),
        s => Err(Error::Image(format!("expected an RGB image [H, W, 3], got {s:?}"))),
    }
}

fn write_png<W: std::io::Write>(out: W, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(out, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| Error::Image(e.to_string()))?;
    writer.finish().map_err(|e| Error::Image(e.to_string()))
}

/// Reads an 8-bit RGB PNG into `[H, W, 3]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Decodes PNG bytes; only 8-bit RGB without alpha is accepted.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (info, buf) = decode_raw(bytes)?;
    if info.0 != png::ColorType::Rgb || info.1 != png::BitDepth::Eight {
        return Err(Error::Image(format!("expected 8-bit RGB, found {:?} at {:?}", info.0, info.1)));
    }
    let (w, h) = info.2;
    Ok(Tensor::new(vec![h as usize, w as usize, 3], buf.iter().map(|b| *b as f32 / 255.0).collect())?)
}

/// `(width, height)` from the PNG header without decoding pixel data.
pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32)> {
    let reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().map_err(|e| Error::Image(format!("malformed PNG: {e}")))?;
    Ok(reader.info().size())
}

type RawInfo = (png::ColorType, png::BitDepth, (u32, u32));

fn decode_raw(bytes: &[u8]) -> Result<(RawInfo, Vec<u8>)> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Image(format!("malformed PNG: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Image("PNG too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Image(format!("malformed PNG: {e}")))?;
    buf.truncate(frame.buffer_size());
    Ok(((frame.color_type, frame.bit_depth, (frame.width, frame.height)), buf))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (info, buf) = decode_raw(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    if info.0 != png::ColorType::Grayscale || info.1 != png::BitDepth::Eight {
        return Err(Error::Image(format!("{}: expected 8-bit grayscale mask", path.display())));
    }
    Ok(buf.iter().map(|b| (*b >= 128) as u8).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

/// Index written next to a generated dataset tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub domains: Vec<(String, SplitCounts)>,
    pub radius_range: (f32, f32),
    pub margin: f32,
    pub shapes: Vec<ShapeKind>,
}

pub fn split_dir(root: &Path, domain: &str, split: &str) -> PathBuf {
    root.join(domain).join(split)
}

/// Seed of a split: train and test never share streams.
pub fn split_seed(seed: u64, split: &str) -> u64 {
    match split {
        "train" => seed,
        _ => seed ^ 0x7e57_7e57_7e57_7e57,
    }
}

/// Writes `{root}/{domain}/{split}/{index:05}.png`, masks under
/// `{root}/{domain}/{split}/masks/`, and `{root}/manifest.json`.
pub fn write_dataset(root: &Path, families: &[StyleFamily], counts: &SplitCounts, seed: u64, size: usize) -> Result<Manifest> {
    let mut domains = Vec::new();
    for &f in families {
        for (split, n) in [("train", counts.train), ("test", counts.test)] {
            let dir = split_dir(root, f.id(), split);
            let mask_dir = dir.join("masks");
            fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
            let batch = generate_dataset(f, n, split_seed(seed, split), size)?;
            let masks = batch.masks.as_ref().expect("generated with masks");
            for i in 0..n {
                save_image(dir.join(format!("{i:05}.png")), &batch.image(i))?;
                save_mask(mask_dir.join(format!("{i:05}.png")), &masks[i], size)?;
            }
        }
        domains.push((f.id().to_string(), counts.clone()));
    }
    let manifest = Manifest {
        seed,
        image_size: size,
        domains,
        radius_range: RADIUS_RANGE,
        margin: MARGIN,
        shapes: ShapeKind::ALL.to_vec(),
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Loads one split written by [`write_dataset`], masks included when present.
pub fn load_split(root: &Path, domain: &str, split: &str, limit: Option<usize>) -> Result<ImageBatch> {
    let manifest = read_manifest(root)?;
    let counts = manifest
        .domains
        .iter()
        .find(|(d, _)| d == domain)
        .map(|(_, c)| c)
        .ok_or_else(|| Error::UnknownDomain(domain.to_string()))?;
    let n = match split {
        "train" => counts.train,
        "test" => counts.test,
        other => return Err(Error::Invalid(format!("unknown split `{other}`"))),
    };
    let n = limit.map_or(n, |l| l.min(n));
    if n == 0 {
        return Err(Error::Invalid(format!("split {domain}/{split} is empty")));
    }
    let dir = split_dir(root, domain, split);
    let size = manifest.image_size;
    let mut data = Vec::with_capacity(n * size * size * 3);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let img = load_image(dir.join(format!("{i:05}.png")))?;
        if img.shape() != [size, size, 3] {
            return Err(Error::Image(format!("{}/{i:05}.png has shape {:?}", dir.display(), img.shape())));
        }
        data.extend_from_slice(img.data());
        let mp = dir.join("masks").join(format!("{i:05}.png"));
        if mp.exists() {
            masks.push(load_mask(&mp)?);
        }
    }
    Ok(ImageBatch {
        images: Tensor::new(vec![n, size, size, 3], data)?,
        domains: vec![domain.to_string(); n],
        masks: (masks.len() == n).then_some(masks),
        scenes: None,
    })
}
