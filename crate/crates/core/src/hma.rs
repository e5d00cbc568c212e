//! Multi-view augmentation of support images.
//!
//! A [`ViewPlan`] lists independent transforms (center crops, rotations,
//! color jitter draws and a horizontal reflection). Every transform is applied
//! to the original raster, never chained.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};
use crate::model::{EmbeddingVector, LabeledEmbedding, Modality};
use crate::provider::HttpProvider;
use crate::rng::RngStream;

/// 8-bit RGB image, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Raster({}x{})", self.width, self.height)
    }
}

/// Largest accepted decoded image side.
pub const MAX_SIDE: u32 = 16_384;

impl Raster {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(MpaError::Format(format!("raster dims {width}x{height} must be positive")));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(MpaError::Format(format!(
                "raster buffer has {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self::new(width, height, pixels).expect("filled raster is well formed")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    /// Decodes a PNG stream of any color type into RGB (alpha is dropped).
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new_with_limits(
            bytes,
            png::Limits {
                bytes: 256 * 1024 * 1024,
            },
        );
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder
            .read_info()
            .map_err(|e| MpaError::Format(format!("png: {e}")))?;
        let (w, h) = {
            let info = reader.info();
            (info.width, info.height)
        };
        if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
            return Err(MpaError::Format(format!("png dims {w}x{h} out of range")));
        }
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let frame = reader
            .next_frame(&mut buf)
            .map_err(|e| MpaError::Format(format!("png: {e}")))?;
        let data = &buf[..frame.buffer_size()];
        let n = w as usize * h as usize;
        let channels = match frame.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(MpaError::Format("png: palette was not expanded".into()))
            }
        };
        if frame.bit_depth != png::BitDepth::Eight || data.len() < n * channels {
            return Err(MpaError::Format("png: unexpected decoded layout".into()));
        }
        let mut pixels = Vec::with_capacity(n * 3);
        for px in data.chunks_exact(channels).take(n) {
            match channels {
                1 | 2 => pixels.extend_from_slice(&[px[0], px[0], px[0]]),
                _ => pixels.extend_from_slice(&px[..3]),
            }
        }
        Self::new(w, h, pixels)
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().expect("in-memory png header");
            writer.write_image_data(&self.pixels).expect("in-memory png body");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            brightness: 0.5,
            contrast: 0.5,
            saturation: 0.5,
            hue: 0.2,
        }
    }
}

impl JitterParams {
    pub const NONE: JitterParams = JitterParams {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.brightness) || !unit.contains(&self.contrast) || !unit.contains(&self.saturation) {
            return Err(MpaError::InvalidConfig(
                "brightness/contrast/saturation jitter must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(MpaError::InvalidConfig("hue jitter must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPlan {
    pub crop_sizes: Vec<u32>,
    pub rotation_degrees: Vec<f64>,
    pub jitter: JitterParams,
    pub jitter_samples: usize,
    pub include_reflection: bool,
}

impl Default for ViewPlan {
    fn default() -> Self {
        Self {
            crop_sizes: vec![120, 170, 200],
            rotation_degrees: vec![45.0, 90.0, 180.0, 270.0, 315.0],
            jitter: JitterParams::default(),
            jitter_samples: 1,
            include_reflection: true,
        }
    }
}

impl ViewPlan {
    pub fn empty() -> Self {
        Self {
            crop_sizes: Vec::new(),
            rotation_degrees: Vec::new(),
            jitter: JitterParams::default(),
            jitter_samples: 0,
            include_reflection: false,
        }
    }

    pub fn view_count(&self) -> usize {
        self.crop_sizes.len()
            + self.rotation_degrees.len()
            + self.jitter_samples
            + usize::from(self.include_reflection)
    }

    pub fn validate_for(&self, width: u32, height: u32) -> Result<()> {
        for &size in &self.crop_sizes {
            if size == 0 || size > width.min(height) {
                return Err(MpaError::CropTooLarge { size, width, height });
            }
        }
        for &deg in &self.rotation_degrees {
            check_degrees(deg)?;
        }
        self.jitter.validate()?;
        if self.view_count() > usize::from(u16::MAX) {
            return Err(MpaError::InvalidConfig("too many views for a u16 view id".into()));
        }
        Ok(())
    }
}

fn check_degrees(deg: f64) -> Result<()> {
    if !(deg > 0.0 && deg < 360.0) {
        return Err(MpaError::InvalidConfig(format!("rotation {deg} outside (0, 360)")));
    }
    Ok(())
}

pub fn center_crop(img: &Raster, size: u32) -> Result<Raster> {
    if size == 0 || size > img.width.min(img.height) {
        return Err(MpaError::CropTooLarge {
            size,
            width: img.width,
            height: img.height,
        });
    }
    let (x0, y0) = crop_offset(img.width, img.height, size);
    let row = size as usize * 3;
    let mut pixels = Vec::with_capacity(row * size as usize);
    for y in y0..y0 + size {
        let start = img.offset(x0, y);
        pixels.extend_from_slice(&img.pixels[start..start + row]);
    }
    Raster::new(size, size, pixels)
}

/// Top-left source corner of a centered `size`x`size` crop.
pub fn crop_offset(width: u32, height: u32, size: u32) -> (u32, u32) {
    ((width - size) / 2, (height - size) / 2)
}

/// Counter-clockwise rotation about the image center.
///
/// Multiples of 90 degrees are exact pixel permutations (90 and 270 swap the
/// output dims); other angles keep the input dims, sample bilinearly and fill
/// out-of-frame pixels with black.
pub fn rotate(img: &Raster, degrees: f64) -> Result<Raster> {
    check_degrees(degrees)?;
    let (w, h) = (img.width, img.height);
    if degrees == 90.0 {
        let mut out = Raster::filled(h, w, [0; 3]);
        for y in 0..w {
            for x in 0..h {
                out.set_pixel(x, y, img.pixel(w - 1 - y, x));
            }
        }
        return Ok(out);
    }
    if degrees == 180.0 {
        let mut out = Raster::filled(w, h, [0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(x, y, img.pixel(w - 1 - x, h - 1 - y));
            }
        }
        return Ok(out);
    }
    if degrees == 270.0 {
        let mut out = Raster::filled(h, w, [0; 3]);
        for y in 0..w {
            for x in 0..h {
                out.set_pixel(x, y, img.pixel(y, h - 1 - x));
            }
        }
        return Ok(out);
    }

    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cx, cy) = (f64::from(w) / 2.0, f64::from(h) / 2.0);
    let (max_x, max_y) = (f64::from(w - 1), f64::from(h - 1));
    const EDGE: f64 = 1e-9;
    let mut out = Raster::filled(w, h, [0; 3]);
    for y in 0..h {
        for x in 0..w {
            // Destination offset from the center, y pointing down.
            let dx = f64::from(x) + 0.5 - cx;
            let dy = f64::from(y) + 0.5 - cy;
            // Inverse of the on-screen counter-clockwise rotation.
            let sx = cos * dx - sin * dy + cx - 0.5;
            let sy = sin * dx + cos * dy + cy - 0.5;
            if sx < -EDGE || sy < -EDGE || sx > max_x + EDGE || sy > max_y + EDGE {
                continue;
            }
            let sx = sx.clamp(0.0, max_x);
            let sy = sy.clamp(0.0, max_y);
            let (x0, y0) = (sx.floor() as u32, sy.floor() as u32);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - f64::from(x0), sy - f64::from(y0));
            let (p00, p10, p01, p11) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
                let bottom = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
                rgb[c] = to_u8(top * (1.0 - fy) + bottom * fy);
            }
            out.set_pixel(x, y, rgb);
        }
    }
    Ok(out)
}

pub fn horizontal_flip(img: &Raster) -> Raster {
    let mut out = img.clone();
    let row = img.width as usize * 3;
    for (dst, src) in out.pixels.chunks_exact_mut(row).zip(img.pixels.chunks_exact(row)) {
        for (d, s) in dst.chunks_exact_mut(3).zip(src.chunks_exact(3).rev()) {
            d.copy_from_slice(s);
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Factors drawn for one jitter application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Fraction of a full hue turn.
    pub hue_shift: f64,
}

impl JitterFactors {
    /// Always consumes four uniform draws, in brightness, contrast,
    /// saturation, hue order.
    pub fn sample(params: &JitterParams, rng: &mut RngStream) -> Self {
        let mut draw = |lo: f64, hi: f64| lo + (hi - lo) * rng.gen::<f64>();
        Self {
            brightness: draw((1.0 - params.brightness).max(0.0), 1.0 + params.brightness),
            contrast: draw((1.0 - params.contrast).max(0.0), 1.0 + params.contrast),
            saturation: draw((1.0 - params.saturation).max(0.0), 1.0 + params.saturation),
            hue_shift: draw(-params.hue, params.hue),
        }
    }
}

pub fn color_jitter(img: &Raster, params: &JitterParams, rng: &mut RngStream) -> Raster {
    let factors = JitterFactors::sample(params, rng);
    apply_jitter(img, &factors)
}

/// Brightness (scale), contrast (blend with mean luma), saturation (blend
/// with per-pixel luma), hue (HSV rotation), clamping after each stage.
pub fn apply_jitter(img: &Raster, f: &JitterFactors) -> Raster {
    let mut px: Vec<[f64; 3]> = img
        .pixels
        .chunks_exact(3)
        .map(|p| [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])])
        .collect();

    for p in px.iter_mut() {
        for c in p.iter_mut() {
            *c = (*c * f.brightness).clamp(0.0, 255.0);
        }
    }

    let mean = px.iter().map(|&p| luma(p)).sum::<f64>() / px.len() as f64;
    for p in px.iter_mut() {
        for c in p.iter_mut() {
            *c = (f.contrast * *c + (1.0 - f.contrast) * mean).clamp(0.0, 255.0);
        }
    }

    for p in px.iter_mut() {
        let gray = luma(*p);
        for c in p.iter_mut() {
            *c = (f.saturation * *c + (1.0 - f.saturation) * gray).clamp(0.0, 255.0);
        }
    }

    if f.hue_shift != 0.0 {
        for p in px.iter_mut() {
            let (h, s, v) = rgb_to_hsv(*p);
            *p = hsv_to_rgb((h + f.hue_shift).rem_euclid(1.0), s, v);
        }
    }

    let pixels = px.iter().flat_map(|p| p.map(to_u8)).collect();
    Raster::new(img.width, img.height, pixels).expect("same dims as input")
}

/// RGB in [0, 255] to (hue in [0, 1), saturation, value in [0, 255]).
fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta == 0.0 {
        return (0.0, 0.0, max);
    }
    let s = delta / max;
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ViewKind {
    Crop(u32),
    Rotation(f64),
    Jitter(usize),
    Reflection,
}

impl ViewKind {
    pub fn modality(self) -> Modality {
        match self {
            ViewKind::Reflection => Modality::VisualGeometric,
            _ => Modality::VisualNatural,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub view_id: u16,
    pub kind: ViewKind,
    pub raster: Raster,
}

/// Crops, rotations, jitter draws and the reflection, in that order, with
/// view ids counting up from 1.
pub fn generate_views(img: &Raster, plan: &ViewPlan, rng: &mut RngStream) -> Result<Vec<View>> {
    plan.validate_for(img.width, img.height)?;
    let mut views = Vec::with_capacity(plan.view_count());
    let mut push = |kind: ViewKind, raster: Raster| {
        let view_id = views.len() as u16 + 1;
        views.push(View { view_id, kind, raster });
    };
    for &size in &plan.crop_sizes {
        push(ViewKind::Crop(size), center_crop(img, size)?);
    }
    for &deg in &plan.rotation_degrees {
        push(ViewKind::Rotation(deg), rotate(img, deg)?);
    }
    for i in 0..plan.jitter_samples {
        push(ViewKind::Jitter(i), color_jitter(img, &plan.jitter, rng));
    }
    if plan.include_reflection {
        push(ViewKind::Reflection, horizontal_flip(img));
    }
    Ok(views)
}

/// Image encoder abstraction: the HTTP provider or the offline toy encoder.
pub trait ImageEncoder: Sync {
    fn encoder_id(&self) -> String;

    /// One vector per raster, in input order.
    fn encode(&self, images: &[&Raster]) -> Result<Vec<EmbeddingVector>>;
}

pub const TOY_GRID: usize = 8;
pub const TOY_FEATURES: usize = TOY_GRID * TOY_GRID * 3;

/// Deterministic offline encoder: area-averaged 8x8 RGB thumbnail scaled to
/// [0, 1], zero-padded to `dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyEncoder {
    dim: usize,
}

impl Default for ToyEncoder {
    fn default() -> Self {
        Self { dim: TOY_FEATURES }
    }
}

impl ToyEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < TOY_FEATURES {
            return Err(MpaError::InvalidConfig(format!(
                "toy encoder dim must be at least {TOY_FEATURES}, got {dim}"
            )));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl ImageEncoder for ToyEncoder {
    fn encoder_id(&self) -> String {
        format!("toy-area8x8-d{}", self.dim)
    }

    fn encode(&self, images: &[&Raster]) -> Result<Vec<EmbeddingVector>> {
        Ok(images.iter().map(|img| toy_encode(img, self.dim)).collect())
    }
}

/// Fraction of each source pixel covered by each of `cells` equal bins.
fn area_weights(len: u32, cells: usize) -> Vec<Vec<(u32, f64)>> {
    let scale = f64::from(len) / cells as f64;
    (0..cells)
        .map(|cell| {
            let lo = cell as f64 * scale;
            let hi = (cell + 1) as f64 * scale;
            let first = lo.floor() as u32;
            let last = (hi.ceil() as u32).min(len);
            (first..last)
                .filter_map(|p| {
                    let overlap = (hi.min(f64::from(p + 1)) - lo.max(f64::from(p))).max(0.0);
                    (overlap > 0.0).then_some((p, overlap))
                })
                .collect()
        })
        .collect()
}

pub fn toy_encode(img: &Raster, dim: usize) -> EmbeddingVector {
    let wx = area_weights(img.width, TOY_GRID);
    let wy = area_weights(img.height, TOY_GRID);
    let mut out = vec![0.0; dim.max(TOY_FEATURES)];
    for (gy, ys) in wy.iter().enumerate() {
        for (gx, xs) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            let mut total = 0.0;
            for &(py, wyv) in ys {
                for &(px, wxv) in xs {
                    let weight = wxv * wyv;
                    let p = img.pixel(px, py);
                    for c in 0..3 {
                        acc[c] += weight * f64::from(p[c]);
                    }
                    total += weight;
                }
            }
            let base = (gy * TOY_GRID + gx) * 3;
            for c in 0..3 {
                out[base + c] = acc[c] / total / 255.0;
            }
        }
    }
    out.truncate(dim.max(TOY_FEATURES));
    EmbeddingVector::new(out).expect("toy features are finite")
}

impl ImageEncoder for HttpProvider {
    fn encoder_id(&self) -> String {
        self.health()
            .map(|h| h.encoder_id)
            .unwrap_or_else(|_| format!("http:{}", self.config().base_url))
    }

    fn encode(&self, images: &[&Raster]) -> Result<Vec<EmbeddingVector>> {
        let pngs: Vec<Vec<u8>> = images.iter().map(|r| r.to_png()).collect();
        self.embed_images(&pngs)
    }
}

pub fn embed_views(
    class_id: u32,
    item_id: u32,
    views: &[View],
    encoder: &dyn ImageEncoder,
) -> Result<Vec<LabeledEmbedding>> {
    if views.is_empty() {
        return Err(MpaError::EmptyInput("view list"));
    }
    let rasters: Vec<&Raster> = views.iter().map(|v| &v.raster).collect();
    let vectors = encoder.encode(&rasters)?;
    if vectors.len() != views.len() {
        return Err(MpaError::ProviderContractViolation(format!(
            "encoder returned {} vectors for {} views",
            vectors.len(),
            views.len()
        )));
    }
    Ok(views
        .iter()
        .zip(vectors)
        .map(|(view, vector)| LabeledEmbedding {
            class_id,
            item_id,
            view_id: view.view_id,
            modality: view.kind.modality(),
            vector,
        })
        .collect())
}
