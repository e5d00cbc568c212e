//! Synthetic datasets: Gaussian class clusters in embedding space, and a
//! noisy-cluster image set with an aligned offline text encoder.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bank::Manifest;
use crate::error::{MpaError, Result};
use crate::extract::{extract_records, ExtractOptions, LabeledImage, SemanticSources};
use crate::hma::{toy_encode, Raster, ToyEncoder, ViewPlan, TOY_FEATURES};
use crate::lmse::{FetchConfig, TextEncoder, VariantCache, VariantGenerator};
use crate::model::{EmbeddingVector, LabeledEmbedding, Modality};
use crate::rng::{stream, RngStream, StreamTag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Class means pairwise at least 6σ apart.
    Separated,
    /// Class means pairwise at most 1σ apart.
    Clustered,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Separated => "separated",
            Regime::Clustered => "clustered",
        })
    }
}

impl FromStr for Regime {
    type Err = MpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separated" => Ok(Regime::Separated),
            "clustered" => Ok(Regime::Clustered),
            _ => Err(MpaError::InvalidConfig(format!("unknown regime {s:?}"))),
        }
    }
}

pub const SEPARATED_MIN_DISTANCE: f64 = 6.0;
pub const CLUSTERED_MAX_DISTANCE: f64 = 0.9;
const CENTER_NORM: f64 = 10.0;
const GROUP_SCALE: f64 = 30.0;
const CLASS_SCALE: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorSynthConfig {
    pub regime: Regime,
    pub n_classes: usize,
    pub dim: usize,
    pub items_per_class: usize,
    pub seed: u64,
}

impl Default for VectorSynthConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Separated,
            n_classes: 5,
            dim: 64,
            items_per_class: 30,
            seed: 0,
        }
    }
}

fn unit_gaussian(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit directions; orthonormal when `count <= dim`.
fn directions(count: usize, dim: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = unit_gaussian(dim, rng);
        if count <= dim {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
        }
        out.push(v);
    }
    out
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn pairwise_extremes(points: &[Vec<f64>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = distance(&points[i], &points[j]);
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    (lo, hi)
}

/// Class means: a shared center plus offsets that group classes in sibling
/// pairs, scaled to the regime's distance bound (σ = 1).
pub fn class_means(cfg: &VectorSynthConfig) -> Result<Vec<Vec<f64>>> {
    if cfg.n_classes < 2 {
        return Err(MpaError::TooFewClasses(cfg.n_classes));
    }
    if cfg.dim == 0 {
        return Err(MpaError::InvalidConfig("dim must be positive".into()));
    }
    let groups = cfg.n_classes.div_ceil(2);
    let mut rng = stream(cfg.seed, 0, StreamTag::Synthetic);
    let dirs = directions(1 + groups + cfg.n_classes, cfg.dim, &mut rng);
    let center = &dirs[0];
    let mut offsets: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|c| {
            let g = &dirs[1 + c / 2];
            let e = &dirs[1 + groups + c];
            (0..cfg.dim).map(|i| GROUP_SCALE * g[i] + CLASS_SCALE * e[i]).collect()
        })
        .collect();
    let (lo, hi) = pairwise_extremes(&offsets);
    let scale = match cfg.regime {
        Regime::Separated if lo < SEPARATED_MIN_DISTANCE => SEPARATED_MIN_DISTANCE / lo,
        Regime::Separated => 1.0,
        Regime::Clustered => CLUSTERED_MAX_DISTANCE / hi,
    };
    for o in &mut offsets {
        for (x, c) in o.iter_mut().zip(center) {
            *x = *x * scale + CENTER_NORM * c;
        }
    }
    Ok(offsets)
}

fn numbered_manifest(dataset: &str, encoder: &str, n: usize) -> Manifest {
    Manifest {
        dataset_name: dataset.into(),
        encoder_id: encoder.into(),
        class_names: (0..n as u32).map(|c| (c, format!("class_{c:03}"))).collect(),
        metadata: BTreeMap::new(),
    }
}

/// Raw-only bank of `items_per_class` unit-variance draws around each mean.
pub fn synth_bank(cfg: &VectorSynthConfig) -> Result<(Vec<LabeledEmbedding>, Manifest)> {
    if cfg.items_per_class == 0 {
        return Err(MpaError::InvalidConfig("items_per_class must be positive".into()));
    }
    let means = class_means(cfg)?;
    let mut records = Vec::with_capacity(cfg.n_classes * cfg.items_per_class);
    for (c, mean) in means.iter().enumerate() {
        let mut rng = stream(cfg.seed, 1 + c as u64, StreamTag::Synthetic);
        for item in 0..cfg.items_per_class {
            let v: Vec<f64> = mean
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .map(|x| f64::from(x as f32))
                .collect();
            records.push(LabeledEmbedding {
                class_id: c as u32,
                item_id: item as u32,
                view_id: 0,
                modality: Modality::VisualRaw,
                vector: EmbeddingVector::new(v)?,
            });
        }
    }
    let mut manifest = numbered_manifest(&format!("synth-{}", cfg.regime), "synthetic-gaussian", cfg.n_classes);
    manifest.metadata.insert("seed".into(), cfg.seed.to_string());
    Ok((records, manifest))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyClusterConfig {
    pub n_classes: usize,
    pub items_per_class: usize,
    pub side: u32,
    /// Standard deviation of per-item ring color perturbations (0-255 scale).
    pub color_noise: f64,
    /// Largest per-item displacement of the pattern center, in pixels.
    pub max_shift: u32,
    pub seed: u64,
}

impl Default for NoisyClusterConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            items_per_class: 20,
            side: 224,
            color_noise: 55.0,
            max_shift: 24,
            seed: 0,
        }
    }
}

const RINGS: usize = 3;

/// Concentric-ring pattern: ring `r` spans radii `[r, r + 1) · side / 6`.
fn render_rings(side: u32, colors: &[[f64; 3]; RINGS], cx: f64, cy: f64) -> Raster {
    let band = f64::from(side) / 6.0;
    let mut img = Raster::filled(side, side, [0, 0, 0]);
    for y in 0..side {
        for x in 0..side {
            let d = ((f64::from(x) + 0.5 - cx).powi(2) + (f64::from(y) + 0.5 - cy).powi(2)).sqrt();
            let ring = ((d / band) as usize).min(RINGS - 1);
            let c = colors[ring];
            img.set_pixel(x, y, c.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyClusterData {
    pub images: Vec<LabeledImage>,
    /// Clean class patterns, indexed by class id.
    pub templates: Vec<Raster>,
    pub manifest: Manifest,
}

pub fn noisy_cluster_images(cfg: &NoisyClusterConfig) -> Result<NoisyClusterData> {
    if cfg.n_classes < 2 {
        return Err(MpaError::TooFewClasses(cfg.n_classes));
    }
    if cfg.items_per_class == 0 || cfg.side < 8 || cfg.max_shift >= cfg.side / 2 {
        return Err(MpaError::InvalidConfig("invalid noisy-cluster geometry".into()));
    }
    let center = f64::from(cfg.side) / 2.0;
    let mut images = Vec::new();
    let mut templates = Vec::new();
    for c in 0..cfg.n_classes {
        let mut rng = stream(cfg.seed, 1000 + c as u64, StreamTag::Synthetic);
        let mut colors = [[0.0; 3]; RINGS];
        for ring in &mut colors {
            for v in ring.iter_mut() {
                *v = rng.gen_range(30.0..225.0);
            }
        }
        templates.push(render_rings(cfg.side, &colors, center, center));
        for item in 0..cfg.items_per_class {
            let mut noisy = colors;
            for ring in &mut noisy {
                for v in ring.iter_mut() {
                    *v += cfg.color_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let shift = f64::from(cfg.max_shift);
            let dx = rng.gen_range(-shift..=shift);
            let dy = rng.gen_range(-shift..=shift);
            images.push(LabeledImage {
                class_id: c as u32,
                item_id: item as u32,
                raster: render_rings(cfg.side, &noisy, center + dx, center + dy),
            });
        }
    }
    Ok(NoisyClusterData {
        images,
        templates,
        manifest: numbered_manifest("synth-noisy-cluster", "toy-area8x8", cfg.n_classes),
    })
}

/// Offline generator producing a fixed description and numbered paraphrases.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateGenerator;

impl VariantGenerator for TemplateGenerator {
    fn llm_id(&self) -> String {
        "template".into()
    }

    fn generate_variants(&self, class_name: &str, n_variants: usize) -> Result<Vec<String>> {
        let mut out = vec![format!("{class_name}: concentric colored rings on a dark background")];
        out.extend((1..=n_variants).map(|i| format!("{class_name}, paraphrase {i}: rings of color around a center")));
        Ok(out)
    }
}

/// Text encoder aligned with the toy image space: a description naming a
/// class maps to that class's clean pattern embedding plus a small
/// text-dependent perturbation.
#[derive(Clone, Debug)]
pub struct TemplateTextEncoder {
    classes: Vec<(String, EmbeddingVector)>,
    dim: usize,
    perturbation: f64,
}

impl TemplateTextEncoder {
    pub fn new(data: &NoisyClusterData, dim: usize, perturbation: f64) -> Result<Self> {
        let classes = data
            .templates
            .iter()
            .enumerate()
            .map(|(c, t)| Ok((data.manifest.class_name(c as u32)?.to_string(), toy_encode(t, dim))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes,
            dim,
            perturbation,
        })
    }
}

impl TextEncoder for TemplateTextEncoder {
    fn encoder_id(&self) -> String {
        format!("template-aligned-d{}", self.dim)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|t| {
                let (_, base) = self
                    .classes
                    .iter()
                    .filter(|(name, _)| t.contains(name.as_str()))
                    .max_by_key(|(name, _)| name.len())
                    .ok_or_else(|| MpaError::InvalidConfig(format!("text names no known class: {t:?}")))?;
                let seed = t.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
                let mut rng = stream(seed, 0, StreamTag::Synthetic);
                EmbeddingVector::new(
                    base.as_slice()
                        .iter()
                        .map(|v| v + self.perturbation * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            })
            .collect()
    }
}

/// Toy-encoded noisy-cluster bank with raw, view and semantic records.
pub fn noisy_cluster_bank(cfg: &NoisyClusterConfig, plan: &ViewPlan) -> Result<(Vec<LabeledEmbedding>, Manifest)> {
    let data = noisy_cluster_images(cfg)?;
    let encoder = ToyEncoder::default();
    let text = TemplateTextEncoder::new(&data, TOY_FEATURES, 0.02)?;
    let mut cache = VariantCache::in_memory();
    let opts = ExtractOptions {
        plan: Some(plan.clone()),
        semantic: Some(FetchConfig::default()),
        seed: cfg.seed,
    };
    let sources = SemanticSources {
        generator: &TemplateGenerator,
        encoder: &text,
        cache: &mut cache,
    };
    let out = extract_records(&data.images, &data.manifest, &encoder, Some(sources), &opts)?;
    let mut manifest = data.manifest;
    manifest.metadata.insert("seed".into(), cfg.seed.to_string());
    Ok((out.records, manifest))
}
