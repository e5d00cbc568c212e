//! Adaptive uncertain-class generation.
//!
//! Prototype cosine similarities are min-max normalized over the class pairs
//! and turned into a mixing factor λ. Each synthetic sample of the extra
//! "uncertain" class is then an interpolation between two support features
//! from different classes (probability λ) or a standard-normal draw
//! (probability 1 − λ).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};
use crate::model::{cosine_similarity, EmbeddingVector, Prototype};
use crate::rng::RngStream;

/// Ranges narrower than this count as all-equal during normalization.
pub const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaMode {
    /// `1 − (2 / C(C,2)) Σ S'`, optionally clamped to [0, 1].
    #[default]
    AsWritten,
    /// `1 − mean(S')`.
    PairMean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleCount {
    /// Mean enriched support rows per class, rounded up.
    #[default]
    Auto,
    Fixed(usize),
}

/// Which support features interpolation draws from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterpolationSource {
    #[default]
    Enriched,
    RawOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucaConfig {
    pub alpha_range: (f64, f64),
    pub sample_count: SampleCount,
    pub lambda_mode: LambdaMode,
    pub lambda_clamp: bool,
    pub degenerate_lambda: f64,
    pub interpolation_source: InterpolationSource,
}

impl Default for AucaConfig {
    fn default() -> Self {
        Self {
            alpha_range: (0.2, 0.8),
            sample_count: SampleCount::Auto,
            lambda_mode: LambdaMode::AsWritten,
            lambda_clamp: true,
            degenerate_lambda: 0.5,
            interpolation_source: InterpolationSource::Enriched,
        }
    }
}

impl AucaConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.alpha_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(MpaError::InvalidConfig(format!(
                "alpha range ({lo}, {hi}) must satisfy 0 <= low <= high <= 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.degenerate_lambda) {
            return Err(MpaError::InvalidConfig("degenerate_lambda must lie in [0, 1]".into()));
        }
        if self.sample_count == SampleCount::Fixed(0) {
            return Err(MpaError::InvalidConfig("sample_count must be positive".into()));
        }
        Ok(())
    }
}

/// Upper-triangular cosine similarity matrix; entries below the diagonal are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.entries[j * self.n + k]
    }

    /// Strict upper triangle in row-major `(j < k)` order.
    pub fn pair_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n - 1) / 2);
        for j in 0..self.n {
            for k in j + 1..self.n {
                out.push(self.get(j, k));
            }
        }
        out
    }
}

pub fn similarity_matrix(prototypes: &[Prototype]) -> Result<SimilarityMatrix> {
    let n = prototypes.len();
    if n < 2 {
        return Err(MpaError::TooFewClasses(n));
    }
    let mut entries = vec![0.0; n * n];
    for j in 0..n {
        for k in j..n {
            entries[j * n + k] = cosine_similarity(&prototypes[j].vector, &prototypes[k].vector)?;
        }
    }
    Ok(SimilarityMatrix { n, entries })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSimilarities {
    /// Pair values mapped to [0, 1], row-major `(j < k)` order.
    pub values: Vec<f64>,
    /// All pair values were equal (including the single-pair case).
    pub degenerate: bool,
}

pub fn normalize_similarities(s: &SimilarityMatrix) -> NormalizedSimilarities {
    normalize_pair_values(&s.pair_values())
}

/// Min-max normalization of pairwise similarities; all-equal inputs map to 0.5.
pub fn normalize_pair_values(values: &[f64]) -> NormalizedSimilarities {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || max - min <= DEGENERATE_SPREAD {
        return NormalizedSimilarities {
            values: vec![0.5; values.len()],
            degenerate: true,
        };
    }
    let span = max - min;
    NormalizedSimilarities {
        values: values.iter().map(|v| (v - min) / span).collect(),
        degenerate: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambda {
    /// Value used for sampling, in [0, 1].
    pub value: f64,
    /// Value before clamping.
    pub raw: f64,
}

pub fn compute_lambda(normalized: &NormalizedSimilarities, cfg: &AucaConfig) -> Result<Lambda> {
    let pairs = normalized.values.len();
    if pairs == 0 {
        return Err(MpaError::TooFewClasses(1));
    }
    if normalized.degenerate {
        return Ok(Lambda {
            value: cfg.degenerate_lambda,
            raw: cfg.degenerate_lambda,
        });
    }
    let sum: f64 = normalized.values.iter().sum();
    let raw = match cfg.lambda_mode {
        LambdaMode::AsWritten => 1.0 - 2.0 / pairs as f64 * sum,
        LambdaMode::PairMean => 1.0 - sum / pairs as f64,
    };
    let value = if cfg.lambda_clamp || cfg.lambda_mode == LambdaMode::PairMean {
        raw.clamp(0.0, 1.0)
    } else {
        raw
    };
    Ok(Lambda { value, raw })
}

/// λ from prototypes: similarity matrix, normalization, mixing factor.
pub fn lambda_from_prototypes(prototypes: &[Prototype], cfg: &AucaConfig) -> Result<Lambda> {
    let s = similarity_matrix(prototypes)?;
    compute_lambda(&normalize_similarities(&s), cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Gaussian,
    /// `alpha * F(class_a) + (1 − alpha) * F(class_b)`, classes as support indices.
    Interpolated { class_a: usize, class_b: usize, alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertainBatch {
    pub lambda: Lambda,
    pub samples: Vec<EmbeddingVector>,
    pub provenance: Vec<Provenance>,
}

impl UncertainBatch {
    pub fn interpolated_count(&self) -> usize {
        self.provenance
            .iter()
            .filter(|p| matches!(p, Provenance::Interpolated { .. }))
            .count()
    }
}

fn draw_alpha(range: (f64, f64), rng: &mut RngStream) -> f64 {
    range.0 + (range.1 - range.0) * rng.gen::<f64>()
}

/// Interpolates between features of two distinct classes chosen uniformly
/// among the unordered pairs of non-empty classes.
pub fn sample_interpolated(
    support: &[Vec<EmbeddingVector>],
    alpha_range: (f64, f64),
    rng: &mut RngStream,
) -> Result<(EmbeddingVector, Provenance)> {
    let classes: Vec<usize> = (0..support.len()).filter(|&c| !support[c].is_empty()).collect();
    if classes.len() < 2 {
        return Err(MpaError::TooFewClasses(classes.len()));
    }
    let n = classes.len();
    let mut pair = rng.gen_range(0..n * (n - 1) / 2);
    let mut a = 0;
    while pair >= n - 1 - a {
        pair -= n - 1 - a;
        a += 1;
    }
    let b = a + 1 + pair;
    let (class_a, class_b) = (classes[a], classes[b]);
    let fa = support[class_a].choose(rng).expect("non-empty class");
    let fb = support[class_b].choose(rng).expect("non-empty class");
    let alpha = draw_alpha(alpha_range, rng);
    let v = fa.lerp(fb, alpha)?;
    Ok((v, Provenance::Interpolated { class_a, class_b, alpha }))
}

pub fn sample_gaussian(dim: usize, rng: &mut RngStream) -> Result<EmbeddingVector> {
    if dim == 0 {
        return Err(MpaError::InvalidConfig("dim must be positive".into()));
    }
    EmbeddingVector::new((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

fn resolve_count(support: &[Vec<EmbeddingVector>], count: SampleCount) -> usize {
    match count {
        SampleCount::Fixed(n) => n,
        SampleCount::Auto => {
            let rows: usize = support.iter().map(Vec::len).sum();
            rows.div_ceil(support.len().max(1)).max(1)
        }
    }
}

/// Mixture sampling with an explicit λ: each sample is independently
/// interpolated with probability `lambda`, Gaussian otherwise.
pub fn generate_uncertain_with_lambda(
    support: &[Vec<EmbeddingVector>],
    lambda: Lambda,
    cfg: &AucaConfig,
    rng: &mut RngStream,
) -> Result<UncertainBatch> {
    cfg.validate()?;
    let dim = support
        .iter()
        .flatten()
        .next()
        .map(EmbeddingVector::dim)
        .ok_or(MpaError::EmptyInput("support set"))?;
    let p = lambda.value.clamp(0.0, 1.0);
    let count = resolve_count(support, cfg.sample_count);
    let mut samples = Vec::with_capacity(count);
    let mut provenance = Vec::with_capacity(count);
    for _ in 0..count {
        if rng.gen::<f64>() < p {
            let (v, prov) = sample_interpolated(support, cfg.alpha_range, rng)?;
            samples.push(v);
            provenance.push(prov);
        } else {
            samples.push(sample_gaussian(dim, rng)?);
            provenance.push(Provenance::Gaussian);
        }
    }
    Ok(UncertainBatch {
        lambda,
        samples,
        provenance,
    })
}

/// λ from the prototypes, then mixture sampling. `support[c]` holds the
/// features of support class `c`, in the same order as `prototypes`.
pub fn generate_uncertain(
    support: &[Vec<EmbeddingVector>],
    prototypes: &[Prototype],
    cfg: &AucaConfig,
    rng: &mut RngStream,
) -> Result<UncertainBatch> {
    if support.iter().all(Vec::is_empty) {
        return Err(MpaError::EmptyInput("support set"));
    }
    let lambda = lambda_from_prototypes(prototypes, cfg)?;
    generate_uncertain_with_lambda(support, lambda, cfg, rng)
}
