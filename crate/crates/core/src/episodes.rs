//! Episode sampling, support assembly and evaluation runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auca::{self, AucaConfig, InterpolationSource, Lambda, Provenance, UncertainBatch};
use crate::bank::{self, Manifest};
use crate::classifier::{self, LabeledRow, TrainConfig, UncertainPolicy};
use crate::error::{MpaError, Result};
use crate::model::{
    l2_normalize, mean_prototype, EmbeddingVector, EpisodeSpec, LabeledEmbedding, Modality, Prototype,
    PrototypeSource,
};
use crate::rng::{stream, StreamTag};

#[derive(Clone, Debug, Default)]
struct ClassIndex {
    /// (item_id, record index), sorted by item.
    raw: Vec<(u32, usize)>,
    /// Augmented-view records per item, sorted by view id.
    views: BTreeMap<u32, Vec<usize>>,
    semantic: Vec<usize>,
}

/// A decoded bank with per-class lookup tables.
#[derive(Clone, Debug)]
pub struct EmbeddingBank {
    dim: usize,
    manifest: Manifest,
    records: Vec<LabeledEmbedding>,
    classes: BTreeMap<u32, ClassIndex>,
}

impl EmbeddingBank {
    pub fn new(records: Vec<LabeledEmbedding>, manifest: Manifest) -> Result<Self> {
        let dim = bank::validate_records(&records)?;
        manifest.check_covers(&records)?;
        let mut classes: BTreeMap<u32, ClassIndex> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let entry = classes.entry(r.class_id).or_default();
            match r.modality {
                Modality::VisualRaw => entry.raw.push((r.item_id, i)),
                Modality::VisualNatural | Modality::VisualGeometric => {
                    entry.views.entry(r.item_id).or_default().push(i)
                }
                Modality::Semantic => entry.semantic.push(i),
                Modality::Uncertain => {}
            }
        }
        for entry in classes.values_mut() {
            entry.raw.sort_unstable();
            for v in entry.views.values_mut() {
                v.sort_by_key(|&i| (records[i].view_id, records[i].modality));
            }
            entry.semantic.sort_by_key(|&i| (records[i].item_id, records[i].view_id));
        }
        Ok(Self {
            dim,
            manifest,
            records,
            classes,
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let (records, manifest) = bank::read_bank(path)?;
        Self::new(records, manifest)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn records(&self) -> &[LabeledEmbedding] {
        &self.records
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    pub fn raw_item_count(&self, class_id: u32) -> usize {
        self.classes.get(&class_id).map_or(0, |c| c.raw.len())
    }

    pub fn modality_counts(&self) -> BTreeMap<Modality, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.modality).or_insert(0) += 1;
        }
        out
    }

    fn class(&self, class_id: u32) -> Result<&ClassIndex> {
        self.classes
            .get(&class_id)
            .ok_or_else(|| MpaError::InsufficientData(format!("class {class_id} has no records")))
    }

    fn raw_vector(&self, class_id: u32, item_id: u32) -> Result<&EmbeddingVector> {
        let c = self.class(class_id)?;
        c.raw
            .binary_search_by_key(&item_id, |&(item, _)| item)
            .map(|pos| &self.records[c.raw[pos].1].vector)
            .map_err(|_| MpaError::InsufficientData(format!("class {class_id} item {item_id} has no raw record")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub index: u64,
    pub seed: u64,
    /// Sampled class ids in ascending order; local label = position.
    pub classes: Vec<u32>,
    pub support: Vec<Vec<u32>>,
    pub queries: Vec<Vec<u32>>,
}

/// Samples episode `index`; the result depends only on the bank, the spec
/// and `index`.
pub fn sample_episode(bank: &EmbeddingBank, spec: &EpisodeSpec, index: u64) -> Result<Episode> {
    spec.validate()?;
    let need = spec.k_shot + spec.q_queries;
    let eligible: Vec<u32> = bank.class_ids().filter(|&c| bank.raw_item_count(c) >= need).collect();
    if eligible.len() < spec.n_way {
        let limiting = bank
            .class_ids()
            .filter(|&c| bank.raw_item_count(c) < need)
            .min_by_key(|&c| (bank.raw_item_count(c), c));
        let detail = match limiting {
            Some(c) => format!(
                "; class {c} ({}) has only {} raw items",
                bank.manifest().class_name(c).unwrap_or("?"),
                bank.raw_item_count(c)
            ),
            None => String::new(),
        };
        return Err(MpaError::InsufficientData(format!(
            "{}-way episodes need classes with at least {need} raw items, found {}{detail}",
            spec.n_way,
            eligible.len()
        )));
    }
    let mut rng = stream(spec.seed, index, StreamTag::EpisodeSampling);
    let mut classes: Vec<u32> = index::sample(&mut rng, eligible.len(), spec.n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    classes.sort_unstable();
    let mut support = Vec::with_capacity(spec.n_way);
    let mut queries = Vec::with_capacity(spec.n_way);
    for &c in &classes {
        let items = &bank.class(c)?.raw;
        let picked: Vec<u32> = index::sample(&mut rng, items.len(), need)
            .into_iter()
            .map(|i| items[i].0)
            .collect();
        support.push(picked[..spec.k_shot].to_vec());
        queries.push(picked[spec.k_shot..].to_vec());
    }
    Ok(Episode {
        index,
        seed: spec.seed,
        classes,
        support,
        queries,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PipelineFlags {
    pub lmse: bool,
    pub hma: bool,
    pub auca: bool,
}

impl PipelineFlags {
    pub const BASELINE: Self = Self::new(false, false, false);
    pub const FULL: Self = Self::new(true, true, true);
    /// The ablation ladder in reporting order.
    pub const ABLATION: [Self; 5] = [
        Self::new(false, false, false),
        Self::new(true, false, false),
        Self::new(false, true, false),
        Self::new(true, true, false),
        Self::new(true, true, true),
    ];

    pub const fn new(lmse: bool, hma: bool, auca: bool) -> Self {
        Self { lmse, hma, auca }
    }

    /// Compact label such as `LH-`.
    pub fn label(&self) -> String {
        let mark = |on: bool, c: char| if on { c } else { '-' };
        [mark(self.lmse, 'L'), mark(self.hma, 'H'), mark(self.auca, 'A')]
            .iter()
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub prototype_source: PrototypeSource,
    /// L2-normalize every row (support, uncertain and query) before use.
    pub l2_normalize: bool,
    pub uncertain_policy: UncertainPolicy,
    pub train: TrainConfig,
    pub auca: AucaConfig,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.auca.validate()
    }
}

/// Wall-clock seconds per pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub extraction: f64,
    pub augmentation: f64,
    pub semantic: f64,
    pub auca: f64,
    pub training: f64,
    pub scoring: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.extraction + self.augmentation + self.semantic + self.auca + self.training + self.scoring
    }

    pub fn add(&mut self, o: &StageTimings) {
        self.extraction += o.extraction;
        self.augmentation += o.augmentation;
        self.semantic += o.semantic;
        self.auca += o.auca;
        self.training += o.training;
        self.scoring += o.scoring;
    }

    pub fn scaled(&self, k: f64) -> StageTimings {
        StageTimings {
            extraction: self.extraction * k,
            augmentation: self.augmentation * k,
            semantic: self.semantic * k,
            auca: self.auca * k,
            training: self.training * k,
            scoring: self.scoring * k,
        }
    }
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    /// Training rows: per class raw, then views, then semantic; uncertain rows last.
    pub rows: Vec<LabeledRow>,
    pub prototypes: Vec<Prototype>,
    pub uncertain: Option<UncertainBatch>,
    /// `n_way`, plus one when the uncertain class is present.
    pub n_classes: usize,
    pub modality_counts: BTreeMap<Modality, usize>,
}

impl SupportSet {
    pub fn uncertain_label(&self) -> Option<usize> {
        self.uncertain.as_ref().map(|_| self.n_classes - 1)
    }
}

fn prep(v: &EmbeddingVector, normalize: bool) -> Result<EmbeddingVector> {
    if normalize {
        l2_normalize(v)
    } else {
        Ok(v.clone())
    }
}

struct Gathered {
    enriched: Vec<Vec<EmbeddingVector>>,
    raw: Vec<Vec<EmbeddingVector>>,
    counts: BTreeMap<Modality, usize>,
}

fn gather(bank: &EmbeddingBank, ep: &Episode, flags: PipelineFlags, cfg: &EngineConfig, t: &mut StageTimings) -> Result<Gathered> {
    let n = ep.classes.len();
    let mut enriched = vec![Vec::new(); n];
    let mut raw = vec![Vec::new(); n];
    let mut counts = BTreeMap::new();
    let start = Instant::now();
    for (label, (&c, items)) in ep.classes.iter().zip(&ep.support).enumerate() {
        for &item in items {
            let v = prep(bank.raw_vector(c, item)?, cfg.l2_normalize)?;
            raw[label].push(v.clone());
            enriched[label].push(v);
            *counts.entry(Modality::VisualRaw).or_insert(0) += 1;
        }
    }
    t.extraction += elapsed(start);
    if flags.hma {
        let start = Instant::now();
        for (label, (&c, items)) in ep.classes.iter().zip(&ep.support).enumerate() {
            let class = bank.class(c)?;
            for &item in items {
                let views = class.views.get(&item).ok_or_else(|| {
                    MpaError::InsufficientData(format!(
                        "class {c} item {item} has no augmented views; extract the bank with augmentation enabled"
                    ))
                })?;
                for &i in views {
                    let r = &bank.records[i];
                    enriched[label].push(prep(&r.vector, cfg.l2_normalize)?);
                    *counts.entry(r.modality).or_insert(0) += 1;
                }
            }
        }
        t.augmentation += elapsed(start);
    }
    if flags.lmse {
        let start = Instant::now();
        for (label, &c) in ep.classes.iter().enumerate() {
            let class = bank.class(c)?;
            if class.semantic.is_empty() {
                return Err(MpaError::InsufficientData(format!(
                    "class {c} has no semantic records; extract the bank with semantic variants enabled"
                )));
            }
            for &i in &class.semantic {
                enriched[label].push(prep(&bank.records[i].vector, cfg.l2_normalize)?);
                *counts.entry(Modality::Semantic).or_insert(0) += 1;
            }
        }
        t.semantic += elapsed(start);
    }
    Ok(Gathered { enriched, raw, counts })
}

fn prototypes(ep: &Episode, g: &Gathered, source: PrototypeSource) -> Result<Vec<Prototype>> {
    let feats = match source {
        PrototypeSource::Enriched => &g.enriched,
        PrototypeSource::VisualRawOnly => &g.raw,
    };
    ep.classes
        .iter()
        .zip(feats)
        .map(|(&class_id, f)| {
            Ok(Prototype {
                class_id,
                vector: mean_prototype(f)?,
            })
        })
        .collect()
}

fn uncertain_batch(
    ep: &Episode,
    g: &Gathered,
    protos: &[Prototype],
    cfg: &EngineConfig,
) -> Result<UncertainBatch> {
    let source = match cfg.auca.interpolation_source {
        InterpolationSource::Enriched => &g.enriched,
        InterpolationSource::RawOnly => &g.raw,
    };
    let mut rng = stream(ep.seed, ep.index, StreamTag::Uncertain);
    let mut batch = auca::generate_uncertain(source, protos, &cfg.auca, &mut rng)?;
    if cfg.l2_normalize {
        batch.samples = batch.samples.iter().map(l2_normalize).collect::<Result<_>>()?;
    }
    Ok(batch)
}

/// λ of one episode without training anything.
pub fn episode_lambda(bank: &EmbeddingBank, ep: &Episode, flags: PipelineFlags, cfg: &EngineConfig) -> Result<Lambda> {
    let g = gather(bank, ep, flags, cfg, &mut StageTimings::default())?;
    let protos = prototypes(ep, &g, cfg.prototype_source)?;
    auca::lambda_from_prototypes(&protos, &cfg.auca)
}

pub fn assemble_support(
    bank: &EmbeddingBank,
    ep: &Episode,
    flags: PipelineFlags,
    cfg: &EngineConfig,
) -> Result<(SupportSet, StageTimings)> {
    let mut t = StageTimings::default();
    let g = gather(bank, ep, flags, cfg, &mut t)?;
    let n_way = ep.classes.len();
    let protos = prototypes(ep, &g, cfg.prototype_source)?;
    let mut rows: Vec<LabeledRow> = g
        .enriched
        .iter()
        .enumerate()
        .flat_map(|(label, f)| f.iter().map(move |v| LabeledRow::new(v.clone(), label)))
        .collect();
    let mut counts = g.counts.clone();
    let uncertain = if flags.auca {
        let start = Instant::now();
        let batch = uncertain_batch(ep, &g, &protos, cfg)?;
        rows.extend(batch.samples.iter().map(|v| LabeledRow::new(v.clone(), n_way)));
        counts.insert(Modality::Uncertain, batch.samples.len());
        t.auca += elapsed(start);
        Some(batch)
    } else {
        None
    };
    let n_classes = n_way + usize::from(uncertain.is_some());
    Ok((
        SupportSet {
            rows,
            prototypes: protos,
            uncertain,
            n_classes,
            modality_counts: counts,
        },
        t,
    ))
}

pub fn query_rows(bank: &EmbeddingBank, ep: &Episode, cfg: &EngineConfig) -> Result<Vec<LabeledRow>> {
    let mut out = Vec::new();
    for (label, (&c, items)) in ep.classes.iter().zip(&ep.queries).enumerate() {
        for &item in items {
            out.push(LabeledRow::new(prep(bank.raw_vector(c, item)?, cfg.l2_normalize)?, label));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertainSummary {
    pub lambda: Lambda,
    pub provenance: Vec<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub index: u64,
    pub classes: Vec<u32>,
    pub accuracy: f64,
    pub support_rows: usize,
    pub modality_counts: BTreeMap<Modality, usize>,
    pub uncertain: Option<UncertainSummary>,
    pub uncertain_predictions: usize,
    pub train_iterations: usize,
    pub converged: bool,
    pub memory_bytes: u64,
    pub timings: StageTimings,
}

/// Bytes held by feature rows, model parameters and optimizer history.
pub fn memory_estimate(rows: usize, queries: usize, dim: usize, n_classes: usize, history: usize) -> u64 {
    let params = n_classes * (dim + 1);
    let floats = (rows + queries) * dim + params * (2 * history + 4);
    (floats * std::mem::size_of::<f64>()) as u64
}

pub fn evaluate_episode(
    bank: &EmbeddingBank,
    ep: &Episode,
    flags: PipelineFlags,
    cfg: &EngineConfig,
) -> Result<EpisodeResult> {
    let (support, mut t) = assemble_support(bank, ep, flags, cfg)?;
    let start = Instant::now();
    let queries = query_rows(bank, ep, cfg)?;
    t.extraction += elapsed(start);

    let start = Instant::now();
    let (model, trace) = classifier::train_traced(&support.rows, support.n_classes, &cfg.train)?;
    t.training += elapsed(start);

    let start = Instant::now();
    let score = classifier::score_queries(&model, &queries, support.uncertain_label(), cfg.uncertain_policy)?;
    t.scoring += elapsed(start);

    Ok(EpisodeResult {
        index: ep.index,
        classes: ep.classes.clone(),
        accuracy: score.accuracy,
        support_rows: support.rows.len(),
        memory_bytes: memory_estimate(
            support.rows.len(),
            queries.len(),
            bank.dim(),
            support.n_classes,
            cfg.train.history_size,
        ),
        modality_counts: support.modality_counts,
        uncertain: support.uncertain.map(|b| UncertainSummary {
            lambda: b.lambda,
            provenance: b.provenance,
        }),
        uncertain_predictions: score.uncertain_predictions,
        train_iterations: trace.iterations,
        converged: trace.converged,
        timings: t,
    })
}

/// Mean and 95% half-width `1.96 · s / √n` with the sample standard deviation.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub spec: EpisodeSpec,
    pub flags: PipelineFlags,
    pub config: EngineConfig,
    pub dataset_name: String,
    pub encoder_id: String,
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub memory_high_water_bytes: u64,
    pub uncertain_predictions: usize,
    pub timings: StageTimings,
    pub wall_seconds: f64,
    pub episodes: Vec<EpisodeResult>,
}

impl RunReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.accuracy).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.episodes
            .iter()
            .filter_map(|e| e.uncertain.as_ref().map(|u| u.lambda.value))
            .collect()
    }

    pub fn mean_timings(&self) -> StageTimings {
        self.timings.scaled(1.0 / self.n_episodes.max(1) as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with every timing zeroed; identical across runs with equal inputs.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.timings = StageTimings::default();
        r.wall_seconds = 0.0;
        r.episodes.iter_mut().for_each(|e| e.timings = StageTimings::default());
        serde_json::to_string(&r).expect("report serializes")
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(MpaError::InvalidConfig("workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| MpaError::InvalidConfig(format!("cannot start worker pool: {e}")))
}

pub fn run_evaluation(
    bank: &EmbeddingBank,
    spec: &EpisodeSpec,
    flags: PipelineFlags,
    cfg: &EngineConfig,
    n_episodes: usize,
    workers: usize,
) -> Result<RunReport> {
    spec.validate()?;
    cfg.validate()?;
    if n_episodes == 0 {
        return Err(MpaError::InvalidConfig("n_episodes must be at least 1".into()));
    }
    let wall = Instant::now();
    let episodes = (0..n_episodes as u64)
        .map(|i| sample_episode(bank, spec, i))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<EpisodeResult> = pool(workers)?.install(|| {
        episodes
            .par_iter()
            .map(|ep| evaluate_episode(bank, ep, flags, cfg))
            .collect::<Result<Vec<_>>>()
    })?;
    let accuracies: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, ci95) = mean_and_ci95(&accuracies);
    let mut timings = StageTimings::default();
    results.iter().for_each(|r| timings.add(&r.timings));
    Ok(RunReport {
        spec: *spec,
        flags,
        config: *cfg,
        dataset_name: bank.manifest().dataset_name.clone(),
        encoder_id: bank.manifest().encoder_id.clone(),
        n_episodes,
        mean_accuracy,
        ci95,
        memory_high_water_bytes: results.iter().map(|r| r.memory_bytes).max().unwrap_or(0),
        uncertain_predictions: results.iter().map(|r| r.uncertain_predictions).sum(),
        timings,
        wall_seconds: wall.elapsed().as_secs_f64(),
        episodes: results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaStats {
    pub lambdas: Vec<f64>,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

impl LambdaStats {
    pub fn from_values(lambdas: Vec<f64>) -> Self {
        let n = lambdas.len().max(1) as f64;
        let mean = lambdas.iter().sum::<f64>() / n;
        let variance = lambdas.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        Self { lambdas, mean, variance }
    }
}

/// λ over `n_trials` independently sampled episodes.
pub fn lambda_statistics(
    bank: &EmbeddingBank,
    spec: &EpisodeSpec,
    flags: PipelineFlags,
    cfg: &EngineConfig,
    n_trials: usize,
) -> Result<LambdaStats> {
    if n_trials < 2 {
        return Err(MpaError::InvalidConfig("lambda statistics need at least 2 trials".into()));
    }
    cfg.validate()?;
    let lambdas = (0..n_trials as u64)
        .map(|i| {
            let ep = sample_episode(bank, spec, i)?;
            episode_lambda(bank, &ep, flags, cfg).map(|l| l.value)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LambdaStats::from_values(lambdas))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<RunReport>,
}

impl AblationReport {
    pub fn row(&self, flags: PipelineFlags) -> Option<&RunReport> {
        self.rows.iter().find(|r| r.flags == flags)
    }

    pub fn canonical_json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| serde_json::from_str(&r.canonical_json()).expect("valid json"))
            .collect();
        serde_json::to_string(&rows).expect("serializes")
    }
}

/// Runs every ablation configuration on the same episodes.
pub fn ablation_run(
    bank: &EmbeddingBank,
    spec: &EpisodeSpec,
    cfg: &EngineConfig,
    n_episodes: usize,
    workers: usize,
) -> Result<AblationReport> {
    let rows = PipelineFlags::ABLATION
        .iter()
        .map(|&f| run_evaluation(bank, spec, f, cfg, n_episodes, workers))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}
