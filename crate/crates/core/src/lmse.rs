//! Semantic support enrichment from LLM-generated class descriptions.
//!
//! For every class an LLM produces an appearance description plus a number of
//! paraphrases; each text is embedded and joins the support set as one row
//! labeled with that class.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};
use crate::model::{EmbeddingVector, LabeledEmbedding, Modality};
use crate::provider::HttpProvider;

pub const DEFAULT_N_VARIANTS: usize = 4;
pub const VARIANT_CACHE_ENV: &str = "MPA_VARIANT_CACHE";

pub fn build_prompt(class_name: &str) -> Result<String> {
    let name = class_name.trim();
    if name.is_empty() {
        return Err(MpaError::EmptyClassName);
    }
    Ok(format!(
        "Please generate an appearance description for {name}, with four paraphrased variants."
    ))
}

pub fn fallback_description(class_name: &str) -> String {
    format!("a photo of a {}", class_name.trim())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantSource {
    LlmProvider,
    CacheFile,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticVariantSet {
    pub class_id: u32,
    pub class_name: String,
    pub descriptions: Vec<String>,
    pub source: VariantSource,
}

pub trait VariantGenerator: Sync {
    /// Identity of the underlying LLM; part of the cache key.
    fn llm_id(&self) -> String;

    /// Original description followed by `n_variants` paraphrases.
    fn generate_variants(&self, class_name: &str, n_variants: usize) -> Result<Vec<String>>;
}

pub trait TextEncoder: Sync {
    fn encoder_id(&self) -> String;

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

impl VariantGenerator for HttpProvider {
    fn llm_id(&self) -> String {
        self.config().llm_id.clone()
    }

    fn generate_variants(&self, class_name: &str, n_variants: usize) -> Result<Vec<String>> {
        HttpProvider::generate_variants(self, class_name, n_variants)
    }
}

impl TextEncoder for HttpProvider {
    fn encoder_id(&self) -> String {
        format!("http:{}", self.config().base_url)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        HttpProvider::embed_texts(self, texts)
    }
}

/// Generator for offline runs: always unavailable, so callers take the
/// fallback template.
#[derive(Clone, Copy, Debug, Default)]
pub struct OfflineGenerator;

impl VariantGenerator for OfflineGenerator {
    fn llm_id(&self) -> String {
        "offline".into()
    }

    fn generate_variants(&self, _class_name: &str, _n_variants: usize) -> Result<Vec<String>> {
        Err(MpaError::ProviderUnavailable("no LLM provider configured".into()))
    }
}

/// Offline text encoder: hashed character-trigram frequencies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashTextEncoder {
    pub dim: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl TextEncoder for HashTextEncoder {
    fn encoder_id(&self) -> String {
        format!("hash-trigram-d{}", self.dim)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(MpaError::EmptyInput("text list"));
        }
        if self.dim == 0 {
            return Err(MpaError::InvalidConfig("text encoder dim must be positive".into()));
        }
        texts
            .iter()
            .map(|t| {
                let padded = format!("  {}  ", t.to_lowercase());
                let bytes = padded.as_bytes();
                let mut v = vec![0.0; self.dim];
                let grams = bytes.len() - 2;
                for w in bytes.windows(3) {
                    v[(fnv1a(w) % self.dim as u64) as usize] += 1.0 / grams as f64;
                }
                EmbeddingVector::new(v)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct CacheKey {
    llm_id: String,
    class_name: String,
    n_variants: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub llm_id: String,
    pub class_name: String,
    pub n_variants: usize,
    pub descriptions: Vec<String>,
    /// Seconds since the Unix epoch at insertion.
    pub timestamp: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheFile {
    entries: Vec<CacheEntry>,
}

/// Persistent `(llm_id, class_name, n_variants) -> descriptions` map.
///
/// Mutation takes `&mut self`; share it across threads behind a mutex so
/// there is a single writer.
#[derive(Debug, Default)]
pub struct VariantCache {
    path: Option<PathBuf>,
    entries: BTreeMap<CacheKey, CacheEntry>,
}

impl VariantCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists; otherwise starts empty and will create it.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut cache = Self {
            path: Some(path.clone()),
            entries: BTreeMap::new(),
        };
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            cache.entries = Self::parse(&text)?.entries;
        }
        Ok(cache)
    }

    /// Parses cache file contents.
    pub fn parse(text: &str) -> Result<Self> {
        let file: CacheFile = serde_json::from_str(text)
            .map_err(|e| MpaError::Format(format!("variant cache: {e}")))?;
        let mut entries = BTreeMap::new();
        for entry in file.entries {
            if entry.descriptions.is_empty() || entry.descriptions.iter().any(|d| d.trim().is_empty()) {
                return Err(MpaError::Format(format!(
                    "variant cache entry for {:?} has empty descriptions",
                    entry.class_name
                )));
            }
            let key = CacheKey {
                llm_id: entry.llm_id.clone(),
                class_name: entry.class_name.clone(),
                n_variants: entry.n_variants,
            };
            entries.insert(key, entry);
        }
        Ok(Self { path: None, entries })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, llm_id: &str, class_name: &str, n_variants: usize) -> Option<&[String]> {
        let key = CacheKey {
            llm_id: llm_id.to_string(),
            class_name: class_name.to_string(),
            n_variants,
        };
        self.entries.get(&key).map(|e| e.descriptions.as_slice())
    }

    pub fn insert(&mut self, llm_id: &str, class_name: &str, n_variants: usize, descriptions: Vec<String>) {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let key = CacheKey {
            llm_id: llm_id.to_string(),
            class_name: class_name.to_string(),
            n_variants,
        };
        let entry = CacheEntry {
            llm_id: key.llm_id.clone(),
            class_name: key.class_name.clone(),
            n_variants,
            descriptions,
            timestamp,
        };
        self.entries.insert(key, entry);
    }

    pub fn to_json(&self) -> String {
        let file = CacheFile {
            entries: self.entries.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("cache serializes")
    }

    /// Writes the cache to its path; no-op for in-memory caches.
    pub fn save(&self) -> Result<()> {
        if let Some(path) = &self.path {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, self.to_json())?;
            fs::rename(&tmp, path)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchConfig {
    pub n_variants: usize,
    pub fallback_enabled: bool,
}

impl Default for FetchConfig {
    fn default() -> Self {
        Self {
            n_variants: DEFAULT_N_VARIANTS,
            fallback_enabled: true,
        }
    }
}

/// Cache first, then the generator (persisting its answer), then the
/// fallback template when allowed.
pub fn fetch_variants(
    class_id: u32,
    class_name: &str,
    cfg: &FetchConfig,
    generator: &dyn VariantGenerator,
    cache: &mut VariantCache,
) -> Result<SemanticVariantSet> {
    let name = class_name.trim();
    if name.is_empty() {
        return Err(MpaError::EmptyClassName);
    }
    let llm_id = generator.llm_id();
    if let Some(descriptions) = cache.get(&llm_id, name, cfg.n_variants) {
        return Ok(SemanticVariantSet {
            class_id,
            class_name: name.to_string(),
            descriptions: descriptions.to_vec(),
            source: VariantSource::CacheFile,
        });
    }
    match generator.generate_variants(name, cfg.n_variants) {
        Ok(descriptions) => {
            cache.insert(&llm_id, name, cfg.n_variants, descriptions.clone());
            cache.save()?;
            Ok(SemanticVariantSet {
                class_id,
                class_name: name.to_string(),
                descriptions,
                source: VariantSource::LlmProvider,
            })
        }
        Err(MpaError::ProviderUnavailable(msg)) if cfg.fallback_enabled => {
            warn!("variants for {name:?} fall back to template: {msg}");
            Ok(SemanticVariantSet {
                class_id,
                class_name: name.to_string(),
                descriptions: vec![fallback_description(name)],
                source: VariantSource::Fallback,
            })
        }
        Err(e) => Err(e),
    }
}

/// Tiles `v` end to end and truncates to `target_dim`.
pub fn fit_dimension(v: &EmbeddingVector, target_dim: usize) -> EmbeddingVector {
    if v.dim() == target_dim {
        return v.clone();
    }
    let values = v.as_slice().iter().copied().cycle().take(target_dim).collect();
    EmbeddingVector::new(values).expect("target_dim >= 1 and values finite")
}

pub fn semantic_features(
    variants: &SemanticVariantSet,
    encoder: &dyn TextEncoder,
    target_dim: usize,
) -> Result<Vec<LabeledEmbedding>> {
    if target_dim == 0 {
        return Err(MpaError::InvalidConfig("target_dim must be positive".into()));
    }
    if variants.descriptions.len() > usize::from(u16::MAX) {
        return Err(MpaError::InvalidConfig("too many descriptions for a u16 view id".into()));
    }
    let vectors = encoder.embed_texts(&variants.descriptions)?;
    if vectors.len() != variants.descriptions.len() {
        return Err(MpaError::ProviderContractViolation(format!(
            "text encoder returned {} vectors for {} texts",
            vectors.len(),
            variants.descriptions.len()
        )));
    }
    Ok(vectors
        .iter()
        .enumerate()
        .map(|(i, v)| LabeledEmbedding {
            class_id: variants.class_id,
            item_id: 0,
            view_id: i as u16,
            modality: Modality::Semantic,
            vector: fit_dimension(v, target_dim),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use proptest::prelude::*;

    use super::*;

    struct CountingGenerator {
        calls: AtomicUsize,
        fail: bool,
    }

    impl CountingGenerator {
        fn new(fail: bool) -> Self {
            Self {
                calls: AtomicUsize::new(0),
                fail,
            }
        }
    }

    impl VariantGenerator for CountingGenerator {
        fn llm_id(&self) -> String {
            "counting".into()
        }

        fn generate_variants(&self, class_name: &str, n_variants: usize) -> Result<Vec<String>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail {
                return Err(MpaError::ProviderUnavailable("down".into()));
            }
            Ok((0..=n_variants).map(|i| format!("{class_name} description {i}")).collect())
        }
    }

    struct FixedDimEncoder(usize);

    impl TextEncoder for FixedDimEncoder {
        fn encoder_id(&self) -> String {
            "fixed".into()
        }

        fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
            Ok(texts
                .iter()
                .map(|t| {
                    let seed = t.len() as f64;
                    EmbeddingVector::new((0..self.0).map(|i| seed + i as f64).collect()).unwrap()
                })
                .collect())
        }
    }

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn prompt_text() {
        assert_eq!(
            build_prompt("sparrow").unwrap(),
            "Please generate an appearance description for sparrow, with four paraphrased variants."
        );
        assert_eq!(build_prompt("  oak tree ").unwrap(), build_prompt("oak tree").unwrap());
        assert!(matches!(build_prompt(""), Err(MpaError::EmptyClassName)));
        assert!(matches!(build_prompt("   "), Err(MpaError::EmptyClassName)));
    }

    #[test]
    fn fit_dimension_cases() {
        let v = ev(&[1.0, 2.0]);
        assert_eq!(fit_dimension(&v, 2), v);
        assert_eq!(fit_dimension(&v, 5), ev(&[1.0, 2.0, 1.0, 2.0, 1.0]));
        assert_eq!(fit_dimension(&ev(&[1.0, 2.0, 3.0]), 2), ev(&[1.0, 2.0]));
    }

    #[test]
    fn fit_512_to_768_tiles() {
        let v = ev(&(0..512).map(f64::from).collect::<Vec<_>>());
        let f = fit_dimension(&v, 768);
        assert_eq!(f.dim(), 768);
        assert_eq!(f.as_slice()[511], 511.0);
        assert_eq!(f.as_slice()[512], 0.0);
        assert_eq!(f.as_slice()[767], 255.0);
    }

    #[test]
    fn fetch_uses_provider_then_cache() {
        let gen = CountingGenerator::new(false);
        let mut cache = VariantCache::in_memory();
        let cfg = FetchConfig::default();
        let first = fetch_variants(2, "oak tree", &cfg, &gen, &mut cache).unwrap();
        assert_eq!(first.source, VariantSource::LlmProvider);
        assert_eq!(first.descriptions.len(), 5);
        let second = fetch_variants(2, "oak tree", &cfg, &gen, &mut cache).unwrap();
        assert_eq!(second.source, VariantSource::CacheFile);
        assert_eq!(second.descriptions, first.descriptions);
        assert_eq!(gen.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn cache_keyed_by_llm() {
        let mut cache = VariantCache::in_memory();
        cache.insert("gpt", "cat", 4, vec!["x".into()]);
        assert!(cache.get("gpt", "cat", 4).is_some());
        assert!(cache.get("other", "cat", 4).is_none());
        assert!(cache.get("gpt", "cat", 3).is_none());
    }

    #[test]
    fn fallback_rules() {
        let gen = CountingGenerator::new(true);
        let mut cache = VariantCache::in_memory();
        let set = fetch_variants(0, "sparrow", &FetchConfig::default(), &gen, &mut cache).unwrap();
        assert_eq!(set.source, VariantSource::Fallback);
        assert_eq!(set.descriptions, vec!["a photo of a sparrow"]);
        assert!(cache.is_empty());
        let strict = FetchConfig {
            fallback_enabled: false,
            ..FetchConfig::default()
        };
        assert!(matches!(
            fetch_variants(0, "sparrow", &strict, &gen, &mut cache),
            Err(MpaError::ProviderUnavailable(_))
        ));
    }

    #[test]
    fn cache_persists_across_opens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("variants.json");
        let gen = CountingGenerator::new(false);
        {
            let mut cache = VariantCache::open(&path).unwrap();
            fetch_variants(0, "heron", &FetchConfig::default(), &gen, &mut cache).unwrap();
        }
        let mut cache = VariantCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        let set = fetch_variants(0, "heron", &FetchConfig::default(), &gen, &mut cache).unwrap();
        assert_eq!(set.source, VariantSource::CacheFile);
        assert_eq!(gen.calls.load(Ordering::SeqCst), 1);
        let text = fs::read_to_string(&path).unwrap();
        for field in ["llm_id", "class_name", "n_variants", "descriptions", "timestamp"] {
            assert!(text.contains(field), "{field}");
        }
    }

    #[test]
    fn semantic_rows_tagged() {
        let set = SemanticVariantSet {
            class_id: 3,
            class_name: "cat".into(),
            descriptions: (0..5).map(|i| format!("text {i}")).collect(),
            source: VariantSource::LlmProvider,
        };
        let rows = semantic_features(&set, &FixedDimEncoder(8), 8).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.modality == Modality::Semantic && r.class_id == 3 && r.item_id == 0));
        assert_eq!(rows.iter().map(|r| r.view_id).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let direct = FixedDimEncoder(8).embed_texts(&set.descriptions).unwrap();
        assert_eq!(rows[2].vector, direct[2]);
        let tiled = semantic_features(&set, &FixedDimEncoder(512), 768).unwrap();
        assert!(tiled.iter().all(|r| r.vector.dim() == 768));
    }

    #[test]
    fn hash_encoder_deterministic() {
        let enc = HashTextEncoder { dim: 64 };
        let v = enc.embed_texts(&["a photo of a cat".into(), "a photo of a cat".into(), "a dog".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        assert_ne!(v[0], v[2]);
        assert!(enc.embed_texts(&[]).is_err());
    }

    proptest! {
        #[test]
        fn fit_dimension_length(values in prop::collection::vec(-5.0f64..5.0, 1..20), target in 1usize..64) {
            let v = ev(&values);
            let f = fit_dimension(&v, target);
            prop_assert_eq!(f.dim(), target);
            for (i, x) in f.as_slice().iter().enumerate() {
                prop_assert_eq!(*x, values[i % values.len()]);
            }
        }
    }
}
