//! Turns labeled images into bank records: raw embeddings, augmented views
//! and semantic variant embeddings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;

use crate::bank::Manifest;
use crate::error::{MpaError, Result};
use crate::hma::{embed_views, generate_views, ImageEncoder, Raster, ViewPlan};
use crate::lmse::{fetch_variants, semantic_features, FetchConfig, TextEncoder, VariantCache, VariantGenerator, VariantSource};
use crate::model::{LabeledEmbedding, Modality};
use crate::rng::{stream, StreamTag};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub class_id: u32,
    pub item_id: u32,
    pub raster: Raster,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtractOptions {
    /// Augmented views to embed per image; `None` stores raw embeddings only.
    pub plan: Option<ViewPlan>,
    /// Semantic variants per class; `None` skips them.
    pub semantic: Option<FetchConfig>,
    pub seed: u64,
}

pub struct SemanticSources<'a> {
    pub generator: &'a dyn VariantGenerator,
    pub encoder: &'a dyn TextEncoder,
    pub cache: &'a mut VariantCache,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExtractTimings {
    pub extraction: f64,
    pub augmentation: f64,
    pub semantic: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractOutcome {
    pub records: Vec<LabeledEmbedding>,
    pub variant_sources: BTreeMap<u32, VariantSource>,
    pub timings: ExtractTimings,
}

fn jitter_index(class_id: u32, item_id: u32) -> u64 {
    (u64::from(class_id) << 32) | u64::from(item_id)
}

pub fn extract_records(
    images: &[LabeledImage],
    manifest: &Manifest,
    encoder: &dyn ImageEncoder,
    semantic: Option<SemanticSources<'_>>,
    opts: &ExtractOptions,
) -> Result<ExtractOutcome> {
    if images.is_empty() {
        return Err(MpaError::EmptyInput("image set"));
    }
    for img in images {
        manifest.class_name(img.class_id)?;
    }
    let mut timings = ExtractTimings::default();

    let start = Instant::now();
    let rasters: Vec<&Raster> = images.iter().map(|i| &i.raster).collect();
    let raw = encoder.encode(&rasters)?;
    if raw.len() != images.len() {
        return Err(MpaError::ProviderContractViolation(format!(
            "encoder returned {} vectors for {} images",
            raw.len(),
            images.len()
        )));
    }
    let dim = raw[0].dim();
    let mut records: Vec<LabeledEmbedding> = images
        .iter()
        .zip(raw)
        .map(|(img, vector)| LabeledEmbedding {
            class_id: img.class_id,
            item_id: img.item_id,
            view_id: 0,
            modality: Modality::VisualRaw,
            vector,
        })
        .collect();
    timings.extraction = start.elapsed().as_secs_f64();

    if let Some(plan) = &opts.plan {
        let start = Instant::now();
        let per_image = images
            .par_iter()
            .map(|img| {
                let mut rng = stream(opts.seed, jitter_index(img.class_id, img.item_id), StreamTag::ViewJitter);
                let views = generate_views(&img.raster, plan, &mut rng)?;
                if views.is_empty() {
                    return Ok(Vec::new());
                }
                embed_views(img.class_id, img.item_id, &views, encoder)
            })
            .collect::<Result<Vec<_>>>()?;
        records.extend(per_image.into_iter().flatten());
        timings.augmentation = start.elapsed().as_secs_f64();
    }

    let mut variant_sources = BTreeMap::new();
    if let Some(fetch) = &opts.semantic {
        let sources = semantic.ok_or_else(|| {
            MpaError::InvalidConfig("semantic extraction requested without a variant generator".into())
        })?;
        let start = Instant::now();
        let mut classes: Vec<u32> = images.iter().map(|i| i.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        for class_id in classes {
            let name = manifest.class_name(class_id)?;
            let set = fetch_variants(class_id, name, fetch, sources.generator, sources.cache)?;
            variant_sources.insert(class_id, set.source);
            records.extend(semantic_features(&set, sources.encoder, dim)?);
        }
        timings.semantic = start.elapsed().as_secs_f64();
    }

    Ok(ExtractOutcome {
        records,
        variant_sources,
        timings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedImages {
    pub images: Vec<LabeledImage>,
    pub warnings: Vec<String>,
}

/// Reads `<dir>/<class_name>/<item>.png`. Class directories must be named
/// after manifest classes; item ids follow sorted file-name order.
pub fn load_image_dir(dir: &Path, manifest: &Manifest) -> Result<LoadedImages> {
    let by_name: BTreeMap<&str, u32> = manifest.class_names.iter().map(|(id, n)| (n.as_str(), *id)).collect();
    let mut class_dirs: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| e.path().is_dir())
        .collect();
    class_dirs.sort_by_key(|e| e.file_name());
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    let mut attempted = 0usize;
    for entry in class_dirs {
        let name = entry.file_name().to_string_lossy().into_owned();
        let class_id = *by_name.get(name.as_str()).ok_or_else(|| {
            MpaError::Format(format!("image directory {name:?} has no class name in the manifest"))
        })?;
        let mut files: Vec<_> = fs::read_dir(entry.path())?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for (item, path) in files.iter().enumerate() {
            attempted += 1;
            let decoded = fs::read(path).map_err(MpaError::from).and_then(|b| Raster::from_png(&b));
            match decoded {
                Ok(raster) => images.push(LabeledImage {
                    class_id,
                    item_id: item as u32,
                    raster,
                }),
                Err(e) => {
                    let msg = format!("skipping {}: {e}", path.display());
                    warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
    }
    if images.is_empty() {
        return Err(MpaError::InsufficientData(if attempted == 0 {
            format!("no PNG images under {}", dir.display())
        } else {
            format!("none of the {attempted} images under {} could be read", dir.display())
        }));
    }
    Ok(LoadedImages { images, warnings })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::hma::ToyEncoder;
    use crate::lmse::{HashTextEncoder, OfflineGenerator};

    fn manifest() -> Manifest {
        Manifest {
            dataset_name: "t".into(),
            encoder_id: "toy".into(),
            class_names: BTreeMap::from([(0, "cat".to_string()), (1, "dog".to_string())]),
            metadata: BTreeMap::new(),
        }
    }

    fn images() -> Vec<LabeledImage> {
        (0..2)
            .flat_map(|c| {
                (0..3).map(move |i| LabeledImage {
                    class_id: c,
                    item_id: i,
                    raster: Raster::filled(224, 224, [40 * i as u8, 100 * c as u8, 7]),
                })
            })
            .collect()
    }

    #[test]
    fn raw_only() {
        let out = extract_records(&images(), &manifest(), &ToyEncoder::default(), None, &ExtractOptions::default()).unwrap();
        assert_eq!(out.records.len(), 6);
        assert!(out.records.iter().all(|r| r.modality == Modality::VisualRaw));
    }

    #[test]
    fn with_default_views() {
        let opts = ExtractOptions {
            plan: Some(ViewPlan::default()),
            ..ExtractOptions::default()
        };
        let out = extract_records(&images(), &manifest(), &ToyEncoder::default(), None, &opts).unwrap();
        assert_eq!(out.records.len(), 66);
        let again = extract_records(&images(), &manifest(), &ToyEncoder::default(), None, &opts).unwrap();
        assert_eq!(out.records, again.records);
    }

    #[test]
    fn semantic_fallback_records() {
        let mut cache = VariantCache::in_memory();
        let enc = HashTextEncoder { dim: 64 };
        let opts = ExtractOptions {
            semantic: Some(FetchConfig::default()),
            ..ExtractOptions::default()
        };
        let sources = SemanticSources {
            generator: &OfflineGenerator,
            encoder: &enc,
            cache: &mut cache,
        };
        let out = extract_records(&images(), &manifest(), &ToyEncoder::default(), Some(sources), &opts).unwrap();
        let sem: Vec<_> = out.records.iter().filter(|r| r.modality == Modality::Semantic).collect();
        assert_eq!(sem.len(), 2);
        assert!(sem.iter().all(|r| r.vector.dim() == 192));
        assert_eq!(out.variant_sources[&0], VariantSource::Fallback);
    }

    #[test]
    fn unknown_class_rejected() {
        let mut imgs = images();
        imgs[0].class_id = 9;
        assert!(extract_records(&imgs, &manifest(), &ToyEncoder::default(), None, &ExtractOptions::default()).is_err());
    }

    #[test]
    fn directory_loading() {
        let dir = tempfile::tempdir().unwrap();
        for (name, n) in [("cat", 2), ("dog", 1)] {
            std::fs::create_dir(dir.path().join(name)).unwrap();
            for i in 0..n {
                std::fs::write(dir.path().join(name).join(format!("{i}.png")), Raster::filled(4, 4, [1, 2, 3]).to_png()).unwrap();
            }
        }
        std::fs::write(dir.path().join("dog").join("broken.png"), b"nope").unwrap();
        let loaded = load_image_dir(dir.path(), &manifest()).unwrap();
        assert_eq!(loaded.images.len(), 3);
        assert_eq!(loaded.warnings.len(), 1);
        std::fs::create_dir(dir.path().join("bird")).unwrap();
        assert!(matches!(load_image_dir(dir.path(), &manifest()), Err(MpaError::Format(_))));
    }
}
