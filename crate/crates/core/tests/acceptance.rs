//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use mpa_core::auca::{
    compute_lambda, generate_uncertain_with_lambda, normalize_pair_values, sample_gaussian, AucaConfig, Lambda,
    LambdaMode, SampleCount,
};
use mpa_core::bank::{decode_bank, read_bank, write_bank, Manifest};
use mpa_core::classifier::{loss_and_gradient, score_queries, train, LabeledRow, LogisticModel, TrainConfig, UncertainPolicy};
use mpa_core::episodes::{ablation_run, lambda_statistics, run_evaluation, EmbeddingBank, EngineConfig, PipelineFlags};
use mpa_core::hma::{center_crop, crop_offset, generate_views, horizontal_flip, rotate, Raster, ViewPlan};
use mpa_core::report::efficiency_table;
use mpa_core::rng::RngStream;
use mpa_core::synth::{noisy_cluster_bank, synth_bank, NoisyClusterConfig, Regime, VectorSynthConfig};
use mpa_core::{EmbeddingVector, EpisodeSpec, LabeledEmbedding, Modality};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn rng(seed: u64) -> RngStream {
    RngStream::seed_from_u64(seed)
}

fn auca_formula() -> Outcome {
    let values = [0.2, 0.5, 0.8];
    // Min-max by hand.
    let expected: Vec<f64> = values.iter().map(|v| (v - 0.2) / (0.8 - 0.2)).collect();
    let n = normalize_pair_values(&values);
    let norm_err = n
        .values
        .iter()
        .zip([0.0, 0.5, 1.0])
        .chain(n.values.iter().zip(expected))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let as_written = compute_lambda(&n, &AucaConfig::default()).map_err(|e| e.to_string())?.value;
    let pair_mean = compute_lambda(
        &n,
        &AucaConfig {
            lambda_mode: LambdaMode::PairMean,
            ..AucaConfig::default()
        },
    )
    .map_err(|e| e.to_string())?
    .value;
    check(
        norm_err <= 1e-12 && as_written.abs() <= 1e-12 && (pair_mean - 0.5).abs() <= 1e-12,
        format!("normalized err {norm_err:.1e}, as-written λ {as_written}, pair-mean λ {pair_mean}"),
    )
}

fn mixture_law() -> Outcome {
    let support: Vec<Vec<EmbeddingVector>> = (0..5)
        .map(|c| {
            (0..3)
                .map(|i| EmbeddingVector::new(vec![c as f64 + 1.0, i as f64, 1.0, -(c as f64)]).unwrap())
                .collect()
        })
        .collect();
    let cfg = AucaConfig {
        sample_count: SampleCount::Fixed(10_000),
        ..AucaConfig::default()
    };
    let mut fractions = Vec::new();
    for (i, lambda) in [0.0, 0.3, 1.0].into_iter().enumerate() {
        let batch = generate_uncertain_with_lambda(&support, Lambda { value: lambda, raw: lambda }, &cfg, &mut rng(100 + i as u64))
            .map_err(|e| e.to_string())?;
        fractions.push(batch.interpolated_count() as f64 / batch.samples.len() as f64);
    }
    let band = 3.0 * (0.21f64 / 10_000.0).sqrt();
    check(
        fractions[0] == 0.0 && (fractions[1] - 0.3).abs() <= band && fractions[2] == 1.0,
        format!("interpolated fractions {:?} (band ±{band:.4} at 0.3)", fractions),
    )
}

fn gaussian_sampler() -> Outcome {
    let mut r = rng(2024);
    let (mut n, mut sum, mut sum_sq) = (0u64, 0.0f64, 0.0f64);
    for _ in 0..100_000 {
        let v = sample_gaussian(768, &mut r).map_err(|e| e.to_string())?;
        for x in v.as_slice() {
            sum += x;
            sum_sq += x * x;
        }
        n += 768;
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    check(
        mean.abs() < 0.02 && (var - 1.0).abs() < 0.02,
        format!("{n} values from 10^5 vectors: mean {mean:.5}, variance {var:.5}"),
    )
}

fn lambda_regime() -> Outcome {
    let spec = EpisodeSpec::default();
    let cfg = EngineConfig {
        auca: AucaConfig {
            lambda_mode: LambdaMode::PairMean,
            ..AucaConfig::default()
        },
        ..EngineConfig::default()
    };
    let mut stats = BTreeMap::new();
    for regime in [Regime::Separated, Regime::Clustered] {
        let (records, manifest) = synth_bank(&VectorSynthConfig {
            regime,
            n_classes: 5,
            dim: 64,
            ..VectorSynthConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let bank = EmbeddingBank::new(records, manifest).map_err(|e| e.to_string())?;
        let s = lambda_statistics(&bank, &spec, PipelineFlags::BASELINE, &cfg, 1000).map_err(|e| e.to_string())?;
        stats.insert(regime.to_string(), (s.mean, s.variance));
    }
    let (sm, sv) = stats["separated"];
    let (cm, cv) = stats["clustered"];
    check(
        sm > cm && sv < 0.01 && cv < 0.01,
        format!("separated mean {sm:.4} var {sv:.5}; clustered mean {cm:.4} var {cv:.5}"),
    )
}

fn random_rows(r: &mut RngStream, n_classes: usize, dim: usize, n: usize) -> Vec<LabeledRow> {
    (0..n)
        .map(|i| {
            let label = if i < n_classes { i } else { r.gen_range(0..n_classes) };
            let v: Vec<f64> = (0..dim).map(|d| r.gen_range(-2.0..2.0) + if d % n_classes == label { 1.5 } else { 0.0 }).collect();
            LabeledRow::new(EmbeddingVector::new(v).unwrap(), label)
        })
        .collect()
}

fn gradient_check_worst(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = r.gen_range(2..6);
        let d = r.gen_range(1..9);
        let n = r.gen_range(c..c + 15);
        let l2 = r.gen_range(0.0..2.0);
        let rows = random_rows(&mut r, c, d, n);
        let mut m = LogisticModel::zeros(c, d);
        m.weights.iter_mut().for_each(|w| *w = r.gen_range(-1.5..1.5));
        m.biases.iter_mut().for_each(|b| *b = r.gen_range(-1.5..1.5));
        let (_, g) = loss_and_gradient(&m, &rows, l2).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = g.weights.iter().chain(&g.biases).copied().collect();
        let h = 1e-5;
        let loss_at = |m: &LogisticModel| loss_and_gradient(m, &rows, l2).map(|x| x.0).map_err(|e| e.to_string());
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let (mut p, mut q) = (m.clone(), m.clone());
            if i < m.weights.len() {
                p.weights[i] += h;
                q.weights[i] -= h;
            } else {
                p.biases[i - m.weights.len()] += h;
                q.biases[i - m.weights.len()] -= h;
            }
            numeric.push((loss_at(&p)? - loss_at(&q)?) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Damped Newton on the augmented parameterization `[W | b]` with a dense
/// Hessian and pseudo-inverse solves.
fn newton_oracle_loss(rows: &[LabeledRow], c: usize, l2: f64) -> f64 {
    let d = rows[0].vector.dim();
    let p = d + 1;
    let n = rows.len() as f64;
    let xs: Vec<DVector<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = r.vector.as_slice().to_vec();
            v.push(1.0);
            DVector::from_vec(v)
        })
        .collect();
    let eval = |theta: &DMatrix<f64>| -> (f64, DVector<f64>, DMatrix<f64>) {
        let mut loss = 0.0;
        let mut grad = DMatrix::<f64>::zeros(c, p);
        let mut hess = DMatrix::<f64>::zeros(c * p, c * p);
        for (x, r) in xs.iter().zip(rows) {
            let z = theta * x;
            let m = z.max();
            let e = z.map(|v| (v - m).exp());
            let s = e.sum();
            let prob = e / s;
            loss += m + s.ln() - z[r.label];
            for k in 0..c {
                let resid = prob[k] - if k == r.label { 1.0 } else { 0.0 };
                for j in 0..p {
                    grad[(k, j)] += resid * x[j];
                }
                for l in 0..c {
                    let w = prob[k] * (if k == l { 1.0 } else { 0.0 } - prob[l]);
                    for a in 0..p {
                        for b in 0..p {
                            hess[(k * p + a, l * p + b)] += w * x[a] * x[b];
                        }
                    }
                }
            }
        }
        loss /= n;
        grad /= n;
        hess /= n;
        for k in 0..c {
            for j in 0..d {
                loss += 0.5 * l2 * theta[(k, j)].powi(2);
                grad[(k, j)] += l2 * theta[(k, j)];
                hess[(k * p + j, k * p + j)] += l2;
            }
        }
        let g = DVector::from_iterator(c * p, (0..c).flat_map(|k| (0..p).map(move |j| (k, j))).map(|(k, j)| grad[(k, j)]));
        (loss, g, hess)
    };
    let mut theta = DMatrix::<f64>::zeros(c, p);
    let (mut f, mut g, mut h) = eval(&theta);
    for _ in 0..100 {
        if g.amax() < 1e-12 {
            break;
        }
        let step = h.clone().pseudo_inverse(1e-12).expect("svd") * &g;
        let mut t = 1.0;
        loop {
            let cand = DMatrix::from_fn(c, p, |k, j| theta[(k, j)] - t * step[k * p + j]);
            let (fc, gc, hc) = eval(&cand);
            if fc <= f - 1e-4 * t * g.dot(&step) || t < 1e-10 {
                theta = cand;
                f = fc;
                g = gc;
                h = hc;
                break;
            }
            t *= 0.5;
        }
    }
    f
}

fn classifier_correctness() -> Outcome {
    let worst = gradient_check_worst(77)?;

    let mut r = rng(5);
    let rows = random_rows(&mut r, 5, 16, 60);
    let cfg = TrainConfig::default();
    let model = train(&rows, 5, &cfg).map_err(|e| e.to_string())?;
    let ours = loss_and_gradient(&model, &rows, cfg.l2_strength).map_err(|e| e.to_string())?.0;
    let oracle = newton_oracle_loss(&rows, 5, cfg.l2_strength);

    let mut sep = Vec::new();
    for i in 0..5 {
        sep.push(LabeledRow::new(EmbeddingVector::new(vec![10.0, 0.0 + i as f64 * 0.1]).unwrap(), 0));
        sep.push(LabeledRow::new(EmbeddingVector::new(vec![-10.0, 0.0 - i as f64 * 0.1]).unwrap(), 1));
    }
    let sep_model = train(&sep, 2, &cfg).map_err(|e| e.to_string())?;
    let acc = score_queries(&sep_model, &sep, None, UncertainPolicy::CountWrong).map_err(|e| e.to_string())?.accuracy;
    check(
        worst <= 1e-5 && (ours - oracle).abs() <= 1e-4 && acc == 1.0,
        format!(
            "worst gradient rel. err {worst:.2e}; loss {ours:.8} vs oracle {oracle:.8} (|Δ| {:.1e}); separable acc {acc}",
            (ours - oracle).abs()
        ),
    )
}

fn random_raster(r: &mut RngStream, w: u32, h: u32) -> Raster {
    Raster::new(w, h, (0..w * h * 3).map(|_| r.gen()).collect()).unwrap()
}

fn transform_exactness() -> Outcome {
    let mut r = rng(9);
    let mut failures = Vec::new();
    for i in 0..20 {
        let (w, h) = (r.gen_range(1..40), r.gen_range(1..40));
        let img = random_raster(&mut r, w, h);
        let mut rot = img.clone();
        for _ in 0..4 {
            rot = rotate(&rot, 90.0).map_err(|e| e.to_string())?;
        }
        if rot.pixels() != img.pixels() || rot.width() != img.width() {
            failures.push(format!("rotate x4 #{i}"));
        }
        if horizontal_flip(&horizontal_flip(&img)).pixels() != img.pixels() {
            failures.push(format!("flip x2 #{i}"));
        }
    }
    for i in 0..50 {
        let (w, h) = (r.gen_range(1..300u32), r.gen_range(1..300u32));
        let s = r.gen_range(1..=w.min(h));
        let (ox, oy) = ((w - s) / 2, (h - s) / 2);
        if crop_offset(w, h, s) != (ox, oy) {
            failures.push(format!("offset #{i}"));
            continue;
        }
        if i < 10 {
            let img = random_raster(&mut r, w, h);
            let crop = center_crop(&img, s).map_err(|e| e.to_string())?;
            let same = (0..s).all(|y| (0..s).all(|x| crop.pixel(x, y) == img.pixel(x + ox, y + oy)));
            if !same {
                failures.push(format!("crop pixels #{i}"));
            }
        }
    }
    let views = generate_views(&Raster::filled(224, 224, [9, 9, 9]), &ViewPlan::default(), &mut rng(0))
        .map_err(|e| e.to_string())?;
    if views.len() != 10 {
        failures.push(format!("default plan gave {} views", views.len()));
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "20 rotate/flip rasters, 50 crop geometries, default plan = 10 views".into()
        } else {
            failures.join(", ")
        },
    )
}

fn noisy_bank() -> Result<EmbeddingBank, String> {
    let (records, manifest) = noisy_cluster_bank(&NoisyClusterConfig::default(), &ViewPlan::default()).map_err(|e| e.to_string())?;
    EmbeddingBank::new(records, manifest).map_err(|e| e.to_string())
}

fn ablation_direction(bank: &EmbeddingBank) -> Outcome {
    let spec = EpisodeSpec::default();
    let ab = ablation_run(bank, &spec, &EngineConfig::default(), 100, 4).map_err(|e| e.to_string())?;
    let labels: Vec<String> = ab.rows.iter().map(|r| r.flags.label()).collect();
    let structure = labels == ["---", "L--", "-H-", "LH-", "LHA"] && ab.rows.iter().all(|r| r.n_episodes == 100);
    let paired = ab
        .rows
        .iter()
        .all(|r| r.episodes.iter().zip(&ab.rows[0].episodes).all(|(a, b)| a.classes == b.classes));
    let base = ab.rows[0].mean_accuracy;
    let full = ab.rows[4].mean_accuracy;
    let detail = ab
        .rows
        .iter()
        .map(|r| format!("{} {:.4}", r.flags.label(), r.mean_accuracy))
        .collect::<Vec<_>>()
        .join(", ");
    check(full >= base && structure && paired, format!("{detail}; rows {labels:?}, paired {paired}"))
}

fn random_records(n: usize, dim: usize, seed: u64) -> Vec<LabeledEmbedding> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| LabeledEmbedding {
            class_id: r.gen_range(0..10),
            item_id: i as u32,
            view_id: r.gen(),
            modality: Modality::ALL[r.gen_range(0..5)],
            vector: EmbeddingVector::new((0..dim).map(|_| f64::from(r.gen_range(-1e3f32..1e3))).collect()).unwrap(),
        })
        .collect()
}

fn determinism_and_format(bank: &EmbeddingBank) -> Outcome {
    let spec = EpisodeSpec { seed: 7, ..EpisodeSpec::default() };
    let cfg = EngineConfig::default();
    let run = |workers| run_evaluation(bank, &spec, PipelineFlags::FULL, &cfg, 30, workers).map_err(|e| e.to_string());
    let a = run(1)?.canonical_json();
    let b = run(4)?.canonical_json();
    let c = run(4)?.canonical_json();
    let reports_equal = a == b && b == c;

    let records = random_records(1000, 12, 31);
    let manifest = Manifest {
        dataset_name: "acceptance".into(),
        encoder_id: "none".into(),
        class_names: (0..10).map(|c| (c, format!("c{c}"))).collect(),
        metadata: BTreeMap::new(),
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("rt.mpab");
    write_bank(&records, &manifest, &path).map_err(|e| e.to_string())?;
    let (back, _) = read_bank(&path).map_err(|e| e.to_string())?;
    let bits = |rs: &[LabeledEmbedding]| -> Vec<(u32, u32, u16, u8, Vec<u32>)> {
        rs.iter()
            .map(|r| (r.class_id, r.item_id, r.view_id, r.modality.code(), r.vector.as_slice().iter().map(|x| (*x as f32).to_bits()).collect()))
            .collect()
    };
    let round_trip = bits(&records) == bits(&back);

    let mut fixture = Vec::new();
    fixture.extend_from_slice(b"MPAB");
    fixture.extend_from_slice(&1u32.to_le_bytes());
    fixture.extend_from_slice(&2u32.to_le_bytes());
    fixture.extend_from_slice(&[1, 0, 0, 0]);
    fixture.extend_from_slice(&1u64.to_le_bytes());
    fixture.extend_from_slice(&[4, 0, 0, 0, 9, 0, 0, 0, 1, 0, 2, 0]);
    fixture.extend_from_slice(&0.25f32.to_le_bytes());
    fixture.extend_from_slice(&(-8.0f32).to_le_bytes());
    let parsed = decode_bank(&fixture).map_err(|e| e.to_string())?;
    let r0 = &parsed.records[0];
    let fixture_ok = parsed.dim == 2
        && parsed.records.len() == 1
        && (r0.class_id, r0.item_id, r0.view_id, r0.modality) == (4, 9, 1, Modality::VisualGeometric)
        && r0.vector.as_slice() == [0.25, -8.0];
    check(
        reports_equal && round_trip && fixture_ok,
        format!("reports identical across runs/workers {reports_equal}; 1000-record round trip {round_trip}; fixture {fixture_ok}"),
    )
}

fn efficiency_report(bank: &EmbeddingBank) -> Outcome {
    let spec = EpisodeSpec::default();
    let ab = ablation_run(bank, &spec, &EngineConfig::default(), 5, 2).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    for r in &ab.rows {
        let t = r.timings;
        let f = r.flags;
        if r.memory_high_water_bytes == 0 || t.extraction <= 0.0 || t.training <= 0.0 || t.scoring <= 0.0 {
            problems.push(format!("{}: core fields unpopulated", f.label()));
        }
        if (t.augmentation > 0.0) != f.hma || (t.semantic > 0.0) != f.lmse || (t.auca > 0.0) != f.auca {
            problems.push(format!("{}: stage additions not separated", f.label()));
        }
    }
    let table = efficiency_table(&ab.rows.iter().collect::<Vec<_>>());
    let header = table.lines().next().unwrap_or_default().to_string();
    for col in ["Mem(MiB)", "+HMA", "+LMSE", "AUCA", "Train", "Score"] {
        if !header.contains(col) {
            problems.push(format!("missing column {col}"));
        }
    }
    if table.lines().count() != 2 + ab.rows.len() {
        problems.push("table row count".into());
    }
    check(problems.is_empty(), if problems.is_empty() { header } else { problems.join("; ") })
}

struct Criterion {
    name: &'static str,
    budget: Duration,
}

fn main() {
    let mut failed = 0;
    let mut report = |c: Criterion, run: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let (ok, detail) = match outcome {
            Ok(d) => (in_budget, d),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:<28} [{:.2}s / {}s] {}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            detail
        );
    };
    let secs = Duration::from_secs;
    report(Criterion { name: "auca-formula", budget: secs(1) }, &auca_formula);
    report(Criterion { name: "mixture-law", budget: secs(5) }, &mixture_law);
    report(Criterion { name: "gaussian-sampler", budget: secs(5) }, &gaussian_sampler);
    report(Criterion { name: "lambda-regime-direction", budget: secs(30) }, &lambda_regime);
    report(Criterion { name: "classifier-correctness", budget: secs(30) }, &classifier_correctness);
    report(Criterion { name: "transform-exactness", budget: secs(5) }, &transform_exactness);

    let build = Instant::now();
    let bank = noisy_bank();
    let build_time = build.elapsed();
    match bank {
        Ok(bank) => {
            let ablation_budget = secs(120).saturating_sub(build_time);
            report(Criterion { name: "ablation-direction", budget: ablation_budget }, &|| {
                ablation_direction(&bank).map(|d| format!("{d}; bank built in {:.2}s", build_time.as_secs_f64()))
            });
            report(Criterion { name: "determinism-and-format", budget: secs(10) }, &|| determinism_and_format(&bank));
            report(Criterion { name: "efficiency-report", budget: secs(60) }, &|| efficiency_report(&bank));
        }
        Err(e) => {
            for name in ["ablation-direction", "determinism-and-format", "efficiency-report"] {
                println!("FAIL {name:<28} noisy-cluster bank: {e}");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
