//! Plain-text table rendering for run reports.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::bank::{BankHeader, Manifest};
use crate::episodes::{AblationReport, LambdaStats, RunReport};
use crate::model::Modality;

/// Column-aligned table; the first column is left-aligned, the rest right.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "{cell:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn mib(bytes: u64) -> String {
    format!("{:.2}", bytes as f64 / (1024.0 * 1024.0))
}

fn ms(secs: f64) -> String {
    format!("{:.3}", 1000.0 * secs)
}

fn yes(on: bool) -> String {
    if on { "x" } else { "-" }.to_string()
}

pub fn eval_table(r: &RunReport) -> String {
    let lambdas = r.lambdas();
    let lambda = if lambdas.is_empty() {
        "-".to_string()
    } else {
        format!("{:.4}", lambdas.iter().sum::<f64>() / lambdas.len() as f64)
    };
    let rows = vec![vec![
        r.flags.label(),
        format!("{}-way {}-shot", r.spec.n_way, r.spec.k_shot),
        r.n_episodes.to_string(),
        pct(r.mean_accuracy),
        pct(r.ci95),
        lambda,
    ]];
    render_table(&["Config", "Task", "Episodes", "Acc(%)", "±95%", "Mean λ"], &rows)
}

pub fn ablation_table(a: &AblationReport) -> String {
    let rows: Vec<Vec<String>> = a
        .rows
        .iter()
        .map(|r| {
            vec![
                r.flags.label(),
                yes(r.flags.lmse),
                yes(r.flags.hma),
                yes(r.flags.auca),
                pct(r.mean_accuracy),
                pct(r.ci95),
            ]
        })
        .collect();
    render_table(&["Config", "LMSE", "HMA", "AUCA", "Acc(%)", "±95%"], &rows)
}

/// Per-episode stage costs in milliseconds and the memory high-water mark.
pub fn efficiency_table(reports: &[&RunReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let t = r.mean_timings();
            vec![
                r.flags.label(),
                mib(r.memory_high_water_bytes),
                ms(t.extraction),
                ms(t.augmentation),
                ms(t.semantic),
                ms(t.auca),
                ms(t.training),
                ms(t.scoring),
                ms(t.total()),
            ]
        })
        .collect();
    render_table(
        &["Config", "Mem(MiB)", "Extract", "+HMA", "+LMSE", "AUCA", "Train", "Score", "Total(ms/ep)"],
        &rows,
    )
}

pub fn lambda_table(stats: &[(String, LambdaStats)]) -> String {
    let rows: Vec<Vec<String>> = stats
        .iter()
        .map(|(name, s)| {
            vec![
                name.clone(),
                s.lambdas.len().to_string(),
                format!("{:.4}", s.mean),
                format!("{:.6}", s.variance),
            ]
        })
        .collect();
    render_table(&["Bank", "Trials", "Mean λ", "Variance"], &rows)
}

pub fn inspect_text(header: &BankHeader, manifest: &Manifest, counts: &BTreeMap<Modality, usize>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "dim           {}", header.dim);
    let _ = writeln!(s, "records       {}", header.record_count);
    let _ = writeln!(s, "dataset       {}", manifest.dataset_name);
    let _ = writeln!(s, "encoder       {}", manifest.encoder_id);
    let _ = writeln!(s, "classes       {}", manifest.class_names.len());
    for (k, v) in &manifest.metadata {
        let _ = writeln!(s, "meta.{k:<8} {v}");
    }
    let rows: Vec<Vec<String>> = counts.iter().map(|(m, n)| vec![m.to_string(), n.to_string()]).collect();
    s.push('\n');
    s.push_str(&render_table(&["Modality", "Records"], &rows));
    s
}
