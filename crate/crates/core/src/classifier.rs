//! Multinomial logistic regression trained from zero initialization.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};
use crate::model::EmbeddingVector;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Limited-memory BFGS with a backtracking line search.
    #[default]
    QuasiNewton,
    /// Steepest descent with a backtracking line search.
    GradientDescent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub l2_strength: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub optimizer: Optimizer,
    pub history_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_strength: 1.0,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            optimizer: Optimizer::QuasiNewton,
            history_size: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_strength.is_finite() && self.l2_strength >= 0.0) {
            return Err(MpaError::InvalidConfig("l2_strength must be finite and >= 0".into()));
        }
        if !(self.gradient_tolerance.is_finite() && self.gradient_tolerance > 0.0) {
            return Err(MpaError::InvalidConfig("gradient_tolerance must be positive".into()));
        }
        if self.history_size == 0 {
            return Err(MpaError::InvalidConfig("history_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRow {
    pub vector: EmbeddingVector,
    pub label: usize,
}

impl LabeledRow {
    pub fn new(vector: EmbeddingVector, label: usize) -> Self {
        Self { vector, label }
    }
}

/// Row-major weights (`n_classes × dim`) and per-class biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub n_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LogisticModel {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            biases: vec![0.0; n_classes],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn to_params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.biases);
        p
    }

    fn from_params(n_classes: usize, dim: usize, p: &[f64]) -> Self {
        let split = n_classes * dim;
        Self {
            n_classes,
            dim,
            weights: p[..split].to_vec(),
            biases: p[split..].to_vec(),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                let w = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.biases[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn probabilities(&self, v: &EmbeddingVector) -> Result<Vec<f64>> {
        if v.dim() != self.dim {
            return Err(MpaError::DimMismatch {
                expected: self.dim,
                got: v.dim(),
            });
        }
        let mut z = self.logits(v.as_slice());
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Argmax class; ties resolve to the lowest class id.
    pub fn predict(&self, v: &EmbeddingVector) -> Result<(usize, Vec<f64>)> {
        let p = self.probabilities(v)?;
        Ok((argmax(&p, None), p))
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

fn argmax(p: &[f64], skip: Option<usize>) -> usize {
    let mut best = usize::MAX;
    for (i, v) in p.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        if best == usize::MAX || *v > p[best] {
            best = i;
        }
    }
    best
}

/// Flattened training problem.
struct Problem {
    n_classes: usize,
    dim: usize,
    rows: usize,
    x: Vec<f64>,
    y: Vec<usize>,
    l2: f64,
}

impl Problem {
    fn new(rows: &[LabeledRow], n_classes: usize, l2: f64) -> Result<Self> {
        let dim = rows.first().ok_or(MpaError::EmptyInput("training rows"))?.vector.dim();
        let mut x = Vec::with_capacity(rows.len() * dim);
        let mut y = Vec::with_capacity(rows.len());
        for r in rows {
            if r.vector.dim() != dim {
                return Err(MpaError::DimMismatch {
                    expected: dim,
                    got: r.vector.dim(),
                });
            }
            if r.label >= n_classes {
                return Err(MpaError::LabelRange {
                    label: r.label,
                    n_classes,
                });
            }
            x.extend_from_slice(r.vector.as_slice());
            y.push(r.label);
        }
        Ok(Self {
            n_classes,
            dim,
            rows: rows.len(),
            x,
            y,
            l2,
        })
    }

    fn eval(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let (c_n, d) = (self.n_classes, self.dim);
        let (w, b) = params.split_at(c_n * d);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (gw, gb) = grad.split_at_mut(c_n * d);
        let mut loss = 0.0;
        let mut z = vec![0.0; c_n];
        for i in 0..self.rows {
            let xi = &self.x[i * d..(i + 1) * d];
            for c in 0..c_n {
                let wc = &w[c * d..(c + 1) * d];
                z[c] = b[c] + wc.iter().zip(xi).map(|(a, v)| a * v).sum::<f64>();
            }
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[self.y[i]];
            for c in 0..c_n {
                let mut r = (z[c] - lse).exp();
                if c == self.y[i] {
                    r -= 1.0;
                }
                gb[c] += r;
                for (g, v) in gw[c * d..(c + 1) * d].iter_mut().zip(xi) {
                    *g += r * v;
                }
            }
        }
        let inv = 1.0 / self.rows as f64;
        loss *= inv;
        gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= inv);
        let mut reg = 0.0;
        for (g, wv) in gw.iter_mut().zip(w) {
            reg += wv * wv;
            *g += self.l2 * wv;
        }
        loss + 0.5 * self.l2 * reg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Mean cross-entropy plus `(l2 / 2) ‖W‖²`; biases are not regularized.
pub fn loss_and_gradient(model: &LogisticModel, rows: &[LabeledRow], l2: f64) -> Result<(f64, Gradient)> {
    let problem = Problem::new(rows, model.n_classes, l2)?;
    if problem.dim != model.dim {
        return Err(MpaError::DimMismatch {
            expected: model.dim,
            got: problem.dim,
        });
    }
    let params = model.to_params();
    let mut grad = vec![0.0; params.len()];
    let loss = problem.eval(&params, &mut grad);
    let biases = grad.split_off(model.n_classes * model.dim);
    Ok((loss, Gradient { weights: grad, biases }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Loss at the start and after every accepted step.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub final_gradient_inf_norm: f64,
    pub converged: bool,
}

pub fn train(rows: &[LabeledRow], n_classes: usize, cfg: &TrainConfig) -> Result<LogisticModel> {
    train_traced(rows, n_classes, cfg).map(|(m, _)| m)
}

pub fn train_traced(rows: &[LabeledRow], n_classes: usize, cfg: &TrainConfig) -> Result<(LogisticModel, TrainTrace)> {
    let dim = rows.first().ok_or(MpaError::EmptyInput("training rows"))?.vector.dim();
    train_from(LogisticModel::zeros(n_classes, dim), rows, cfg)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains starting from `init`.
pub fn train_from(init: LogisticModel, rows: &[LabeledRow], cfg: &TrainConfig) -> Result<(LogisticModel, TrainTrace)> {
    cfg.validate()?;
    let problem = Problem::new(rows, init.n_classes, cfg.l2_strength)?;
    if problem.dim != init.dim {
        return Err(MpaError::DimMismatch {
            expected: init.dim,
            got: problem.dim,
        });
    }
    let mut present = vec![false; init.n_classes];
    problem.y.iter().for_each(|&y| present[y] = true);
    let distinct = present.iter().filter(|p| **p).count();
    if distinct < 2 {
        return Err(MpaError::TooFewClasses(distinct));
    }

    let n = init.param_count();
    let mut x = init.to_params();
    let mut g = vec![0.0; n];
    let mut f = problem.eval(&x, &mut g);
    if !f.is_finite() {
        return Err(MpaError::NumericalDivergence { iteration: 0 });
    }
    let mut losses = vec![f];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;

    while iterations < cfg.max_iterations && inf_norm(&g) > cfg.gradient_tolerance {
        let mut dir = match cfg.optimizer {
            Optimizer::GradientDescent => g.iter().map(|v| -v).collect::<Vec<_>>(),
            Optimizer::QuasiNewton => two_loop(&g, &history),
        };
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut step = if history.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            let f_new = problem.eval(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= f + 1e-4 * step * slope {
                accepted = Some(f_new);
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some(f_new) = accepted else {
            // No representable decrease along the search direction.
            break;
        };
        if !f_new.is_finite() || x_new.iter().any(|v| !v.is_finite()) {
            return Err(MpaError::NumericalDivergence { iteration: iterations });
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 {
            if history.len() == cfg.history_size {
                history.pop_front();
            }
            history.push_back((s, yv, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        losses.push(f);
    }

    let final_gradient_inf_norm = inf_norm(&g);
    let model = LogisticModel::from_params(init.n_classes, init.dim, &x);
    Ok((
        model,
        TrainTrace {
            losses,
            iterations,
            final_gradient_inf_norm,
            converged: final_gradient_inf_norm <= cfg.gradient_tolerance,
        },
    ))
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UncertainPolicy {
    /// A query predicted as the uncertain class counts as wrong.
    #[default]
    CountWrong,
    /// Such a query takes the best real class instead.
    FallbackSecondBest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub truth: usize,
    pub predicted: usize,
    pub final_label: usize,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub outcomes: Vec<QueryOutcome>,
    pub accuracy: f64,
    pub uncertain_predictions: usize,
}

pub fn score_queries(
    model: &LogisticModel,
    queries: &[LabeledRow],
    uncertain_label: Option<usize>,
    policy: UncertainPolicy,
) -> Result<ScoreOutcome> {
    if queries.is_empty() {
        return Err(MpaError::EmptyInput("query set"));
    }
    let mut outcomes = Vec::with_capacity(queries.len());
    let mut uncertain_predictions = 0;
    for q in queries {
        let (predicted, probs) = model.predict(&q.vector)?;
        let mut final_label = predicted;
        if Some(predicted) == uncertain_label {
            uncertain_predictions += 1;
            if policy == UncertainPolicy::FallbackSecondBest {
                final_label = argmax(&probs, uncertain_label);
            }
        }
        let correct = Some(final_label) != uncertain_label && final_label == q.label;
        outcomes.push(QueryOutcome {
            truth: q.label,
            predicted,
            final_label,
            correct,
        });
    }
    let accuracy = outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len() as f64;
    Ok(ScoreOutcome {
        outcomes,
        accuracy,
        uncertain_predictions,
    })
}
