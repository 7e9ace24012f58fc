//! Training objectives for the threshold-token scorer.
//!
//! For one training instance with relevant tables `T+`, irrelevant tables
//! `T-` and threshold logit `t`:
//!
//! - `L1 = -sum_{r in T+} log softmax_{T+ ∪ {t}}(r)` raises relevant tables
//!   above the threshold.
//! - `L2 = -log softmax_{T- ∪ {t}}(t)` pushes irrelevant tables below it
//!   (0 when `T-` is empty).
//! - `L_AT = alpha * L1 + beta * L2`.
//! - `L_RC` is the mean binary cross-entropy of every table logit against its
//!   relevance bit.
//! - `L_SG` is a pairwise contrastive loss on table embeddings: squared
//!   distance for tables in the same join group, squared hinge
//!   `max(0, m - d)^2` otherwise, averaged over all unordered pairs.
//! - `L_ATR = L_AT + lambda * L_RC + gamma * L_SG`.
//!
//! Gradients are derived by hand so that [`finite_difference_check`] is an
//! independent check of the formulas.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("{0}")]
    Domain(String),
}

/// One training instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBatch {
    pub table_logits: Vec<f64>,
    pub threshold_logit: f64,
    pub relevance: Vec<bool>,
    /// Empty when the scorer produced no table embeddings.
    #[serde(default)]
    pub embeddings: Vec<Vec<f64>>,
    #[serde(default)]
    pub group_labels: Vec<i64>,
}

impl LossBatch {
    pub fn validate(&self) -> Result<(), LossError> {
        let n = self.table_logits.len();
        let bad = |m: String| Err(LossError::InvalidBatch(m));
        if n == 0 {
            return bad("no tables".into());
        }
        if self.relevance.len() != n {
            return bad(format!("{} relevance bits for {n} logits", self.relevance.len()));
        }
        if !self.threshold_logit.is_finite() || self.table_logits.iter().any(|x| !x.is_finite()) {
            return bad("non-finite logit".into());
        }
        if !self.embeddings.is_empty() && self.embeddings.len() != n {
            return bad(format!("{} embeddings for {n} logits", self.embeddings.len()));
        }
        if !self.group_labels.is_empty() && self.group_labels.len() != n {
            return bad(format!("{} group labels for {n} logits", self.group_labels.len()));
        }
        if self.embeddings.iter().flatten().any(|x| !x.is_finite()) {
            return bad("non-finite embedding value".into());
        }
        Ok(())
    }

    fn relevant(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.split(true)
    }

    fn irrelevant(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.split(false)
    }

    fn split(&self, wanted: bool) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.table_logits
            .iter()
            .zip(&self.relevance)
            .enumerate()
            .filter(move |(_, (_, &rel))| rel == wanted)
            .map(|(i, (&x, _))| (i, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_rc: f64,
    pub gamma_sg: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.8,
            beta: 0.03,
            lambda_rc: 0.13,
            gamma_sg: 0.04,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let w = [self.alpha, self.beta, self.lambda_rc, self.gamma_sg];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(LossError::InvalidWeights("weights must be finite and non-negative".into()));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(LossError::InvalidWeights("margin must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    L1,
    L2,
    At,
    Rc,
    Sg,
    Atr,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::L1,
        Component::L2,
        Component::At,
        Component::Rc,
        Component::Sg,
        Component::Atr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::L1 => "l1",
            Component::L2 => "l2",
            Component::At => "at",
            Component::Rc => "rc",
            Component::Sg => "sg",
            Component::Atr => "atr",
        }
    }
}

/// Partial derivatives with the same layout as the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub table_logits: Vec<f64>,
    pub threshold_logit: f64,
    pub embeddings: Vec<Vec<f64>>,
}

impl Gradient {
    fn zeros(batch: &LossBatch) -> Self {
        Gradient {
            table_logits: vec![0.0; batch.table_logits.len()],
            threshold_logit: 0.0,
            embeddings: batch.embeddings.iter().map(|e| vec![0.0; e.len()]).collect(),
        }
    }

    fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.table_logits.iter_mut().zip(&other.table_logits) {
            *a += scale * b;
        }
        self.threshold_logit += scale * other.threshold_logit;
        for (ea, eb) in self.embeddings.iter_mut().zip(&other.embeddings) {
            for (a, b) in ea.iter_mut().zip(eb) {
                *a += scale * b;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.table_logits.clone();
        out.push(self.threshold_logit);
        out.extend(self.embeddings.iter().flatten());
        out
    }
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[y log σ(x) + (1 - y) log(1 - σ(x))]` without overflow.
fn bce_with_logit(x: f64, y: bool) -> f64 {
    let y = if y { 1.0 } else { 0.0 };
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub fn loss_l1(batch: &LossBatch) -> Result<f64, LossError> {
    Ok(l1(batch)?.0)
}

fn l1(batch: &LossBatch) -> Result<(f64, Gradient), LossError> {
    batch.validate()?;
    let pos: Vec<(usize, f64)> = batch.relevant().collect();
    if pos.is_empty() {
        return Err(LossError::Domain("L1 is undefined without relevant tables".into()));
    }
    let t = batch.threshold_logit;
    let lse = log_sum_exp(pos.iter().map(|p| p.1).chain([t]));
    let value = pos.iter().map(|&(_, x)| lse - x).sum::<f64>();
    // d/dx_j = |T+| p_j - 1, d/dt = |T+| p_t.
    let count = pos.len() as f64;
    let mut g = Gradient::zeros(batch);
    for &(i, x) in &pos {
        g.table_logits[i] = count * (x - lse).exp() - 1.0;
    }
    g.threshold_logit = count * (t - lse).exp();
    Ok((value, g))
}

pub fn loss_l2(batch: &LossBatch) -> Result<f64, LossError> {
    Ok(l2(batch)?.0)
}

fn l2(batch: &LossBatch) -> Result<(f64, Gradient), LossError> {
    batch.validate()?;
    let neg: Vec<(usize, f64)> = batch.irrelevant().collect();
    let mut g = Gradient::zeros(batch);
    if neg.is_empty() {
        return Ok((0.0, g));
    }
    let t = batch.threshold_logit;
    let lse = log_sum_exp(neg.iter().map(|p| p.1).chain([t]));
    // d/dx_j = p_j, d/dt = p_t - 1.
    for &(i, x) in &neg {
        g.table_logits[i] = (x - lse).exp();
    }
    g.threshold_logit = (t - lse).exp() - 1.0;
    Ok(((lse - t).max(0.0), g))
}

pub fn loss_at(batch: &LossBatch, weights: &LossWeights) -> Result<f64, LossError> {
    weights.validate()?;
    Ok(weights.alpha * loss_l1(batch)? + weights.beta * loss_l2(batch)?)
}

pub fn loss_rc(batch: &LossBatch) -> Result<f64, LossError> {
    Ok(rc(batch)?.0)
}

fn rc(batch: &LossBatch) -> Result<(f64, Gradient), LossError> {
    batch.validate()?;
    let n = batch.table_logits.len() as f64;
    let mut g = Gradient::zeros(batch);
    let mut total = 0.0;
    for (i, (&x, &y)) in batch.table_logits.iter().zip(&batch.relevance).enumerate() {
        total += bce_with_logit(x, y);
        g.table_logits[i] = (sigmoid(x) - if y { 1.0 } else { 0.0 }) / n;
    }
    Ok((total / n, g))
}

pub fn loss_sg(batch: &LossBatch, weights: &LossWeights) -> Result<f64, LossError> {
    weights.validate()?;
    Ok(sg(batch, weights.margin)?.0)
}

fn sg(batch: &LossBatch, margin: f64) -> Result<(f64, Gradient), LossError> {
    batch.validate()?;
    let e = &batch.embeddings;
    if e.len() < 2 {
        return Err(LossError::Domain("semantic grouping needs at least two embedded tables".into()));
    }
    if batch.group_labels.len() != e.len() {
        return Err(LossError::Domain("semantic grouping needs a group label per table".into()));
    }
    let dim = e[0].len();
    if e.iter().any(|v| v.len() != dim) {
        return Err(LossError::Domain("embeddings differ in dimension".into()));
    }
    let pairs = (e.len() * (e.len() - 1) / 2) as f64;
    let mut g = Gradient::zeros(batch);
    let mut total = 0.0;
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            let diff: Vec<f64> = e[i].iter().zip(&e[j]).map(|(a, b)| a - b).collect();
            let sq: f64 = diff.iter().map(|d| d * d).sum();
            // coefficient c with d(term)/d(e_i) = c * (e_i - e_j)
            let coeff = if batch.group_labels[i] == batch.group_labels[j] {
                total += sq;
                2.0
            } else {
                let dist = sq.sqrt();
                let gap = margin - dist;
                if gap > 0.0 {
                    total += gap * gap;
                    // undefined direction at dist = 0; take 0
                    if dist > 0.0 {
                        -2.0 * gap / dist
                    } else {
                        0.0
                    }
                } else {
                    0.0
                }
            };
            for (k, d) in diff.iter().enumerate() {
                g.embeddings[i][k] += coeff * d / pairs;
                g.embeddings[j][k] -= coeff * d / pairs;
            }
        }
    }
    Ok((total / pairs, g))
}

/// Combined objective. A component whose weight is zero contributes nothing,
/// even when its preconditions fail, and a single-table batch has no pairs
/// for the grouping term to average over.
pub fn loss_atr(batch: &LossBatch, weights: &LossWeights) -> Result<f64, LossError> {
    Ok(atr(batch, weights)?.0)
}

fn atr(batch: &LossBatch, weights: &LossWeights) -> Result<(f64, Gradient), LossError> {
    weights.validate()?;
    batch.validate()?;
    let mut value = 0.0;
    let mut g = Gradient::zeros(batch);
    let terms: [(f64, &dyn Fn() -> Result<(f64, Gradient), LossError>); 4] = [
        (weights.alpha, &|| l1(batch)),
        (weights.beta, &|| l2(batch)),
        (weights.lambda_rc, &|| rc(batch)),
        (weights.gamma_sg, &|| sg(batch, weights.margin)),
    ];
    let single_table = batch.table_logits.len() < 2;
    for (i, (w, term)) in terms.into_iter().enumerate() {
        if w == 0.0 || (i == 3 && single_table) {
            continue;
        }
        let (v, tg) = term()?;
        value += w * v;
        g.add_scaled(&tg, w);
    }
    Ok((value, g))
}

fn evaluate(batch: &LossBatch, weights: &LossWeights, which: Component) -> Result<(f64, Gradient), LossError> {
    match which {
        Component::L1 => l1(batch),
        Component::L2 => l2(batch),
        Component::At => {
            weights.validate()?;
            let (a, ga) = l1(batch)?;
            let (b, gb) = l2(batch)?;
            let mut g = Gradient::zeros(batch);
            g.add_scaled(&ga, weights.alpha);
            g.add_scaled(&gb, weights.beta);
            Ok((weights.alpha * a + weights.beta * b, g))
        }
        Component::Rc => rc(batch),
        Component::Sg => {
            weights.validate()?;
            sg(batch, weights.margin)
        }
        Component::Atr => atr(batch, weights),
    }
}

pub fn loss(batch: &LossBatch, weights: &LossWeights, which: Component) -> Result<f64, LossError> {
    Ok(evaluate(batch, weights, which)?.0)
}

/// Analytic gradient of the selected loss with respect to table logits,
/// threshold logit and embeddings.
pub fn grad_loss(batch: &LossBatch, weights: &LossWeights, which: Component) -> Result<Gradient, LossError> {
    Ok(evaluate(batch, weights, which)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, FD_RELATIVE_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub parameters: usize,
}

/// Denominator floor for the relative error. Central differences carry
/// rounding noise of about `eps * |loss| / h` (~1e-10 at h = 1e-5), so
/// relative error is meaningless for partials much smaller than this.
pub const FD_RELATIVE_FLOOR: f64 = 1e-5;

fn perturbed(batch: &LossBatch, k: usize, delta: f64) -> LossBatch {
    let mut b = batch.clone();
    let n = b.table_logits.len();
    if k < n {
        b.table_logits[k] += delta;
    } else if k == n {
        b.threshold_logit += delta;
    } else {
        let mut rest = k - n - 1;
        for e in b.embeddings.iter_mut() {
            if rest < e.len() {
                e[rest] += delta;
                break;
            }
            rest -= e.len();
        }
    }
    b
}

/// Compares the analytic gradient of `which` against central differences
/// `(f(x + h) - f(x - h)) / 2h` over every scalar parameter.
pub fn finite_difference_check(
    batch: &LossBatch,
    weights: &LossWeights,
    which: Component,
    h: f64,
) -> Result<FdReport, LossError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(LossError::Domain("finite-difference step must be positive".into()));
    }
    let analytic = grad_loss(batch, weights, which)?.flatten();
    let mut report = FdReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        parameters: analytic.len(),
    };
    for (k, &a) in analytic.iter().enumerate() {
        let plus = loss(&perturbed(batch, k, h), weights, which)?;
        let minus = loss(&perturbed(batch, k, -h), weights, which)?;
        let numeric = (plus - minus) / (2.0 * h);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(FD_RELATIVE_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    Ok(report)
}
