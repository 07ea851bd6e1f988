//! Order-aware query selection.
//!
//! Kendall's τ between the query rankings induced by a text prompt and a
//! visual prompt, the tanh surrogate used as a training loss, and top-K
//! query selection from the two score lists.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::prompt::PromptKind;

/// Similarity of each of `N` queries against one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub values: Vec<f64>,
    pub prompt_kind: PromptKind,
}

impl QueryScores {
    pub fn new(values: Vec<f64>, prompt_kind: PromptKind) -> Result<Self> {
        check_finite("query scores", &values)?;
        Ok(Self {
            values,
            prompt_kind,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl AsRef<[f64]> for QueryScores {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauResult {
    pub tau: f64,
    pub concordant: u64,
    pub discordant: u64,
    pub n: usize,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    check_len("score lists", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::invalid(format!(
            "rank statistics need at least 2 scores, got {}",
            a.len()
        )));
    }
    check_finite("first score list", a)?;
    check_finite("second score list", b)
}

fn pair_count(n: usize) -> f64 {
    0.5 * n as f64 * (n as f64 - 1.0)
}

/// τ = (P_c − P_d) / (N(N−1)/2). Tied pairs count toward neither side but
/// stay in the denominator.
///
/// Runs in O(N log N): sort by (a, b), count tie groups, then count the
/// inversions of b with a merge sort.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<TauResult> {
    check_pair(a, b)?;
    let n = a.len();
    // Adding 0.0 folds -0.0 into 0.0 so that total_cmp agrees with `==`.
    let a: Vec<f64> = a.iter().map(|x| x + 0.0).collect();
    let mut b: Vec<f64> = b.iter().map(|x| x + 0.0).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let a: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    b = idx.iter().map(|&i| b[i]).collect();

    let tied_a = tied_pairs(&a, |x, y| x == y);
    let joint: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    let tied_both = tied_pairs(&joint, |x, y| x == y);
    let swaps = inversions(&mut b);
    let tied_b = tied_pairs(&b, |x, y| x == y);

    let untied = (n as u64 * (n as u64 - 1)) / 2 + tied_both - tied_a - tied_b;
    Ok(TauResult {
        tau: (untied as f64 - 2.0 * swaps as f64) / pair_count(n),
        concordant: untied - swaps,
        discordant: swaps,
        n,
    })
}

/// Pairs inside runs of consecutive equal elements.
fn tied_pairs<T>(sorted: &[T], eq: impl Fn(&T, &T) -> bool) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if eq(&w[0], &w[1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` and returns the number of strictly inverted pairs.
fn inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = inversions(&mut v[..mid]) + inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            count += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    count
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderLoss {
    pub loss: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// `−Σ_{i>j} tanh(a_i − a_j)·tanh(b_i − b_j) / (N(N−1)/2)` with its gradient.
pub fn order_loss(a: &[f64], b: &[f64]) -> Result<OrderLoss> {
    check_pair(a, b)?;
    let n = a.len();
    let norm = pair_count(n);
    let mut sum = 0.0;
    let mut grad_a = vec![0.0; n];
    let mut grad_b = vec![0.0; n];
    for i in 1..n {
        for j in 0..i {
            let ta = (a[i] - a[j]).tanh();
            let tb = (b[i] - b[j]).tanh();
            sum += ta * tb;
            let da = (1.0 - ta * ta) * tb / norm;
            let db = (1.0 - tb * tb) * ta / norm;
            grad_a[i] -= da;
            grad_a[j] += da;
            grad_b[i] -= db;
            grad_b[j] += db;
        }
    }
    Ok(OrderLoss {
        loss: -sum / norm,
        grad_a,
        grad_b,
    })
}

/// `−order_loss(scale·a, scale·b)`; approaches the exact τ as the scale grows
/// when neither list has ties.
pub fn soft_tau_convergence(a: &[f64], b: &[f64], scale: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !scale.is_finite() {
        return Err(Error::invalid(format!("scale must be finite, got {scale}")));
    }
    if has_ties(a) {
        return Err(Error::Ties("a"));
    }
    if has_ties(b) {
        return Err(Error::Ties("b"));
    }
    let sa: Vec<f64> = a.iter().map(|x| scale * x).collect();
    let sb: Vec<f64> = b.iter().map(|x| scale * x).collect();
    Ok(-order_loss(&sa, &sb)?.loss)
}

fn has_ties(values: &[f64]) -> bool {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).any(|w| w[0] == w[1])
}

/// Indices of the `k` largest `text + visual` scores, best first; equal
/// scores go to the lower index.
pub fn select_queries(text: &[f64], visual: &[f64], k: usize) -> Result<Vec<usize>> {
    select_queries_weighted(text, visual, k, 0.5)
}

/// Like [`select_queries`] with combined score `alpha·text + (1 − alpha)·visual`.
pub fn select_queries_weighted(
    text: &[f64],
    visual: &[f64],
    k: usize,
    alpha: f64,
) -> Result<Vec<usize>> {
    check_len("score lists", text.len(), visual.len())?;
    check_finite("text scores", text)?;
    check_finite("visual scores", visual)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if k > text.len() {
        return Err(Error::invalid(format!(
            "cannot select {k} queries out of {}",
            text.len()
        )));
    }
    let combined = combined_scores(text, visual, alpha);
    let mut order: Vec<usize> = (0..combined.len()).collect();
    order.sort_by(|&i, &j| match combined[j].total_cmp(&combined[i]) {
        Ordering::Equal => i.cmp(&j),
        other => other,
    });
    order.truncate(k);
    Ok(order)
}

pub fn combined_scores(text: &[f64], visual: &[f64], alpha: f64) -> Vec<f64> {
    text.iter()
        .zip(visual)
        .map(|(t, v)| alpha * t + (1.0 - alpha) * v)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescentOutcome {
    pub iterations: usize,
    pub initial_tau: f64,
    pub final_tau: f64,
    pub final_loss: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Plain gradient descent on the order loss, updating both score lists.
/// Stops early once the exact τ reaches `target_tau`.
pub fn descend_order_loss(
    a: &[f64],
    b: &[f64],
    step: f64,
    max_iters: usize,
    target_tau: f64,
) -> Result<DescentOutcome> {
    let initial_tau = kendall_tau(a, b)?.tau;
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    let mut iterations = 0;
    let mut tau = initial_tau;
    while iterations < max_iters && tau < target_tau {
        let g = order_loss(&a, &b)?;
        for (x, d) in a.iter_mut().zip(&g.grad_a) {
            *x -= step * d;
        }
        for (x, d) in b.iter_mut().zip(&g.grad_b) {
            *x -= step * d;
        }
        iterations += 1;
        tau = kendall_tau(&a, &b)?.tau;
    }
    Ok(DescentOutcome {
        iterations,
        initial_tau,
        final_tau: tau,
        final_loss: order_loss(&a, &b)?.loss,
        a,
        b,
    })
}
