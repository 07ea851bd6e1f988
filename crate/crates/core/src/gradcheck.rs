//! Seeded analytic-vs-finite-difference gradient checks for every loss.
//!
//! Instances are drawn away from the non-smooth points of each loss: box
//! corners never coincide with the matching ground-truth corner, overlaps
//! never sit at the edge of becoming empty, and mask predictions stay inside
//! the clamp range.

use std::fmt;
use std::str::FromStr;

use rand::rngs::Xoshiro256PlusPlus;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::align::{align_loss_vectors, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::losses::{bce_loss_raw, dice_loss_raw, giou_loss_raw, l1_box_loss_raw, DICE_EPS};
use crate::numeric::{self, compare_grads, finite_diff_grad, l2_norm, GradCheckReport};
use crate::order::order_loss;

/// Width of alignment embeddings in generated instances.
pub const ALIGN_DIM: usize = 16;
/// Minimum distance kept from every kink of the box losses.
const KINK_MARGIN: f64 = 0.01;

type BoxLoss = fn(&[f64; 4], &[f64; 4]) -> (f64, [f64; 4]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Order,
    Align,
    Giou,
    L1,
    Dice,
    Bce,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Order,
        LossKind::Align,
        LossKind::Giou,
        LossKind::L1,
        LossKind::Dice,
        LossKind::Bce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Order => "order",
            LossKind::Align => "align",
            LossKind::Giou => "giou",
            LossKind::L1 => "l1",
            LossKind::Dice => "dice",
            LossKind::Bce => "bce",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss `{s}`")))
    }
}

/// Checks one seeded instance of size `n`: `n` scores per list for the
/// order loss, `n` pairs for alignment, `n` box pairs for GIoU and L1, `n`
/// pixels for the mask losses.
pub fn run_gradcheck(kind: LossKind, n: usize, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let min = if matches!(kind, LossKind::Order | LossKind::Align) { 2 } else { 1 };
    if n < min {
        return Err(Error::invalid(format!("{kind} gradient check needs n >= {min}, got {n}")));
    }
    let mut rng = numeric::seeded_rng(seed);
    match kind {
        LossKind::Order => {
            let a = numeric::normal_vec(&mut rng, n);
            let b = numeric::normal_vec(&mut rng, n);
            let analytic = order_loss(&a, &b)?;
            let ra = compare_grads(
                &analytic.grad_a,
                &finite_diff_grad(|x| order_loss(x, &b).map_or(f64::NAN, |r| r.loss), &a, eps)?,
            )?;
            let rb = compare_grads(
                &analytic.grad_b,
                &finite_diff_grad(|x| order_loss(&a, x).map_or(f64::NAN, |r| r.loss), &b, eps)?,
            )?;
            Ok(ra.merge(&rb))
        }
        LossKind::Align => {
            let visual = unit_vectors(&mut rng, n, ALIGN_DIM);
            let text = unit_vectors(&mut rng, n, ALIGN_DIM);
            let analytic = align_loss_vectors(&visual, &text, &[], DEFAULT_TEMPERATURE)?;
            let loss_v = |x: &[f64]| {
                align_loss_vectors(&chunks(x), &text, &[], DEFAULT_TEMPERATURE).map_or(f64::NAN, |r| r.loss)
            };
            let loss_t = |x: &[f64]| {
                align_loss_vectors(&visual, &chunks(x), &[], DEFAULT_TEMPERATURE).map_or(f64::NAN, |r| r.loss)
            };
            let rv = compare_grads(&flat(&analytic.grad_visual), &finite_diff_grad(loss_v, &flat(&visual), eps)?)?;
            let rt = compare_grads(&flat(&analytic.grad_text), &finite_diff_grad(loss_t, &flat(&text), eps)?)?;
            Ok(rv.merge(&rt))
        }
        LossKind::Giou | LossKind::L1 => {
            let loss_fn: BoxLoss = if kind == LossKind::Giou { giou_loss_raw } else { l1_box_loss_raw };
            let mut preds = Vec::with_capacity(4 * n);
            let mut gts = Vec::with_capacity(n);
            for _ in 0..n {
                let (p, g) = smooth_box_pair(&mut rng, kind == LossKind::Giou);
                preds.extend_from_slice(&p);
                gts.push(g);
            }
            let total = |x: &[f64]| -> (f64, Vec<f64>) {
                let mut loss = 0.0;
                let mut grad = Vec::with_capacity(x.len());
                for (p, g) in x.chunks(4).zip(&gts) {
                    let (l, d) = loss_fn(&[p[0], p[1], p[2], p[3]], g);
                    loss += l;
                    grad.extend_from_slice(&d);
                }
                (loss, grad)
            };
            let (_, analytic) = total(&preds);
            compare_grads(&analytic, &finite_diff_grad(|x| total(x).0, &preds, eps)?)
        }
        LossKind::Dice | LossKind::Bce => {
            let pred = numeric::uniform_vec(&mut rng, n, 0.05, 0.95);
            let mut gt: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            if kind == LossKind::Dice && gt.iter().all(|&g| g == 0.0) {
                gt[0] = 1.0;
            }
            let (analytic, numeric) = if kind == LossKind::Dice {
                (
                    dice_loss_raw(&pred, &gt, DICE_EPS).1,
                    finite_diff_grad(|x| dice_loss_raw(x, &gt, DICE_EPS).0, &pred, eps)?,
                )
            } else {
                (
                    bce_loss_raw(&pred, &gt).1,
                    finite_diff_grad(|x| bce_loss_raw(x, &gt).0, &pred, eps)?,
                )
            };
            compare_grads(&analytic, &numeric)
        }
    }
}

fn unit_vectors(rng: &mut Xoshiro256PlusPlus, k: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            let v = numeric::normal_vec(rng, dim);
            let norm = l2_norm(&v);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn flat(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn chunks(x: &[f64]) -> Vec<Vec<f64>> {
    x.chunks(ALIGN_DIM).map(<[f64]>::to_vec).collect()
}

fn random_box(rng: &mut Xoshiro256PlusPlus) -> [f64; 4] {
    let w = rng.random_range(0.1..0.6);
    let h = rng.random_range(0.1..0.6);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    [x, y, x + w, y + h]
}

/// Rejection-samples a (pred, gt) pair whose losses are differentiable with
/// room to spare for the finite-difference stencil.
fn smooth_box_pair(rng: &mut Xoshiro256PlusPlus, check_overlap: bool) -> ([f64; 4], [f64; 4]) {
    loop {
        let p = random_box(rng);
        let g = random_box(rng);
        if (0..4).any(|k| (p[k] - g[k]).abs() < KINK_MARGIN) {
            continue;
        }
        if check_overlap {
            let iw = p[2].min(g[2]) - p[0].max(g[0]);
            let ih = p[3].min(g[3]) - p[1].max(g[1]);
            if iw.abs() < KINK_MARGIN || ih.abs() < KINK_MARGIN {
                continue;
            }
        }
        return (p, g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::DEFAULT_FD_EPS;

    #[test]
    fn every_loss_passes_on_a_few_seeds() {
        for kind in LossKind::ALL {
            for seed in 0..5 {
                let r = run_gradcheck(kind, 8, seed, DEFAULT_FD_EPS).unwrap();
                assert!(r.passes(1e-4), "{kind} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("hinge".parse::<LossKind>().is_err());
    }

    #[test]
    fn rejects_too_small_instances() {
        assert!(run_gradcheck(LossKind::Order, 1, 0, DEFAULT_FD_EPS).is_err());
        assert!(run_gradcheck(LossKind::Dice, 0, 0, DEFAULT_FD_EPS).is_err());
    }
}
