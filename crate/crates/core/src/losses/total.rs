//! Set matching between predictions and targets and the composite objective.
//!
//! The total is `cls + bbox + mask + align + order`; denoising loss is not part
//! of this objective.

use serde::{Deserialize, Serialize};

use super::boxes::{giou_loss, l1_box_loss, BoxXYXY};
use super::hungarian::{hungarian, CostMatrix};
use super::masks::{bce_mask_loss, dice_loss, MaskGrid, BCE_CLAMP};
use crate::align::{align_loss, AlignBatch, AlignLoss};
use crate::error::{check_len, Error, Result};
use crate::numeric::cosine;
use crate::order::order_loss;

/// Number of decoder queries kept after encoder selection.
pub const DEFAULT_NUM_QUERIES: usize = 900;
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bbox: BoxXYXY,
    /// Object embedding compared against the prompt embedding of a target.
    pub embedding: Vec<f64>,
    pub mask: Option<MaskGrid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub bbox: BoxXYXY,
    /// Prompt embedding for the target's category.
    pub embedding: Vec<f64>,
    pub mask: Option<MaskGrid>,
}

/// Weights of the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask_bce: f64,
    pub mask_dice: f64,
    pub align: f64,
    pub order: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            mask_bce: 5.0,
            mask_dice: 5.0,
            align: 1.0,
            order: 1.0,
        }
    }
}

impl LossWeights {
    /// Every term weighted 1.
    pub fn unit() -> Self {
        Self {
            cls: 1.0,
            l1: 1.0,
            giou: 1.0,
            mask_bce: 1.0,
            mask_dice: 1.0,
            align: 1.0,
            order: 1.0,
        }
    }
}

/// Training stage. `TextOnly` trains the text branch with the visual
/// components frozen: the order term is dropped and alignment gradients do
/// not reach the visual embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TextOnly,
    Joint,
}

impl Stage {
    pub fn gate_align_grads(self, loss: &mut AlignLoss) {
        if self == Stage::TextOnly {
            for g in loss.grad_visual.iter_mut().chain(loss.grad_negative.iter_mut()) {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossInputs<'a> {
    pub preds: &'a [Prediction],
    pub targets: &'a [Target],
    pub align: Option<(&'a AlignBatch, f64)>,
    /// Text and visual query scores for the order term.
    pub order: Option<(&'a [f64], &'a [f64])>,
}

/// Weighted components; `total` is their sum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub align: f64,
    pub order: f64,
    pub total: f64,
    /// `(pred, target)` pairs chosen by the matcher, sorted by prediction.
    pub matches: Vec<(usize, usize)>,
}

fn object_probability(sim: f64) -> f64 {
    (0.5 * (1.0 + sim)).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Matching cost of one prediction against one target.
pub fn pair_cost(pred: &Prediction, target: &Target, w: &MatchWeights) -> f64 {
    let sim = cosine(&pred.embedding, &target.embedding);
    w.cls * 0.5 * (1.0 - sim) + w.l1 * l1_box_loss(&pred.bbox, &target.bbox).0
        + w.giou * giou_loss(&pred.bbox, &target.bbox).0
}

pub fn match_and_total_loss(
    inputs: &LossInputs<'_>,
    match_weights: &MatchWeights,
    weights: &LossWeights,
    stage: Stage,
) -> Result<LossBreakdown> {
    let preds = inputs.preds;
    let targets = inputs.targets;
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let dim = preds[0].embedding.len();
    for e in preds.iter().map(|p| &p.embedding).chain(targets.iter().map(|t| &t.embedding)) {
        check_len("object embedding width", dim, e.len())?;
    }

    let mut matches: Vec<(usize, usize)> = if targets.is_empty() {
        Vec::new()
    } else {
        let costs: Vec<f64> = preds
            .iter()
            .flat_map(|p| targets.iter().map(move |t| pair_cost(p, t, match_weights)))
            .collect();
        hungarian(&CostMatrix::new(preds.len(), targets.len(), costs)?).pairs
    };
    matches.sort_unstable();

    // Matched predictions should score their target prompt as an object,
    // unmatched ones should score zero similarity ("no object").
    let mut cls = 0.0;
    for (i, pred) in preds.iter().enumerate() {
        let (p, y) = match matches.iter().find(|m| m.0 == i) {
            Some(&(_, j)) => (object_probability(cosine(&pred.embedding, &targets[j].embedding)), 1.0),
            None => {
                let sim = targets
                    .iter()
                    .map(|t| cosine(&pred.embedding, &t.embedding))
                    .fold(0.0, f64::max);
                (object_probability(sim), 0.0)
            }
        };
        cls -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    cls /= preds.len() as f64;

    let mut l1 = 0.0;
    let mut giou = 0.0;
    let mut bce = 0.0;
    let mut dice = 0.0;
    let mut masked = 0usize;
    for &(i, j) in &matches {
        let (p, t) = (&preds[i], &targets[j]);
        l1 += l1_box_loss(&p.bbox, &t.bbox).0;
        giou += giou_loss(&p.bbox, &t.bbox).0;
        if let (Some(pm), Some(tm)) = (&p.mask, &t.mask) {
            bce += bce_mask_loss(pm, tm)?.0;
            dice += dice_loss(pm, tm, DICE_EPS)?.0;
            masked += 1;
        }
    }
    let n_matched = matches.len().max(1) as f64;
    let n_masked = masked.max(1) as f64;

    let align = match inputs.align {
        Some((batch, temperature)) => align_loss(batch, temperature)?.loss,
        None => 0.0,
    };
    let order = match (stage, inputs.order) {
        (Stage::Joint, Some((text, visual))) => order_loss(text, visual)?.loss,
        _ => 0.0,
    };

    let cls = weights.cls * cls;
    let bbox = (weights.l1 * l1 + weights.giou * giou) / n_matched;
    let mask = (weights.mask_bce * bce + weights.mask_dice * dice) / n_masked;
    let align = weights.align * align;
    let order = weights.order * order;
    Ok(LossBreakdown {
        cls,
        bbox,
        mask,
        align,
        order,
        total: cls + bbox + mask + align + order,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(c: [f64; 4]) -> BoxXYXY {
        BoxXYXY::try_from(c).unwrap()
    }

    fn mask(bits: &[bool]) -> MaskGrid {
        MaskGrid::binary(2, 2, bits).unwrap()
    }

    fn target(c: [f64; 4], e: Vec<f64>) -> Target {
        Target {
            bbox: bx(c),
            embedding: e,
            mask: Some(mask(&[true, false, true, true])),
        }
    }

    fn pred_from(t: &Target) -> Prediction {
        Prediction {
            bbox: t.bbox,
            embedding: t.embedding.clone(),
            mask: t.mask.clone(),
        }
    }

    fn inputs<'a>(preds: &'a [Prediction], targets: &'a [Target]) -> LossInputs<'a> {
        LossInputs {
            preds,
            targets,
            align: None,
            order: None,
        }
    }

    #[test]
    fn exact_predictions_have_zero_box_and_mask_loss() {
        let targets = vec![
            target([0.1, 0.1, 0.4, 0.5], vec![1.0, 0.0]),
            target([0.5, 0.2, 0.9, 0.8], vec![0.0, 1.0]),
        ];
        let preds: Vec<Prediction> = targets.iter().rev().map(pred_from).collect();
        let b = match_and_total_loss(
            &inputs(&preds, &targets),
            &MatchWeights::default(),
            &LossWeights::default(),
            Stage::Joint,
        )
        .unwrap();
        assert_eq!(b.matches, vec![(0, 1), (1, 0)]);
        assert_eq!(b.bbox, 0.0);
        assert!(b.mask.abs() < 1e-5);
    }

    #[test]
    fn single_pair_total_is_sum_of_terms() {
        let t = target([0.5, 0.5, 1.0, 1.0], vec![1.0, 0.0]);
        let p = Prediction {
            bbox: bx([0.0, 0.0, 0.5, 0.5]),
            embedding: vec![0.6, 0.8],
            mask: Some(MaskGrid::new(2, 2, vec![0.5; 4]).unwrap()),
        };
        let w = LossWeights::unit();
        let b = match_and_total_loss(
            &inputs(std::slice::from_ref(&p), std::slice::from_ref(&t)),
            &MatchWeights::default(),
            &w,
            Stage::Joint,
        )
        .unwrap();
        let cls = -(0.5f64 * 1.6).ln();
        let l1 = 0.5;
        let giou = 1.5;
        let bce = std::f64::consts::LN_2;
        let dice = dice_loss(p.mask.as_ref().unwrap(), t.mask.as_ref().unwrap(), DICE_EPS).unwrap().0;
        assert!((b.cls - cls).abs() < 1e-12);
        assert!((b.bbox - (l1 + giou)).abs() < 1e-12);
        assert!((b.mask - (bce + dice)).abs() < 1e-12);
        assert!((b.total - (cls + l1 + giou + bce + dice)).abs() < 1e-12);
    }

    #[test]
    fn text_only_stage_drops_order_term() {
        let t = target([0.1, 0.1, 0.4, 0.5], vec![1.0, 0.0]);
        let preds = vec![pred_from(&t)];
        let text = [0.3, 0.1, 0.9];
        let visual = [0.9, 0.2, 0.1];
        let mut inp = inputs(&preds, std::slice::from_ref(&t));
        inp.order = Some((&text, &visual));
        let joint = match_and_total_loss(&inp, &MatchWeights::default(), &LossWeights::default(), Stage::Joint).unwrap();
        let text_only =
            match_and_total_loss(&inp, &MatchWeights::default(), &LossWeights::default(), Stage::TextOnly).unwrap();
        assert_ne!(joint.order, 0.0);
        assert_eq!(text_only.order, 0.0);
        assert_eq!(text_only.cls, joint.cls);
    }

    #[test]
    fn text_only_stage_freezes_visual_align_grads() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let batch = AlignBatch::from_vectors(&v, &v, &["a", "b"], "d").unwrap();
        let mut loss = align_loss(&batch, 1.0).unwrap();
        Stage::TextOnly.gate_align_grads(&mut loss);
        assert!(loss.grad_visual.iter().flatten().all(|&g| g == 0.0));
        assert!(loss.grad_text.iter().flatten().any(|&g| g != 0.0));
    }

    #[test]
    fn no_targets_means_classification_only() {
        let t = target([0.1, 0.1, 0.4, 0.5], vec![1.0, 0.0]);
        let preds = vec![pred_from(&t), pred_from(&t)];
        let b = match_and_total_loss(&inputs(&preds, &[]), &MatchWeights::default(), &LossWeights::default(), Stage::Joint)
            .unwrap();
        assert!(b.matches.is_empty());
        assert_eq!((b.bbox, b.mask), (0.0, 0.0));
        // zero similarity → p = 0.5
        assert!((b.cls - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }
}
