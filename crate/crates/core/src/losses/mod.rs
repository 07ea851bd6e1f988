//! DETR-style set losses: box and mask losses with analytic gradients,
//! Hungarian matching and the composite objective.

mod boxes;
mod hungarian;
mod masks;
mod total;

pub use boxes::{giou, giou_loss, giou_loss_raw, iou, l1_box_loss, l1_box_loss_raw, BoxXYXY};
pub use hungarian::{hungarian, Assignment, CostMatrix};
pub use masks::{bce_loss_raw, bce_mask_loss, dice_loss, dice_loss_raw, MaskGrid, BCE_CLAMP};
pub use total::{
    match_and_total_loss, pair_cost, LossBreakdown, LossInputs, LossWeights, MatchWeights,
    Prediction, Stage, Target, DEFAULT_NUM_QUERIES, DICE_EPS,
};
