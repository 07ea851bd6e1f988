//! Normalized corner-form boxes with IoU, GIoU and L1 regression losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x1, y1, x2, y2]` in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let coords = [x1, y1, x2, y2];
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: "box coordinates",
                index: i,
            });
        }
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!(
                "box coordinates must lie in [0, 1], got {coords:?}"
            )));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::invalid(format!(
                "box corners out of order: {coords:?}"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

impl TryFrom<[f64; 4]> for BoxXYXY {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoxXYXY::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoxXYXY> for [f64; 4] {
    fn from(b: BoxXYXY) -> Self {
        b.to_array()
    }
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn intersection(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// Intersection over union. A zero-area box has IoU 0 with anything except
/// an identical box, against which it scores 1.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    if a == b {
        return 1.0;
    }
    let (a, b) = (a.to_array(), b.to_array());
    if area(&a) == 0.0 || area(&b) == 0.0 {
        return 0.0;
    }
    let inter = intersection(&a, &b);
    inter / (area(&a) + area(&b) - inter)
}

/// Generalized IoU: `IoU − (C − U) / C` with `C` the enclosing box area.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    1.0 - giou_loss_raw(&a.to_array(), &b.to_array()).0
}

/// `1 − GIoU` and its gradient with respect to the predicted corners.
pub fn giou_loss(pred: &BoxXYXY, gt: &BoxXYXY) -> (f64, [f64; 4]) {
    if pred == gt {
        return (0.0, [0.0; 4]);
    }
    giou_loss_raw(&pred.to_array(), &gt.to_array())
}

/// Unvalidated GIoU loss on raw coordinates. Ties between corners use the
/// subgradient that treats the ground-truth edge as the active one.
pub fn giou_loss_raw(p: &[f64; 4], g: &[f64; 4]) -> (f64, [f64; 4]) {
    let (pw, ph) = ((p[2] - p[0]).max(0.0), (p[3] - p[1]).max(0.0));
    let ap = pw * ph;
    let ag = area(g);

    let ix1 = p[0].max(g[0]);
    let iy1 = p[1].max(g[1]);
    let ix2 = p[2].min(g[2]);
    let iy2 = p[3].min(g[3]);
    let (iw, ih) = ((ix2 - ix1).max(0.0), (iy2 - iy1).max(0.0));
    let inter = iw * ih;

    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let enclose = cw * ch;
    if enclose <= 0.0 {
        // both boxes collapse onto the same point
        return (0.0, [0.0; 4]);
    }
    let union = ap + ag - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let loss = 2.0 - iou - union / enclose;
    if union <= 0.0 {
        return (loss, [0.0; 4]);
    }

    // loss = 2 − I/U − U/C with U = Ap + Ag − I
    let d_inter = -1.0 / union;
    let d_union = inter / (union * union) - 1.0 / enclose;
    let d_enclose = union / (enclose * enclose);

    let d_ap = [-ph, -pw, ph, pw];
    let mut d_i = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if p[0] > g[0] {
            d_i[0] = -ih;
        }
        if p[1] > g[1] {
            d_i[1] = -iw;
        }
        if p[2] < g[2] {
            d_i[2] = ih;
        }
        if p[3] < g[3] {
            d_i[3] = iw;
        }
    }
    let mut d_c = [0.0; 4];
    if p[0] < g[0] {
        d_c[0] = -ch;
    }
    if p[1] < g[1] {
        d_c[1] = -cw;
    }
    if p[2] > g[2] {
        d_c[2] = ch;
    }
    if p[3] > g[3] {
        d_c[3] = cw;
    }

    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = d_inter * d_i[k] + d_union * (d_ap[k] - d_i[k]) + d_enclose * d_c[k];
    }
    (loss, grad)
}

/// Mean absolute corner difference. The subgradient is 0 where coordinates agree.
pub fn l1_box_loss(pred: &BoxXYXY, gt: &BoxXYXY) -> (f64, [f64; 4]) {
    l1_box_loss_raw(&pred.to_array(), &gt.to_array())
}

pub fn l1_box_loss_raw(p: &[f64; 4], g: &[f64; 4]) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d = p[k] - g[k];
        loss += d.abs();
        grad[k] = if d > 0.0 {
            0.25
        } else if d < 0.0 {
            -0.25
        } else {
            0.0
        };
    }
    (loss / 4.0, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{compare_grads, finite_diff_grad, DEFAULT_FD_EPS};

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY {
        BoxXYXY::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn validation() {
        assert!(BoxXYXY::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BoxXYXY::new(0.0, 0.0, 1.2, 1.0).is_err());
        assert!(BoxXYXY::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        let parsed: BoxXYXY = serde_json::from_str("[0.1, 0.2, 0.3, 0.4]").unwrap();
        assert_eq!(parsed, b(0.1, 0.2, 0.3, 0.4));
        assert!(serde_json::from_str::<BoxXYXY>("[0.3, 0.2, 0.1, 0.4]").is_err());
    }

    #[test]
    fn iou_examples() {
        let unit = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&unit, &unit), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 0.4, 0.4), &b(0.5, 0.5, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&unit, &b(0.5, 0.0, 1.0, 1.0)), 0.5);
    }

    #[test]
    fn iou_degenerate_boxes() {
        let point = b(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&point, &point), 1.0);
        assert_eq!(iou(&point, &b(0.0, 0.0, 1.0, 1.0)), 0.0);
        let line = b(0.1, 0.1, 0.1, 0.9);
        assert_eq!(iou(&line, &b(0.0, 0.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn giou_examples() {
        let unit = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou_loss(&unit, &unit).0, 0.0);
        let (loss, _) = giou_loss(&b(0.0, 0.0, 0.5, 0.5), &b(0.5, 0.5, 1.0, 1.0));
        assert!((loss - 1.5).abs() < 1e-15);
        assert!((giou(&b(0.0, 0.0, 0.5, 0.5), &b(0.5, 0.5, 1.0, 1.0)) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn giou_gradient_on_overlapping_and_disjoint_pairs() {
        let cases = [
            ([0.1, 0.2, 0.6, 0.7], [0.3, 0.1, 0.8, 0.5]),
            ([0.3, 0.1, 0.8, 0.5], [0.1, 0.2, 0.6, 0.7]),
            ([0.05, 0.05, 0.2, 0.3], [0.6, 0.5, 0.9, 0.95]),
            ([0.2, 0.2, 0.8, 0.8], [0.3, 0.35, 0.6, 0.7]),
        ];
        for (p, g) in cases {
            let (_, grad) = giou_loss_raw(&p, &g);
            let num = finite_diff_grad(
                |x| giou_loss_raw(&[x[0], x[1], x[2], x[3]], &g).0,
                &p,
                DEFAULT_FD_EPS,
            )
            .unwrap();
            let r = compare_grads(&grad, &num).unwrap();
            assert!(r.max_rel_err < 1e-6, "{p:?} {g:?}: {r:?}");
        }
    }

    #[test]
    fn l1_examples() {
        let g = b(0.1, 0.2, 0.5, 0.6);
        assert_eq!(l1_box_loss(&g, &g), (0.0, [0.0; 4]));
        let p = b(0.2, 0.3, 0.6, 0.7);
        let (loss, grad) = l1_box_loss(&p, &g);
        assert!((loss - 0.1).abs() < 1e-12);
        assert_eq!(grad, [0.25; 4]);
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let p = [0.12, 0.55, 0.48, 0.9];
        let g = [0.2, 0.3, 0.6, 0.7];
        let (_, grad) = l1_box_loss_raw(&p, &g);
        let num = finite_diff_grad(
            |x| l1_box_loss_raw(&[x[0], x[1], x[2], x[3]], &g).0,
            &p,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(compare_grads(&grad, &num).unwrap().max_rel_err < 1e-8);
    }
}
