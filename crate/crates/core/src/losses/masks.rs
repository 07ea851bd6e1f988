use crate::error::{check_len, Error, Result};

/// Clamp applied to predictions inside the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Raster mask with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Empty("mask grid"));
        }
        check_len("mask values", height * width, values.len())?;
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "mask value {} at index {i} outside [0, 1]",
                values[i]
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Ground-truth mask from booleans.
    pub fn binary(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        Self::new(
            height,
            width,
            bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_same_dims(pred: &MaskGrid, gt: &MaskGrid) -> Result<()> {
    check_len("mask height", gt.height, pred.height)?;
    check_len("mask width", gt.width, pred.width)
}

/// `1 − (2Σpg + eps) / (Σp + Σg + eps)` and its gradient in the predictions.
pub fn dice_loss(pred: &MaskGrid, gt: &MaskGrid, eps: f64) -> Result<(f64, Vec<f64>)> {
    check_same_dims(pred, gt)?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid(format!("dice eps must be > 0, got {eps}")));
    }
    Ok(dice_loss_raw(&pred.values, &gt.values, eps))
}

pub fn dice_loss_raw(p: &[f64], g: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let num = 2.0 * p.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() + eps;
    let den = p.iter().sum::<f64>() + g.iter().sum::<f64>() + eps;
    let loss = 1.0 - num / den;
    let grad = g
        .iter()
        .map(|gk| -(2.0 * gk * den - num) / (den * den))
        .collect();
    (loss, grad)
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_mask_loss(pred: &MaskGrid, gt: &MaskGrid) -> Result<(f64, Vec<f64>)> {
    check_same_dims(pred, gt)?;
    Ok(bce_loss_raw(&pred.values, &gt.values))
}

pub fn bce_loss_raw(p: &[f64], g: &[f64]) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pk, &gk) in p.iter().zip(g) {
        let q = pk.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        loss -= gk * q.ln() + (1.0 - gk) * (1.0 - q).ln();
        let inside = pk > BCE_CLAMP && pk < 1.0 - BCE_CLAMP;
        grad.push(if inside {
            (q - gk) / (q * (1.0 - q)) / n
        } else {
            0.0
        });
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{compare_grads, finite_diff_grad, DEFAULT_FD_EPS};

    fn gt() -> MaskGrid {
        MaskGrid::binary(2, 3, &[true, false, true, true, false, false]).unwrap()
    }

    #[test]
    fn mask_validation() {
        assert!(MaskGrid::new(2, 2, vec![0.0; 3]).is_err());
        assert!(MaskGrid::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(MaskGrid::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn dice_perfect_and_empty_prediction() {
        let g = gt();
        let (loss, _) = dice_loss(&g, &g, 1e-6).unwrap();
        assert!(loss.abs() < 1e-12);
        let zero = MaskGrid::new(2, 3, vec![0.0; 6]).unwrap();
        let (loss, _) = dice_loss(&zero, &g, 1e-6).unwrap();
        assert!((loss - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dice_dim_mismatch() {
        let other = MaskGrid::new(3, 2, vec![0.0; 6]).unwrap();
        assert!(dice_loss(&other, &gt(), 1e-6).is_err());
        assert!(bce_mask_loss(&other, &gt()).is_err());
    }

    #[test]
    fn bce_perfect_and_half() {
        let g = gt();
        let (loss, _) = bce_mask_loss(&g, &g).unwrap();
        assert!(loss < 1e-6);
        let half = MaskGrid::new(2, 3, vec![0.5; 6]).unwrap();
        let (loss, _) = bce_mask_loss(&half, &g).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn mask_gradients_match_finite_differences() {
        let p = vec![0.3, 0.8, 0.55, 0.1, 0.42, 0.9];
        let g = gt();
        let (_, grad) = dice_loss_raw(&p, g.values(), 1.0);
        let num = finite_diff_grad(|x| dice_loss_raw(x, g.values(), 1.0).0, &p, DEFAULT_FD_EPS)
            .unwrap();
        assert!(compare_grads(&grad, &num).unwrap().max_rel_err < 1e-7);

        let (_, grad) = bce_loss_raw(&p, g.values());
        let num = finite_diff_grad(|x| bce_loss_raw(x, g.values()).0, &p, DEFAULT_FD_EPS).unwrap();
        assert!(compare_grads(&grad, &num).unwrap().max_rel_err < 1e-7);
    }
}
