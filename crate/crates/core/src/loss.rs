//! Boundary-weighted BCE + IoU loss with deep supervision.

use crate::error::{Error, Result};
use crate::model::Prediction;
use crate::tensor::Tensor;

/// Window radius of the boundary weight at the reference 352-pixel scale.
pub const REFERENCE_RADIUS: f64 = 15.0;
pub const REFERENCE_SIZE: f64 = 352.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the IoU term.
    pub lambda_iou: f64,
    /// Weight of the BCE term.
    pub lambda_bce: f64,
    /// Box-filter radius; `None` scales the reference radius to the mask height.
    pub radius: Option<usize>,
    /// Boundary weight amplitude.
    pub amplitude: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_iou: 1.0,
            lambda_bce: 1.0,
            radius: None,
            amplitude: 5.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_iou) || !ok(self.lambda_bce) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.lambda_iou == 0.0 && self.lambda_bce == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        if !ok(self.amplitude) {
            return Err(Error::Config(
                "boundary amplitude must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn radius_for(&self, h: usize) -> usize {
        self.radius.unwrap_or_else(|| scaled_radius(h))
    }
}

/// `max(2, round(15 * h / 352))`.
pub fn scaled_radius(h: usize) -> usize {
    ((REFERENCE_RADIUS * h as f64 / REFERENCE_SIZE).round() as usize).max(2)
}

fn check_binary(op: &'static str, g: &Tensor) -> Result<()> {
    if g.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(op, "mask values must be 0 or 1"));
    }
    Ok(())
}

/// Mean of each plane over a `(2r+1)^2` window clipped to the image, so
/// the divisor counts only in-bounds pixels.
pub fn box_mean(x: &Tensor, r: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Vec::with_capacity(x.numel());
    let stride = w + 1;
    for plane in x.data().chunks(h * w) {
        let mut integral = vec![0.0; (h + 1) * stride];
        for i in 0..h {
            let mut row = 0.0;
            for j in 0..w {
                row += plane[i * w + j];
                integral[(i + 1) * stride + j + 1] = integral[i * stride + j + 1] + row;
            }
        }
        for i in 0..h {
            let (y0, y1) = (i.saturating_sub(r), (i + r + 1).min(h));
            for j in 0..w {
                let (x0, x1) = (j.saturating_sub(r), (j + r + 1).min(w));
                let sum = integral[y1 * stride + x1]
                    - integral[y0 * stride + x1]
                    - integral[y1 * stride + x0]
                    + integral[y0 * stride + x0];
                out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::new([n, c, h, w], out).expect("shape preserved")
}

/// `1 + amplitude * |box_mean_r(g) - g|`.
pub fn pixel_weights(g: &Tensor, radius: usize, amplitude: f64) -> Result<Tensor> {
    check_binary("pixel_weights", g)?;
    let mean = box_mean(g, radius);
    let data = mean
        .data()
        .iter()
        .zip(g.data())
        .map(|(m, v)| 1.0 + amplitude * (m - v).abs())
        .collect();
    Tensor::new(g.shape(), data)
}

fn check_pair(op: &'static str, s: &Tensor, g: &Tensor) -> Result<()> {
    if s.shape() != g.shape() || s.shape()[1] != 1 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.shape(),
            rhs: g.shape(),
        });
    }
    Ok(())
}

/// Per-sample weighted BCE, `sum(w * bce) / sum(w)`, shape `(n, 1, 1, 1)`.
pub fn weighted_bce(s: &Tensor, g: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_pair("weighted_bce", s, g)?;
    // softplus(s) - s*g is the logistic loss written stably in logits
    let bce = s.softplus()?.sub(&s.mul(g)?)?;
    w.mul(&bce)?.sum_spatial()?.div(&w.sum_spatial()?)
}

/// Per-sample weighted IoU loss,
/// `1 - (sum(w p g) + 1) / (sum(w (p + g - p g)) + 1)`, shape `(n, 1, 1, 1)`.
pub fn weighted_iou(s: &Tensor, g: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_pair("weighted_iou", s, g)?;
    let wp = s.sigmoid()?.mul(w)?;
    let inter = wp.mul(g)?.sum_spatial()?;
    let wg = w.mul(g)?.sum_spatial()?;
    let union = wp.sum_spatial()?.add(&wg)?.sub(&inter)?;
    inter
        .add_scalar(1.0)?
        .div(&union.add_scalar(1.0)?)?
        .one_minus()
}

/// Batch mean of `lambda_iou * wIoU + lambda_bce * wBCE`.
pub fn structure_loss(s: &Tensor, g: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    check_pair("loss", s, g)?;
    let w = pixel_weights(g, cfg.radius_for(g.shape()[2]), cfg.amplitude)?;
    let iou = weighted_iou(s, g, &w)?.scale(cfg.lambda_iou)?;
    let bce = weighted_bce(s, g, &w)?.scale(cfg.lambda_bce)?;
    iou.add(&bce)?.mean_all()
}

/// Sum of the structure loss over both side outputs.
pub fn total_loss(pred: &Prediction, g: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    structure_loss(&pred.s1, g, cfg)?.add(&structure_loss(&pred.s2, g, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(seed: u64, shape: [usize; 4]) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor::from_fn(shape, |_| rng.gen_range(-3.0..3.0));
        let g = Tensor::from_fn(shape, |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        (s, g)
    }

    #[test]
    fn radius_scaling() {
        assert_eq!(scaled_radius(352), 15);
        assert_eq!(scaled_radius(64), 3);
        assert_eq!(scaled_radius(32), 2);
    }

    #[test]
    fn constant_masks_have_unit_weights() {
        for fill in [0.0, 1.0] {
            let w = pixel_weights(&Tensor::full([1, 1, 9, 9], fill), 3, 5.0).unwrap();
            assert!(w.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn single_pixel_weight() {
        let r = 3;
        let g = Tensor::from_fn([1, 1, 15, 15], |[_, _, i, j]| {
            (i == 7 && j == 7) as u8 as f64
        });
        let w = pixel_weights(&g, r, 5.0).unwrap();
        let window = ((2 * r + 1) * (2 * r + 1)) as f64;
        let expected = 1.0 + 5.0 * (1.0 - 1.0 / window);
        assert!((w.at([0, 0, 7, 7]) - expected).abs() < 1e-12);
        assert_eq!(w.at([0, 0, 0, 0]), 1.0);
        assert!(w.data().iter().all(|&v| v >= 1.0));
    }

    #[test]
    fn non_binary_mask_rejected() {
        assert!(pixel_weights(&Tensor::full([1, 1, 2, 2], 0.5), 2, 5.0).is_err());
    }

    #[test]
    fn unit_weights_give_plain_bce() {
        let (s, g) = random_pair(1, [2, 1, 6, 6]);
        let w = Tensor::ones(s.shape());
        let got = weighted_bce(&s, &g, &w)
            .unwrap()
            .mean_all()
            .unwrap()
            .item()
            .unwrap();
        let plain: f64 = s
            .data()
            .iter()
            .zip(g.data())
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / s.numel() as f64;
        assert!((got - plain).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        let g = Tensor::from_fn([1, 1, 8, 8], |[_, _, i, _]| (i < 4) as u8 as f64);
        let s = Tensor::from_fn(
            [1, 1, 8, 8],
            |[_, _, i, _]| if i < 4 { 40.0 } else { -40.0 },
        );
        let l = structure_loss(&s, &g, &LossConfig::default())
            .unwrap()
            .item()
            .unwrap();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn total_is_sum_of_heads() {
        let (s, g) = random_pair(2, [2, 1, 8, 8]);
        let cfg = LossConfig::default();
        let single = structure_loss(&s, &g, &cfg).unwrap().item().unwrap();
        let pred = Prediction {
            s1: s.clone(),
            s2: s.clone(),
        };
        let total = total_loss(&pred, &g, &cfg).unwrap().item().unwrap();
        assert!((total - 2.0 * single).abs() < 1e-12);
        let other = Prediction {
            s1: s.clone(),
            s2: s.neg().unwrap(),
        };
        let t = total_loss(&other, &g, &cfg).unwrap().item().unwrap();
        let l2 = structure_loss(&other.s2, &g, &cfg).unwrap().item().unwrap();
        assert!(t >= single.max(l2) && single >= 0.0 && l2 >= 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda_bce = 0.0;
        cfg.lambda_iou = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lambda_iou = -1.0;
        assert!(cfg.validate().is_err());
    }
}
