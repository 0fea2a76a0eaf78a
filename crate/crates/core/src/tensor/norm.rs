use super::{record, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var_unbiased: Vec<f64>,
    /// Channels whose biased variance fell below 1e-12.
    pub degenerate: usize,
}

fn check_affine(op: &'static str, c: usize, scale: &Tensor, shift: &Tensor) -> Result<()> {
    for t in [scale, shift] {
        if t.shape != [1, c, 1, 1] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: [1, c, 1, 1],
                rhs: t.shape,
            });
        }
    }
    Ok(())
}

impl Tensor {
    /// Batch normalization using the statistics of this batch.
    pub fn batch_norm_train(
        &self,
        scale: &Tensor,
        shift: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, BatchStats)> {
        let [n, c, h, w] = self.shape;
        check_affine("batch_norm_train", c, scale, shift)?;
        let hw = h * w;
        let count = n * hw;
        if count < 2 {
            return Err(Error::invalid(
                "batch_norm_train",
                format!("needs at least two values per channel, got {count}"),
            ));
        }
        let x = self.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let planes = (0..n).map(|i| &x[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
            let m = planes.clone().flatten().sum::<f64>() / count as f64;
            let v = planes.flatten().map(|&v| (v - m) * (v - m)).sum::<f64>() / count as f64;
            mean[ch] = m;
            var[ch] = v;
        }
        let degenerate = var.iter().filter(|&&v| v < 1e-12).count();
        if degenerate > 0 {
            log::debug!("batch_norm_train: {degenerate} channel(s) with near-zero variance");
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let (gamma, beta) = (scale.data(), shift.data());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    let xn = (x[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xn;
                    out[k] = gamma[ch] * xn + beta[ch];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var_unbiased: var
                .iter()
                .map(|v| v * count as f64 / (count - 1) as f64)
                .collect(),
            degenerate,
        };
        let gamma = gamma.to_vec();
        let y = record(
            "batch_norm_train",
            self.shape,
            out,
            &[self, scale, shift],
            Box::new(move |g, needs| {
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for k in base..base + hw {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    let inv_count = 1.0 / count as f64;
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let k_scale = gamma[ch] * inv_std[ch];
                            let (mg, mgx) = (sum_g[ch] * inv_count, sum_gx[ch] * inv_count);
                            for k in base..base + hw {
                                gx[k] = k_scale * (g[k] - mg - xhat[k] * mgx);
                            }
                        }
                    }
                    gx
                });
                vec![gx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
            }),
        )?;
        Ok((y, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        scale: &Tensor,
        shift: &Tensor,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        check_affine("batch_norm_eval", c, scale, shift)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::invalid(
                "batch_norm_eval",
                format!(
                    "running statistics sized for {} channels, input has {c}",
                    mean.len()
                ),
            ));
        }
        let hw = h * w;
        let x = self.data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gamma, beta) = (scale.data(), shift.data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    let xn = (x[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xn;
                    out[k] = gamma[ch] * xn + beta[ch];
                }
            }
        }
        let gamma = gamma.to_vec();
        record(
            "batch_norm_eval",
            self.shape,
            out,
            &[self, scale, shift],
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; g.len()]);
                let mut g_scale = vec![0.0; c];
                let mut g_shift = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let k_scale = gamma[ch] * inv_std[ch];
                        for k in base..base + hw {
                            g_scale[ch] += g[k] * xhat[k];
                            g_shift[ch] += g[k];
                            if let Some(gx) = gx.as_mut() {
                                gx[k] = g[k] * k_scale;
                            }
                        }
                    }
                }
                vec![
                    gx.take(),
                    needs[1].then_some(g_scale),
                    needs[2].then_some(g_shift),
                ]
            }),
        )
    }

    /// Layer normalization over the channel axis at every `(n, h, w)` position.
    pub fn layer_norm(&self, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        check_affine("layer_norm", c, scale, shift)?;
        let hw = h * w;
        let x = self.data();
        let mut inv_std = vec![0.0; n * hw];
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let (gamma, beta) = (scale.data(), shift.data());
        let inv_c = 1.0 / c as f64;
        for i in 0..n {
            let sample = &x[i * c * hw..(i + 1) * c * hw];
            let mut mean = vec![0.0; hw];
            for plane in sample.chunks(hw) {
                for (m, &v) in mean.iter_mut().zip(plane) {
                    *m += v * inv_c;
                }
            }
            let mut var = vec![0.0; hw];
            for plane in sample.chunks(hw) {
                for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(plane) {
                    *s += (v - m) * (v - m) * inv_c;
                }
            }
            let istd = &mut inv_std[i * hw..(i + 1) * hw];
            for (is, v) in istd.iter_mut().zip(&var) {
                *is = 1.0 / (v + eps).sqrt();
            }
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for p in 0..hw {
                    let xn = (x[base + p] - mean[p]) * istd[p];
                    xhat[base + p] = xn;
                    out[base + p] = gamma[ch] * xn + beta[ch];
                }
            }
        }
        let gamma = gamma.to_vec();
        record(
            "layer_norm",
            self.shape,
            out,
            &[self, scale, shift],
            Box::new(move |g, needs| {
                let mut g_scale = vec![0.0; c];
                let mut g_shift = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for p in base..base + hw {
                            g_scale[ch] += g[p] * xhat[p];
                            g_shift[ch] += g[p];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for i in 0..n {
                        // dxhat = g * gamma, reduced over channels per position
                        let mut mean_d = vec![0.0; hw];
                        let mut mean_dx = vec![0.0; hw];
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for p in 0..hw {
                                let d = g[base + p] * gamma[ch];
                                mean_d[p] += d * inv_c;
                                mean_dx[p] += d * xhat[base + p] * inv_c;
                            }
                        }
                        let istd = &inv_std[i * hw..(i + 1) * hw];
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for p in 0..hw {
                                let d = g[base + p] * gamma[ch];
                                gx[base + p] =
                                    istd[p] * (d - mean_d[p] - xhat[base + p] * mean_dx[p]);
                            }
                        }
                    }
                    gx
                });
                vec![gx, needs[1].then_some(g_scale), needs[2].then_some(g_shift)]
            }),
        )
    }
}
