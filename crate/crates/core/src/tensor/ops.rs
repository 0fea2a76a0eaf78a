use super::precision::note_kinks;
use super::{numel, record, Shape, Tensor};
use crate::error::{Error, Result};

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// `(1, c, 1, 1)`: one value per channel shared by the whole batch.
    Channel,
    /// `(n, c, 1, 1)`: one value per sample and channel.
    SampleChannel,
}

fn broadcast_kind(op: &'static str, a: Shape, b: Shape) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let [n, c, _, _] = a;
    match b {
        [1, bc, 1, 1] if bc == c => Ok(Broadcast::Channel),
        [bn, bc, 1, 1] if bn == n && bc == c => Ok(Broadcast::SampleChannel),
        _ => Err(Error::ShapeMismatch { op, lhs: a, rhs: b }),
    }
}

/// Index into `b` for the plane `(i, j)` of `a`.
fn plane_index(kind: Broadcast, c: usize, i: usize, j: usize) -> usize {
    match kind {
        Broadcast::Same => unreachable!(),
        Broadcast::Channel => j,
        Broadcast::SampleChannel => i * c + j,
    }
}

fn binary<F, DA, DB>(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: F,
    da: DA,
    db: DB,
) -> Result<Tensor>
where
    F: Fn(f64, f64) -> f64,
    DA: Fn(f64, f64, f64) -> f64 + Send + 'static,
    DB: Fn(f64, f64, f64) -> f64 + Send + 'static,
{
    let kind = broadcast_kind(op, a.shape, b.shape)?;
    let [n, c, h, w] = a.shape;
    let hw = h * w;
    let (ad, bd) = (a.data(), b.data());
    let out: Vec<f64> = match kind {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        _ => {
            let mut out = Vec::with_capacity(ad.len());
            for i in 0..n {
                for j in 0..c {
                    let bv = bd[plane_index(kind, c, i, j)];
                    let base = (i * c + j) * hw;
                    out.extend(ad[base..base + hw].iter().map(|&x| f(x, bv)));
                }
            }
            out
        }
    };
    let (a_arc, b_arc, b_shape) = (a.data_arc(), b.data_arc(), b.shape);
    record(
        op,
        a.shape,
        out,
        &[a, b],
        Box::new(move |g, needs| {
            let (ad, bd) = (a_arc.as_slice(), b_arc.as_slice());
            let ga = needs[0].then(|| match kind {
                Broadcast::Same => (0..g.len()).map(|k| da(ad[k], bd[k], g[k])).collect(),
                _ => {
                    let mut ga = vec![0.0; g.len()];
                    for i in 0..n {
                        for j in 0..c {
                            let bv = bd[plane_index(kind, c, i, j)];
                            let base = (i * c + j) * hw;
                            for k in base..base + hw {
                                ga[k] = da(ad[k], bv, g[k]);
                            }
                        }
                    }
                    ga
                }
            });
            let gb = needs[1].then(|| match kind {
                Broadcast::Same => (0..g.len()).map(|k| db(ad[k], bd[k], g[k])).collect(),
                _ => {
                    let mut gb = vec![0.0; numel(&b_shape)];
                    for i in 0..n {
                        for j in 0..c {
                            let bi = plane_index(kind, c, i, j);
                            let bv = bd[bi];
                            let base = (i * c + j) * hw;
                            gb[bi] += (base..base + hw).map(|k| db(ad[k], bv, g[k])).sum::<f64>();
                        }
                    }
                    gb
                }
            });
            vec![ga, gb]
        }),
    )
}

/// Elementwise map; `d(x, y, g)` receives the input, the output and the
/// upstream gradient.
fn unary<F, D>(op: &'static str, x: &Tensor, f: F, d: D) -> Result<Tensor>
where
    F: Fn(f64) -> f64,
    D: Fn(f64, f64, f64) -> f64 + Send + 'static,
{
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let x_arc = x.data_arc();
    let y_copy = out.clone();
    record(
        op,
        x.shape,
        out,
        &[x],
        Box::new(move |g, _| {
            let gx = x_arc
                .iter()
                .zip(&y_copy)
                .zip(g)
                .map(|((&xv, &yv), &gv)| d(xv, yv, gv))
                .collect();
            vec![Some(gx)]
        }),
    )
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + GELU_K * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
}

impl Tensor {
    /// `self + other`; `other` may be a `(1,c,1,1)` or `(n,c,1,1)` operand.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary("add", self, other, |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary("sub", self, other, |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            "mul",
            self,
            other,
            |a, b| a * b,
            |_, b, g| g * b,
            |a, _, g| g * a,
        )
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b, g| g / b,
            |a, b, g| -g * a / (b * b),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        unary("neg", self, |v| -v, |_, _, g| -g)
    }

    /// Reverse attention complement `1 - x`.
    pub fn one_minus(&self) -> Result<Tensor> {
        unary("one_minus", self, |v| 1.0 - v, |_, _, g| -g)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        unary("scale", self, move |v| v * k, move |_, _, g| g * k)
    }

    pub fn add_scalar(&self, k: f64) -> Result<Tensor> {
        unary("add_scalar", self, move |v| v + k, |_, _, g| g)
    }

    pub fn relu(&self) -> Result<Tensor> {
        note_kinks(self.data());
        unary(
            "relu",
            self,
            |v| v.max(0.0),
            |x, _, g| if x > 0.0 { g } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary("sigmoid", self, sigmoid_scalar, |_, y, g| g * y * (1.0 - y))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Tensor> {
        unary("gelu", self, gelu_scalar, |x, _, g| g * gelu_grad(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Tensor> {
        unary("softplus", self, softplus_scalar, |x, _, g| {
            g * sigmoid_scalar(x)
        })
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let len = self.numel();
        record(
            "sum_all",
            [1, 1, 1, 1],
            vec![total],
            &[self],
            Box::new(move |g, _| vec![Some(vec![g[0]; len])]),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let len = self.numel();
        if len == 0 {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let inv = 1.0 / len as f64;
        let total: f64 = self.data().iter().sum();
        record(
            "mean_all",
            [1, 1, 1, 1],
            vec![total * inv],
            &[self],
            Box::new(move |g, _| vec![Some(vec![g[0] * inv; len])]),
        )
    }

    /// Sums over `(h, w)`, giving `(n, c, 1, 1)`.
    pub fn sum_spatial(&self) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let out: Vec<f64> = self
            .data()
            .chunks(hw.max(1))
            .map(|p| p.iter().sum())
            .collect();
        let out = if hw == 0 { vec![0.0; n * c] } else { out };
        record(
            "sum_spatial",
            [n, c, 1, 1],
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(n * c * hw);
                for &gv in g {
                    gx.extend(std::iter::repeat(gv).take(hw));
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Reinterprets the row-major data under a new shape of equal size.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        if numel(&shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        record(
            "reshape",
            shape,
            self.to_vec(),
            &[self],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Swaps the `h` and `w` axes: `(n, c, p, q) -> (n, c, q, p)`.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let [n, c, p, q] = self.shape;
        let out = transpose_planes(self.data(), n * c, p, q);
        record(
            "transpose_last2",
            [n, c, q, p],
            out,
            &[self],
            Box::new(move |g, _| vec![Some(transpose_planes(g, n * c, q, p))]),
        )
    }

    /// Splits channels into `[0, k)` and `[k, c)`.
    pub fn split_channels(&self, k: usize) -> Result<(Tensor, Tensor)> {
        let c = self.shape[1];
        if k == 0 || k >= c {
            return Err(Error::ChannelBounds {
                op: "split_channels",
                detail: format!("split point {k} must lie strictly inside 0..{c}"),
            });
        }
        Ok((self.narrow_channels(0, k)?, self.narrow_channels(k, c - k)?))
    }

    fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            out.extend_from_slice(&self.data()[base..base + len * hw]);
        }
        record(
            "split_channels",
            [n, len, h, w],
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n * c * hw];
                for i in 0..n {
                    let dst = (i * c + start) * hw;
                    let src = i * len * hw;
                    gx[dst..dst + len * hw].copy_from_slice(&g[src..src + len * hw]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenates along the channel axis; `n`, `h`, `w` must agree.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "nothing to concatenate"))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            let [pn, _, ph, pw] = p.shape;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first.shape,
                    rhs: p.shape,
                });
            }
        }
        let hw = h * w;
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[1]).collect();
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * c * hw);
        for i in 0..n {
            for (p, &pc) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * pc * hw..(i + 1) * pc * hw]);
            }
        }
        record(
            "concat_channels",
            [n, c, h, w],
            out,
            parts,
            Box::new(move |g, needs| {
                let mut grads: Vec<Option<Vec<f64>>> = widths
                    .iter()
                    .zip(needs)
                    .map(|(&pc, &need)| need.then(|| Vec::with_capacity(n * pc * hw)))
                    .collect();
                for i in 0..n {
                    let mut offset = i * c * hw;
                    for (slot, &pc) in grads.iter_mut().zip(&widths) {
                        if let Some(buf) = slot {
                            buf.extend_from_slice(&g[offset..offset + pc * hw]);
                        }
                        offset += pc * hw;
                    }
                }
                grads
            }),
        )
    }
}

fn transpose_planes(data: &[f64], planes: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for b in 0..planes {
        let src = &data[b * p * q..(b + 1) * p * q];
        let dst = &mut out[b * p * q..(b + 1) * p * q];
        for i in 0..p {
            for j in 0..q {
                dst[j * p + i] = src[i * q + j];
            }
        }
    }
    out
}
