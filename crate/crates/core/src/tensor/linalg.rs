use super::{record, Tensor};
use crate::error::{Error, Result};

/// `out[p, q] += a[p, k] * b[k, q]` for one matrix pair.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, k: usize, q: usize) {
    for i in 0..p {
        let row = &mut out[i * q..(i + 1) * q];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[kk * q..(kk + 1) * q]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[p, k] += g[p, q] * b[k, q]` (g times b transposed).
fn gemm_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], p: usize, k: usize, q: usize) {
    for i in 0..p {
        let grow = &g[i * q..(i + 1) * q];
        for kk in 0..k {
            let brow = &b[kk * q..(kk + 1) * q];
            out[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, q] += a[p, k] * g[p, q]` (a transposed times g).
fn gemm_at_acc(a: &[f64], g: &[f64], out: &mut [f64], p: usize, k: usize, q: usize) {
    for i in 0..p {
        let grow = &g[i * q..(i + 1) * q];
        for kk in 0..k {
            let av = a[i * k + kk];
            for (o, &gv) in out[kk * q..(kk + 1) * q].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl Tensor {
    /// Batched matrix product over the last two axes:
    /// `(n, c, p, k) x (n, c, k, q) -> (n, c, p, q)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [n, c, p, k] = self.shape;
        let [bn, bc, bk, q] = other.shape;
        if (n, c) != (bn, bc) || k != bk {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        let batches = n * c;
        let mut out = vec![0.0; batches * p * q];
        for b in 0..batches {
            gemm_acc(
                &self.data()[b * p * k..(b + 1) * p * k],
                &other.data()[b * k * q..(b + 1) * k * q],
                &mut out[b * p * q..(b + 1) * p * q],
                p,
                k,
                q,
            );
        }
        let (a_arc, b_arc) = (self.data_arc(), other.data_arc());
        record(
            "matmul",
            [n, c, p, q],
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; batches * p * k];
                    for b in 0..batches {
                        gemm_bt_acc(
                            &g[b * p * q..(b + 1) * p * q],
                            &b_arc[b * k * q..(b + 1) * k * q],
                            &mut ga[b * p * k..(b + 1) * p * k],
                            p,
                            k,
                            q,
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; batches * k * q];
                    for b in 0..batches {
                        gemm_at_acc(
                            &a_arc[b * p * k..(b + 1) * p * k],
                            &g[b * p * q..(b + 1) * p * q],
                            &mut gb[b * k * q..(b + 1) * k * q],
                            p,
                            k,
                            q,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Softmax along `axis` (0..4), computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis > 3 {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range"),
            ));
        }
        let len = self.shape[axis];
        if len == 0 {
            return Err(Error::invalid("softmax", "empty softmax axis"));
        }
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len)
                    .map(|j| x[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let y = out.clone();
        record(
            "softmax",
            self.shape,
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_b_is_b() {
        let eye = Tensor::from_fn([1, 1, 3, 3], |[_, _, i, j]| if i == j { 1.0 } else { 0.0 });
        let b = Tensor::from_fn([1, 1, 3, 2], |[_, _, i, j]| (i * 2 + j) as f64 - 1.5);
        assert_eq!(eye.matmul(&b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([1, 1, 2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let a = Tensor::zeros([1, 1, 2, 3]);
        let b = Tensor::zeros([1, 1, 2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let c = Tensor::full([1, 1, 1, 4], 2.5).softmax(3).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = Tensor::new([1, 1, 1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let y = x.softmax(3).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_channel_axis_normalizes_columns() {
        let x = Tensor::from_fn([2, 3, 2, 2], |[n, c, h, w]| {
            (n + 2 * c) as f64 * 0.3 - (h * w) as f64
        });
        let y = x.softmax(1).unwrap();
        for n in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let s: f64 = (0..3).map(|c| y.at([n, c, h, w])).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::new([1, 1, 1, 3], vec![1000.0, 1000.0, -1000.0]).unwrap();
        let y = x.softmax(3).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!(y.data()[2] >= 0.0);
    }
}
