use super::{record, Tensor};
use crate::error::{Error, Result};

/// Two-tap interpolation table along one axis (align-corners-false).
#[derive(Clone)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut taps = Taps {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(src - lo as f64);
        }
        taps
    }
}

impl Tensor {
    /// Bilinear resampling of the spatial axes with half-pixel centres
    /// (align-corners-false).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "resize_bilinear",
                format!("cannot resize {h}x{w} to {out_h}x{out_w}"),
            ));
        }
        if (out_h, out_w) == (h, w) {
            return self.reshape(self.shape);
        }
        let ty = Taps::new(h, out_h);
        let tx = Taps::new(w, out_w);
        let planes = n * c;
        let (hw, ohw) = (h * w, out_h * out_w);
        let x = self.data();
        let mut out = vec![0.0; planes * ohw];
        for p in 0..planes {
            let src = &x[p * hw..(p + 1) * hw];
            let dst = &mut out[p * ohw..(p + 1) * ohw];
            for oy in 0..out_h {
                let (r0, r1, fy) = (ty.lo[oy] * w, ty.hi[oy] * w, ty.frac[oy]);
                for ox in 0..out_w {
                    let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                    let top = src[r0 + c0] * (1.0 - fx) + src[r0 + c1] * fx;
                    let bottom = src[r1 + c0] * (1.0 - fx) + src[r1 + c1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        record(
            "resize_bilinear",
            [n, c, out_h, out_w],
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; planes * hw];
                for p in 0..planes {
                    let gsrc = &g[p * ohw..(p + 1) * ohw];
                    let gdst = &mut gx[p * hw..(p + 1) * hw];
                    for oy in 0..out_h {
                        let (r0, r1, fy) = (ty.lo[oy] * w, ty.hi[oy] * w, ty.frac[oy]);
                        for ox in 0..out_w {
                            let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                            let gv = gsrc[oy * out_w + ox];
                            gdst[r0 + c0] += gv * (1.0 - fy) * (1.0 - fx);
                            gdst[r0 + c1] += gv * (1.0 - fy) * fx;
                            gdst[r1 + c0] += gv * fy * (1.0 - fx);
                            gdst[r1 + c1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
