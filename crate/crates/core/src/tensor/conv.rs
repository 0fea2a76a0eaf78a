use super::gemm::{gemm, Layout};
use super::{record, Shape, Tensor};
use crate::error::{Error, Result};

/// Output positions `[lo, hi)` whose input index `o * stride + k - pad` lands
/// inside `0..in_len`.
fn valid_range(
    out_len: usize,
    in_len: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn ranges(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let ys = (0..self.kh)
            .map(|ky| valid_range(self.oh, self.h, ky, self.stride, self.pad))
            .collect();
        let xs = (0..self.kw)
            .map(|kx| valid_range(self.ow, self.w, kx, self.stride, self.pad))
            .collect();
        (ys, xs)
    }
}

/// Output shape of a convolution, validating every argument.
pub(crate) fn conv_output_shape(
    x: Shape,
    weight: Shape,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Shape> {
    let [n, cin, h, w] = x;
    let [cout, cin_g, kh, kw] = weight;
    if groups == 0 || stride == 0 {
        return Err(Error::invalid(
            "conv2d",
            "groups and stride must be positive",
        ));
    }
    if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(Error::ChannelBounds {
            op: "conv2d",
            detail: format!(
                "input channels {cin}, output channels {cout}, groups {groups}, weight expects {cin_g} per group"
            ),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
        ));
    }
    Ok([
        n,
        cout,
        (h + 2 * padding - kh) / stride + 1,
        (w + 2 * padding - kw) / stride + 1,
    ])
}

impl Geometry {
    fn dense(&self) -> bool {
        self.cin_g == self.cin
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unfolds one sample `(cin, h, w)` into a `(cin*kh*kw, oh*ow)` matrix.
fn im2col(
    geo: &Geometry,
    ranges: &(Vec<(usize, usize)>, Vec<(usize, usize)>),
    xs: &[f64],
    col: &mut [f64],
) {
    let Geometry {
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
        ..
    } = *geo;
    let (ys, xr) = ranges;
    let ohw = oh * ow;
    col.fill(0.0);
    for ci in 0..geo.cin {
        let xp = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = ys[ky];
            for kx in 0..kw {
                let (ox_lo, ox_hi) = xr[kx];
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = ((ci * kh + ky) * kw + kx) * ohw;
                let ix0 = ox_lo * stride + kx - pad;
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let dst = &mut col[row + oy * ow + ox_lo..row + oy * ow + ox_hi];
                    let src = &xp[iy * w..(iy + 1) * w];
                    if stride == 1 {
                        dst.copy_from_slice(&src[ix0..ix0 + dst.len()]);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = src[ix0 + j * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the sample.
fn col2im(
    geo: &Geometry,
    ranges: &(Vec<(usize, usize)>, Vec<(usize, usize)>),
    col: &[f64],
    gx: &mut [f64],
) {
    let Geometry {
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
        ..
    } = *geo;
    let (ys, xr) = ranges;
    let ohw = oh * ow;
    for ci in 0..geo.cin {
        let gp = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = ys[ky];
            for kx in 0..kw {
                let (ox_lo, ox_hi) = xr[kx];
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = ((ci * kh + ky) * kw + kx) * ohw;
                let ix0 = ox_lo * stride + kx - pad;
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let src = &col[row + oy * ow + ox_lo..row + oy * ow + ox_hi];
                    let dst = &mut gp[iy * w..(iy + 1) * w];
                    if stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + src.len()].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            dst[ix0 + j * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn dense_forward(geo: Geometry, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (hw, ohw, k) = (geo.h * geo.w, geo.oh * geo.ow, geo.col_rows());
    let ranges = geo.ranges();
    let mut out = vec![0.0; geo.n * geo.cout * ohw];
    let mut col = if geo.pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * ohw]
    };
    for ni in 0..geo.n {
        let xs = &x[ni * geo.cin * hw..(ni + 1) * geo.cin * hw];
        let o = &mut out[ni * geo.cout * ohw..(ni + 1) * geo.cout * ohw];
        if let Some(b) = bias {
            for (plane, &bv) in o.chunks_mut(ohw).zip(b) {
                plane.fill(bv);
            }
        }
        let src = if geo.pointwise() {
            xs
        } else {
            im2col(&geo, &ranges, xs, &mut col);
            &col
        };
        gemm(
            geo.cout,
            k,
            ohw,
            wt,
            Layout::rows(k),
            src,
            Layout::rows(ohw),
            1.0,
            o,
            Layout::rows(ohw),
        );
    }
    out
}

fn dense_grad_input(geo: Geometry, g: &[f64], wt: &[f64]) -> Vec<f64> {
    let (hw, ohw, k) = (geo.h * geo.w, geo.oh * geo.ow, geo.col_rows());
    let ranges = geo.ranges();
    let mut gx = vec![0.0; geo.n * geo.cin * hw];
    let mut col = vec![0.0; k * ohw];
    for ni in 0..geo.n {
        let go = &g[ni * geo.cout * ohw..(ni + 1) * geo.cout * ohw];
        let gxs = &mut gx[ni * geo.cin * hw..(ni + 1) * geo.cin * hw];
        if geo.pointwise() {
            gemm(
                k,
                geo.cout,
                ohw,
                wt,
                Layout::transposed(k),
                go,
                Layout::rows(ohw),
                0.0,
                gxs,
                Layout::rows(hw),
            );
        } else {
            gemm(
                k,
                geo.cout,
                ohw,
                wt,
                Layout::transposed(k),
                go,
                Layout::rows(ohw),
                0.0,
                &mut col,
                Layout::rows(ohw),
            );
            col2im(&geo, &ranges, &col, gxs);
        }
    }
    gx
}

fn dense_grad_weight(geo: Geometry, g: &[f64], x: &[f64]) -> Vec<f64> {
    let (hw, ohw, k) = (geo.h * geo.w, geo.oh * geo.ow, geo.col_rows());
    let ranges = geo.ranges();
    let mut gw = vec![0.0; geo.cout * k];
    let mut col = if geo.pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * ohw]
    };
    for ni in 0..geo.n {
        let go = &g[ni * geo.cout * ohw..(ni + 1) * geo.cout * ohw];
        let xs = &x[ni * geo.cin * hw..(ni + 1) * geo.cin * hw];
        let src = if geo.pointwise() {
            xs
        } else {
            im2col(&geo, &ranges, xs, &mut col);
            &col
        };
        gemm(
            geo.cout,
            ohw,
            k,
            go,
            Layout::rows(ohw),
            src,
            Layout::transposed(ohw),
            1.0,
            &mut gw,
            Layout::rows(k),
        );
    }
    gw
}

fn forward(geo: Geometry, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    if geo.dense() {
        return dense_forward(geo, x, wt, bias);
    }
    grouped_forward(geo, x, wt, bias)
}

fn grad_input(geo: Geometry, g: &[f64], wt: &[f64]) -> Vec<f64> {
    if geo.dense() {
        return dense_grad_input(geo, g, wt);
    }
    grouped_grad_input(geo, g, wt)
}

fn grad_weight(geo: Geometry, g: &[f64], x: &[f64]) -> Vec<f64> {
    if geo.dense() {
        return dense_grad_weight(geo, g, x);
    }
    grouped_grad_weight(geo, g, x)
}

/// Direct loops for grouped convolutions such as depthwise ones.
fn grouped_forward(geo: Geometry, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let Geometry {
        n,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
    } = geo;
    let (hw, ohw) = (h * w, oh * ow);
    let (ys, xs) = geo.ranges();
    let mut out = vec![0.0; n * cout * ohw];
    for ni in 0..n {
        for co in 0..cout {
            let grp = co / cout_g;
            let o = &mut out[(ni * cout + co) * ohw..(ni * cout + co + 1) * ohw];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let xp = &x[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                let wbase = (co * cin_g + cil) * kh * kw;
                if geo.pointwise() {
                    let wv = wt[wbase];
                    for (ov, &xv) in o.iter_mut().zip(xp) {
                        *ov += wv * xv;
                    }
                    continue;
                }
                for (ky, &(oy_lo, oy_hi)) in ys.iter().enumerate() {
                    for (kx, &(ox_lo, ox_hi)) in xs.iter().enumerate() {
                        let wv = wt[wbase + ky * kw + kx];
                        if ox_lo >= ox_hi || wv == 0.0 {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        let ix0 = ox_lo * stride + kx - pad;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let orow = &mut o[oy * ow + ox_lo..oy * ow + ox_hi];
                            let xrow = &xp[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                for (ov, &xv) in orow.iter_mut().zip(&xrow[ix0..ix0 + len]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * xrow[ix0 + j * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn grouped_grad_input(geo: Geometry, g: &[f64], wt: &[f64]) -> Vec<f64> {
    let Geometry {
        n,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
    } = geo;
    let (hw, ohw) = (h * w, oh * ow);
    let (ys, xs) = geo.ranges();
    let mut gx = vec![0.0; n * cin * hw];
    for ni in 0..n {
        for ci in 0..cin {
            let grp = ci / cin_g;
            let cil = ci % cin_g;
            let gxp = &mut gx[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
            for co in grp * cout_g..(grp + 1) * cout_g {
                let gop = &g[(ni * cout + co) * ohw..(ni * cout + co + 1) * ohw];
                let wbase = (co * cin_g + cil) * kh * kw;
                if geo.pointwise() {
                    let wv = wt[wbase];
                    for (gv, &go) in gxp.iter_mut().zip(gop) {
                        *gv += wv * go;
                    }
                    continue;
                }
                for (ky, &(oy_lo, oy_hi)) in ys.iter().enumerate() {
                    for (kx, &(ox_lo, ox_hi)) in xs.iter().enumerate() {
                        let wv = wt[wbase + ky * kw + kx];
                        if ox_lo >= ox_hi || wv == 0.0 {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        let ix0 = ox_lo * stride + kx - pad;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &gop[oy * ow + ox_lo..oy * ow + ox_hi];
                            let xrow = &mut gxp[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                for (xv, &go) in xrow[ix0..ix0 + len].iter_mut().zip(grow) {
                                    *xv += wv * go;
                                }
                            } else {
                                for (j, &go) in grow.iter().enumerate() {
                                    xrow[ix0 + j * stride] += wv * go;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn grouped_grad_weight(geo: Geometry, g: &[f64], x: &[f64]) -> Vec<f64> {
    let Geometry {
        n,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
    } = geo;
    let (hw, ohw) = (h * w, oh * ow);
    let (ys, xs) = geo.ranges();
    let mut gw = vec![0.0; cout * cin_g * kh * kw];
    for co in 0..cout {
        let grp = co / cout_g;
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            let wbase = (co * cin_g + cil) * kh * kw;
            for ni in 0..n {
                let gop = &g[(ni * cout + co) * ohw..(ni * cout + co + 1) * ohw];
                let xp = &x[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                if geo.pointwise() {
                    gw[wbase] += gop.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    continue;
                }
                for (ky, &(oy_lo, oy_hi)) in ys.iter().enumerate() {
                    for (kx, &(ox_lo, ox_hi)) in xs.iter().enumerate() {
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        let ix0 = ox_lo * stride + kx - pad;
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &gop[oy * ow + ox_lo..oy * ow + ox_hi];
                            let xrow = &xp[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                acc += grow
                                    .iter()
                                    .zip(&xrow[ix0..ix0 + len])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                acc += grow
                                    .iter()
                                    .enumerate()
                                    .map(|(j, a)| a * xrow[ix0 + j * stride])
                                    .sum::<f64>();
                            }
                        }
                        gw[wbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

impl Tensor {
    /// 2-D cross-correlation with square stride/padding and channel groups.
    /// `weight` is `(c_out, c_in / groups, kh, kw)`, `bias` is `(1, c_out, 1, 1)`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let out_shape = conv_output_shape(self.shape, weight.shape, stride, padding, groups)?;
        let [n, cin, h, w] = self.shape;
        let [cout, cin_g, kh, kw] = weight.shape;
        if let Some(b) = bias {
            if b.shape != [1, cout, 1, 1] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: [1, cout, 1, 1],
                    rhs: b.shape,
                });
            }
        }
        let geo = Geometry {
            n,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / groups,
            kh,
            kw,
            oh: out_shape[2],
            ow: out_shape[3],
            stride,
            pad: padding,
        };
        let out = forward(geo, self.data(), weight.data(), bias.map(|b| b.data()));
        let (x_arc, w_arc) = (self.data_arc(), weight.data_arc());
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        record(
            "conv2d",
            out_shape,
            out,
            &inputs,
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| grad_input(geo, g, &w_arc));
                let gw = needs[1].then(|| grad_weight(geo, g, &x_arc));
                let mut grads = vec![gx, gw];
                if has_bias {
                    let ohw = geo.oh * geo.ow;
                    grads.push(needs[2].then(|| {
                        let mut gb = vec![0.0; geo.cout];
                        for (plane, go) in g.chunks(ohw).enumerate() {
                            gb[plane % geo.cout] += go.iter().sum::<f64>();
                        }
                        gb
                    }));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_cases() {
        // 3x3, pad 1, stride 1 over width 5
        assert_eq!(valid_range(5, 5, 0, 1, 1), (1, 5));
        assert_eq!(valid_range(5, 5, 1, 1, 1), (0, 5));
        assert_eq!(valid_range(5, 5, 2, 1, 1), (0, 4));
        // 7x7, stride 4, pad 3 over width 64 -> 16 outputs
        assert_eq!(valid_range(16, 64, 0, 4, 3), (1, 16));
        assert_eq!(valid_range(16, 64, 6, 4, 3), (0, 16));
        assert_eq!(valid_range(2, 16, 7, 8, 0), (0, 2));
    }

    #[test]
    fn identity_pointwise_conv() {
        let x = Tensor::from_fn([2, 3, 4, 4], |[n, c, h, w]| {
            (n * 7 + c * 3 + h * 2 + w) as f64 * 0.1
        });
        let wt = Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
        assert_eq!(x.conv2d(&wt, None, 1, 0, 1).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::ones([1, 1, 5, 5]);
        let wt = Tensor::ones([1, 1, 3, 3]);
        let y = x.conv2d(&wt, None, 1, 1, 1).unwrap();
        assert_eq!(y.shape(), [1, 1, 5, 5]);
        for i in 1..4 {
            for j in 1..4 {
                assert_eq!(y.at([0, 0, i, j]), 9.0);
            }
        }
        assert_eq!(y.at([0, 0, 0, 0]), 4.0);
        assert_eq!(y.at([0, 0, 0, 2]), 6.0);
    }

    #[test]
    fn group_mismatch_is_rejected() {
        let x = Tensor::zeros([1, 6, 4, 4]);
        let wt = Tensor::zeros([4, 2, 3, 3]);
        assert!(matches!(
            x.conv2d(&wt, None, 1, 1, 4),
            Err(Error::ChannelBounds { .. })
        ));
        let wt = Tensor::zeros([6, 2, 3, 3]);
        assert!(x.conv2d(&wt, None, 1, 1, 3).is_ok());
    }

    #[test]
    fn bias_is_broadcast_per_output_channel() {
        let x = Tensor::zeros([1, 1, 2, 2]);
        let wt = Tensor::zeros([2, 1, 1, 1]);
        let b = Tensor::new([1, 2, 1, 1], vec![1.5, -2.0]).unwrap();
        let y = x.conv2d(&wt, Some(&b), 1, 0, 1).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);
    }
}
