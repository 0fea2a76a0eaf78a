//! Selective boundary aggregation: gated fusion of a shallow boundary stream
//! and a deep semantic stream.

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvBnRelu, ConvSpec, Session};
use crate::tensor::Tensor;

/// Channel width of both streams.
pub const SBA_CHANNELS: usize = 32;

/// Re-calibration attention unit:
/// `g1 * t1 + g2 * t2 * (1 - g1) + t1` with `g1 = sigmoid(W1 t1)`,
/// `g2 = sigmoid(W2 t2)`.
#[derive(Debug, Clone)]
pub struct Rau {
    theta: Conv2d,
    phi: Conv2d,
}

/// Gate activations of one unit.
#[derive(Debug, Clone)]
pub struct RauGates {
    pub g1: Tensor,
    pub g2: Tensor,
}

impl Rau {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        Rau {
            theta: Conv2d::new(&mut b, "theta", ConvSpec::pointwise(channels, channels)),
            phi: Conv2d::new(&mut b, "phi", ConvSpec::pointwise(channels, channels)),
        }
    }

    pub fn theta(&self) -> &Conv2d {
        &self.theta
    }

    pub fn gates(&self, s: &Session<'_>, t1: &Tensor, t2: &Tensor) -> Result<RauGates> {
        if t1.shape() != t2.shape() {
            return Err(Error::ShapeMismatch {
                op: "rau",
                lhs: t1.shape(),
                rhs: t2.shape(),
            });
        }
        Ok(RauGates {
            g1: self.theta.forward(s, t1)?.sigmoid()?,
            g2: self.phi.forward(s, t2)?.sigmoid()?,
        })
    }

    pub fn forward(&self, s: &Session<'_>, t1: &Tensor, t2: &Tensor) -> Result<Tensor> {
        let RauGates { g1, g2 } = self.gates(s, t1, t2)?;
        let first = g1.mul(t1)?;
        let second = g2.mul(t2)?.mul(&g1.one_minus()?)?;
        first.add(&second)?.add(t1)
    }
}

/// Deep semantic stream: fuses the stride-16 and stride-32 aggregates (and
/// optionally the stride-8 one) into a 32-channel map at stride 8.
#[derive(Debug, Clone)]
pub struct SemanticFuse {
    with_f2: bool,
    conv: Conv2d,
}

impl SemanticFuse {
    pub fn new(b: &mut Builder<'_>, name: &str, with_f2: bool) -> Self {
        let mut b = b.sub(name);
        let cin = if with_f2 { 3 } else { 2 } * SBA_CHANNELS;
        SemanticFuse {
            with_f2,
            conv: Conv2d::new(&mut b, "conv", ConvSpec::pointwise(cin, SBA_CHANNELS)),
        }
    }

    /// `f3` and `f4` are the stride-16 and stride-32 maps; `f2`, when the
    /// stride-8 map is fused, fixes the output grid.
    pub fn forward(
        &self,
        s: &Session<'_>,
        f2: Option<&Tensor>,
        f3: &Tensor,
        f4: &Tensor,
    ) -> Result<Tensor> {
        let [n3, _, h3, w3] = f3.shape();
        let [n4, _, h4, w4] = f4.shape();
        if n3 != n4 || h3 != 2 * h4 || w3 != 2 * w4 {
            return Err(Error::ShapeMismatch {
                op: "build_fs",
                lhs: f3.shape(),
                rhs: f4.shape(),
            });
        }
        match (self.with_f2, f2) {
            (false, _) => {
                let up4 = f4.resize_bilinear(h3, w3)?;
                let fused = self
                    .conv
                    .forward(s, &Tensor::concat_channels(&[f3, &up4])?)?;
                fused.resize_bilinear(2 * h3, 2 * w3)
            }
            (true, Some(f2)) => {
                let [_, _, h2, w2] = f2.shape();
                let up3 = f3.resize_bilinear(h2, w2)?;
                let up4 = f4.resize_bilinear(h2, w2)?;
                self.conv
                    .forward(s, &Tensor::concat_channels(&[f2, &up3, &up4])?)
            }
            (true, None) => Err(Error::invalid(
                "build_fs",
                "configured to fuse the stride-8 map but none was given",
            )),
        }
    }
}

/// `Z = ConvBnRelu3x3(concat(RAU(Fs, Fb), RAU(Fb, Fs)))` with `Fs`
/// upsampled to the grid of `Fb`.
#[derive(Debug, Clone)]
pub struct Sba {
    rau_s: Rau,
    rau_b: Rau,
    fuse: ConvBnRelu,
}

impl Sba {
    pub fn new(b: &mut Builder<'_>, name: &str) -> Self {
        let mut b = b.sub(name);
        Sba {
            rau_s: Rau::new(&mut b, "rau_s", SBA_CHANNELS),
            rau_b: Rau::new(&mut b, "rau_b", SBA_CHANNELS),
            fuse: ConvBnRelu::new(
                &mut b,
                "fuse",
                ConvSpec::new(2 * SBA_CHANNELS, SBA_CHANNELS, 3),
            ),
        }
    }

    pub fn forward(&self, s: &Session<'_>, fs: &Tensor, fb: &Tensor) -> Result<Tensor> {
        let [ns, cs, hs, ws] = fs.shape();
        let [nb, cb, hb, wb] = fb.shape();
        if ns != nb || cs != SBA_CHANNELS || cb != SBA_CHANNELS || hb != 2 * hs || wb != 2 * ws {
            return Err(Error::ShapeMismatch {
                op: "sba",
                lhs: fs.shape(),
                rhs: fb.shape(),
            });
        }
        let fs_up = fs.resize_bilinear(hb, wb)?;
        let a = self.rau_s.forward(s, &fs_up, fb)?;
        let b = self.rau_b.forward(s, fb, &fs_up)?;
        self.fuse.forward(s, &Tensor::concat_channels(&[&a, &b])?)
    }
}
