//! Global-to-local spatial aggregation: a global context branch (GSA) and a
//! local gated branch (LSA) over split channels, fused by a 1x1 conv.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvSpec, LayerKind, Mlp2, ParamStore, Session};
use crate::tensor::Tensor;

/// Channels entering the module.
pub const GLSA_IN: usize = 64;
/// Channels leaving the module.
pub const GLSA_OUT: usize = 32;
/// Width of the local branch's inner convolutions.
pub const LSA_INNER: usize = 32;

/// How the two attention units are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Arrangement {
    #[default]
    Parallel,
    GsaOnly,
    LsaOnly,
    SerialGsaLsa,
    SerialLsaGsa,
}

impl Arrangement {
    pub const ALL: [Arrangement; 5] = [
        Arrangement::Parallel,
        Arrangement::GsaOnly,
        Arrangement::LsaOnly,
        Arrangement::SerialGsaLsa,
        Arrangement::SerialLsaGsa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arrangement::Parallel => "parallel",
            Arrangement::GsaOnly => "gsa_only",
            Arrangement::LsaOnly => "lsa_only",
            Arrangement::SerialGsaLsa => "serial_gsa_lsa",
            Arrangement::SerialLsaGsa => "serial_lsa_gsa",
        }
    }

    fn uses_gsa(self) -> bool {
        self != Arrangement::LsaOnly
    }

    fn uses_lsa(self) -> bool {
        self != Arrangement::GsaOnly
    }
}

impl fmt::Display for Arrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arrangement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arrangement::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown glsa arrangement '{s}'")))
    }
}

fn check_channels(op: &'static str, x: &Tensor, expected: usize) -> Result<()> {
    let c = x.shape()[1];
    if c != expected {
        return Err(Error::ChannelBounds {
            op,
            detail: format!("expected {expected} channels, got {c}"),
        });
    }
    Ok(())
}

/// Global spatial attention: softmax-weighted global pooling, an MLP, and a
/// broadcast residual add.
#[derive(Debug, Clone)]
pub struct Gsa {
    name: String,
    channels: usize,
    mask: Conv2d,
    mlp: Mlp2,
}

impl Gsa {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        Gsa {
            name: b.prefix().to_string(),
            channels,
            mask: Conv2d::new(&mut b, "mask", ConvSpec::pointwise(channels, 1)),
            mlp: Mlp2::new(&mut b, "mlp", channels),
        }
    }

    pub fn mask(&self) -> &Conv2d {
        &self.mask
    }

    /// Spatial attention weights, `(n, 1, 1, h*w)`, each row summing to 1.
    pub fn weights(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        check_channels("gsa", x, self.channels)?;
        let [n, _, h, w] = x.shape();
        self.mask
            .forward(s, x)?
            .reshape([n, 1, 1, h * w])?
            .softmax(3)
    }

    /// Context vector `(n, c, 1, 1)`: features pooled by the attention weights.
    pub fn context(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        let weights = self.weights(s, x)?;
        let feats = x.reshape([n, 1, c, h * w])?;
        s.add_cost(
            &format!("{}.context", self.name),
            LayerKind::MatMul,
            (n * c * h * w) as u64,
        );
        feats
            .matmul(&weights.transpose_last2()?)?
            .reshape([n, c, 1, 1])
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let ctx = self.context(s, x)?;
        x.add(&self.mlp.forward(s, &ctx)?)
    }

    /// Zeroes the MLP output layer; the unit then returns its input.
    pub fn zero_output_layer(&self, store: &mut ParamStore) -> Result<()> {
        self.mlp.zero_output_layer(store)
    }
}

/// Local spatial attention: `att = sigmoid(conv1x1(F_c(x)) + x)`,
/// output `att * x + x`, where `F_c` cascades three 1x1 + depthwise 3x3
/// pairs at 32 channels.
#[derive(Debug, Clone)]
pub struct Lsa {
    channels: usize,
    cascade: Vec<(Conv2d, Conv2d)>,
    out: Conv2d,
}

impl Lsa {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        let cascade = (0..3)
            .map(|i| {
                let cin = if i == 0 { channels } else { LSA_INNER };
                (
                    Conv2d::new(
                        &mut b,
                        &format!("pw{i}"),
                        ConvSpec::pointwise(cin, LSA_INNER),
                    ),
                    Conv2d::new(&mut b, &format!("dw{i}"), ConvSpec::depthwise(LSA_INNER)),
                )
            })
            .collect();
        Lsa {
            channels,
            cascade,
            out: Conv2d::new(&mut b, "out", ConvSpec::pointwise(LSA_INNER, channels)),
        }
    }

    /// Per-pixel gate in (0, 1), same shape as `x`.
    pub fn attention(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        check_channels("lsa", x, self.channels)?;
        let mut h = x.clone();
        for (pw, dw) in &self.cascade {
            h = dw.forward(s, &pw.forward(s, &h)?)?;
        }
        self.out.forward(s, &h)?.add(x)?.sigmoid()
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        self.attention(s, x)?.mul(x)?.add(x)
    }
}

/// The full aggregation block, `(n, 64, h, w) -> (n, 32, h, w)`.
#[derive(Debug, Clone)]
pub struct Glsa {
    arrangement: Arrangement,
    gsa: Option<Gsa>,
    lsa: Option<Lsa>,
    fuse: Conv2d,
}

impl Glsa {
    pub fn new(b: &mut Builder<'_>, name: &str, arrangement: Arrangement) -> Self {
        let mut b = b.sub(name);
        let width = if arrangement == Arrangement::Parallel {
            GLSA_IN / 2
        } else {
            GLSA_IN
        };
        let gsa = arrangement
            .uses_gsa()
            .then(|| Gsa::new(&mut b, "gsa", width));
        let lsa = arrangement
            .uses_lsa()
            .then(|| Lsa::new(&mut b, "lsa", width));
        Glsa {
            arrangement,
            gsa,
            lsa,
            fuse: Conv2d::new(&mut b, "fuse", ConvSpec::pointwise(GLSA_IN, GLSA_OUT)),
        }
    }

    pub fn arrangement(&self) -> Arrangement {
        self.arrangement
    }

    pub fn gsa(&self) -> Option<&Gsa> {
        self.gsa.as_ref()
    }

    pub fn lsa(&self) -> Option<&Lsa> {
        self.lsa.as_ref()
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let c = x.shape()[1];
        if c % 2 != 0 {
            return Err(Error::ChannelBounds {
                op: "glsa",
                detail: format!("cannot split {c} channels evenly"),
            });
        }
        check_channels("glsa", x, GLSA_IN)?;
        let gsa = || self.gsa.as_ref().expect("arrangement uses gsa");
        let lsa = || self.lsa.as_ref().expect("arrangement uses lsa");
        let mixed = match self.arrangement {
            Arrangement::Parallel => {
                let (a, b) = x.split_channels(GLSA_IN / 2)?;
                let ga = gsa().forward(s, &a)?;
                let lb = lsa().forward(s, &b)?;
                Tensor::concat_channels(&[&ga, &lb])?
            }
            Arrangement::GsaOnly => gsa().forward(s, x)?,
            Arrangement::LsaOnly => lsa().forward(s, x)?,
            Arrangement::SerialGsaLsa => lsa().forward(s, &gsa().forward(s, x)?)?,
            Arrangement::SerialLsaGsa => gsa().forward(s, &lsa().forward(s, x)?)?,
        };
        self.fuse.forward(s, &mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn arrangement_names_round_trip() {
        for a in Arrangement::ALL {
            assert_eq!(a.as_str().parse::<Arrangement>().unwrap(), a);
        }
        assert!("diagonal".parse::<Arrangement>().is_err());
    }

    #[test]
    fn gsa_constant_field_shifts_uniformly() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gsa = Gsa::new(&mut Builder::new(&mut store, &mut rng), "gsa", 32);
        let s = Session::eval(&store);
        let x = Tensor::from_fn([1, 32, 5, 5], |[_, c, _, _]| c as f64 * 0.1 - 1.0);
        let w = gsa.weights(&s, &x).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0 / 25.0).abs() < 1e-15));
        let ctx = gsa.context(&s, &x).unwrap();
        for c in 0..32 {
            assert!((ctx.at([0, c, 0, 0]) - (c as f64 * 0.1 - 1.0)).abs() < 1e-12);
        }
        let y = gsa.forward(&s, &x).unwrap();
        for c in 0..32 {
            let shift = y.at([0, c, 0, 0]) - x.at([0, c, 0, 0]);
            for i in 0..5 {
                for j in 0..5 {
                    assert!((y.at([0, c, i, j]) - x.at([0, c, i, j]) - shift).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gsa_zero_mlp_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gsa = Gsa::new(&mut Builder::new(&mut store, &mut rng), "gsa", 32);
        gsa.zero_output_layer(&mut store).unwrap();
        let x = random([2, 32, 4, 4], 3);
        let y = gsa.forward(&Session::eval(&store), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn lsa_bounds_and_zero_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lsa = Lsa::new(&mut Builder::new(&mut store, &mut rng), "lsa", 32);
        let s = Session::eval(&store);
        let x = random([1, 32, 6, 6], 5);
        let att = lsa.attention(&s, &x).unwrap();
        assert!(att.data().iter().all(|&a| a > 0.0 && a < 1.0));
        let y = lsa.forward(&s, &x).unwrap();
        for ((yv, xv), av) in y.data().iter().zip(x.data()).zip(att.data()) {
            assert!((yv - xv - av * xv).abs() < 1e-12);
        }
        let z = lsa.forward(&s, &Tensor::zeros([1, 32, 6, 6])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_arrangement_outputs_32_channels() {
        let x = random([1, 64, 4, 4], 6);
        let mut outputs = Vec::new();
        for a in Arrangement::ALL {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let g = Glsa::new(&mut Builder::new(&mut store, &mut rng), "glsa", a);
            let y = g.forward(&Session::eval(&store), &x).unwrap();
            assert_eq!(y.shape(), [1, 32, 4, 4]);
            outputs.push(y);
        }
        assert!(outputs[0].max_abs_diff(&outputs[3]).unwrap() > 0.0);
    }

    #[test]
    fn channel_errors() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Glsa::new(
            &mut Builder::new(&mut store, &mut rng),
            "glsa",
            Arrangement::Parallel,
        );
        let s = Session::eval(&store);
        assert!(g.forward(&s, &Tensor::zeros([1, 63, 2, 2])).is_err());
        assert!(g.forward(&s, &Tensor::zeros([1, 32, 2, 2])).is_err());
    }
}
