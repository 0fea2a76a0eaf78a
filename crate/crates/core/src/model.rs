//! Network assembly: encoder, per-level aggregation, semantic fusion,
//! boundary aggregation and the two side-output heads.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::glsa::{Arrangement, Glsa, GLSA_IN, GLSA_OUT};
use crate::nn::{Builder, Conv2d, ConvBnRelu, ConvSpec, CostReport, ParamStore, Session};
use crate::sba::{Sba, SemanticFuse, SBA_CHANNELS};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DuatConfig {
    pub encoder: EncoderConfig,
    pub arrangement: Arrangement,
    pub use_sba: bool,
    pub use_glsa: bool,
    /// Also fuse the stride-8 aggregate into the semantic stream.
    pub fuse_f2: bool,
    /// `(h, w)`, both multiples of 32.
    pub input_size: (usize, usize),
    pub seed: u64,
}

impl Default for DuatConfig {
    fn default() -> Self {
        DuatConfig {
            encoder: EncoderConfig::default(),
            arrangement: Arrangement::Parallel,
            use_sba: true,
            use_glsa: true,
            fuse_f2: false,
            input_size: (64, 64),
            seed: 0,
        }
    }
}

impl DuatConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of 32"
            )));
        }
        if !self.use_glsa && self.arrangement != Arrangement::Parallel {
            return Err(Error::Config(format!(
                "glsa arrangement '{}' has no effect when glsa is disabled",
                self.arrangement
            )));
        }
        Ok(())
    }
}

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    GsaOnly,
    LsaOnly,
    SerialGsaLsa,
    SerialLsaGsa,
    WithoutSba,
    WithoutGlsa,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::GsaOnly,
        Variant::LsaOnly,
        Variant::SerialGsaLsa,
        Variant::SerialLsaGsa,
        Variant::WithoutSba,
        Variant::WithoutGlsa,
        Variant::Full,
    ];

    /// Identifier used in config files.
    pub fn key(self) -> &'static str {
        match self {
            Variant::GsaOnly => "gsa",
            Variant::LsaOnly => "lsa",
            Variant::SerialGsaLsa => "serial_gsa_lsa",
            Variant::SerialLsaGsa => "serial_lsa_gsa",
            Variant::WithoutSba => "wo_sba",
            Variant::WithoutGlsa => "wo_glsa",
            Variant::Full => "full",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::GsaOnly => "+ GSA",
            Variant::LsaOnly => "+ LSA",
            Variant::SerialGsaLsa => "+ GSA + LSA (Serial)",
            Variant::SerialLsaGsa => "+ LSA + GSA (Serial)",
            Variant::WithoutSba => "w/o SBA",
            Variant::WithoutGlsa => "w/o GLSA",
            Variant::Full => "SBA + GLSA",
        }
    }

    pub fn apply(self, base: &DuatConfig) -> DuatConfig {
        let mut cfg = DuatConfig {
            arrangement: Arrangement::Parallel,
            use_sba: true,
            use_glsa: true,
            ..base.clone()
        };
        match self {
            Variant::GsaOnly => cfg.arrangement = Arrangement::GsaOnly,
            Variant::LsaOnly => cfg.arrangement = Arrangement::LsaOnly,
            Variant::SerialGsaLsa => cfg.arrangement = Arrangement::SerialGsaLsa,
            Variant::SerialLsaGsa => cfg.arrangement = Arrangement::SerialLsaGsa,
            Variant::WithoutSba => cfg.use_sba = false,
            Variant::WithoutGlsa => cfg.use_glsa = false,
            Variant::Full => {}
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant '{s}'")))
    }
}

/// Side-output logits at input resolution.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Boundary-refined head.
    pub s1: Tensor,
    /// Semantic head.
    pub s2: Tensor,
}

impl Prediction {
    pub fn probability(&self) -> Result<Tensor> {
        self.s1.detach().sigmoid()
    }

    /// Binary mask from the boundary-refined head.
    pub fn mask(&self) -> Result<Tensor> {
        predict_mask(&self.s1)
    }
}

/// `sigmoid(logits) >= 0.5` as a {0, 1} tensor; a logit of exactly 0 is
/// foreground.
pub fn predict_mask(logits: &Tensor) -> Result<Tensor> {
    let p = logits.detach().sigmoid()?;
    let data = p
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(p.shape(), data)
}

/// Per-level block: the aggregation module or its 3x3 conv replacement.
#[derive(Debug, Clone)]
enum LevelBlock {
    Glsa(Glsa),
    Conv(Conv2d),
}

#[derive(Debug, Clone)]
struct Level {
    proj: Conv2d,
    block: LevelBlock,
}

impl Level {
    fn forward(&self, s: &Session<'_>, f: &Tensor) -> Result<Tensor> {
        let x = self.proj.forward(s, f)?;
        match &self.block {
            LevelBlock::Glsa(g) => g.forward(s, &x),
            LevelBlock::Conv(c) => c.forward(s, &x),
        }
    }
}

#[derive(Debug, Clone)]
enum BoundaryFusion {
    Sba(Sba),
    Plain(ConvBnRelu),
}

#[derive(Debug, Clone)]
pub struct Duat {
    config: DuatConfig,
    store: ParamStore,
    encoder: Encoder,
    level2: Option<Level>,
    level3: Level,
    level4: Level,
    fb_proj: Conv2d,
    semantic: SemanticFuse,
    fusion: BoundaryFusion,
    head_s1: Conv2d,
    head_s2: Conv2d,
}

impl Duat {
    pub fn new(config: DuatConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let encoder = Encoder::new(&mut b, "encoder", &config.encoder)?;
        let dims = config.encoder.dims;

        let mut neck = b.sub("neck");
        let mut level = |i: usize| {
            let mut lb = neck.sub(&format!("level{i}"));
            let proj = Conv2d::new(&mut lb, "proj", ConvSpec::pointwise(dims[i - 1], GLSA_IN));
            let block = if config.use_glsa {
                LevelBlock::Glsa(Glsa::new(&mut lb, "glsa", config.arrangement))
            } else {
                LevelBlock::Conv(Conv2d::new(
                    &mut lb,
                    "conv",
                    ConvSpec::new(GLSA_IN, GLSA_OUT, 3),
                ))
            };
            Level { proj, block }
        };
        let level2 = config.fuse_f2.then(|| level(2));
        let level3 = level(3);
        let level4 = level(4);
        let fb_proj = Conv2d::new(&mut neck, "fb", ConvSpec::pointwise(dims[0], SBA_CHANNELS));

        let mut dec = b.sub("decoder");
        let semantic = SemanticFuse::new(&mut dec, "semantic", config.fuse_f2);
        let fusion = if config.use_sba {
            BoundaryFusion::Sba(Sba::new(&mut dec, "sba"))
        } else {
            BoundaryFusion::Plain(ConvBnRelu::new(
                &mut dec,
                "plain",
                ConvSpec::new(2 * SBA_CHANNELS, SBA_CHANNELS, 3),
            ))
        };
        let head_s1 = Conv2d::new(&mut dec, "head_s1", ConvSpec::pointwise(SBA_CHANNELS, 1));
        let head_s2 = Conv2d::new(&mut dec, "head_s2", ConvSpec::pointwise(SBA_CHANNELS, 1));

        Ok(Duat {
            config,
            store,
            encoder,
            level2,
            level3,
            level4,
            fb_proj,
            semantic,
            fusion,
            head_s1,
            head_s2,
        })
    }

    pub fn config(&self) -> &DuatConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// The aggregation block at pyramid level `i` (2..=4), if present.
    pub fn glsa(&self, i: usize) -> Option<&Glsa> {
        let level = match i {
            2 => self.level2.as_ref()?,
            3 => &self.level3,
            4 => &self.level4,
            _ => return None,
        };
        match &level.block {
            LevelBlock::Glsa(g) => Some(g),
            LevelBlock::Conv(_) => None,
        }
    }

    /// Trainable scalars inside the global and local attention units.
    pub fn attention_params(&self) -> usize {
        self.store
            .params()
            .iter()
            .filter(|p| p.name.contains(".gsa.") || p.name.contains(".lsa."))
            .map(|p| p.value().numel())
            .sum()
    }

    pub fn encode(&self, s: &Session<'_>, x: &Tensor) -> Result<FeaturePyramid> {
        self.encoder.forward(s, x)
    }

    /// Decoder half of the forward pass.
    pub fn decode(&self, s: &Session<'_>, p: &FeaturePyramid) -> Result<Prediction> {
        let [_, _, h1, w1] = p.f1.shape();
        let (h, w) = (4 * h1, 4 * w1);

        let f2 = self
            .level2
            .as_ref()
            .map(|l| l.forward(s, &p.f2))
            .transpose()?;
        let f3 = self.level3.forward(s, &p.f3)?;
        let f4 = self.level4.forward(s, &p.f4)?;
        let fs = self.semantic.forward(s, f2.as_ref(), &f3, &f4)?;
        let fb = self.fb_proj.forward(s, &p.f1)?;

        let z = match &self.fusion {
            BoundaryFusion::Sba(sba) => sba.forward(s, &fs, &fb)?,
            BoundaryFusion::Plain(conv) => {
                let [_, _, hb, wb] = fb.shape();
                let up = fs.resize_bilinear(hb, wb)?;
                conv.forward(s, &Tensor::concat_channels(&[&fb, &up])?)?
            }
        };
        let s1 = self.head_s1.forward(s, &z)?.resize_bilinear(h, w)?;
        let s2 = self.head_s2.forward(s, &fs)?.resize_bilinear(h, w)?;
        Ok(Prediction { s1, s2 })
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Prediction> {
        let pyramid = self.encode(s, x)?;
        self.decode(s, &pyramid)
    }

    /// Inference with running statistics and no tape.
    pub fn infer(&self, x: &Tensor) -> Result<Prediction> {
        self.forward(&Session::eval(&self.store), x)
    }

    /// Parameters and multiply-accumulates of one forward pass on a single
    /// image at the configured input size.
    pub fn cost(&self) -> Result<CostReport> {
        let (h, w) = self.config.input_size;
        let s = Session::counting(&self.store);
        self.forward(&s, &Tensor::zeros([1, 3, h, w]))?;
        Ok(CostReport::new(&self.store, s.costs()))
    }

    /// Training-mode session over this model's parameters.
    pub fn train_session<'a>(&'a self, tape: &Tape) -> Session<'a> {
        Session::train(&self.store, tape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([n, 3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn forward_shapes() {
        let model = Duat::new(DuatConfig::default()).unwrap();
        let p = model.infer(&random_image(2, 64, 64, 1)).unwrap();
        assert_eq!(p.s1.shape(), [2, 1, 64, 64]);
        assert_eq!(p.s2.shape(), [2, 1, 64, 64]);
    }

    #[test]
    fn mask_threshold_rule() {
        let logits = Tensor::new([1, 1, 1, 3], vec![-10.0, 0.0, 10.0]).unwrap();
        assert_eq!(predict_mask(&logits).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn contradictory_flags_rejected() {
        let cfg = DuatConfig {
            use_glsa: false,
            arrangement: Arrangement::SerialGsaLsa,
            ..DuatConfig::default()
        };
        assert!(matches!(Duat::new(cfg), Err(Error::Config(_))));
        let cfg = DuatConfig {
            input_size: (48, 64),
            ..DuatConfig::default()
        };
        assert!(Duat::new(cfg).is_err());
    }

    #[test]
    fn variants_parse_and_build() {
        let base = DuatConfig::default();
        let x = random_image(1, 64, 64, 2);
        for v in Variant::ALL {
            assert_eq!(v.key().parse::<Variant>().unwrap(), v);
            let model = Duat::new(v.apply(&base)).unwrap();
            model.infer(&x).unwrap();
        }
        let full = Duat::new(base.clone()).unwrap();
        let wo = Duat::new(Variant::WithoutGlsa.apply(&base)).unwrap();
        assert!(wo.attention_params() < full.attention_params());
        assert_eq!(wo.attention_params(), 0);
    }

    #[test]
    fn fuse_f2_builds_level2() {
        let cfg = DuatConfig {
            fuse_f2: true,
            ..DuatConfig::default()
        };
        let model = Duat::new(cfg).unwrap();
        assert!(model.glsa(2).is_some());
        let p = model.infer(&random_image(1, 64, 64, 3)).unwrap();
        assert_eq!(p.s1.shape(), [1, 1, 64, 64]);
        assert!(Duat::new(DuatConfig::default()).unwrap().glsa(2).is_none());
    }
}
