//! Four-stage pyramid transformer encoder with spatial-reduction attention.

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvSpec, LayerKind, LayerNorm2d, Session};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub depths: [usize; 4],
    pub dims: [usize; 4],
    pub heads: [usize; 4],
    pub reductions: [usize; 4],
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depths: [2, 2, 2, 2],
            dims: [32, 64, 96, 128],
            heads: [1, 2, 4, 8],
            reductions: [8, 4, 2, 1],
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            let (d, h, r) = (self.dims[i], self.heads[i], self.reductions[i]);
            if d == 0 || h == 0 || d % h != 0 {
                return Err(Error::Config(format!(
                    "stage {}: dim {d} is not divisible by {h} heads",
                    i + 1
                )));
            }
            if !r.is_power_of_two() {
                return Err(Error::Config(format!(
                    "stage {}: reduction ratio {r} is not a power of two",
                    i + 1
                )));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be positive".into()));
        }
        Ok(())
    }

    /// Stride of each stage relative to the input.
    pub fn strides(&self) -> [usize; 4] {
        [4, 8, 16, 32]
    }
}

/// Encoder outputs at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    pub f4: Tensor,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 4] {
        [&self.f1, &self.f2, &self.f3, &self.f4]
    }
}

/// Overlapping strided convolution followed by channel layer norm.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    conv: Conv2d,
    norm: LayerNorm2d,
}

impl PatchEmbed {
    /// Stage 1 uses a 7x7 kernel with stride 4, later stages 3x3 with stride 2.
    pub fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, first: bool) -> Self {
        let mut b = b.sub(name);
        let spec = if first {
            ConvSpec::new(cin, cout, 7).stride(4).padding(3)
        } else {
            ConvSpec::new(cin, cout, 3).stride(2).padding(1)
        };
        PatchEmbed {
            conv: Conv2d::new(&mut b, "proj", spec),
            norm: LayerNorm2d::new(&mut b, "norm", cout),
        }
    }

    pub fn stride(&self) -> usize {
        self.conv.spec().stride
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let [_, _, h, w] = x.shape();
        let st = self.stride();
        if h % st != 0 || w % st != 0 {
            return Err(Error::invalid(
                "patch_embed",
                format!("{h}x{w} is not divisible by stride {st}"),
            ));
        }
        let y = self.conv.forward(s, x)?;
        self.norm.forward(s, &y)
    }
}

/// Multi-head self-attention whose keys and values come from a grid
/// downsampled by `reduction` (a strided conv plus layer norm).
#[derive(Debug, Clone)]
pub struct SrAttention {
    name: String,
    dim: usize,
    heads: usize,
    reduction: usize,
    norm: LayerNorm2d,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    sr: Option<(Conv2d, LayerNorm2d)>,
    proj: Conv2d,
}

/// Intermediate values of one attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionParts {
    /// Attention probabilities, `(n, heads, tokens, kv_tokens)`.
    pub weights: Tensor,
    /// Output before the residual connection, `(n, dim, h, w)`.
    pub delta: Tensor,
}

impl SrAttention {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        reduction: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let norm = LayerNorm2d::new(&mut b, "norm", dim);
        let q = Conv2d::new(&mut b, "q", ConvSpec::pointwise(dim, dim));
        let k = Conv2d::new(&mut b, "k", ConvSpec::pointwise(dim, dim));
        let v = Conv2d::new(&mut b, "v", ConvSpec::pointwise(dim, dim));
        let sr = (reduction > 1).then(|| {
            let spec = ConvSpec::new(dim, dim, reduction)
                .stride(reduction)
                .padding(0);
            (
                Conv2d::new(&mut b, "sr", spec),
                LayerNorm2d::new(&mut b, "sr_norm", dim),
            )
        });
        let proj = Conv2d::new(&mut b, "proj", ConvSpec::pointwise(dim, dim));
        SrAttention {
            name: b.prefix().to_string(),
            dim,
            heads,
            reduction,
            norm,
            q,
            k,
            v,
            sr,
            proj,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn q(&self) -> &Conv2d {
        &self.q
    }

    pub fn k(&self) -> &Conv2d {
        &self.k
    }

    pub fn v(&self) -> &Conv2d {
        &self.v
    }

    pub fn proj(&self) -> &Conv2d {
        &self.proj
    }

    /// Attention applied to already-normalized tokens `x`.
    pub fn attend(&self, s: &Session<'_>, x: &Tensor) -> Result<AttentionParts> {
        let [n, c, h, w] = x.shape();
        if c != self.dim || self.dim % self.heads != 0 {
            return Err(Error::ChannelBounds {
                op: "sr_attention",
                detail: format!(
                    "{}: {c} channels with {} heads (configured dim {})",
                    self.name, self.heads, self.dim
                ),
            });
        }
        let r = self.reduction;
        if h % r != 0 || w % r != 0 {
            return Err(Error::invalid(
                "sr_attention",
                format!("{h}x{w} grid is not divisible by reduction {r}"),
            ));
        }
        let (heads, d, t) = (self.heads, self.dim / self.heads, h * w);

        let kv_in = match &self.sr {
            Some((conv, norm)) => norm.forward(s, &conv.forward(s, x)?)?,
            None => x.clone(),
        };
        let m = kv_in.shape()[2] * kv_in.shape()[3];

        let q = self
            .q
            .forward(s, x)?
            .reshape([n, heads, d, t])?
            .transpose_last2()?;
        let k = self.k.forward(s, &kv_in)?.reshape([n, heads, d, m])?;
        let v = self.v.forward(s, &kv_in)?.reshape([n, heads, d, m])?;

        let scores = q.matmul(&k)?.scale(1.0 / (d as f64).sqrt())?;
        let weights = scores.softmax(3)?;
        // (n, heads, d, m) x (n, heads, m, t) -> (n, heads, d, t)
        let mixed = v.matmul(&weights.transpose_last2()?)?;
        let macs = (n * heads * t * d * m) as u64;
        s.add_cost(&format!("{}.scores", self.name), LayerKind::MatMul, macs);
        s.add_cost(&format!("{}.mix", self.name), LayerKind::MatMul, macs);

        let delta = self.proj.forward(s, &mixed.reshape([n, c, h, w])?)?;
        Ok(AttentionParts { weights, delta })
    }

    /// `x + proj(attention(norm(x)))`.
    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let normed = self.norm.forward(s, x)?;
        x.add(&self.attend(s, &normed)?.delta)
    }

    /// Normalization applied before [`SrAttention::attend`].
    pub fn pre_norm(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(s, x)
    }
}

/// `x + fc2(gelu(dw3x3(fc1(norm(x)))))`; the depthwise conv supplies
/// positional information.
#[derive(Debug, Clone)]
pub struct MixFfn {
    norm: LayerNorm2d,
    fc1: Conv2d,
    dw: Conv2d,
    fc2: Conv2d,
}

impl MixFfn {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, ratio: usize) -> Self {
        let mut b = b.sub(name);
        let hidden = dim * ratio;
        MixFfn {
            norm: LayerNorm2d::new(&mut b, "norm", dim),
            fc1: Conv2d::new(&mut b, "fc1", ConvSpec::pointwise(dim, hidden)),
            dw: Conv2d::new(&mut b, "dw", ConvSpec::depthwise(hidden)),
            fc2: Conv2d::new(&mut b, "fc2", ConvSpec::pointwise(hidden, dim)),
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(s, &self.norm.forward(s, x)?)?;
        let h = self.dw.forward(s, &h)?.gelu()?;
        x.add(&self.fc2.forward(s, &h)?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    attn: SrAttention,
    mlp: MixFfn,
}

#[derive(Debug, Clone)]
struct Stage {
    embed: PatchEmbed,
    blocks: Vec<Block>,
    norm: LayerNorm2d,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(b: &mut Builder<'_>, name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut b = b.sub(name);
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for i in 0..4 {
            let mut sb = b.sub(&format!("stage{}", i + 1));
            let dim = config.dims[i];
            let embed = PatchEmbed::new(&mut sb, "patch_embed", cin, dim, i == 0);
            let blocks = (0..config.depths[i])
                .map(|j| {
                    let mut bb = sb.sub(&format!("block{j}"));
                    Block {
                        attn: SrAttention::new(
                            &mut bb,
                            "attn",
                            dim,
                            config.heads[i],
                            config.reductions[i],
                        ),
                        mlp: MixFfn::new(&mut bb, "mlp", dim, config.mlp_ratio),
                    }
                })
                .collect();
            let norm = LayerNorm2d::new(&mut sb, "norm", dim);
            stages.push(Stage {
                embed,
                blocks,
                norm,
            });
            cin = dim;
        }
        Ok(Encoder {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Attention layer `block` of stage `stage` (both zero-based).
    pub fn attention(&self, stage: usize, block: usize) -> Option<&SrAttention> {
        self.stages.get(stage)?.blocks.get(block).map(|b| &b.attn)
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<FeaturePyramid> {
        let [_, c, h, w] = x.shape();
        if c != 3 {
            return Err(Error::ChannelBounds {
                op: "encode",
                detail: format!("expected 3 input channels, got {c}"),
            });
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "encode",
                format!("input {h}x{w} is not a positive multiple of 32"),
            ));
        }
        let mut feats = Vec::with_capacity(4);
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = stage.embed.forward(s, &cur)?;
            for block in &stage.blocks {
                cur = block.attn.forward(s, &cur)?;
                cur = block.mlp.forward(s, &cur)?;
            }
            cur = stage.norm.forward(s, &cur)?;
            feats.push(cur.clone());
        }
        let mut it = feats.into_iter();
        let mut next = || it.next().expect("four stages");
        Ok(FeaturePyramid {
            f1: next(),
            f2: next(),
            f3: next(),
            f4: next(),
        })
    }
}
