use super::params::{BufferId, Builder, Init, LayerKind, ParamId, ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Geometry of a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, "same" padding, dense, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1)
    }

    /// 3x3 depthwise convolution (one filter per channel).
    pub fn depthwise(channels: usize) -> Self {
        Self::new(channels, channels, 3).groups(channels)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    spec: ConvSpec,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(b: &mut Builder<'_>, name: &str, spec: ConvSpec) -> Self {
        let mut b = b.sub(name);
        let weight = b.param(
            "weight",
            [
                spec.out_channels,
                spec.in_channels / spec.groups,
                spec.kernel,
                spec.kernel,
            ],
            Init::FanIn {
                fan_in: spec.fan_in(),
            },
        );
        let bias = spec
            .bias
            .then(|| b.param("bias", [1, spec.out_channels, 1, 1], Init::Zeros));
        Conv2d {
            name: b.prefix().to_string(),
            spec,
            weight,
            bias,
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let [_, c, _, _] = x.shape();
        if c != self.spec.in_channels {
            return Err(Error::ChannelBounds {
                op: "conv2d",
                detail: format!(
                    "{} expects {} input channels, got {c}",
                    self.name, self.spec.in_channels
                ),
            });
        }
        let w = s.param(self.weight)?;
        let b = self.bias.map(|id| s.param(id)).transpose()?;
        let y = x.conv2d(
            &w,
            b.as_ref(),
            self.spec.stride,
            self.spec.padding,
            self.spec.groups,
        )?;
        let [n, co, oh, ow] = y.shape();
        let k2 = (self.spec.kernel * self.spec.kernel) as u64;
        let per_out = k2 * (self.spec.in_channels / self.spec.groups) as u64;
        s.add_cost(
            &self.name,
            LayerKind::Conv2d,
            per_out * (n * co * oh * ow) as u64,
        );
        Ok(y)
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) -> Result<()> {
        for id in std::iter::once(self.weight).chain(self.bias) {
            let shape = store.param(id).value().shape();
            store.set_value(id, Tensor::zeros(shape))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    scale: ParamId,
    shift: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        BatchNorm2d {
            scale: b.param("scale", [1, channels, 1, 1], Init::Ones),
            shift: b.param("shift", [1, channels, 1, 1], Init::Zeros),
            running_mean: b.buffer("running_mean", [1, channels, 1, 1], 0.0),
            running_var: b.buffer("running_var", [1, channels, 1, 1], 1.0),
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let scale = s.param(self.scale)?;
        let shift = s.param(self.shift)?;
        if !s.is_train() {
            let mean = s.buffer(self.running_mean);
            let var = s.buffer(self.running_var);
            return x.batch_norm_eval(&scale, &shift, &mean, &var, BN_EPS);
        }
        let (y, stats) = x.batch_norm_train(&scale, &shift, BN_EPS)?;
        let blend = |old: Vec<f64>, new: &[f64]| -> Vec<f64> {
            old.iter()
                .zip(new)
                .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                .collect()
        };
        s.update_buffer(
            self.running_mean,
            blend(s.buffer(self.running_mean), &stats.mean),
        );
        s.update_buffer(
            self.running_var,
            blend(s.buffer(self.running_var), &stats.var_unbiased),
        );
        Ok(y)
    }
}

/// Layer normalization over channels at each spatial position.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    scale: ParamId,
    shift: ParamId,
}

impl LayerNorm2d {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        LayerNorm2d {
            scale: b.param("scale", [1, channels, 1, 1], Init::Ones),
            shift: b.param("shift", [1, channels, 1, 1], Init::Zeros),
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&s.param(self.scale)?, &s.param(self.shift)?, LN_EPS)
    }
}

/// Convolution followed by batch normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(b: &mut Builder<'_>, name: &str, spec: ConvSpec) -> Self {
        let mut b = b.sub(name);
        let conv = Conv2d::new(&mut b, "conv", spec.no_bias());
        let bn = BatchNorm2d::new(&mut b, "bn", spec.out_channels);
        ConvBnRelu { conv, bn }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(s, x)?;
        self.bn.forward(s, &y)?.relu()
    }
}

/// Two fully-connected layers with expansion ratio two:
/// `c -> 2c -> ReLU -> LayerNorm -> c`.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    channels: usize,
    fc1: Conv2d,
    norm: LayerNorm2d,
    fc2: Conv2d,
}

impl Mlp2 {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        Mlp2 {
            channels,
            fc1: Conv2d::new(&mut b, "fc1", ConvSpec::pointwise(channels, 2 * channels)),
            norm: LayerNorm2d::new(&mut b, "norm", 2 * channels),
            fc2: Conv2d::new(&mut b, "fc2", ConvSpec::pointwise(2 * channels, channels)),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        if x.shape()[1] != self.channels {
            return Err(Error::ChannelBounds {
                op: "mlp_expand2",
                detail: format!(
                    "configured for {} channels, got {}",
                    self.channels,
                    x.shape()[1]
                ),
            });
        }
        let h = self.fc1.forward(s, x)?.relu()?;
        let h = self.norm.forward(s, &h)?;
        self.fc2.forward(s, &h)
    }

    /// Zeroes the output layer, making the block output identically zero.
    pub fn zero_output_layer(&self, store: &mut ParamStore) -> Result<()> {
        self.fc2.zero(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(7))
    }

    #[test]
    fn pointwise_conv_param_count() {
        let (mut store, mut rng) = fresh();
        Conv2d::new(
            &mut Builder::new(&mut store, &mut rng),
            "c",
            ConvSpec::pointwise(32, 32),
        );
        assert_eq!(store.num_params(), 1056);
    }

    #[test]
    fn depthwise_macs() {
        let (mut store, mut rng) = fresh();
        let conv = Conv2d::new(
            &mut Builder::new(&mut store, &mut rng),
            "dw",
            ConvSpec::depthwise(32),
        );
        let s = Session::counting(&store);
        conv.forward(&s, &Tensor::zeros([1, 32, 8, 8])).unwrap();
        assert_eq!(s.costs()[0].macs, 18432);
    }

    #[test]
    fn channel_mismatch() {
        let (mut store, mut rng) = fresh();
        let conv = Conv2d::new(
            &mut Builder::new(&mut store, &mut rng),
            "c",
            ConvSpec::pointwise(4, 4),
        );
        let s = Session::eval(&store);
        assert!(matches!(
            conv.forward(&s, &Tensor::zeros([1, 3, 2, 2])),
            Err(Error::ChannelBounds { .. })
        ));
    }

    #[test]
    fn mlp_zero_output_and_shape() {
        for c in [8, 32] {
            let (mut store, mut rng) = fresh();
            let mlp = Mlp2::new(&mut Builder::new(&mut store, &mut rng), "mlp", c);
            let x = Tensor::from_fn([2, c, 1, 1], |[n, ch, _, _]| (n + ch) as f64 * 0.1);
            let y = mlp.forward(&Session::eval(&store), &x).unwrap();
            assert_eq!(y.shape(), x.shape());
            mlp.zero_output_layer(&mut store).unwrap();
            let y = mlp
                .forward(&Session::eval(&store), &Tensor::zeros([2, c, 1, 1]))
                .unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batchnorm_updates_running_stats_in_train_mode() {
        let (mut store, mut rng) = fresh();
        let bn = BatchNorm2d::new(&mut Builder::new(&mut store, &mut rng), "bn", 1);
        let x = Tensor::new([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let s = Session::train(&store, &tape);
        bn.forward(&s, &x).unwrap();
        let outcome = s.finish();
        store.absorb(outcome, None);
        let rm = &store.buffers()[0].data;
        let rv = &store.buffers()[1].data;
        assert!((rm[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((rv[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
