//! AdamW optimizer and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::loss::{total_loss, LossConfig};
use crate::metrics::DEFAULT_BIN_EDGES;
use crate::model::Duat;
use crate::nn::ParamStore;
use crate::tensor::{Precision, PrecisionGuard, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Steps between validation passes; 0 means once per epoch.
    pub eval_every: usize,
    pub augment: bool,
    /// Seeds batch order and augmentation.
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            steps: 2000,
            eval_every: 0,
            augment: true,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr and weight decay must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            moments: store
                .params()
                .iter()
                .map(|p| (vec![0.0; p.value().numel()], vec![0.0; p.value().numel()]))
                .collect(),
        }
    }

    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)` for every
    /// parameter holding a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let decay = 1.0 - self.lr * self.weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for (id, (m, v)) in ids.into_iter().zip(&mut self.moments) {
            let param = store.param(id);
            let Some(grad) = param.grad() else { continue };
            let value = param.value();
            let mut next = Vec::with_capacity(value.numel());
            for (k, (&p, &g)) in value.data().iter().zip(grad.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                next.push(p * decay - self.lr * update);
            }
            let shape = value.shape();
            store.set_value(id, Tensor::new(shape, next)?)?;
        }
        Ok(())
    }
}

/// Endless shuffled index stream, reshuffled at every epoch boundary.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Sampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub best_val_mdice: Option<f64>,
    /// Parameters at the best validation score (the final ones when there
    /// is no validation set).
    pub best: ParamStore,
}

/// Stacks the images and masks of `batch`.
pub fn collate(batch: &[Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = batch.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor> = batch.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// One forward/backward pass and optimizer update; returns the loss.
pub fn train_step(
    model: &mut Duat,
    opt: &mut AdamW,
    images: &Tensor,
    masks: &Tensor,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let session = model.train_session(&tape);
    let pred = model.forward(&session, images)?;
    let loss = total_loss(&pred, masks, loss_cfg)?;
    let value = loss.item()?;
    let grads = loss.backward()?;
    let outcome = session.finish();
    model.store_mut().absorb(outcome, Some(&grads));
    opt.step(model.store_mut())?;
    model.store_mut().zero_grads();
    Ok(value)
}

/// Trains `model` in place. `log` receives one JSON record per step and
/// per validation pass.
pub fn train(
    model: &mut Duat,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    log: &mut dyn FnMut(serde_json::Value),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let _precision = PrecisionGuard::new(cfg.precision);
    let mut opt = AdamW::new(cfg, model.store());
    let mut sampler = Sampler::new(train_set.len(), ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a065);
    let epoch = train_set.len().div_ceil(cfg.batch_size);
    let eval_every = if cfg.eval_every == 0 {
        epoch
    } else {
        cfg.eval_every
    };

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, ParamStore)> = None;
    for step in 1..=cfg.steps {
        let indices = sampler.next_batch(cfg.batch_size);
        let batch: Vec<Sample> = indices
            .iter()
            .map(|&i| {
                if cfg.augment {
                    augment(&train_set[i], &mut aug_rng)
                } else {
                    train_set[i].clone()
                }
            })
            .collect();
        let (images, masks) = collate(&batch)?;
        let loss = train_step(model, &mut opt, &images, &masks, loss_cfg).map_err(|e| {
            if e.is_numerical() {
                Error::Diverged {
                    step,
                    detail: e.to_string(),
                }
            } else {
                e
            }
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        losses.push(loss);
        log(json!({
            "event": "step",
            "step": step,
            "loss": loss,
            "batch": batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
        }));

        if !val_set.is_empty() && (step % eval_every == 0 || step == cfg.steps) {
            let report = evaluate(model, val_set, &DEFAULT_BIN_EDGES)?;
            let mdice = report.aggregate.mdice;
            log(json!({
                "event": "eval",
                "step": step,
                "epoch": step.div_ceil(epoch),
                "val_mdice": mdice,
                "val_mae": report.aggregate.mae,
            }));
            if best.as_ref().map_or(true, |(b, _)| mdice > *b) {
                best = Some((mdice, model.store().clone()));
            }
        }
    }
    let (best_val_mdice, best) = match best {
        Some((d, s)) => (Some(d), s),
        None => (None, model.store().clone()),
    };
    Ok(TrainOutcome {
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
        best_val_mdice,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Builder, Init};

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = Builder::new(&mut store, &mut rng).param("w", [1, 1, 1, 2], Init::Ones);
        let tape = Tape::new();
        let session = crate::nn::Session::train(&store, &tape);
        let w = session.param(id).unwrap();
        let loss = w
            .mul(&Tensor::new([1, 1, 1, 2], vec![3.0, -2.0]).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        store.absorb(session.finish(), Some(&grads));
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&cfg, &store);
        opt.step(&mut store).unwrap();
        let v = store.param(id).value().data().to_vec();
        assert!(
            (v[0] - 0.9).abs() < 1e-7 && (v[1] - 1.1).abs() < 1e-7,
            "{v:?}"
        );
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id =
            Builder::new(&mut store, &mut rng).param("w", [1, 1, 2, 2], Init::FanIn { fan_in: 4 });
        let before = store.param(id).value().clone();
        let tape = Tape::new();
        let session = crate::nn::Session::train(&store, &tape);
        let loss = session
            .param(id)
            .unwrap()
            .sigmoid()
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        store.absorb(session.finish(), Some(&grads));
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        AdamW::new(&cfg, &store).step(&mut store).unwrap();
        assert_eq!(store.param(id).value(), &before);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(5, ChaCha8Rng::seed_from_u64(1));
        let mut seen = s.next_batch(5);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}
