//! Central finite-difference verification of every backward rule and of the
//! full network plus training loss.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_one, GenSpec};
use crate::error::Result;
use crate::loss::{total_loss, LossConfig};
use crate::model::{Duat, DuatConfig};
use crate::nn::{Session, BN_EPS, LN_EPS};
use crate::tensor::{
    record, trace_kinks, Precision, PrecisionGuard, Shape, Tape, Tensor, DIFFERENTIABLE_OPS,
};

/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Relative step: `eps = STEP * max(1, |x|)`.
pub const STEP: f64 = 1e-3;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub cases: usize,
    pub coordinates: usize,
    /// Coordinates whose difference stencil crossed a relu kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub ops: Vec<OpCheck>,
    pub model: OpCheck,
    /// Registered op kinds that no case exercised.
    pub uncovered: Vec<&'static str>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.uncovered.is_empty() && self.model.passed() && self.ops.iter().all(OpCheck::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.ops
            .iter()
            .chain(std::iter::once(&self.model))
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<20} {:>5} {:>7} {:>7} {:>12}  status\n",
            "op", "cases", "coords", "kinked", "max_rel_err"
        );
        for c in self.ops.iter().chain(std::iter::once(&self.model)) {
            writeln!(
                out,
                "{:<20} {:>5} {:>7} {:>7} {:>12.3e}  {}",
                c.name,
                c.cases,
                c.coordinates,
                c.skipped,
                c.max_rel_err,
                if c.passed() { "ok" } else { "FAIL" }
            )
            .expect("write to string");
        }
        if !self.uncovered.is_empty() {
            writeln!(out, "uncovered ops: {}", self.uncovered.join(", ")).expect("write to string");
        }
        out
    }
}

type OpFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

struct Case {
    op: &'static str,
    inputs: Vec<Tensor>,
    f: OpFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[lo, hi)` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn loss_of(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor], r: &Tensor) -> Result<f64> {
    f(inputs)?.mul(r)?.sum_all()?.item()
}

struct CaseResult {
    max_rel_err: f64,
    coordinates: usize,
    skipped: usize,
    /// Op kinds the case recorded on its tape.
    kinds: Vec<&'static str>,
}

/// Checks one case on every input coordinate.
fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    let probe = (case.f)(&case.inputs)?;
    let r = uniform(rng, probe.shape(), -1.0, 1.0);

    let tape = Tape::new();
    let leaves = case
        .inputs
        .iter()
        .map(|x| tape.leaf(x))
        .collect::<Result<Vec<_>>>()?;
    let loss = (case.f)(&leaves)?.mul(&r)?.sum_all()?;
    let kinds = tape.recorded_kinds();
    let grads = loss.backward()?;

    let (mut worst, mut coords, mut skipped) = (0.0f64, 0, 0);
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(leaf)
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        for k in 0..leaf.numel() {
            match central_difference(&case.inputs, i, k, |xs| loss_of(&case.f, xs, &r))? {
                Some(numeric) => {
                    worst = worst.max(relative_error(analytic.data()[k], numeric));
                    coords += 1;
                }
                None => skipped += 1,
            }
        }
    }
    Ok(CaseResult {
        max_rel_err: worst,
        coordinates: coords,
        skipped,
        kinds,
    })
}

/// Central difference of `eval` in coordinate `k` of input `i`; `None` when
/// the two evaluations sit on different sides of a relu kink.
fn central_difference(
    inputs: &[Tensor],
    i: usize,
    k: usize,
    eval: impl Fn(&[Tensor]) -> Result<f64>,
) -> Result<Option<f64>> {
    let x = inputs[i].data()[k];
    let eps = STEP * x.abs().max(1.0);
    let shifted = |delta: f64| -> Result<(f64, Vec<bool>)> {
        let mut data = inputs[i].to_vec();
        data[k] = x + delta;
        let mut xs = inputs.to_vec();
        xs[i] = Tensor::new(inputs[i].shape(), data)?;
        let (value, kinks) = trace_kinks(|| eval(&xs));
        Ok((value?, kinks))
    };
    let (plus, kinks_plus) = shifted(eps)?;
    let (minus, kinks_minus) = shifted(-eps)?;
    Ok((kinks_plus == kinks_minus).then(|| (plus - minus) / (2.0 * eps)))
}

fn binary_cases(rng: &mut ChaCha8Rng, cases: &mut Vec<Case>) {
    type Bin = fn(&Tensor, &Tensor) -> Result<Tensor>;
    let ops: [(&'static str, Bin); 4] = [
        ("add", Tensor::add),
        ("sub", Tensor::sub),
        ("mul", Tensor::mul),
        ("div", Tensor::div),
    ];
    let pairs: [(Shape, Shape); 3] = [
        ([2, 3, 4, 5], [2, 3, 4, 5]),
        ([2, 3, 4, 5], [1, 3, 1, 1]),
        ([3, 2, 3, 3], [3, 2, 1, 1]),
    ];
    for (op, f) in ops {
        for (sa, sb) in pairs {
            let a = uniform(rng, sa, -2.0, 2.0);
            let b = if op == "div" {
                away_from_zero(rng, sb, 0.5, 1.5)
            } else {
                uniform(rng, sb, -2.0, 2.0)
            };
            cases.push(Case {
                op,
                inputs: vec![a, b],
                f: Box::new(move |x| f(&x[0], &x[1])),
            });
        }
    }
}

fn unary_cases(rng: &mut ChaCha8Rng, cases: &mut Vec<Case>) {
    type Un = fn(&Tensor) -> Result<Tensor>;
    let ops: [(&'static str, Un); 11] = [
        ("neg", Tensor::neg),
        ("one_minus", Tensor::one_minus),
        ("scale", |x| x.scale(1.7)),
        ("add_scalar", |x| x.add_scalar(-0.3)),
        ("relu", Tensor::relu),
        ("sigmoid", Tensor::sigmoid),
        ("gelu", Tensor::gelu),
        ("softplus", Tensor::softplus),
        ("sum_all", Tensor::sum_all),
        ("mean_all", Tensor::mean_all),
        ("sum_spatial", Tensor::sum_spatial),
    ];
    let shapes: [Shape; 3] = [[1, 1, 2, 3], [2, 3, 4, 5], [3, 2, 1, 7]];
    for (op, f) in ops {
        for shape in shapes {
            // relu has a kink at zero that a finite difference must not straddle
            let x = away_from_zero(rng, shape, 0.05, 3.0);
            cases.push(Case {
                op,
                inputs: vec![x],
                f: Box::new(move |x| f(&x[0])),
            });
        }
    }
}

fn layout_cases(rng: &mut ChaCha8Rng, cases: &mut Vec<Case>) {
    let reshapes: [(Shape, Shape); 3] = [
        ([2, 3, 4, 5], [2, 60, 1, 1]),
        ([1, 2, 3, 4], [1, 1, 6, 4]),
        ([3, 1, 2, 2], [1, 3, 4, 1]),
    ];
    for (from, to) in reshapes {
        cases.push(Case {
            op: "reshape",
            inputs: vec![uniform(rng, from, -1.0, 1.0)],
            f: Box::new(move |x| x[0].reshape(to)),
        });
    }
    for shape in [[1, 1, 2, 3], [2, 3, 4, 5], [1, 2, 6, 1]] {
        cases.push(Case {
            op: "transpose_last2",
            inputs: vec![uniform(rng, shape, -1.0, 1.0)],
            f: Box::new(|x| x[0].transpose_last2()),
        });
    }
    for (shape, k) in [([1, 2, 2, 2], 1), ([2, 5, 3, 2], 3), ([1, 4, 1, 3], 2)] {
        cases.push(Case {
            op: "split_channels",
            inputs: vec![uniform(rng, shape, -1.0, 1.0)],
            f: Box::new(move |x| {
                let (a, b) = x[0].split_channels(k)?;
                Tensor::concat_channels(&[&b, &a.scale(3.0)?])
            }),
        });
    }
    for channels in [vec![1, 2], vec![3, 1, 2], vec![2, 2, 2, 1]] {
        let inputs: Vec<Tensor> = channels
            .iter()
            .map(|&c| uniform(rng, [2, c, 3, 2], -1.0, 1.0))
            .collect();
        cases.push(Case {
            op: "concat_channels",
            inputs,
            f: Box::new(|x| Tensor::concat_channels(&x.iter().collect::<Vec<_>>())),
        });
    }
}

fn linalg_cases(rng: &mut ChaCha8Rng, cases: &mut Vec<Case>) {
    for (sa, sb) in [
        ([1, 1, 3, 4], [1, 1, 4, 2]),
        ([2, 3, 5, 4], [2, 3, 4, 3]),
        ([1, 2, 1, 6], [1, 2, 6, 1]),
    ] {
        cases.push(Case {
            op: "matmul",
            inputs: vec![uniform(rng, sa, -1.0, 1.0), uniform(rng, sb, -1.0, 1.0)],
            f: Box::new(|x| x[0].matmul(&x[1])),
        });
    }
    for (shape, axis) in [
        ([1, 1, 1, 5], 3),
        ([2, 3, 4, 5], 2),
        ([2, 4, 3, 2], 1),
        ([3, 2, 2, 2], 0),
    ] {
        cases.push(Case {
            op: "softmax",
            inputs: vec![uniform(rng, shape, -2.0, 2.0)],
            f: Box::new(move |x| x[0].softmax(axis)),
        });
    }
    for (shape, oh, ow) in [
        ([1, 2, 3, 4], 6, 8),
        ([2, 1, 8, 8], 3, 5),
        ([1, 3, 4, 6], 7, 3),
    ] {
        cases.push(Case {
            op: "resize_bilinear",
            inputs: vec![uniform(rng, shape, -1.0, 1.0)],
            f: Box::new(move |x| x[0].resize_bilinear(oh, ow)),
        });
    }
}

fn conv_cases(rng: &mut ChaCha8Rng, cases: &mut Vec<Case>) {
    // (input, weight, bias, stride, padding, groups)
    let specs: [(Shape, Shape, bool, usize, usize, usize); 7] = [
        ([2, 3, 5, 5], [4, 3, 3, 3], true, 1, 1, 1),
        ([1, 2, 6, 6], [3, 2, 3, 3], false, 2, 1, 1),
        ([2, 4, 3, 3], [5, 4, 1, 1], true, 1, 0, 1),
        ([1, 4, 5, 4], [4, 1, 3, 3], true, 1, 1, 4),
        ([2, 4, 4, 4], [6, 2, 3, 3], false, 1, 1, 2),
        ([1, 3, 8, 8], [2, 3, 7, 7], true, 4, 3, 1),
        ([1, 3, 4, 4], [3, 3, 2, 2], true, 2, 0, 1),
    ];
    for (sx, sw, bias, stride, pad, groups) in specs {
        let mut inputs = vec![uniform(rng, sx, -1.0, 1.0), uniform(rng, sw, -1.0, 1.0)];
        if bias {
            inputs.push(uniform(rng, [1, sw[0], 1, 1], -1.0, 1.0));
        }
        cases.push(Case {
            op: "conv2d",
            inputs,
            f: Box::new(move |x| x[0].conv2d(&x[1], x.get(2), stride, pad, groups)),
        });
    }
}

fn norm_cases(rng: &mut ChaCha8Rng, cases: &mut Vec<Case>) {
    for shape in [[2, 3, 2, 2], [4, 2, 1, 1], [1, 2, 3, 3]] {
        let c = shape[1];
        let inputs = vec![
            uniform(rng, shape, -2.0, 2.0),
            uniform(rng, [1, c, 1, 1], 0.5, 1.5),
            uniform(rng, [1, c, 1, 1], -0.5, 0.5),
        ];
        cases.push(Case {
            op: "batch_norm_train",
            inputs: inputs.clone(),
            f: Box::new(|x| Ok(x[0].batch_norm_train(&x[1], &x[2], BN_EPS)?.0)),
        });
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        cases.push(Case {
            op: "batch_norm_eval",
            inputs,
            f: Box::new(move |x| x[0].batch_norm_eval(&x[1], &x[2], &mean, &var, BN_EPS)),
        });
    }
    // two channels would normalize every pixel to +-1, a flat function
    for shape in [[1, 3, 3, 3], [2, 4, 2, 2], [1, 5, 1, 2]] {
        let c = shape[1];
        let inputs = vec![
            uniform(rng, shape, -2.0, 2.0),
            uniform(rng, [1, c, 1, 1], 0.5, 1.5),
            uniform(rng, [1, c, 1, 1], -0.5, 0.5),
        ];
        cases.push(Case {
            op: "layer_norm",
            inputs,
            f: Box::new(|x| x[0].layer_norm(&x[1], &x[2], LN_EPS)),
        });
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    binary_cases(rng, &mut cases);
    unary_cases(rng, &mut cases);
    layout_cases(rng, &mut cases);
    linalg_cases(rng, &mut cases);
    conv_cases(rng, &mut cases);
    norm_cases(rng, &mut cases);
    cases
}

/// Runs every per-op case, grouped by op kind in registration order.
pub fn check_ops(seed: u64) -> Result<(Vec<OpCheck>, Vec<&'static str>)> {
    let _precision = PrecisionGuard::new(Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = op_cases(&mut rng);
    let mut covered = BTreeSet::new();
    let mut checks: Vec<OpCheck> = Vec::new();
    for case in &cases {
        let r = check_case(case, &mut rng)?;
        if r.kinds.contains(&case.op) {
            covered.insert(case.op);
        }
        match checks.iter_mut().find(|c| c.name == case.op) {
            Some(c) => {
                c.cases += 1;
                c.coordinates += r.coordinates;
                c.skipped += r.skipped;
                c.max_rel_err = c.max_rel_err.max(r.max_rel_err);
            }
            None => checks.push(OpCheck {
                name: case.op.to_string(),
                cases: 1,
                coordinates: r.coordinates,
                skipped: r.skipped,
                max_rel_err: r.max_rel_err,
            }),
        }
    }
    checks.sort_by_key(|c| {
        DIFFERENTIABLE_OPS
            .iter()
            .position(|op| *op == c.name)
            .unwrap_or(usize::MAX)
    });
    let uncovered = DIFFERENTIABLE_OPS
        .iter()
        .copied()
        .filter(|op| !covered.contains(op))
        .collect();
    Ok((checks, uncovered))
}

/// Input size of the whole-network check.
pub const MODEL_INPUT: usize = 32;
/// Sampled coordinates per parameter tensor in the whole-network check.
pub const MODEL_COORDS_PER_PARAM: usize = 2;

/// Network + training loss against finite differences on a two-image batch,
/// sampling a few coordinates of every parameter tensor.
pub fn check_model(config: &DuatConfig, seed: u64) -> Result<OpCheck> {
    let _precision = PrecisionGuard::new(Precision::F64);
    let config = DuatConfig {
        input_size: (MODEL_INPUT, MODEL_INPUT),
        ..config.clone()
    };
    let model = Duat::new(config)?;
    let spec = GenSpec {
        size: (MODEL_INPUT, MODEL_INPUT),
        fraction: (0.05, 0.3),
        seed,
        ..GenSpec::default()
    };
    let samples = [generate_one(&spec, 0)?, generate_one(&spec, 1)?];
    let images = Tensor::stack(&[samples[0].image.clone(), samples[1].image.clone()])?;
    let masks = Tensor::stack(&[samples[0].mask.clone(), samples[1].mask.clone()])?;
    let loss_cfg = LossConfig::default();

    let tape = Tape::new();
    let session = Session::train(model.store(), &tape);
    let loss = total_loss(&model.forward(&session, &images)?, &masks, &loss_cfg)?;
    let grads = loss.backward()?;
    let store = model.store();
    let mut analytic = Vec::new();
    for id in store.ids() {
        let g = session
            .param(id)
            .ok()
            .and_then(|leaf| grads.get(&leaf))
            .unwrap_or_else(|| Tensor::zeros(store.param(id).value().shape()));
        analytic.push(g);
    }
    drop(session);

    let params: Vec<Tensor> = store.params().iter().map(|p| p.value().clone()).collect();
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut probe = store.clone();
        for (id, v) in store.ids().zip(values) {
            if v.data() != probe.param(id).value().data() {
                probe.set_value(id, v.clone())?;
            }
        }
        let tape = Tape::new();
        let s = Session::train(&probe, &tape);
        total_loss(&model.forward(&s, &images)?, &masks, &loss_cfg)?.item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c4e);
    let (mut worst, mut coords, mut skipped) = (0.0f64, 0, 0);
    for (i, p) in params.iter().enumerate() {
        let wanted = MODEL_COORDS_PER_PARAM.min(p.numel());
        let mut found = 0;
        // a stencil straddling a kink says nothing about the gradient, so
        // draw another coordinate
        for _ in 0..4 * wanted {
            if found == wanted {
                break;
            }
            let k = rng.gen_range(0..p.numel());
            match central_difference(&params, i, k, eval)? {
                Some(numeric) => {
                    worst = worst.max(relative_error(analytic[i].data()[k], numeric));
                    found += 1;
                }
                None => skipped += 1,
            }
        }
        coords += found;
    }
    Ok(OpCheck {
        name: "model+loss".to_string(),
        cases: 1,
        coordinates: coords,
        skipped,
        max_rel_err: worst,
    })
}

/// Full suite: every registered op plus the whole network.
pub fn run(config: &DuatConfig, seed: u64) -> Result<GradcheckReport> {
    let (ops, uncovered) = check_ops(seed)?;
    let model = check_model(config, seed)?;
    Ok(GradcheckReport {
        ops,
        model,
        uncovered,
    })
}

/// `2x` forward with a backward rule that claims `2.2`.
fn corrupted_double(x: &Tensor) -> Result<Tensor> {
    let out = x.data().iter().map(|v| 2.0 * v).collect();
    record(
        "corrupted_double",
        x.shape(),
        out,
        &[x],
        Box::new(|g, _| vec![Some(g.iter().map(|v| 2.2 * v).collect())]),
    )
}

/// Negative control: the suite applied to an op with a wrong backward rule.
pub fn corrupted_rule_check(seed: u64) -> Result<OpCheck> {
    let _precision = PrecisionGuard::new(Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = Case {
        op: "corrupted_double",
        inputs: vec![uniform(&mut rng, [1, 2, 3, 3], -1.0, 1.0)],
        f: Box::new(|x| corrupted_double(&x[0])),
    };
    let r = check_case(&case, &mut rng)?;
    Ok(OpCheck {
        name: case.op.to_string(),
        cases: 1,
        coordinates: r.coordinates,
        skipped: r.skipped,
        max_rel_err: r.max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_and_is_covered() {
        let (ops, uncovered) = check_ops(3).unwrap();
        assert!(uncovered.is_empty(), "{uncovered:?}");
        for c in &ops {
            assert!(c.passed(), "{c:?}");
            assert!(c.cases >= 3, "{c:?}");
        }
    }

    #[test]
    fn corrupted_rule_is_reported() {
        let c = corrupted_rule_check(0).unwrap();
        assert!(!c.passed());
        assert!(c.max_rel_err > 0.05);
    }

    #[test]
    fn whole_network_passes() {
        let c = check_model(&DuatConfig::default(), 1).unwrap();
        assert!(c.passed(), "{c:?}");
        assert!(c.coordinates > 400, "{c:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
