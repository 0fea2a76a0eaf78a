//! Brute-force oracles, invariant probes and a hand-built cost spreadsheet
//! shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::Path;

use duat::data::GenSpec;
use duat::encoder::SrAttention;
use duat::glsa::{Arrangement, Gsa};
use duat::loss::weighted_bce;
use duat::metrics::score;
use duat::model::{Duat, DuatConfig};
use duat::nn::{Builder, ParamStore, Session};
use duat::pipeline::{load_model, save_model};
use duat::sba::Rau;
use duat::train::{train, TrainConfig};
use duat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Worst absolute deviation over a batch of random instances.
#[derive(Debug, Clone, Copy)]
pub struct OracleResult {
    pub instances: usize,
    pub worst: f64,
}

impl OracleResult {
    fn over(instances: usize, mut f: impl FnMut(usize) -> f64) -> Self {
        let worst = (0..instances).map(&mut f).fold(0.0, f64::max);
        OracleResult { instances, worst }
    }
}

// ---------------------------------------------------------------- oracles

/// Convolution written as nested loops over every output and tap.
pub fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let [n, _, h, wd] = x.shape();
    let [co, cig, k, _] = w.shape();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let per_group = co / groups;
    let mut out = Vec::with_capacity(n * co * oh * ow);
    for b in 0..n {
        for o in 0..co {
            let g = o / per_group;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.at([0, o, 0, 0]));
                    for ci in 0..cig {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at([b, g * cig + ci, iy as usize, ix as usize])
                                    * w.at([o, ci, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn conv_oracle(seed: u64, instances: usize) -> OracleResult {
    let mut r = rng(seed);
    OracleResult::over(instances, |_| {
        let groups = r.gen_range(1..=3);
        let cig = r.gen_range(1..=3);
        let cog = r.gen_range(1..=3);
        let k = [1, 2, 3, 5][r.gen_range(0..4)];
        let stride = r.gen_range(1..=3);
        let pad = r.gen_range(0..=k / 2);
        let h = r.gen_range(k.max(2)..=9);
        let w = r.gen_range(k.max(2)..=9);
        let n = r.gen_range(1..=2);
        let x = uniform([n, groups * cig, h, w], -1.0, 1.0, &mut r);
        let wt = uniform([groups * cog, cig, k, k], -1.0, 1.0, &mut r);
        let b = uniform([1, groups * cog, 1, 1], -1.0, 1.0, &mut r);
        let bias = r.gen_bool(0.5).then_some(&b);
        let y = x.conv2d(&wt, bias, stride, pad, groups).unwrap();
        max_diff(y.data(), &naive_conv(&x, &wt, bias, stride, pad, groups))
    })
}

/// Depthwise convolution checked one channel at a time against a scalar
/// stencil.
pub fn depthwise_oracle(seed: u64, instances: usize) -> OracleResult {
    let mut r = rng(seed);
    OracleResult::over(instances, |_| {
        let c = r.gen_range(1..=6);
        let k = [3, 5][r.gen_range(0..2)];
        let stride = r.gen_range(1..=2);
        let pad = k / 2;
        let (h, w) = (r.gen_range(3..=8), r.gen_range(3..=8));
        let x = uniform([1, c, h, w], -1.0, 1.0, &mut r);
        let wt = uniform([c, 1, k, k], -1.0, 1.0, &mut r);
        let y = x.conv2d(&wt, None, stride, pad, c).unwrap();
        let (oh, ow) = (
            (h + 2 * pad - k) / stride + 1,
            (w + 2 * pad - k) / stride + 1,
        );
        let mut expected = Vec::new();
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix) {
                                acc += x.at([0, ch, iy as usize, ix as usize])
                                    * wt.at([ch, 0, ky, kx]);
                            }
                        }
                    }
                    expected.push(acc);
                }
            }
        }
        max_diff(y.data(), &expected)
    })
}

pub fn matmul_oracle(seed: u64, instances: usize) -> OracleResult {
    let mut r = rng(seed);
    OracleResult::over(instances, |_| {
        let (n, c) = (r.gen_range(1..=2), r.gen_range(1..=3));
        let (a, b, d) = (r.gen_range(1..=6), r.gen_range(1..=6), r.gen_range(1..=6));
        let x = uniform([n, c, a, b], -2.0, 2.0, &mut r);
        let y = uniform([n, c, b, d], -2.0, 2.0, &mut r);
        let z = x.matmul(&y).unwrap();
        let mut expected = Vec::new();
        for i in 0..n {
            for j in 0..c {
                for p in 0..a {
                    for q in 0..d {
                        expected.push(
                            (0..b)
                                .map(|m| x.at([i, j, p, m]) * y.at([i, j, m, q]))
                                .sum(),
                        );
                    }
                }
            }
        }
        max_diff(z.data(), &expected)
    })
}

/// Half-pixel-centre bilinear sample of one plane at continuous source
/// coordinates.
fn bilinear_at(x: &Tensor, b: usize, c: usize, sy: f64, sx: f64) -> f64 {
    let [_, _, h, w] = x.shape();
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let v = |yy, xx| x.at([b, c, yy, xx]);
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
        + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

pub fn bilinear_oracle(seed: u64, instances: usize) -> OracleResult {
    let mut r = rng(seed);
    OracleResult::over(instances, |_| {
        let (h, w) = (r.gen_range(1..=7), r.gen_range(1..=7));
        let (oh, ow) = (r.gen_range(1..=14), r.gen_range(1..=14));
        let x = uniform([2, 2, h, w], -1.0, 1.0, &mut r);
        let y = x.resize_bilinear(oh, ow).unwrap();
        let mut expected = Vec::new();
        for b in 0..2 {
            for c in 0..2 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                        let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                        expected.push(bilinear_at(&x, b, c, sy, sx));
                    }
                }
            }
        }
        max_diff(y.data(), &expected)
    })
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn value(store: &ParamStore, id: duat::nn::ParamId) -> Tensor {
    store.param(id).value().clone()
}

/// Pointwise conv `w x + b` at one pixel.
fn pointwise(w: &Tensor, b: &Tensor, x: &Tensor, n: usize, y: usize, xx: usize) -> Vec<f64> {
    let [co, ci, _, _] = w.shape();
    (0..co)
        .map(|o| {
            b.at([0, o, 0, 0])
                + (0..ci)
                    .map(|i| w.at([o, i, 0, 0]) * x.at([n, i, y, xx]))
                    .sum::<f64>()
        })
        .collect()
}

pub fn gsa_context_oracle(seed: u64, instances: usize) -> OracleResult {
    let mut r = rng(seed);
    OracleResult::over(instances, |i| {
        let c = [2, 4, 8, 32][i % 4];
        let (n, h, w) = (r.gen_range(1..=2), r.gen_range(1..=5), r.gen_range(1..=5));
        let mut store = ParamStore::new();
        let mut init = rng(seed ^ i as u64);
        let gsa = Gsa::new(&mut Builder::new(&mut store, &mut init), "gsa", c);
        let x = uniform([n, c, h, w], -2.0, 2.0, &mut r);
        let ctx = gsa.context(&Session::eval(&store), &x).unwrap();
        let wm = value(&store, gsa.mask().weight());
        let bm = value(&store, gsa.mask().bias().unwrap());
        let mut expected = Vec::new();
        for b in 0..n {
            let mut logits = Vec::new();
            for y in 0..h {
                for xx in 0..w {
                    logits.push(pointwise(&wm, &bm, &x, b, y, xx)[0]);
                }
            }
            let a = softmax(&logits);
            for ch in 0..c {
                expected.push((0..h * w).map(|p| a[p] * x.at([b, ch, p / w, p % w])).sum());
            }
        }
        max_diff(ctx.data(), &expected)
    })
}

/// Spatial-reduction attention with reduction 1 against textbook dense
/// multi-head attention; both the probabilities and the projected output
/// are compared.
pub fn dense_attention_oracle(seed: u64, instances: usize) -> OracleResult {
    let mut r = rng(seed);
    OracleResult::over(instances, |i| {
        let heads = [1, 2, 4][r.gen_range(0..3)];
        let dim = heads * r.gen_range(1..=3);
        let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let n = r.gen_range(1..=2);
        let mut store = ParamStore::new();
        let mut init = rng(seed.wrapping_mul(31) ^ i as u64);
        let attn = SrAttention::new(
            &mut Builder::new(&mut store, &mut init),
            "attn",
            dim,
            heads,
            1,
        );
        let x = uniform([n, dim, h, w], -1.5, 1.5, &mut r);
        let parts = attn.attend(&Session::eval(&store), &x).unwrap();

        let lin = |conv: &duat::nn::Conv2d| {
            (
                value(&store, conv.weight()),
                value(&store, conv.bias().unwrap()),
            )
        };
        let (wq, bq) = lin(attn.q());
        let (wk, bk) = lin(attn.k());
        let (wv, bv) = lin(attn.v());
        let (wp, bp) = lin(attn.proj());
        let t = h * w;
        let d = dim / heads;
        let mut weights = Vec::new();
        let mut delta = vec![0.0; n * dim * t];
        for b in 0..n {
            let tok = |wt: &Tensor, bs: &Tensor| -> Vec<Vec<f64>> {
                (0..t)
                    .map(|p| pointwise(wt, bs, &x, b, p / w, p % w))
                    .collect()
            };
            let (q, k, v) = (tok(&wq, &bq), tok(&wk, &bk), tok(&wv, &bv));
            let mut mixed = vec![vec![0.0; dim]; t];
            for hd in 0..heads {
                for p in 0..t {
                    let scores: Vec<f64> = (0..t)
                        .map(|m| {
                            (0..d)
                                .map(|j| q[p][hd * d + j] * k[m][hd * d + j])
                                .sum::<f64>()
                                / (d as f64).sqrt()
                        })
                        .collect();
                    let a = softmax(&scores);
                    for j in 0..d {
                        mixed[p][hd * d + j] = (0..t).map(|m| a[m] * v[m][hd * d + j]).sum();
                    }
                    weights.extend(a);
                }
            }
            for p in 0..t {
                for o in 0..dim {
                    let acc = bp.at([0, o, 0, 0])
                        + (0..dim)
                            .map(|c| wp.at([o, c, 0, 0]) * mixed[p][c])
                            .sum::<f64>();
                    delta[(b * dim + o) * t + p] = acc;
                }
            }
        }
        max_diff(parts.weights.data(), &weights).max(max_diff(parts.delta.data(), &delta))
    })
}

// ------------------------------------------------------------- invariants

/// Largest deviation of a softmax slice sum from one.
pub fn softmax_sum_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [
        r.gen_range(1..=3),
        r.gen_range(1..=3),
        r.gen_range(1..=5),
        r.gen_range(1..=5),
    ];
    let x = uniform(shape, -30.0, 30.0, &mut r);
    let axis = r.gen_range(0..4);
    let y = x.softmax(axis).unwrap();
    let mut worst: f64 = 0.0;
    for a in 0..shape[0] {
        for b in 0..shape[1] {
            for c in 0..shape[2] {
                for d in 0..shape[3] {
                    let idx = [a, b, c, d];
                    if idx[axis] != 0 {
                        continue;
                    }
                    let total: f64 = (0..shape[axis])
                        .map(|k| {
                            let mut j = idx;
                            j[axis] = k;
                            y.at(j)
                        })
                        .sum();
                    worst = worst.max((total - 1.0).abs());
                }
            }
        }
    }
    worst
}

fn random_rau(seed: u64) -> (ParamStore, Rau, Tensor, Tensor) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let rau = Rau::new(&mut Builder::new(&mut store, &mut r), "rau", 8);
    let shape = [
        r.gen_range(1..=2),
        8,
        r.gen_range(1..=5),
        r.gen_range(1..=5),
    ];
    let t1 = uniform(shape, -3.0, 3.0, &mut r);
    let t2 = uniform(shape, -3.0, 3.0, &mut r);
    (store, rau, t1, t2)
}

/// Gates lie strictly inside (0, 1) and the complement is `1 - g` to the
/// bit, summing back to exactly one.
pub fn gate_violation(seed: u64) -> Option<String> {
    let (store, rau, t1, t2) = random_rau(seed);
    let gates = rau.gates(&Session::eval(&store), &t1, &t2).unwrap();
    for g in [&gates.g1, &gates.g2] {
        let comp = g.one_minus().unwrap();
        for (&v, &c) in g.data().iter().zip(comp.data()) {
            if !(v > 0.0 && v < 1.0) {
                return Some(format!("gate {v} outside (0,1)"));
            }
            if c.to_bits() != (1.0 - v).to_bits() || v + c != 1.0 {
                return Some(format!("complement of {v} is {c}"));
            }
        }
    }
    None
}

/// Reverse-attention output against the same formula expanded and
/// evaluated in a different order.
pub fn rau_order_gap(seed: u64) -> f64 {
    let (store, rau, t1, t2) = random_rau(seed);
    let s = Session::eval(&store);
    let y = rau.forward(&s, &t1, &t2).unwrap();
    let g = rau.gates(&s, &t1, &t2).unwrap();
    let expected: Vec<f64> = (0..t1.numel())
        .map(|i| {
            let (a, b) = (g.g1.data()[i], g.g2.data()[i]);
            let (x1, x2) = (t1.data()[i], t2.data()[i]);
            (b * x2 - a * b * x2) + x1 * (1.0 + a)
        })
        .collect();
    max_diff(y.data(), &expected)
}

/// Checks dice >= iou with equality exactly at 0 and 1 on a random mask
/// pair; returns a description of the first violation.
pub fn dice_iou_violation(pred: &[bool], gt: &[bool]) -> Option<String> {
    let p: Vec<f64> = pred.iter().map(|&b| b as u8 as f64).collect();
    let g: Vec<f64> = gt.iter().map(|&b| b as u8 as f64).collect();
    let s = score(&p, &p, &g).unwrap();
    let extreme = s.dice == 0.0 || s.dice == 1.0;
    if s.dice < s.iou || (extreme != (s.dice == s.iou)) {
        return Some(format!("dice {} iou {}", s.dice, s.iou));
    }
    if !(0.0..=1.0).contains(&s.mae) {
        return Some(format!("mae {}", s.mae));
    }
    None
}

pub fn random_masks(seed: u64) -> (Vec<bool>, Vec<bool>) {
    let mut r = rng(seed);
    let n = r.gen_range(1..=64);
    let (pp, pg) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
    let p = (0..n).map(|_| r.gen_bool(pp)).collect();
    let g = (0..n).map(|_| r.gen_bool(pg)).collect();
    (p, g)
}

/// Unit-weight weighted BCE against the mean logistic loss computed from
/// probabilities.
pub fn unit_bce_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [
        r.gen_range(1..=3),
        1,
        r.gen_range(1..=6),
        r.gen_range(1..=6),
    ];
    let s = uniform(shape, -4.0, 4.0, &mut r);
    let g = Tensor::from_fn(shape, |_| r.gen_range(0..2) as f64);
    let got = weighted_bce(&s, &g, &Tensor::ones(shape)).unwrap();
    let plane = shape[2] * shape[3];
    let expected: Vec<f64> = (0..shape[0])
        .map(|b| {
            (0..plane)
                .map(|k| {
                    let (z, y) = (s.data()[b * plane + k], g.data()[b * plane + k]);
                    let p = 1.0 / (1.0 + (-z).exp());
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / plane as f64
        })
        .collect();
    max_diff(got.data(), &expected)
}

// ------------------------------------------------------------- structure

/// A GSA block whose MLP output layer is zero returns its input bit for bit.
pub fn gsa_zero_identity(seed: u64) -> bool {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let gsa = Gsa::new(&mut Builder::new(&mut store, &mut r), "gsa", 32);
    gsa.zero_output_layer(&mut store).unwrap();
    let x = uniform([2, 32, 3, 5], -5.0, 5.0, &mut r);
    let y = gsa.forward(&Session::eval(&store), &x).unwrap();
    y.data()
        .iter()
        .zip(x.data())
        .all(|(a, b)| a.to_bits() == b.to_bits())
}

/// Feature map shapes at `(h, w)` follow `h / 2^(i+1)` with the configured
/// widths; returns the first mismatch.
pub fn pyramid_mismatch(h: usize, w: usize) -> Option<String> {
    let cfg = DuatConfig {
        input_size: (h, w),
        ..DuatConfig::default()
    };
    let model = Duat::new(cfg.clone()).unwrap();
    let x = uniform([1, 3, h, w], 0.0, 1.0, &mut rng(h as u64));
    let p = model.encode(&Session::eval(model.store()), &x).unwrap();
    for (i, f) in p.levels().into_iter().enumerate() {
        let s = 1 << (i + 2);
        let want = [1, cfg.encoder.dims[i], h / s, w / s];
        if f.shape() != want {
            return Some(format!("level {} is {:?}, want {want:?}", i + 1, f.shape()));
        }
    }
    let pred = model.infer(&x).unwrap();
    if pred.s1.shape() != [1, 1, h, w] || pred.s2.shape() != [1, 1, h, w] {
        return Some(format!(
            "outputs {:?} {:?}",
            pred.s1.shape(),
            pred.s2.shape()
        ));
    }
    None
}

/// Saves a trained-looking model, reloads it and compares every parameter,
/// buffer and output bit.
pub fn checkpoint_mismatch(dir: &Path) -> Option<String> {
    let cfg = DuatConfig {
        input_size: (32, 32),
        seed: 9,
        ..DuatConfig::default()
    };
    let mut model = Duat::new(cfg).unwrap();
    let data = duat::data::generate(
        &GenSpec {
            size: (32, 32),
            ..GenSpec::default()
        },
        4,
    )
    .unwrap();
    let tc = TrainConfig {
        steps: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let out = train(
        &mut model,
        &data,
        &[],
        &tc,
        &Default::default(),
        &mut |_| {},
    )
    .unwrap();
    *model.store_mut() = out.best;
    let path = dir.join("round_trip.ckpt");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for (a, b) in model.store().params().iter().zip(back.store().params()) {
        if a.name != b.name || bits(a.value()) != bits(b.value()) {
            return Some(format!("parameter {} differs", a.name));
        }
    }
    for (a, b) in model.store().buffers().iter().zip(back.store().buffers()) {
        if a.data
            .iter()
            .map(|v| v.to_bits())
            .ne(b.data.iter().map(|v| v.to_bits()))
        {
            return Some(format!("buffer {} differs", a.name));
        }
    }
    let x = uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng(1));
    if bits(&model.infer(&x).unwrap().s1) != bits(&back.infer(&x).unwrap().s1) {
        return Some("reloaded model predicts differently".into());
    }
    None
}

/// Log lines of a short fixed-seed training run on generated data.
pub fn training_log(seed: u64) -> Vec<String> {
    let spec = GenSpec {
        size: (32, 32),
        seed,
        ..GenSpec::default()
    };
    let samples = duat::data::generate(&spec, 6).unwrap();
    let mut model = Duat::new(DuatConfig {
        input_size: (32, 32),
        seed,
        ..DuatConfig::default()
    })
    .unwrap();
    let tc = TrainConfig {
        steps: 4,
        batch_size: 2,
        eval_every: 2,
        seed,
        ..TrainConfig::default()
    };
    let mut lines = Vec::new();
    train(
        &mut model,
        &samples[..4],
        &samples[4..],
        &tc,
        &Default::default(),
        &mut |r| lines.push(r.to_string()),
    )
    .unwrap();
    lines
}

// ----------------------------------------------------------- spreadsheet

/// One spreadsheet line: a named layer with its parameter count and, for
/// layers that multiply, its multiply-accumulates on one image.
#[derive(Debug, Clone)]
pub struct SheetRow {
    pub layer: String,
    pub params: usize,
    pub macs: Option<u64>,
}

#[derive(Debug, Default)]
pub struct Sheet {
    pub rows: Vec<SheetRow>,
}

impl Sheet {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        layer: String,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        bias: bool,
        out_px: usize,
    ) {
        let taps = k * k * cin / groups;
        self.rows.push(SheetRow {
            layer,
            params: taps * cout + if bias { cout } else { 0 },
            macs: Some((taps * cout * out_px) as u64),
        });
    }

    fn norm(&mut self, layer: String, c: usize) {
        self.rows.push(SheetRow {
            layer,
            params: 2 * c,
            macs: None,
        });
    }

    fn matmul(&mut self, layer: String, macs: usize) {
        self.rows.push(SheetRow {
            layer,
            params: 0,
            macs: Some(macs as u64),
        });
    }

    pub fn params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn params_under(&self, prefix: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.layer.starts_with(prefix))
            .map(|r| r.params)
            .sum()
    }

    pub fn macs(&self) -> u64 {
        self.rows.iter().filter_map(|r| r.macs).sum()
    }

    fn gsa(&mut self, p: &str, c: usize, px: usize) {
        self.conv(format!("{p}.mask"), c, 1, 1, 1, true, px);
        self.matmul(format!("{p}.context"), c * px);
        self.conv(format!("{p}.mlp.fc1"), c, 2 * c, 1, 1, true, 1);
        self.norm(format!("{p}.mlp.norm"), 2 * c);
        self.conv(format!("{p}.mlp.fc2"), 2 * c, c, 1, 1, true, 1);
    }

    fn lsa(&mut self, p: &str, c: usize, px: usize) {
        for i in 0..3 {
            let cin = if i == 0 { c } else { 32 };
            self.conv(format!("{p}.pw{i}"), cin, 32, 1, 1, true, px);
            self.conv(format!("{p}.dw{i}"), 32, 32, 3, 32, true, px);
        }
        self.conv(format!("{p}.out"), 32, c, 1, 1, true, px);
    }
}

/// Per-layer parameters and MACs of `cfg` at its input size, derived from
/// the layer formulas alone.
pub fn spreadsheet(cfg: &DuatConfig) -> Sheet {
    let mut s = Sheet::default();
    let (h, w) = cfg.input_size;
    let e = &cfg.encoder;
    let grid = |i: usize| (h >> (i + 1)) * (w >> (i + 1));
    let mut cin = 3;
    for st in 0..4 {
        let (d, px) = (e.dims[st], grid(st + 1));
        let p = format!("encoder.stage{}", st + 1);
        let k = if st == 0 { 7 } else { 3 };
        s.conv(format!("{p}.patch_embed.proj"), cin, d, k, 1, true, px);
        s.norm(format!("{p}.patch_embed.norm"), d);
        let r = e.reductions[st];
        let kv = px / (r * r);
        for b in 0..e.depths[st] {
            let a = format!("{p}.block{b}.attn");
            s.norm(format!("{a}.norm"), d);
            if r > 1 {
                s.conv(format!("{a}.sr"), d, d, r, 1, true, kv);
                s.norm(format!("{a}.sr_norm"), d);
            }
            s.conv(format!("{a}.q"), d, d, 1, 1, true, px);
            s.conv(format!("{a}.k"), d, d, 1, 1, true, kv);
            s.conv(format!("{a}.v"), d, d, 1, 1, true, kv);
            s.matmul(format!("{a}.scores"), px * d * kv);
            s.matmul(format!("{a}.mix"), px * d * kv);
            s.conv(format!("{a}.proj"), d, d, 1, 1, true, px);
            let m = format!("{p}.block{b}.mlp");
            let hid = d * e.mlp_ratio;
            s.norm(format!("{m}.norm"), d);
            s.conv(format!("{m}.fc1"), d, hid, 1, 1, true, px);
            s.conv(format!("{m}.dw"), hid, hid, 3, hid, true, px);
            s.conv(format!("{m}.fc2"), hid, d, 1, 1, true, px);
        }
        s.norm(format!("{p}.norm"), d);
        cin = d;
    }

    let levels: &[usize] = if cfg.fuse_f2 { &[2, 3, 4] } else { &[3, 4] };
    for &i in levels {
        let (p, px) = (format!("neck.level{i}"), grid(i));
        s.conv(format!("{p}.proj"), e.dims[i - 1], 64, 1, 1, true, px);
        if !cfg.use_glsa {
            s.conv(format!("{p}.conv"), 64, 32, 3, 1, true, px);
            continue;
        }
        let g = format!("{p}.glsa");
        match cfg.arrangement {
            Arrangement::Parallel => {
                s.gsa(&format!("{g}.gsa"), 32, px);
                s.lsa(&format!("{g}.lsa"), 32, px);
            }
            Arrangement::GsaOnly => s.gsa(&format!("{g}.gsa"), 64, px),
            Arrangement::LsaOnly => s.lsa(&format!("{g}.lsa"), 64, px),
            Arrangement::SerialGsaLsa | Arrangement::SerialLsaGsa => {
                s.gsa(&format!("{g}.gsa"), 64, px);
                s.lsa(&format!("{g}.lsa"), 64, px);
            }
        }
        s.conv(format!("{g}.fuse"), 64, 32, 1, 1, true, px);
    }
    s.conv("neck.fb".into(), e.dims[0], 32, 1, 1, true, grid(1));

    if cfg.fuse_f2 {
        s.conv("decoder.semantic.conv".into(), 96, 32, 1, 1, true, grid(2));
    } else {
        s.conv("decoder.semantic.conv".into(), 64, 32, 1, 1, true, grid(3));
    }
    let fuse = if cfg.use_sba {
        for r in ["rau_s", "rau_b"] {
            for g in ["theta", "phi"] {
                s.conv(format!("decoder.sba.{r}.{g}"), 32, 32, 1, 1, true, grid(1));
            }
        }
        "decoder.sba.fuse"
    } else {
        "decoder.plain"
    };
    s.conv(format!("{fuse}.conv"), 64, 32, 3, 1, false, grid(1));
    s.norm(format!("{fuse}.bn"), 32);
    s.conv("decoder.head_s1".into(), 32, 1, 1, 1, true, grid(1));
    s.conv("decoder.head_s2".into(), 32, 1, 1, 1, true, grid(2));
    s
}

/// Compares the model's own accounting with the spreadsheet: exact
/// parameters per layer and in total, MAC totals within `mac_tol` relative
/// error. Returns `(params, macs, sheet_macs)` or the first discrepancy.
pub fn compare_with_sheet(
    model: &Duat,
    reported_params: usize,
    reported_macs: u64,
    layers: &[(String, u64)],
    mac_tol: f64,
) -> Result<(usize, u64, u64), String> {
    let sheet = spreadsheet(model.config());
    for row in &sheet.rows {
        let got = model.store().num_params_under(&format!("{}.", row.layer));
        if got != row.params {
            return Err(format!("{}: {got} params, sheet {}", row.layer, row.params));
        }
        if let Some(m) = row.macs {
            let found: Vec<u64> = layers
                .iter()
                .filter(|(l, _)| *l == row.layer)
                .map(|(_, m)| *m)
                .collect();
            if found.len() != 1 {
                return Err(format!(
                    "{} appears {} times in the count",
                    row.layer,
                    found.len()
                ));
            }
            if (found[0] as f64 - m as f64).abs() > mac_tol * m as f64 {
                return Err(format!("{}: {} MACs, sheet {m}", row.layer, found[0]));
            }
        }
    }
    if reported_params != sheet.params() {
        return Err(format!(
            "{reported_params} params, sheet {}",
            sheet.params()
        ));
    }
    let (got, want) = (reported_macs as f64, sheet.macs() as f64);
    if (got - want).abs() > mac_tol * want {
        return Err(format!("{reported_macs} MACs, sheet {}", sheet.macs()));
    }
    Ok((reported_params, reported_macs, sheet.macs()))
}
