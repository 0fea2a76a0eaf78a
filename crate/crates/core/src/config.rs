//! Run configuration: a flat `key = value` text format with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. [`RunConfig::to_text`] writes every key with its effective value,
//! and parsing that text reproduces the configuration exactly.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::GenSpec;
use crate::error::{Error, Result};
use crate::glsa::Arrangement;
use crate::loss::LossConfig;
use crate::metrics::DEFAULT_BIN_EDGES;
use crate::model::{DuatConfig, Variant};
use crate::tensor::Precision;
use crate::train::TrainConfig;

/// Dataset partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "unknown split '{s}' (train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Directory written by `synth`; unset means generate in memory.
    pub dir: Option<PathBuf>,
    /// Samples generated in total.
    pub count: usize,
    /// Train/val/test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub spec: GenSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            count: 250,
            split: [0.8, 0.1, 0.1],
            split_seed: 0,
            spec: GenSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub bin_edges: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            split: Split::Test,
            bin_edges: DEFAULT_BIN_EDGES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictConfig {
    pub checkpoint: Option<PathBuf>,
    /// PPM image to segment.
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    /// One training run per seed and variant.
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: DuatConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub predict: PredictConfig,
    pub ablate: AblateConfig,
}

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model.depths", "blocks per encoder stage"),
    ("model.dims", "channels per encoder stage"),
    ("model.heads", "attention heads per stage"),
    ("model.reductions", "spatial reduction ratio per stage"),
    (
        "model.mlp_ratio",
        "hidden expansion of the encoder feed-forward",
    ),
    (
        "model.arrangement",
        "parallel, gsa_only, lsa_only, serial_gsa_lsa or serial_lsa_gsa",
    ),
    (
        "model.use_sba",
        "boundary aggregation decoder (false: plain conv)",
    ),
    (
        "model.use_glsa",
        "attention aggregation per level (false: 3x3 conv)",
    ),
    (
        "model.fuse_f2",
        "fuse the stride-8 level into the semantic stream",
    ),
    ("model.height", "input height, multiple of 32"),
    ("model.width", "input width, multiple of 32"),
    ("model.seed", "parameter initialisation seed"),
    ("train.lr", "learning rate"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.beta1", "first-moment decay"),
    ("train.beta2", "second-moment decay"),
    ("train.eps", "optimizer epsilon"),
    ("train.batch_size", "samples per step"),
    ("train.steps", "optimizer steps"),
    (
        "train.eval_every",
        "steps between validation passes, 0 = each epoch",
    ),
    ("train.augment", "random flips and quarter turns"),
    ("train.seed", "batch order and augmentation seed"),
    ("train.precision", "f32 or f64"),
    ("loss.lambda_iou", "weight of the weighted IoU term"),
    ("loss.lambda_bce", "weight of the weighted BCE term"),
    (
        "loss.radius",
        "boundary window radius, auto scales with height",
    ),
    ("loss.amplitude", "boundary weight amplitude"),
    (
        "data.dir",
        "dataset directory written by synth, empty = in memory",
    ),
    ("data.count", "samples to generate"),
    ("data.split", "train,val,test fractions"),
    ("data.split_seed", "partition seed"),
    ("data.height", "generated image height"),
    ("data.width", "generated image width"),
    ("data.objects", "min,max blobs per image"),
    ("data.fraction", "min,max foreground area fraction"),
    ("data.blur", "edge blur sigma in pixels"),
    ("data.contrast", "object/background colour offset"),
    ("data.noise", "texture noise amplitude"),
    ("data.seed", "generator seed"),
    (
        "data.retries",
        "attempts per sample to hit the fraction range",
    ),
    ("eval.checkpoint", "checkpoint to evaluate"),
    ("eval.split", "train, val or test"),
    ("eval.bin_edges", "area-fraction bin edges"),
    ("predict.checkpoint", "checkpoint used by predict"),
    ("predict.image", "PPM image to segment"),
    ("ablate.variants", "comma-separated variant keys"),
    ("ablate.seeds", "comma-separated run seeds"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_array<T: FromStr + Copy + Default, const N: usize>(
    key: &str,
    value: &str,
) -> Result<[T; N]> {
    let items: Vec<T> = parse_list(key, value)?;
    if items.len() != N {
        return Err(Error::Config(format!(
            "{key}: expected {N} values, got {}",
            items.len()
        )));
    }
    let mut out = [T::default(); N];
    out.copy_from_slice(&items);
    Ok(out)
}

fn parse_pair<T: FromStr + Copy + Default>(key: &str, value: &str) -> Result<(T, T)> {
    let [a, b] = parse_array::<T, 2>(key, value)?;
    Ok((a, b))
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.depths" => m.encoder.depths = parse_array(key, v)?,
            "model.dims" => m.encoder.dims = parse_array(key, v)?,
            "model.heads" => m.encoder.heads = parse_array(key, v)?,
            "model.reductions" => m.encoder.reductions = parse_array(key, v)?,
            "model.mlp_ratio" => m.encoder.mlp_ratio = parse(key, v)?,
            "model.arrangement" => m.arrangement = v.parse::<Arrangement>()?,
            "model.use_sba" => m.use_sba = parse(key, v)?,
            "model.use_glsa" => m.use_glsa = parse(key, v)?,
            "model.fuse_f2" => m.fuse_f2 = parse(key, v)?,
            "model.height" => m.input_size.0 = parse(key, v)?,
            "model.width" => m.input_size.1 = parse(key, v)?,
            "model.seed" => m.seed = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.augment" => t.augment = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.precision" => {
                t.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("{key}: expected f32 or f64"))),
                }
            }
            "loss.lambda_iou" => self.loss.lambda_iou = parse(key, v)?,
            "loss.lambda_bce" => self.loss.lambda_bce = parse(key, v)?,
            "loss.radius" => {
                self.loss.radius = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "loss.amplitude" => self.loss.amplitude = parse(key, v)?,
            "data.dir" => d.dir = parse_path(v),
            "data.count" => d.count = parse(key, v)?,
            "data.split" => d.split = parse_array(key, v)?,
            "data.split_seed" => d.split_seed = parse(key, v)?,
            "data.height" => d.spec.size.0 = parse(key, v)?,
            "data.width" => d.spec.size.1 = parse(key, v)?,
            "data.objects" => d.spec.objects = parse_pair(key, v)?,
            "data.fraction" => d.spec.fraction = parse_pair(key, v)?,
            "data.blur" => d.spec.blur = parse(key, v)?,
            "data.contrast" => d.spec.contrast = parse(key, v)?,
            "data.noise" => d.spec.noise = parse(key, v)?,
            "data.seed" => d.spec.seed = parse(key, v)?,
            "data.retries" => d.spec.retries = parse(key, v)?,
            "eval.checkpoint" => self.eval.checkpoint = parse_path(v),
            "eval.split" => self.eval.split = v.parse()?,
            "eval.bin_edges" => self.eval.bin_edges = parse_list(key, v)?,
            "predict.checkpoint" => self.predict.checkpoint = parse_path(v),
            "predict.image" => self.predict.image = parse_path(v),
            "ablate.variants" => self.ablate.variants = parse_list(key, v)?,
            "ablate.seeds" => self.ablate.seeds = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Effective value of `key` in the text format.
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        Ok(match key {
            "model.depths" => join(&m.encoder.depths),
            "model.dims" => join(&m.encoder.dims),
            "model.heads" => join(&m.encoder.heads),
            "model.reductions" => join(&m.encoder.reductions),
            "model.mlp_ratio" => m.encoder.mlp_ratio.to_string(),
            "model.arrangement" => m.arrangement.to_string(),
            "model.use_sba" => m.use_sba.to_string(),
            "model.use_glsa" => m.use_glsa.to_string(),
            "model.fuse_f2" => m.fuse_f2.to_string(),
            "model.height" => m.input_size.0.to_string(),
            "model.width" => m.input_size.1.to_string(),
            "model.seed" => m.seed.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.augment" => t.augment.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.precision" => match t.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            "loss.lambda_iou" => self.loss.lambda_iou.to_string(),
            "loss.lambda_bce" => self.loss.lambda_bce.to_string(),
            "loss.radius" => self
                .loss
                .radius
                .map_or_else(|| "auto".into(), |r| r.to_string()),
            "loss.amplitude" => self.loss.amplitude.to_string(),
            "data.dir" => show_path(&d.dir),
            "data.count" => d.count.to_string(),
            "data.split" => join(&d.split),
            "data.split_seed" => d.split_seed.to_string(),
            "data.height" => d.spec.size.0.to_string(),
            "data.width" => d.spec.size.1.to_string(),
            "data.objects" => format!("{},{}", d.spec.objects.0, d.spec.objects.1),
            "data.fraction" => format!("{},{}", d.spec.fraction.0, d.spec.fraction.1),
            "data.blur" => d.spec.blur.to_string(),
            "data.contrast" => d.spec.contrast.to_string(),
            "data.noise" => d.spec.noise.to_string(),
            "data.seed" => d.spec.seed.to_string(),
            "data.retries" => d.spec.retries.to_string(),
            "eval.checkpoint" => show_path(&self.eval.checkpoint),
            "eval.split" => self.eval.split.as_str().into(),
            "eval.bin_edges" => join(&self.eval.bin_edges),
            "predict.checkpoint" => show_path(&self.predict.checkpoint),
            "predict.image" => show_path(&self.predict.image),
            "ablate.variants" => join(&self.ablate.variants),
            "ablate.seeds" => join(&self.ablate.seeds),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        })
    }

    /// Applies `key = value` lines on top of `self`. Line numbers in errors
    /// are 1-based.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(key.trim(), value)
    }

    /// Sets the model, training and generator seeds at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.data.spec.seed = seed;
        self.data.split_seed = seed;
    }

    /// Every key with its effective value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let value = self.get(key).expect("listed keys are known");
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Checks every section.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.data.spec.validate()?;
        if self.eval.bin_edges.len() < 2 || self.eval.bin_edges.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(
                "eval.bin_edges must be strictly increasing with at least two entries".into(),
            ));
        }
        if self.ablate.variants.is_empty() || self.ablate.seeds.is_empty() {
            return Err(Error::Config(
                "ablate.variants and ablate.seeds cannot be empty".into(),
            ));
        }
        Ok(())
    }

    /// Only the model keys, as stored in checkpoint metadata.
    pub fn model_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS.iter().filter(|(k, _)| k.starts_with("model.")) {
            let value = self.get(key).expect("listed keys are known");
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Rebuilds a model configuration from [`RunConfig::model_text`] output.
    pub fn model_from_text(text: &str) -> Result<DuatConfig> {
        let mut cfg = RunConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line '{line}'")))?;
            if !key.trim().starts_with("model.") {
                return Err(Error::Checkpoint(format!(
                    "unexpected metadata key '{}'",
                    key.trim()
                )));
            }
            cfg.set(key.trim(), value)?;
        }
        cfg.model.validate()?;
        Ok(cfg.model)
    }
}
