use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use duat::config::{RunConfig, KEYS};
use duat::data::netpbm;
use duat::error::Error;
use duat::eval::evaluate;
use duat::model::{predict_mask, Duat};
use duat::pipeline::{check_sizes, load_model, load_splits, save_model, synthesize};
use duat::{ablate, gradcheck, train};

/// Reference size of the full-scale network, printed next to `count`.
const REFERENCE_PARAMS_M: f64 = 24.92;
const REFERENCE_FLOPS_G: f64 = 9.88;

#[derive(Parser)]
#[command(
    name = "duat",
    version,
    about = "Dual-aggregation segmentation network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

/// Flags accepted both before and after the subcommand. Overrides from the
/// two positions are applied in command-line order.
#[derive(Args, Default, Clone)]
struct Opts {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets model, training and generator seeds
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Opts {
    fn merge(&self, later: &Opts) -> Result<Opts, Failure> {
        let pick = |name: &str, a: &Option<PathBuf>, b: &Option<PathBuf>| match (a, b) {
            (Some(_), Some(_)) => Err(Failure::Usage(format!("--{name} given twice"))),
            _ => Ok(b.clone().or_else(|| a.clone())),
        };
        if self.seed.is_some() && later.seed.is_some() {
            return Err(Failure::Usage("--seed given twice".into()));
        }
        Ok(Opts {
            config: pick("config", &self.config, &later.config)?,
            seed: later.seed.or(self.seed),
            out: pick("out", &self.out, &later.out)?,
            overrides: self
                .overrides
                .iter()
                .chain(&later.overrides)
                .cloned()
                .collect(),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the output directory
    Synth(Opts),
    /// Train a model and save the best-validation checkpoint
    Train(Opts),
    /// Score a checkpoint on a dataset split
    Eval(Opts),
    /// Segment one PPM image
    Predict(Opts),
    /// Finite-difference check of every backward rule and the full network
    Gradcheck(Opts),
    /// Parameter and multiply-accumulate counts
    Count(Opts),
    /// Train and compare architecture variants
    Ablate(Opts),
    /// List the config keys
    Keys(Opts),
}

impl Command {
    fn opts(&self) -> &Opts {
        match self {
            Command::Synth(o)
            | Command::Train(o)
            | Command::Eval(o)
            | Command::Predict(o)
            | Command::Gradcheck(o)
            | Command::Count(o)
            | Command::Ablate(o)
            | Command::Keys(o) => o,
        }
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ if e.is_numerical() => Failure::Numerical(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn resolve(opts: &Opts) -> Result<RunConfig, Failure> {
    let mut cfg = match &opts.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.set_seed(seed);
    }
    for o in &opts.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory and writes the effective config into it.
fn prepare_out(out: &Path, cfg: &RunConfig) -> Outcome {
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let path = out.join("config.txt");
    std::fs::write(&path, cfg.to_text()).map_err(|e| io_failure(&path, e))
}

/// Line-delimited JSON log. The header is the only line with a timestamp.
struct JsonLog {
    path: PathBuf,
    file: BufWriter<File>,
}

impl JsonLog {
    fn create(path: PathBuf, command: &str) -> Result<Self, Failure> {
        let file = File::create(&path).map_err(|e| io_failure(&path, e))?;
        let mut log = JsonLog {
            path,
            file: BufWriter::new(file),
        };
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        log.write(&json!({ "event": "header", "command": command, "started_unix": started }))?;
        Ok(log)
    }

    fn write(&mut self, record: &serde_json::Value) -> Outcome {
        writeln!(self.file, "{record}").map_err(|e| io_failure(&self.path, e))
    }

    fn finish(mut self) -> Outcome {
        self.file.flush().map_err(|e| io_failure(&self.path, e))
    }
}

/// Collects log records, remembering the first write failure.
fn logger<'a>(
    log: &'a mut JsonLog,
    failed: &'a mut Option<Failure>,
) -> impl FnMut(serde_json::Value) + 'a {
    move |record| {
        if record["event"] == "eval" || record["event"] == "ablate_run" {
            log::info!("{record}");
        }
        if failed.is_none() {
            if let Err(e) = log.write(&record) {
                *failed = Some(e);
            }
        }
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> Outcome {
    prepare_out(out, cfg)?;
    let splits = synthesize(&cfg.data, out)?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        splits.train.len() + splits.val.len() + splits.test.len(),
        out.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn run_train(cfg: &RunConfig, out: &Path) -> Outcome {
    prepare_out(out, cfg)?;
    let splits = load_splits(&cfg.data)?;
    check_sizes(&cfg.model, &splits.train)?;
    check_sizes(&cfg.model, &splits.val)?;
    let mut model = Duat::new(cfg.model.clone())?;
    let mut log = JsonLog::create(out.join("train.log"), "train")?;
    let mut failed = None;
    let outcome = train::train(
        &mut model,
        &splits.train,
        &splits.val,
        &cfg.train,
        &cfg.loss,
        &mut logger(&mut log, &mut failed),
    )?;
    if let Some(f) = failed {
        return Err(f);
    }
    save_model(&model, &out.join("last.ckpt"))?;
    *model.store_mut() = outcome.best;
    save_model(&model, &out.join("best.ckpt"))?;
    log.write(&json!({
        "event": "done",
        "final_loss": outcome.final_loss,
        "best_val_mdice": outcome.best_val_mdice,
    }))?;
    log.finish()?;
    println!("final loss {:.6}", outcome.final_loss);
    if let Some(d) = outcome.best_val_mdice {
        println!("best val mDice {d:.4}");
    }
    println!("checkpoint {}", out.join("best.ckpt").display());
    Ok(())
}

fn run_eval(cfg: &RunConfig, out: &Path) -> Outcome {
    let ckpt = cfg
        .eval
        .checkpoint
        .as_ref()
        .ok_or_else(|| Failure::Usage("eval needs eval.checkpoint".into()))?;
    prepare_out(out, cfg)?;
    let model = load_model(ckpt)?;
    let splits = load_splits(&cfg.data)?;
    let samples = splits.get(cfg.eval.split);
    check_sizes(model.config(), samples)?;
    let report = evaluate(&model, samples, &cfg.eval.bin_edges)?;
    report.write(out)?;
    let a = &report.aggregate;
    let table = format!(
        "| split | samples | mDice | mIoU | MAE |\n| {} | {} | {:.4} | {:.4} | {:.4} |\n",
        cfg.eval.split.as_str(),
        a.samples,
        a.mdice,
        a.miou,
        a.mae
    );
    let path = out.join("aggregate.txt");
    std::fs::write(&path, &table).map_err(|e| io_failure(&path, e))?;
    print!("{table}");
    for b in &report.bins {
        println!(
            "bin {:>7} n={:<4} dice {:.4}",
            b.label, b.count, b.mean_dice
        );
    }
    Ok(())
}

fn predict(cfg: &RunConfig, out: &Path) -> Outcome {
    let (Some(ckpt), Some(image)) = (&cfg.predict.checkpoint, &cfg.predict.image) else {
        return Err(Failure::Usage(
            "predict needs predict.checkpoint and predict.image".into(),
        ));
    };
    prepare_out(out, cfg)?;
    let model = load_model(ckpt)?;
    let x = netpbm::image_tensor(&netpbm::read(image)?)?;
    let [_, _, h, w] = x.shape();
    if (h, w) != model.config().input_size {
        let (mh, mw) = model.config().input_size;
        return Err(Failure::Data(format!(
            "image is {h}x{w} but the model expects {mh}x{mw}"
        )));
    }
    let pred = model.infer(&x)?;
    let mask = predict_mask(&pred.s1)?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let mask_path = out.join(format!("{stem}_mask.pgm"));
    netpbm::write(&mask_path, &netpbm::mask_raster(&mask))?;
    let prob = pred.probability()?;
    let prob_path = out.join(format!("{stem}_prob.pgm"));
    netpbm::write(
        &prob_path,
        &netpbm::Raster {
            width: w,
            height: h,
            channels: 1,
            data: prob
                .data()
                .iter()
                .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        },
    )?;
    let fg = mask.data().iter().filter(|&&v| v > 0.5).count();
    println!(
        "{}: foreground {:.4}",
        mask_path.display(),
        fg as f64 / (h * w) as f64
    );
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig) -> Outcome {
    let report = gradcheck::run(&cfg.model, cfg.model.seed)?;
    print!("{}", report.table());
    println!(
        "max relative error {:.3e} (tolerance {:.0e})",
        report.max_rel_err(),
        gradcheck::TOLERANCE
    );
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Failure::Numerical("gradcheck failed".into()))
    }
}

fn count(cfg: &RunConfig, out: &Path) -> Outcome {
    prepare_out(out, cfg)?;
    let model = Duat::new(cfg.model.clone())?;
    let cost = model.cost()?;
    let (h, w) = cfg.model.input_size;
    println!("{:<48} {:>8} {:>12}", "layer", "kind", "MACs");
    for l in &cost.layers {
        println!(
            "{:<48} {:>8} {:>12}",
            l.layer,
            format!("{:?}", l.kind),
            l.macs
        );
    }
    println!();
    for prefix in ["encoder.", "neck.", "decoder."] {
        println!(
            "params {:<10} {:>10}",
            prefix.trim_end_matches('.'),
            model.store().num_params_under(prefix)
        );
    }
    println!(
        "total params {} ({:.4}M)",
        cost.params,
        cost.params as f64 / 1e6
    );
    println!(
        "total MACs {} ({:.4}G) at 1x3x{h}x{w}",
        cost.macs,
        cost.macs as f64 / 1e9
    );
    println!(
        "reference full-scale network: {REFERENCE_PARAMS_M}M params, {REFERENCE_FLOPS_G}G FLOPs (annotation, not asserted)"
    );
    let path = out.join("count.json");
    let text = serde_json::to_string_pretty(&cost).expect("serializable");
    std::fs::write(&path, text).map_err(|e| io_failure(&path, e))
}

fn run_ablate(cfg: &RunConfig, out: &Path) -> Outcome {
    prepare_out(out, cfg)?;
    let splits = load_splits(&cfg.data)?;
    check_sizes(&cfg.model, &splits.train)?;
    let mut log = JsonLog::create(out.join("ablate.log"), "ablate")?;
    let mut failed = None;
    let table = ablate::run(cfg, &splits, &mut logger(&mut log, &mut failed))?;
    if let Some(f) = failed {
        return Err(f);
    }
    log.finish()?;
    let text = table.to_text();
    let path = out.join("ablation.txt");
    std::fs::write(&path, &text).map_err(|e| io_failure(&path, e))?;
    print!("{text}");
    Ok(())
}

fn keys() -> Outcome {
    let defaults = RunConfig::default();
    for (key, doc) in KEYS {
        let value = defaults.get(key)?;
        println!("{key} = {value}\n    {doc}");
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome {
    let opts = cli.opts.merge(cli.command.opts())?;
    let cfg = resolve(&opts)?;
    let out = opts.out.unwrap_or_else(|| PathBuf::from("out"));
    let out = out.as_path();
    match cli.command {
        Command::Synth(_) => synth(&cfg, out),
        Command::Train(_) => run_train(&cfg, out),
        Command::Eval(_) => run_eval(&cfg, out),
        Command::Predict(_) => predict(&cfg, out),
        Command::Gradcheck(_) => run_gradcheck(&cfg),
        Command::Count(_) => count(&cfg, out),
        Command::Ablate(_) => run_ablate(&cfg, out),
        Command::Keys(_) => keys(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
