//! Variant comparison under a shared data order, seed set and budget.

use std::fmt::Write as _;

use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::Aggregate;
use crate::model::{Duat, Variant};
use crate::pipeline::Splits;
use crate::train::{train, TrainConfig};

/// Upper edge of the small-object bin.
pub const SMALL_OBJECT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub aggregate: Aggregate,
    /// Mean dice of test samples below [`SMALL_OBJECT`] area, if any.
    pub small_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub runs: Vec<SeedResult>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl AblationRow {
    pub fn mdice(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.aggregate.mdice))
    }

    pub fn miou(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.aggregate.miou))
    }

    pub fn mae(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.aggregate.mae))
    }

    /// Small-object dice averaged over the seeds whose test set has any.
    pub fn small_dice(&self) -> f64 {
        mean(self.runs.iter().filter_map(|r| r.small_dice))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Header of the text table; `parse_row` relies on this column order.
const COLUMNS: [&str; 5] = ["Params", "mDice", "mIoU", "MAE", "Dice<5%"];

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Pipe-separated table, one row per variant, metrics averaged over seeds.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# seeds: {}\n| {:<22} | {:>8} | {:>6} | {:>6} | {:>6} | {:>7} |\n",
            self.seeds
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "Variant",
            COLUMNS[0],
            COLUMNS[1],
            COLUMNS[2],
            COLUMNS[3],
            COLUMNS[4]
        );
        for r in &self.rows {
            writeln!(
                out,
                "| {:<22} | {:>8} | {:>6.4} | {:>6.4} | {:>6.4} | {:>7.4} |",
                r.variant.label(),
                r.params,
                r.mdice(),
                r.miou(),
                r.mae(),
                r.small_dice()
            )
            .expect("write to string");
        }
        out
    }
}

/// Metrics of the row labelled `label` in [`AblationTable::to_text`]
/// output: `[mdice, miou, mae, small_dice]`.
pub fn parse_row(text: &str, label: &str) -> Option<[f64; 4]> {
    text.lines().find_map(|line| {
        let cells: Vec<&str> = line
            .trim()
            .strip_prefix('|')?
            .strip_suffix('|')?
            .split('|')
            .map(str::trim)
            .collect();
        if cells.len() != 6 || cells[0] != label {
            return None;
        }
        let mut out = [0.0; 4];
        for (o, c) in out.iter_mut().zip(&cells[2..]) {
            *o = c.parse().ok()?;
        }
        Some(out)
    })
}

/// Trains and evaluates every configured variant once per seed. Variants
/// share the data, the batch order of each seed and the step budget; only
/// the architecture differs. `log` receives every training record tagged
/// with the variant and seed.
pub fn run(
    cfg: &RunConfig,
    splits: &Splits,
    log: &mut dyn FnMut(serde_json::Value),
) -> Result<AblationTable> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(Error::Data(
            "ablation needs non-empty train and test splits".into(),
        ));
    }
    let mut rows = Vec::new();
    for &variant in &cfg.ablate.variants {
        let mut runs = Vec::new();
        let mut params = 0;
        for &seed in &cfg.ablate.seeds {
            let mut model_cfg = variant.apply(&cfg.model);
            model_cfg.seed = seed;
            let mut model = Duat::new(model_cfg)?;
            params = model.store().num_params();
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let mut tagged = |mut record: serde_json::Value| {
                record["variant"] = json!(variant.key());
                record["seed"] = json!(seed);
                log(record);
            };
            let outcome = train(
                &mut model,
                &splits.train,
                &splits.val,
                &train_cfg,
                &cfg.loss,
                &mut tagged,
            )?;
            *model.store_mut() = outcome.best;
            let report = evaluate(&model, &splits.test, &cfg.eval.bin_edges)?;
            let small: Vec<f64> = report
                .samples
                .iter()
                .filter(|s| s.area_fraction < SMALL_OBJECT)
                .map(|s| s.dice)
                .collect();
            let small_dice = (!small.is_empty()).then(|| mean(small.into_iter()));
            log(json!({
                "event": "ablate_run",
                "variant": variant.key(),
                "seed": seed,
                "mdice": report.aggregate.mdice,
                "miou": report.aggregate.miou,
                "mae": report.aggregate.mae,
                "small_dice": small_dice,
            }));
            runs.push(SeedResult {
                seed,
                aggregate: report.aggregate,
                small_dice,
            });
        }
        rows.push(AblationRow {
            variant,
            params,
            runs,
        });
    }
    Ok(AblationTable {
        seeds: cfg.ablate.seeds.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::data::GenSpec;
    use crate::pipeline::generate_splits;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.input_size = (32, 32);
        cfg.train.steps = 2;
        cfg.train.batch_size = 2;
        cfg.ablate.seeds = vec![4];
        cfg.ablate.variants = vec![Variant::Full, Variant::WithoutGlsa];
        cfg.data = DataConfig {
            count: 10,
            spec: GenSpec {
                size: (32, 32),
                ..GenSpec::default()
            },
            ..DataConfig::default()
        };
        cfg
    }

    #[test]
    fn table_has_configured_rows_and_parses() {
        let cfg = tiny();
        let splits = generate_splits(&cfg.data).unwrap();
        let mut batches: Vec<(String, serde_json::Value)> = Vec::new();
        let table = run(&cfg, &splits, &mut |r| {
            if r["event"] == "step" {
                batches.push((
                    r["variant"].as_str().unwrap().to_string(),
                    r["batch"].clone(),
                ));
            }
        })
        .unwrap();
        assert_eq!(table.rows.len(), 2);
        let text = table.to_text();
        let full = parse_row(&text, Variant::Full.label()).unwrap();
        assert!((full[0] - table.row(Variant::Full).unwrap().mdice()).abs() < 1e-4);
        assert!(parse_row(&text, Variant::WithoutGlsa.label()).is_some());
        assert!(parse_row(&text, Variant::GsaOnly.label()).is_none());

        let order = |v: &str| -> Vec<serde_json::Value> {
            batches
                .iter()
                .filter(|(k, _)| k == v)
                .map(|(_, b)| b.clone())
                .collect()
        };
        assert_eq!(order("full"), order("wo_glsa"));
        assert_eq!(order("full").len(), 2);
    }
}
