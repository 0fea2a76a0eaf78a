//! Overlap metrics, per-sample reports and size-stratified summaries.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Default area-fraction bin edges: 5% steps up to 30%, then one open bin.
pub const DEFAULT_BIN_EDGES: [f64; 8] = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 1.0];

/// Dice, IoU and mean absolute error of one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
}

/// `pred` and `gt` are {0, 1} masks, `prob` the soft map behind `pred`.
/// Two empty masks score dice = iou = 1.
pub fn score(pred: &[f64], prob: &[f64], gt: &[f64]) -> Result<Scores> {
    if pred.len() != gt.len() || prob.len() != gt.len() || gt.is_empty() {
        return Err(Error::invalid(
            "metrics",
            format!(
                "mismatched sizes: pred {}, prob {}, mask {}",
                pred.len(),
                prob.len(),
                gt.len()
            ),
        ));
    }
    let (mut inter, mut p_sum, mut g_sum, mut abs_err) = (0.0, 0.0, 0.0, 0.0);
    for ((&p, &q), &g) in pred.iter().zip(prob).zip(gt) {
        inter += p * g;
        p_sum += p;
        g_sum += g;
        abs_err += (q - g).abs();
    }
    let (dice, iou) = if p_sum + g_sum == 0.0 {
        (1.0, 1.0)
    } else {
        (
            2.0 * inter / (p_sum + g_sum),
            inter / (p_sum + g_sum - inter),
        )
    };
    Ok(Scores {
        dice,
        iou,
        mae: abs_err / gt.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleReport {
    pub sample_id: String,
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
    pub area_fraction: f64,
    pub bin: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeBin {
    pub lo: f64,
    pub hi: f64,
    pub label: String,
    pub count: usize,
    pub mean_dice: f64,
}

fn bin_label(lo: f64, hi: f64) -> String {
    format!("{:.0}-{:.0}%", lo * 100.0, hi * 100.0)
}

/// Index of the half-open bin `[lo, hi)` holding `fraction`; the last bin
/// is closed on the right.
pub fn bin_index(fraction: f64, edges: &[f64]) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(
            "size_stratified",
            format!("area fraction {fraction} outside [0, 1]"),
        ));
    }
    let last = edges.len() - 2;
    (0..=last)
        .find(|&i| fraction >= edges[i] && (fraction < edges[i + 1] || i == last))
        .ok_or_else(|| {
            Error::invalid(
                "size_stratified",
                format!("area fraction {fraction} not covered by bin edges"),
            )
        })
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::invalid(
            "size_stratified",
            "bin edges must be strictly increasing with at least two entries",
        ));
    }
    Ok(())
}

/// Mean dice per non-empty area-fraction bin.
pub fn size_stratified(samples: &[(f64, f64)], edges: &[f64]) -> Result<Vec<SizeBin>> {
    check_edges(edges)?;
    let mut sums = vec![(0usize, 0.0); edges.len() - 1];
    for &(fraction, dice) in samples {
        let i = bin_index(fraction, edges)?;
        sums[i].0 += 1;
        sums[i].1 += dice;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, (count, _))| *count > 0)
        .map(|(i, (count, total))| SizeBin {
            lo: edges[i],
            hi: edges[i + 1],
            label: bin_label(edges[i], edges[i + 1]),
            count,
            mean_dice: total / count as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub samples: usize,
    pub mdice: f64,
    pub miou: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleReport>,
    pub bins: Vec<SizeBin>,
    pub aggregate: Aggregate,
}

/// One evaluated sample before binning.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub id: String,
    pub area_fraction: f64,
    pub scores: Scores,
}

impl EvalReport {
    pub fn new(items: Vec<Evaluated>, edges: &[f64]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("eval", "no samples to report"));
        }
        check_edges(edges)?;
        let pairs: Vec<(f64, f64)> = items
            .iter()
            .map(|e| (e.area_fraction, e.scores.dice))
            .collect();
        let bins = size_stratified(&pairs, edges)?;
        let n = items.len() as f64;
        let aggregate = Aggregate {
            samples: items.len(),
            mdice: items.iter().map(|e| e.scores.dice).sum::<f64>() / n,
            miou: items.iter().map(|e| e.scores.iou).sum::<f64>() / n,
            mae: items.iter().map(|e| e.scores.mae).sum::<f64>() / n,
        };
        let samples = items
            .into_iter()
            .map(|e| {
                let i = bin_index(e.area_fraction, edges)?;
                Ok(SampleReport {
                    sample_id: e.id,
                    dice: e.scores.dice,
                    iou: e.scores.iou,
                    mae: e.scores.mae,
                    area_fraction: e.area_fraction,
                    bin: bin_label(edges[i], edges[i + 1]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            samples,
            bins,
            aggregate,
        })
    }

    /// Mean dice of the bin starting at `lo`, if populated.
    pub fn bin_dice(&self, lo: f64) -> Option<f64> {
        self.bins.iter().find(|b| b.lo == lo).map(|b| b.mean_dice)
    }

    /// One JSON object per sample, then one per bin, then the aggregate.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("serializable"));
            out.push('\n');
        }
        for b in &self.bins {
            let line = serde_json::json!({ "size_bin": b });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        let footer = serde_json::json!({ "aggregate": self.aggregate });
        out.push_str(&footer.to_string());
        out.push('\n');
        out
    }

    /// gnuplot table: bin centre (percent), mean dice, count.
    pub fn size_bins_dat(&self) -> String {
        let mut out = String::from("# area_pct_center mean_dice count label\n");
        for b in &self.bins {
            let centre = 50.0 * (b.lo + b.hi);
            writeln!(
                out,
                "{centre:.2} {:.6} {} {}",
                b.mean_dice, b.count, b.label
            )
            .expect("write to string");
        }
        out
    }

    /// Writes `report.jsonl` and `size_bins.dat` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report = dir.join("report.jsonl");
        std::fs::write(&report, self.to_jsonl()).map_err(|e| Error::io(&report, e))?;
        let dat = dir.join("size_bins.dat");
        std::fs::write(&dat, self.size_bins_dat()).map_err(|e| Error::io(&dat, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks() {
        let g = [1.0, 0.0, 1.0, 1.0];
        let s = score(&g, &g, &g).unwrap();
        assert_eq!((s.dice, s.iou, s.mae), (1.0, 1.0, 0.0));
    }

    #[test]
    fn disjoint_masks() {
        let s = score(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!((s.dice, s.iou), (0.0, 0.0));
    }

    #[test]
    fn half_overlap() {
        let p = [1.0, 1.0, 0.0, 0.0];
        let g = [0.0, 1.0, 1.0, 0.0];
        let s = score(&p, &p, &g).unwrap();
        assert!((s.dice - 0.5).abs() < 1e-15);
        assert!((s.iou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn both_empty_score_one() {
        let z = [0.0; 4];
        let s = score(&z, &z, &z).unwrap();
        assert_eq!((s.dice, s.iou), (1.0, 1.0));
    }

    #[test]
    fn mismatched_lengths() {
        assert!(score(&[1.0], &[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn binning() {
        assert_eq!(bin_index(0.04, &DEFAULT_BIN_EDGES).unwrap(), 0);
        assert_eq!(bin_index(0.05, &DEFAULT_BIN_EDGES).unwrap(), 1);
        assert_eq!(bin_index(1.0, &DEFAULT_BIN_EDGES).unwrap(), 6);
        assert!(bin_index(1.5, &DEFAULT_BIN_EDGES).is_err());
        let bins =
            size_stratified(&[(0.01, 0.8), (0.02, 0.6), (0.07, 1.0)], &DEFAULT_BIN_EDGES).unwrap();
        assert_eq!(bins.len(), 2);
        assert!((bins[0].mean_dice - 0.7).abs() < 1e-15);
        assert_eq!(bins[1].mean_dice, 1.0);
        assert_eq!(bins[0].label, "0-5%");
    }

    #[test]
    fn report_single_bin_matches_global() {
        let items: Vec<Evaluated> = [0.9, 0.7, 0.5]
            .iter()
            .enumerate()
            .map(|(i, &d)| Evaluated {
                id: format!("s{i}"),
                area_fraction: 0.02,
                scores: Scores {
                    dice: d,
                    iou: d / (2.0 - d),
                    mae: 0.01,
                },
            })
            .collect();
        let r = EvalReport::new(items, &DEFAULT_BIN_EDGES).unwrap();
        assert_eq!(r.bins.len(), 1);
        assert!((r.bins[0].mean_dice - r.aggregate.mdice).abs() < 1e-15);
        let text = r.to_jsonl();
        assert_eq!(text.lines().count(), 5);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["sample_id", "dice", "iou", "mae", "area_fraction", "bin"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        assert!(r.size_bins_dat().contains("2.50 0.700000 3"));
    }
}
