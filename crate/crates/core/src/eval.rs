//! Batched inference and metric reports.

use crate::data::Sample;
use crate::error::Result;
use crate::metrics::{score, EvalReport, Evaluated};
use crate::model::{predict_mask, Duat};
use crate::tensor::Tensor;

/// Inference batch size used by [`evaluate`].
pub const EVAL_BATCH: usize = 8;

/// Scores every sample with the model's boundary-refined head.
pub fn evaluate(model: &Duat, samples: &[Sample], edges: &[f64]) -> Result<EvalReport> {
    let mut items = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
        let pred = model.infer(&Tensor::stack(&images)?)?;
        let prob = pred.probability()?;
        let mask = predict_mask(&pred.s1)?;
        let plane = prob.numel() / chunk.len();
        for (k, s) in chunk.iter().enumerate() {
            let range = k * plane..(k + 1) * plane;
            items.push(Evaluated {
                id: s.id.clone(),
                area_fraction: s.area_fraction,
                scores: score(
                    &mask.data()[range.clone()],
                    &prob.data()[range],
                    s.mask.data(),
                )?,
            });
        }
    }
    EvalReport::new(items, edges)
}

/// Report that treats each ground-truth mask as its own prediction.
pub fn evaluate_oracle(samples: &[Sample], edges: &[f64]) -> Result<EvalReport> {
    let items = samples
        .iter()
        .map(|s| {
            let g = s.mask.data();
            Ok(Evaluated {
                id: s.id.clone(),
                area_fraction: s.area_fraction,
                scores: score(g, g, g)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(items, edges)
}
