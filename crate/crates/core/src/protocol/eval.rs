use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::moe::MoEModel;

/// Personalised test accuracy of each model on its own test shard.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_accuracy: f64,
    pub per_client: Vec<f64>,
    /// `activations[i][j]`: test samples of client `i` routed to expert `j`.
    pub activations: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn min_accuracy(&self) -> f64 {
        self.per_client.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_accuracy(&self) -> f64 {
        self.per_client.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Evaluates `models[i]` on `tests[i]` with the given `top_k`.
pub fn evaluate(models: &[&MoEModel], tests: &[&[Sample]], top_k: usize) -> Result<Evaluation> {
    if models.len() != tests.len() {
        return Err(Error::dim("models vs test shards", tests.len(), models.len()));
    }
    if let Some(i) = tests.iter().position(|t| t.is_empty()) {
        return Err(Error::InvalidConfig(format!("client {i} has an empty test shard")));
    }
    let results: Vec<(f64, Vec<usize>)> = models
        .par_iter()
        .zip(tests.par_iter())
        .map(|(model, test)| {
            let mut hist = vec![0; model.num_experts()];
            let mut correct = 0usize;
            for s in test.iter() {
                let (pred, expert) = model.predict(&s.features, top_k)?;
                hist[expert] += 1;
                correct += usize::from(pred == s.label);
            }
            Ok((correct as f64 / test.len() as f64, hist))
        })
        .collect::<Result<_>>()?;
    let (per_client, activations): (Vec<f64>, Vec<Vec<usize>>) = results.into_iter().unzip();
    let mean_accuracy = per_client.iter().sum::<f64>() / per_client.len().max(1) as f64;
    Ok(Evaluation {
        mean_accuracy,
        per_client,
        activations,
    })
}
