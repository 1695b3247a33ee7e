use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{SeedTree, STREAM_DATA};

/// Isotropic Gaussian mixture with one component per class.
///
/// Class means are independent random unit directions scaled by `spread`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl GaussianMixture {
    pub fn new(classes: usize, dim: usize, spread: f64, seed: SeedTree) -> Result<Self> {
        if classes < 2 || dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "synthetic data needs classes >= 2 and dim >= 2, got {classes} and {dim}"
            )));
        }
        if !spread.is_finite() || spread < 0.0 {
            return Err(Error::InvalidConfig(format!("spread must be finite and >= 0, got {spread}")));
        }
        let mut rng = seed.rng();
        let dirs: Vec<Vec<f64>> = (0..classes).map(|_| random_unit(dim, &mut rng)).collect();
        let means = dirs
            .into_iter()
            .map(|d| d.into_iter().map(|x| x * spread).collect())
            .collect();
        Ok(Self { means })
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// `n` samples with labels balanced to within one, in shuffled order.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        let c = self.classes();
        let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        labels.shuffle(rng);
        let samples = labels
            .into_iter()
            .map(|label| Sample {
                features: self.means[label]
                    .iter()
                    .map(|m| m + Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect(),
                label,
            })
            .collect();
        Dataset::new(samples, c)
    }
}

/// Balanced Gaussian-mixture dataset. The same `seed` always yields the same
/// class means and the same samples.
pub fn make_synthetic(classes: usize, dim: usize, n: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n < classes {
        return Err(Error::InvalidConfig(format!(
            "need at least one sample per class: n = {n}, classes = {classes}"
        )));
    }
    let tree = SeedTree::new(seed).child(STREAM_DATA);
    let mixture = GaussianMixture::new(classes, dim, spread, tree.child(0))?;
    mixture.sample(n, &mut tree.child(1).rng())
}
