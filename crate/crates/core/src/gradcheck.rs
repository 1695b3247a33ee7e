//! Central finite-difference checks of the analytic gradients.
//!
//! Instances are small random networks. An instance is redrawn when any ReLU
//! pre-activation or the gap between the last selected and first rejected
//! gate score is within [`MARGIN`], since the loss is not differentiable
//! there and a finite difference straddling the kink is meaningless.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::moe::{gate_scores, Architecture, MoEModel};
use crate::nn::{dot, Activation, DenseNet};
use crate::rng::SeedTree;

pub const MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            step: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    DenseNet,
    MoE,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceResult {
    pub suite: Suite,
    pub index: usize,
    pub params: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub results: Vec<InstanceResult>,
    /// Draws rejected for lying too close to a non-differentiable point.
    pub redrawn: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&InstanceResult> {
        self.results
            .iter()
            .filter(|r| !(r.max_rel_error <= self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Smallest |pre-activation| over the ReLU layers of `net` at `x`.
fn relu_margin(net: &DenseNet, x: &[f64]) -> f64 {
    let mut a = x.to_vec();
    let mut margin = f64::INFINITY;
    for layer in net.layers() {
        let z: Vec<f64> = (0..layer.out_dim())
            .map(|r| dot(layer.weight.row(r), &a) + layer.bias[r])
            .collect();
        a = match layer.activation {
            Activation::Relu => {
                margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
                z.iter().map(|v| v.max(0.0)).collect()
            }
            Activation::Identity => z,
        };
    }
    margin
}

fn random_dense(rng: &mut ChaCha8Rng) -> Result<(DenseNet, Vec<f64>, Vec<f64>)> {
    let depth = rng.random_range(1..=3);
    let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=4)).collect();
    let output = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Identity };
    let mut net = DenseNet::init(&dims, Activation::Relu, output, rng)?;
    let p = net.params();
    let noisy: Vec<f64> = p.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
    net.set_params(&noisy)?;
    let x = uniform_vec(rng, dims[0], 2.0);
    let up = uniform_vec(rng, dims[depth], 1.0);
    Ok((net, x, up))
}

/// Checks parameter and input gradients of `upstream · net(x)`.
fn check_dense(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, redrawn: &mut usize) -> Result<(usize, f64)> {
    let (net, x, up) = loop {
        let (net, x, up) = random_dense(rng)?;
        if relu_margin(&net, &x) >= MARGIN {
            break (net, x, up);
        }
        *redrawn += 1;
        if *redrawn > MAX_REDRAWS {
            return Err(Error::InvalidConfig("could not draw a differentiable instance".into()));
        }
    };
    let (grads, input_grad) = net.backward(&x, &up)?;
    let analytic = grads.flatten();
    let f = |n: &DenseNet, x: &[f64]| -> Result<f64> { Ok(dot(&n.forward(x)?, &up)) };

    let h = cfg.step;
    let base = net.params();
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for (q, a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[q] = base[q] + h;
        probe.set_params(&p)?;
        let plus = f(&probe, &x)?;
        p[q] = base[q] - h;
        probe.set_params(&p)?;
        let minus = f(&probe, &x)?;
        worst = worst.max(relative_error(*a, (plus - minus) / (2.0 * h)));
    }
    for (q, a) in input_grad.iter().enumerate() {
        let mut xp = x.clone();
        xp[q] = x[q] + h;
        let plus = f(&net, &xp)?;
        xp[q] = x[q] - h;
        let minus = f(&net, &xp)?;
        worst = worst.max(relative_error(*a, (plus - minus) / (2.0 * h)));
    }
    Ok((analytic.len(), worst))
}

type MoEInstance = (MoEModel, Vec<(Vec<f64>, usize)>, usize);

fn random_moe(rng: &mut ChaCha8Rng) -> Result<MoEInstance> {
    let hidden = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            vec![rng.random_range(2..=4)]
        } else {
            vec![]
        }
    };
    let arch = Architecture {
        input_dim: rng.random_range(2..=4),
        embedding_hidden: hidden(rng),
        repr_dim: rng.random_range(2..=4),
        expert_hidden: hidden(rng),
        classes: rng.random_range(2..=4),
    };
    let k = rng.random_range(1..=3);
    let top_k = if rng.random_bool(0.5) { 1 } else { rng.random_range(1..=k) };
    let mut model = MoEModel::init(&arch, k, rng)?;
    let noisy: Vec<f64> = model.params().iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
    model.set_params(&noisy)?;
    let batch = (0..rng.random_range(1..=3))
        .map(|_| (uniform_vec(rng, arch.input_dim, 2.0), rng.random_range(0..arch.classes)))
        .collect();
    Ok((model, batch, top_k))
}

fn moe_margin(model: &MoEModel, batch: &[(Vec<f64>, usize)], top_k: usize) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for (x, _) in batch {
        margin = margin.min(relu_margin(&model.embedding, x));
        let h = model.embedding.forward(x)?;
        for e in &model.experts {
            margin = margin.min(relu_margin(e, &h));
        }
        let gate = gate_scores(&h, &model.gating, top_k)?;
        if top_k < model.num_experts() {
            let mut s = gate.scores.clone();
            s.sort_by(|a, b| b.total_cmp(a));
            margin = margin.min(s[top_k - 1] - s[top_k]);
        }
    }
    Ok(margin)
}

/// Checks every parameter gradient of the mean batch cross-entropy,
/// including the sparse top-k path.
fn check_moe(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, redrawn: &mut usize) -> Result<(usize, f64)> {
    let (model, batch, top_k) = loop {
        let inst = random_moe(rng)?;
        if moe_margin(&inst.0, &inst.1, inst.2)? >= MARGIN {
            break inst;
        }
        *redrawn += 1;
        if *redrawn > MAX_REDRAWS {
            return Err(Error::InvalidConfig("could not draw a differentiable instance".into()));
        }
    };
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (grads, _) = model.gradients(&refs, top_k)?;
    let analytic = grads.flatten();
    let loss = |m: &MoEModel| -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in &batch {
            total += m.loss(x, *y, top_k)?;
        }
        Ok(total / batch.len() as f64)
    };

    let h = cfg.step;
    let base = model.params();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (q, a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[q] = base[q] + h;
        probe.set_params(&p)?;
        let plus = loss(&probe)?;
        p[q] = base[q] - h;
        probe.set_params(&p)?;
        let minus = loss(&probe)?;
        worst = worst.max(relative_error(*a, (plus - minus) / (2.0 * h)));
    }
    Ok((analytic.len(), worst))
}

/// Runs `cfg.instances` instances of each suite.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let tree = SeedTree::new(cfg.seed);
    let mut results = Vec::with_capacity(2 * cfg.instances);
    let mut redrawn = 0;
    for (label, suite) in [(0, Suite::DenseNet), (1, Suite::MoE)] {
        let mut rng = tree.child(label).rng();
        for index in 0..cfg.instances {
            let (params, max_rel_error) = match suite {
                Suite::DenseNet => check_dense(&mut rng, cfg, &mut redrawn)?,
                Suite::MoE => check_moe(&mut rng, cfg, &mut redrawn)?,
            };
            results.push(InstanceResult {
                suite,
                index,
                params,
                max_rel_error,
            });
        }
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        results,
        redrawn,
    })
}
