//! The client model: embedding network, linear softmax gate, and `K` expert
//! heads with sparse top-k activation.
//!
//! The gate has no bias; column `j` of the gating matrix is the proxy of
//! expert `j`. Only the selected experts are evaluated, and their outputs are
//! mixed with the raw (un-renormalised) gate scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{softmax, Activation, DenseNet, GradientSet, Matrix};

/// Layer widths shared by every client model in a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Raw feature dimension `d`.
    pub input_dim: usize,
    #[serde(default)]
    pub embedding_hidden: Vec<usize>,
    /// Representation dimension `n` seen by gate and experts.
    pub repr_dim: usize,
    #[serde(default)]
    pub expert_hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    pub fn embedding_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.embedding_hidden);
        dims.push(self.repr_dim);
        dims
    }

    pub fn expert_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.repr_dim];
        dims.extend(&self.expert_hidden);
        dims.push(self.classes);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.repr_dim == 0 {
            return Err(Error::InvalidConfig("model.input_dim and model.repr_dim must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("model.classes must be >= 2".into()));
        }
        if self.embedding_hidden.contains(&0) || self.expert_hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Fresh embedding network: ReLU on every layer, including the output.
    pub fn init_embedding<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DenseNet> {
        DenseNet::init(&self.embedding_dims(), Activation::Relu, Activation::Relu, rng)
    }

    pub fn init_expert<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DenseNet> {
        DenseNet::init(&self.expert_dims(), Activation::Relu, Activation::Identity, rng)
    }
}

/// Gate output for one representation.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub scores: Vec<f64>,
    /// Activated experts, highest score first.
    pub selected: Vec<usize>,
}

impl GateDecision {
    pub fn top(&self) -> usize {
        self.selected[0]
    }
}

/// Indices of the `k` largest values, largest first, ties to the lower index.
/// `-0.0` and `0.0` count as a tie.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(values.len()));
    idx
}

/// `softmax(h · Π)` and the `top_k` experts by score.
pub fn gate_scores(h: &[f64], gating: &Matrix, top_k: usize) -> Result<GateDecision> {
    let logits = gating.vecmat(h)?;
    let scores = softmax(&logits);
    let selected = top_k_indices(&scores, top_k.max(1));
    Ok(GateDecision { scores, selected })
}

/// Gradients of the mean batch loss for every part of a [`MoEModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct MoEGradients {
    pub embedding: GradientSet,
    pub gating: Matrix,
    pub experts: Vec<GradientSet>,
}

impl MoEGradients {
    fn zeros_like(model: &MoEModel) -> Self {
        Self {
            embedding: GradientSet::zeros_like(&model.embedding),
            gating: Matrix::zeros(model.gating.rows(), model.gating.cols()),
            experts: model.experts.iter().map(GradientSet::zeros_like).collect(),
        }
    }

    /// Same order as [`MoEModel::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.embedding.flatten();
        v.extend_from_slice(self.gating.data());
        for e in &self.experts {
            v.extend(e.flatten());
        }
        v
    }

    fn scale(&mut self, s: f64) {
        self.embedding.scale(s);
        self.gating.data_mut().iter_mut().for_each(|v| *v *= s);
        self.experts.iter_mut().for_each(|g| g.scale(s));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub embedding: DenseNet,
    /// `n × K`; column `j` is the proxy for expert `j`.
    pub gating: Matrix,
    pub experts: Vec<DenseNet>,
}

impl MoEModel {
    pub fn new(embedding: DenseNet, gating: Matrix, experts: Vec<DenseNet>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::InvalidConfig("a model needs at least one expert".into()));
        }
        if gating.cols() != experts.len() {
            return Err(Error::dim("gating columns vs experts", experts.len(), gating.cols()));
        }
        if gating.rows() != embedding.output_dim() {
            return Err(Error::dim("gating rows vs representation", embedding.output_dim(), gating.rows()));
        }
        for e in &experts {
            if !e.same_architecture(&experts[0]) {
                return Err(Error::InvalidConfig("experts must share one architecture".into()));
            }
            if e.input_dim() != embedding.output_dim() {
                return Err(Error::dim("expert input", embedding.output_dim(), e.input_dim()));
            }
        }
        Ok(Self {
            embedding,
            gating,
            experts,
        })
    }

    /// Random model with `k` experts. Draw order: embedding, gating, experts.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, k: usize, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if k == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        let embedding = arch.init_embedding(rng)?;
        let gating = Matrix::glorot(arch.repr_dim, k, rng);
        let experts = (0..k).map(|_| arch.init_expert(rng)).collect::<Result<_>>()?;
        Self::new(embedding, gating, experts)
    }

    /// Embedding, then gating (row-major), then experts in order.
    pub fn params(&self) -> Vec<f64> {
        let mut v = self.embedding.params();
        v.extend_from_slice(self.gating.data());
        for e in &self.experts {
            v.extend(e.params());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.embedding.param_count()
            + self.gating.data().len()
            + self.experts.iter().map(DenseNet::param_count).sum::<usize>()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim("flattened model parameters", self.param_count(), flat.len()));
        }
        if let Some(v) = flat.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("model parameter {v}")));
        }
        let mut at = self.embedding.param_count();
        self.embedding.set_params(&flat[..at])?;
        let g = self.gating.data().len();
        self.gating.data_mut().copy_from_slice(&flat[at..at + g]);
        at += g;
        for e in &mut self.experts {
            let n = e.param_count();
            e.set_params(&flat[at..at + n])?;
            at += n;
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn classes(&self) -> usize {
        self.experts[0].output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.embedding.input_dim()
    }

    /// Sparse forward pass: returns class logits and the gate decision.
    pub fn forward(&self, x: &[f64], top_k: usize) -> Result<(Vec<f64>, GateDecision)> {
        let h = self.embedding.forward(x)?;
        let gate = gate_scores(&h, &self.gating, top_k)?;
        let mut logits = vec![0.0; self.classes()];
        for &s in &gate.selected {
            let out = self.experts[s].forward(&h)?;
            for (y, o) in logits.iter_mut().zip(out) {
                *y += gate.scores[s] * o;
            }
        }
        Ok((logits, gate))
    }

    /// Predicted class (arg-max logit, ties to the lower class) and top expert.
    pub fn predict(&self, x: &[f64], top_k: usize) -> Result<(usize, usize)> {
        let (logits, gate) = self.forward(x, top_k)?;
        Ok((top_k_indices(&logits, 1)[0], gate.top()))
    }

    /// Cross-entropy of `softmax(logits)` against `label`.
    pub fn loss(&self, x: &[f64], label: usize, top_k: usize) -> Result<f64> {
        let (logits, _) = self.forward(x, top_k)?;
        cross_entropy(&logits, label)
    }

    /// Mean loss and mean gradients over `batch`.
    pub fn gradients(&self, batch: &[(&[f64], usize)], top_k: usize) -> Result<(MoEGradients, f64)> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty training batch".into()));
        }
        let mut acc = MoEGradients::zeros_like(self);
        let mut total = 0.0;
        for &(x, label) in batch {
            total += self.accumulate_sample(x, label, top_k, &mut acc)?;
        }
        let inv = 1.0 / batch.len() as f64;
        acc.scale(inv);
        Ok((acc, total * inv))
    }

    fn accumulate_sample(&self, x: &[f64], label: usize, top_k: usize, acc: &mut MoEGradients) -> Result<f64> {
        let classes = self.classes();
        if label >= classes {
            return Err(Error::InvalidConfig(format!("label {label} out of range for {classes} classes")));
        }
        let h = self.embedding.forward(x)?;
        let gate = gate_scores(&h, &self.gating, top_k)?;
        let k = self.num_experts();

        let mut outputs = Vec::with_capacity(gate.selected.len());
        let mut logits = vec![0.0; classes];
        for &s in &gate.selected {
            let out = self.experts[s].forward(&h)?;
            for (y, o) in logits.iter_mut().zip(&out) {
                *y += gate.scores[s] * o;
            }
            outputs.push(out);
        }
        let loss = cross_entropy(&logits, label)?;

        let mut delta = softmax(&logits);
        delta[label] -= 1.0;

        // Gradient w.r.t. the gate scores; zero for inactive experts.
        let mut du = vec![0.0; k];
        let mut dh = vec![0.0; h.len()];
        for (&s, out) in gate.selected.iter().zip(&outputs) {
            du[s] = crate::nn::dot(&delta, out);
            let upstream: Vec<f64> = delta.iter().map(|d| gate.scores[s] * d).collect();
            let (g, dx) = self.experts[s].backward(&h, &upstream)?;
            acc.experts[s].add_assign(&g);
            for (a, b) in dh.iter_mut().zip(dx) {
                *a += b;
            }
        }
        // Back through the softmax: dz_k = g_k (du_k - Σ_j g_j du_j).
        let mean: f64 = gate.scores.iter().zip(&du).map(|(g, u)| g * u).sum();
        let dz: Vec<f64> = gate.scores.iter().zip(&du).map(|(g, u)| g * (u - mean)).collect();
        for (r, &hr) in h.iter().enumerate() {
            for (c, &dzc) in dz.iter().enumerate() {
                let v = acc.gating.get(r, c) + hr * dzc;
                acc.gating.set(r, c, v);
            }
        }
        for (a, b) in dh.iter_mut().zip(self.gating.matvec(&dz)?) {
            *a += b;
        }
        let (g, _) = self.embedding.backward(x, &dh)?;
        acc.embedding.add_assign(&g);
        Ok(loss)
    }

    pub fn apply_gradients(&mut self, grads: &MoEGradients, eta: f64, freeze_embedding: bool) -> Result<()> {
        if !grads.gating.is_finite() {
            return Err(Error::NonFinite("gating gradient".into()));
        }
        if !freeze_embedding {
            self.embedding.apply_sgd(&grads.embedding, eta)?;
        }
        for (p, g) in self.gating.data_mut().iter_mut().zip(grads.gating.data()) {
            *p -= eta * g;
        }
        for (e, g) in self.experts.iter_mut().zip(&grads.experts) {
            e.apply_sgd(g, eta)?;
        }
        Ok(())
    }

    /// One SGD step on the mean cross-entropy of `batch`. Returns the
    /// pre-step mean loss.
    pub fn train_step(
        &mut self,
        batch: &[(&[f64], usize)],
        eta: f64,
        top_k: usize,
        freeze_embedding: bool,
    ) -> Result<f64> {
        let (grads, loss) = self.gradients(batch, top_k)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss ({loss})")));
        }
        self.apply_gradients(&grads, eta, freeze_embedding)?;
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_net("embedding", &self.embedding);
        ck.insert_matrix("gating", &self.gating);
        for (j, e) in self.experts.iter().enumerate() {
            ck.insert_net(&format!("expert.{j}"), e);
        }
        ck
    }

    /// Overwrites every tensor from `ck`, validating shapes against `self`.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_net("embedding", &mut self.embedding)?;
        self.gating = ck.read_matrix("gating", self.gating.rows(), self.gating.cols())?;
        for (j, e) in self.experts.iter_mut().enumerate() {
            ck.load_net(&format!("expert.{j}"), e)?;
        }
        Ok(())
    }
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("cross-entropy loss ({loss})")))
    }
}
