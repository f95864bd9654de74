//! Low-rank experts over a frozen linear base model, the rank-wise gating
//! hypernetwork, and the synthetic skill task they are trained on.
//!
//! Orientation is fixed throughout: inputs are row vectors, logits are
//! `y = xᵀ(W0 + ΔW)` with `W0: m×n`, `A: m×r`, `B: r×n`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::cosine_similarity;
use crate::trajectory::permuted_batches;

pub type Matrix = Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum LoraError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn shape_err(what: &str, got: &[usize], want: &[usize]) -> LoraError {
    LoraError::Shape(format!("{what}: got {got:?}, expected {want:?}"))
}

/// SHA-256 over the shape and little-endian entries.
pub fn digest_matrix(m: &Matrix) -> String {
    let mut h = Sha256::new();
    for d in m.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for x in m.iter() {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBaseModel {
    w0: Matrix,
}

impl ToyBaseModel {
    pub fn new(w0: Matrix) -> Result<Self, LoraError> {
        if w0.is_empty() {
            return Err(LoraError::Invalid("base weights are empty".into()));
        }
        if w0.iter().any(|x| !x.is_finite()) {
            return Err(LoraError::Numeric("base weights are not finite".into()));
        }
        Ok(Self { w0 })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn input_dim(&self) -> usize {
        self.w0.nrows()
    }

    pub fn classes(&self) -> usize {
        self.w0.ncols()
    }

    pub fn digest(&self) -> String {
        digest_matrix(&self.w0)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Array1<f64>, LoraError> {
        if x.len() != self.input_dim() {
            return Err(shape_err("input", &[x.len()], &[self.input_dim()]));
        }
        Ok(ArrayView1::from(x).dot(&self.w0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    pub expert_id: usize,
    pub a: Matrix,
    pub b: Matrix,
    pub source_cluster: usize,
    pub centroid: Vec<f64>,
}

impl LoraExpert {
    pub fn new(
        expert_id: usize,
        a: Matrix,
        b: Matrix,
        source_cluster: usize,
        centroid: Vec<f64>,
    ) -> Result<Self, LoraError> {
        let e = Self {
            expert_id,
            a,
            b,
            source_cluster,
            centroid,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.a.nrows(), self.b.ncols(), self.rank())
    }

    pub fn validate(&self) -> Result<(), LoraError> {
        let (m, n, r) = self.shape();
        if self.b.nrows() != r {
            return Err(shape_err("B rows", &[self.b.nrows()], &[r]));
        }
        if r == 0 || 2 * r > m.min(n) {
            return Err(LoraError::Invalid(format!(
                "rank {r} must be in 1..=min({m}, {n})/2"
            )));
        }
        if self.a.iter().chain(self.b.iter()).any(|x| !x.is_finite()) {
            return Err(LoraError::Numeric(format!("expert {} has non-finite entries", self.expert_id)));
        }
        Ok(())
    }

    pub fn delta(&self) -> Matrix {
        self.a.dot(&self.b)
    }

    pub fn digest(&self) -> String {
        digest_matrix(&self.a) + &digest_matrix(&self.b)
    }
}

/// `ΔW = A·B`.
pub fn lora_delta(a: &Matrix, b: &Matrix) -> Result<Matrix, LoraError> {
    if a.ncols() != b.nrows() {
        return Err(shape_err("inner dimension", &[a.ncols()], &[b.nrows()]));
    }
    Ok(a.dot(b))
}

/// Rank-wise gates, one row per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTensor {
    pub g: Matrix,
}

impl GateTensor {
    pub fn new(g: Matrix) -> Result<Self, LoraError> {
        if g.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(LoraError::Invalid("gate entries must lie in [0, 1]".into()));
        }
        Ok(Self { g })
    }

    pub fn filled(k: usize, r: usize, value: f64) -> Result<Self, LoraError> {
        Self::new(Array2::from_elem((k, r), value))
    }
}

fn check_experts(experts: &[LoraExpert]) -> Result<(usize, usize, usize), LoraError> {
    let first = experts
        .first()
        .ok_or_else(|| LoraError::Invalid("no experts".into()))?;
    let shape = first.shape();
    for e in experts {
        if e.shape() != shape || e.b.nrows() != shape.2 {
            return Err(LoraError::Shape(format!(
                "expert {} has (m, n, r) = {:?}, expected {shape:?}",
                e.expert_id,
                e.shape()
            )));
        }
    }
    Ok(shape)
}

/// `ΔW = Σ_k (A_k ⊙ g_k)·B_k`, column j of `A_k` scaled by `G[k][j]`.
pub fn compose_delta(experts: &[LoraExpert], gates: &GateTensor) -> Result<Matrix, LoraError> {
    let (m, n, r) = check_experts(experts)?;
    if gates.g.dim() != (experts.len(), r) {
        return Err(shape_err("gate tensor", gates.g.shape(), &[experts.len(), r]));
    }
    let mut delta = Array2::zeros((m, n));
    for (e, g) in experts.iter().zip(gates.g.rows()) {
        let scaled = &e.a * &g.broadcast((m, r)).expect("gate row has length r");
        delta += &scaled.dot(&e.b);
    }
    Ok(delta)
}

/// Logits under `W0 + ΔW`.
pub fn forward_with_delta(base: &ToyBaseModel, delta: &Matrix, x: &[f64]) -> Result<Array1<f64>, LoraError> {
    if delta.dim() != base.w0.dim() {
        return Err(shape_err("delta", delta.shape(), base.w0.shape()));
    }
    Ok(base.logits(x)? + ArrayView1::from(x).dot(delta))
}

pub fn forward(
    base: &ToyBaseModel,
    experts: &[LoraExpert],
    gates: &GateTensor,
    x: &[f64],
) -> Result<Array1<f64>, LoraError> {
    let delta = compose_delta(experts, gates)?;
    forward_with_delta(base, &delta, x)
}

/// Input-independent linear average `(1/K) Σ_k A_k·B_k`.
pub fn merge_static_average(experts: &[LoraExpert]) -> Result<Matrix, LoraError> {
    let (m, n, _) = check_experts(experts)?;
    let mut sum = Array2::zeros((m, n));
    for e in experts {
        sum += &e.delta();
    }
    Ok(sum / experts.len() as f64)
}

// ---------------------------------------------------------------------------
// Hypernetwork
// ---------------------------------------------------------------------------

/// One tanh hidden layer; sigmoid outputs reshaped to K×r gates.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetwork {
    pub k: usize,
    pub rank: usize,
    pub w1: Matrix,
    pub b1: Array1<f64>,
    pub w2: Matrix,
    pub b2: Array1<f64>,
}

pub const DEFAULT_HIDDEN: usize = 64;

impl HyperNetwork {
    pub fn new(embed_dim: usize, k: usize, rank: usize, hidden: usize, seed: u64) -> Self {
        let in_dim = embed_dim + k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            k,
            rank,
            w1: gaussian(hidden, in_dim, (1.0 / in_dim as f64).sqrt(), &mut rng),
            b1: Array1::zeros(hidden),
            w2: gaussian(k * rank, hidden, (1.0 / hidden as f64).sqrt(), &mut rng),
            b2: Array1::zeros(k * rank),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flat parameters in the order W1, b1, W2, b2 (row-major).
    pub fn params(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), LoraError> {
        if flat.len() != self.param_count() {
            return Err(shape_err("parameter vector", &[flat.len()], &[self.param_count()]));
        }
        let mut it = flat.iter().copied();
        for x in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *x = it.next().expect("length checked");
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in self.params() {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Hidden activations and pre-sigmoid outputs for a prepared input.
    fn layers(&self, z: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        let h = (self.w1.dot(z) + &self.b1).mapv(f64::tanh);
        let o = self.w2.dot(&h) + &self.b2;
        (h, o)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Concatenation of the embedding and its cosine similarity to each centroid.
pub fn hypernet_input(e: &[f64], centroids: &[Vec<f64>]) -> Result<Array1<f64>, LoraError> {
    if e.iter().any(|x| !x.is_finite()) {
        return Err(LoraError::Numeric("embedding is not finite".into()));
    }
    let mut z = e.to_vec();
    for c in centroids {
        let s = cosine_similarity(e, c).map_err(|err| LoraError::Invalid(err.to_string()))?;
        z.push(s);
    }
    Ok(Array1::from(z))
}

pub fn gate_weights(net: &HyperNetwork, e: &[f64], centroids: &[Vec<f64>]) -> Result<GateTensor, LoraError> {
    if centroids.len() != net.k {
        return Err(shape_err("centroids", &[centroids.len()], &[net.k]));
    }
    if e.len() + net.k != net.in_dim() {
        return Err(shape_err("embedding", &[e.len()], &[net.in_dim() - net.k]));
    }
    let z = hypernet_input(e, centroids)?;
    let (_, o) = net.layers(&z);
    let g = o
        .mapv(sigmoid)
        .into_shape_with_order((net.k, net.rank))
        .expect("output length is k·r");
    Ok(GateTensor { g })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One labelled example of the skill task; the input doubles as its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub skill: usize,
}

fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of `logits` against `label`, and `softmax − onehot`.
fn cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|l| (l - max).exp());
    let z = exp.sum();
    let loss = z.ln() - (logits[label] - max);
    let mut delta = exp / z;
    delta[label] -= 1.0;
    (loss, delta)
}

fn check_samples(samples: &[Sample], m: usize, n: usize) -> Result<(), LoraError> {
    if samples.is_empty() {
        return Err(LoraError::Invalid("no training samples".into()));
    }
    for s in samples {
        if s.x.len() != m {
            return Err(shape_err("sample input", &[s.x.len()], &[m]));
        }
        if s.label >= n {
            return Err(LoraError::Invalid(format!("label {} outside {n} classes", s.label)));
        }
    }
    Ok(())
}

/// Full-weight logistic regression from zero, used only to build the base.
pub fn train_base(samples: &[Sample], classes: usize, steps: usize, lr: f64) -> Result<(ToyBaseModel, Vec<f64>), LoraError> {
    let m = samples
        .first()
        .map(|s| s.x.len())
        .ok_or_else(|| LoraError::Invalid("no training samples".into()))?;
    check_samples(samples, m, classes)?;
    let mut w = Array2::zeros((m, classes));
    let mut losses = Vec::with_capacity(steps);
    let scale = 1.0 / samples.len() as f64;
    for _ in 0..steps {
        let mut grad = Array2::<f64>::zeros((m, classes));
        let mut loss = 0.0;
        for s in samples {
            let x = ArrayView1::from(&s.x);
            let (l, delta) = cross_entropy(&x.dot(&w), s.label);
            loss += l;
            grad += &outer(x, delta.view());
        }
        losses.push(loss * scale);
        w.scaled_add(-lr * scale, &grad);
    }
    Ok((ToyBaseModel::new(w)?, losses))
}

fn outer(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Matrix {
    let (a, b) = (u.len(), v.len());
    Array2::from_shape_fn((a, b), |(i, j)| u[i] * v[j])
}

/// Mean cross-entropy of `W0 + A·B` over `samples`, with gradients wrt A and B.
fn expert_loss_and_grad(base: &ToyBaseModel, a: &Matrix, b: &Matrix, samples: &[Sample]) -> (f64, Matrix, Matrix) {
    let mut ga = Array2::zeros(a.raw_dim());
    let mut gb = Array2::zeros(b.raw_dim());
    let mut loss = 0.0;
    for s in samples {
        let x = ArrayView1::from(&s.x);
        let u = x.dot(a);
        let logits = x.dot(&base.w0) + u.dot(b);
        let (l, delta) = cross_entropy(&logits, s.label);
        loss += l;
        gb += &outer(u.view(), delta.view());
        ga += &outer(x, b.dot(&delta).view());
    }
    let scale = 1.0 / samples.len() as f64;
    (loss * scale, ga * scale, gb * scale)
}

/// Full-batch gradient descent on the cluster's cross-entropy with `W0`
/// frozen. `A` starts small and random, `B` at zero, so the initial delta is
/// zero. Returns the expert and the loss before each step.
#[allow(clippy::too_many_arguments)]
pub fn train_expert(
    base: &ToyBaseModel,
    samples: &[Sample],
    rank: usize,
    steps: usize,
    lr: f64,
    seed: u64,
    expert_id: usize,
    centroid: Vec<f64>,
) -> Result<(LoraExpert, Vec<f64>), LoraError> {
    let (m, n) = base.w0.dim();
    check_samples(samples, m, n).map_err(|e| match e {
        LoraError::Invalid(_) if samples.is_empty() => LoraError::Invalid(format!("cluster {expert_id} is empty")),
        other => other,
    })?;
    if rank == 0 || 2 * rank > m.min(n) {
        return Err(LoraError::Invalid(format!("rank {rank} must be in 1..=min({m}, {n})/2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = gaussian(m, rank, 0.1 / (m as f64).sqrt(), &mut rng);
    let mut b = Array2::zeros((rank, n));
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, ga, gb) = expert_loss_and_grad(base, &a, &b, samples);
        if !loss.is_finite() {
            return Err(LoraError::Numeric(format!("expert {expert_id} loss diverged")));
        }
        losses.push(loss);
        a.scaled_add(-lr, &ga);
        b.scaled_add(-lr, &gb);
    }
    Ok((LoraExpert::new(expert_id, a, b, expert_id, centroid)?, losses))
}

/// Mean cross-entropy of the gated composition over `batch`, and its gradient
/// wrt the flat hypernetwork parameters. Experts and base enter as constants.
pub fn hypernet_loss_and_grad(
    net: &HyperNetwork,
    base: &ToyBaseModel,
    experts: &[LoraExpert],
    batch: &[&Sample],
) -> Result<(f64, Vec<f64>), LoraError> {
    let (m, n, r) = check_experts(experts)?;
    if (m, n) != base.w0.dim() {
        return Err(shape_err("experts vs base", &[m, n], base.w0.shape()));
    }
    if experts.len() != net.k || r != net.rank || m + net.k != net.in_dim() {
        return Err(LoraError::Shape(format!(
            "hypernetwork (k {}, r {}, in {}) does not fit {} experts of rank {r} over inputs of dim {m}",
            net.k,
            net.rank,
            net.in_dim(),
            experts.len()
        )));
    }
    if batch.is_empty() {
        return Err(LoraError::Invalid("empty batch".into()));
    }
    let centroids: Vec<Vec<f64>> = experts.iter().map(|e| e.centroid.clone()).collect();
    let mut gw1 = Array2::<f64>::zeros(net.w1.raw_dim());
    let mut gb1 = Array1::<f64>::zeros(net.b1.len());
    let mut gw2 = Array2::<f64>::zeros(net.w2.raw_dim());
    let mut gb2 = Array1::<f64>::zeros(net.b2.len());
    let mut loss = 0.0;
    for s in batch {
        check_samples(std::slice::from_ref(*s), m, n)?;
        let x = ArrayView1::from(&s.x);
        let z = hypernet_input(&s.x, &centroids)?;
        let (h, o) = net.layers(&z);
        let g = o.mapv(sigmoid);

        // u[k·r + j] = xᵀ a_kj; row k·r + j of `bs` is b_kj.
        let mut u = Array1::zeros(net.k * r);
        let mut logits = x.dot(&base.w0);
        for (k, e) in experts.iter().enumerate() {
            let uk = x.dot(&e.a);
            for j in 0..r {
                u[k * r + j] = uk[j];
                logits.scaled_add(g[k * r + j] * uk[j], &e.b.row(j));
            }
        }
        let (l, delta) = cross_entropy(&logits, s.label);
        loss += l;

        let mut d_o = Array1::zeros(net.k * r);
        for (k, e) in experts.iter().enumerate() {
            for j in 0..r {
                let idx = k * r + j;
                let d_g = u[idx] * e.b.row(j).dot(&delta);
                d_o[idx] = d_g * g[idx] * (1.0 - g[idx]);
            }
        }
        gw2 += &outer(d_o.view(), h.view());
        gb2 += &d_o;
        let d_pre = net.w2.t().dot(&d_o) * h.mapv(|v| 1.0 - v * v);
        gw1 += &outer(d_pre.view(), z.view());
        gb1 += &d_pre;
    }
    let scale = 1.0 / batch.len() as f64;
    let grad = gw1
        .iter()
        .chain(gb1.iter())
        .chain(gw2.iter())
        .chain(gb2.iter())
        .map(|g| g * scale)
        .collect();
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperTrainConfig {
    pub hidden: usize,
    /// Number of mini-batch updates.
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HyperTrainConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            steps: 600,
            lr: 0.5,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Mini-batch gradient descent on the hypernetwork alone; batches come from
/// a fresh seeded permutation every epoch. Returns the network and the mean
/// training loss after each epoch (index 0 is before training).
pub fn train_hypernet(
    base: &ToyBaseModel,
    experts: &[LoraExpert],
    samples: &[Sample],
    cfg: &HyperTrainConfig,
) -> Result<(HyperNetwork, Vec<f64>), LoraError> {
    let (m, _, r) = check_experts(experts)?;
    if samples.is_empty() {
        return Err(LoraError::Invalid("no training samples".into()));
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(LoraError::Invalid("batch_size and hidden must be positive".into()));
    }
    let mut net = HyperNetwork::new(m, experts.len(), r, cfg.hidden, cfg.seed);
    let all: Vec<&Sample> = samples.iter().collect();
    let mut curve = vec![hypernet_loss_and_grad(&net, base, experts, &all)?.0];
    let mut params = net.params();
    let mut step = 0;
    let mut epoch = 0u64;
    while step < cfg.steps {
        for batch in permuted_batches(samples, cfg.batch_size, cfg.seed.wrapping_add(epoch)) {
            if step == cfg.steps {
                break;
            }
            let (loss, grad) = hypernet_loss_and_grad(&net, base, experts, &batch)?;
            if !loss.is_finite() {
                return Err(LoraError::Numeric("hypernetwork loss diverged".into()));
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.lr * g;
            }
            net.set_params(&params)?;
            step += 1;
        }
        epoch += 1;
        curve.push(hypernet_loss_and_grad(&net, base, experts, &all)?.0);
    }
    Ok((net, curve))
}

/// Largest relative disagreement between the analytic gradient returned by
/// `f` at `params` and central finite differences, with relative error
/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert!(eps > 0.0, "eps must be positive");
    let (_, analytic) = f(params);
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let plus = f(&probe).0;
        probe[i] = params[i] - eps;
        let minus = f(&probe).0;
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

pub fn predict(logits: &Array1<f64>) -> usize {
    argmax(logits.view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    /// Accuracy on the samples assigned to each cluster (NaN when empty).
    pub per_cluster: Vec<f64>,
    pub overall: f64,
}

fn score(name: String, hits: &[bool], clusters: &[usize], k: usize) -> ModelScore {
    let mut right = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&h, &c) in hits.iter().zip(clusters) {
        total[c] += 1;
        right[c] += usize::from(h);
    }
    ModelScore {
        model: name,
        per_cluster: right
            .iter()
            .zip(&total)
            .map(|(&r, &t)| if t == 0 { f64::NAN } else { r as f64 / t as f64 })
            .collect(),
        overall: hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64,
    }
}

/// Accuracy rows for the base, each expert alone, the static average, and
/// the hypernetwork-gated composition, in that order.
pub fn evaluate(
    base: &ToyBaseModel,
    experts: &[LoraExpert],
    net: &HyperNetwork,
    samples: &[Sample],
    clusters: &[usize],
) -> Result<Vec<ModelScore>, LoraError> {
    let k = experts.len();
    if clusters.len() != samples.len() || clusters.iter().any(|&c| c >= k) {
        return Err(LoraError::Invalid("cluster labels do not match samples".into()));
    }
    let centroids: Vec<Vec<f64>> = experts.iter().map(|e| e.centroid.clone()).collect();
    let static_delta = merge_static_average(experts)?;
    let zero = Array2::zeros(base.w0.dim());
    let hits = |delta: &Matrix| -> Result<Vec<bool>, LoraError> {
        samples
            .iter()
            .map(|s| Ok(predict(&forward_with_delta(base, delta, &s.x)?) == s.label))
            .collect()
    };
    let mut rows = vec![score("base".into(), &hits(&zero)?, clusters, k)];
    for e in experts {
        rows.push(score(format!("expert-{}", e.expert_id), &hits(&e.delta())?, clusters, k));
    }
    rows.push(score("static-average".into(), &hits(&static_delta)?, clusters, k));
    let gated = samples
        .iter()
        .map(|s| {
            let g = gate_weights(net, &s.x, &centroids)?;
            Ok(predict(&forward(base, experts, &g, &s.x)?) == s.label)
        })
        .collect::<Result<Vec<bool>, LoraError>>()?;
    rows.push(score("disenlora".into(), &gated, clusters, k));
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Synthetic skill task
// ---------------------------------------------------------------------------

/// Inputs are `[indicator_scale · onehot(skill) | f]` with `f ~ N(0, I)`.
/// Skill `s` labels by `argmax fᵀ(R0 + P_s)` where `P_s` has low rank; the
/// base model learns the common rule `R0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkillTaskConfig {
    pub skills: usize,
    pub features: usize,
    pub classes: usize,
    pub perturb_rank: usize,
    pub perturb_scale: f64,
    pub indicator_scale: f64,
    /// Minimum gap between the top two rule scores of an accepted sample.
    pub margin: f64,
    pub seed: u64,
}

impl Default for SkillTaskConfig {
    fn default() -> Self {
        Self {
            skills: 3,
            features: 8,
            classes: 6,
            perturb_rank: 2,
            perturb_scale: 2.0,
            indicator_scale: 4.0,
            margin: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillTask {
    pub cfg: SkillTaskConfig,
    pub common: Matrix,
    pub rules: Vec<Matrix>,
}

impl SkillTask {
    pub fn new(cfg: SkillTaskConfig) -> Result<Self, LoraError> {
        if cfg.skills == 0 || cfg.features == 0 || cfg.classes < 2 || cfg.perturb_rank == 0 {
            return Err(LoraError::Invalid("skill task dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, n, p) = (cfg.features, cfg.classes, cfg.perturb_rank);
        let common = gaussian(d, n, 1.0, &mut rng);
        let rules = (0..cfg.skills)
            .map(|_| {
                let u = gaussian(d, p, 1.0, &mut rng);
                let v = gaussian(p, n, cfg.perturb_scale / (p as f64).sqrt(), &mut rng);
                &common + &u.dot(&v)
            })
            .collect();
        Ok(Self { cfg, common, rules })
    }

    pub fn input_dim(&self) -> usize {
        self.cfg.skills + self.cfg.features
    }

    fn draw(&self, count: usize, seed: u64, rule_of: impl Fn(usize) -> usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let skill = out.len() % self.cfg.skills;
            let f: Array1<f64> = (0..self.cfg.features).map(|_| normal.sample(&mut rng)).collect();
            let rule = rule_of(skill);
            let scores = if rule == usize::MAX {
                f.dot(&self.common)
            } else {
                f.dot(&self.rules[rule])
            };
            let mut sorted = scores.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted[0] - sorted[1] < self.cfg.margin {
                continue;
            }
            let mut x = vec![0.0; self.cfg.skills];
            x[skill] = self.cfg.indicator_scale;
            x.extend(f.iter());
            out.push(Sample {
                x,
                label: argmax(scores.view()),
                skill,
            });
        }
        out
    }

    /// Balanced samples labelled by each skill's own rule.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Sample> {
        self.draw(count, seed, |s| s)
    }

    /// Balanced samples labelled by the common rule.
    pub fn common_samples(&self, count: usize, seed: u64) -> Vec<Sample> {
        self.draw(count, seed, |_| usize::MAX)
    }
}

// ---------------------------------------------------------------------------
// Sample files
// ---------------------------------------------------------------------------
//
// One sample per line: `skill<TAB>label<TAB>x_1 x_2 … x_m`, floats in
// shortest round-trip form.

pub fn write_samples(samples: &[Sample], path: &Path) -> Result<(), LoraError> {
    let mut text = String::new();
    for s in samples {
        let xs: Vec<String> = s.x.iter().map(f64::to_string).collect();
        text.push_str(&format!("{}\t{}\t{}\n", s.skill, s.label, xs.join(" ")));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>, LoraError> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, reason: String| LoraError::Format {
        path: format!("{}:{line}", path.display()),
        reason,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [skill, label, xs] = fields[..] else {
            return Err(bad(i + 1, format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let x = xs
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| bad(i + 1, format!("bad value `{v}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(prev) = out.first().map(|s: &Sample| s.x.len()) {
            if prev != x.len() {
                return Err(bad(i + 1, format!("input has {} values, earlier lines have {prev}", x.len())));
            }
        }
        out.push(Sample {
            x,
            label: label.parse().map_err(|e| bad(i + 1, format!("bad label: {e}")))?,
            skill: skill.parse().map_err(|e| bad(i + 1, format!("bad skill: {e}")))?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tensor files
// ---------------------------------------------------------------------------
//
// Layout (little-endian): magic `BDCT`, u32 tensor count, then per tensor a
// u32 name length, UTF-8 name, u32 rows, u32 cols and rows·cols f64 values.

const MAGIC: &[u8; 4] = b"BDCT";

pub fn save_tensors(path: &Path, tensors: &[(&str, &Matrix)]) -> Result<(), LoraError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for x in t.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Matrix>, LoraError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: &str| LoraError::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8], LoraError> {
        if cur.len() < n {
            return Err(bad("truncated tensor file"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(bad("not a tensor file"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let data = take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), data).map_err(|_| bad("inconsistent tensor shape"))?;
        out.insert(name, t);
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(out)
}

fn row(v: &Array1<f64>) -> Matrix {
    v.clone().insert_axis(Axis(0))
}

fn get<'a>(map: &'a BTreeMap<String, Matrix>, name: &str, path: &Path) -> Result<&'a Matrix, LoraError> {
    map.get(name).ok_or_else(|| LoraError::Format {
        path: path.display().to_string(),
        reason: format!("missing tensor `{name}`"),
    })
}

pub fn save_base(base: &ToyBaseModel, path: &Path) -> Result<(), LoraError> {
    save_tensors(path, &[("w0", &base.w0)])
}

pub fn load_base(path: &Path) -> Result<ToyBaseModel, LoraError> {
    let map = load_tensors(path)?;
    ToyBaseModel::new(get(&map, "w0", path)?.clone())
}

/// Stores A, B and the centroid; id and source cluster live in the manifest.
pub fn save_expert(e: &LoraExpert, path: &Path) -> Result<(), LoraError> {
    let centroid = Array1::from(e.centroid.clone());
    save_tensors(path, &[("a", &e.a), ("b", &e.b), ("centroid", &row(&centroid))])
}

pub fn load_expert(path: &Path, expert_id: usize, source_cluster: usize) -> Result<LoraExpert, LoraError> {
    let map = load_tensors(path)?;
    let centroid = get(&map, "centroid", path)?.iter().copied().collect();
    LoraExpert::new(
        expert_id,
        get(&map, "a", path)?.clone(),
        get(&map, "b", path)?.clone(),
        source_cluster,
        centroid,
    )
}

pub fn save_hypernet(net: &HyperNetwork, path: &Path) -> Result<(), LoraError> {
    save_tensors(
        path,
        &[("w1", &net.w1), ("b1", &row(&net.b1)), ("w2", &net.w2), ("b2", &row(&net.b2))],
    )
}

pub fn load_hypernet(path: &Path, k: usize, rank: usize) -> Result<HyperNetwork, LoraError> {
    let map = load_tensors(path)?;
    let w1 = get(&map, "w1", path)?.clone();
    let w2 = get(&map, "w2", path)?.clone();
    let b1: Array1<f64> = get(&map, "b1", path)?.iter().copied().collect();
    let b2: Array1<f64> = get(&map, "b2", path)?.iter().copied().collect();
    if w2.nrows() != k * rank || b2.len() != k * rank || b1.len() != w1.nrows() || w2.ncols() != w1.nrows() {
        return Err(LoraError::Format {
            path: path.display().to_string(),
            reason: "hypernetwork tensor shapes are inconsistent".into(),
        });
    }
    Ok(HyperNetwork { k, rank, w1, b1, w2, b2 })
}
