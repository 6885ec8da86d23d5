//! The learned shot-count map.
//!
//! A single-hidden-layer tanh network maps an instance's features to M+1
//! outputs, one per candidate shot count. In labeled (ICL) mode every output
//! is an independent sigmoid trained with binary cross-entropy against the
//! instance's shot-outcome vector; in labels-off (RAG) mode the outputs form a
//! softmax trained with categorical cross-entropy against a one-hot target.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::argmax_first;
use crate::index::{EmbeddingVector, Neighborhood};
use crate::oracle::{RagShotTarget, ShotOutcomeVector};

pub const MODEL_MAGIC: &[u8; 7] = b"AICLKP1";
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no label for neighbor {0:?}")]
    MissingNeighborLabel(String),
    #[error("neighborhood has {got} entries, E+N features need {needed}")]
    ShortNeighborhood { needed: usize, got: usize },
    #[error("loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("invalid training input: {0}")]
    InvalidInput(String),
    #[error("model file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Embedding only.
    #[serde(rename = "E")]
    E,
    /// Embedding followed by the class codes of the M nearest neighbors.
    #[serde(rename = "E+N")]
    EN,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "E" => Ok(Self::E),
            "E+N" | "EN" => Ok(Self::EN),
            _ => Err(format!("unknown variant {s:?} (expected E or E+N)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::E => "E",
            Self::EN => "E+N",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn feature_dim(embedding_dim: usize, m: usize, variant: Variant) -> usize {
    match variant {
        Variant::E => embedding_dim,
        Variant::EN => embedding_dim + m,
    }
}

/// Builds the predictor input for one instance. For E+N the class index of
/// each of the first `m` neighbors is appended, most similar first.
pub fn featurize(
    embedding: &EmbeddingVector,
    neighborhood: &Neighborhood,
    labels: &HashMap<String, usize>,
    variant: Variant,
    m: usize,
) -> Result<FeatureVector, PredictorError> {
    let mut values = embedding.to_f64();
    if variant == Variant::EN {
        if neighborhood.len() < m {
            return Err(PredictorError::ShortNeighborhood { needed: m, got: neighborhood.len() });
        }
        for n in neighborhood.prefix(m) {
            let code = labels.get(&n.id).ok_or_else(|| PredictorError::MissingNeighborLabel(n.id.clone()))?;
            values.push(*code as f64);
        }
    }
    Ok(FeatureVector(values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Independent per-output sigmoids, binary cross-entropy.
    MultiLabel,
    /// Softmax over outputs, categorical cross-entropy.
    MultiClass,
}

impl Head {
    fn code(self) -> u8 {
        match self {
            Head::MultiLabel => 0,
            Head::MultiClass => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Head::MultiLabel),
            1 => Some(Head::MultiClass),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { hidden: DEFAULT_HIDDEN, epochs: 200, learning_rate: 0.05, batch_size: 32, seed: 0 }
    }
}

/// Targets for [`train`], one per feature vector.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    MultiLabel(&'a [ShotOutcomeVector]),
    MultiClass(&'a [RagShotTarget]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::MultiLabel(t) => t.len(),
            Targets::MultiClass(t) => t.len(),
        }
    }

    fn head(&self) -> Head {
        match self {
            Targets::MultiLabel(_) => Head::MultiLabel,
            Targets::MultiClass(_) => Head::MultiClass,
        }
    }

    fn vectors(&self) -> Result<Vec<Vec<f64>>, PredictorError> {
        let out: Vec<Vec<f64>> = match self {
            Targets::MultiLabel(t) => t.iter().map(ShotOutcomeVector::as_target).collect(),
            Targets::MultiClass(t) => t.iter().map(RagShotTarget::as_target).collect(),
        };
        if let Some(w) = out.first().map(Vec::len) {
            if let Some(bad) = out.iter().find(|v| v.len() != w) {
                return Err(PredictorError::DimensionMismatch { expected: w, got: bad.len() });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KPredictorModel {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub head: Head,
    pub seed: u64,
    /// `hidden x input_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `output_dim x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub hyper: Hyper,
    /// Mean training loss before the first update, then after every epoch.
    pub train_log: Vec<f64>,
}

/// Parameter gradients, laid out like the model's parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn zeros(m: &KPredictorModel) -> Self {
        Self { w1: vec![0.0; m.w1.len()], b1: vec![0.0; m.b1.len()], w2: vec![0.0; m.w2.len()], b2: vec![0.0; m.b2.len()] }
    }

    pub fn flatten(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl KPredictorModel {
    /// Fresh model with weights uniform in `±1/sqrt(fan_in)`.
    pub fn new(input_dim: usize, hidden: usize, output_dim: usize, head: Head, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |n: usize, fan_in: usize| -> Vec<f64> {
            let r = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-r..r)).collect()
        };
        let w1 = init(hidden * input_dim, input_dim);
        let b1 = init(hidden, input_dim);
        let w2 = init(output_dim * hidden, hidden);
        let b2 = init(output_dim, hidden);
        Self {
            input_dim,
            hidden,
            output_dim,
            head,
            seed,
            w1,
            b1,
            w2,
            b2,
            hyper: Hyper { hidden, seed, ..Hyper::default() },
            train_log: Vec::new(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), PredictorError> {
        if x.len() != self.input_dim {
            return Err(PredictorError::DimensionMismatch { expected: self.input_dim, got: x.len() });
        }
        Ok(())
    }

    /// Hidden activations and output logits.
    fn forward_raw(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
                (self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        let z: Vec<f64> = (0..self.output_dim)
            .map(|o| {
                let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                self.b2[o] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        (h, z)
    }

    fn activate(&self, z: &[f64]) -> Vec<f64> {
        match self.head {
            Head::MultiLabel => z.iter().map(|&v| sigmoid(v)).collect(),
            Head::MultiClass => softmax(z),
        }
    }

    /// Posteriors over shot counts `0..=M`.
    pub fn forward(&self, x: &FeatureVector) -> Result<Vec<f64>, PredictorError> {
        self.check_input(&x.0)?;
        Ok(self.activate(&self.forward_raw(&x.0).1))
    }

    fn loss_from_logits(&self, z: &[f64], t: &[f64]) -> f64 {
        match self.head {
            // softplus(z) - t z, written to stay finite for large |z|
            Head::MultiLabel => z.iter().zip(t).map(|(&z, &t)| z.max(0.0) - t * z + (-z.abs()).exp().ln_1p()).sum(),
            Head::MultiClass => {
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                z.iter().zip(t).map(|(&z, &t)| t * (lse - z)).sum()
            }
        }
    }

    pub fn loss(&self, x: &FeatureVector, target: &[f64]) -> Result<f64, PredictorError> {
        self.check_input(&x.0)?;
        self.check_target(target)?;
        Ok(self.loss_from_logits(&self.forward_raw(&x.0).1, target))
    }

    fn check_target(&self, t: &[f64]) -> Result<(), PredictorError> {
        if t.len() != self.output_dim {
            return Err(PredictorError::DimensionMismatch { expected: self.output_dim, got: t.len() });
        }
        Ok(())
    }

    /// Adds `d loss / d params` for one example into `g`.
    fn accumulate(&self, x: &[f64], t: &[f64], g: &mut Gradients) {
        let (h, z) = self.forward_raw(x);
        let mass = match self.head {
            Head::MultiLabel => 1.0,
            Head::MultiClass => t.iter().sum(),
        };
        let dz: Vec<f64> = self.activate(&z).iter().zip(t).map(|(p, t)| p * mass - t).collect();
        let mut dh = vec![0.0; self.hidden];
        for (o, &d) in dz.iter().enumerate() {
            g.b2[o] += d;
            let row = o * self.hidden;
            for j in 0..self.hidden {
                g.w2[row + j] += d * h[j];
                dh[j] += d * self.w2[row + j];
            }
        }
        for j in 0..self.hidden {
            let da = dh[j] * (1.0 - h[j] * h[j]);
            g.b1[j] += da;
            let row = j * self.input_dim;
            for (i, &xi) in x.iter().enumerate() {
                g.w1[row + i] += da * xi;
            }
        }
    }

    pub fn gradients(&self, x: &FeatureVector, target: &[f64]) -> Result<Gradients, PredictorError> {
        self.check_input(&x.0)?;
        self.check_target(target)?;
        let mut g = Gradients::zeros(self);
        self.accumulate(&x.0, target, &mut g);
        Ok(g)
    }

    fn step(&mut self, g: &Gradients, lr: f64) {
        for (p, d) in self.w1.iter_mut().zip(&g.w1) {
            *p -= lr * d;
        }
        for (p, d) in self.b1.iter_mut().zip(&g.b1) {
            *p -= lr * d;
        }
        for (p, d) in self.w2.iter_mut().zip(&g.w2) {
            *p -= lr * d;
        }
        for (p, d) in self.b2.iter_mut().zip(&g.b2) {
            *p -= lr * d;
        }
    }

    fn param_mut(&mut self, i: usize) -> &mut f64 {
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        match i {
            i if i < a => &mut self.w1[i],
            i if i < a + b => &mut self.b1[i - a],
            i if i < a + b + c => &mut self.w2[i - a - b],
            i => &mut self.b2[i - a - b - c],
        }
    }

    fn all_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2].iter().all(|v| v.iter().all(|p| p.is_finite()))
    }

    fn mean_loss(&self, xs: &[FeatureVector], ts: &[Vec<f64>]) -> f64 {
        xs.iter().zip(ts).map(|(x, t)| self.loss_from_logits(&self.forward_raw(&x.0).1, t)).sum::<f64>() / xs.len() as f64
    }

    /// One mini-batch gradient step on the batch-mean loss.
    pub fn update(&mut self, xs: &[FeatureVector], ts: &[Vec<f64>], lr: f64) -> Result<(), PredictorError> {
        let mut g = Gradients::zeros(self);
        for (x, t) in xs.iter().zip(ts) {
            self.check_input(&x.0)?;
            self.check_target(t)?;
            self.accumulate(&x.0, t, &mut g);
        }
        let scale = lr / xs.len().max(1) as f64;
        self.step(&g, scale);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        let io = |source| PredictorError::Io { path: path.display().to_string(), source };
        fs::write(path, self.encode()).map_err(io)?;
        let sidecar = Sidecar {
            activation: "tanh".into(),
            head: self.head,
            input_dim: self.input_dim,
            hidden: self.hidden,
            output_dim: self.output_dim,
            hyper: self.hyper,
            train_log: self.train_log.clone(),
        };
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"))
            .map_err(|source| PredictorError::Io { path: side.display().to_string(), source })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.num_params());
        out.extend_from_slice(MODEL_MAGIC);
        for d in [self.input_dim, self.hidden, self.output_dim] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.head.code());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for block in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for p in block {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 28 || &bytes[..7] != MODEL_MAGIC {
            return Err("bad magic or truncated header".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (input_dim, hidden, output_dim) = (u32_at(7), u32_at(11), u32_at(15));
        let head = Head::from_code(bytes[19]).ok_or("unknown head type")?;
        let seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let n = hidden * input_dim + hidden + output_dim * hidden + output_dim;
        if bytes.len() != 28 + 8 * n {
            return Err(format!("expected {} parameter bytes, found {}", 8 * n, bytes.len() - 28));
        }
        let mut params = bytes[28..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |k: usize| params.by_ref().take(k).collect::<Vec<f64>>();
        let w1 = take(hidden * input_dim);
        let b1 = take(hidden);
        let w2 = take(output_dim * hidden);
        let b2 = take(output_dim);
        Ok(Self {
            input_dim,
            hidden,
            output_dim,
            head,
            seed,
            w1,
            b1,
            w2,
            b2,
            hyper: Hyper { hidden, seed, ..Hyper::default() },
            train_log: Vec::new(),
        })
    }

    /// Loads the binary model and, when present, its JSON sidecar.
    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        let bytes = fs::read(path).map_err(|source| PredictorError::Io { path: path.display().to_string(), source })?;
        let mut model = Self::decode(&bytes).map_err(|reason| PredictorError::Format { path: path.display().to_string(), reason })?;
        if let Ok(s) = fs::read(sidecar_path(path)) {
            if let Ok(side) = serde_json::from_slice::<Sidecar>(&s) {
                model.hyper = side.hyper;
                model.train_log = side.train_log;
            }
        }
        Ok(model)
    }
}

pub fn sidecar_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("json")
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    activation: String,
    head: Head,
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
    hyper: Hyper,
    train_log: Vec<f64>,
}

/// Fits a predictor with seeded mini-batch gradient descent.
pub fn train(features: &[FeatureVector], targets: Targets<'_>, hyper: &Hyper) -> Result<KPredictorModel, PredictorError> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(PredictorError::InvalidInput(format!("{} feature vectors for {} targets", features.len(), targets.len())));
    }
    if hyper.hidden == 0 || hyper.batch_size == 0 || hyper.learning_rate.is_nan() || hyper.learning_rate <= 0.0 {
        return Err(PredictorError::InvalidInput("hidden, batch_size and learning_rate must be positive".into()));
    }
    let dim = features[0].dim();
    if let Some(bad) = features.iter().find(|f| f.dim() != dim) {
        return Err(PredictorError::DimensionMismatch { expected: dim, got: bad.dim() });
    }
    let ts = targets.vectors()?;
    let out = ts[0].len();
    let mut model = KPredictorModel::new(dim, hyper.hidden, out, targets.head(), hyper.seed);
    model.hyper = *hyper;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let initial = model.mean_loss(features, &ts);
    if !initial.is_finite() {
        return Err(PredictorError::NonFiniteLoss(0));
    }
    model.train_log.push(initial);
    let mut g = Gradients::zeros(&model);
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            for v in [&mut g.w1, &mut g.b1, &mut g.w2, &mut g.b2] {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
            for &i in batch {
                model.accumulate(&features[i].0, &ts[i], &mut g);
            }
            model.step(&g, hyper.learning_rate / batch.len() as f64);
        }
        let loss = model.mean_loss(features, &ts);
        if !loss.is_finite() || !model.all_finite() {
            return Err(PredictorError::NonFiniteLoss(epoch));
        }
        model.train_log.push(loss);
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    #[default]
    MaxConfidence,
    SmallestIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub chosen_k: usize,
    pub posteriors: Vec<f64>,
    pub heuristic: Heuristic,
}

/// Picks a shot count from per-k posteriors.
///
/// `MaxConfidence` takes the argmax (smallest k on ties). `SmallestIndex`
/// takes the first k whose posterior exceeds 0.5, else falls back to argmax.
pub fn select_k(posteriors: &[f64], heuristic: Heuristic) -> usize {
    match heuristic {
        Heuristic::MaxConfidence => argmax_first(posteriors),
        Heuristic::SmallestIndex => posteriors.iter().position(|&p| p > 0.5).unwrap_or_else(|| argmax_first(posteriors)),
    }
}

pub fn predict_k(model: &KPredictorModel, feature: &FeatureVector, heuristic: Heuristic) -> Result<KSelection, PredictorError> {
    let posteriors = model.forward(feature)?;
    Ok(KSelection { chosen_k: select_k(&posteriors, heuristic), posteriors, heuristic })
}

/// Relative disagreement between the analytic gradient and a central finite
/// difference, `|a - n| / max(|a|, |n|)`, with both gradients flattened over
/// every parameter (Euclidean norm).
pub fn gradient_check(model: &KPredictorModel, feature: &FeatureVector, target: &[f64], epsilon: f64) -> Result<f64, PredictorError> {
    if !(1e-8..=1e-3).contains(&epsilon) {
        return Err(PredictorError::InvalidInput(format!("epsilon {epsilon} outside [1e-8, 1e-3]")));
    }
    let analytic = model.gradients(feature, target)?.flatten();
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..analytic.len() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + epsilon;
        let up = probe.loss(feature, target)?;
        *probe.param_mut(i) = orig - epsilon;
        let down = probe.loss(feature, target)?;
        *probe.param_mut(i) = orig;
        numeric.push((up - down) / (2.0 * epsilon));
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::Neighbor;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector(v.to_vec())
    }

    fn random_inputs(seed: u64, dim: usize) -> FeatureVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureVector((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn featurize_variants() {
        let emb = EmbeddingVector::new(vec![0.5, -0.5, 1.0, 0.0]).unwrap();
        let ids: Vec<String> = (0..10).map(|i| format!("n{i}")).collect();
        let nb = Neighborhood {
            query_id: "q".into(),
            entries: ids.iter().enumerate().map(|(i, id)| Neighbor { id: id.clone(), similarity: 1.0 - i as f64 * 0.01 }).collect(),
        };
        // classes [pos, neg]; neighbors alternate pos, neg, pos, ...
        let classes = ["pos", "neg"];
        let neighbor_labels: Vec<&str> = (0..10).map(|i| if i % 2 == 0 { "pos" } else { "neg" }).collect();
        let labels: HashMap<String, usize> =
            ids.iter().zip(&neighbor_labels).map(|(id, l)| (id.clone(), classes.iter().position(|c| c == l).unwrap())).collect();

        let e = featurize(&emb, &nb, &labels, Variant::E, 10).unwrap();
        assert_eq!(e.0, emb.to_f64());
        let en = featurize(&emb, &nb, &labels, Variant::EN, 10).unwrap();
        assert_eq!(en.dim(), 14);
        assert_eq!(&en.0[4..7], &[0.0, 1.0, 0.0]);

        let mut partial = labels.clone();
        partial.remove("n3");
        assert!(matches!(featurize(&emb, &nb, &partial, Variant::EN, 10), Err(PredictorError::MissingNeighborLabel(id)) if id == "n3"));
        assert!(featurize(&emb, &nb, &labels, Variant::EN, 11).is_err());
    }

    #[test]
    fn memorizes_one_point() {
        let x = vec![fv(&[0.3, -0.2, 0.7])];
        let t = vec![ShotOutcomeVector::new("a", vec![true; 5])];
        let hyper = Hyper { epochs: 300, ..Hyper::default() };
        let m = train(&x, Targets::MultiLabel(&t), &hyper).unwrap();
        assert!(m.forward(&x[0]).unwrap().iter().all(|&p| p > 0.9));
        assert!(m.train_log.last().unwrap() < &m.train_log[0]);
        assert_eq!(m.hidden, 64);
    }

    #[test]
    fn separable_set_is_fit_exactly() {
        // k* is 1 below the threshold on feature 0 and 4 above it; all other
        // shot counts are wrong, so argmax must hit k* exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for i in 0..120 {
            let f0: f64 = rng.gen_range(-1.0..1.0);
            let f0 = if f0.abs() < 0.1 { f0.signum() * 0.1 + f0 } else { f0 };
            let x = fv(&[f0, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let k = if f0 < 0.0 { 1 } else { 4 };
            let mut out = vec![false; 6];
            out[k] = true;
            xs.push(x);
            ts.push(ShotOutcomeVector::new(format!("{i}"), out));
        }
        let hyper = Hyper { epochs: 400, learning_rate: 0.5, ..Hyper::default() };
        let m = train(&xs, Targets::MultiLabel(&ts), &hyper).unwrap();
        for (x, t) in xs.iter().zip(&ts) {
            let sel = predict_k(&m, x, Heuristic::MaxConfidence).unwrap();
            assert!(t.outcomes[sel.chosen_k], "x = {:?}", x.0);
        }
    }

    #[test]
    fn training_is_deterministic_and_rejects_bad_input() {
        let xs: Vec<_> = (0..40).map(|i| random_inputs(i, 5)).collect();
        let ts: Vec<_> = (0..40).map(|i| ShotOutcomeVector::new(format!("{i}"), (0..4).map(|k| (i + k) % 3 == 0).collect())).collect();
        let hyper = Hyper { epochs: 20, seed: 9, ..Hyper::default() };
        let a = train(&xs, Targets::MultiLabel(&ts), &hyper).unwrap();
        let b = train(&xs, Targets::MultiLabel(&ts), &hyper).unwrap();
        assert_eq!(a, b);

        let mut bad = xs.clone();
        bad[3] = random_inputs(3, 6);
        assert!(matches!(train(&bad, Targets::MultiLabel(&ts), &hyper), Err(PredictorError::DimensionMismatch { .. })));
        assert!(train(&xs[..3], Targets::MultiLabel(&ts), &hyper).is_err());
        assert!(train(&[], Targets::MultiLabel(&[]), &hyper).is_err());
    }

    #[test]
    fn diverging_training_reports_epoch() {
        let xs: Vec<_> = (0..10).map(|i| random_inputs(i, 3)).collect();
        let ts: Vec<_> = (0..10).map(|i| ShotOutcomeVector::new(format!("{i}"), vec![i % 2 == 0, true])).collect();
        let hyper = Hyper { epochs: 5, learning_rate: 1e308, ..Hyper::default() };
        assert!(matches!(train(&xs, Targets::MultiLabel(&ts), &hyper), Err(PredictorError::NonFiniteLoss(_))));
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_k(&[0.2, 0.9, 0.4], Heuristic::MaxConfidence), 1);
        assert_eq!(select_k(&[0.2, 0.6, 0.9], Heuristic::SmallestIndex), 1);
        assert_eq!(select_k(&[0.2, 0.6, 0.9], Heuristic::MaxConfidence), 2);
        assert_eq!(select_k(&[0.4, 0.4, 0.1], Heuristic::MaxConfidence), 0);
    }

    #[test]
    fn smallest_index_falls_back_to_argmax() {
        // A fixture whose outputs are all below 0.5: zero weights, biases
        // chosen so sigmoid(b) = (0.1, 0.3, 0.2, 0.45).
        let mut m = KPredictorModel::new(2, 3, 4, Head::MultiLabel, 0);
        m.w1.iter_mut().for_each(|w| *w = 0.0);
        m.w2.iter_mut().for_each(|w| *w = 0.0);
        m.b2 = [0.1f64, 0.3, 0.2, 0.45].iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let sel = predict_k(&m, &fv(&[0.5, 0.5]), Heuristic::SmallestIndex).unwrap();
        assert!(sel.posteriors.iter().all(|&p| p < 0.5));
        assert_eq!(sel.chosen_k, 3);
        assert!(predict_k(&m, &fv(&[0.5]), Heuristic::SmallestIndex).is_err());
    }

    #[test]
    fn gradient_check_both_heads() {
        for head in [Head::MultiLabel, Head::MultiClass] {
            let m = KPredictorModel::new(7, 16, 5, head, 3);
            let x = random_inputs(4, 7);
            let t = match head {
                Head::MultiLabel => vec![1.0, 0.0, 1.0, 1.0, 0.0],
                Head::MultiClass => vec![0.0, 0.0, 1.0, 0.0, 0.0],
            };
            let err = gradient_check(&m, &x, &t, 1e-5).unwrap();
            assert!(err < 1e-5, "{head:?}: {err}");
        }
        let m = KPredictorModel::new(2, 2, 2, Head::MultiLabel, 0);
        assert!(gradient_check(&m, &fv(&[0.0, 0.0]), &[0.0, 0.0], 1e-2).is_err());
    }

    #[test]
    fn zero_signal_gives_zero_gradient() {
        let m = KPredictorModel::new(4, 8, 3, Head::MultiLabel, 5);
        let x = random_inputs(6, 4);
        let out = m.forward(&x).unwrap();
        let g = m.gradients(&x, &out).unwrap();
        assert!(g.flatten().iter().all(|d| d.abs() < 1e-8));

        let m = KPredictorModel::new(4, 8, 3, Head::MultiClass, 5);
        let out = m.forward(&x).unwrap();
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.gradients(&x, &out).unwrap().flatten().iter().all(|d| d.abs() < 1e-8));
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.bin");
        let xs: Vec<_> = (0..8).map(|i| random_inputs(i, 3)).collect();
        let ts: Vec<_> = (0..8).map(|i| RagShotTarget::from_scores(format!("{i}"), vec![0.0, i as f64, 1.0])).collect();
        let m = train(&xs, Targets::MultiClass(&ts), &Hyper { epochs: 3, hidden: 5, ..Hyper::default() }).unwrap();
        m.save(&p).unwrap();
        let back = KPredictorModel::load(&p).unwrap();
        assert_eq!(back, m);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..7], b"AICLKP1");
        assert!(KPredictorModel::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn max_confidence_is_invariant_under_monotone_maps(p in proptest::collection::vec(0.0f64..1.0, 1..12)) {
                let k = select_k(&p, Heuristic::MaxConfidence);
                let logit: Vec<f64> = p.iter().map(|v| (v + 1e-3).ln() * 3.0 + 7.0).collect();
                prop_assert_eq!(k, select_k(&logit, Heuristic::MaxConfidence));
            }

            #[test]
            fn posteriors_in_range(seed in any::<u64>(), input in proptest::collection::vec(-3.0f64..3.0, 6)) {
                let x = FeatureVector(input);
                let sig = KPredictorModel::new(6, 8, 4, Head::MultiLabel, seed);
                prop_assert!(sig.forward(&x).unwrap().iter().all(|&p| p > 0.0 && p < 1.0));
                let soft = KPredictorModel::new(6, 8, 4, Head::MultiClass, seed);
                let s: f64 = soft.forward(&x).unwrap().iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }
}
