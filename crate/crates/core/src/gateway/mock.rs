//! Deterministic stand-in for a generative model.
//!
//! A [`MockWorld`] fixes, for every known instance, the smallest shot count
//! `k_star` from which k-shot prompting answers correctly, plus a set of shot
//! counts whose correctness is inverted. The backend reads the prompt, counts
//! the demonstrations, and answers according to that table.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendKind, GatewayError, GenerationRequest, GenerationResponse, TokenLogprob};
use crate::dataset::{LabeledInstance, TaskConfig};

/// Uniform value in [0, 1) derived from the seed and a tuple of parts.
pub fn unit_hash(seed: u64, parts: &[&[u8]]) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().unwrap());
    (x >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockInstance {
    pub id: String,
    pub text: String,
    pub label: String,
    /// Smallest correct shot count; `m + 1` means never correct.
    pub k_star: usize,
    /// Shot counts whose correctness is inverted.
    #[serde(default)]
    pub flips: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockWorld {
    pub seed: u64,
    pub m: usize,
    pub instances: Vec<MockInstance>,
    /// Instances for which the backend reports itself unavailable.
    #[serde(default)]
    pub failing: BTreeSet<String>,
}

/// How neighborhood homogeneity drives per-instance difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldProfile {
    /// Share of the M neighbors carrying the majority label at or above which
    /// an instance counts as easy.
    pub homogeneous_threshold: f64,
    pub easy_k_star: Vec<(usize, f64)>,
    /// Largest correct shot count for easy instances; more context hurts them.
    pub easy_cap: Vec<(usize, f64)>,
    pub hard_k_star: Vec<(usize, f64)>,
    pub never_correct_rate: f64,
    pub noise_flip_rate: f64,
}

impl Default for WorldProfile {
    fn default() -> Self {
        Self {
            homogeneous_threshold: 0.8,
            easy_k_star: vec![(0, 0.2), (1, 0.3), (2, 0.5)],
            easy_cap: vec![(3, 0.5), (4, 0.5)],
            hard_k_star: vec![(5, 0.1), (6, 0.2), (7, 0.7)],
            never_correct_rate: 0.03,
            noise_flip_rate: 0.03,
        }
    }
}

fn draw(table: &[(usize, f64)], u: f64) -> usize {
    let total: f64 = table.iter().map(|(_, w)| w).sum();
    let mut acc = 0.0;
    for &(v, w) in table {
        acc += w / total;
        if u < acc {
            return v;
        }
    }
    table.last().map(|&(v, _)| v).unwrap_or(0)
}

impl MockWorld {
    /// Builds a world whose difficulty follows neighborhood label agreement.
    ///
    /// `items` pairs each instance with the fraction of its M nearest
    /// training neighbors that carry the neighborhood's majority label.
    pub fn from_homogeneity(seed: u64, m: usize, profile: &WorldProfile, items: &[(LabeledInstance, f64)]) -> Self {
        let instances = items
            .iter()
            .map(|(inst, agreement)| {
                let id = inst.id.as_bytes();
                let easy = *agreement >= profile.homogeneous_threshold;
                let mut flips = BTreeSet::new();
                let k_star = if unit_hash(seed, &[b"never", id]) < profile.never_correct_rate {
                    m + 1
                } else if easy {
                    let k = draw(&profile.easy_k_star, unit_hash(seed, &[b"kstar", id])).min(m);
                    let cap = draw(&profile.easy_cap, unit_hash(seed, &[b"cap", id])).max(k);
                    flips.extend(cap + 1..=m);
                    k
                } else {
                    draw(&profile.hard_k_star, unit_hash(seed, &[b"kstar", id])).min(m)
                };
                for k in 0..=m {
                    if unit_hash(seed, &[b"noise", id, &k.to_le_bytes()]) < profile.noise_flip_rate && !flips.remove(&k) {
                        flips.insert(k);
                    }
                }
                MockInstance { id: inst.id.clone(), text: inst.text.clone(), label: inst.label.clone(), k_star, flips }
            })
            .collect();
        Self { seed, m, instances, failing: BTreeSet::new() }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let s = fs::read_to_string(path).map_err(|e| GatewayError::BackendUnavailable(format!("mock world {}: {e}", path.display())))?;
        serde_json::from_str(&s).map_err(|e| GatewayError::MalformedBackendReply(format!("mock world: {e}")))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self).expect("world serializes"))
    }

    pub fn get(&self, id: &str) -> Option<&MockInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Whether k-shot prompting answers `id` correctly.
    pub fn correctness(&self, id: &str, k: usize) -> Option<bool> {
        self.get(id).map(|inst| Self::correct(inst, k))
    }

    fn correct(inst: &MockInstance, k: usize) -> bool {
        (k >= inst.k_star) ^ inst.flips.contains(&k)
    }

    /// The class answered whenever `inst` is answered wrongly. Fixed per
    /// instance so wrong answers do not depend on the shot count.
    fn wrong_class(&self, inst: &MockInstance, task: &TaskConfig) -> usize {
        let gold = task.class_index(&inst.label).unwrap_or(0);
        let p = task.num_classes();
        let r = (unit_hash(self.seed, &[b"wrong", inst.id.as_bytes()]) * (p - 1) as f64) as usize;
        let r = r.min(p - 2);
        if r >= gold {
            r + 1
        } else {
            r
        }
    }

    fn confidence(&self, inst: &MockInstance, k: usize, correct: bool) -> f64 {
        let u = unit_hash(self.seed, &[b"conf", inst.id.as_bytes(), &k.to_le_bytes()]);
        match (correct, k >= inst.k_star) {
            (true, true) => 0.97 - 0.02 * (k - inst.k_star) as f64,
            (true, false) => 0.75,
            (false, _) => 0.55 + 0.15 * u,
        }
    }
}

/// Backend answering from a [`MockWorld`].
///
/// Prompts must use the default `Input:`/`Label:` layout: every line starting
/// with `Input: ` is one example and the last one is the query.
pub struct MockBackend {
    world: Arc<MockWorld>,
    task: TaskConfig,
    by_text: HashMap<String, usize>,
}

impl MockBackend {
    pub fn new(world: Arc<MockWorld>, task: TaskConfig) -> Self {
        let by_text = world.instances.iter().enumerate().map(|(i, inst)| (inst.text.clone(), i)).collect();
        Self { world, task, by_text }
    }

    pub fn world(&self) -> &MockWorld {
        &self.world
    }

    fn respond(&self, class: usize, conf: f64, logprobs: bool) -> GenerationResponse {
        let p = self.task.num_classes();
        let token = |c: usize| self.task.label_token(&self.task.classes[c]).unwrap_or("").to_string();
        let rest = (1.0 - conf) / (p - 1) as f64;
        GenerationResponse {
            text: token(class),
            token_logprobs: logprobs.then(|| {
                (0..p).map(|c| TokenLogprob { token: token(c), logprob: if c == class { conf.ln() } else { rest.ln() } }).collect()
            }),
            backend: BackendKind::Mock,
            cached: false,
        }
    }
}

pub(crate) fn parse_prompt(prompt: &str) -> Option<(usize, &str)> {
    let inputs: Vec<&str> = prompt.lines().filter_map(|l| l.strip_prefix("Input: ")).collect();
    let query = inputs.last()?;
    Some((inputs.len() - 1, query))
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        format!("mock:seed={}", self.world.seed)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        let (k, query) = parse_prompt(&req.prompt).ok_or_else(|| GatewayError::InvalidRequest("prompt has no `Input: ` line".into()))?;
        let Some(&idx) = self.by_text.get(query) else {
            let p = self.task.num_classes();
            let c = (unit_hash(self.world.seed, &[b"unknown", query.as_bytes()]) * p as f64) as usize;
            return Ok(self.respond(c.min(p - 1), 0.5 + 0.5 / p as f64, req.logprobs_requested));
        };
        let inst = &self.world.instances[idx];
        if self.world.failing.contains(&inst.id) {
            return Err(GatewayError::BackendUnavailable(format!("injected failure for {}", inst.id)));
        }
        let correct = MockWorld::correct(inst, k);
        let class = if correct { self.task.class_index(&inst.label).unwrap_or(0) } else { self.world.wrong_class(inst, &self.task) };
        let conf = self.world.confidence(inst, k, correct);
        Ok(self.respond(class, conf, req.logprobs_requested))
    }
}
