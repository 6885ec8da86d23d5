//! Training targets for the shot-count predictor.
//!
//! In labeled mode every training instance is answered with k = 0..M
//! demonstrations and each answer is scored against the gold label. In
//! labels-off mode the target is the single k whose class posterior has the
//! lowest entropy.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{subsample_per_class, LabeledInstance};
use crate::gateway::{argmax_first, CallStats, ClassPosterior};
use crate::icl::{IclContext, IclError};

/// Which shot counts answer an instance correctly; index i is i-shot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotOutcomeVector {
    #[serde(rename = "id")]
    pub instance_id: String,
    #[serde(with = "bits")]
    pub outcomes: Vec<bool>,
}

mod bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&b| b as u8))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("outcome must be 0 or 1, got {other}"))),
            })
            .collect()
    }
}

impl ShotOutcomeVector {
    pub fn new(id: impl Into<String>, outcomes: Vec<bool>) -> Self {
        Self { instance_id: id.into(), outcomes }
    }

    /// The largest shot count covered.
    pub fn m(&self) -> usize {
        self.outcomes.len().saturating_sub(1)
    }

    pub fn as_target(&self) -> Vec<f64> {
        self.outcomes.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Smallest correct shot count, if any.
    pub fn first_correct(&self) -> Option<usize> {
        self.outcomes.iter().position(|&b| b)
    }
}

/// Labels-off target: one shot count per instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagShotTarget {
    #[serde(rename = "id")]
    pub instance_id: String,
    pub chosen_k: usize,
    pub scores: Vec<f64>,
}

impl RagShotTarget {
    /// Picks the best-scoring k, smallest k on ties.
    pub fn from_scores(id: impl Into<String>, scores: Vec<f64>) -> Self {
        Self { instance_id: id.into(), chosen_k: argmax_first(&scores), scores }
    }

    pub fn as_target(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.scores.len()];
        t[self.chosen_k] = 1.0;
        t
    }
}

/// Negative entropy of each posterior, and the k that maximizes it.
pub fn min_entropy_k(posteriors: &[ClassPosterior]) -> (usize, Vec<f64>) {
    let scores: Vec<f64> = posteriors.iter().map(|p| -p.entropy()).collect();
    (argmax_first(&scores), scores)
}

pub fn build_outcomes(ctx: &IclContext, inst: &LabeledInstance) -> Result<ShotOutcomeVector, IclError> {
    let gold = ctx.gold(inst)?;
    let nb = ctx.neighborhood(inst)?;
    let outcomes = (0..=ctx.m)
        .map(|k| Ok(ctx.answer(inst, &nb, k)?.extraction.posterior.argmax() == gold))
        .collect::<Result<Vec<bool>, IclError>>()?;
    Ok(ShotOutcomeVector::new(&inst.id, outcomes))
}

pub fn build_rag_target(ctx: &IclContext, inst: &LabeledInstance) -> Result<RagShotTarget, IclError> {
    if ctx.include_labels {
        return Err(IclError::InvalidArgument("labels-off targets need a labels-off context".into()));
    }
    let nb = ctx.neighborhood(inst)?;
    let posteriors = (0..=ctx.m).map(|k| Ok(ctx.answer(inst, &nb, k)?.extraction.posterior)).collect::<Result<Vec<_>, IclError>>()?;
    let (chosen_k, scores) = min_entropy_k(&posteriors);
    Ok(RagShotTarget { instance_id: inst.id.clone(), chosen_k, scores })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub id: String,
    pub error: String,
}

/// Targets for every instance that succeeded, plus what it cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthReport<T> {
    pub targets: Vec<T>,
    pub failures: Vec<InstanceFailure>,
    pub selected: usize,
    pub backend_calls: u64,
    pub cache_hits: u64,
}

fn build_corpus<T, F>(
    ctx: &IclContext,
    train: &[LabeledInstance],
    fraction: f64,
    seed: u64,
    id_of: fn(&T) -> &str,
    one: F,
) -> Result<GroundTruthReport<T>, IclError>
where
    T: Send,
    F: Fn(&IclContext, &LabeledInstance) -> Result<T, IclError> + Sync,
{
    let selected = subsample_per_class(train, fraction, seed).map_err(|e| IclError::InvalidArgument(e.to_string()))?;
    let before: CallStats = ctx.gateway.stats();
    let results: Vec<(String, Result<T, IclError>)> =
        ctx.gateway.install(|| selected.par_iter().map(|inst| (inst.id.clone(), one(ctx, inst))).collect());
    let after = ctx.gateway.stats();
    let mut targets = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(t) => targets.push(t),
            Err(e) => failures.push(InstanceFailure { id, error: e.to_string() }),
        }
    }
    targets.sort_by(|a, b| id_of(a).cmp(id_of(b)));
    failures.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(GroundTruthReport {
        targets,
        failures,
        selected: selected.len(),
        backend_calls: after.backend_calls - before.backend_calls,
        cache_hits: after.cache_hits - before.cache_hits,
    })
}

/// Outcome vectors for a per-class subsample of `train`. Instances whose
/// queries fail are reported, not fabricated.
pub fn build_corpus_groundtruth(
    ctx: &IclContext,
    train: &[LabeledInstance],
    fraction: f64,
    seed: u64,
) -> Result<GroundTruthReport<ShotOutcomeVector>, IclError> {
    build_corpus(ctx, train, fraction, seed, |t: &ShotOutcomeVector| &t.instance_id, build_outcomes)
}

pub fn build_corpus_rag_targets(
    ctx: &IclContext,
    train: &[LabeledInstance],
    fraction: f64,
    seed: u64,
) -> Result<GroundTruthReport<RagShotTarget>, IclError> {
    build_corpus(ctx, train, fraction, seed, |t: &RagShotTarget| &t.instance_id, build_rag_target)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(std::io::Error::other)?;
        buf.push(b'\n');
    }
    fs::File::create(path)?.write_all(&buf)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(p: &[f64]) -> ClassPosterior {
        ClassPosterior::from_scores(p.to_vec()).unwrap()
    }

    #[test]
    fn entropy_choice() {
        let (k, s) = min_entropy_k(&[post(&[0.5, 0.5]), post(&[0.9, 0.1])]);
        assert_eq!(k, 1);
        assert!((s[0] + std::f64::consts::LN_2).abs() < 1e-12);
        assert!((s[1] + 0.325_083).abs() < 1e-5);

        let uniform = vec![post(&[1.0, 1.0, 1.0]); 4];
        assert_eq!(min_entropy_k(&uniform).0, 0);

        let mut ps = vec![post(&[0.4, 0.3, 0.3]); 5];
        ps[3] = post(&[0.0, 1.0, 0.0]);
        assert_eq!(min_entropy_k(&ps).0, 3);
    }

    #[test]
    fn target_encodings() {
        let v = ShotOutcomeVector::new("x", vec![false, false, true, true, true]);
        assert_eq!(v.m(), 4);
        assert_eq!(v.as_target(), vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(v.first_correct(), Some(2));
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"id":"x","outcomes":[0,0,1,1,1]}"#);
        assert_eq!(serde_json::from_str::<ShotOutcomeVector>(&json).unwrap(), v);
        assert!(serde_json::from_str::<ShotOutcomeVector>(r#"{"id":"x","outcomes":[2]}"#).is_err());

        let r = RagShotTarget::from_scores("y", vec![-0.5, -0.1, -0.1]);
        assert_eq!(r.chosen_k, 1);
        assert_eq!(r.as_target(), vec![0.0, 1.0, 0.0]);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["chosen_k"], 1);
        assert_eq!(json["id"], "y");
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.jsonl");
        let items = vec![ShotOutcomeVector::new("a", vec![true, false]), ShotOutcomeVector::new("b", vec![false, true])];
        write_jsonl(&p, &items).unwrap();
        assert_eq!(read_jsonl::<ShotOutcomeVector>(&p).unwrap(), items);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn chosen_k_survives_monotone_maps(scores in proptest::collection::vec(-5.0f64..0.0, 1..12), a in 0.1f64..10.0, b in -3.0f64..3.0) {
                let base = RagShotTarget::from_scores("x", scores.clone());
                let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
                prop_assert_eq!(base.chosen_k, RagShotTarget::from_scores("x", mapped).chosen_k);
                prop_assert_eq!(base.as_target().iter().sum::<f64>(), 1.0);
            }
        }
    }
}
