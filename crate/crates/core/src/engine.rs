//! The inference strategies: zero-shot, fixed k, adaptive k and the oracle.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledInstance;
use crate::eval::{macro_metrics, EvalError};
use crate::gateway::argmax_first;
use crate::gateway::ClassPosterior;
use crate::icl::{Answer, IclContext, IclError};
use crate::oracle::{read_jsonl, write_jsonl};
use crate::predictor::{feature_dim, featurize, predict_k, Heuristic, KPredictorModel, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ZeroShot,
    Ficl,
    AiclE,
    AiclEn,
    AiclStar,
}

impl Strategy {
    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::E => Strategy::AiclE,
            Variant::EN => Strategy::AiclEn,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::Ficl => "ficl",
            Strategy::AiclE => "aicl_e",
            Strategy::AiclEn => "aicl_en",
            Strategy::AiclStar => "aicl_star",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub strategy: Strategy,
    pub used_k: usize,
    pub predicted_class: Option<String>,
    pub gold: Option<String>,
    pub posterior: Option<ClassPosterior>,
    pub correct: Option<bool>,
    /// Set when the instance could not be answered; the record then counts
    /// as incorrect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.correct == Some(true)
    }

    fn answered(ctx: &IclContext, inst: &LabeledInstance, strategy: Strategy, answer: Answer) -> Self {
        let class = answer.extraction.posterior.argmax();
        let predicted = ctx.task.classes[class].clone();
        Self {
            instance_id: inst.id.clone(),
            strategy,
            used_k: answer.used_k,
            correct: Some(inst.label == predicted),
            predicted_class: Some(predicted),
            gold: Some(inst.label.clone()),
            posterior: Some(answer.extraction.posterior),
            error: None,
        }
    }

    fn failed(inst: &LabeledInstance, strategy: Strategy, used_k: usize, err: IclError) -> Self {
        Self {
            instance_id: inst.id.clone(),
            strategy,
            used_k,
            predicted_class: None,
            gold: Some(inst.label.clone()),
            posterior: None,
            correct: Some(false),
            error: Some(err.to_string()),
        }
    }
}

fn sorted(mut records: Vec<PredictionRecord>) -> Vec<PredictionRecord> {
    records.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    records
}

fn per_instance<F>(ctx: &IclContext, test: &[LabeledInstance], f: F) -> Vec<PredictionRecord>
where
    F: Fn(&LabeledInstance) -> PredictionRecord + Sync,
{
    sorted(ctx.gateway.install(|| test.par_iter().map(&f).collect()))
}

/// Answers every instance with its `k` nearest neighbors as demonstrations.
pub fn run_fixed_k(ctx: &IclContext, test: &[LabeledInstance], k: usize, strategy: Strategy) -> Vec<PredictionRecord> {
    per_instance(ctx, test, |inst| match ctx.neighborhood(inst).and_then(|nb| ctx.answer(inst, &nb, k)) {
        Ok(a) => PredictionRecord::answered(ctx, inst, strategy, a),
        Err(e) => PredictionRecord::failed(inst, strategy, k, e),
    })
}

pub fn run_zero_shot(ctx: &IclContext, test: &[LabeledInstance]) -> Vec<PredictionRecord> {
    run_fixed_k(ctx, test, 0, Strategy::ZeroShot)
}

pub fn run_ficl(ctx: &IclContext, test: &[LabeledInstance], k: usize) -> Result<Vec<PredictionRecord>, IclError> {
    if !(1..=ctx.m).contains(&k) {
        return Err(IclError::InvalidArgument(format!("fixed k must lie in 1..={}, got {k}", ctx.m)));
    }
    Ok(run_fixed_k(ctx, test, k, Strategy::Ficl))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    /// Macro-F1 for k = 1..=M.
    pub per_k_f1: Vec<f64>,
    pub best_k: usize,
}

impl GridSearchResult {
    /// Smallest k reaching the highest F1.
    pub fn from_curve(per_k_f1: Vec<f64>) -> Self {
        let best_k = argmax_first(&per_k_f1) + 1;
        Self { per_k_f1, best_k }
    }
}

pub fn grid_search_ficl(ctx: &IclContext, validation: &[LabeledInstance]) -> Result<GridSearchResult, EvalError> {
    if validation.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let curve = (1..=ctx.m)
        .map(|k| Ok(macro_metrics(&run_fixed_k(ctx, validation, k, Strategy::Ficl), &ctx.task)?.f1))
        .collect::<Result<Vec<f64>, EvalError>>()?;
    Ok(GridSearchResult::from_curve(curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiclRun {
    pub records: Vec<PredictionRecord>,
    pub mean_k: f64,
}

/// Predicts a shot count per instance, then answers with that many
/// demonstrations.
pub fn run_aicl(
    ctx: &IclContext,
    test: &[LabeledInstance],
    model: &KPredictorModel,
    variant: Variant,
    heuristic: Heuristic,
) -> Result<AiclRun, IclError> {
    let dim = feature_dim(ctx.embeddings().dim(), ctx.m, variant);
    if model.input_dim != dim {
        return Err(IclError::InvalidArgument(format!("model expects {} inputs, {variant} features have {dim}", model.input_dim)));
    }
    if model.output_dim != ctx.m + 1 {
        return Err(IclError::InvalidArgument(format!("model predicts {} shot counts, M = {}", model.output_dim, ctx.m)));
    }
    let labels = ctx.label_codes();
    let strategy = Strategy::for_variant(variant);
    let records = per_instance(ctx, test, |inst| {
        let run = || -> Result<Answer, IclError> {
            let nb = ctx.neighborhood(inst)?;
            let emb = ctx.embeddings().require(&inst.id)?;
            let feature = featurize(emb, &nb, &labels, variant, ctx.m).map_err(|e| IclError::InvalidArgument(e.to_string()))?;
            let sel = predict_k(model, &feature, heuristic).map_err(|e| IclError::InvalidArgument(e.to_string()))?;
            ctx.answer(inst, &nb, sel.chosen_k)
        };
        match run() {
            Ok(a) => PredictionRecord::answered(ctx, inst, strategy, a),
            Err(e) => PredictionRecord::failed(inst, strategy, 0, e),
        }
    });
    Ok(AiclRun { mean_k: mean_used_k(&records), records })
}

pub fn mean_used_k(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.used_k as f64).sum::<f64>() / records.len() as f64
}

/// Oracle upper bound: the smallest k that answers correctly, else the
/// zero-shot answer. Needs gold labels.
pub fn run_aicl_star(ctx: &IclContext, test: &[LabeledInstance]) -> Vec<PredictionRecord> {
    per_instance(ctx, test, |inst| {
        let run = || -> Result<Answer, IclError> {
            let nb = ctx.neighborhood(inst)?;
            let gold = ctx.gold(inst)?;
            let zero = ctx.answer(inst, &nb, 0)?;
            if zero.extraction.posterior.argmax() == gold {
                return Ok(zero);
            }
            for k in 1..=ctx.m {
                let a = ctx.answer(inst, &nb, k)?;
                if a.extraction.posterior.argmax() == gold {
                    return Ok(a);
                }
            }
            Ok(zero)
        };
        match run() {
            Ok(a) => PredictionRecord::answered(ctx, inst, Strategy::AiclStar, a),
            Err(e) => PredictionRecord::failed(inst, Strategy::AiclStar, 0, e),
        }
    })
}

/// Writes records sorted by instance id, one JSON object per line.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> std::io::Result<()> {
    write_jsonl(path, &sorted(records.to_vec()))
}

pub fn read_predictions(path: &Path) -> std::io::Result<Vec<PredictionRecord>> {
    read_jsonl(path)
}
