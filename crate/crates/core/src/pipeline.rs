//! End-to-end experiment runs over one corpus and backend.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{make_splits, DatasetError, LabeledInstance, SplitSet, TaskConfig};
use crate::engine::{grid_search_ficl, run_aicl, run_aicl_star, run_ficl, run_zero_shot, AiclRun, GridSearchResult, PredictionRecord};
use crate::eval::{macro_metrics, EvalError};
use crate::gateway::Gateway;
use crate::icl::{IclContext, IclError};
use crate::index::EmbeddingIndex;
use crate::oracle::{build_corpus_groundtruth, build_corpus_rag_targets, GroundTruthReport, RagShotTarget, ShotOutcomeVector};
use crate::predictor::{featurize, train, FeatureVector, Heuristic, Hyper, KPredictorModel, PredictorError, Targets, Variant};
use crate::prompt::{DemoOrder, PromptTemplate};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Icl(#[from] IclError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("no usable training targets: {0}")]
    NoTargets(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Demonstrations carry their labels.
    #[default]
    Icl,
    /// Demonstrations are shown without labels.
    Rag,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "icl" => Ok(Mode::Icl),
            "rag" => Ok(Mode::Rag),
            _ => Err(format!("unknown mode {s:?} (expected icl or rag)")),
        }
    }
}

/// A task with its splits and the embeddings of every instance.
#[derive(Clone)]
pub struct Corpus {
    pub task: TaskConfig,
    pub train: Vec<LabeledInstance>,
    pub test: Vec<LabeledInstance>,
    pub embeddings: Arc<EmbeddingIndex>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub m: usize,
    pub mode: Mode,
    pub hyper: Hyper,
    pub heuristic: Heuristic,
    pub validation_fraction: f64,
    pub model_id: String,
    pub template: PromptTemplate,
    pub demo_order: DemoOrder,
    pub token_budget: Option<usize>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            m: 10,
            mode: Mode::Icl,
            hyper: Hyper::default(),
            heuristic: Heuristic::MaxConfidence,
            validation_fraction: 0.1,
            model_id: "default".into(),
            template: PromptTemplate::default(),
            demo_order: DemoOrder::default(),
            token_budget: None,
        }
    }
}

/// One seeded split of a corpus: a validation set carved from the training
/// data, and a retrieval context over the remaining training instances.
pub struct SeedRun {
    pub seed: u64,
    pub split: SplitSet,
    pub ctx: IclContext,
    pub settings: Settings,
}

pub enum TrainingTargets {
    Outcomes(GroundTruthReport<ShotOutcomeVector>),
    Rag(GroundTruthReport<RagShotTarget>),
}

impl TrainingTargets {
    pub fn backend_calls(&self) -> u64 {
        match self {
            TrainingTargets::Outcomes(r) => r.backend_calls,
            TrainingTargets::Rag(r) => r.backend_calls,
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        match self {
            TrainingTargets::Outcomes(r) => r.targets.iter().map(|t| t.instance_id.as_str()).collect(),
            TrainingTargets::Rag(r) => r.targets.iter().map(|t| t.instance_id.as_str()).collect(),
        }
    }
}

impl SeedRun {
    pub fn new(corpus: &Corpus, gateway: Arc<Gateway>, settings: Settings, seed: u64) -> Result<Self, PipelineError> {
        let mut split = make_splits(&corpus.train, settings.validation_fraction, seed)?;
        split.test = corpus.test.clone();
        let mut ctx = IclContext::new(corpus.task.clone(), gateway, &split.train, corpus.embeddings.clone(), settings.m)?;
        ctx.include_labels = settings.mode == Mode::Icl;
        ctx.model_id = settings.model_id.clone();
        ctx.template = settings.template.clone();
        ctx.demo_order = settings.demo_order;
        ctx.token_budget = settings.token_budget;
        Ok(Self { seed, split, ctx, settings })
    }

    /// Ground truth over a per-class subsample of the retrieval pool.
    pub fn ground_truth(&self, fraction: f64) -> Result<TrainingTargets, PipelineError> {
        Ok(match self.settings.mode {
            Mode::Icl => TrainingTargets::Outcomes(build_corpus_groundtruth(&self.ctx, &self.split.train, fraction, self.seed)?),
            Mode::Rag => TrainingTargets::Rag(build_corpus_rag_targets(&self.ctx, &self.split.train, fraction, self.seed)?),
        })
    }

    pub fn features(&self, ids: &[&str], variant: Variant) -> Result<Vec<FeatureVector>, PipelineError> {
        let labels = self.ctx.label_codes();
        let by_id: std::collections::HashMap<&str, &LabeledInstance> = self.split.train.iter().map(|i| (i.id.as_str(), i)).collect();
        ids.iter()
            .map(|id| {
                let inst = by_id.get(id).ok_or_else(|| IclError::InvalidArgument(format!("{id} is not in the training pool")))?;
                let nb = self.ctx.neighborhood(inst)?;
                let emb = self.ctx.embeddings().require(id).map_err(IclError::from)?;
                Ok(featurize(emb, &nb, &labels, variant, self.ctx.m)?)
            })
            .collect()
    }

    pub fn fit(&self, targets: &TrainingTargets, variant: Variant) -> Result<KPredictorModel, PipelineError> {
        let ids = targets.ids();
        if ids.is_empty() {
            return Err(PipelineError::NoTargets("every selected instance failed".into()));
        }
        let features = self.features(&ids, variant)?;
        let hyper = Hyper { seed: self.settings.hyper.seed ^ self.seed, ..self.settings.hyper };
        Ok(match targets {
            TrainingTargets::Outcomes(r) => train(&features, Targets::MultiLabel(&r.targets), &hyper)?,
            TrainingTargets::Rag(r) => train(&features, Targets::MultiClass(&r.targets), &hyper)?,
        })
    }

    pub fn train_predictor(&self, fraction: f64, variant: Variant) -> Result<KPredictorModel, PipelineError> {
        self.fit(&self.ground_truth(fraction)?, variant)
    }

    pub fn aicl(&self, model: &KPredictorModel, variant: Variant) -> Result<AiclRun, PipelineError> {
        Ok(run_aicl(&self.ctx, &self.split.test, model, variant, self.settings.heuristic)?)
    }

    pub fn grid_search(&self) -> Result<GridSearchResult, PipelineError> {
        Ok(grid_search_ficl(&self.ctx, &self.split.validation)?)
    }

    pub fn ficl(&self, k: usize) -> Result<Vec<PredictionRecord>, PipelineError> {
        Ok(run_ficl(&self.ctx, &self.split.test, k)?)
    }

    pub fn zero_shot(&self) -> Vec<PredictionRecord> {
        run_zero_shot(&self.ctx, &self.split.test)
    }

    pub fn oracle(&self) -> Vec<PredictionRecord> {
        run_aicl_star(&self.ctx, &self.split.test)
    }

    pub fn f1(&self, records: &[PredictionRecord]) -> Result<f64, PipelineError> {
        Ok(macro_metrics(records, &self.ctx.task)?.f1)
    }

    /// Subsample, ground truth, training and adaptive inference; returns
    /// the test macro-F1.
    pub fn aicl_f1(&self, fraction: f64, variant: Variant) -> Result<f64, PipelineError> {
        let model = self.train_predictor(fraction, variant)?;
        self.f1(&self.aicl(&model, variant)?.records)
    }
}
