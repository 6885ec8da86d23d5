//! Shared k-shot machinery: retrieval pool, prompt settings and the gateway.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::dataset::{LabeledInstance, TaskConfig};
use crate::gateway::{extract_posterior, Extraction, Gateway, GatewayError, GenerationRequest};
use crate::index::{EmbeddingIndex, IndexError, Neighborhood};
use crate::prompt::{whitespace_estimate, DemoOrder, Demonstration, PromptError, PromptPlan, PromptTemplate};

#[derive(Debug, Error)]
pub enum IclError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{id}: {got} neighbors available, {needed} required")]
    InsufficientNeighbors { id: String, needed: usize, got: usize },
    #[error("label {label:?} of {id} is not a class of the task")]
    UnknownLabel { id: String, label: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One answered k-shot query.
#[derive(Debug, Clone)]
pub struct Answer {
    /// Demonstrations actually sent, after any budget trimming.
    pub used_k: usize,
    pub extraction: Extraction,
}

/// Everything needed to run k-shot inference against a retrieval pool.
pub struct IclContext {
    pub task: TaskConfig,
    pub gateway: Arc<Gateway>,
    pub model_id: String,
    pub template: PromptTemplate,
    pub demo_order: DemoOrder,
    pub include_labels: bool,
    pub m: usize,
    /// Prompt budget in estimated tokens; demonstrations are trimmed to fit.
    pub token_budget: Option<usize>,
    pool: HashMap<String, LabeledInstance>,
    pool_index: EmbeddingIndex,
    embeddings: Arc<EmbeddingIndex>,
}

impl IclContext {
    /// `pool` supplies demonstrations; `embeddings` must cover the pool and
    /// every instance later queried.
    pub fn new(
        task: TaskConfig,
        gateway: Arc<Gateway>,
        pool: &[LabeledInstance],
        embeddings: Arc<EmbeddingIndex>,
        m: usize,
    ) -> Result<Self, IclError> {
        if m == 0 {
            return Err(IclError::InvalidArgument("M must be at least 1".into()));
        }
        for inst in pool {
            if task.class_index(&inst.label).is_none() {
                return Err(IclError::UnknownLabel { id: inst.id.clone(), label: inst.label.clone() });
            }
        }
        let pool_index = embeddings.subset(pool.iter().map(|i| i.id.as_str()))?;
        Ok(Self {
            model_id: "default".into(),
            template: PromptTemplate::default(),
            demo_order: DemoOrder::default(),
            include_labels: true,
            token_budget: None,
            pool: pool.iter().map(|i| (i.id.clone(), i.clone())).collect(),
            pool_index,
            embeddings,
            task,
            gateway,
            m,
        })
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn embeddings(&self) -> &EmbeddingIndex {
        &self.embeddings
    }

    /// Class index of every pool instance.
    pub fn label_codes(&self) -> HashMap<String, usize> {
        self.pool.values().map(|i| (i.id.clone(), self.task.class_index(&i.label).expect("checked in new"))).collect()
    }

    /// The M most similar pool instances, never including `inst` itself.
    pub fn neighborhood(&self, inst: &LabeledInstance) -> Result<Neighborhood, IclError> {
        let v = self.embeddings.require(&inst.id)?;
        let nb = self.pool_index.neighbors_of(&inst.id, v, self.m)?;
        if nb.len() < self.m {
            return Err(IclError::InsufficientNeighbors { id: inst.id.clone(), needed: self.m, got: nb.len() });
        }
        Ok(nb)
    }

    /// Prompt plan using the `k` most similar neighbors.
    pub fn plan(&self, inst: &LabeledInstance, nb: &Neighborhood, k: usize) -> PromptPlan {
        let demonstrations = nb
            .prefix(k)
            .iter()
            .map(|n| {
                let d = &self.pool[&n.id];
                Demonstration {
                    text: d.text.clone(),
                    label: self.include_labels.then(|| self.task.label_token(&d.label).unwrap_or(&d.label).to_string()),
                }
            })
            .collect();
        PromptPlan {
            instruction: self.task.instruction.clone(),
            demonstrations,
            query_text: inst.text.clone(),
            include_labels: self.include_labels,
            demo_order: self.demo_order,
        }
    }

    pub fn render(&self, plan: &PromptPlan) -> Result<(usize, String), IclError> {
        let plan = match self.token_budget {
            Some(b) => self.template.fit_to_budget(plan, b, &whitespace_estimate)?,
            None => plan.clone(),
        };
        Ok((plan.k(), self.template.assemble(&plan)?))
    }

    /// Runs one k-shot query through the gateway.
    pub fn answer(&self, inst: &LabeledInstance, nb: &Neighborhood, k: usize) -> Result<Answer, IclError> {
        let (used_k, prompt) = self.render(&self.plan(inst, nb, k))?;
        let resp = self.gateway.generate(&GenerationRequest::greedy(&self.model_id, prompt))?;
        Ok(Answer { used_k, extraction: extract_posterior(&resp, &self.task) })
    }

    /// Class index of `inst`'s gold label.
    pub fn gold(&self, inst: &LabeledInstance) -> Result<usize, IclError> {
        self.task.class_index(&inst.label).ok_or_else(|| IclError::UnknownLabel { id: inst.id.clone(), label: inst.label.clone() })
    }
}
