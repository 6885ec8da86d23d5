//! Seeded synthetic corpus for exercising the pipeline without a model.
//!
//! Points are drawn around unit cluster centers. Half of the clusters carry a
//! single label; the others mix labels, so their members sit in heterogeneous
//! neighborhoods. A [`MockWorld`] is then derived whose difficulty follows
//! neighborhood label agreement.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_jsonl, DatasetError, LabeledInstance, TaskConfig};
use crate::gateway::{MockWorld, WorldProfile};
use crate::index::{EmbeddingIndex, EmbeddingVector, IndexError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub clusters: usize,
    pub dim: usize,
    pub train: usize,
    pub test: usize,
    pub noise: f64,
    pub m: usize,
    /// Share of the mixed clusters' members carrying the minority label.
    pub minority: f64,
    pub profile: WorldProfile,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { seed: 7, clusters: 24, dim: 16, train: 2400, test: 300, noise: 0.15, m: 10, minority: 0.3, profile: WorldProfile::default() }
    }
}

pub struct SynthCorpus {
    pub task: TaskConfig,
    pub train: Vec<LabeledInstance>,
    pub test: Vec<LabeledInstance>,
    pub embeddings: EmbeddingIndex,
    pub world: MockWorld,
}

pub fn binary_task() -> TaskConfig {
    let mut verbaliser = BTreeMap::new();
    verbaliser.insert("positive".to_string(), vec!["positive".to_string()]);
    verbaliser.insert("negative".to_string(), vec!["negative".to_string()]);
    TaskConfig {
        name: "synthetic".into(),
        classes: vec!["positive".into(), "negative".into()],
        instruction: "Decide whether the input is positive or negative.".into(),
        verbaliser,
        pair_separator: None,
    }
}

const WORDS: [&str; 24] = [
    "amber", "birch", "cobalt", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "juniper", "kelp", "lumen", "marble", "nectar",
    "onyx", "pebble", "quartz", "raven", "sierra", "tundra", "umber", "violet", "willow", "zephyr",
];

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Share of `ids` carrying their most common label.
pub fn majority_share<'a>(labels: impl Iterator<Item = &'a str>) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut n = 0;
    for l in labels {
        *counts.entry(l).or_default() += 1;
        n += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / n.max(1) as f64
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, IndexError> {
    let task = binary_task();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..spec.clusters).map(|_| unit((0..spec.dim).map(|_| normal.sample(&mut rng)).collect())).collect();
    // cluster -> probability of "positive"
    let mut mixes: Vec<f64> = (0..spec.clusters)
        .map(|c| match (c % 2 == 0, c % 4 < 2) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            (false, true) => 1.0 - spec.minority,
            (false, false) => spec.minority,
        })
        .collect();
    mixes.shuffle(&mut rng);

    let total = spec.train + spec.test;
    let mut items = Vec::with_capacity(total);
    let mut vectors = Vec::with_capacity(total);
    for i in 0..total {
        let c = rng.gen_range(0..spec.clusters);
        let label = if rng.gen::<f64>() < mixes[c] { "positive" } else { "negative" };
        let v = unit(centers[c].iter().map(|x| x + spec.noise * normal.sample(&mut rng)).collect());
        let id = format!("s{i:04}");
        let text =
            format!("{} {} {} note {i}", WORDS[c % WORDS.len()], WORDS[(c * 7 + 3) % WORDS.len()], WORDS[rng.gen_range(0..WORDS.len())]);
        items.push(LabeledInstance::new(&id, text, label));
        vectors.push((id, EmbeddingVector::new(v.into_iter().map(|x| x as f32).collect())?));
    }
    let embeddings = EmbeddingIndex::from_pairs(vectors)?;
    let test = items.split_off(spec.train);
    let train = items;

    let pool = embeddings.subset(train.iter().map(|i| i.id.as_str()))?;
    let label_of: HashMap<&str, &str> = train.iter().map(|i| (i.id.as_str(), i.label.as_str())).collect();
    let scored = train
        .iter()
        .chain(&test)
        .map(|inst| {
            let nb = pool.neighbors_of(&inst.id, embeddings.require(&inst.id)?, spec.m)?;
            let share = majority_share(nb.entries.iter().map(|n| label_of[n.id.as_str()]));
            Ok((inst.clone(), share))
        })
        .collect::<Result<Vec<_>, IndexError>>()?;
    let world = MockWorld::from_homogeneity(spec.seed, spec.m, &spec.profile, &scored);
    Ok(SynthCorpus { task, train, test, embeddings, world })
}

pub const TASK_FILE: &str = "task.toml";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const WORLD_FILE: &str = "world.json";

/// Run configuration written next to a generated corpus.
pub const RUN_TOML: &str = r#"out = "runs/synthetic"

[data]
task = "task.toml"
train = "train.jsonl"
test = "test.jsonl"

[embeddings]
source = "file"
path = "embeddings.bin"

[backend]
kind = "mock"
world = "world.json"
"#;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SynthCorpus {
    /// Writes the task, both splits, embeddings and world into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TASK_FILE), self.task.to_toml_string())?;
        write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(TEST_FILE), &self.test)?;
        self.embeddings.save(&dir.join(EMBEDDINGS_FILE))?;
        self.world.save(&dir.join(WORLD_FILE))?;
        Ok(())
    }
}
