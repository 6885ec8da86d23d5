#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use aicl::dataset::LabeledInstance;
use aicl::gateway::{Gateway, MockBackend, MockInstance, MockWorld};
use aicl::index::{EmbeddingIndex, EmbeddingVector};
use aicl::synth::binary_task;
use aicl::{IclContext, TaskConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One hand-specified instance of a mock world.
pub struct Item {
    pub id: &'static str,
    pub label: &'static str,
    pub k_star: usize,
    pub flips: Vec<usize>,
    pub vector: Vec<f32>,
}

pub fn item(id: &'static str, label: &'static str, k_star: usize, flips: &[usize], vector: &[f32]) -> Item {
    Item { id, label, k_star, flips: flips.to_vec(), vector: vector.to_vec() }
}

pub struct Fixture {
    pub task: TaskConfig,
    pub pool: Vec<LabeledInstance>,
    pub queries: Vec<LabeledInstance>,
    pub embeddings: Arc<EmbeddingIndex>,
    pub world: Arc<MockWorld>,
}

fn text_of(id: &str) -> String {
    format!("text of {id}")
}

pub fn fixture(m: usize, pool: &[Item], queries: &[Item]) -> Fixture {
    let all: Vec<&Item> = pool.iter().chain(queries).collect();
    let world = MockWorld {
        seed: 1,
        m,
        instances: all
            .iter()
            .map(|i| MockInstance {
                id: i.id.into(),
                text: text_of(i.id),
                label: i.label.into(),
                k_star: i.k_star,
                flips: i.flips.iter().copied().collect::<BTreeSet<_>>(),
            })
            .collect(),
        failing: BTreeSet::new(),
    };
    let embeddings =
        EmbeddingIndex::from_pairs(all.iter().map(|i| (i.id.to_string(), EmbeddingVector::new(i.vector.clone()).unwrap()))).unwrap();
    let inst = |i: &Item| LabeledInstance::new(i.id, text_of(i.id), i.label);
    Fixture {
        task: binary_task(),
        pool: pool.iter().map(inst).collect(),
        queries: queries.iter().map(inst).collect(),
        embeddings: Arc::new(embeddings),
        world: Arc::new(world),
    }
}

impl Fixture {
    pub fn gateway(&self) -> Arc<Gateway> {
        Arc::new(Gateway::new(Arc::new(MockBackend::new(self.world.clone(), self.task.clone()))))
    }

    pub fn ctx(&self) -> IclContext {
        IclContext::new(self.task.clone(), self.gateway(), &self.pool, self.embeddings.clone(), self.world.m).unwrap()
    }

    pub fn correct(&self, id: &str, k: usize) -> bool {
        self.world.correctness(id, k).unwrap()
    }
}

/// Random pool and query instances with seeded k* and flips.
pub fn random_fixture(seed: u64, m: usize, n_pool: usize, n_query: usize, dim: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<&'static str> = (0..n_pool + n_query).map(|i| &*Box::leak(format!("r{i:04}").into_boxed_str())).collect();
    let mut items: Vec<Item> = ids
        .iter()
        .map(|&id| {
            let flips = (0..=m).filter(|_| rng.gen::<f64>() < 0.15).collect();
            Item {
                id,
                label: if rng.gen() { "positive" } else { "negative" },
                k_star: rng.gen_range(0..=m + 1),
                flips,
                vector: (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            }
        })
        .collect();
    let queries = items.split_off(n_pool);
    fixture(m, &items, &queries)
}

/// Macro-F1 over two or more classes, computed from scratch.
pub fn macro_f1(gold: &[&str], pred: &[&str], classes: &[&str]) -> f64 {
    let mut tp: HashMap<&str, f64> = HashMap::new();
    let mut fp: HashMap<&str, f64> = HashMap::new();
    let mut fnn: HashMap<&str, f64> = HashMap::new();
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            *tp.entry(g).or_default() += 1.0;
        } else {
            *fp.entry(p).or_default() += 1.0;
            *fnn.entry(g).or_default() += 1.0;
        }
    }
    let f1 = |c: &str| {
        let t = tp.get(c).copied().unwrap_or(0.0);
        let p = if t + fp.get(c).copied().unwrap_or(0.0) > 0.0 { t / (t + fp.get(c).copied().unwrap_or(0.0)) } else { 0.0 };
        let r = if t + fnn.get(c).copied().unwrap_or(0.0) > 0.0 { t / (t + fnn.get(c).copied().unwrap_or(0.0)) } else { 0.0 };
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    };
    classes.iter().map(|c| f1(c)).sum::<f64>() / classes.len() as f64
}

pub fn other(label: &str) -> &'static str {
    if label == "positive" {
        "negative"
    } else {
        "positive"
    }
}

pub fn bundled_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic")
}

/// The synthetic corpus shipped with the repository, and its mock world.
pub fn bundled() -> (aicl::pipeline::Corpus, Arc<MockWorld>) {
    use aicl::dataset::{ingest, InputFormat};
    let dir = bundled_dir();
    let task = TaskConfig::load(&dir.join("task.toml")).unwrap();
    let train = ingest(&dir.join("train.jsonl"), InputFormat::Jsonl, &task).unwrap();
    let test = ingest(&dir.join("test.jsonl"), InputFormat::Jsonl, &task).unwrap();
    let embeddings = Arc::new(EmbeddingIndex::load(&dir.join("embeddings.bin")).unwrap());
    let world = Arc::new(MockWorld::load(&dir.join("world.json")).unwrap());
    (aicl::pipeline::Corpus { task, train, test, embeddings }, world)
}

pub fn mock_gateway(world: &Arc<MockWorld>, task: &TaskConfig) -> Arc<Gateway> {
    Arc::new(Gateway::new(Arc::new(MockBackend::new(world.clone(), task.clone()))))
}
