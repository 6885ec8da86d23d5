use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use aicl::config::{BackendConfig, ConfigError, EmbeddingSource, Overrides, RunConfig};
use aicl::dataset::{ingest, write_jsonl as write_instances, InputFormat, LabeledInstance, TaskConfig};
use aicl::engine::{mean_used_k, read_predictions, write_predictions, PredictionRecord, Strategy};
use aicl::eval::{
    average_runs, curve_csv, macro_metrics, mcnemar, render_table, scaling_sweep, sensitivity_sweep, CurvePoint, EvalError, MetricReport,
};
use aicl::gateway::{CallStats, Gateway, HttpBackend, HttpEmbedder, MockBackend, MockWorld, ResponseCache};
use aicl::index::EmbeddingIndex;
use aicl::manifest::{hash_files, Manifest};
use aicl::oracle::{read_jsonl, write_jsonl, RagShotTarget, ShotOutcomeVector};
use aicl::pipeline::{Corpus, Mode, SeedRun, Settings, TrainingTargets};
use aicl::predictor::{KPredictorModel, Variant};
use aicl::prompt::PromptTemplate;
use aicl::synth::{generate, SynthSpec};

#[derive(Parser)]
#[command(name = "aicl", version, about = "Adaptive in-context learning experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Run configuration file.
    #[arg(long, global = true, default_value = "run.toml")]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true)]
    m: Option<usize>,
    /// E or E+N.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Share of each class used to build ground truth.
    #[arg(long, global = true)]
    fraction: Option<f64>,
    /// icl or rag.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// `mock`, `mock:seed=N` or `http`.
    #[arg(long, global = true)]
    backend: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize the task and both splits.
    Ingest,
    /// Load or compute embeddings for every instance.
    Embed,
    /// Build per-instance shot-count targets.
    Groundtruth,
    /// Fit the shot-count predictor.
    Train,
    /// Run every strategy on the test split.
    Infer,
    /// Score predictions and write reports.
    Eval,
    /// Fixed-k sensitivity and subsample scaling curves.
    Sweep,
    /// Write the synthetic corpus, its mock world and a run config.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        synth_seed: u64,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            parallelism: self.parallelism,
            m: self.m,
            variant: self.variant,
            fraction: self.fraction,
            mode: self.mode,
            backend: self.backend.clone(),
        }
    }
}

struct Env {
    cfg: RunConfig,
    out: PathBuf,
    fingerprint: String,
    gateway: OnceLock<Arc<Gateway>>,
}

impl Env {
    fn new(global: &GlobalArgs) -> Result<Self> {
        let mut cfg = RunConfig::load(&global.config)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.apply(&global.overrides())?;
        cfg.validate()?;
        let out = cfg.out.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { fingerprint: aicl::manifest::sha256_hex(cfg.fingerprint().as_bytes()), cfg, out, gateway: OnceLock::new() })
    }

    fn data(&self, name: &str) -> PathBuf {
        self.out.join("data").join(name)
    }

    fn embeddings_path(&self) -> PathBuf {
        self.out.join("embeddings.bin")
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed-{seed}"))
    }

    fn task(&self) -> Result<TaskConfig> {
        Ok(TaskConfig::load(&require(self.data("task.toml"), "ingest")?)?)
    }

    fn split(&self, name: &str, task: &TaskConfig) -> Result<Vec<LabeledInstance>> {
        Ok(ingest(&require(self.data(name), "ingest")?, InputFormat::Jsonl, task)?)
    }

    fn corpus(&self) -> Result<Corpus> {
        let task = self.task()?;
        let train = self.split("train.jsonl", &task)?;
        let test = self.split("test.jsonl", &task)?;
        let embeddings = EmbeddingIndex::load(&require(self.embeddings_path(), "embed")?)?;
        Ok(Corpus { task, train, test, embeddings: Arc::new(embeddings) })
    }

    fn settings(&self) -> Result<Settings> {
        let e = &self.cfg.experiment;
        Ok(Settings {
            m: e.m,
            mode: e.mode,
            hyper: self.cfg.hyper(),
            heuristic: e.heuristic,
            validation_fraction: e.validation_fraction,
            model_id: self.cfg.model_id(),
            template: match &e.template {
                Some(p) => PromptTemplate::load(p)?,
                None => PromptTemplate::default(),
            },
            demo_order: e.demo_order,
            token_budget: e.token_budget,
        })
    }

    fn gateway(&self, task: &TaskConfig) -> Result<Arc<Gateway>> {
        if let Some(g) = self.gateway.get() {
            return Ok(g.clone());
        }
        let cache_dir = self.out.join("cache");
        fs::create_dir_all(&cache_dir)?;
        let backend: Arc<dyn aicl::gateway::Backend> = match &self.cfg.backend {
            BackendConfig::Mock { world, seed } => {
                let mut w = MockWorld::load(world)?;
                if let Some(s) = seed {
                    w.seed = *s;
                }
                Arc::new(MockBackend::new(Arc::new(w), task.clone()))
            }
            BackendConfig::Http { .. } => Arc::new(HttpBackend::new(self.cfg.http_config().expect("http backend"))?),
        };
        let mut b = Gateway::builder(backend)
            .cache(ResponseCache::open(&cache_dir.join("responses.bin"))?)
            .embed_cache(ResponseCache::open(&cache_dir.join("embeddings.bin"))?)
            .parallelism(self.cfg.experiment.parallelism);
        if let EmbeddingSource::Endpoint { url, model } = &self.cfg.embeddings {
            let mut h = aicl::gateway::HttpConfig::new(url.clone());
            h.api_key = self.cfg.api_key.clone();
            b = b.embedder(Arc::new(HttpEmbedder::new(h, model.clone())?));
        }
        let g = Arc::new(b.build());
        Ok(self.gateway.get_or_init(|| g).clone())
    }

    fn backend_id(&self) -> String {
        match &self.cfg.backend {
            BackendConfig::Mock { seed, world } => match seed {
                Some(s) => format!("mock:seed={s}"),
                None => MockWorld::load(world).map(|w| format!("mock:seed={}", w.seed)).unwrap_or_else(|_| "mock".into()),
            },
            BackendConfig::Http { url, .. } => format!("http:{url}"),
        }
    }

    fn world_inputs(&self) -> Vec<PathBuf> {
        let mut v = Vec::new();
        if let BackendConfig::Mock { world, .. } = &self.cfg.backend {
            v.push(world.clone());
        }
        if let Some(t) = &self.cfg.experiment.template {
            v.push(t.clone());
        }
        v
    }
}

fn require(p: PathBuf, stage: &str) -> Result<PathBuf> {
    if p.exists() {
        Ok(p)
    } else {
        Err(anyhow!("missing {}; run `aicl {stage}` first", p.display()))
    }
}

#[derive(Default)]
struct StageOutput {
    files: Vec<PathBuf>,
    details: serde_json::Value,
    summary: String,
}

/// Runs `body` unless the stage's manifest shows it is already up to date.
fn stage(env: &Env, name: &str, inputs: Vec<PathBuf>, body: impl FnOnce() -> Result<StageOutput>) -> Result<()> {
    let inputs = hash_files(&inputs).context("hashing stage inputs")?;
    if let Some(m) = Manifest::load(&env.out, name) {
        if m.is_current(&env.fingerprint, &inputs) {
            println!("{name}: skipped, up-to-date");
            return Ok(());
        }
    }
    let before = env.gateway.get().map(|g| g.stats()).unwrap_or_default();
    let out = body()?;
    let after = env.gateway.get().map(|g| g.stats()).unwrap_or_default();
    let calls = CallStats {
        backend_calls: after.backend_calls - before.backend_calls,
        cache_hits: after.cache_hits - before.cache_hits,
        embed_calls: after.embed_calls - before.embed_calls,
        embed_cache_hits: after.embed_cache_hits - before.embed_cache_hits,
    };
    let manifest = Manifest {
        stage: name.to_string(),
        toolkit_version: aicl::VERSION.to_string(),
        config_hash: env.fingerprint.clone(),
        seeds: env.cfg.experiment.seeds.clone(),
        backend: env.backend_id(),
        inputs,
        outputs: hash_files(&out.files)?,
        calls,
        details: out.details,
    };
    manifest.save(&env.out)?;
    println!("{name}: done ({}; {} backend calls, {} cache hits)", out.summary, calls.backend_calls, calls.cache_hits);
    Ok(())
}

fn cmd_ingest(env: &Env) -> Result<()> {
    let d = &env.cfg.data;
    stage(env, "ingest", vec![d.task.clone(), d.train.clone(), d.test.clone()], || {
        let task = TaskConfig::load(&d.task)?;
        task.validate()?;
        let format: InputFormat = d.format.parse()?;
        let train = ingest(&d.train, format, &task)?;
        let test = ingest(&d.test, format, &task)?;
        let train_ids: std::collections::HashSet<&str> = train.iter().map(|i| i.id.as_str()).collect();
        if let Some(dup) = test.iter().find(|i| train_ids.contains(i.id.as_str())) {
            bail!("instance id {} occurs in both train and test", dup.id);
        }
        fs::create_dir_all(env.out.join("data"))?;
        fs::write(env.data("task.toml"), task.to_toml_string())?;
        write_instances(&env.data("train.jsonl"), &train)?;
        write_instances(&env.data("test.jsonl"), &test)?;
        Ok(StageOutput {
            files: vec![env.data("task.toml"), env.data("train.jsonl"), env.data("test.jsonl")],
            details: json!({"train": train.len(), "test": test.len()}),
            summary: format!("{} train, {} test", train.len(), test.len()),
        })
    })
}

fn cmd_embed(env: &Env) -> Result<()> {
    let mut inputs = vec![require(env.data("train.jsonl"), "ingest")?, env.data("test.jsonl")];
    if let EmbeddingSource::File { path } = &env.cfg.embeddings {
        inputs.push(path.clone());
    }
    stage(env, "embed", inputs, || {
        let task = env.task()?;
        let all: Vec<LabeledInstance> = env.split("train.jsonl", &task)?.into_iter().chain(env.split("test.jsonl", &task)?).collect();
        let index = match &env.cfg.embeddings {
            EmbeddingSource::File { path } => {
                let src = EmbeddingIndex::load(path)?;
                src.subset(all.iter().map(|i| i.id.as_str()))?
            }
            EmbeddingSource::Endpoint { .. } => {
                let g = env.gateway(&task)?;
                let texts: Vec<String> = all.iter().map(|i| i.text.clone()).collect();
                let vectors = g.embed(&texts)?;
                EmbeddingIndex::from_pairs(all.iter().map(|i| i.id.clone()).zip(vectors))?
            }
        };
        index.save(&env.embeddings_path())?;
        Ok(StageOutput {
            files: vec![env.embeddings_path()],
            details: json!({"count": index.len(), "dim": index.dim()}),
            summary: format!("{} vectors of dimension {}", index.len(), index.dim()),
        })
    })
}

fn gt_path(env: &Env, seed: u64) -> PathBuf {
    env.seed_dir(seed).join("groundtruth.jsonl")
}

fn model_path(env: &Env, seed: u64) -> PathBuf {
    env.seed_dir(seed).join("model.bin")
}

fn upstream(env: &Env) -> Result<Vec<PathBuf>> {
    let mut v = vec![
        require(env.data("task.toml"), "ingest")?,
        env.data("train.jsonl"),
        env.data("test.jsonl"),
        require(env.embeddings_path(), "embed")?,
    ];
    v.extend(env.world_inputs());
    Ok(v)
}

fn cmd_groundtruth(env: &Env) -> Result<()> {
    stage(env, "groundtruth", upstream(env)?, || {
        let corpus = env.corpus()?;
        let g = env.gateway(&corpus.task)?;
        let mut files = Vec::new();
        let mut details = serde_json::Map::new();
        let mut targets = 0;
        let mut failed = 0;
        for &seed in &env.cfg.experiment.seeds {
            let run = SeedRun::new(&corpus, g.clone(), env.settings()?, seed)?;
            fs::create_dir_all(env.seed_dir(seed))?;
            let path = gt_path(env, seed);
            let report = match run.ground_truth(env.cfg.experiment.fraction)? {
                TrainingTargets::Outcomes(r) => {
                    write_jsonl(&path, &r.targets)?;
                    json!({"selected": r.selected, "targets": r.targets.len(), "failures": r.failures, "backend_calls": r.backend_calls, "cache_hits": r.cache_hits})
                }
                TrainingTargets::Rag(r) => {
                    write_jsonl(&path, &r.targets)?;
                    json!({"selected": r.selected, "targets": r.targets.len(), "failures": r.failures, "backend_calls": r.backend_calls, "cache_hits": r.cache_hits})
                }
            };
            targets += report["targets"].as_u64().unwrap_or(0);
            let nf = report["failures"].as_array().map_or(0, Vec::len);
            if nf > 0 {
                eprintln!("groundtruth: seed {seed}: {nf} instances failed and were left out");
            }
            failed += nf;
            fs::write(env.seed_dir(seed).join("groundtruth_report.json"), serde_json::to_vec_pretty(&report)?)?;
            files.push(path);
            details.insert(format!("seed-{seed}"), report);
        }
        Ok(StageOutput { files, details: serde_json::Value::Object(details), summary: format!("{targets} targets, {failed} failures") })
    })
}

fn cmd_train(env: &Env) -> Result<()> {
    let mut inputs = upstream(env)?;
    for &seed in &env.cfg.experiment.seeds {
        inputs.push(require(gt_path(env, seed), "groundtruth")?);
    }
    stage(env, "train", inputs, || {
        let corpus = env.corpus()?;
        let g = env.gateway(&corpus.task)?;
        let variant = env.cfg.experiment.variant;
        let mut files = Vec::new();
        let mut losses = serde_json::Map::new();
        for &seed in &env.cfg.experiment.seeds {
            let run = SeedRun::new(&corpus, g.clone(), env.settings()?, seed)?;
            let targets = match env.cfg.experiment.mode {
                Mode::Icl => TrainingTargets::Outcomes(report_of(read_jsonl::<ShotOutcomeVector>(&gt_path(env, seed))?)),
                Mode::Rag => TrainingTargets::Rag(report_of(read_jsonl::<RagShotTarget>(&gt_path(env, seed))?)),
            };
            let model = run.fit(&targets, variant)?;
            let path = model_path(env, seed);
            model.save(&path)?;
            losses.insert(format!("seed-{seed}"), json!({"initial": model.train_log.first(), "final": model.train_log.last()}));
            files.push(path.clone());
            files.push(aicl::predictor::sidecar_path(&path));
        }
        Ok(StageOutput {
            summary: format!("{} {variant} models", env.cfg.experiment.seeds.len()),
            files,
            details: serde_json::Value::Object(losses),
        })
    })
}

fn report_of<T>(targets: Vec<T>) -> aicl::oracle::GroundTruthReport<T> {
    aicl::oracle::GroundTruthReport { selected: targets.len(), targets, failures: Vec::new(), backend_calls: 0, cache_hits: 0 }
}

fn aicl_strategy(env: &Env) -> Strategy {
    Strategy::for_variant(env.cfg.experiment.variant)
}

fn prediction_path(env: &Env, seed: u64, s: Strategy) -> PathBuf {
    env.seed_dir(seed).join("predictions").join(format!("{s}.jsonl"))
}

const BASELINES: [Strategy; 3] = [Strategy::ZeroShot, Strategy::Ficl, Strategy::AiclStar];

fn cmd_infer(env: &Env) -> Result<()> {
    let mut inputs = upstream(env)?;
    for &seed in &env.cfg.experiment.seeds {
        inputs.push(require(model_path(env, seed), "train")?);
    }
    stage(env, "infer", inputs, || {
        let corpus = env.corpus()?;
        let g = env.gateway(&corpus.task)?;
        let variant = env.cfg.experiment.variant;
        let mut files = Vec::new();
        let mut details = serde_json::Map::new();
        for &seed in &env.cfg.experiment.seeds {
            let run = SeedRun::new(&corpus, g.clone(), env.settings()?, seed)?;
            let model = KPredictorModel::load(&model_path(env, seed))?;
            let grid = run.grid_search()?;
            let aicl = run.aicl(&model, variant)?;
            let sets = [
                (Strategy::ZeroShot, run.zero_shot()),
                (Strategy::Ficl, run.ficl(grid.best_k)?),
                (aicl_strategy(env), aicl.records),
                (Strategy::AiclStar, run.oracle()),
            ];
            fs::create_dir_all(env.seed_dir(seed).join("predictions"))?;
            let mut failures = 0;
            for (s, records) in &sets {
                failures += records.iter().filter(|r| r.error.is_some()).count();
                let p = prediction_path(env, seed, *s);
                write_predictions(&p, records)?;
                files.push(p);
            }
            let grid_path = env.seed_dir(seed).join("grid.json");
            fs::write(&grid_path, serde_json::to_vec_pretty(&grid)?)?;
            files.push(grid_path);
            details.insert(format!("seed-{seed}"), json!({"ficl_k": grid.best_k, "aicl_mean_k": aicl.mean_k, "failures": failures}));
        }
        Ok(StageOutput { summary: format!("{} seeds", env.cfg.experiment.seeds.len()), files, details: serde_json::Value::Object(details) })
    })
}

fn cmd_eval(env: &Env) -> Result<()> {
    let mut inputs = vec![require(env.data("task.toml"), "ingest")?];
    let strategies: Vec<Strategy> = vec![BASELINES[0], BASELINES[1], aicl_strategy(env), BASELINES[2]];
    for &seed in &env.cfg.experiment.seeds {
        for &s in &strategies {
            inputs.push(require(prediction_path(env, seed, s), "infer")?);
        }
    }
    stage(env, "eval", inputs, || {
        let task = env.task()?;
        let mut reports: Vec<MetricReport> = Vec::new();
        let mut tests = Vec::new();
        let mut per_seed: BTreeMap<Strategy, Vec<Vec<PredictionRecord>>> = BTreeMap::new();
        for &seed in &env.cfg.experiment.seeds {
            for &s in &strategies {
                per_seed.entry(s).or_default().push(read_predictions(&prediction_path(env, seed, s))?);
            }
        }
        for s in &strategies {
            let runs = per_seed[s].iter().map(|r| macro_metrics(r, &task)).collect::<Result<Vec<_>, EvalError>>()?;
            let mut avg = average_runs(&runs)?;
            if *s == Strategy::AiclStar {
                avg.strategy = "aicl_star (oracle)".into();
            }
            reports.push(avg);
        }
        let aicl_runs = &per_seed[&aicl_strategy(env)];
        for (seed, (a, f)) in env.cfg.experiment.seeds.iter().zip(aicl_runs.iter().zip(&per_seed[&Strategy::Ficl])) {
            tests.push(json!({"seed": seed, "a": aicl_strategy(env), "b": "ficl", "mcnemar": mcnemar(a, f)?}));
        }
        let backend = env.backend_id();
        let json_path = env.out.join("report.json");
        let txt_path = env.out.join("report.txt");
        fs::write(&json_path, serde_json::to_vec_pretty(&json!({"backend": backend, "metrics": reports, "significance": tests}))?)?;
        let table = render_table(&backend, &reports);
        fs::write(&txt_path, &table)?;
        print!("{table}");
        Ok(StageOutput {
            summary: format!("{} strategies over {} runs", reports.len(), env.cfg.experiment.seeds.len()),
            files: vec![json_path, txt_path],
            details: serde_json::Value::Null,
        })
    })
}

fn cmd_sweep(env: &Env) -> Result<()> {
    stage(env, "sweep", upstream(env)?, || {
        let corpus = env.corpus()?;
        let g = env.gateway(&corpus.task)?;
        let seeds = &env.cfg.experiment.seeds;
        let variant = env.cfg.experiment.variant;
        let mut by_k: Vec<Vec<f64>> = vec![Vec::new(); env.cfg.experiment.m + 1];
        let mut oracle = Vec::new();
        for &seed in seeds {
            let run = SeedRun::new(&corpus, g.clone(), env.settings()?, seed)?;
            for p in sensitivity_sweep(&run.ctx, &run.split.test)? {
                by_k[p.x as usize].push(p.mean);
            }
            oracle.push(run.f1(&run.oracle())?);
        }
        let sensitivity: Vec<CurvePoint> = by_k.iter().enumerate().map(|(k, v)| CurvePoint::summarize(k as f64, v)).collect();
        let mut runs = BTreeMap::new();
        let scaling = scaling_sweep(&env.cfg.sweep.fractions, seeds, |fraction, seed| {
            let run = SeedRun::new(&corpus, g.clone(), env.settings().map_err(|e| EvalError::InvalidArgument(e.to_string()))?, seed)
                .map_err(|e| EvalError::InvalidArgument(e.to_string()))?;
            let model = run.train_predictor(fraction, variant).map_err(|e| EvalError::InvalidArgument(e.to_string()))?;
            let records = run.aicl(&model, variant).map_err(|e| EvalError::InvalidArgument(e.to_string()))?.records;
            runs.insert(format!("{fraction}/{seed}"), mean_used_k(&records));
            Ok(macro_metrics(&records, &corpus.task)?.f1)
        })?;
        let dir = env.out.join("sweep");
        fs::create_dir_all(&dir)?;
        let files = vec![dir.join("sensitivity.csv"), dir.join("scaling.csv"), dir.join("sweep.json")];
        fs::write(&files[0], curve_csv(&sensitivity))?;
        fs::write(&files[1], curve_csv(&scaling))?;
        let reference = CurvePoint::summarize(0.0, &oracle);
        fs::write(
            &files[2],
            serde_json::to_vec_pretty(&json!({
                "sensitivity": sensitivity,
                "scaling": scaling,
                "reference": {"aicl_star_f1": reference.mean, "aicl_full_data_f1": scaling.last().map(|p| p.mean)},
                "aicl_mean_k": runs,
            }))?,
        )?;
        Ok(StageOutput {
            summary: format!("{} k values, {} fractions", sensitivity.len(), scaling.len()),
            files,
            details: serde_json::Value::Null,
        })
    })
}

fn cmd_synth(dir: &Path, seed: u64, train: Option<usize>, test: Option<usize>) -> Result<()> {
    let mut spec = SynthSpec { seed, ..SynthSpec::default() };
    if let Some(n) = train {
        spec.train = n;
    }
    if let Some(n) = test {
        spec.test = n;
    }
    let corpus = generate(&spec)?;
    corpus.write_to(dir)?;
    fs::write(dir.join("run.toml"), aicl::synth::RUN_TOML)?;
    println!("synth: wrote {} train and {} test instances to {}", corpus.train.len(), corpus.test.len(), dir.display());
    Ok(())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Embed => "embed",
            Command::Groundtruth => "groundtruth",
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Synth { .. } => "synth",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth { dir, synth_seed, train, test } = &cli.command {
        return cmd_synth(dir, *synth_seed, *train, *test);
    }
    let env = Env::new(&cli.global)?;
    match cli.command {
        Command::Ingest => cmd_ingest(&env),
        Command::Embed => cmd_embed(&env),
        Command::Groundtruth => cmd_groundtruth(&env),
        Command::Train => cmd_train(&env),
        Command::Infer => cmd_infer(&env),
        Command::Eval => cmd_eval(&env),
        Command::Sweep => cmd_sweep(&env),
        Command::Synth { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let config = e.downcast_ref::<ConfigError>().is_some();
            let report = json!({
                "status": "error",
                "command": command,
                "kind": if config { "config" } else { "runtime" },
                "message": format!("{e:#}"),
            });
            eprintln!("{report}");
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
