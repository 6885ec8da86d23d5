//! Run configuration: one TOML file per experiment plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InputFormat;
use crate::gateway::{HttpConfig, WireFlavor, DEFAULT_PARALLELISM};
use crate::pipeline::Mode;
use crate::predictor::{Heuristic, Hyper, Variant};
use crate::prompt::DemoOrder;

pub const ENV_LLM_URL: &str = "AICL_LLM_URL";
pub const ENV_LLM_KEY: &str = "AICL_LLM_KEY";
pub const ENV_EMB_URL: &str = "AICL_EMB_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub task: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
}

fn default_format() -> String {
    "jsonl".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingSource {
    File {
        path: PathBuf,
    },
    Endpoint {
        #[serde(default)]
        url: String,
        #[serde(default)]
        model: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Mock {
        world: PathBuf,
        #[serde(default)]
        seed: Option<u64>,
    },
    Http {
        #[serde(default)]
        url: String,
        #[serde(default)]
        model: String,
        #[serde(default)]
        flavor: WireFlavor,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default = "default_retries")]
        max_retries: u32,
    },
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub m: usize,
    pub mode: Mode,
    pub variant: Variant,
    pub heuristic: Heuristic,
    pub fraction: f64,
    pub validation_fraction: f64,
    /// One run per seed; reports average over them.
    pub seeds: Vec<u64>,
    pub parallelism: usize,
    pub demo_order: DemoOrder,
    pub template: Option<PathBuf>,
    pub token_budget: Option<usize>,
    pub model_id: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            m: 10,
            mode: Mode::Icl,
            variant: Variant::EN,
            heuristic: Heuristic::MaxConfidence,
            fraction: 1.0,
            validation_fraction: 0.1,
            seeds: vec![0, 1, 2, 3, 4],
            parallelism: DEFAULT_PARALLELISM,
            demo_order: DemoOrder::default(),
            template: None,
            token_budget: None,
            model_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        let h = Hyper::default();
        Self { hidden: h.hidden, epochs: h.epochs, learning_rate: h.learning_rate, batch_size: h.batch_size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { fractions: vec![0.1, 0.3, 0.5, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub embeddings: EmbeddingSource,
    pub backend: BackendConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Never serialized: keeps the key out of manifests and hashes.
    #[serde(skip)]
    pub api_key: Option<String>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Command-line overrides, applied after the file and the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub m: Option<usize>,
    pub variant: Option<Variant>,
    pub fraction: Option<f64>,
    pub mode: Option<Mode>,
    /// `mock:seed=N`, `mock`, or `http`.
    pub backend: Option<String>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_toml_str(&s, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.task);
        fix(&mut self.data.train);
        fix(&mut self.data.test);
        if let EmbeddingSource::File { path } = &mut self.embeddings {
            fix(path);
        }
        if let BackendConfig::Mock { world, .. } = &mut self.backend {
            fix(world);
        }
        if let Some(t) = &mut self.experiment.template {
            fix(t);
        }
        fix(&mut self.out);
    }

    /// Lets `AICL_LLM_URL`, `AICL_LLM_KEY` and `AICL_EMB_URL` take precedence
    /// over the file.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let BackendConfig::Http { url, .. } = &mut self.backend {
            if let Some(v) = get(ENV_LLM_URL) {
                *url = v;
            }
        }
        if let Some(k) = get(ENV_LLM_KEY) {
            self.api_key = Some(k);
        }
        if let EmbeddingSource::Endpoint { url, .. } = &mut self.embeddings {
            if let Some(v) = get(ENV_EMB_URL) {
                *url = v;
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.seed {
            self.experiment.seeds = vec![v];
        }
        if let Some(v) = o.parallelism {
            self.experiment.parallelism = v;
        }
        if let Some(v) = o.m {
            self.experiment.m = v;
        }
        if let Some(v) = o.variant {
            self.experiment.variant = v;
        }
        if let Some(v) = o.fraction {
            self.experiment.fraction = v;
        }
        if let Some(v) = o.mode {
            self.experiment.mode = v;
        }
        if let Some(spec) = &o.backend {
            self.apply_backend_override(spec)?;
        }
        Ok(())
    }

    fn apply_backend_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (kind, args) = spec.split_once(':').unwrap_or((spec, ""));
        match kind {
            "mock" => {
                let seed = match args {
                    "" => None,
                    a => Some(
                        a.strip_prefix("seed=")
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| ConfigError::Invalid(format!("bad mock backend spec {spec:?}, expected mock:seed=N")))?,
                    ),
                };
                match &mut self.backend {
                    BackendConfig::Mock { seed: s, .. } => *s = seed.or(*s),
                    BackendConfig::Http { .. } => {
                        return Err(ConfigError::Invalid("--backend mock needs a [backend] world file in the config".into()))
                    }
                }
            }
            "http" => {
                if !matches!(self.backend, BackendConfig::Http { .. }) {
                    self.backend = BackendConfig::Http {
                        url: args.to_string(),
                        model: String::new(),
                        flavor: WireFlavor::default(),
                        timeout_secs: default_timeout(),
                        max_retries: default_retries(),
                    };
                }
            }
            _ => return Err(ConfigError::Invalid(format!("unknown backend {kind:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.experiment;
        if e.m < 1 {
            return Err(ConfigError::Invalid("m must be at least 1".into()));
        }
        if e.mode == Mode::Rag && e.variant == Variant::EN {
            return Err(ConfigError::Invalid("rag mode has no demonstration labels; use variant E".into()));
        }
        if !(e.fraction > 0.0 && e.fraction <= 1.0) {
            return Err(ConfigError::Invalid(format!("fraction must lie in (0, 1], got {}", e.fraction)));
        }
        if !(e.validation_fraction > 0.0 && e.validation_fraction < 1.0) {
            return Err(ConfigError::Invalid("validation_fraction must lie in (0, 1)".into()));
        }
        if e.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        if e.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        let p = &self.predictor;
        if p.hidden == 0 || p.epochs == 0 || p.batch_size == 0 || p.learning_rate.is_nan() || p.learning_rate <= 0.0 {
            return Err(ConfigError::Invalid("predictor hidden, epochs, batch_size and learning_rate must be positive".into()));
        }
        if let Some(f) = self.sweep.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(ConfigError::Invalid(format!("sweep fraction {f} outside (0, 1]")));
        }
        self.data.format.parse::<InputFormat>().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let BackendConfig::Http { url, .. } = &self.backend {
            if url.is_empty() {
                return Err(ConfigError::Invalid(format!("http backend needs a url (config or {ENV_LLM_URL})")));
            }
        }
        if let EmbeddingSource::Endpoint { url, .. } = &self.embeddings {
            if url.is_empty() {
                return Err(ConfigError::Invalid(format!("embedding endpoint needs a url (config or {ENV_EMB_URL})")));
            }
        }
        Ok(())
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            hidden: self.predictor.hidden,
            epochs: self.predictor.epochs,
            learning_rate: self.predictor.learning_rate,
            batch_size: self.predictor.batch_size,
            seed: 0,
        }
    }

    pub fn http_config(&self) -> Option<HttpConfig> {
        match &self.backend {
            BackendConfig::Http { url, flavor, timeout_secs, max_retries, .. } => {
                let mut h = HttpConfig::new(url.clone());
                h.api_key = self.api_key.clone();
                h.flavor = *flavor;
                h.timeout_secs = *timeout_secs;
                h.max_retries = *max_retries;
                Some(h)
            }
            BackendConfig::Mock { .. } => None,
        }
    }

    pub fn model_id(&self) -> String {
        if let Some(m) = &self.experiment.model_id {
            return m.clone();
        }
        match &self.backend {
            BackendConfig::Http { model, .. } if !model.is_empty() => model.clone(),
            _ => "default".into(),
        }
    }

    /// Canonical JSON of everything that affects results. Output location
    /// and parallelism are excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.experiment.parallelism = 0;
        serde_json::to_string(&c).expect("config serializes")
    }
}
