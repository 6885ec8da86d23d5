//! Labeled corpora, task configuration and train/validation/test splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PAIR_SEPARATOR: &str = " [SEP] ";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unknown label {label:?} at line {line}")]
    UnknownLabel { label: String, line: usize },
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error("too few instances: need at least {needed}, got {got}")]
    TooFewInstances { needed: usize, got: usize },
    #[error("invalid task config: {0}")]
    InvalidTask(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One text with its gold class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: String,
    pub text: String,
    pub label: String,
}

impl LabeledInstance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), label: label.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub name: String,
    pub classes: Vec<String>,
    pub instruction: String,
    pub verbaliser: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub pair_separator: Option<String>,
}

impl TaskConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, DatasetError> {
        let task: TaskConfig = toml::from_str(s).map_err(|e| DatasetError::InvalidTask(e.to_string()))?;
        task.validate()?;
        Ok(task)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let s = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("task config serializes")
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |m: String| Err(DatasetError::InvalidTask(m));
        if self.classes.len() < 2 {
            return invalid(format!("need at least 2 classes, got {}", self.classes.len()));
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if c.is_empty() || !seen.insert(c.as_str()) {
                return invalid(format!("class list has an empty or repeated entry {c:?}"));
            }
        }
        for key in self.verbaliser.keys() {
            if !seen.contains(key.as_str()) {
                return invalid(format!("verbaliser entry for unknown class {key:?}"));
            }
        }
        let mut owner: HashMap<String, &str> = HashMap::new();
        for c in &self.classes {
            let tokens = match self.verbaliser.get(c) {
                Some(t) if !t.is_empty() => t,
                _ => return invalid(format!("class {c:?} has no verbaliser tokens")),
            };
            for t in tokens {
                let norm = t.trim().to_lowercase();
                if norm.is_empty() {
                    return invalid(format!("class {c:?} has an empty verbaliser token"));
                }
                if let Some(other) = owner.insert(norm, c) {
                    if other != c {
                        return invalid(format!("verbaliser token {t:?} is shared by {other:?} and {c:?}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// The token written into Label slots of demonstrations.
    pub fn label_token(&self, class: &str) -> Option<&str> {
        self.verbaliser.get(class).and_then(|t| t.first()).map(String::as_str)
    }

    pub fn separator(&self) -> &str {
        self.pair_separator.as_deref().unwrap_or(DEFAULT_PAIR_SEPARATOR)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Tsv,
}

impl std::str::FromStr for InputFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            other => Err(DatasetError::InvalidArgument(format!("unknown input format {other:?}"))),
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    id: String,
    text: Option<String>,
    text_a: Option<String>,
    text_b: Option<String>,
    label: String,
}

/// Reads a labeled corpus, validating every record against `task`.
///
/// Records come back in file order. Any invalid record rejects the whole file.
pub fn ingest(path: &Path, format: InputFormat, task: &TaskConfig) -> Result<Vec<LabeledInstance>, DatasetError> {
    let raw = fs::read(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    let content = String::from_utf8(raw).map_err(|e| {
        let line = 1 + e.as_bytes()[..e.utf8_error().valid_up_to()].iter().filter(|&&b| b == b'\n').count();
        DatasetError::MalformedRecord { line, reason: "invalid UTF-8".into() }
    })?;
    parse_records(&content, format, task)
}

pub fn parse_records(content: &str, format: InputFormat, task: &TaskConfig) -> Result<Vec<LabeledInstance>, DatasetError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let inst = match format {
            InputFormat::Jsonl => parse_json_line(line, lineno, task)?,
            InputFormat::Tsv => parse_tsv_line(line, lineno, out.len(), task)?,
        };
        if inst.id.is_empty() {
            return Err(DatasetError::MalformedRecord { line: lineno, reason: "empty id".into() });
        }
        if inst.text.trim().is_empty() {
            return Err(DatasetError::MalformedRecord { line: lineno, reason: "empty text".into() });
        }
        if task.class_index(&inst.label).is_none() {
            return Err(DatasetError::UnknownLabel { label: inst.label, line: lineno });
        }
        if !ids.insert(inst.id.clone()) {
            return Err(DatasetError::DuplicateId(inst.id));
        }
        out.push(inst);
    }
    Ok(out)
}

fn parse_json_line(line: &str, lineno: usize, task: &TaskConfig) -> Result<LabeledInstance, DatasetError> {
    let rec: JsonRecord = serde_json::from_str(line).map_err(|e| DatasetError::MalformedRecord { line: lineno, reason: e.to_string() })?;
    let text = match (rec.text, rec.text_a, rec.text_b) {
        (Some(t), None, None) => t,
        (None, Some(a), Some(b)) => format!("{a}{}{b}", task.separator()),
        _ => {
            return Err(DatasetError::MalformedRecord {
                line: lineno,
                reason: "expected either `text` or both `text_a` and `text_b`".into(),
            })
        }
    };
    Ok(LabeledInstance { id: rec.id, text, label: rec.label })
}

fn parse_tsv_line(line: &str, lineno: usize, position: usize, task: &TaskConfig) -> Result<LabeledInstance, DatasetError> {
    let cols: Vec<&str> = line.split('\t').collect();
    match cols.as_slice() {
        [text, label] => Ok(LabeledInstance::new(format!("{}", position + 1), *text, *label)),
        [id, text, label] => Ok(LabeledInstance::new(*id, *text, *label)),
        [id, a, b, label] => Ok(LabeledInstance::new(*id, format!("{a}{}{b}", task.separator()), *label)),
        _ => Err(DatasetError::MalformedRecord { line: lineno, reason: format!("expected 2-4 tab-separated columns, got {}", cols.len()) }),
    }
}

pub fn write_jsonl(path: &Path, instances: &[LabeledInstance]) -> Result<(), DatasetError> {
    let mut buf = String::new();
    for inst in instances {
        buf.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<LabeledInstance>,
    pub validation: Vec<LabeledInstance>,
    pub test: Vec<LabeledInstance>,
}

/// Carves a validation split out of `train` by seeded shuffle.
///
/// Both halves keep the original relative order. `test` is left empty for
/// the caller to fill.
pub fn make_splits(train: &[LabeledInstance], validation_fraction: f64, seed: u64) -> Result<SplitSet, DatasetError> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(DatasetError::InvalidArgument(format!("validation fraction must lie in (0, 1), got {validation_fraction}")));
    }
    if train.len() < 10 {
        return Err(DatasetError::TooFewInstances { needed: 10, got: train.len() });
    }
    let n_val = (validation_fraction * train.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut is_val = vec![false; train.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut t, mut v) = (Vec::new(), Vec::new());
    for (inst, val) in train.iter().zip(is_val) {
        if val {
            v.push(inst.clone());
        } else {
            t.push(inst.clone());
        }
    }
    Ok(SplitSet { train: t, validation: v, test: Vec::new() })
}

/// Keeps `round(fraction * count(c))` instances of every class `c`.
pub fn subsample_per_class(train: &[LabeledInstance], fraction: f64, seed: u64) -> Result<Vec<LabeledInstance>, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidArgument(format!("subsample fraction must lie in (0, 1], got {fraction}")));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in train.iter().enumerate() {
        by_class.entry(inst.label.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; train.len()];
    for members in by_class.values() {
        let n_keep = (fraction * members.len() as f64).round() as usize;
        for &i in members.choose_multiple(&mut rng, n_keep) {
            keep[i] = true;
        }
    }
    Ok(train.iter().zip(keep).filter(|(_, k)| *k).map(|(inst, _)| inst.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn trec_task() -> TaskConfig {
        let classes = ["ABBR", "DESC", "ENTY", "HUM", "LOC", "NUM"];
        TaskConfig {
            name: "trec".into(),
            classes: classes.iter().map(|s| s.to_string()).collect(),
            instruction: "Classify the question.".into(),
            verbaliser: classes.iter().map(|c| (c.to_string(), vec![c.to_lowercase()])).collect(),
            pair_separator: None,
        }
    }

    fn binary_task() -> TaskConfig {
        TaskConfig {
            name: "sst2".into(),
            classes: vec!["positive".into(), "negative".into()],
            instruction: "Sentiment?".into(),
            verbaliser: [
                ("positive".to_string(), vec!["positive".to_string(), "great".into()]),
                ("negative".to_string(), vec!["negative".to_string(), "terrible".into()]),
            ]
            .into_iter()
            .collect(),
            pair_separator: None,
        }
    }

    fn corpus(pos: usize, neg: usize) -> Vec<LabeledInstance> {
        (0..pos + neg)
            .map(|i| {
                let label = if i < pos { "positive" } else { "negative" };
                LabeledInstance::new(format!("i{i:04}"), format!("text {i}"), label)
            })
            .collect()
    }

    #[test]
    fn ingest_jsonl_line() {
        let line = r#"{"id":"q1","text":"What is the capital of France?","label":"LOC"}"#;
        let got = parse_records(line, InputFormat::Jsonl, &trec_task()).unwrap();
        assert_eq!(got, vec![LabeledInstance::new("q1", "What is the capital of France?", "LOC")]);
    }

    #[test]
    fn ingest_rejects_unknown_label() {
        let content = "{\"id\":\"q1\",\"text\":\"a\",\"label\":\"LOC\"}\n{\"id\":\"q2\",\"text\":\"b\",\"label\":\"LOCATION\"}\n";
        match parse_records(content, InputFormat::Jsonl, &trec_task()) {
            Err(DatasetError::UnknownLabel { label, line }) => {
                assert_eq!(label, "LOCATION");
                assert_eq!(line, 2);
            }
            other => panic!("expected UnknownLabel, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_duplicates_and_garbage() {
        let dup = "{\"id\":\"a\",\"text\":\"x\",\"label\":\"LOC\"}\n{\"id\":\"a\",\"text\":\"y\",\"label\":\"NUM\"}";
        assert!(matches!(
            parse_records(dup, InputFormat::Jsonl, &trec_task()),
            Err(DatasetError::DuplicateId(id)) if id == "a"
        ));
        let bad = "{\"id\":\"a\",\"text\":\"x\",\"label\":\"LOC\"}\nnot json";
        assert!(matches!(parse_records(bad, InputFormat::Jsonl, &trec_task()), Err(DatasetError::MalformedRecord { line: 2, .. })));
        let empty_text = "{\"id\":\"a\",\"text\":\"  \",\"label\":\"LOC\"}";
        assert!(matches!(parse_records(empty_text, InputFormat::Jsonl, &trec_task()), Err(DatasetError::MalformedRecord { line: 1, .. })));
    }

    #[test]
    fn ingest_tsv_column_layouts() {
        let task = binary_task();
        let two = "good film\tpositive\nbad film\tnegative\n";
        let got = parse_records(two, InputFormat::Tsv, &task).unwrap();
        assert_eq!(got[0].id, "1");
        assert_eq!(got[1].id, "2");
        let pair = "r1\tA man sleeps.\tSomeone rests.\tpositive\n";
        let got = parse_records(pair, InputFormat::Tsv, &task).unwrap();
        assert_eq!(got[0].text, "A man sleeps. [SEP] Someone rests.");
    }

    #[test]
    fn ingest_jsonl_pair_fields() {
        let mut task = binary_task();
        task.pair_separator = Some(" || ".into());
        let line = r#"{"id":"r1","text_a":"p","text_b":"h","label":"negative"}"#;
        let got = parse_records(line, InputFormat::Jsonl, &task).unwrap();
        assert_eq!(got[0].text, "p || h");
    }

    #[test]
    fn ingest_large_file_keeps_count() {
        let task = trec_task();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for i in 0..5500 {
            let label = &task.classes[i % 6];
            writeln!(f, "{{\"id\":\"t{i}\",\"text\":\"question {i}?\",\"label\":\"{label}\"}}").unwrap();
        }
        let got = ingest(f.path(), InputFormat::Jsonl, &task).unwrap();
        assert_eq!(got.len(), 5500);
        assert_eq!(got[17].id, "t17");
    }

    #[test]
    fn task_validation() {
        assert!(binary_task().validate().is_ok());
        let mut t = binary_task();
        t.verbaliser.get_mut("negative").unwrap().push("Great".into());
        assert!(t.validate().is_err());
        let mut t = binary_task();
        t.verbaliser.get_mut("negative").unwrap().clear();
        assert!(t.validate().is_err());
        let mut t = binary_task();
        t.classes.truncate(1);
        assert!(t.validate().is_err());
        let round = TaskConfig::from_toml_str(&binary_task().to_toml_string()).unwrap();
        assert_eq!(round, binary_task());
    }

    #[test]
    fn splits_sizes_and_determinism() {
        let data = corpus(50, 50);
        let s = make_splits(&data, 0.10, 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (90, 10));
        assert_eq!(s, make_splits(&data, 0.10, 7).unwrap());
        assert_ne!(s.validation, make_splits(&data, 0.10, 8).unwrap().validation);

        // round(0.10 * 5500) = 550
        let big = corpus(2750, 2750);
        assert_eq!(make_splits(&big, 0.10, 1).unwrap().validation.len(), 550);
    }

    #[test]
    fn splits_reject_bad_input() {
        assert!(matches!(make_splits(&corpus(5, 4), 0.1, 0), Err(DatasetError::TooFewInstances { .. })));
        assert!(make_splits(&corpus(10, 10), 1.0, 0).is_err());
        assert!(make_splits(&corpus(10, 10), 0.0, 0).is_err());
    }

    #[test]
    fn subsample_counts() {
        let data = corpus(40, 60);
        let half = subsample_per_class(&data, 0.5, 3).unwrap();
        let pos = half.iter().filter(|i| i.label == "positive").count();
        assert_eq!((pos, half.len() - pos), (20, 30));
        assert_eq!(subsample_per_class(&data, 1.0, 3).unwrap(), data);
        assert!(subsample_per_class(&data, 0.0, 3).is_err());
    }

    #[test]
    fn subsample_matches_independent_recount() {
        // 1000 instances over 3 uneven classes, counted without the module's grouping.
        let labels = ["a", "b", "c"];
        let data: Vec<_> = (0..1000).map(|i| LabeledInstance::new(format!("{i}"), "t", labels[(i * i + 3 * i) % 7 % 3])).collect();
        let mut expected = [0usize; 3];
        for inst in &data {
            expected[labels.iter().position(|l| *l == inst.label).unwrap()] += 1;
        }
        let expected: Vec<usize> = expected.iter().map(|&n| (0.3 * n as f64).round() as usize).collect();
        let got = subsample_per_class(&data, 0.3, 11).unwrap();
        for (li, l) in labels.iter().enumerate() {
            assert_eq!(got.iter().filter(|i| i.label == *l).count(), expected[li]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn splits_partition_input(n in 10usize..300, frac in 0.01f64..0.99, seed in any::<u64>()) {
                let data = corpus(n / 2, n - n / 2);
                let s = make_splits(&data, frac, seed).unwrap();
                prop_assert_eq!(s.validation.len(), (frac * n as f64).round() as usize);
                let train_ids: HashSet<_> = s.train.iter().map(|i| &i.id).collect();
                let val_ids: HashSet<_> = s.validation.iter().map(|i| &i.id).collect();
                prop_assert!(train_ids.is_disjoint(&val_ids));
                let all: HashSet<_> = data.iter().map(|i| &i.id).collect();
                let union: HashSet<_> = train_ids.union(&val_ids).copied().collect();
                prop_assert_eq!(union, all);
            }

            #[test]
            fn subsample_identity_and_proportions(pos in 0usize..80, neg in 1usize..80, frac in 0.01f64..=1.0, seed in any::<u64>()) {
                let data = corpus(pos, neg);
                prop_assert_eq!(&subsample_per_class(&data, 1.0, seed).unwrap(), &data);
                let sub = subsample_per_class(&data, frac, seed).unwrap();
                for (label, count) in [("positive", pos), ("negative", neg)] {
                    if count == 0 { continue; }
                    let kept = sub.iter().filter(|i| i.label == label).count();
                    prop_assert!((kept as f64 / count as f64 - frac).abs() <= 0.5 / count as f64 + 1e-12);
                }
                // original relative order survives
                let positions: Vec<usize> = sub.iter()
                    .map(|s| data.iter().position(|d| d.id == s.id).unwrap())
                    .collect();
                prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
