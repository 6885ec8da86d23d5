//! Macro metrics, McNemar's test, sweep curves and reports.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledInstance;
use crate::dataset::TaskConfig;
use crate::engine::{run_fixed_k, PredictionRecord, Strategy};
use crate::icl::{IclContext, IclError};

/// Chi-square critical value at 95%, one degree of freedom.
pub const CHI2_CRITICAL_95: f64 = 3.841;
/// Below this many discordant pairs significance comes from the exact
/// binomial test.
pub const EXACT_BELOW: u64 = 25;
pub const DEFAULT_RUNS: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    EmptyRecords,
    #[error("record {0} has no gold label")]
    UnresolvedGold(String),
    #[error("record {id} refers to unknown class {class:?}")]
    UnknownClass { id: String, class: String },
    #[error("paired records differ: {0}")]
    IdMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Icl(#[from] IclError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub strategy: String,
    pub mean_k: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_runs: usize,
    pub per_run: Vec<RunMetrics>,
}

/// Macro precision, recall and F1 over `p` classes from class-index pairs.
/// Per-class 0/0 counts as 0.
pub fn macro_prf(gold: &[usize], pred: &[usize], p: usize) -> (f64, f64, f64) {
    let mut tp = vec![0u64; p];
    let mut fp = vec![0u64; p];
    let mut fneg = vec![0u64; p];
    for (&g, &y) in gold.iter().zip(pred) {
        if g == y {
            tp[g] += 1;
        } else {
            fneg[g] += 1;
            if y < p {
                fp[y] += 1;
            }
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..p {
        let prec = ratio(tp[c], tp[c] + fp[c]);
        let rec = ratio(tp[c], tp[c] + fneg[c]);
        let f = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        sp += prec;
        sr += rec;
        sf += f;
    }
    let n = p as f64;
    (sp / n, sr / n, sf / n)
}

/// Macro metrics of one run. Failed records count as wrong and, having no
/// prediction, add a false negative only.
pub fn macro_metrics(records: &[PredictionRecord], task: &TaskConfig) -> Result<MetricReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let p = task.num_classes();
    let class = |id: &str, c: &str| task.class_index(c).ok_or_else(|| EvalError::UnknownClass { id: id.to_string(), class: c.to_string() });
    let mut gold = Vec::with_capacity(records.len());
    let mut pred = Vec::with_capacity(records.len());
    for r in records {
        let g = r.gold.as_deref().ok_or_else(|| EvalError::UnresolvedGold(r.instance_id.clone()))?;
        gold.push(class(&r.instance_id, g)?);
        pred.push(match &r.predicted_class {
            Some(c) => class(&r.instance_id, c)?,
            None => p,
        });
    }
    let (precision, recall, f1) = macro_prf(&gold, &pred, p);
    let mean_k = records.iter().map(|r| r.used_k as f64).sum::<f64>() / records.len() as f64;
    let run = RunMetrics { precision, recall, f1, mean_k };
    Ok(MetricReport { strategy: records[0].strategy.to_string(), mean_k, precision, recall, f1, n_runs: 1, per_run: vec![run] })
}

/// Means over several single-run reports of the same strategy.
pub fn average_runs(runs: &[MetricReport]) -> Result<MetricReport, EvalError> {
    let first = runs.first().ok_or(EvalError::EmptyRecords)?;
    let per_run: Vec<RunMetrics> = runs.iter().flat_map(|r| r.per_run.iter().copied()).collect();
    let n = per_run.len() as f64;
    let mean = |f: fn(&RunMetrics) -> f64| per_run.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        strategy: first.strategy.clone(),
        mean_k: mean(|r| r.mean_k),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        n_runs: per_run.len(),
        per_run,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// First system right, second wrong.
    pub b: u64,
    /// First system wrong, second right.
    pub c: u64,
    /// Continuity-corrected chi-square.
    pub statistic: f64,
    pub p_value: f64,
    /// Whether significance came from the exact binomial test.
    pub exact: bool,
    pub significant: bool,
}

fn binomial_two_sided(b: u64, c: u64) -> f64 {
    let n = b + c;
    let lo = b.min(c);
    // P(X <= lo) for X ~ Bin(n, 1/2), in log space to stay finite for large n
    let mut log_coef = 0.0f64;
    let mut tail = 0.0;
    for i in 0..=lo {
        if i > 0 {
            log_coef += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (log_coef - n as f64 * std::f64::consts::LN_2).exp();
    }
    (2.0 * tail).min(1.0)
}

pub fn mcnemar_counts(b: u64, c: u64) -> McNemarResult {
    let n = b + c;
    if n == 0 {
        return McNemarResult { b, c, statistic: 0.0, p_value: 1.0, exact: false, significant: false };
    }
    let d = (b as f64 - c as f64).abs() - 1.0;
    let statistic = d * d / n as f64;
    if n < EXACT_BELOW {
        let p_value = binomial_two_sided(b, c);
        McNemarResult { b, c, statistic, p_value, exact: true, significant: p_value < 0.05 }
    } else {
        McNemarResult {
            b,
            c,
            statistic,
            p_value: libm::erfc((statistic / 2.0).sqrt()),
            exact: false,
            significant: statistic > CHI2_CRITICAL_95,
        }
    }
}

/// Paired test on per-instance correctness of two runs over the same ids.
pub fn mcnemar(a: &[PredictionRecord], b: &[PredictionRecord]) -> Result<McNemarResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::IdMismatch(format!("{} vs {} records", a.len(), b.len())));
    }
    let other: HashMap<&str, &PredictionRecord> = b.iter().map(|r| (r.instance_id.as_str(), r)).collect();
    if other.len() != b.len() {
        return Err(EvalError::IdMismatch("duplicate instance id".into()));
    }
    let (mut nb, mut nc) = (0, 0);
    for r in a {
        let s = other.get(r.instance_id.as_str()).ok_or_else(|| EvalError::IdMismatch(r.instance_id.clone()))?;
        match (r.is_correct(), s.is_correct()) {
            (true, false) => nb += 1,
            (false, true) => nc += 1,
            _ => {}
        }
    }
    Ok(mcnemar_counts(nb, nc))
}

/// One point of a plotted curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub mean: f64,
    pub stddev: f64,
}

impl CurvePoint {
    /// Mean and sample standard deviation of `values`.
    pub fn summarize(x: f64, values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { x, mean, stddev }
    }
}

/// Fixed-k macro-F1 for k = 0..M on `test`.
pub fn sensitivity_sweep(ctx: &IclContext, test: &[LabeledInstance]) -> Result<Vec<CurvePoint>, EvalError> {
    (0..=ctx.m)
        .map(|k| {
            let strategy = if k == 0 { Strategy::ZeroShot } else { Strategy::Ficl };
            let records = run_fixed_k(ctx, test, k, strategy);
            Ok(CurvePoint::summarize(k as f64, &[macro_metrics(&records, &ctx.task)?.f1]))
        })
        .collect()
}

/// Runs `score(fraction, seed)` for every fraction and seed and summarizes
/// each fraction. The closure performs subsample, ground truth, training and
/// evaluation and returns a macro-F1.
pub fn scaling_sweep<F>(fractions: &[f64], seeds: &[u64], mut score: F) -> Result<Vec<CurvePoint>, EvalError>
where
    F: FnMut(f64, u64) -> Result<f64, EvalError>,
{
    if seeds.is_empty() {
        return Err(EvalError::InvalidArgument("at least one seed is required".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(EvalError::InvalidArgument(format!("fraction {f} outside (0, 1]")));
    }
    fractions
        .iter()
        .map(|&f| {
            let values = seeds.iter().map(|&s| score(f, s)).collect::<Result<Vec<_>, _>>()?;
            Ok(CurvePoint::summarize(f, &values))
        })
        .collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("x,mean,stddev\n");
    for p in points {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.x, p.mean, p.stddev);
    }
    s
}

/// Aligned text table: strategy, k, Prec, Rec, F1.
pub fn render_table(backend: &str, reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.strategy.len()).max().unwrap_or(0).max(8);
    let mut s = String::new();
    let _ = writeln!(s, "backend: {backend}");
    let _ = writeln!(s, "{:<width$}  {:>5}  {:>6}  {:>6}  {:>6}", "strategy", "k", "Prec", "Rec", "F1");
    for r in reports {
        let _ = writeln!(s, "{:<width$}  {:>5.2}  {:>6.4}  {:>6.4}  {:>6.4}", r.strategy, r.mean_k, r.precision, r.recall, r.f1);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn task2() -> TaskConfig {
        let mut verbaliser = BTreeMap::new();
        verbaliser.insert("pos".to_string(), vec!["positive".to_string()]);
        verbaliser.insert("neg".to_string(), vec!["negative".to_string()]);
        TaskConfig {
            name: "t".into(),
            classes: vec!["pos".into(), "neg".into()],
            instruction: String::new(),
            verbaliser,
            pair_separator: None,
        }
    }

    fn rec(id: usize, gold: &str, pred: &str, k: usize) -> PredictionRecord {
        PredictionRecord {
            instance_id: format!("i{id:03}"),
            strategy: Strategy::Ficl,
            used_k: k,
            predicted_class: Some(pred.into()),
            gold: Some(gold.into()),
            posterior: None,
            correct: Some(gold == pred),
            error: None,
        }
    }

    fn confusion(tp: usize, fp: usize, fneg: usize, tn: usize) -> Vec<PredictionRecord> {
        let mut v = Vec::new();
        let mut push = |n: usize, g: &str, p: &str| {
            for _ in 0..n {
                let id = v.len();
                v.push(rec(id, g, p, 3));
            }
        };
        push(tp, "pos", "pos");
        push(fp, "neg", "pos");
        push(fneg, "pos", "neg");
        push(tn, "neg", "neg");
        v
    }

    #[test]
    fn perfect_and_hand_computed_metrics() {
        let m = macro_metrics(&confusion(5, 0, 0, 5), &task2()).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        let m = macro_metrics(&confusion(3, 1, 2, 4), &task2()).unwrap();
        // pos: P = 3/4, R = 3/5; neg: P = 4/6, R = 4/5
        let (pp, rp) = (0.75, 0.6);
        let (pn, rn) = (4.0 / 6.0, 0.8);
        let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
        assert!((m.precision - (pp + pn) / 2.0).abs() < 1e-12);
        assert!((m.recall - (rp + rn) / 2.0).abs() < 1e-12);
        assert!((m.f1 - (f(pp, rp) + f(pn, rn)) / 2.0).abs() < 1e-12);
        assert_eq!(m.mean_k, 3.0);
        assert!(matches!(macro_metrics(&[], &task2()), Err(EvalError::EmptyRecords)));
    }

    #[test]
    fn absent_class_counts_zero() {
        let m = macro_metrics(&confusion(4, 0, 0, 0), &task2()).unwrap();
        assert_eq!(m.f1, 0.5);
    }

    #[test]
    fn failed_records_are_wrong() {
        let mut v = confusion(2, 0, 0, 2);
        v[0].predicted_class = None;
        v[0].correct = Some(false);
        v[0].error = Some("timeout".into());
        let m = macro_metrics(&v, &task2()).unwrap();
        assert!(m.f1 < 1.0);
    }

    #[test]
    fn mcnemar_reference_values() {
        let r = mcnemar_counts(15, 3);
        assert!((r.statistic - 121.0 / 18.0).abs() < 1e-9);
        assert!(r.significant);
        let r = mcnemar_counts(5, 5);
        assert!((r.statistic - 0.1).abs() < 1e-12);
        assert!(!r.significant);
        let r = mcnemar_counts(0, 0);
        assert_eq!(r.statistic, 0.0);
        assert!(!r.significant);
        // large-sample regime uses the chi-square threshold
        let r = mcnemar_counts(40, 20);
        assert!(!r.exact);
        assert!((r.statistic - 361.0 / 60.0).abs() < 1e-12);
        assert!(r.significant);
        assert!((r.p_value - 0.01418).abs() < 1e-4);
    }

    #[test]
    fn exact_binomial_tail() {
        // 2 * (C(18,0) + C(18,1) + C(18,2) + C(18,3)) / 2^18
        let want = 2.0 * (1.0 + 18.0 + 153.0 + 816.0) / 262_144.0;
        assert!((mcnemar_counts(15, 3).p_value - want).abs() < 1e-12);
        assert_eq!(mcnemar_counts(4, 4).p_value, 1.0);
    }

    #[test]
    fn mcnemar_pairs_by_id() {
        let a = confusion(3, 1, 2, 4);
        let mut b = a.clone();
        b.reverse();
        let r = mcnemar(&a, &b).unwrap();
        assert_eq!((r.b, r.c), (0, 0));
        b.pop();
        assert!(mcnemar(&a, &b).is_err());
    }

    #[test]
    fn averaging_and_rendering() {
        let a = macro_metrics(&confusion(5, 0, 0, 5), &task2()).unwrap();
        let b = macro_metrics(&confusion(3, 1, 2, 4), &task2()).unwrap();
        let avg = average_runs(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(avg.n_runs, 2);
        assert!((avg.f1 - (a.f1 + b.f1) / 2.0).abs() < 1e-12);
        let table = render_table("mock:seed=1", &[avg]);
        assert!(table.lines().nth(1).unwrap().contains("Prec"));
        assert!(table.contains("ficl"));
        let csv = curve_csv(&[CurvePoint::summarize(0.5, &[0.8, 0.9])]);
        assert!(csv.starts_with("x,mean,stddev\n0.5,0.850000,0.070711"));
    }

    #[test]
    fn scaling_sweep_shapes() {
        let pts = scaling_sweep(&[0.1, 0.3, 0.5, 1.0], &[1, 2], |f, s| Ok(f + s as f64)).unwrap();
        assert_eq!(pts.len(), 4);
        assert!((pts[3].mean - 2.5).abs() < 1e-12);
        assert!(scaling_sweep(&[0.0], &[1], |_, _| Ok(0.0)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn metrics_permutation_invariant_and_bounded(pairs in proptest::collection::vec((0usize..2, 0usize..2), 1..60), seed in any::<u64>()) {
                let names = ["pos", "neg"];
                let recs: Vec<_> = pairs.iter().enumerate().map(|(i, &(g, p))| rec(i, names[g], names[p], i % 11)).collect();
                let mut shuffled = recs.clone();
                use rand::{seq::SliceRandom, SeedableRng};
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let a = macro_metrics(&recs, &task2()).unwrap();
                let b = macro_metrics(&shuffled, &task2()).unwrap();
                prop_assert!((a.f1 - b.f1).abs() < 1e-12 && (a.precision - b.precision).abs() < 1e-12);
                for v in [a.precision, a.recall, a.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert!((0.0..=10.0).contains(&a.mean_k));
            }

            #[test]
            fn mcnemar_symmetric(b in 0u64..200, c in 0u64..200) {
                let x = mcnemar_counts(b, c);
                let y = mcnemar_counts(c, b);
                prop_assert_eq!(x.statistic, y.statistic);
                prop_assert_eq!(x.significant, y.significant);
            }

            #[test]
            fn average_is_arithmetic_mean(fs in proptest::collection::vec(0.0f64..1.0, 1..8)) {
                let runs: Vec<MetricReport> = fs.iter().map(|&f| MetricReport {
                    strategy: "s".into(), mean_k: 1.0, precision: f, recall: f, f1: f, n_runs: 1,
                    per_run: vec![RunMetrics { precision: f, recall: f, f1: f, mean_k: 1.0 }],
                }).collect();
                let avg = average_runs(&runs).unwrap();
                prop_assert!((avg.f1 - fs.iter().sum::<f64>() / fs.len() as f64).abs() <= 1e-12);
            }
        }
    }
}
