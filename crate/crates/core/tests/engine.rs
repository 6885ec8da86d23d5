mod common;

use common::{fixture, item, macro_f1, other, random_fixture, Fixture, Item};

use aicl::engine::{
    grid_search_ficl, mean_used_k, read_predictions, run_aicl, run_aicl_star, run_ficl, run_fixed_k, run_zero_shot, write_predictions,
    GridSearchResult, Strategy,
};
use aicl::eval::{macro_metrics, render_table, MetricReport};
use aicl::predictor::{feature_dim, Head, Heuristic, KPredictorModel, Variant};

const M: usize = 4;

fn pool() -> Vec<Item> {
    (0..6)
        .map(|i| {
            let id: &'static str = Box::leak(format!("p{i}").into_boxed_str());
            item(id, if i % 2 == 0 { "positive" } else { "negative" }, 0, &[], &[1.0, i as f32 * 0.1 + 0.05])
        })
        .collect()
}

fn small(queries: Vec<Item>) -> Fixture {
    fixture(M, &pool(), &queries)
}

#[test]
fn zero_shot_prompt_has_one_input_block() {
    let f = small(vec![item("q", "positive", 0, &[], &[1.0, 0.3])]);
    let ctx = f.ctx();
    let nb = ctx.neighborhood(&f.queries[0]).unwrap();
    let (_, prompt) = ctx.render(&ctx.plan(&f.queries[0], &nb, 0)).unwrap();
    assert_eq!(prompt.lines().filter(|l| l.starts_with("Input:")).count(), 1);
}

#[test]
fn zero_shot_is_correct_when_k_star_is_zero() {
    let f = small(vec![item("easy", "negative", 0, &[], &[1.0, 0.3]), item("hard", "negative", 2, &[], &[1.0, 0.2])]);
    let recs = run_zero_shot(&f.ctx(), &f.queries);
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r.used_k == 0 && r.strategy == Strategy::ZeroShot));
    assert_eq!(recs[0].instance_id, "easy");
    assert!(recs[0].is_correct());
    assert!(!recs[1].is_correct());
    assert_eq!(recs[1].predicted_class.as_deref(), Some("positive"));
}

#[test]
fn empty_test_list_gives_empty_output() {
    let f = small(vec![]);
    let ctx = f.ctx();
    assert!(run_zero_shot(&ctx, &[]).is_empty());
    assert!(run_ficl(&ctx, &[], 2).unwrap().is_empty());
    assert!(run_aicl_star(&ctx, &[]).is_empty());
}

/// Validation set where k = 3 is the only shot count answering most
/// instances correctly.
fn k3_world() -> Fixture {
    let mut queries = Vec::new();
    for i in 0..12 {
        let id: &'static str = Box::leak(format!("v{i:02}").into_boxed_str());
        let label = if i % 2 == 0 { "positive" } else { "negative" };
        let (k_star, flips): (usize, Vec<usize>) = match i % 4 {
            0 | 1 => (3, vec![4]),
            2 => (2, vec![4]),
            _ => (1, vec![]),
        };
        queries.push(item(id, label, k_star, &flips, &[1.0, 0.01 * i as f32]));
    }
    small(queries)
}

#[test]
fn grid_search_finds_engineered_best_k() {
    let f = k3_world();
    let grid = grid_search_ficl(&f.ctx(), &f.queries).unwrap();
    assert_eq!(grid.per_k_f1.len(), M);
    let classes = ["positive", "negative"];
    let gold: Vec<&str> = f.queries.iter().map(|q| q.label.as_str()).collect();
    let expected: Vec<f64> = (1..=M)
        .map(|k| {
            let pred: Vec<&str> = f.queries.iter().map(|q| if f.correct(&q.id, k) { q.label.as_str() } else { other(&q.label) }).collect();
            macro_f1(&gold, &pred, &classes)
        })
        .collect();
    for (a, b) in grid.per_k_f1.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{:?} vs {expected:?}", grid.per_k_f1);
    }
    assert_eq!(grid.best_k, 3);
}

#[test]
fn grid_ties_go_to_smaller_k() {
    assert_eq!(GridSearchResult::from_curve(vec![0.5, 0.8, 0.8, 0.1]).best_k, 2);
    assert_eq!(GridSearchResult::from_curve(vec![0.7; 10]).best_k, 1);
}

#[test]
fn ficl_with_single_instance_pool_uses_it() {
    let pool = [item("only", "positive", 0, &[], &[1.0, 0.0])];
    let f = fixture(1, &pool, &[item("q", "negative", 0, &[], &[0.0, 1.0])]);
    let ctx = f.ctx();
    let nb = ctx.neighborhood(&f.queries[0]).unwrap();
    let plan = ctx.plan(&f.queries[0], &nb, 1);
    assert_eq!(plan.demonstrations.len(), 1);
    assert_eq!(plan.demonstrations[0].text, "text of only");
    let recs = run_ficl(&ctx, &f.queries, 1).unwrap();
    assert_eq!(recs[0].used_k, 1);
}

#[test]
fn ficl_used_k_is_constant_and_k_out_of_range_is_rejected() {
    let f = k3_world();
    let ctx = f.ctx();
    for k in 1..=M {
        assert!(run_ficl(&ctx, &f.queries, k).unwrap().iter().all(|r| r.used_k == k && r.strategy == Strategy::Ficl));
    }
    assert!(run_ficl(&ctx, &f.queries, 0).is_err());
    assert!(run_ficl(&ctx, &f.queries, M + 1).is_err());
}

#[test]
fn fixed_k_zero_matches_zero_shot() {
    let f = random_fixture(3, M, 30, 40, 6);
    let ctx = f.ctx();
    let zero = run_zero_shot(&ctx, &f.queries);
    let fixed = run_fixed_k(&ctx, &f.queries, 0, Strategy::Ficl);
    assert_eq!(zero.len(), fixed.len());
    for (mut a, b) in zero.into_iter().zip(fixed) {
        a.strategy = Strategy::Ficl;
        assert_eq!(a, b);
    }
}

/// Model answering with a constant logit vector.
fn constant_model(input_dim: usize, logits: Vec<f64>) -> KPredictorModel {
    let mut model = KPredictorModel::new(input_dim, 1, logits.len(), Head::MultiLabel, 0);
    model.w1.iter_mut().for_each(|w| *w = 0.0);
    model.w2.iter_mut().for_each(|w| *w = 0.0);
    model.b2 = logits;
    model
}

#[test]
fn predictor_peaking_at_zero_answers_zero_shot() {
    let f = k3_world();
    let ctx = f.ctx();
    let mut logits = vec![-5.0; M + 1];
    logits[0] = 5.0;
    let model = constant_model(feature_dim(2, M, Variant::E), logits);
    let run = run_aicl(&ctx, &f.queries, &model, Variant::E, Heuristic::MaxConfidence).unwrap();
    assert!(run.records.iter().all(|r| r.used_k == 0 && r.strategy == Strategy::AiclE));
    assert_eq!(run.mean_k, 0.0);
    let zero = run_zero_shot(&ctx, &f.queries);
    for (a, z) in run.records.iter().zip(&zero) {
        assert_eq!(a.predicted_class, z.predicted_class);
    }
}

#[test]
fn aicl_rejects_mismatched_model() {
    let f = k3_world();
    let model = constant_model(feature_dim(2, M, Variant::E), vec![0.0; M + 1]);
    assert!(run_aicl(&f.ctx(), &f.queries, &model, Variant::EN, Heuristic::MaxConfidence).is_err());
}

#[test]
fn mean_used_k_prints_with_two_decimals() {
    let report =
        MetricReport { strategy: "aicl_en".into(), mean_k: 8.2345, precision: 0.9, recall: 0.9, f1: 0.9, n_runs: 1, per_run: vec![] };
    assert!(render_table("mock", &[report]).contains(" 8.23 "));
}

#[test]
fn perfect_predictor_picks_smallest_correct_k() {
    // Two well-separated clusters: the first is solved from one shot on,
    // the second from three shots on.
    let mut queries = Vec::new();
    for i in 0..8 {
        let id: &'static str = Box::leak(format!("c{i}").into_boxed_str());
        let (k_star, v) = if i < 4 { (1, [1.0, 0.05 * i as f32]) } else { (3, [0.05 * i as f32, 1.0]) };
        queries.push(item(id, if i % 2 == 0 { "positive" } else { "negative" }, k_star, &[], &v));
    }
    let f = small(queries);
    let mut model = KPredictorModel::new(2, 1, M + 1, Head::MultiLabel, 0);
    model.w1 = vec![100.0, -100.0];
    model.b1 = vec![0.0];
    // Logit for k is 10 where k is correct in the cluster the hidden unit
    // signals, minus a small per-k cost.
    let (ka, kb) = (1, 3);
    for k in 0..=M {
        let ta = if k >= ka { 1.0 } else { 0.0 };
        let tb = if k >= kb { 1.0 } else { 0.0 };
        model.b2[k] = 10.0 * (ta + tb - 1.0) - 0.01 * k as f64;
        model.w2[k] = 10.0 * (ta - tb);
    }
    let run = run_aicl(&f.ctx(), &f.queries, &model, Variant::E, Heuristic::MaxConfidence).unwrap();
    for r in &run.records {
        assert_eq!(r.used_k, f.world.get(&r.instance_id).unwrap().k_star, "{}", r.instance_id);
        assert!(r.is_correct());
    }
    assert_eq!(run.mean_k, 2.0);
    assert_eq!(mean_used_k(&run.records), 2.0);
}

#[test]
fn oracle_keeps_smallest_correct_k() {
    let f = small(vec![
        // correct at k in {2, 3} only
        item("a", "positive", 2, &[4], &[1.0, 0.3]),
        item("never", "negative", M + 1, &[], &[1.0, 0.2]),
    ]);
    let recs = run_aicl_star(&f.ctx(), &f.queries);
    assert_eq!(recs[0].used_k, 2);
    assert!(recs[0].is_correct());
    assert_eq!(recs[1].used_k, 0);
    assert_eq!(recs[1].correct, Some(false));
    assert!(recs.iter().all(|r| r.strategy == Strategy::AiclStar));
}

#[test]
fn oracle_dominates_every_fixed_k_and_aicl() {
    for seed in 0..6 {
        let f = random_fixture(seed, M, 40, 60, 5);
        let ctx = f.ctx();
        let star = macro_metrics(&run_aicl_star(&ctx, &f.queries), &f.task).unwrap().f1;
        for k in 0..=M {
            let fixed = macro_metrics(&run_fixed_k(&ctx, &f.queries, k, Strategy::Ficl), &f.task).unwrap().f1;
            assert!(star >= fixed, "seed {seed} k {k}: {star} < {fixed}");
        }
        let model = KPredictorModel::new(feature_dim(5, M, Variant::E), 8, M + 1, Head::MultiLabel, seed);
        let aicl = run_aicl(&ctx, &f.queries, &model, Variant::E, Heuristic::MaxConfidence).unwrap();
        assert!(aicl.mean_k >= 0.0 && aicl.mean_k <= M as f64);
        assert!(star >= macro_metrics(&aicl.records, &f.task).unwrap().f1);
    }
}

#[test]
fn rerun_makes_no_backend_calls() {
    let f = random_fixture(9, M, 30, 25, 4);
    let ctx = f.ctx();
    let model = KPredictorModel::new(feature_dim(4, M, Variant::EN), 8, M + 1, Head::MultiLabel, 1);
    let run_all = || {
        let mut out = run_zero_shot(&ctx, &f.queries);
        out.extend(run_ficl(&ctx, &f.queries, 2).unwrap());
        out.extend(run_aicl(&ctx, &f.queries, &model, Variant::EN, Heuristic::MaxConfidence).unwrap().records);
        out.extend(run_aicl_star(&ctx, &f.queries));
        out
    };
    let first = run_all();
    let calls = ctx.gateway.stats().backend_calls;
    assert!(calls > 0);
    let second = run_all();
    assert_eq!(ctx.gateway.stats().backend_calls, calls);
    assert_eq!(first, second);
}

#[test]
fn predictions_round_trip_sorted() {
    let f = random_fixture(4, M, 20, 15, 3);
    let recs = run_aicl_star(&f.ctx(), &f.queries);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    let mut shuffled = recs.clone();
    shuffled.reverse();
    write_predictions(&path, &shuffled).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), recs);
}
