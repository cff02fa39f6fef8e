use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sieve_core::bench::{self, Approach, BenchConfig};
use sieve_core::cache::RefreshStrategy;
use sieve_core::cost::calibrate::measure_alpha;
use sieve_core::cost::CostConstants;
use sieve_core::engine::{Engine, Schema};
use sieve_core::policy::{Action, GroupDirectory, ObjectCondition, Policy, PolicyId, QueryMetadata};
use sieve_core::rewrite::{rewrite_sql, DialectCapabilities};
use sieve_core::store::PolicyStore;
use sieve_core::value::{Value, ValueTag};
use sieve_core::workload::{self, QuerierSampler, Scale, Scenario, WorkloadConfig, WorkloadEvent};

fn steady(x: usize, y: usize, epochs: usize, seed: u64) -> WorkloadConfig {
    let mut cfg = WorkloadConfig::steady(Scenario::Attendance, Scale::Desk, x, y, seed);
    cfg.max_epochs = Some(epochs);
    cfg
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = workload::generate(&steady(10, 2, 20, 9)).unwrap();
    let b = workload::generate(&steady(10, 2, 20, 9)).unwrap();
    let c = workload::generate(&steady(10, 2, 20, 10)).unwrap();
    let text = |w: &workload::Workload| {
        let mut v = Vec::new();
        w.write_jsonl(&mut v).unwrap();
        v
    };
    assert_eq!(text(&a), text(&b));
    assert_ne!(text(&a), text(&c));
}

#[test]
fn seen_queries_come_from_the_replay_window() {
    for window_size in [1, 3, 10] {
        let mut cfg = steady(10, 5, 60, 3);
        cfg.window_size = window_size;
        let wl = workload::generate(&cfg).unwrap();
        let mut window: VecDeque<(String, String)> = VecDeque::new();
        let mut n = 0;
        for ev in &wl.events {
            if let WorkloadEvent::Query { querier, sql, seen, .. } = ev {
                let q = (querier.clone(), sql.clone());
                if *seen {
                    assert!(window.contains(&q), "replayed query outside the last {window_size}");
                }
                // Unseen and seen alternate.
                assert_eq!(*seen, n % 2 == 1);
                n += 1;
                window.push_back(q);
                if window.len() > window_size {
                    window.pop_front();
                }
            }
        }
        assert_eq!(n, 300);
    }
}

#[test]
fn epochs_follow_the_rhythm() {
    let mut cfg = WorkloadConfig::deletion(Scenario::Attendance, Scale::Desk, 10, 5, 2, 4);
    cfg.max_epochs = Some(25);
    let wl = workload::generate(&cfg).unwrap();
    let mut counts = (0, 0, 0);
    for ev in &wl.events {
        match ev {
            WorkloadEvent::InsertPolicy { .. } => counts.0 += 1,
            WorkloadEvent::Query { .. } => counts.1 += 1,
            WorkloadEvent::DeletePolicy { .. } => counts.2 += 1,
            WorkloadEvent::EpochEnd { .. } => {
                assert_eq!(counts, (10, 5, 2));
                counts = (0, 0, 0);
            }
        }
    }
    assert_eq!(wl.totals.epochs, 25);
    assert_eq!(wl.totals.deletions, 50);
}

fn frequencies(alpha: f64, n: usize, draws: usize) -> (Vec<i64>, Vec<f64>) {
    let queriers: Vec<i64> = (0..n as i64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = QuerierSampler::new(&queriers, alpha, &mut rng);
    let mut hits = vec![0usize; n];
    for _ in 0..draws {
        hits[s.sample(&mut rng) as usize] += 1;
    }
    let ranked = s.ranked().to_vec();
    let freq = ranked.iter().map(|q| hits[*q as usize] as f64 / draws as f64).collect();
    (ranked, freq)
}

#[test]
fn zipf_sampler_matches_pmf() {
    let n = 20;
    for alpha in [0.5, 1.0, 1.5] {
        let (_, freq) = frequencies(alpha, n, 200_000);
        let h: f64 = (1..=n).map(|r| (r as f64).powf(-alpha)).sum();
        for (r, f) in freq.iter().enumerate() {
            let p = ((r + 1) as f64).powf(-alpha) / h;
            // Five binomial standard deviations.
            let tol = 5.0 * (p * (1.0 - p) / 200_000.0).sqrt();
            assert!((f - p).abs() < tol, "alpha {alpha} rank {}: {f} vs {p}", r + 1);
        }
    }
}

#[test]
fn zipf_zero_is_uniform() {
    let n = 25;
    let (ranked, freq) = frequencies(0.0, n, 250_000);
    let mut sorted = ranked.clone();
    sorted.sort();
    assert_eq!(sorted, (0..n as i64).collect::<Vec<_>>());
    let p = 1.0 / n as f64;
    let tol = 5.0 * (p * (1.0 - p) / 250_000.0).sqrt();
    assert!(freq.iter().all(|f| (f - p).abs() < tol), "{freq:?}");
}

/// Cache size and refresh strategy change cost, never answers.
#[test]
fn cache_is_transparent_to_results() {
    let mut cfg = WorkloadConfig::deletion(Scenario::Attendance, Scale::Desk, 10, 2, 1, 21);
    cfg.max_epochs = Some(40);
    let (wl, engine) = bench::prepare(&cfg, 700).unwrap();
    let mut digests = None;
    for pct in [5.0, 40.0, 100.0] {
        for strategy in [RefreshStrategy::B1, RefreshStrategy::B2, RefreshStrategy::O1, RefreshStrategy::O2] {
            let bc = BenchConfig { cache_size_pct: pct, strategy, ..BenchConfig::default() };
            let r = bench::run_workload(&engine, &wl.events, bc).unwrap();
            assert_eq!(r.verified_queries, 80);
            match &digests {
                None => digests = Some(r.result_digests),
                Some(d) => assert_eq!(d, &r.result_digests, "{pct}% {strategy:?}"),
            }
        }
    }
}

/// Baseline_P checks the querier's list in order on every tuple and stops at
/// the first allowing policy, so its counter is exactly that walk.
#[test]
fn baseline_p_counts_every_policy_check() {
    let cfg = steady(10, 1, 30, 8);
    let (wl, engine) = bench::prepare(&cfg, 900).unwrap();
    let mut store = PolicyStore::new(GroupDirectory::default());
    let ps = wl.campus.generate_policies(8);
    for p in ps.iter().take(600) {
        store.insert_policy(p.clone()).unwrap();
    }
    let qs = bench::sample_queries(&wl.campus, &ps[..600], 8, 2);
    let builder = bench::builder_for(&engine, CostConstants::default());
    let rows = bench::run_baselines(&engine, &store, &qs, &builder).unwrap();
    let tuples = engine.table(workload::RELATION).unwrap().tuples();
    let p_row = rows.iter().find(|r| r.approach == Approach::BaselineP).unwrap();
    for ((qm, _), evals) in qs.iter().zip(&p_row.per_query_policy_evals) {
        let list = store.fetch_policies(&qm.querier, &qm.purpose, workload::RELATION, 0);
        let expected = if list.is_empty() { 0.0 } else { measure_alpha(&list, &tuples).unwrap() * tuples.len() as f64 };
        assert_eq!(*evals as f64, expected.round(), "querier {}", qm.querier);
        assert_eq!(p_row.exec.rows_read_random, 0);
    }
    for r in &rows {
        assert_eq!(r.differing_queries, 0, "{:?}", r.approach);
    }
    let sieve = rows.iter().find(|r| r.approach == Approach::Sieve).unwrap();
    assert!(sieve.exec.policy_evals <= p_row.exec.policy_evals);
}

fn golden_engine() -> Engine {
    let mut e = Engine::new();
    let schema = Schema { columns: vec![("owner".into(), ValueTag::Int), ("a".into(), ValueTag::Int)] };
    e.create_table("r", schema, true).unwrap();
    e.insert_rows("r", (0..400).map(|i| vec![Value::Int(i % 8), Value::Int(i % 100)]).collect()).unwrap();
    e.create_index("r", "a").unwrap();
    e.analyze("r").unwrap();
    e
}

fn golden_policy(id: u64, owner: i64, lo: i64, hi: i64) -> Policy {
    Policy {
        id: PolicyId(id),
        relation: "r".into(),
        owner: Value::Int(owner),
        object_conditions: vec![
            ObjectCondition::eq("owner", Value::Int(owner)),
            ObjectCondition::between("a", Value::Int(lo), Value::Int(hi)),
        ],
        querier: "alice".into(),
        purpose: "audit".into(),
        action: Action::Allow,
        inserted_at: 0,
    }
}

#[test]
fn rewrite_golden() {
    let e = golden_engine();
    let k = CostConstants::default();
    let builder = bench::builder_for(&e, k);
    let mut store = PolicyStore::new(GroupDirectory::default());
    for p in [golden_policy(1, 1, 10, 20), golden_policy(2, 2, 12, 18), golden_policy(3, 3, 70, 75)] {
        store.insert_policy(p).unwrap();
    }
    let qm = QueryMetadata::new("alice", "audit");
    let ge = bench::build_fresh(&store, &builder, &qm, "r").unwrap();
    let ges = BTreeMap::from([("r".to_string(), Arc::new(ge))]);
    let sql = "SELECT * FROM r WHERE a < 50";
    let hinted = rewrite_sql(sql, &qm, &DialectCapabilities::hinted(), &ges, &e, &k).unwrap();
    assert_eq!(hinted.sql, GOLDEN_HINTED);
    let plain = rewrite_sql(sql, &qm, &DialectCapabilities::plain(), &ges, &e, &k).unwrap();
    assert_eq!(plain.sql, GOLDEN_PLAIN);
    let (rs, _) = e.execute(&hinted.plan).unwrap();
    // Owners 1 and 2 inside their ranges; owner 3's range is outside a < 50.
    let expected = (0..400).filter(|i| (i % 8 == 1 && (10..=20).contains(&(i % 100))) || (i % 8 == 2 && (12..=18).contains(&(i % 100)))).count();
    assert_eq!(rs.rows.len(), expected);
}

const GOLDEN_HINTED: &str = "/* sieve:enforced */ WITH rPol AS (SELECT * FROM r USE INDEX () WHERE (a BETWEEN 10 AND 20 AND ((owner = 1 AND a BETWEEN 10 AND 20) OR (owner = 2 AND a BETWEEN 12 AND 18))) OR (a BETWEEN 70 AND 75 AND ((owner = 3 AND a BETWEEN 70 AND 75)))) SELECT * FROM rPol AS r WHERE a < 50";
const GOLDEN_PLAIN: &str = "/* sieve:enforced */ WITH rPol AS (SELECT * FROM r WHERE (a BETWEEN 10 AND 20 AND ((owner = 1 AND a BETWEEN 10 AND 20) OR (owner = 2 AND a BETWEEN 12 AND 18))) OR (a BETWEEN 70 AND 75 AND ((owner = 3 AND a BETWEEN 70 AND 75)))) SELECT * FROM rPol AS r WHERE a < 50";
