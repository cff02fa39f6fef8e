//! Calibration of the unit costs by micro-benchmarks on the embedded engine.
//!
//! All costs are reported relative to one policy evaluation (`c_e = 1`).

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CostConstants;
use crate::cost::ExecMode;
use crate::engine::{Access, Engine, ExecStats, PolicyScan, Schema, TermPlan};
use crate::error::{Error, Result};
use crate::policy::{eval_object_conditions, Action, ObjectCondition, Policy, PolicyId, Tuple};
use crate::selection::GeBuilder;
use crate::store::GeKey;
use crate::value::{Interval, Value, ValueTag};

/// Fixed constants for reproducible runs and tests.
pub fn deterministic() -> CostConstants {
    CostConstants::default()
}

/// Mean number of policies evaluated per tuple, stopping at the first one
/// that allows it. A tuple no policy allows costs the whole list.
pub fn measure_alpha(policies: &[Policy], tuples: &[Tuple]) -> Result<f64> {
    if tuples.is_empty() || policies.is_empty() {
        return Err(Error::Calibration("alpha needs at least one policy and one tuple".into()));
    }
    let mut checked = 0usize;
    for t in tuples {
        for p in policies {
            checked += 1;
            if eval_object_conditions(&p.object_conditions, t)? {
                break;
            }
        }
    }
    Ok(checked as f64 / tuples.len() as f64)
}

/// `measure_alpha` as a fraction of the list length, the form the cost
/// formulas use.
pub fn measure_alpha_fraction(policies: &[Policy], tuples: &[Tuple]) -> Result<f64> {
    Ok(measure_alpha(policies, tuples)? / policies.len() as f64)
}

const ROWS: i64 = 20_000;
const OWNERS: i64 = 500;

fn bench_engine(seed: u64) -> Result<Engine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = Engine::new();
    let schema = Schema { columns: vec![("owner".into(), ValueTag::Int), ("k".into(), ValueTag::Int)] };
    e.create_table("calib", schema, true)?;
    let rows = (0..ROWS).map(|_| vec![Value::Int(rng.gen_range(0..OWNERS)), Value::Int(rng.gen_range(0..1000))]).collect();
    e.insert_rows("calib", rows)?;
    e.create_index("calib", "k")?;
    e.analyze("calib")?;
    Ok(e)
}

/// Policies owned by nobody in the table, so every check runs to the end.
fn dead_policies(n: usize) -> Vec<Arc<Policy>> {
    (0..n)
        .map(|i| {
            Arc::new(Policy {
                id: PolicyId(i as u64 + 1),
                relation: "calib".into(),
                owner: Value::Int(OWNERS + i as i64),
                object_conditions: vec![
                    ObjectCondition::eq("owner", Value::Int(OWNERS + i as i64)),
                    ObjectCondition::between("k", Value::Int(0), Value::Int(999)),
                ],
                querier: "calib".into(),
                purpose: "calib".into(),
                action: Action::Allow,
                inserted_at: 0,
            })
        })
        .collect()
}

fn time_scan(e: &Engine, access: Access, policies: Vec<Arc<Policy>>, mode: ExecMode) -> Result<(f64, ExecStats)> {
    let scan = PolicyScan {
        relation: "calib".into(),
        access,
        pushed: vec![],
        terms: vec![TermPlan { guard: None, policies, mode }],
    };
    let mut best = f64::INFINITY;
    let mut stats = ExecStats::default();
    for _ in 0..3 {
        let mut s = ExecStats::default();
        let t0 = Instant::now();
        e.run_policy_scan(&scan, &mut s)?;
        best = best.min(t0.elapsed().as_secs_f64());
        stats = s;
    }
    Ok((best, stats))
}

fn slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Calibration(format!("measured {name} is not positive ({v}); rerun on a quieter machine")))
    }
}

/// Measures the unit costs on this machine.
pub fn calibrate_measured(seed: u64) -> Result<CostConstants> {
    let e = bench_engine(seed)?;
    let rows = ROWS as f64;
    let (t_seq, _) = time_scan(&e, Access::FullScan, dead_policies(0), ExecMode::Inline)?;
    // Per-row cost as a function of partition size, inline and through Δ.
    let sizes = [8usize, 16, 32, 64];
    let mut inline_t = Vec::new();
    let mut delta_t = Vec::new();
    for &n in &sizes {
        inline_t.push(time_scan(&e, Access::FullScan, dead_policies(n), ExecMode::Inline)?.0 / rows);
        delta_t.push(time_scan(&e, Access::FullScan, dead_policies(n), ExecMode::Delta)?.0 / rows);
    }
    let xs: Vec<f64> = sizes.iter().map(|n| *n as f64).collect();
    let (_, per_eval) = slope(&xs, &inline_t);
    let per_eval = positive("c_e", per_eval)?;
    let (d0, d1) = slope(&xs, &delta_t);
    let (i0, _) = slope(&xs, &inline_t);
    let udf_inv = positive("udf_inv", (d0 - i0).max(per_eval * 1e-3) / per_eval)?;
    let udf_exec = positive("udf_exec", d1.max(per_eval * 1e-3) / per_eval)?;
    let ranges = vec![Interval::closed(Value::Int(0), Value::Int(999))];
    let (t_rand, st) = time_scan(&e, Access::Index { attr: "k".into(), ranges }, dead_policies(0), ExecMode::Inline)?;
    let per_rand = t_rand / st.rows_read_random.max(1) as f64;
    let per_seq = positive("sequential read", t_seq / rows)?;
    let probe = dead_policies(4);
    let tuples: Vec<Tuple> = e.table("calib")?.tuples().into_iter().take(2000).collect();
    let plain: Vec<Policy> = probe.iter().map(|p| (**p).clone()).collect();
    let alpha = measure_alpha_fraction(&plain, &tuples)?;
    let k = CostConstants {
        c_e: 1.0,
        c_r: positive("c_r", per_rand / per_eval)?,
        alpha,
        udf_inv,
        udf_exec,
        seq_ratio: positive("seq_ratio", per_rand / per_seq)?.max(1.0),
    };
    k.validate()?;
    Ok(k)
}

/// Wall time of one guard-generation operation (see `BuildStats::ops`) in
/// units of one policy evaluation.
pub fn calibrate_build_cost(builder: &GeBuilder, key: &GeKey, policies: &[Policy]) -> Result<f64> {
    let e = bench_engine(7)?;
    let (t_eval, st) = time_scan(&e, Access::FullScan, dead_policies(32), ExecMode::Inline)?;
    let per_eval = t_eval / st.policy_evals.max(1) as f64;
    let mut best = f64::INFINITY;
    let mut ops = 1;
    for _ in 0..3 {
        let t0 = Instant::now();
        let (_, s) = builder.build(key, policies.to_vec(), 0)?;
        best = best.min(t0.elapsed().as_secs_f64());
        ops = s.ops().max(1);
    }
    positive("c_build", best / ops as f64 / per_eval)
}
