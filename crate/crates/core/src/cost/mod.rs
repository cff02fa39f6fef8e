//! Cost model: unit constants, selectivity estimation and the formulas that
//! drive guard merging, guard selection and strategy choice.

mod histogram;
pub mod calibrate;

pub use histogram::{Bucket, Histogram, SelectivityEstimator, DEFAULT_BUCKETS};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guards::Guard;

/// Abstract unit costs. `alpha` is the expected fraction of a partition that
/// gets checked before a tuple is accepted or rejected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostConstants {
    pub c_e: f64,
    pub c_r: f64,
    pub alpha: f64,
    pub udf_inv: f64,
    pub udf_exec: f64,
    pub seq_ratio: f64,
}

impl Default for CostConstants {
    fn default() -> Self {
        CostConstants { c_e: 1.0, c_r: 9.0, alpha: 1.0, udf_inv: 108.0, udf_exec: 0.1, seq_ratio: 10.0 }
    }
}

const KEYS: [&str; 6] = ["c_e", "c_r", "alpha_default", "udf_inv", "udf_exec", "seq_ratio"];

impl CostConstants {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in KEYS.iter().zip(self.values()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{k} must be a positive number, got {v}")));
            }
        }
        Ok(())
    }

    fn values(&self) -> [f64; 6] {
        [self.c_e, self.c_r, self.alpha, self.udf_inv, self.udf_exec, self.seq_ratio]
    }

    /// Parses a `key=value` calibration file. Missing keys keep defaults.
    pub fn parse(text: &str) -> Result<CostConstants> {
        let mut k = CostConstants::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let v: f64 = val
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("line {}: `{}` is not a number", n + 1, val.trim())))?;
            match key.trim() {
                "c_e" => k.c_e = v,
                "c_r" => k.c_r = v,
                "alpha_default" | "alpha" => k.alpha = v,
                "udf_inv" => k.udf_inv = v,
                "udf_exec" => k.udf_exec = v,
                "seq_ratio" => k.seq_ratio = v,
                other => return Err(Error::Config(format!("line {}: unknown key `{other}`", n + 1))),
            }
        }
        k.validate()?;
        Ok(k)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(self.values()) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Inline,
    Delta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LinearScan,
    IndexQuery,
    IndexGuards,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StrategyCosts {
    pub linear_scan: f64,
    pub index_query: f64,
    pub index_guards: f64,
    pub chosen: Strategy,
}

/// Expected cost of checking a partition against one tuple.
pub fn cost_policy_eval(partition_size: usize, k: &CostConstants) -> f64 {
    k.alpha * partition_size as f64 * k.c_e
}

/// Reading the guard's rows, then checking the partition on each.
pub fn cost_guarded_expression(guard_sel: f64, partition_size: usize, k: &CostConstants) -> f64 {
    guard_sel * (k.c_r + cost_policy_eval(partition_size, k))
}

/// Evaluations saved by the guard: the partition no longer runs on the rows
/// the guard filters out.
pub fn guard_benefit(guard_sel: f64, partition_size: usize, row_count: usize, k: &CostConstants) -> f64 {
    k.c_e * partition_size as f64 * (row_count as f64 - guard_sel)
}

pub fn guard_utility(benefit: f64, guard_sel: f64, k: &CostConstants) -> f64 {
    let read = guard_sel * k.c_r;
    if read > 0.0 {
        benefit / read
    } else if benefit > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

pub fn ge_total_cost<'a, I>(guards: I, k: &CostConstants) -> f64
where
    I: IntoIterator<Item = (f64, usize)>,
{
    guards.into_iter().map(|(sel, n)| cost_guarded_expression(sel, n, k)).sum()
}

/// Merge threshold: overlap must exceed c_e / (c_r + c_e) of the union.
pub fn merge_threshold(k: &CostConstants) -> f64 {
    k.c_e / (k.c_r + k.c_e)
}

/// Decides whether two guards on the same attribute should become one. The
/// merged guard is the hull of both. Disjoint guards never merge.
pub fn should_merge(x: &Guard, y: &Guard, est: &SelectivityEstimator, k: &CostConstants) -> Result<Option<Guard>> {
    if x.attr != y.attr {
        return Err(Error::ContractViolation(format!("cannot merge guards on `{}` and `{}`", x.attr, y.attr)));
    }
    let inter = x.interval.intersect(&y.interval);
    if inter.is_empty() {
        return Ok(None);
    }
    let hull = x.interval.hull(&y.interval);
    let s_u = est.estimate_interval(&x.attr, &hull);
    let s_i = est.estimate_interval(&x.attr, &inter);
    let merged = Guard { attr: x.attr.clone(), interval: hull };
    if s_u <= 0.0 || s_i / s_u > merge_threshold(k) {
        Ok(Some(merged))
    } else {
        Ok(None)
    }
}

/// Picks how to read the relation for the policy CTE. `query_sel` is the
/// estimated cardinality of the best indexed query predicate, if any.
pub fn strategy_costs(query_sel: Option<f64>, guard_sels: &[f64], row_count: usize, k: &CostConstants) -> StrategyCosts {
    let index_guards: f64 = guard_sels.iter().map(|s| s * k.c_r).sum();
    let index_query = query_sel.map_or(f64::INFINITY, |s| s * k.c_r);
    let linear_scan = row_count as f64 * k.c_r / k.seq_ratio;
    let (best, best_cost) =
        if index_query < index_guards { (Strategy::IndexQuery, index_query) } else { (Strategy::IndexGuards, index_guards) };
    let chosen = if linear_scan < best_cost { Strategy::LinearScan } else { best };
    StrategyCosts { linear_scan, index_query, index_guards, chosen }
}

/// Per-tuple UDF versus inline disjunction for one partition.
pub fn choose_inline_or_delta(partition_size: usize, k: &CostConstants) -> ExecMode {
    let n = partition_size as f64;
    if k.udf_inv + k.udf_exec * n < k.alpha * n * k.c_e {
        ExecMode::Delta
    } else {
        ExecMode::Inline
    }
}
