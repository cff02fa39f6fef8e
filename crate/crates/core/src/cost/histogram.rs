use std::collections::BTreeMap;

use serde::Serialize;

use crate::policy::{CompareOp, ObjectCondition, Predicate};
use crate::value::{Interval, Value, ValueTag};
use std::ops::Bound;

pub const DEFAULT_BUCKETS: usize = 64;

#[derive(Clone, Debug, Serialize)]
pub struct Bucket {
    pub lo: Value,
    pub hi: Value,
    pub count: usize,
    pub distinct: usize,
}

/// Equi-depth histogram. Runs of equal values never straddle a bucket
/// boundary, so a heavy hitter gets its own bucket.
#[derive(Clone, Debug, Serialize)]
pub struct Histogram {
    pub tag: ValueTag,
    pub buckets: Vec<Bucket>,
    pub total: usize,
}

fn key_range(iv: &Interval) -> (f64, bool, f64, bool) {
    // (lo, lo_inclusive, hi, hi_inclusive)
    let (lo, li) = match &iv.lo {
        Bound::Included(v) => (v.key().unwrap_or(f64::NEG_INFINITY), true),
        Bound::Excluded(v) => (v.key().unwrap_or(f64::NEG_INFINITY), false),
        Bound::Unbounded => (f64::NEG_INFINITY, true),
    };
    let (hi, hi_inc) = match &iv.hi {
        Bound::Included(v) => (v.key().unwrap_or(f64::INFINITY), true),
        Bound::Excluded(v) => (v.key().unwrap_or(f64::INFINITY), false),
        Bound::Unbounded => (f64::INFINITY, true),
    };
    (lo, li, hi, hi_inc)
}

impl Histogram {
    pub fn build(mut values: Vec<Value>, buckets: usize) -> Option<Histogram> {
        let tag = values.first()?.tag();
        values.sort_unstable();
        let n = values.len();
        let depth = n.div_ceil(buckets.max(1)).max(1);
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let mut end = (i + depth).min(n) - 1;
            while end + 1 < n && values[end + 1] == values[end] {
                end += 1;
            }
            let mut distinct = 1;
            for w in values[i..=end].windows(2) {
                if w[0] != w[1] {
                    distinct += 1;
                }
            }
            out.push(Bucket { lo: values[i].clone(), hi: values[end].clone(), count: end - i + 1, distinct });
            i = end + 1;
        }
        Some(Histogram { tag, buckets: out, total: n })
    }

    pub fn max_bucket_count(&self) -> usize {
        self.buckets.iter().map(|b| b.count).max().unwrap_or(0)
    }

    /// Estimated number of rows whose value lies in `iv`.
    pub fn estimate(&self, iv: &Interval) -> f64 {
        if iv.is_empty() {
            return 0.0;
        }
        if self.tag == ValueTag::Text {
            return self.estimate_text(iv);
        }
        let (a, ai, b, bi) = key_range(iv);
        let discrete = self.tag.is_discrete();
        let mut est = 0.0;
        for bk in &self.buckets {
            let lk = bk.lo.key().unwrap_or(0.0);
            let hk = bk.hi.key().unwrap_or(0.0);
            let frac = if discrete {
                // Discrete intervals are normalized to inclusive bounds.
                let lo = a.max(lk);
                let hi = b.min(hk);
                if hi < lo {
                    0.0
                } else {
                    (hi - lo + 1.0) / (hk - lk + 1.0)
                }
            } else if hk == lk {
                let above = if ai { lk >= a } else { lk > a };
                let below = if bi { lk <= b } else { lk < b };
                if above && below {
                    1.0
                } else {
                    0.0
                }
            } else {
                ((b.min(hk) - a.max(lk)) / (hk - lk)).clamp(0.0, 1.0)
            };
            est += bk.count as f64 * frac;
        }
        est
    }

    fn estimate_text(&self, iv: &Interval) -> f64 {
        let mut est = 0.0;
        for bk in &self.buckets {
            let span = Interval::closed(bk.lo.clone(), bk.hi.clone());
            if iv.contains(&span) {
                est += bk.count as f64;
            } else if !iv.is_disjoint(&span) {
                let share = if iv.as_point().is_some() { 1.0 / bk.distinct as f64 } else { 0.5 };
                est += bk.count as f64 * share;
            }
        }
        est
    }
}

/// Per-relation statistics used for every selectivity estimate.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SelectivityEstimator {
    pub row_count: usize,
    pub histograms: BTreeMap<String, Histogram>,
}

impl SelectivityEstimator {
    pub fn new(row_count: usize) -> SelectivityEstimator {
        SelectivityEstimator { row_count, histograms: BTreeMap::new() }
    }

    pub fn add_column(&mut self, attr: &str, values: Vec<Value>) {
        if let Some(h) = Histogram::build(values, DEFAULT_BUCKETS) {
            self.histograms.insert(attr.to_string(), h);
        }
    }

    fn clamp(&self, x: f64) -> f64 {
        x.clamp(0.0, self.row_count as f64)
    }

    /// Estimated row count for `attr` in `iv`; with no histogram, the whole
    /// relation.
    pub fn estimate_interval(&self, attr: &str, iv: &Interval) -> f64 {
        match self.histograms.get(attr) {
            Some(h) => self.clamp(h.estimate(iv)),
            None => self.row_count as f64,
        }
    }

    pub fn estimate_condition(&self, c: &ObjectCondition) -> f64 {
        let r = self.row_count as f64;
        if !self.histograms.contains_key(&c.attr) {
            return r;
        }
        let points = |vals: &[Value]| {
            let mut vs: Vec<&Value> = vals.iter().collect();
            vs.sort();
            vs.dedup();
            vs.into_iter().map(|v| self.estimate_interval(&c.attr, &Interval::point(v.clone()))).sum::<f64>()
        };
        let est = match &c.pred {
            Predicate::Compare { op: CompareOp::Ne, value } => {
                r - self.estimate_interval(&c.attr, &Interval::point(value.clone()))
            }
            Predicate::In { negated: false, values } => points(values),
            Predicate::In { negated: true, values } => r - points(values),
            Predicate::Derived { .. } => r,
            _ => match c.implied_interval() {
                Some(iv) => self.estimate_interval(&c.attr, &iv),
                None => r,
            },
        };
        self.clamp(est)
    }
}
