//! Candidate guard generation: extract per-attribute ranges from policies,
//! then merge overlapping candidates when the cost model says it pays.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::cost::{should_merge, CostConstants, SelectivityEstimator};
use crate::error::Result;
use crate::policy::{CompareOp, ObjectCondition, Policy, PolicyId, Predicate, OWNER_ATTR};
use crate::value::Interval;

/// A range predicate on one indexed attribute.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Guard {
    pub attr: String,
    pub interval: Interval,
}

impl Guard {
    pub fn to_condition(&self) -> ObjectCondition {
        ObjectCondition::from_interval(&self.attr, &self.interval)
    }

    pub fn to_sql(&self) -> String {
        self.to_condition().to_sql(&self.attr)
    }

    pub fn cmp_identity(&self, other: &Guard) -> Ordering {
        self.attr.cmp(&other.attr).then_with(|| self.interval.cmp_bounds(&other.interval))
    }
}

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} in {}", self.attr, self.interval)
    }
}

impl Serialize for Guard {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_condition().serialize(s)
    }
}

/// Which attributes of each relation have an index. The owner attribute is
/// always treated as indexed.
#[derive(Clone, Debug, Default)]
pub struct IndexCatalog {
    indexed: BTreeMap<String, BTreeSet<String>>,
}

impl IndexCatalog {
    pub fn new() -> IndexCatalog {
        IndexCatalog::default()
    }

    pub fn add(&mut self, relation: &str, attr: &str) {
        self.indexed.entry(relation.to_string()).or_default().insert(attr.to_string());
    }

    pub fn is_indexed(&self, relation: &str, attr: &str) -> bool {
        attr == OWNER_ATTR || self.indexed.get(relation).is_some_and(|s| s.contains(attr))
    }

    pub fn attrs(&self, relation: &str) -> BTreeSet<String> {
        let mut s = self.indexed.get(relation).cloned().unwrap_or_default();
        s.insert(OWNER_ATTR.to_string());
        s
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CandidateGuard {
    pub guard: Guard,
    pub covered: BTreeSet<PolicyId>,
    /// Pairs of intervals that were merged into this candidate.
    #[serde(skip)]
    pub merged_from: Vec<(Interval, Interval)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GenerationStats {
    pub candidates: usize,
    pub merge_checks: usize,
}

/// The interval a policy implies on `attr`: the intersection of its constant
/// conditions there. None when it has none, or when they contradict (except
/// for the owner, where the owner equality alone is used).
pub fn policy_attr_interval(p: &Policy, attr: &str) -> Option<Interval> {
    let mut acc: Option<Interval> = None;
    for c in p.object_conditions.iter().filter(|c| c.attr == attr) {
        if let Some(iv) = c.implied_interval() {
            acc = Some(match acc {
                Some(a) => a.intersect(&iv),
                None => iv,
            });
        }
    }
    match acc {
        Some(iv) if !iv.is_empty() => Some(iv),
        _ if attr == OWNER_ATTR => p.object_conditions.iter().find_map(|c| match &c.pred {
            Predicate::Compare { op: CompareOp::Eq, value } if c.attr == OWNER_ATTR => Some(Interval::point(value.clone())),
            _ => None,
        }),
        _ => None,
    }
}

fn sort_candidates(v: &mut [CandidateGuard]) {
    v.sort_by(|a, b| {
        a.guard
            .interval
            .cmp_bounds(&b.guard.interval)
            .then_with(|| a.covered.first().cmp(&b.covered.first()))
    });
}

/// Candidates per indexed attribute, sorted by (lower bound, upper bound).
/// Policies implying the same interval share one candidate.
pub fn collect_candidates(
    policies: &[Policy],
    catalog: &IndexCatalog,
    relation: &str,
) -> BTreeMap<String, Vec<CandidateGuard>> {
    let mut out = BTreeMap::new();
    for attr in catalog.attrs(relation) {
        let mut by_interval: Vec<(Interval, BTreeSet<PolicyId>)> = Vec::new();
        let mut index: std::collections::HashMap<Interval, usize> = std::collections::HashMap::new();
        for p in policies.iter().filter(|p| p.relation == relation) {
            if let Some(iv) = policy_attr_interval(p, &attr) {
                match index.get(&iv) {
                    Some(&i) => {
                        by_interval[i].1.insert(p.id);
                    }
                    None => {
                        index.insert(iv.clone(), by_interval.len());
                        by_interval.push((iv, BTreeSet::from([p.id])));
                    }
                }
            }
        }
        if by_interval.is_empty() {
            continue;
        }
        let mut cands: Vec<CandidateGuard> = by_interval
            .into_iter()
            .map(|(interval, covered)| CandidateGuard {
                guard: Guard { attr: attr.clone(), interval },
                covered,
                merged_from: Vec::new(),
            })
            .collect();
        sort_candidates(&mut cands);
        out.insert(attr, cands);
    }
    out
}

fn absorb(into: &mut CandidateGuard, merged: Guard, other: CandidateGuard) {
    into.merged_from.push((into.guard.interval.clone(), other.guard.interval.clone()));
    into.merged_from.extend(other.merged_from);
    into.covered.extend(other.covered);
    into.guard = merged;
}

/// Merges candidates of one attribute to a fixpoint. Each sweep extends the
/// current candidate forward and stops probing at the first disjoint
/// candidate: with candidates sorted by lower bound, everything after it is
/// disjoint too.
pub fn merge_pass(
    mut cands: Vec<CandidateGuard>,
    est: &SelectivityEstimator,
    k: &CostConstants,
    stats: &mut GenerationStats,
) -> Result<Vec<CandidateGuard>> {
    sort_candidates(&mut cands);
    loop {
        let mut changed = false;
        let mut slots: Vec<Option<CandidateGuard>> = cands.into_iter().map(Some).collect();
        let mut out = Vec::with_capacity(slots.len());
        for i in 0..slots.len() {
            let Some(mut cur) = slots[i].take() else { continue };
            for j in i + 1..slots.len() {
                let Some(next) = slots[j].as_ref() else { continue };
                if cur.guard.interval.is_disjoint(&next.guard.interval) {
                    break;
                }
                stats.merge_checks += 1;
                if let Some(m) = should_merge(&cur.guard, &next.guard, est, k)? {
                    let other = slots[j].take().expect("present");
                    absorb(&mut cur, m, other);
                    changed = true;
                }
            }
            out.push(cur);
        }
        sort_candidates(&mut out);
        cands = out;
        if !changed {
            return Ok(cands);
        }
    }
}

/// All merged candidates of the relation, ordered by attribute then bounds.
pub fn generate_candidate_set(
    policies: &[Policy],
    catalog: &IndexCatalog,
    relation: &str,
    est: &SelectivityEstimator,
    k: &CostConstants,
) -> Result<(Vec<CandidateGuard>, GenerationStats)> {
    let mut stats = GenerationStats::default();
    let mut all = Vec::new();
    for (_, cands) in collect_candidates(policies, catalog, relation) {
        stats.candidates += cands.len();
        all.extend(merge_pass(cands, est, k, &mut stats)?);
    }
    Ok((all, stats))
}
