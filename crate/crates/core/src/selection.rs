//! Greedy guard selection and the guarded expression it produces.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::sync::Arc;

use serde::Serialize;

use crate::cost::{
    choose_inline_or_delta, cost_guarded_expression, guard_benefit, guard_utility, CostConstants, ExecMode,
    SelectivityEstimator,
};
use crate::error::{Error, Result};
use crate::guards::{generate_candidate_set, CandidateGuard, Guard, IndexCatalog};
use crate::policy::{Policy, PolicyId};
use crate::store::{GeKey, StoredGuard, StoredGuardedExpression};

#[derive(Clone, Debug, Serialize)]
pub struct GuardTerm {
    pub guard: Guard,
    pub partition: Vec<PolicyId>,
    pub exec_mode: ExecMode,
    pub est_sel: f64,
}

/// Guards with their policy partitions for one (querier, purpose, relation).
#[derive(Clone, Debug)]
pub struct GuardedExpression {
    pub key: GeKey,
    pub terms: Vec<GuardTerm>,
    pub policies: BTreeMap<PolicyId, Arc<Policy>>,
    pub built_at: u64,
}

impl GuardedExpression {
    pub fn built_over(&self) -> BTreeSet<PolicyId> {
        self.policies.keys().copied().collect()
    }

    pub fn estimated_cost(&self, k: &CostConstants) -> f64 {
        self.terms.iter().map(|t| cost_guarded_expression(t.est_sel, t.partition.len(), k)).sum()
    }

    pub fn mean_partition_size(&self) -> f64 {
        if self.terms.is_empty() {
            0.0
        } else {
            self.policies.len() as f64 / self.terms.len() as f64
        }
    }

    /// Appends the guards of an expression built over newer policies.
    pub fn append(&self, newer: &GuardedExpression) -> GuardedExpression {
        let mut ge = self.clone();
        ge.terms.extend(newer.terms.iter().cloned());
        ge.policies.extend(newer.policies.iter().map(|(k, v)| (*k, v.clone())));
        ge.built_at = newer.built_at.max(self.built_at);
        ge
    }

    pub fn to_stored(&self) -> StoredGuardedExpression {
        StoredGuardedExpression {
            ge_id: 0,
            querier: self.key.querier.clone(),
            purpose: self.key.purpose.clone(),
            relation: self.key.relation.clone(),
            guards: self
                .terms
                .iter()
                .map(|t| StoredGuard { guard: t.guard.to_condition(), partition: t.partition.clone(), exec_mode: t.exec_mode })
                .collect(),
            outdated: false,
            built_at: self.built_at,
        }
    }
}

struct Entry {
    utility: f64,
    sel: f64,
    rank: usize,
    idx: usize,
    version: u32,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Greater pops first: higher utility, then smaller selectivity, then the
    // lexicographically smaller guard.
    fn cmp(&self, other: &Self) -> Ordering {
        self.utility
            .total_cmp(&other.utility)
            .then_with(|| other.sel.total_cmp(&self.sel))
            .then_with(|| other.rank.cmp(&self.rank))
            .then_with(|| self.version.cmp(&other.version))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SelectionStats {
    pub heap_ops: usize,
}

/// Picks guards by utility until every policy is covered. Each adopted guard
/// takes all still-uncovered policies it covers, so partitions are disjoint.
pub fn select_guards(
    cands: &[CandidateGuard],
    policies: &BTreeSet<PolicyId>,
    est: &SelectivityEstimator,
    k: &CostConstants,
) -> Result<(Vec<GuardTerm>, SelectionStats)> {
    let mut stats = SelectionStats::default();
    let covered: BTreeSet<PolicyId> = cands.iter().flat_map(|c| c.covered.iter().copied()).collect();
    if let Some(p) = policies.iter().find(|p| !covered.contains(p)) {
        return Err(Error::ContractViolation(format!("policy {p} is not covered by any candidate guard")));
    }
    let row_count = est.row_count;
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[a].guard.cmp_identity(&cands[b].guard));
    let mut rank = vec![0; cands.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let sels: Vec<f64> = cands.iter().map(|c| est.estimate_interval(&c.guard.attr, &c.guard.interval)).collect();
    let mut remaining: Vec<BTreeSet<PolicyId>> =
        cands.iter().map(|c| c.covered.intersection(policies).copied().collect()).collect();
    let mut version = vec![0u32; cands.len()];
    let mut alive: Vec<bool> = remaining.iter().map(|r| !r.is_empty()).collect();
    let mut by_policy: HashMap<PolicyId, Vec<usize>> = HashMap::new();
    for (i, r) in remaining.iter().enumerate() {
        for p in r {
            by_policy.entry(*p).or_default().push(i);
        }
    }
    let utility =
        |i: usize, n: usize| guard_utility(guard_benefit(sels[i], n, row_count, k), sels[i], k);
    let mut heap = BinaryHeap::new();
    for i in 0..cands.len() {
        if alive[i] {
            heap.push(Entry { utility: utility(i, remaining[i].len()), sel: sels[i], rank: rank[i], idx: i, version: 0 });
            stats.heap_ops += 1;
        }
    }
    let mut terms = Vec::new();
    while let Some(e) = heap.pop() {
        stats.heap_ops += 1;
        let i = e.idx;
        if !alive[i] || e.version != version[i] {
            continue;
        }
        alive[i] = false;
        let partition: Vec<PolicyId> = std::mem::take(&mut remaining[i]).into_iter().collect();
        let mut touched = BTreeSet::new();
        for p in &partition {
            for &o in &by_policy[p] {
                if alive[o] && remaining[o].remove(p) {
                    touched.insert(o);
                }
            }
        }
        for o in touched {
            if remaining[o].is_empty() {
                alive[o] = false;
            } else {
                version[o] += 1;
                heap.push(Entry {
                    utility: utility(o, remaining[o].len()),
                    sel: sels[o],
                    rank: rank[o],
                    idx: o,
                    version: version[o],
                });
                stats.heap_ops += 1;
            }
        }
        terms.push(GuardTerm {
            guard: cands[i].guard.clone(),
            exec_mode: choose_inline_or_delta(partition.len(), k),
            partition,
            est_sel: sels[i],
        });
    }
    Ok((terms, stats))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct BuildStats {
    pub policies: usize,
    pub candidates: usize,
    pub merge_checks: usize,
    pub heap_ops: usize,
}

impl BuildStats {
    /// Elementary operations performed, the unit of generation cost.
    pub fn ops(&self) -> usize {
        self.policies + self.candidates + self.merge_checks + self.heap_ops
    }
}

/// Everything needed to build guarded expressions for one relation.
#[derive(Clone, Debug)]
pub struct GeBuilder {
    pub catalog: IndexCatalog,
    pub estimators: BTreeMap<String, SelectivityEstimator>,
    pub constants: CostConstants,
}

impl GeBuilder {
    pub fn estimator(&self, relation: &str) -> Result<&SelectivityEstimator> {
        self.estimators.get(relation).ok_or_else(|| Error::UnknownRelation(relation.to_string()))
    }

    pub fn build(&self, key: &GeKey, policies: Vec<Policy>, built_at: u64) -> Result<(GuardedExpression, BuildStats)> {
        let est = self.estimator(&key.relation)?;
        let (cands, gen) = generate_candidate_set(&policies, &self.catalog, &key.relation, est, &self.constants)?;
        let ids: BTreeSet<PolicyId> = policies.iter().filter(|p| p.relation == key.relation).map(|p| p.id).collect();
        let (terms, sel) = select_guards(&cands, &ids, est, &self.constants)?;
        let stats = BuildStats {
            policies: policies.len(),
            candidates: gen.candidates,
            merge_checks: gen.merge_checks,
            heap_ops: sel.heap_ops,
        };
        let ge = GuardedExpression {
            key: key.clone(),
            terms,
            policies: policies.into_iter().filter(|p| ids.contains(&p.id)).map(|p| (p.id, Arc::new(p))).collect(),
            built_at,
        };
        Ok((ge, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::{Interval, Value};

    fn cand(attr: &str, v: i64, ids: &[u64]) -> CandidateGuard {
        CandidateGuard {
            guard: Guard { attr: attr.into(), interval: Interval::point(Value::Int(v)) },
            covered: ids.iter().map(|i| PolicyId(*i)).collect(),
            merged_from: vec![],
        }
    }

    #[test]
    fn adopted_partition_is_subtracted() {
        // A covers {1,2,3} at high utility, B covers {2,4}.
        let mut est = SelectivityEstimator::new(1000);
        let mut col: Vec<Value> = (0..1000).map(|i| Value::Int(100 + i % 500)).collect();
        col[0] = Value::Int(1);
        for x in col.iter_mut().skip(1).take(9) {
            *x = Value::Int(2);
        }
        est.add_column("a", col);
        let cands = vec![cand("a", 1, &[1, 2, 3]), cand("a", 2, &[2, 4])];
        let ids = BTreeSet::from([PolicyId(1), PolicyId(2), PolicyId(3), PolicyId(4)]);
        let (terms, _) = select_guards(&cands, &ids, &est, &CostConstants::default()).unwrap();
        assert_eq!(terms.len(), 2);
        assert_eq!(terms[0].partition, vec![PolicyId(1), PolicyId(2), PolicyId(3)]);
        assert_eq!(terms[1].partition, vec![PolicyId(4)]);
    }

    #[test]
    fn uncovered_policy_is_a_contract_violation() {
        let est = SelectivityEstimator::new(10);
        let cands = vec![cand("a", 1, &[1])];
        let ids = BTreeSet::from([PolicyId(1), PolicyId(2)]);
        assert!(matches!(
            select_guards(&cands, &ids, &est, &CostConstants::default()),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn ties_prefer_smaller_selectivity_then_guard_order() {
        let est = SelectivityEstimator::new(100);
        // Without histograms both guards estimate the whole relation, so
        // utilities and selectivities tie and guard order decides.
        let cands = vec![cand("b", 1, &[1]), cand("a", 1, &[1])];
        let ids = BTreeSet::from([PolicyId(1)]);
        let (terms, _) = select_guards(&cands, &ids, &est, &CostConstants::default()).unwrap();
        assert_eq!(terms.len(), 1);
        assert_eq!(terms[0].guard.attr, "a");
    }
}
