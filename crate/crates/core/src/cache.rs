//! Guarded-expression cache with CLOCK replacement and incremental refresh.

use std::collections::HashMap;
use std::hash::Hash;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guards::policy_attr_interval;
use crate::policy::{Policy, QueryMetadata};
use crate::selection::{BuildStats, GeBuilder, GuardedExpression};
use crate::store::{GeKey, PolicyStore};

/// Fixed-capacity map with second-chance (CLOCK) eviction.
#[derive(Debug)]
pub struct ClockCache<K, V> {
    capacity: usize,
    slots: Vec<(K, V, bool)>,
    hand: usize,
    index: HashMap<K, usize>,
}

impl<K: Hash + Eq + Clone, V> ClockCache<K, V> {
    pub fn new(capacity: usize) -> ClockCache<K, V> {
        ClockCache { capacity, slots: Vec::with_capacity(capacity), hand: 0, index: HashMap::new() }
    }

    /// Builds a full cache in a given state, mainly for tests.
    pub fn with_state(slots: Vec<(K, V, bool)>, hand: usize) -> ClockCache<K, V> {
        let index = slots.iter().enumerate().map(|(i, (k, _, _))| (k.clone(), i)).collect();
        ClockCache { capacity: slots.len(), slots, hand, index }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn hand(&self) -> usize {
        self.hand
    }

    pub fn use_bits(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.2).collect()
    }

    pub fn contains(&self, k: &K) -> bool {
        self.index.contains_key(k)
    }

    /// Looks up and marks the entry as used.
    pub fn get(&mut self, k: &K) -> Option<&mut V> {
        let &i = self.index.get(k)?;
        let slot = &mut self.slots[i];
        slot.2 = true;
        Some(&mut slot.1)
    }

    /// Inserts or replaces; returns the evicted entry, if any. New entries
    /// start with the use bit set.
    pub fn insert(&mut self, k: K, v: V) -> Option<(K, V)> {
        if self.capacity == 0 {
            return Some((k, v));
        }
        if let Some(&i) = self.index.get(&k) {
            self.slots[i].1 = v;
            self.slots[i].2 = true;
            return None;
        }
        if self.slots.len() < self.capacity {
            self.index.insert(k.clone(), self.slots.len());
            self.slots.push((k, v, true));
            return None;
        }
        loop {
            let h = self.hand;
            self.hand = (self.hand + 1) % self.capacity;
            if self.slots[h].2 {
                self.slots[h].2 = false;
                continue;
            }
            let (old_k, old_v, _) = std::mem::replace(&mut self.slots[h], (k.clone(), v, true));
            self.index.remove(&old_k);
            self.index.insert(k, h);
            return Some((old_k, old_v));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RefreshStrategy {
    /// Always regenerate.
    B1,
    /// Regenerate after a run of consecutive updates.
    B2,
    /// Regenerate only when every new policy fits an existing guard.
    O1,
    /// Regenerate when at least a threshold share fits.
    O2,
}

impl FromStr for RefreshStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<RefreshStrategy> {
        match s.to_ascii_lowercase().as_str() {
            "b1" => Ok(RefreshStrategy::B1),
            "b2" => Ok(RefreshStrategy::B2),
            "o1" => Ok(RefreshStrategy::O1),
            "o2" => Ok(RefreshStrategy::O2),
            other => Err(Error::Config(format!("unknown refresh strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity: usize,
    pub strategy: RefreshStrategy,
    /// B2 regenerates once this many updates have happened in a row.
    pub b2_max_updates: u32,
    pub o1_threshold: f64,
    pub o2_threshold: f64,
    /// Also write every built expression to the policy store.
    pub persist: bool,
}

impl CacheConfig {
    pub fn new(capacity: usize, strategy: RefreshStrategy) -> CacheConfig {
        CacheConfig { capacity, strategy, b2_max_updates: 9, o1_threshold: 1.0, o2_threshold: 0.5, persist: true }
    }
}

/// Capacity as a percentage of the querier population, rounded down but at
/// least one slot when the percentage is positive.
pub fn capacity_for(pct: f64, queriers: usize) -> usize {
    let c = (pct / 100.0 * queriers as f64 + 1e-9).floor() as usize;
    if pct > 0.0 {
        c.max(1)
    } else {
        0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMetrics {
    pub hits: u64,
    pub soft_hits: u64,
    pub misses: u64,
    pub regenerations: u64,
    pub updates: u64,
    pub evictions: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub hits: u64,
    pub soft_hits: u64,
    pub misses: u64,
    pub regenerations: u64,
    pub updates: u64,
    pub evictions: u64,
    pub hit_rate: f64,
    pub soft_hit_rate: f64,
    pub miss_rate: f64,
}

impl CacheMetrics {
    pub fn lookups(&self) -> u64 {
        self.hits + self.soft_hits + self.misses
    }

    pub fn since(&self, earlier: &CacheMetrics) -> CacheMetrics {
        CacheMetrics {
            hits: self.hits - earlier.hits,
            soft_hits: self.soft_hits - earlier.soft_hits,
            misses: self.misses - earlier.misses,
            regenerations: self.regenerations - earlier.regenerations,
            updates: self.updates - earlier.updates,
            evictions: self.evictions - earlier.evictions,
        }
    }

    pub fn report(&self) -> MetricsReport {
        let n = self.lookups().max(1) as f64;
        MetricsReport {
            hits: self.hits,
            soft_hits: self.soft_hits,
            misses: self.misses,
            regenerations: self.regenerations,
            updates: self.updates,
            evictions: self.evictions,
            hit_rate: self.hits as f64 / n,
            soft_hit_rate: self.soft_hits as f64 / n,
            miss_rate: self.misses as f64 / n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Hit,
    Updated,
    Regenerated,
    Miss,
}

#[derive(Debug)]
struct Entry {
    ge: Arc<GuardedExpression>,
    consecutive_updates: u32,
}

/// Share of new policies that imply some existing guard of `ge`.
pub fn mergeable_fraction(ge: &GuardedExpression, new: &[Policy]) -> f64 {
    if new.is_empty() {
        return 0.0;
    }
    let fits = new
        .iter()
        .filter(|p| {
            ge.terms.iter().any(|t| {
                policy_attr_interval(p, &t.guard.attr).is_some_and(|iv| t.guard.interval.contains(&iv))
            })
        })
        .count();
    fits as f64 / new.len() as f64
}

#[derive(Debug)]
pub struct GeCache {
    cfg: CacheConfig,
    clock: ClockCache<GeKey, Entry>,
    metrics: CacheMetrics,
}

impl GeCache {
    pub fn new(cfg: CacheConfig) -> GeCache {
        GeCache { clock: ClockCache::new(cfg.capacity), cfg, metrics: CacheMetrics::default() }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> CacheMetrics {
        self.metrics
    }

    pub fn len(&self) -> usize {
        self.clock.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clock.is_empty()
    }

    pub fn contains(&self, key: &GeKey) -> bool {
        self.clock.contains(key)
    }

    fn regenerate_wanted(&self, consecutive_updates: u32, ge: &GuardedExpression, new: &[Policy]) -> bool {
        match self.cfg.strategy {
            RefreshStrategy::B1 => true,
            RefreshStrategy::B2 => consecutive_updates >= self.cfg.b2_max_updates,
            RefreshStrategy::O1 => mergeable_fraction(ge, new) >= self.cfg.o1_threshold,
            RefreshStrategy::O2 => mergeable_fraction(ge, new) >= self.cfg.o2_threshold,
        }
    }

    /// Returns a guarded expression that reflects every policy currently in
    /// the store for (querier, purpose, relation).
    pub fn lookup_or_build(
        &mut self,
        qm: &QueryMetadata,
        relation: &str,
        store: &mut PolicyStore,
        builder: &GeBuilder,
    ) -> Result<(Arc<GuardedExpression>, Outcome, BuildStats)> {
        let key = GeKey::new(&qm.querier, &qm.purpose, relation);
        let now = store.clock();
        let mut stats = BuildStats::default();
        let decision = match self.clock.get(&key) {
            Some(entry) => {
                let since = entry.ge.built_at;
                let new = store.fetch_policies(&qm.querier, &qm.purpose, relation, since);
                let deleted = store.deletions_since(&qm.querier, &qm.purpose, relation, since);
                if new.is_empty() && deleted == 0 {
                    self.metrics.hits += 1;
                    return Ok((entry.ge.clone(), Outcome::Hit, stats));
                }
                Some((deleted, new))
            }
            None => None,
        };
        let (ge, outcome, consecutive) = match decision {
            None => {
                let (ge, s) = builder.build(&key, store.fetch_policies(&qm.querier, &qm.purpose, relation, 0), now)?;
                stats = s;
                self.metrics.misses += 1;
                (ge, Outcome::Miss, 0)
            }
            Some((deleted, new)) => {
                self.metrics.soft_hits += 1;
                let (old, consecutive) = {
                    let e = self.clock.get(&key).expect("present");
                    (e.ge.clone(), e.consecutive_updates)
                };
                let regen = deleted > 0 || self.regenerate_wanted(consecutive, &old, &new);
                if regen {
                    let (ge, s) = builder.build(&key, store.fetch_policies(&qm.querier, &qm.purpose, relation, 0), now)?;
                    stats = s;
                    self.metrics.regenerations += 1;
                    (ge, Outcome::Regenerated, 0)
                } else {
                    let (delta, s) = builder.build(&key, new, now)?;
                    stats = s;
                    self.metrics.updates += 1;
                    (old.append(&delta), Outcome::Updated, consecutive + 1)
                }
            }
        };
        if self.cfg.persist {
            store.store_ge(ge.to_stored())?;
        }
        let ge = Arc::new(ge);
        let entry = Entry { ge: ge.clone(), consecutive_updates: consecutive };
        if self.cfg.capacity > 0 && self.clock.insert(key, entry).is_some() {
            self.metrics.evictions += 1;
        }
        Ok((ge, outcome, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_skips_used_slots() {
        let mut c = ClockCache::with_state(vec![("a", 1, true), ("b", 2, false), ("c", 3, true)], 0);
        let ev = c.insert("d", 4);
        assert_eq!(ev, Some(("b", 2)));
        assert_eq!(c.use_bits(), vec![false, true, true]);
        assert_eq!(c.hand(), 2);
    }

    #[test]
    fn clock_full_sweep_when_all_used() {
        let mut c = ClockCache::with_state(vec![("a", 1, true), ("b", 2, true), ("c", 3, true)], 1);
        assert_eq!(c.insert("d", 4), Some(("b", 2)));
        assert_eq!(c.hand(), 2);
    }

    #[test]
    fn capacity_rounding() {
        assert_eq!(capacity_for(80.0, 388), 310);
        assert_eq!(capacity_for(20.0, 388), 77);
        assert_eq!(capacity_for(1.0, 10), 1);
        assert_eq!(capacity_for(0.0, 10), 0);
    }

    #[test]
    fn strategy_names() {
        assert_eq!("o2".parse::<RefreshStrategy>().unwrap(), RefreshStrategy::O2);
        assert!("x".parse::<RefreshStrategy>().is_err());
    }
}
