//! Workload replay through store, cache, builder, rewriter and engine, plus
//! the baseline enforcement strategies and run reports.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::{capacity_for, CacheConfig, CacheMetrics, GeCache, Outcome, RefreshStrategy};
use crate::cost::{CostConstants, ExecMode};
use crate::engine::{Access, BoundQuery, Engine, ExecStats, Plan, PolicyScan, ResultSet, Schema, TermPlan};
use crate::error::{Error, Result};
use crate::guards::Guard;
use crate::policy::{oracle_allowed_indices, GroupDirectory, Policy, QueryMetadata, Tuple, OWNER_ATTR};
use crate::rewrite::{rewrite, DialectCapabilities};
use crate::selection::{BuildStats, GeBuilder, GuardedExpression};
use crate::sql::parse_query;
use crate::store::{GeKey, PolicyStore};
use crate::value::{Interval, ValueTag};
use crate::workload::{self, Campus, Workload, WorkloadConfig, WorkloadEvent};

/// Tuple count below which `--verify` is on by default.
pub const VERIFY_DEFAULT_LIMIT: usize = 10_000;

pub fn wifi_schema() -> Schema {
    Schema {
        columns: vec![
            ("id".into(), ValueTag::Int),
            ("owner".into(), ValueTag::Int),
            ("location_id".into(), ValueTag::Int),
            ("date".into(), ValueTag::Date),
            ("time".into(), ValueTag::Time),
        ],
    }
}

/// An engine holding the WiFi relation with the usual secondary indexes.
pub fn wifi_engine(tuples: &[Tuple]) -> Result<Engine> {
    let mut e = Engine::new();
    e.create_table(workload::RELATION, wifi_schema(), true)?;
    e.load_tuples(tuples)?;
    for attr in ["location_id", "date", "time"] {
        e.create_index(workload::RELATION, attr)?;
    }
    e.analyze(workload::RELATION)?;
    Ok(e)
}

/// Generates a workload and a matching engine with `rows` events.
pub fn prepare(cfg: &WorkloadConfig, rows: usize) -> Result<(Workload, Engine)> {
    let wl = workload::generate(cfg)?;
    let engine = wifi_engine(&wl.campus.generate_events(rows, cfg.seed))?;
    Ok((wl, engine))
}

pub fn builder_for(engine: &Engine, constants: CostConstants) -> GeBuilder {
    GeBuilder { catalog: engine.catalog(), estimators: engine.estimators(), constants }
}

/// Governed relations read by a query, in first-use order.
fn governed_relations(engine: &Engine, bq: &BoundQuery) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for s in &bq.sources {
        if engine.table(&s.relation)?.governed && !out.contains(&s.relation) {
            out.push(s.relation.clone());
        }
    }
    Ok(out)
}

/// Reference result: the query over exactly the tuples some policy allows.
pub struct Oracle {
    tuples: BTreeMap<String, Vec<Tuple>>,
}

impl Oracle {
    pub fn new(engine: &Engine) -> Oracle {
        Oracle { tuples: engine.tables().map(|t| (t.name.clone(), t.tuples())).collect() }
    }

    pub fn result(
        &self,
        engine: &Engine,
        bq: &BoundQuery,
        policies: &[Policy],
        qm: &QueryMetadata,
        groups: &GroupDirectory,
    ) -> Result<ResultSet> {
        let mut inputs = Vec::new();
        for s in &bq.sources {
            let t = engine.table(&s.relation)?;
            let ids = if t.governed {
                let ts = &self.tuples[&s.relation];
                oracle_allowed_indices(ts, policies, qm, groups)?.into_iter().map(|i| i as u32).collect()
            } else {
                (0..t.rows.len() as u32).collect()
            };
            inputs.push(ids);
        }
        engine.run_query(bq, inputs, &mut ExecStats::default())
    }
}

pub fn digest(rs: &ResultSet) -> u64 {
    let mut h = DefaultHasher::new();
    rs.canonical().hash(&mut h);
    h.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub cache_size_pct: f64,
    pub strategy: RefreshStrategy,
    pub verify: bool,
    pub constants: CostConstants,
    /// Cost units per guard-generation operation.
    pub c_build: f64,
    pub seed: Option<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            cache_size_pct: 80.0,
            strategy: RefreshStrategy::O1,
            verify: true,
            constants: CostConstants::default(),
            c_build: 1.0,
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub build_secs: f64,
    pub rewrite_secs: f64,
    pub execute_secs: f64,
    pub verify_secs: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AbstractCost {
    pub execution: f64,
    pub generation: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub hits: u64,
    pub soft_hits: u64,
    pub misses: u64,
    pub regenerations: u64,
    pub updates: u64,
}

impl EpochRow {
    pub fn hit_rate(&self) -> f64 {
        let n = self.hits + self.soft_hits + self.misses;
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTotals {
    pub inserts: usize,
    pub deletes: usize,
    pub queries: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub approach: Approach,
    pub queries: usize,
    pub exec: ExecStats,
    pub weighted_cost: f64,
    pub wall_secs: f64,
    /// Policy evaluations for each query, in input order.
    pub per_query_policy_evals: Vec<u64>,
    /// Queries whose rows differ from the Sieve rows.
    pub differing_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: BenchConfig,
    pub cache_capacity: usize,
    pub timings: PhaseTimings,
    pub cache: CacheMetrics,
    pub hit_rate: f64,
    pub soft_hit_rate: f64,
    pub miss_rate: f64,
    pub events: EventTotals,
    pub exec: ExecStats,
    pub build: BuildStats,
    pub abstract_cost: AbstractCost,
    pub verified_queries: usize,
    pub epochs: Vec<EpochRow>,
    pub baselines: Vec<ComparisonRow>,
    pub result_digests: Vec<u64>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<RunReport> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "strategy {:?}  cache {}% ({} slots)  verify {}",
            self.config.strategy, self.config.cache_size_pct, self.cache_capacity, self.config.verify
        );
        let _ = writeln!(
            s,
            "events     inserts {}  deletes {}  queries {}  epochs {}",
            self.events.inserts, self.events.deletes, self.events.queries, self.events.epochs
        );
        let c = &self.cache;
        let _ = writeln!(
            s,
            "cache      hits {}  soft_hits {}  misses {}  regenerations {}  updates {}  evictions {}",
            c.hits, c.soft_hits, c.misses, c.regenerations, c.updates, c.evictions
        );
        let _ = writeln!(
            s,
            "rates      hit {:.3}  soft_hit {:.3}  miss {:.3}",
            self.hit_rate, self.soft_hit_rate, self.miss_rate
        );
        let e = &self.exec;
        let _ = writeln!(
            s,
            "execution  policy_evals {}  rows_random {}  rows_sequential {}  delta_invocations {}",
            e.policy_evals, e.rows_read_random, e.rows_read_sequential, e.delta_invocations
        );
        let _ = writeln!(
            s,
            "cost       execution {:.1}  generation {:.1}  total {:.1}",
            self.abstract_cost.execution, self.abstract_cost.generation, self.abstract_cost.total
        );
        let t = &self.timings;
        let _ = writeln!(
            s,
            "wall       build {:.3}s  rewrite {:.3}s  execute {:.3}s  verify {:.3}s",
            t.build_secs, t.rewrite_secs, t.execute_secs, t.verify_secs
        );
        let _ = writeln!(s, "verified   {}", self.verified_queries);
        if !self.baselines.is_empty() {
            let _ = writeln!(s, "{:<12} {:>14} {:>14} {:>10}", "approach", "policy_evals", "cost", "wall_s");
            for b in &self.baselines {
                let _ = writeln!(
                    s,
                    "{:<12} {:>14} {:>14.1} {:>10.3}",
                    b.approach.name(),
                    b.exec.policy_evals,
                    b.weighted_cost,
                    b.wall_secs
                );
            }
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,hits,soft_hits,misses,regenerations,updates\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.hits, r.soft_hits, r.misses, r.regenerations, r.updates);
        }
        s
    }
}

/// What one query event did.
#[derive(Clone, Debug)]
pub struct QueryRun {
    pub outcomes: Vec<Outcome>,
    pub result: ResultSet,
    pub exec: ExecStats,
    pub build: BuildStats,
}

/// Replays workload events against one engine.
pub struct Harness<'a> {
    engine: &'a Engine,
    oracle: Option<Oracle>,
    store: PolicyStore,
    cache: GeCache,
    builder: GeBuilder,
    cfg: BenchConfig,
    report: RunReport,
    epoch_start: CacheMetrics,
}

impl<'a> Harness<'a> {
    pub fn new(engine: &'a Engine, queriers: usize, cfg: BenchConfig) -> Result<Harness<'a>> {
        cfg.constants.validate()?;
        let capacity = capacity_for(cfg.cache_size_pct, queriers);
        let mut cache_cfg = CacheConfig::new(capacity, cfg.strategy);
        cache_cfg.persist = false;
        Ok(Harness {
            engine,
            oracle: cfg.verify.then(|| Oracle::new(engine)),
            store: PolicyStore::new(GroupDirectory::default()),
            cache: GeCache::new(cache_cfg),
            builder: builder_for(engine, cfg.constants),
            cfg,
            report: RunReport {
                config: cfg,
                cache_capacity: capacity,
                timings: PhaseTimings::default(),
                cache: CacheMetrics::default(),
                hit_rate: 0.0,
                soft_hit_rate: 0.0,
                miss_rate: 0.0,
                events: EventTotals::default(),
                exec: ExecStats::default(),
                build: BuildStats::default(),
                abstract_cost: AbstractCost::default(),
                verified_queries: 0,
                epochs: Vec::new(),
                baselines: Vec::new(),
                result_digests: Vec::new(),
            },
            epoch_start: CacheMetrics::default(),
        })
    }

    pub fn store(&self) -> &PolicyStore {
        &self.store
    }

    pub fn cache(&self) -> &GeCache {
        &self.cache
    }

    pub fn builder(&self) -> &GeBuilder {
        &self.builder
    }

    pub fn apply(&mut self, ev: &WorkloadEvent) -> Result<Option<QueryRun>> {
        match ev {
            WorkloadEvent::InsertPolicy { policy } => {
                self.store.insert_policy(policy.clone())?;
                self.report.events.inserts += 1;
                Ok(None)
            }
            WorkloadEvent::DeletePolicy { policy_id } => {
                self.store.delete_policy(*policy_id)?;
                self.report.events.deletes += 1;
                Ok(None)
            }
            WorkloadEvent::EpochEnd { epoch } => {
                let m = self.cache.metrics();
                let d = m.since(&self.epoch_start);
                self.epoch_start = m;
                self.report.epochs.push(EpochRow {
                    epoch: *epoch,
                    hits: d.hits,
                    soft_hits: d.soft_hits,
                    misses: d.misses,
                    regenerations: d.regenerations,
                    updates: d.updates,
                });
                self.report.events.epochs += 1;
                Ok(None)
            }
            WorkloadEvent::Query { querier, purpose, sql, .. } => {
                let qm = QueryMetadata::new(querier.clone(), purpose.clone());
                self.query(&qm, sql).map(Some)
            }
        }
    }

    pub fn query(&mut self, qm: &QueryMetadata, sql: &str) -> Result<QueryRun> {
        let t0 = Instant::now();
        let bq = self.engine.bind(&parse_query(sql)?)?;
        let mut ges = BTreeMap::new();
        let mut outcomes = Vec::new();
        let mut build = BuildStats::default();
        for rel in governed_relations(self.engine, &bq)? {
            let (ge, outcome, stats) = self.cache.lookup_or_build(qm, &rel, &mut self.store, &self.builder)?;
            build.policies += stats.policies;
            build.candidates += stats.candidates;
            build.merge_checks += stats.merge_checks;
            build.heap_ops += stats.heap_ops;
            outcomes.push(outcome);
            ges.insert(rel, ge);
        }
        let t1 = Instant::now();
        let rw = rewrite(&bq, qm, &DialectCapabilities::embedded(), &ges, self.engine, &self.cfg.constants)?;
        let t2 = Instant::now();
        let (result, exec) = self.engine.execute(&rw.plan)?;
        let t3 = Instant::now();
        if let Some(oracle) = &self.oracle {
            let policies: Vec<Policy> = self.store.policies().cloned().collect();
            let expected = oracle.result(self.engine, &bq, &policies, qm, self.store.groups())?;
            if expected.canonical() != result.canonical() {
                return Err(mismatch(qm, sql, &policies, &expected, &result));
            }
            self.report.verified_queries += 1;
        }
        let r = &mut self.report;
        r.timings.build_secs += (t1 - t0).as_secs_f64();
        r.timings.rewrite_secs += (t2 - t1).as_secs_f64();
        r.timings.execute_secs += (t3 - t2).as_secs_f64();
        r.timings.verify_secs += t3.elapsed().as_secs_f64();
        r.events.queries += 1;
        r.exec.add(&exec);
        r.build.policies += build.policies;
        r.build.candidates += build.candidates;
        r.build.merge_checks += build.merge_checks;
        r.build.heap_ops += build.heap_ops;
        r.result_digests.push(digest(&result));
        Ok(QueryRun { outcomes, result, exec, build })
    }

    pub fn finish(mut self) -> RunReport {
        let m = self.cache.metrics();
        let rep = m.report();
        let r = &mut self.report;
        r.cache = m;
        r.hit_rate = rep.hit_rate;
        r.soft_hit_rate = rep.soft_hit_rate;
        r.miss_rate = rep.miss_rate;
        let execution = r.exec.weighted_cost(&self.cfg.constants);
        let generation = self.cfg.c_build * r.build.ops() as f64;
        r.abstract_cost = AbstractCost { execution, generation, total: execution + generation };
        self.report
    }
}

/// A small reproduction: the querier's policies and the first row that
/// differs between the oracle and the rewritten query.
fn mismatch(qm: &QueryMetadata, sql: &str, policies: &[Policy], expected: &ResultSet, got: &ResultSet) -> Error {
    let e = expected.canonical();
    let g = got.canonical();
    let missing = e.iter().find(|r| !g.contains(r));
    let extra = g.iter().find(|r| !e.contains(r));
    let ids: Vec<String> = policies
        .iter()
        .filter(|p| p.querier == qm.querier && p.purpose == qm.purpose)
        .map(|p| p.id.to_string())
        .collect();
    Error::ContractViolation(format!(
        "oracle mismatch: querier {} purpose {:?} query `{sql}`; expected {} rows, got {}; missing {:?}; extra {:?}; policies [{}]",
        qm.querier,
        qm.purpose,
        e.len(),
        g.len(),
        missing,
        extra,
        ids.join(", ")
    ))
}

/// Replays every event and returns the report.
pub fn run_workload(engine: &Engine, events: &[WorkloadEvent], cfg: BenchConfig) -> Result<RunReport> {
    let queriers = workload::WorkloadTotals::of(events).queriers;
    let mut h = Harness::new(engine, queriers, cfg)?;
    for ev in events {
        h.apply(ev)?;
    }
    Ok(h.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Sieve,
    /// Every policy checked on every tuple by a full scan.
    BaselineP,
    /// One owner-index scan per policy, unioned.
    BaselineI,
    /// Full scan with the per-tuple Δ filter over all policies.
    BaselineU,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::Sieve, Approach::BaselineP, Approach::BaselineI, Approach::BaselineU];

    pub fn name(self) -> &'static str {
        match self {
            Approach::Sieve => "sieve",
            Approach::BaselineP => "baseline_p",
            Approach::BaselineI => "baseline_i",
            Approach::BaselineU => "baseline_u",
        }
    }
}

/// Plan for a baseline approach over the given policies per relation.
pub fn baseline_plan(approach: Approach, bq: &BoundQuery, policies: &BTreeMap<String, Vec<Arc<Policy>>>) -> Result<Plan> {
    let mut scans = BTreeMap::new();
    for (rel, ps) in policies {
        let scan = match approach {
            Approach::Sieve => return Err(Error::Config("the sieve plan comes from the rewriter".into())),
            Approach::BaselineP => PolicyScan {
                relation: rel.clone(),
                access: Access::FullScan,
                pushed: vec![],
                terms: vec![TermPlan { guard: None, policies: ps.clone(), mode: ExecMode::Inline }],
            },
            Approach::BaselineU => PolicyScan {
                relation: rel.clone(),
                access: Access::FullScan,
                pushed: vec![],
                terms: vec![TermPlan { guard: None, policies: ps.clone(), mode: ExecMode::Delta }],
            },
            Approach::BaselineI => PolicyScan {
                relation: rel.clone(),
                access: Access::GuardUnion,
                pushed: vec![],
                terms: ps
                    .iter()
                    .map(|p| TermPlan {
                        guard: Some(Guard { attr: OWNER_ATTR.into(), interval: Interval::point(p.owner.clone()) }),
                        policies: vec![p.clone()],
                        mode: ExecMode::Inline,
                    })
                    .collect(),
            },
        };
        scans.insert(rel.clone(), scan);
    }
    Ok(Plan { query: bq.clone(), scans })
}

/// Runs each query under Sieve and the three baselines over the current
/// store contents. Sieve expressions are built fresh, outside any cache.
pub fn run_baselines(
    engine: &Engine,
    store: &PolicyStore,
    queries: &[(QueryMetadata, String)],
    builder: &GeBuilder,
) -> Result<Vec<ComparisonRow>> {
    let k = &builder.constants;
    let mut rows: Vec<ComparisonRow> = Approach::ALL
        .iter()
        .map(|a| ComparisonRow {
            approach: *a,
            queries: 0,
            exec: ExecStats::default(),
            weighted_cost: 0.0,
            wall_secs: 0.0,
            per_query_policy_evals: Vec::new(),
            differing_queries: 0,
        })
        .collect();
    for (qm, sql) in queries {
        let bq = engine.bind(&parse_query(sql)?)?;
        let mut ges = BTreeMap::new();
        let mut policies = BTreeMap::new();
        for rel in governed_relations(engine, &bq)? {
            let ps = store.fetch_policies(&qm.querier, &qm.purpose, &rel, 0);
            let (ge, _) = builder.build(&GeKey::new(&qm.querier, &qm.purpose, &rel), ps.clone(), store.clock())?;
            ges.insert(rel.clone(), Arc::new(ge));
            policies.insert(rel, ps.into_iter().map(Arc::new).collect::<Vec<_>>());
        }
        let mut sieve_rows = None;
        for row in rows.iter_mut() {
            let t0 = Instant::now();
            let plan = match row.approach {
                Approach::Sieve => rewrite(&bq, qm, &DialectCapabilities::embedded(), &ges, engine, k)?.plan,
                a => baseline_plan(a, &bq, &policies)?,
            };
            let (rs, exec) = engine.execute(&plan)?;
            row.wall_secs += t0.elapsed().as_secs_f64();
            row.queries += 1;
            row.exec.add(&exec);
            row.weighted_cost += exec.weighted_cost(k);
            row.per_query_policy_evals.push(exec.policy_evals);
            let canon = rs.canonical();
            match &sieve_rows {
                None => sieve_rows = Some(canon),
                Some(s) if *s != canon => row.differing_queries += 1,
                Some(_) => {}
            }
        }
    }
    Ok(rows)
}

/// Builds the expression a querier would get right now, without a cache.
pub fn build_fresh(store: &PolicyStore, builder: &GeBuilder, qm: &QueryMetadata, relation: &str) -> Result<GuardedExpression> {
    let ps = store.fetch_policies(&qm.querier, &qm.purpose, relation, 0);
    Ok(builder.build(&GeKey::new(&qm.querier, &qm.purpose, relation), ps, store.clock())?.0)
}

/// Query texts of a campus, for baseline comparisons outside a workload.
pub fn sample_queries(campus: &Campus, policies: &[Policy], n: usize, seed: u64) -> Vec<(QueryMetadata, String)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let purpose = campus.spec.scenario.purpose();
    workload::generate_queries(campus, policies, 0.0, &mut rng)
        .into_iter()
        .take(n)
        .map(|(q, sql)| (QueryMetadata::new(q, purpose), sql))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{Scale, Scenario};

    fn small() -> (Workload, Engine) {
        let mut cfg = WorkloadConfig::steady(Scenario::Attendance, Scale::Desk, 10, 1, 5);
        cfg.max_epochs = Some(30);
        prepare(&cfg, 3000).unwrap()
    }

    #[test]
    fn replay_verifies() {
        let (wl, e) = small();
        let r = run_workload(&e, &wl.events, BenchConfig::default()).unwrap();
        assert_eq!(r.events.queries, 30);
        assert_eq!(r.verified_queries, 30);
        assert_eq!(r.epochs.len(), 30);
        assert_eq!(r.cache.lookups(), 30);
    }

    #[test]
    fn report_round_trips() {
        let (wl, e) = small();
        let r = run_workload(&e, &wl.events, BenchConfig::default()).unwrap();
        assert_eq!(RunReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert_eq!(r.epochs_csv().lines().count(), r.epochs.len() + 1);
    }

    #[test]
    fn baselines_agree() {
        let (wl, e) = small();
        let mut store = PolicyStore::new(GroupDirectory::default());
        let ps = wl.campus.generate_policies(5);
        for p in ps.iter().take(400) {
            store.insert_policy(p.clone()).unwrap();
        }
        let qs = sample_queries(&wl.campus, &ps, 10, 1);
        let rows = run_baselines(&e, &store, &qs, &builder_for(&e, CostConstants::default())).unwrap();
        for r in &rows {
            assert_eq!(r.differing_queries, 0, "{:?}", r.approach);
        }
    }
}
