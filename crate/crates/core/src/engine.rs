//! In-process relational engine: row storage, ordered per-attribute indexes,
//! policy-aware scans and instrumentation counters.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::Serialize;

use crate::cost::{CostConstants, ExecMode, SelectivityEstimator};
use crate::error::{Error, Result};
use crate::guards::{Guard, IndexCatalog};
use crate::policy::{CompareOp, ObjectCondition, Policy, Tuple, OWNER_ATTR};
use crate::sql::{Condition, Query, SelectItem};
use crate::value::{Interval, Value, ValueTag};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Schema {
    pub columns: Vec<(String, ValueTag)>,
}

impl Schema {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|(c, _)| c == name)
    }

    pub fn tag_of(&self, name: &str) -> Option<ValueTag> {
        self.columns.iter().find(|(c, _)| c == name).map(|(_, t)| *t)
    }
}

type Index = BTreeMap<Value, Vec<u32>>;

#[derive(Debug)]
pub struct Table {
    pub name: String,
    pub schema: Schema,
    pub rows: Vec<Vec<Value>>,
    pub governed: bool,
    pub estimator: SelectivityEstimator,
    indexes: BTreeMap<String, Index>,
}

impl Table {
    pub fn tuple(&self, row: u32) -> Tuple {
        let r = &self.rows[row as usize];
        Tuple {
            relation: self.name.clone(),
            attributes: self.schema.columns.iter().zip(r).map(|((c, _), v)| (c.clone(), v.clone())).collect(),
        }
    }

    pub fn tuples(&self) -> Vec<Tuple> {
        (0..self.rows.len() as u32).map(|i| self.tuple(i)).collect()
    }

    pub fn is_indexed(&self, attr: &str) -> bool {
        self.indexes.contains_key(attr)
    }

    pub fn indexed_attrs(&self) -> impl Iterator<Item = &String> {
        self.indexes.keys()
    }

    /// Row ids whose `attr` lies in `iv`, in index order.
    pub fn index_range(&self, attr: &str, iv: &Interval) -> Result<Vec<u32>> {
        let idx = self
            .indexes
            .get(attr)
            .ok_or_else(|| Error::ContractViolation(format!("no index on {}.{attr}", self.name)))?;
        let tag = self.schema.tag_of(attr).expect("indexed column exists");
        if let Some(t) = iv.tag() {
            if t != tag {
                return Err(Error::TypeMismatch(format!("{} range on {} column {attr}", t.name(), tag.name())));
            }
        }
        if iv.is_empty() {
            return Ok(Vec::new());
        }
        let lo = iv.lo.as_ref();
        let hi = iv.hi.as_ref();
        Ok(idx.range::<Value, _>((lo, hi)).flat_map(|(_, ids)| ids.iter().copied()).collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ExecStats {
    pub rows_read_random: u64,
    pub rows_read_sequential: u64,
    pub predicate_evals: u64,
    pub policy_evals: u64,
    pub delta_invocations: u64,
    pub delta_candidates: u64,
}

impl ExecStats {
    pub fn add(&mut self, o: &ExecStats) {
        self.rows_read_random += o.rows_read_random;
        self.rows_read_sequential += o.rows_read_sequential;
        self.predicate_evals += o.predicate_evals;
        self.policy_evals += o.policy_evals;
        self.delta_invocations += o.delta_invocations;
        self.delta_candidates += o.delta_candidates;
    }

    /// Counter totals weighted by the unit costs.
    pub fn weighted_cost(&self, k: &CostConstants) -> f64 {
        self.rows_read_random as f64 * k.c_r
            + self.rows_read_sequential as f64 * k.c_r / k.seq_ratio
            + self.policy_evals as f64 * k.c_e
            + self.delta_invocations as f64 * k.udf_inv
            + self.delta_candidates as f64 * k.udf_exec
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub alias: String,
    pub relation: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Filter {
    pub source: usize,
    pub col: usize,
    pub cond: ObjectCondition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JoinPred {
    pub left: (usize, usize),
    pub op: CompareOp,
    pub right: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Output {
    Column(usize, usize),
    Count,
}

/// A query resolved against the catalog, with literals typed.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundQuery {
    pub query: Query,
    pub sources: Vec<Source>,
    pub filters: Vec<Filter>,
    pub joins: Vec<JoinPred>,
    pub outputs: Vec<(String, Output)>,
    pub group_by: Vec<(usize, usize)>,
    pub aggregate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultSet {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl ResultSet {
    /// Rows in a canonical order, for order-insensitive comparison.
    pub fn canonical(&self) -> Vec<Vec<Value>> {
        let mut r = self.rows.clone();
        r.sort();
        r
    }
}

/// How a policy scan reads the base relation.
#[derive(Clone, Debug, PartialEq)]
pub enum Access {
    /// One index range scan per guard, results unioned.
    GuardUnion,
    /// Index scan driven by a query predicate.
    Index { attr: String, ranges: Vec<Interval> },
    FullScan,
}

#[derive(Clone, Debug)]
pub struct TermPlan {
    pub guard: Option<Guard>,
    pub policies: Vec<Arc<Policy>>,
    pub mode: ExecMode,
}

/// The allowed subset of one relation: rows passing some guard, the pushed
/// query predicates, and a policy of that guard's partition.
#[derive(Clone, Debug)]
pub struct PolicyScan {
    pub relation: String,
    pub access: Access,
    pub pushed: Vec<ObjectCondition>,
    pub terms: Vec<TermPlan>,
}

#[derive(Clone, Debug)]
pub struct Plan {
    pub query: BoundQuery,
    pub scans: BTreeMap<String, PolicyScan>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplainRow {
    pub alias: String,
    pub relation: String,
    pub index_attr: Option<String>,
    pub est_rows: f64,
}

struct CompiledPolicy<'a> {
    owner: &'a Value,
    conds: Vec<(usize, &'a ObjectCondition)>,
}

fn cond_rank(c: &ObjectCondition) -> usize {
    use crate::policy::Predicate::*;
    match &c.pred {
        Compare { .. } => 1,
        Range { .. } => 2,
        In { values, .. } => 2 + values.len(),
        Derived { .. } => usize::MAX,
    }
}

fn compile<'a>(p: &'a Policy, schema: &Schema) -> Result<CompiledPolicy<'a>> {
    let mut conds = Vec::with_capacity(p.object_conditions.len());
    for c in &p.object_conditions {
        if c.is_derived() {
            return Err(Error::UnsupportedCondition(format!("derived condition on `{}` in policy {}", c.attr, p.id)));
        }
        if let Some(col) = schema.index_of(&c.attr) {
            conds.push((col, c));
        }
    }
    conds.sort_by_key(|(_, c)| (c.attr != OWNER_ATTR, cond_rank(c)));
    Ok(CompiledPolicy { owner: &p.owner, conds })
}

fn eval_compiled(p: &CompiledPolicy, row: &[Value]) -> Result<bool> {
    for (col, c) in &p.conds {
        if !c.eval_value(&row[*col])? {
            return Ok(false);
        }
    }
    Ok(true)
}

struct CompiledTerm<'a> {
    guard: Option<(usize, &'a Interval)>,
    policies: Vec<CompiledPolicy<'a>>,
    mode: ExecMode,
}

fn term_accepts(t: &CompiledTerm, row: &[Value], owner_col: Option<usize>, stats: &mut ExecStats) -> Result<bool> {
    match t.mode {
        ExecMode::Inline => {
            for p in &t.policies {
                stats.policy_evals += 1;
                if eval_compiled(p, row)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
        ExecMode::Delta => {
            stats.delta_invocations += 1;
            let owner = owner_col.map(|c| &row[c]);
            for p in &t.policies {
                stats.delta_candidates += 1;
                if owner.is_some_and(|o| o == p.owner) {
                    stats.policy_evals += 1;
                    if eval_compiled(p, row)? {
                        return Ok(true);
                    }
                }
            }
            Ok(false)
        }
    }
}

fn eval_filters(filters: &[(usize, &ObjectCondition)], row: &[Value], stats: &mut ExecStats) -> Result<bool> {
    for (col, c) in filters {
        stats.predicate_evals += 1;
        if !c.eval_value(&row[*col])? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn filter_intervals(c: &ObjectCondition) -> Option<Vec<Interval>> {
    match &c.pred {
        crate::policy::Predicate::In { negated: false, values } => {
            let mut vs = values.clone();
            vs.sort();
            vs.dedup();
            Some(vs.into_iter().map(Interval::point).collect())
        }
        _ => c.implied_interval().map(|iv| vec![iv]),
    }
}

#[derive(Debug, Default)]
pub struct Engine {
    tables: BTreeMap<String, Table>,
}

impl Engine {
    pub fn new() -> Engine {
        Engine::default()
    }

    pub fn create_table(&mut self, name: &str, schema: Schema, governed: bool) -> Result<()> {
        if self.tables.contains_key(name) {
            return Err(Error::Config(format!("relation `{name}` already exists")));
        }
        if schema.index_of(OWNER_ATTR).is_none() && governed {
            return Err(Error::Config(format!("governed relation `{name}` needs an `{OWNER_ATTR}` column")));
        }
        self.tables.insert(
            name.to_string(),
            Table {
                name: name.to_string(),
                schema,
                rows: Vec::new(),
                governed,
                estimator: SelectivityEstimator::new(0),
                indexes: BTreeMap::new(),
            },
        );
        if governed {
            self.create_index(name, OWNER_ATTR)?;
        }
        Ok(())
    }

    pub fn insert_rows(&mut self, name: &str, rows: Vec<Vec<Value>>) -> Result<()> {
        let t = self.tables.get_mut(name).ok_or_else(|| Error::UnknownRelation(name.to_string()))?;
        for r in rows {
            if r.len() != t.schema.columns.len() {
                return Err(Error::Config(format!("row width {} does not match `{name}`", r.len())));
            }
            for (v, (c, tag)) in r.iter().zip(&t.schema.columns) {
                if v.tag() != *tag {
                    return Err(Error::TypeMismatch(format!("{} value for {} column `{c}`", v.tag().name(), tag.name())));
                }
            }
            let id = t.rows.len() as u32;
            for (attr, idx) in t.indexes.iter_mut() {
                let col = t.schema.index_of(attr).expect("indexed column");
                idx.entry(r[col].clone()).or_default().push(id);
            }
            t.rows.push(r);
        }
        Ok(())
    }

    /// Loads tuples, creating governed relations with columns in attribute
    /// order when they do not exist yet.
    pub fn load_tuples(&mut self, tuples: &[Tuple]) -> Result<()> {
        let mut grouped: BTreeMap<&str, Vec<&Tuple>> = BTreeMap::new();
        for t in tuples {
            grouped.entry(&t.relation).or_default().push(t);
        }
        for (rel, ts) in grouped {
            if !self.tables.contains_key(rel) {
                let schema =
                    Schema { columns: ts[0].attributes.iter().map(|(k, v)| (k.clone(), v.tag())).collect() };
                self.create_table(rel, schema, true)?;
            }
            let cols: Vec<String> = self.tables[rel].schema.columns.iter().map(|(c, _)| c.clone()).collect();
            let mut rows = Vec::with_capacity(ts.len());
            for t in ts {
                let mut row = Vec::with_capacity(cols.len());
                for c in &cols {
                    row.push(t.attributes.get(c).cloned().ok_or_else(|| Error::UnknownColumn(format!("{rel}.{c}")))?);
                }
                rows.push(row);
            }
            self.insert_rows(rel, rows)?;
        }
        Ok(())
    }

    pub fn create_index(&mut self, name: &str, attr: &str) -> Result<()> {
        let t = self.tables.get_mut(name).ok_or_else(|| Error::UnknownRelation(name.to_string()))?;
        let col = t.schema.index_of(attr).ok_or_else(|| Error::UnknownColumn(format!("{name}.{attr}")))?;
        let mut idx: Index = BTreeMap::new();
        for (i, r) in t.rows.iter().enumerate() {
            idx.entry(r[col].clone()).or_default().push(i as u32);
        }
        t.indexes.insert(attr.to_string(), idx);
        Ok(())
    }

    /// Rebuilds the statistics of a relation.
    pub fn analyze(&mut self, name: &str) -> Result<()> {
        let t = self.tables.get_mut(name).ok_or_else(|| Error::UnknownRelation(name.to_string()))?;
        let mut est = SelectivityEstimator::new(t.rows.len());
        for (i, (c, _)) in t.schema.columns.iter().enumerate() {
            est.add_column(c, t.rows.iter().map(|r| r[i].clone()).collect());
        }
        t.estimator = est;
        Ok(())
    }

    pub fn table(&self, name: &str) -> Result<&Table> {
        self.tables.get(name).ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }

    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.tables.values()
    }

    pub fn catalog(&self) -> IndexCatalog {
        let mut c = IndexCatalog::new();
        for t in self.tables.values() {
            for a in t.indexes.keys() {
                c.add(&t.name, a);
            }
        }
        c
    }

    pub fn estimators(&self) -> BTreeMap<String, SelectivityEstimator> {
        self.tables.values().map(|t| (t.name.clone(), t.estimator.clone())).collect()
    }

    pub fn bind(&self, q: &Query) -> Result<BoundQuery> {
        let mut sources = Vec::new();
        for tr in &q.from {
            self.table(&tr.relation)?;
            let alias = tr.name().to_string();
            if sources.iter().any(|s: &Source| s.alias == alias) {
                return Err(Error::Config(format!("duplicate table alias `{alias}`")));
            }
            sources.push(Source { alias, relation: tr.relation.clone() });
        }
        let resolve = |c: &crate::sql::ColumnRef| -> Result<(usize, usize)> {
            let hits: Vec<(usize, usize)> = sources
                .iter()
                .enumerate()
                .filter(|(_, s)| c.qualifier.as_ref().is_none_or(|q| *q == s.alias))
                .filter_map(|(i, s)| self.tables[&s.relation].schema.index_of(&c.column).map(|col| (i, col)))
                .collect();
            match hits.as_slice() {
                [one] => Ok(*one),
                [] => Err(Error::UnknownColumn(c.to_string())),
                _ => Err(Error::Config(format!("column reference `{c}` is ambiguous"))),
            }
        };
        let tag = |(s, c): (usize, usize)| self.tables[&sources[s].relation].schema.columns[c].1;
        let typed = |at: (usize, usize), lit: &crate::sql::Literal| Value::parse_as(tag(at), lit.text());
        let col_name = |(s, c): (usize, usize)| self.tables[&sources[s].relation].schema.columns[c].0.clone();
        let mut filters = Vec::new();
        let mut joins = Vec::new();
        for cond in &q.conditions {
            match cond {
                Condition::Compare { col, op, lit } => {
                    let at = resolve(col)?;
                    filters.push(Filter {
                        source: at.0,
                        col: at.1,
                        cond: ObjectCondition::compare(&col_name(at), *op, typed(at, lit)?),
                    });
                }
                Condition::Between { col, lo, hi } => {
                    let at = resolve(col)?;
                    filters.push(Filter {
                        source: at.0,
                        col: at.1,
                        cond: ObjectCondition::between(&col_name(at), typed(at, lo)?, typed(at, hi)?),
                    });
                }
                Condition::InList { col, negated, items } => {
                    let at = resolve(col)?;
                    let values = items.iter().map(|l| typed(at, l)).collect::<Result<Vec<_>>>()?;
                    filters.push(Filter {
                        source: at.0,
                        col: at.1,
                        cond: ObjectCondition {
                            attr: col_name(at),
                            pred: crate::policy::Predicate::In { negated: *negated, values },
                        },
                    });
                }
                Condition::Columns { left, op, right } => {
                    let (l, r) = (resolve(left)?, resolve(right)?);
                    if tag(l) != tag(r) {
                        return Err(Error::TypeMismatch(format!("cannot compare `{left}` with `{right}`")));
                    }
                    joins.push(JoinPred { left: l, op: *op, right: r });
                }
            }
        }
        let group_by = q.group_by.iter().map(&resolve).collect::<Result<Vec<_>>>()?;
        let aggregate = !group_by.is_empty() || q.select.iter().any(|s| matches!(s, SelectItem::CountStar { .. }));
        let qualify = sources.len() > 1;
        let out_name = |at: (usize, usize)| {
            if qualify {
                format!("{}.{}", sources[at.0].alias, col_name(at))
            } else {
                col_name(at)
            }
        };
        let mut outputs = Vec::new();
        for item in &q.select {
            match item {
                SelectItem::Star => {
                    for (si, s) in sources.iter().enumerate() {
                        for ci in 0..self.tables[&s.relation].schema.columns.len() {
                            outputs.push((out_name((si, ci)), Output::Column(si, ci)));
                        }
                    }
                }
                SelectItem::QualifiedStar(a) => {
                    let si = sources
                        .iter()
                        .position(|s| &s.alias == a)
                        .ok_or_else(|| Error::UnknownRelation(a.clone()))?;
                    for ci in 0..self.tables[&sources[si].relation].schema.columns.len() {
                        outputs.push((out_name((si, ci)), Output::Column(si, ci)));
                    }
                }
                SelectItem::Column(c) => {
                    let at = resolve(c)?;
                    outputs.push((out_name(at), Output::Column(at.0, at.1)));
                }
                SelectItem::CountStar { alias } => {
                    outputs.push((alias.clone().unwrap_or_else(|| "count".into()), Output::Count));
                }
            }
        }
        if aggregate {
            for (name, o) in &outputs {
                if let Output::Column(s, c) = o {
                    if !group_by.contains(&(*s, *c)) {
                        return Err(Error::Config(format!("`{name}` must appear in GROUP BY")));
                    }
                }
            }
        }
        Ok(BoundQuery { query: q.clone(), sources, filters, joins, outputs, group_by, aggregate })
    }

    /// For each source, the cheapest index access its own predicates allow.
    pub fn explain(&self, bq: &BoundQuery) -> Vec<ExplainRow> {
        bq.sources
            .iter()
            .enumerate()
            .map(|(si, s)| {
                let t = &self.tables[&s.relation];
                let best = self.best_index_filter(bq, si);
                ExplainRow {
                    alias: s.alias.clone(),
                    relation: s.relation.clone(),
                    index_attr: best.as_ref().map(|(a, _, _)| a.clone()),
                    est_rows: best.map_or(t.rows.len() as f64, |(_, _, e)| e),
                }
            })
            .collect()
    }

    /// The most selective indexed predicate on one source, with its ranges
    /// and estimated cardinality.
    pub fn best_index_filter(&self, bq: &BoundQuery, source: usize) -> Option<(String, Vec<Interval>, f64)> {
        let t = &self.tables[&bq.sources[source].relation];
        bq.filters
            .iter()
            .filter(|f| f.source == source && t.is_indexed(&f.cond.attr))
            .filter_map(|f| filter_intervals(&f.cond).map(|r| (f.cond.attr.clone(), r, t.estimator.estimate_condition(&f.cond))))
            .min_by(|a, b| a.2.total_cmp(&b.2).then_with(|| a.0.cmp(&b.0)))
    }

    /// Row ids of `relation` the scan lets through, sorted.
    pub fn run_policy_scan(&self, scan: &PolicyScan, stats: &mut ExecStats) -> Result<Vec<u32>> {
        let t = self.table(&scan.relation)?;
        let schema = &t.schema;
        let owner_col = schema.index_of(OWNER_ATTR);
        let pushed: Vec<(usize, &ObjectCondition)> = scan
            .pushed
            .iter()
            .map(|c| schema.index_of(&c.attr).map(|i| (i, c)).ok_or_else(|| Error::UnknownColumn(c.attr.clone())))
            .collect::<Result<_>>()?;
        let mut terms = Vec::with_capacity(scan.terms.len());
        for term in &scan.terms {
            let guard = match &term.guard {
                Some(g) => Some((
                    schema.index_of(&g.attr).ok_or_else(|| Error::UnknownColumn(g.attr.clone()))?,
                    &g.interval,
                )),
                None => None,
            };
            let policies = term.policies.iter().map(|p| compile(p, schema)).collect::<Result<Vec<_>>>()?;
            terms.push(CompiledTerm { guard, policies, mode: term.mode });
        }
        let mut accepted = vec![false; t.rows.len()];
        let mut check = |rid: u32, row: &[Value], only: Option<usize>, stats: &mut ExecStats| -> Result<()> {
            if accepted[rid as usize] || !eval_filters(&pushed, row, stats)? {
                return Ok(());
            }
            let range: Box<dyn Iterator<Item = usize>> = match only {
                Some(i) => Box::new(std::iter::once(i)),
                None => Box::new(0..terms.len()),
            };
            for ti in range {
                let term = &terms[ti];
                if only.is_none() {
                    if let Some((col, iv)) = term.guard {
                        stats.predicate_evals += 1;
                        if !iv.contains_value(&row[col])? {
                            continue;
                        }
                    }
                }
                if term_accepts(term, row, owner_col, stats)? {
                    accepted[rid as usize] = true;
                    break;
                }
            }
            Ok(())
        };
        match &scan.access {
            Access::GuardUnion => {
                for (ti, term) in scan.terms.iter().enumerate() {
                    let g = term.guard.as_ref().ok_or_else(|| {
                        Error::ContractViolation("a guard-union scan needs a guard on every term".into())
                    })?;
                    for rid in t.index_range(&g.attr, &g.interval)? {
                        stats.rows_read_random += 1;
                        check(rid, &t.rows[rid as usize], Some(ti), stats)?;
                    }
                }
            }
            Access::Index { attr, ranges } => {
                for iv in ranges {
                    for rid in t.index_range(attr, iv)? {
                        stats.rows_read_random += 1;
                        check(rid, &t.rows[rid as usize], None, stats)?;
                    }
                }
            }
            Access::FullScan => {
                for (rid, row) in t.rows.iter().enumerate() {
                    stats.rows_read_sequential += 1;
                    check(rid as u32, row, None, stats)?;
                }
            }
        }
        Ok(accepted.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| i as u32).collect())
    }

    /// Executes a plan: policy scans first, then the query over their output.
    pub fn execute(&self, plan: &Plan) -> Result<(ResultSet, ExecStats)> {
        let mut stats = ExecStats::default();
        let mut allowed: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for (rel, scan) in &plan.scans {
            allowed.insert(rel.as_str(), self.run_policy_scan(scan, &mut stats)?);
        }
        let mut inputs = Vec::new();
        for s in &plan.query.sources {
            let t = self.table(&s.relation)?;
            match allowed.get(s.relation.as_str()) {
                Some(ids) => inputs.push(ids.clone()),
                None if t.governed => return Err(Error::EnforcementUnavailable(s.relation.clone())),
                None => {
                    stats.rows_read_sequential += t.rows.len() as u64;
                    inputs.push((0..t.rows.len() as u32).collect());
                }
            }
        }
        let rs = self.run_query(&plan.query, inputs, &mut stats)?;
        Ok((rs, stats))
    }

    /// Runs the query over explicit per-source row sets, with no policy
    /// checks. The oracle path uses this over its own allowed sets.
    pub fn run_query(&self, bq: &BoundQuery, inputs: Vec<Vec<u32>>, stats: &mut ExecStats) -> Result<ResultSet> {
        let tabs: Vec<&Table> = bq.sources.iter().map(|s| &self.tables[&s.relation]).collect();
        let mut filtered = Vec::with_capacity(inputs.len());
        for (si, ids) in inputs.into_iter().enumerate() {
            let fs: Vec<(usize, &ObjectCondition)> =
                bq.filters.iter().filter(|f| f.source == si).map(|f| (f.col, &f.cond)).collect();
            let mut keep = Vec::new();
            for rid in ids {
                if eval_filters(&fs, &tabs[si].rows[rid as usize], stats)? {
                    keep.push(rid);
                }
            }
            filtered.push(keep);
        }
        let val = |combo: &[u32], (s, c): (usize, usize)| &tabs[s].rows[combo[s] as usize][c];
        let mut combos: Vec<Vec<u32>> = filtered[0].iter().map(|r| vec![*r]).collect();
        let mut used = vec![false; bq.joins.len()];
        for si in 1..bq.sources.len() {
            let eq = bq.joins.iter().enumerate().find(|(ji, j)| {
                !used[*ji]
                    && j.op == CompareOp::Eq
                    && ((j.left.0 == si && j.right.0 < si) || (j.right.0 == si && j.left.0 < si))
            });
            let mut next = Vec::new();
            if let Some((ji, j)) = eq {
                used[ji] = true;
                let (mine, theirs) = if j.left.0 == si { (j.left, j.right) } else { (j.right, j.left) };
                let mut ht: HashMap<&Value, Vec<u32>> = HashMap::new();
                for &rid in &filtered[si] {
                    ht.entry(&tabs[si].rows[rid as usize][mine.1]).or_default().push(rid);
                }
                for combo in &combos {
                    stats.predicate_evals += 1;
                    if let Some(ms) = ht.get(val(combo, theirs)) {
                        for &m in ms {
                            let mut c = combo.clone();
                            c.push(m);
                            next.push(c);
                        }
                    }
                }
            } else {
                for combo in &combos {
                    for &m in &filtered[si] {
                        let mut c = combo.clone();
                        c.push(m);
                        next.push(c);
                    }
                }
            }
            combos = next;
            for (ji, j) in bq.joins.iter().enumerate() {
                if !used[ji] && j.left.0 <= si && j.right.0 <= si {
                    used[ji] = true;
                    let mut keep = Vec::with_capacity(combos.len());
                    for c in combos {
                        stats.predicate_evals += 1;
                        if j.op.holds(val(&c, j.left).try_cmp(val(&c, j.right))?) {
                            keep.push(c);
                        }
                    }
                    combos = keep;
                }
            }
        }
        for (ji, j) in bq.joins.iter().enumerate() {
            if !used[ji] {
                let mut keep = Vec::with_capacity(combos.len());
                for c in combos {
                    stats.predicate_evals += 1;
                    if j.op.holds(val(&c, j.left).try_cmp(val(&c, j.right))?) {
                        keep.push(c);
                    }
                }
                combos = keep;
            }
        }
        let columns: Vec<String> = bq.outputs.iter().map(|(n, _)| n.clone()).collect();
        let rows = if bq.aggregate {
            let mut groups: BTreeMap<Vec<Value>, u64> = BTreeMap::new();
            for c in &combos {
                let key: Vec<Value> = bq.group_by.iter().map(|at| val(c, *at).clone()).collect();
                *groups.entry(key).or_default() += 1;
            }
            if groups.is_empty() && bq.group_by.is_empty() {
                groups.insert(Vec::new(), 0);
            }
            groups
                .into_iter()
                .map(|(key, n)| {
                    bq.outputs
                        .iter()
                        .map(|(_, o)| match o {
                            Output::Count => Value::Int(n as i64),
                            Output::Column(s, c) => {
                                let pos = bq.group_by.iter().position(|g| *g == (*s, *c)).expect("checked at bind");
                                key[pos].clone()
                            }
                        })
                        .collect()
                })
                .collect()
        } else {
            combos
                .iter()
                .map(|c| {
                    bq.outputs
                        .iter()
                        .map(|(_, o)| match o {
                            Output::Column(s, col) => val(c, (*s, *col)).clone(),
                            Output::Count => unreachable!("count implies aggregate"),
                        })
                        .collect()
                })
                .collect()
        };
        Ok(ResultSet { columns, rows })
    }
}
