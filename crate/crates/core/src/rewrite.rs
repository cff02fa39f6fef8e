//! Query rewriting: every governed relation in FROM is replaced by a policy
//! CTE built from its guarded expression. Output SQL is deterministic.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::{strategy_costs, CostConstants, ExecMode, Strategy, StrategyCosts};
use crate::engine::{Access, BoundQuery, Engine, ExecStats, Plan, PolicyScan, ResultSet, TermPlan};
use crate::error::{Error, Result};
use crate::policy::{ObjectCondition, Policy, QueryMetadata, OWNER_ATTR};
use crate::selection::GuardedExpression;
use crate::sql::{parse_query, REWRITE_MARKER};

/// Predicates estimated to keep less than this share of the relation are
/// copied into every guard branch.
pub const PUSHDOWN_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainSupport {
    None,
    Cardinality,
}

/// What the target database accepts. Loaded from TOML by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DialectCapabilities {
    pub name: String,
    pub supports_index_hints: bool,
    pub supports_union_branch_rewrite: bool,
    pub supports_udf: bool,
    pub explain: ExplainSupport,
    /// `{indexes}` is replaced by a comma-separated index list.
    pub force_index_template: String,
    pub ignore_index_template: String,
    /// `{relation}` and `{attr}` are substituted.
    pub index_name_template: String,
    pub udf_name: String,
    pub cte_suffix: String,
}

impl Default for DialectCapabilities {
    fn default() -> Self {
        DialectCapabilities::embedded()
    }
}

impl DialectCapabilities {
    pub fn embedded() -> DialectCapabilities {
        DialectCapabilities {
            name: "embedded".into(),
            supports_index_hints: true,
            supports_union_branch_rewrite: true,
            supports_udf: true,
            explain: ExplainSupport::Cardinality,
            force_index_template: "FORCE INDEX ({indexes})".into(),
            ignore_index_template: "USE INDEX ()".into(),
            index_name_template: "idx_{attr}".into(),
            udf_name: "delta".into(),
            cte_suffix: "Pol".into(),
        }
    }

    pub fn hinted() -> DialectCapabilities {
        DialectCapabilities { name: "hinted".into(), ..DialectCapabilities::embedded() }
    }

    pub fn plain() -> DialectCapabilities {
        DialectCapabilities {
            name: "plain".into(),
            supports_index_hints: false,
            supports_union_branch_rewrite: false,
            ..DialectCapabilities::embedded()
        }
    }

    pub fn by_name(name: &str) -> Result<DialectCapabilities> {
        match name {
            "embedded" => Ok(DialectCapabilities::embedded()),
            "hinted" => Ok(DialectCapabilities::hinted()),
            "plain" => Ok(DialectCapabilities::plain()),
            other => Err(Error::Config(format!("unknown dialect `{other}`"))),
        }
    }

    fn index_name(&self, relation: &str, attr: &str) -> String {
        self.index_name_template.replace("{relation}", relation).replace("{attr}", attr)
    }

    fn force(&self, relation: &str, attrs: &[&str]) -> String {
        let names: Vec<String> = attrs.iter().map(|a| self.index_name(relation, a)).collect();
        self.force_index_template.replace("{indexes}", &names.join(", "))
    }
}

#[derive(Clone, Debug)]
pub struct Rewritten {
    pub sql: String,
    pub plan: Plan,
    pub strategies: BTreeMap<String, StrategyCosts>,
}

fn policy_sql(p: &Policy, schema: &crate::engine::Schema) -> String {
    let parts: Vec<String> = p
        .object_conditions
        .iter()
        .filter(|c| c.is_derived() || schema.index_of(&c.attr).is_some())
        .map(|c| c.to_sql(&c.attr))
        .collect();
    if parts.is_empty() {
        "TRUE".into()
    } else {
        format!("({})", parts.join(" AND "))
    }
}

fn delta_sql(
    caps: &DialectCapabilities,
    guard_id: usize,
    qm: &QueryMetadata,
    policies: &[Arc<Policy>],
    schema: &crate::engine::Schema,
) -> String {
    let mut cols: Vec<&str> = vec![OWNER_ATTR];
    for (c, _) in &schema.columns {
        if c != OWNER_ATTR && policies.iter().any(|p| p.object_conditions.iter().any(|oc| &oc.attr == c)) {
            cols.push(c);
        }
    }
    let lit = |s: &str| format!("'{}'", s.replace('\'', "''"));
    format!("{}({guard_id}, {}, {}, {}) = TRUE", caps.udf_name, lit(&qm.querier), lit(&qm.purpose), cols.join(", "))
}

/// Rewrites a bound query. `ges` maps each governed relation to its guarded
/// expression; a governed relation without one is refused.
pub fn rewrite(
    bq: &BoundQuery,
    qm: &QueryMetadata,
    caps: &DialectCapabilities,
    ges: &BTreeMap<String, Arc<GuardedExpression>>,
    engine: &Engine,
    k: &CostConstants,
) -> Result<Rewritten> {
    let mut relations: Vec<&str> = Vec::new();
    for s in &bq.sources {
        if !relations.contains(&s.relation.as_str()) && engine.table(&s.relation)?.governed {
            relations.push(&s.relation);
        }
    }
    let mut scans = BTreeMap::new();
    let mut ctes = Vec::new();
    let mut strategies = BTreeMap::new();
    for rel in &relations {
        let ge = ges.get(*rel).ok_or_else(|| Error::EnforcementUnavailable(rel.to_string()))?;
        if ge.key.querier != qm.querier || ge.key.purpose != qm.purpose || ge.key.relation != *rel {
            return Err(Error::ContractViolation(format!(
                "guarded expression for ({}, {}, {}) used for ({}, {}, {rel})",
                ge.key.querier, ge.key.purpose, ge.key.relation, qm.querier, qm.purpose
            )));
        }
        let table = engine.table(rel)?;
        let occurrences: Vec<usize> =
            bq.sources.iter().enumerate().filter(|(_, s)| s.relation == *rel).map(|(i, _)| i).collect();
        let single = (occurrences.len() == 1).then(|| occurrences[0]);
        let row_count = table.rows.len();
        let pushed: Vec<ObjectCondition> = match single {
            Some(si) => bq
                .filters
                .iter()
                .filter(|f| f.source == si)
                .filter(|f| table.estimator.estimate_condition(&f.cond) < PUSHDOWN_FRACTION * row_count as f64)
                .map(|f| f.cond.clone())
                .collect(),
            None => Vec::new(),
        };
        let probe = match (single, caps.explain) {
            (Some(si), ExplainSupport::Cardinality) => engine.best_index_filter(bq, si),
            _ => None,
        };
        let guard_sels: Vec<f64> = ge.terms.iter().map(|t| t.est_sel).collect();
        let costs = strategy_costs(probe.as_ref().map(|p| p.2), &guard_sels, row_count, k);
        let terms: Vec<TermPlan> = ge
            .terms
            .iter()
            .map(|t| {
                let policies = t
                    .partition
                    .iter()
                    .map(|id| {
                        ge.policies.get(id).cloned().ok_or_else(|| {
                            Error::ContractViolation(format!("policy {id} missing from guarded expression"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mode = if caps.supports_udf { t.exec_mode } else { ExecMode::Inline };
                Ok(TermPlan { guard: Some(t.guard.clone()), policies, mode })
            })
            .collect::<Result<_>>()?;
        let access = match costs.chosen {
            Strategy::IndexGuards => Access::GuardUnion,
            Strategy::IndexQuery => {
                let (attr, ranges, _) = probe.clone().expect("index query implies a probe");
                Access::Index { attr, ranges }
            }
            Strategy::LinearScan => Access::FullScan,
        };

        let term_sql: Vec<String> = terms
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let g = t.guard.as_ref().expect("guarded");
                let mut parts = vec![g.to_sql()];
                parts.extend(pushed.iter().map(|c| c.to_sql(&c.attr)));
                let body = match t.mode {
                    ExecMode::Delta => delta_sql(caps, i + 1, qm, &t.policies, &table.schema),
                    ExecMode::Inline => {
                        let ps: Vec<String> = t.policies.iter().map(|p| policy_sql(p, &table.schema)).collect();
                        format!("({})", ps.join(" OR "))
                    }
                };
                parts.push(body);
                format!("({})", parts.join(" AND "))
            })
            .collect();
        let hints = caps.supports_index_hints;
        let body = if terms.is_empty() {
            format!("SELECT * FROM {rel} WHERE FALSE")
        } else {
            match costs.chosen {
                Strategy::IndexGuards if hints && caps.supports_union_branch_rewrite => terms
                    .iter()
                    .zip(&term_sql)
                    .map(|(t, s)| {
                        let attr = t.guard.as_ref().expect("guarded").attr.as_str();
                        format!("SELECT * FROM {rel} {} WHERE {s}", caps.force(rel, &[attr]))
                    })
                    .collect::<Vec<_>>()
                    .join(" UNION "),
                Strategy::IndexGuards if hints => {
                    let mut attrs: Vec<&str> = Vec::new();
                    for t in &terms {
                        let a = t.guard.as_ref().expect("guarded").attr.as_str();
                        if !attrs.contains(&a) {
                            attrs.push(a);
                        }
                    }
                    format!("SELECT * FROM {rel} {} WHERE {}", caps.force(rel, &attrs), term_sql.join(" OR "))
                }
                Strategy::IndexQuery if hints => {
                    let attr = probe.as_ref().expect("probe").0.as_str();
                    format!("SELECT * FROM {rel} {} WHERE {}", caps.force(rel, &[attr]), term_sql.join(" OR "))
                }
                Strategy::LinearScan if hints => {
                    format!("SELECT * FROM {rel} {} WHERE {}", caps.ignore_index_template, term_sql.join(" OR "))
                }
                _ => format!("SELECT * FROM {rel} WHERE {}", term_sql.join(" OR ")),
            }
        };
        ctes.push(format!("{rel}{} AS ({body})", caps.cte_suffix));
        strategies.insert(rel.to_string(), costs);
        scans.insert(rel.to_string(), PolicyScan { relation: rel.to_string(), access, pushed, terms });
    }
    let governed: Vec<String> = relations.iter().map(|r| r.to_string()).collect();
    let suffix = caps.cte_suffix.clone();
    let outer = bq.query.render_with(&|r: &str| {
        if governed.iter().any(|g| g == r) {
            format!("{r}{suffix}")
        } else {
            r.to_string()
        }
    });
    let sql = if ctes.is_empty() {
        format!("{REWRITE_MARKER} {outer}")
    } else {
        format!("{REWRITE_MARKER} WITH {} {outer}", ctes.join(", "))
    };
    Ok(Rewritten { sql, plan: Plan { query: bq.clone(), scans }, strategies })
}

/// Parses, binds and rewrites query text.
pub fn rewrite_sql(
    text: &str,
    qm: &QueryMetadata,
    caps: &DialectCapabilities,
    ges: &BTreeMap<String, Arc<GuardedExpression>>,
    engine: &Engine,
    k: &CostConstants,
) -> Result<Rewritten> {
    let q = parse_query(text)?;
    let bq = engine.bind(&q)?;
    rewrite(&bq, qm, caps, ges, engine, k)
}

/// Rewrites for the embedded engine and runs the result.
pub fn enforce_and_execute(
    text: &str,
    qm: &QueryMetadata,
    ges: &BTreeMap<String, Arc<GuardedExpression>>,
    engine: &Engine,
    k: &CostConstants,
) -> Result<(ResultSet, ExecStats, Rewritten)> {
    let rw = rewrite_sql(text, qm, &DialectCapabilities::embedded(), ges, engine, k)?;
    let (rs, stats) = engine.execute(&rw.plan)?;
    Ok((rs, stats, rw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Schema;
    use crate::guards::Guard;
    use crate::policy::{Action, PolicyId};
    use crate::selection::GuardTerm;
    use crate::store::GeKey;
    use crate::value::{Interval, Value, ValueTag};

    fn engine() -> Engine {
        let mut e = Engine::new();
        let schema =
            Schema { columns: vec![("location_id".into(), ValueTag::Int), ("owner".into(), ValueTag::Int)] };
        e.create_table("wifi", schema, true).unwrap();
        e.insert_rows("wifi", (0..1000).map(|i| vec![Value::Int(i % 50), Value::Int(i % 13)]).collect()).unwrap();
        e.create_index("wifi", "location_id").unwrap();
        e.create_index("wifi", "owner").unwrap();
        e.analyze("wifi").unwrap();
        e
    }

    fn ge(terms: Vec<(i64, Vec<(u64, i64)>)>) -> Arc<GuardedExpression> {
        let mut policies = BTreeMap::new();
        let mut ts = Vec::new();
        for (loc, ps) in terms {
            let mut part = Vec::new();
            for (id, owner) in ps {
                policies.insert(
                    PolicyId(id),
                    Arc::new(Policy {
                        id: PolicyId(id),
                        relation: "wifi".into(),
                        owner: Value::Int(owner),
                        object_conditions: vec![
                            ObjectCondition::eq("owner", Value::Int(owner)),
                            ObjectCondition::eq("location_id", Value::Int(loc)),
                        ],
                        querier: "q".into(),
                        purpose: "p".into(),
                        action: Action::Allow,
                        inserted_at: 0,
                    }),
                );
                part.push(PolicyId(id));
            }
            ts.push(GuardTerm {
                guard: Guard { attr: "location_id".into(), interval: Interval::point(Value::Int(loc)) },
                partition: part,
                exec_mode: ExecMode::Inline,
                est_sel: 20.0,
            });
        }
        Arc::new(GuardedExpression { key: GeKey::new("q", "p", "wifi"), terms: ts, policies, built_at: 0 })
    }

    fn qm() -> QueryMetadata {
        QueryMetadata::new("q", "p")
    }

    #[test]
    fn union_branches_with_hints() {
        let e = engine();
        let ges = BTreeMap::from([("wifi".to_string(), ge(vec![(3, vec![(1, 1), (2, 2)]), (4, vec![(3, 5)])]))]);
        let rw = rewrite_sql("SELECT * FROM wifi", &qm(), &DialectCapabilities::hinted(), &ges, &e, &CostConstants::default())
            .unwrap();
        assert_eq!(
            rw.sql,
            "/* sieve:enforced */ WITH wifiPol AS (SELECT * FROM wifi FORCE INDEX (idx_location_id) WHERE (location_id = 3 AND ((owner = 1 AND location_id = 3) OR (owner = 2 AND location_id = 3))) UNION SELECT * FROM wifi FORCE INDEX (idx_location_id) WHERE (location_id = 4 AND ((owner = 5 AND location_id = 4)))) SELECT * FROM wifiPol AS wifi"
        );
        let plain = rewrite_sql("SELECT * FROM wifi", &qm(), &DialectCapabilities::plain(), &ges, &e, &CostConstants::default())
            .unwrap();
        assert!(!plain.sql.contains("FORCE INDEX") && !plain.sql.contains("UNION"));
        assert!(plain.sql.contains(") OR ("));
    }

    #[test]
    fn empty_ge_yields_false() {
        let e = engine();
        let ges = BTreeMap::from([("wifi".to_string(), ge(vec![]))]);
        let (rs, _, rw) = enforce_and_execute("SELECT * FROM wifi", &qm(), &ges, &e, &CostConstants::default()).unwrap();
        assert!(rw.sql.contains("WHERE FALSE"));
        assert!(rs.rows.is_empty());
    }

    #[test]
    fn missing_ge_fails_closed() {
        let e = engine();
        let err = rewrite_sql("SELECT * FROM wifi", &qm(), &DialectCapabilities::embedded(), &BTreeMap::new(), &e, &CostConstants::default());
        assert!(matches!(err, Err(Error::EnforcementUnavailable(_))));
    }

    #[test]
    fn rewritten_text_is_refused() {
        let e = engine();
        let ges = BTreeMap::from([("wifi".to_string(), ge(vec![(3, vec![(1, 1)])]))]);
        let rw = rewrite_sql("SELECT * FROM wifi", &qm(), &DialectCapabilities::embedded(), &ges, &e, &CostConstants::default())
            .unwrap();
        let again = rewrite_sql(&rw.sql, &qm(), &DialectCapabilities::embedded(), &ges, &e, &CostConstants::default());
        assert!(matches!(again, Err(Error::AlreadyRewritten)));
    }

    #[test]
    fn self_join_uses_one_cte_and_pushes_nothing() {
        let e = engine();
        let ges = BTreeMap::from([("wifi".to_string(), ge(vec![(3, vec![(1, 1), (2, 2)])]))]);
        let rw = rewrite_sql(
            "SELECT a.owner FROM wifi a, wifi b WHERE a.location_id = b.location_id AND a.owner = 1",
            &qm(),
            &DialectCapabilities::embedded(),
            &ges,
            &e,
            &CostConstants::default(),
        )
        .unwrap();
        assert_eq!(rw.sql.matches(" AS (").count(), 1);
        assert!(rw.sql.ends_with("FROM wifiPol AS a, wifiPol AS b WHERE a.location_id = b.location_id AND a.owner = 1"));
        assert!(rw.plan.scans["wifi"].pushed.is_empty());
    }

    #[test]
    fn selective_predicates_are_pushed() {
        let e = engine();
        let ges = BTreeMap::from([("wifi".to_string(), ge(vec![(3, vec![(1, 1)])]))]);
        let rw = rewrite_sql(
            "SELECT * FROM wifi WHERE owner = 1 AND location_id >= 0",
            &qm(),
            &DialectCapabilities::embedded(),
            &ges,
            &e,
            &CostConstants::default(),
        )
        .unwrap();
        let pushed = &rw.plan.scans["wifi"].pushed;
        assert_eq!(pushed.len(), 1);
        assert_eq!(pushed[0].attr, "owner");
    }

    #[test]
    fn delta_form() {
        let e = engine();
        let mut g = (*ge(vec![(3, vec![(1, 1), (2, 2)])])).clone();
        g.terms[0].exec_mode = ExecMode::Delta;
        let ges = BTreeMap::from([("wifi".to_string(), Arc::new(g))]);
        let rw = rewrite_sql("SELECT * FROM wifi", &qm(), &DialectCapabilities::embedded(), &ges, &e, &CostConstants::default())
            .unwrap();
        assert!(rw.sql.contains("delta(1, 'q', 'p', owner, location_id) = TRUE"), "{}", rw.sql);
    }
}
