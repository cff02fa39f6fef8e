//! Policy model, group membership and the reference (oracle) semantics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Bound;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::value::{Interval, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyId(pub u64);

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const OWNER_ATTR: &str = "owner";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CompareOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
        }
    }

    pub fn parse(s: &str) -> Option<CompareOp> {
        Some(match s {
            "=" => CompareOp::Eq,
            "!=" | "<>" => CompareOp::Ne,
            "<" => CompareOp::Lt,
            "<=" => CompareOp::Le,
            ">" => CompareOp::Gt,
            ">=" => CompareOp::Ge,
            _ => return None,
        })
    }

    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CompareOp::Eq => ord == Equal,
            CompareOp::Ne => ord != Equal,
            CompareOp::Lt => ord == Less,
            CompareOp::Le => ord != Greater,
            CompareOp::Gt => ord == Greater,
            CompareOp::Ge => ord != Less,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predicate {
    Compare { op: CompareOp, value: Value },
    In { negated: bool, values: Vec<Value> },
    /// `lo lo_op attr AND attr hi_op hi`; lo_op is `>` or `>=`, hi_op `<` or `<=`.
    Range { lo_op: CompareOp, lo: Value, hi_op: CompareOp, hi: Value },
    /// Compared against the result of a nested query. Carried through
    /// rewriting as opaque SQL, never evaluated in-process.
    Derived { op: CompareOp, expr: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConditionRepr", into = "ConditionRepr")]
pub struct ObjectCondition {
    pub attr: String,
    pub pred: Predicate,
}

impl ObjectCondition {
    pub fn compare(attr: &str, op: CompareOp, value: Value) -> ObjectCondition {
        ObjectCondition { attr: attr.to_string(), pred: Predicate::Compare { op, value } }
    }

    pub fn eq(attr: &str, value: Value) -> ObjectCondition {
        ObjectCondition::compare(attr, CompareOp::Eq, value)
    }

    pub fn between(attr: &str, lo: Value, hi: Value) -> ObjectCondition {
        ObjectCondition {
            attr: attr.to_string(),
            pred: Predicate::Range { lo_op: CompareOp::Ge, lo, hi_op: CompareOp::Le, hi },
        }
    }

    pub fn in_list(attr: &str, values: Vec<Value>) -> ObjectCondition {
        ObjectCondition { attr: attr.to_string(), pred: Predicate::In { negated: false, values } }
    }

    pub fn is_derived(&self) -> bool {
        matches!(self.pred, Predicate::Derived { .. })
    }

    /// Evaluates against one attribute value.
    pub fn eval_value(&self, v: &Value) -> Result<bool> {
        match &self.pred {
            Predicate::Compare { op, value } => Ok(op.holds(v.try_cmp(value)?)),
            Predicate::In { negated, values } => {
                let mut found = false;
                for c in values {
                    if v.try_cmp(c)?.is_eq() {
                        found = true;
                        break;
                    }
                }
                Ok(found != *negated)
            }
            Predicate::Range { lo_op, lo, hi_op, hi } => {
                Ok(lo_op.holds(v.try_cmp(lo)?) && hi_op.holds(v.try_cmp(hi)?))
            }
            Predicate::Derived { .. } => {
                Err(Error::UnsupportedCondition(format!("derived condition on `{}`", self.attr)))
            }
        }
    }

    /// The interval implied by this condition, when it is a single range.
    /// `!=`, `NOT IN` and derived conditions imply none; `IN` implies the hull
    /// of its values.
    pub fn implied_interval(&self) -> Option<Interval> {
        match &self.pred {
            Predicate::Compare { op, value } => {
                let v = value.clone();
                Some(match op {
                    CompareOp::Eq => Interval::point(v),
                    CompareOp::Lt => Interval::new(Bound::Unbounded, Bound::Excluded(v)),
                    CompareOp::Le => Interval::new(Bound::Unbounded, Bound::Included(v)),
                    CompareOp::Gt => Interval::new(Bound::Excluded(v), Bound::Unbounded),
                    CompareOp::Ge => Interval::new(Bound::Included(v), Bound::Unbounded),
                    CompareOp::Ne => return None,
                })
            }
            Predicate::In { negated: false, values } => {
                let lo = values.iter().min()?.clone();
                let hi = values.iter().max()?.clone();
                Some(Interval::closed(lo, hi))
            }
            Predicate::Range { lo_op, lo, hi_op, hi } => {
                let lo = if *lo_op == CompareOp::Gt { Bound::Excluded(lo.clone()) } else { Bound::Included(lo.clone()) };
                let hi = if *hi_op == CompareOp::Lt { Bound::Excluded(hi.clone()) } else { Bound::Included(hi.clone()) };
                Some(Interval::new(lo, hi))
            }
            _ => None,
        }
    }

    /// Renders as a SQL boolean expression.
    pub fn to_sql(&self, column: &str) -> String {
        match &self.pred {
            Predicate::Compare { op, value } => format!("{column} {} {}", op.symbol(), value.sql_literal()),
            Predicate::In { negated, values } => {
                let list: Vec<String> = values.iter().map(Value::sql_literal).collect();
                let not = if *negated { "NOT " } else { "" };
                format!("{column} {not}IN ({})", list.join(", "))
            }
            Predicate::Range { lo_op, lo, hi_op, hi } => {
                if *lo_op == CompareOp::Ge && *hi_op == CompareOp::Le {
                    format!("{column} BETWEEN {} AND {}", lo.sql_literal(), hi.sql_literal())
                } else {
                    format!(
                        "{column} {} {} AND {column} {} {}",
                        lo_op.symbol(),
                        lo.sql_literal(),
                        hi_op.symbol(),
                        hi.sql_literal()
                    )
                }
            }
            Predicate::Derived { op, expr } => format!("{column} {} ({expr})", op.symbol()),
        }
    }

    /// Converts an interval back to the simplest equivalent condition.
    pub fn from_interval(attr: &str, iv: &Interval) -> ObjectCondition {
        if let Some(v) = iv.as_point() {
            return ObjectCondition::eq(attr, v.clone());
        }
        let pred = match (&iv.lo, &iv.hi) {
            (Bound::Unbounded, Bound::Unbounded) => {
                // Never produced for guards; kept total for completeness.
                Predicate::In { negated: true, values: vec![] }
            }
            (Bound::Unbounded, Bound::Included(v)) => Predicate::Compare { op: CompareOp::Le, value: v.clone() },
            (Bound::Unbounded, Bound::Excluded(v)) => Predicate::Compare { op: CompareOp::Lt, value: v.clone() },
            (Bound::Included(v), Bound::Unbounded) => Predicate::Compare { op: CompareOp::Ge, value: v.clone() },
            (Bound::Excluded(v), Bound::Unbounded) => Predicate::Compare { op: CompareOp::Gt, value: v.clone() },
            (lo, hi) => {
                let (lo_op, lo) = match lo {
                    Bound::Included(v) => (CompareOp::Ge, v.clone()),
                    Bound::Excluded(v) => (CompareOp::Gt, v.clone()),
                    Bound::Unbounded => unreachable!(),
                };
                let (hi_op, hi) = match hi {
                    Bound::Included(v) => (CompareOp::Le, v.clone()),
                    Bound::Excluded(v) => (CompareOp::Lt, v.clone()),
                    Bound::Unbounded => unreachable!(),
                };
                Predicate::Range { lo_op, lo, hi_op, hi }
            }
        };
        ObjectCondition { attr: attr.to_string(), pred }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ReprVal {
    One(Value),
    Many(Vec<Value>),
}

#[derive(Serialize, Deserialize)]
struct ConditionRepr {
    attr: String,
    op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    val: Option<ReprVal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo_op: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi_op: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    derived: Option<String>,
}

impl From<ObjectCondition> for ConditionRepr {
    fn from(c: ObjectCondition) -> Self {
        let mut r = ConditionRepr { attr: c.attr, op: String::new(), val: None, lo_op: None, hi_op: None, derived: None };
        match c.pred {
            Predicate::Compare { op, value } => {
                r.op = op.symbol().into();
                r.val = Some(ReprVal::One(value));
            }
            Predicate::In { negated, values } => {
                r.op = if negated { "NOT IN".into() } else { "IN".into() };
                r.val = Some(ReprVal::Many(values));
            }
            Predicate::Range { lo_op, lo, hi_op, hi } => {
                r.op = "range".into();
                r.val = Some(ReprVal::Many(vec![lo, hi]));
                r.lo_op = Some(lo_op.symbol().into());
                r.hi_op = Some(hi_op.symbol().into());
            }
            Predicate::Derived { op, expr } => {
                r.op = op.symbol().into();
                r.derived = Some(expr);
            }
        }
        r
    }
}

impl TryFrom<ConditionRepr> for ObjectCondition {
    type Error = String;

    fn try_from(r: ConditionRepr) -> std::result::Result<Self, String> {
        let pred = match (r.op.as_str(), r.val, r.derived) {
            (op, None, Some(expr)) => Predicate::Derived { op: CompareOp::parse(op).ok_or("bad operator")?, expr },
            ("IN", Some(ReprVal::Many(values)), None) => Predicate::In { negated: false, values },
            ("NOT IN", Some(ReprVal::Many(values)), None) => Predicate::In { negated: true, values },
            ("range", Some(ReprVal::Many(mut v)), None) if v.len() == 2 => {
                let hi = v.pop().unwrap();
                let lo = v.pop().unwrap();
                let lo_op = CompareOp::parse(r.lo_op.as_deref().unwrap_or(">=")).ok_or("bad lo_op")?;
                let hi_op = CompareOp::parse(r.hi_op.as_deref().unwrap_or("<=")).ok_or("bad hi_op")?;
                if !matches!(lo_op, CompareOp::Gt | CompareOp::Ge) || !matches!(hi_op, CompareOp::Lt | CompareOp::Le) {
                    return Err("range operators must bound from below and above".into());
                }
                if lo.tag() != hi.tag() {
                    return Err("range bounds have different types".into());
                }
                Predicate::Range { lo_op, lo, hi_op, hi }
            }
            (op, Some(ReprVal::One(value)), None) => {
                Predicate::Compare { op: CompareOp::parse(op).ok_or_else(|| format!("bad operator `{op}`"))?, value }
            }
            (op, _, _) => return Err(format!("malformed condition with operator `{op}`")),
        };
        Ok(ObjectCondition { attr: r.attr, pred })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Allow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub id: PolicyId,
    pub relation: String,
    pub owner: Value,
    pub object_conditions: Vec<ObjectCondition>,
    pub querier: String,
    pub purpose: String,
    pub action: Action,
    #[serde(default)]
    pub inserted_at: u64,
}

impl Policy {
    /// Checks the structural invariants: exactly one `owner = u` condition that
    /// agrees with the owner field, and non-empty metadata.
    pub fn validate(&self) -> Result<()> {
        let owner_eqs: Vec<&ObjectCondition> = self
            .object_conditions
            .iter()
            .filter(|c| c.attr == OWNER_ATTR && matches!(c.pred, Predicate::Compare { op: CompareOp::Eq, .. }))
            .collect();
        if owner_eqs.len() != 1 {
            return Err(Error::InvalidPolicy(format!(
                "policy {} has {} owner equality conditions, expected exactly one",
                self.id,
                owner_eqs.len()
            )));
        }
        if let Predicate::Compare { value, .. } = &owner_eqs[0].pred {
            if value != &self.owner {
                return Err(Error::InvalidPolicy(format!("policy {} owner field disagrees with its condition", self.id)));
            }
        }
        if self.relation.is_empty() || self.querier.is_empty() || self.purpose.is_empty() {
            return Err(Error::InvalidPolicy(format!("policy {} has empty metadata", self.id)));
        }
        Ok(())
    }

    pub fn matches_metadata(&self, qm: &QueryMetadata, groups: &GroupDirectory) -> bool {
        self.purpose == qm.purpose && groups.querier_matches(&self.querier, &qm.querier)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryMetadata {
    pub querier: String,
    pub purpose: String,
}

impl QueryMetadata {
    pub fn new(querier: impl Into<String>, purpose: impl Into<String>) -> QueryMetadata {
        QueryMetadata { querier: querier.into(), purpose: purpose.into() }
    }
}

/// Group membership with the transitive closure precomputed at load time.
#[derive(Clone, Debug, Default)]
pub struct GroupDirectory {
    closure: BTreeMap<String, BTreeSet<String>>,
}

impl GroupDirectory {
    /// `memberships` holds (member, group) edges; members may be groups.
    pub fn new<I, S>(memberships: I) -> GroupDirectory
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut direct: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (m, g) in memberships {
            direct.entry(m.into()).or_default().insert(g.into());
        }
        let mut closure = BTreeMap::new();
        for member in direct.keys() {
            let mut seen = BTreeSet::new();
            let mut stack: Vec<&String> = direct[member].iter().collect();
            while let Some(g) = stack.pop() {
                if seen.insert(g.clone()) {
                    if let Some(next) = direct.get(g) {
                        stack.extend(next.iter());
                    }
                }
            }
            closure.insert(member.clone(), seen);
        }
        GroupDirectory { closure }
    }

    pub fn groups_of(&self, user: &str) -> impl Iterator<Item = &String> {
        self.closure.get(user).into_iter().flatten()
    }

    pub fn is_member(&self, user: &str, group: &str) -> bool {
        self.closure.get(user).is_some_and(|g| g.contains(group))
    }

    pub fn querier_matches(&self, policy_querier: &str, querier: &str) -> bool {
        policy_querier == querier || self.is_member(querier, policy_querier)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tuple {
    pub relation: String,
    pub attributes: BTreeMap<String, Value>,
}

impl Tuple {
    pub fn get(&self, attr: &str) -> Option<&Value> {
        self.attributes.get(attr)
    }
}

/// Conjunctive evaluation. Conditions on attributes the tuple lacks are
/// vacuously satisfied.
pub fn eval_object_conditions(conds: &[ObjectCondition], t: &Tuple) -> Result<bool> {
    if let Some(c) = conds.iter().find(|c| c.is_derived()) {
        return Err(Error::UnsupportedCondition(format!("derived condition on `{}`", c.attr)));
    }
    for c in conds {
        if let Some(v) = t.get(&c.attr) {
            if !c.eval_value(v)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

pub fn filter_policies_by_metadata<'a, I>(policies: I, qm: &QueryMetadata, groups: &GroupDirectory) -> Vec<&'a Policy>
where
    I: IntoIterator<Item = &'a Policy>,
{
    policies.into_iter().filter(|p| p.matches_metadata(qm, groups)).collect()
}

/// Indices of the tuples the querier may see. This is the reference
/// semantics every rewritten query is checked against.
pub fn oracle_allowed_indices(
    tuples: &[Tuple],
    policies: &[Policy],
    qm: &QueryMetadata,
    groups: &GroupDirectory,
) -> Result<Vec<usize>> {
    let relevant = filter_policies_by_metadata(policies, qm, groups);
    let mut out = Vec::new();
    for (i, t) in tuples.iter().enumerate() {
        for p in relevant.iter().filter(|p| p.relation == t.relation) {
            if eval_object_conditions(&p.object_conditions, t)? {
                out.push(i);
                break;
            }
        }
    }
    Ok(out)
}

pub fn oracle_allowed_tuples(
    tuples: &[Tuple],
    policies: &[Policy],
    qm: &QueryMetadata,
    groups: &GroupDirectory,
) -> Result<Vec<Tuple>> {
    Ok(oracle_allowed_indices(tuples, policies, qm, groups)?.into_iter().map(|i| tuples[i].clone()).collect())
}

/// Per-tuple filter: narrows the policies to the tuple's owner first, then
/// evaluates the rest of each policy.
pub fn delta_filter(policies: &[Policy], qm: &QueryMetadata, groups: &GroupDirectory, t: &Tuple) -> Result<bool> {
    let Some(owner) = t.get(OWNER_ATTR) else {
        return Ok(false);
    };
    for p in policies {
        if &p.owner != owner || p.relation != t.relation || !p.matches_metadata(qm, groups) {
            continue;
        }
        if eval_object_conditions(&p.object_conditions, t)? {
            return Ok(true);
        }
    }
    Ok(false)
}
