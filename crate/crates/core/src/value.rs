use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops::Bound;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueTag {
    Int,
    Decimal,
    Text,
    Date,
    Time,
    Timestamp,
}

impl ValueTag {
    /// Discrete domains get unit-step interval arithmetic.
    pub fn is_discrete(self) -> bool {
        matches!(self, ValueTag::Int | ValueTag::Date | ValueTag::Time | ValueTag::Timestamp)
    }

    pub fn name(self) -> &'static str {
        match self {
            ValueTag::Int => "int",
            ValueTag::Decimal => "decimal",
            ValueTag::Text => "text",
            ValueTag::Date => "date",
            ValueTag::Time => "time",
            ValueTag::Timestamp => "timestamp",
        }
    }
}

/// A typed attribute value. Comparisons across tags are errors, except for
/// `total_cmp`, which exists only to give containers a total order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Int(i64),
    Decimal(f64),
    Text(String),
    Date(NaiveDate),
    Time(NaiveTime),
    Timestamp(NaiveDateTime),
}

impl Value {
    pub fn tag(&self) -> ValueTag {
        match self {
            Value::Int(_) => ValueTag::Int,
            Value::Decimal(_) => ValueTag::Decimal,
            Value::Text(_) => ValueTag::Text,
            Value::Date(_) => ValueTag::Date,
            Value::Time(_) => ValueTag::Time,
            Value::Timestamp(_) => ValueTag::Timestamp,
        }
    }

    pub fn try_cmp(&self, other: &Value) -> Result<Ordering> {
        if self.tag() != other.tag() {
            return Err(Error::TypeMismatch(format!(
                "cannot compare {} with {}",
                self.tag().name(),
                other.tag().name()
            )));
        }
        Ok(self.total_cmp(other))
    }

    pub fn total_cmp(&self, other: &Value) -> Ordering {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Decimal(a), Value::Decimal(b)) => a.total_cmp(b),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Date(a), Value::Date(b)) => a.cmp(b),
            (Value::Time(a), Value::Time(b)) => a.cmp(b),
            (Value::Timestamp(a), Value::Timestamp(b)) => a.cmp(b),
            _ => self.tag().cmp(&other.tag()),
        }
    }

    /// Position on a numeric axis, used by histograms. Text has none.
    pub fn key(&self) -> Option<f64> {
        match self {
            Value::Int(v) => Some(*v as f64),
            Value::Decimal(v) => Some(*v),
            Value::Text(_) => None,
            Value::Date(d) => Some(d.num_days_from_ce() as f64),
            Value::Time(t) => Some(t.num_seconds_from_midnight() as f64),
            Value::Timestamp(ts) => Some(ts.and_utc().timestamp() as f64),
        }
    }

    /// Next value of a discrete domain. Saturates at the domain edge.
    pub fn succ(&self) -> Option<Value> {
        Some(match self {
            Value::Int(v) => Value::Int(v.saturating_add(1)),
            Value::Date(d) => Value::Date(d.succ_opt().unwrap_or(*d)),
            Value::Time(t) => {
                if t.num_seconds_from_midnight() == 86_399 {
                    Value::Time(*t)
                } else {
                    Value::Time(*t + Duration::seconds(1))
                }
            }
            Value::Timestamp(ts) => Value::Timestamp(*ts + Duration::seconds(1)),
            _ => return None,
        })
    }

    pub fn pred(&self) -> Option<Value> {
        Some(match self {
            Value::Int(v) => Value::Int(v.saturating_sub(1)),
            Value::Date(d) => Value::Date(d.pred_opt().unwrap_or(*d)),
            Value::Time(t) => {
                if t.num_seconds_from_midnight() == 0 {
                    Value::Time(*t)
                } else {
                    Value::Time(*t - Duration::seconds(1))
                }
            }
            Value::Timestamp(ts) => Value::Timestamp(*ts - Duration::seconds(1)),
            _ => return None,
        })
    }

    /// Parses a literal's text as a value of the given tag.
    pub fn parse_as(tag: ValueTag, text: &str) -> Result<Value> {
        let bad = || Error::TypeMismatch(format!("`{text}` is not a valid {}", tag.name()));
        let t = text.trim();
        Ok(match tag {
            ValueTag::Int => Value::Int(t.parse().map_err(|_| bad())?),
            ValueTag::Decimal => Value::Decimal(t.parse().map_err(|_| bad())?),
            ValueTag::Text => Value::Text(text.to_string()),
            ValueTag::Date => Value::Date(NaiveDate::parse_from_str(t, "%Y-%m-%d").map_err(|_| bad())?),
            ValueTag::Time => Value::Time(
                NaiveTime::parse_from_str(t, "%H:%M:%S")
                    .or_else(|_| NaiveTime::parse_from_str(t, "%H:%M"))
                    .map_err(|_| bad())?,
            ),
            ValueTag::Timestamp => Value::Timestamp(
                NaiveDateTime::parse_from_str(t, "%Y-%m-%d %H:%M:%S")
                    .or_else(|_| NaiveDateTime::parse_from_str(t, "%Y-%m-%dT%H:%M:%S"))
                    .map_err(|_| bad())?,
            ),
        })
    }

    /// Renders the value as a SQL literal.
    pub fn sql_literal(&self) -> String {
        match self {
            Value::Int(v) => v.to_string(),
            Value::Decimal(v) => format!("{v:?}"),
            Value::Text(s) => format!("'{}'", s.replace('\'', "''")),
            other => format!("'{other}'"),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Decimal(v) => write!(f, "{v}"),
            Value::Text(s) => write!(f, "{s}"),
            Value::Date(d) => write!(f, "{}", d.format("%Y-%m-%d")),
            Value::Time(t) => write!(f, "{}", t.format("%H:%M:%S")),
            Value::Timestamp(ts) => write!(f, "{}", ts.format("%Y-%m-%d %H:%M:%S")),
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.total_cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.tag().hash(state);
        match self {
            Value::Int(v) => v.hash(state),
            Value::Decimal(v) => v.to_bits().hash(state),
            Value::Text(s) => s.hash(state),
            Value::Date(d) => d.hash(state),
            Value::Time(t) => t.hash(state),
            Value::Timestamp(ts) => ts.hash(state),
        }
    }
}

/// A contiguous range over one attribute's domain. Discrete domains are kept
/// in inclusive form so that equal sets have equal representations.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Interval {
    pub lo: Bound<Value>,
    pub hi: Bound<Value>,
}

fn value_of(b: &Bound<Value>) -> Option<&Value> {
    match b {
        Bound::Included(v) | Bound::Excluded(v) => Some(v),
        Bound::Unbounded => None,
    }
}

pub fn cmp_lower(a: &Bound<Value>, b: &Bound<Value>) -> Ordering {
    match (a, b) {
        (Bound::Unbounded, Bound::Unbounded) => Ordering::Equal,
        (Bound::Unbounded, _) => Ordering::Less,
        (_, Bound::Unbounded) => Ordering::Greater,
        (Bound::Included(x), Bound::Included(y)) | (Bound::Excluded(x), Bound::Excluded(y)) => x.total_cmp(y),
        (Bound::Included(x), Bound::Excluded(y)) => x.total_cmp(y).then(Ordering::Less),
        (Bound::Excluded(x), Bound::Included(y)) => x.total_cmp(y).then(Ordering::Greater),
    }
}

pub fn cmp_upper(a: &Bound<Value>, b: &Bound<Value>) -> Ordering {
    match (a, b) {
        (Bound::Unbounded, Bound::Unbounded) => Ordering::Equal,
        (Bound::Unbounded, _) => Ordering::Greater,
        (_, Bound::Unbounded) => Ordering::Less,
        (Bound::Included(x), Bound::Included(y)) | (Bound::Excluded(x), Bound::Excluded(y)) => x.total_cmp(y),
        (Bound::Included(x), Bound::Excluded(y)) => x.total_cmp(y).then(Ordering::Greater),
        (Bound::Excluded(x), Bound::Included(y)) => x.total_cmp(y).then(Ordering::Less),
    }
}

impl Interval {
    pub fn new(lo: Bound<Value>, hi: Bound<Value>) -> Interval {
        Interval { lo, hi }.normalized()
    }

    pub fn point(v: Value) -> Interval {
        Interval { lo: Bound::Included(v.clone()), hi: Bound::Included(v) }
    }

    pub fn closed(lo: Value, hi: Value) -> Interval {
        Interval::new(Bound::Included(lo), Bound::Included(hi))
    }

    pub fn full() -> Interval {
        Interval { lo: Bound::Unbounded, hi: Bound::Unbounded }
    }

    fn normalized(self) -> Interval {
        let lo = match self.lo {
            Bound::Excluded(v) if v.tag().is_discrete() => Bound::Included(v.succ().expect("discrete")),
            b => b,
        };
        let hi = match self.hi {
            Bound::Excluded(v) if v.tag().is_discrete() => Bound::Included(v.pred().expect("discrete")),
            b => b,
        };
        Interval { lo, hi }
    }

    pub fn tag(&self) -> Option<ValueTag> {
        value_of(&self.lo).or(value_of(&self.hi)).map(Value::tag)
    }

    pub fn is_empty(&self) -> bool {
        match (&self.lo, &self.hi) {
            (Bound::Included(a), Bound::Included(b)) => a.total_cmp(b) == Ordering::Greater,
            (Bound::Included(a), Bound::Excluded(b))
            | (Bound::Excluded(a), Bound::Included(b))
            | (Bound::Excluded(a), Bound::Excluded(b)) => a.total_cmp(b) != Ordering::Less,
            _ => false,
        }
    }

    pub fn as_point(&self) -> Option<&Value> {
        match (&self.lo, &self.hi) {
            (Bound::Included(a), Bound::Included(b)) if a == b => Some(a),
            _ => None,
        }
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        let lo = if cmp_lower(&self.lo, &other.lo) == Ordering::Less { other.lo.clone() } else { self.lo.clone() };
        let hi = if cmp_upper(&self.hi, &other.hi) == Ordering::Greater { other.hi.clone() } else { self.hi.clone() };
        Interval { lo, hi }
    }

    /// Smallest interval containing both.
    pub fn hull(&self, other: &Interval) -> Interval {
        let lo = if cmp_lower(&self.lo, &other.lo) == Ordering::Greater { other.lo.clone() } else { self.lo.clone() };
        let hi = if cmp_upper(&self.hi, &other.hi) == Ordering::Less { other.hi.clone() } else { self.hi.clone() };
        Interval { lo, hi }
    }

    pub fn is_disjoint(&self, other: &Interval) -> bool {
        self.intersect(other).is_empty()
    }

    /// True when every value of `other` lies in `self`.
    pub fn contains(&self, other: &Interval) -> bool {
        other.is_empty()
            || (cmp_lower(&self.lo, &other.lo) != Ordering::Greater && cmp_upper(&self.hi, &other.hi) != Ordering::Less)
    }

    pub fn contains_value(&self, v: &Value) -> Result<bool> {
        let lo_ok = match &self.lo {
            Bound::Unbounded => true,
            Bound::Included(l) => v.try_cmp(l)? != Ordering::Less,
            Bound::Excluded(l) => v.try_cmp(l)? == Ordering::Greater,
        };
        let hi_ok = match &self.hi {
            Bound::Unbounded => true,
            Bound::Included(h) => v.try_cmp(h)? != Ordering::Greater,
            Bound::Excluded(h) => v.try_cmp(h)? == Ordering::Less,
        };
        Ok(lo_ok && hi_ok)
    }

    /// Ordering used to sort guard candidates: by lower bound, then upper.
    pub fn cmp_bounds(&self, other: &Interval) -> Ordering {
        cmp_lower(&self.lo, &other.lo).then_with(|| cmp_upper(&self.hi, &other.hi))
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.lo {
            Bound::Included(v) => write!(f, "[{v}")?,
            Bound::Excluded(v) => write!(f, "({v}")?,
            Bound::Unbounded => write!(f, "(-inf")?,
        }
        match &self.hi {
            Bound::Included(v) => write!(f, ", {v}]"),
            Bound::Excluded(v) => write!(f, ", {v})"),
            Bound::Unbounded => write!(f, ", +inf)"),
        }
    }
}
