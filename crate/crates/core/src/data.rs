//! Relation rows as JSONL: one flat JSON object per row.
//!
//! Numbers map to int or decimal; strings are typed by the schema when one is
//! given, otherwise dates, times and timestamps are recognised by shape.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde_json::{Map, Number, Value as Json};

use crate::engine::Schema;
use crate::error::{Error, Result};
use crate::policy::Tuple;
use crate::value::{Value, ValueTag};

fn infer(s: &str) -> Value {
    for tag in [ValueTag::Date, ValueTag::Time, ValueTag::Timestamp] {
        if let Ok(v) = Value::parse_as(tag, s) {
            return v;
        }
    }
    Value::Text(s.to_string())
}

fn from_json(col: &str, j: &Json, tag: Option<ValueTag>) -> Result<Value> {
    let bad = || Error::TypeMismatch(format!("unsupported value {j} in column `{col}`"));
    match (j, tag) {
        (Json::Number(n), Some(ValueTag::Decimal)) => n.as_f64().map(Value::Decimal).ok_or_else(bad),
        (Json::Number(n), Some(ValueTag::Int) | None) => match n.as_i64() {
            Some(i) => Ok(Value::Int(i)),
            None if tag.is_none() => n.as_f64().map(Value::Decimal).ok_or_else(bad),
            None => Err(bad()),
        },
        (Json::String(s), Some(t)) => Value::parse_as(t, s),
        (Json::String(s), None) => Ok(infer(s)),
        _ => Err(bad()),
    }
}

pub fn to_json(v: &Value) -> Json {
    match v {
        Value::Int(i) => Json::Number((*i).into()),
        Value::Decimal(d) => Number::from_f64(*d).map(Json::Number).unwrap_or(Json::Null),
        Value::Text(s) => Json::String(s.clone()),
        Value::Date(d) => Json::String(d.format("%Y-%m-%d").to_string()),
        Value::Time(t) => Json::String(t.format("%H:%M:%S").to_string()),
        Value::Timestamp(t) => Json::String(t.format("%Y-%m-%d %H:%M:%S").to_string()),
    }
}

pub fn read_rows<R: BufRead>(r: R, relation: &str, schema: Option<&Schema>) -> Result<Vec<Tuple>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: Map<String, Json> = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("line {}: expected a JSON object ({e})", n + 1)))?;
        let mut attributes = BTreeMap::new();
        for (k, j) in &obj {
            let tag = match schema {
                Some(s) => Some(s.tag_of(k).ok_or_else(|| Error::UnknownColumn(format!("{relation}.{k}")))?),
                None => None,
            };
            attributes.insert(k.clone(), from_json(k, j, tag)?);
        }
        out.push(Tuple { relation: relation.to_string(), attributes });
    }
    Ok(out)
}

pub fn write_rows<W: Write>(mut w: W, tuples: &[Tuple]) -> Result<()> {
    for t in tuples {
        let obj: Map<String, Json> = t.attributes.iter().map(|(k, v)| (k.clone(), to_json(v))).collect();
        serde_json::to_writer(&mut w, &obj)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::wifi_schema;

    #[test]
    fn round_trip_with_schema() {
        let text = "{\"id\":1,\"owner\":7,\"location_id\":3,\"date\":\"2018-02-01\",\"time\":\"09:30:00\"}\n";
        let rows = read_rows(text.as_bytes(), "wifi", Some(&wifi_schema())).unwrap();
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        assert_eq!(read_rows(&buf[..], "wifi", Some(&wifi_schema())).unwrap(), rows);
    }

    #[test]
    fn inference_without_schema() {
        let rows = read_rows("{\"a\":1,\"b\":\"2018-02-01\",\"c\":\"x\",\"d\":1.5}".as_bytes(), "r", None).unwrap();
        let a = &rows[0].attributes;
        assert_eq!(a["a"].tag(), ValueTag::Int);
        assert_eq!(a["b"].tag(), ValueTag::Date);
        assert_eq!(a["c"].tag(), ValueTag::Text);
        assert_eq!(a["d"].tag(), ValueTag::Decimal);
    }

    #[test]
    fn unknown_column_is_rejected() {
        assert!(read_rows("{\"zz\":1}".as_bytes(), "wifi", Some(&wifi_schema())).is_err());
    }
}
