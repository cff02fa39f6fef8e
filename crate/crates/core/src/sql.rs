//! A small SQL front end: conjunctive SELECT queries with equi-joins and
//! GROUP BY ... COUNT(*), which is the query class the rewriter handles.

use std::fmt;

use crate::error::{Error, Result};
use crate::policy::CompareOp;

/// Comment placed at the head of every rewritten query.
pub const REWRITE_MARKER: &str = "/* sieve:enforced */";

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Str(String),
    Sym(&'static str),
    Eof,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if src[i..].starts_with("--") {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if src[i..].starts_with("/*") {
            let end = src[i + 2..]
                .find("*/")
                .ok_or(Error::Syntax { pos: i, msg: "unterminated comment".into() })?;
            i += end + 4;
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == '_' {
            while i < b.len() && ((b[i] as char).is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
            continue;
        }
        if c == '`' || c == '"' {
            let end = src[i + 1..].find(c).ok_or(Error::Syntax { pos: i, msg: "unterminated identifier".into() })?;
            out.push((Tok::Ident(src[i + 1..i + 1 + end].to_string()), start));
            i += end + 2;
            continue;
        }
        if c.is_ascii_digit() || (c == '-' && i + 1 < b.len() && (b[i + 1] as char).is_ascii_digit()) {
            i += 1;
            while i < b.len() && ((b[i] as char).is_ascii_digit() || b[i] == b'.') {
                i += 1;
            }
            out.push((Tok::Number(src[start..i].to_string()), start));
            continue;
        }
        if c == '\'' {
            let mut s = String::new();
            i += 1;
            loop {
                if i >= b.len() {
                    return Err(Error::Syntax { pos: start, msg: "unterminated string".into() });
                }
                if b[i] == b'\'' {
                    if i + 1 < b.len() && b[i + 1] == b'\'' {
                        s.push('\'');
                        i += 2;
                        continue;
                    }
                    i += 1;
                    break;
                }
                let ch = src[i..].chars().next().unwrap();
                s.push(ch);
                i += ch.len_utf8();
            }
            out.push((Tok::Str(s), start));
            continue;
        }
        let two = src.get(i..i + 2).unwrap_or("");
        let sym: &'static str = match two {
            "<=" => "<=",
            ">=" => ">=",
            "!=" => "!=",
            "<>" => "<>",
            _ => match c {
                ',' => ",",
                '(' => "(",
                ')' => ")",
                '.' => ".",
                '*' => "*",
                '=' => "=",
                '<' => "<",
                '>' => ">",
                ';' => ";",
                _ => return Err(Error::Syntax { pos: i, msg: format!("unexpected character `{c}`") }),
            },
        };
        i += sym.len();
        out.push((Tok::Sym(sym), start));
    }
    out.push((Tok::Eof, src.len()));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ColumnRef {
    pub qualifier: Option<String>,
    pub column: String,
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.qualifier {
            Some(q) => write!(f, "{q}.{}", self.column),
            None => write!(f, "{}", self.column),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Literal {
    Number(String),
    Str(String),
}

impl Literal {
    pub fn text(&self) -> &str {
        match self {
            Literal::Number(s) | Literal::Str(s) => s,
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Number(s) => write!(f, "{s}"),
            Literal::Str(s) => write!(f, "'{}'", s.replace('\'', "''")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SelectItem {
    Star,
    QualifiedStar(String),
    Column(ColumnRef),
    CountStar { alias: Option<String> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRef {
    pub relation: String,
    pub alias: Option<String>,
}

impl TableRef {
    pub fn name(&self) -> &str {
        self.alias.as_deref().unwrap_or(&self.relation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Compare { col: ColumnRef, op: CompareOp, lit: Literal },
    Between { col: ColumnRef, lo: Literal, hi: Literal },
    InList { col: ColumnRef, negated: bool, items: Vec<Literal> },
    Columns { left: ColumnRef, op: CompareOp, right: ColumnRef },
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Compare { col, op, lit } => write!(f, "{col} {} {lit}", op.symbol()),
            Condition::Between { col, lo, hi } => write!(f, "{col} BETWEEN {lo} AND {hi}"),
            Condition::InList { col, negated, items } => {
                let list: Vec<String> = items.iter().map(|l| l.to_string()).collect();
                write!(f, "{col} {}IN ({})", if *negated { "NOT " } else { "" }, list.join(", "))
            }
            Condition::Columns { left, op, right } => write!(f, "{left} {} {right}", op.symbol()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub select: Vec<SelectItem>,
    pub from: Vec<TableRef>,
    pub conditions: Vec<Condition>,
    pub group_by: Vec<ColumnRef>,
}

impl Query {
    /// Renders the query, substituting each FROM relation name through
    /// `rename`.
    pub fn render_with(&self, rename: &dyn Fn(&str) -> String) -> String {
        let sel: Vec<String> = self
            .select
            .iter()
            .map(|s| match s {
                SelectItem::Star => "*".to_string(),
                SelectItem::QualifiedStar(q) => format!("{q}.*"),
                SelectItem::Column(c) => c.to_string(),
                SelectItem::CountStar { alias: None } => "COUNT(*)".to_string(),
                SelectItem::CountStar { alias: Some(a) } => format!("COUNT(*) AS {a}"),
            })
            .collect();
        let from: Vec<String> = self
            .from
            .iter()
            .map(|t| match &t.alias {
                Some(a) => format!("{} AS {a}", rename(&t.relation)),
                None => {
                    let r = rename(&t.relation);
                    if r == t.relation {
                        r
                    } else {
                        format!("{r} AS {}", t.relation)
                    }
                }
            })
            .collect();
        let mut s = format!("SELECT {} FROM {}", sel.join(", "), from.join(", "));
        if !self.conditions.is_empty() {
            let conds: Vec<String> = self.conditions.iter().map(|c| c.to_string()).collect();
            s.push_str(" WHERE ");
            s.push_str(&conds.join(" AND "));
        }
        if !self.group_by.is_empty() {
            let g: Vec<String> = self.group_by.iter().map(|c| c.to_string()).collect();
            s.push_str(" GROUP BY ");
            s.push_str(&g.join(", "));
        }
        s
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.render_with(&|r| r.to_string()))
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

const RESERVED: [&str; 14] =
    ["SELECT", "FROM", "WHERE", "AND", "OR", "GROUP", "BY", "AS", "JOIN", "INNER", "ON", "BETWEEN", "IN", "NOT"];

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Syntax { pos: self.offset(), msg: msg.into() })
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.err(format!("expected {kw}"))
        }
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Tok::Sym(x) if *x == s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            self.err(format!("expected `{s}`"))
        }
    }

    fn ident(&mut self) -> Result<String> {
        match self.peek().clone() {
            Tok::Ident(s) if !RESERVED.iter().any(|k| k.eq_ignore_ascii_case(&s)) => {
                self.pos += 1;
                Ok(s)
            }
            _ => self.err("expected identifier"),
        }
    }

    fn column(&mut self) -> Result<ColumnRef> {
        let first = self.ident()?;
        if self.eat_sym(".") {
            let col = self.ident()?;
            Ok(ColumnRef { qualifier: Some(first), column: col })
        } else {
            Ok(ColumnRef { qualifier: None, column: first })
        }
    }

    fn literal(&mut self) -> Result<Literal> {
        match self.peek().clone() {
            Tok::Number(n) => {
                self.pos += 1;
                Ok(Literal::Number(n))
            }
            Tok::Str(s) => {
                self.pos += 1;
                Ok(Literal::Str(s))
            }
            _ => self.err("expected literal"),
        }
    }

    fn compare_op(&mut self) -> Option<CompareOp> {
        if let Tok::Sym(s) = self.peek() {
            if let Some(op) = CompareOp::parse(s) {
                self.pos += 1;
                return Some(op);
            }
        }
        None
    }

    fn select_item(&mut self) -> Result<SelectItem> {
        if self.eat_sym("*") {
            return Ok(SelectItem::Star);
        }
        if self.is_kw("COUNT") {
            self.pos += 1;
            self.expect_sym("(")?;
            self.expect_sym("*")?;
            self.expect_sym(")")?;
            let alias = if self.eat_kw("AS") { Some(self.ident()?) } else { None };
            return Ok(SelectItem::CountStar { alias });
        }
        let first = self.ident()?;
        if self.eat_sym(".") {
            if self.eat_sym("*") {
                return Ok(SelectItem::QualifiedStar(first));
            }
            let col = self.ident()?;
            return Ok(SelectItem::Column(ColumnRef { qualifier: Some(first), column: col }));
        }
        Ok(SelectItem::Column(ColumnRef { qualifier: None, column: first }))
    }

    fn table_ref(&mut self) -> Result<TableRef> {
        let relation = self.ident()?;
        let alias = if self.eat_kw("AS") {
            Some(self.ident()?)
        } else if matches!(self.peek(), Tok::Ident(s) if !RESERVED.iter().any(|k| k.eq_ignore_ascii_case(s))) {
            Some(self.ident()?)
        } else {
            None
        };
        Ok(TableRef { relation, alias })
    }

    fn conjunction(&mut self, out: &mut Vec<Condition>) -> Result<()> {
        loop {
            if self.eat_sym("(") {
                self.conjunction(out)?;
                self.expect_sym(")")?;
            } else {
                out.push(self.condition()?);
            }
            if self.is_kw("OR") {
                return self.err("disjunction is not supported");
            }
            if !self.eat_kw("AND") {
                return Ok(());
            }
        }
    }

    fn condition(&mut self) -> Result<Condition> {
        let col = self.column()?;
        if self.eat_kw("BETWEEN") {
            let lo = self.literal()?;
            self.expect_kw("AND")?;
            let hi = self.literal()?;
            return Ok(Condition::Between { col, lo, hi });
        }
        let negated = self.eat_kw("NOT");
        if self.eat_kw("IN") {
            self.expect_sym("(")?;
            let mut items = vec![self.literal()?];
            while self.eat_sym(",") {
                items.push(self.literal()?);
            }
            self.expect_sym(")")?;
            return Ok(Condition::InList { col, negated, items });
        }
        if negated {
            return self.err("expected IN after NOT");
        }
        let Some(op) = self.compare_op() else {
            return self.err("expected comparison operator");
        };
        if matches!(self.peek(), Tok::Ident(_)) {
            let right = self.column()?;
            return Ok(Condition::Columns { left: col, op, right });
        }
        let lit = self.literal()?;
        Ok(Condition::Compare { col, op, lit })
    }

    fn query(&mut self) -> Result<Query> {
        if self.is_kw("WITH") {
            return self.err("WITH clauses are not accepted as input");
        }
        self.expect_kw("SELECT")?;
        let mut select = vec![self.select_item()?];
        while self.eat_sym(",") {
            select.push(self.select_item()?);
        }
        self.expect_kw("FROM")?;
        let mut from = vec![self.table_ref()?];
        let mut conditions = Vec::new();
        loop {
            if self.eat_sym(",") {
                from.push(self.table_ref()?);
            } else if self.is_kw("JOIN") || self.is_kw("INNER") {
                self.eat_kw("INNER");
                self.expect_kw("JOIN")?;
                from.push(self.table_ref()?);
                self.expect_kw("ON")?;
                self.conjunction(&mut conditions)?;
            } else {
                break;
            }
        }
        if self.eat_kw("WHERE") {
            self.conjunction(&mut conditions)?;
        }
        let mut group_by = Vec::new();
        if self.eat_kw("GROUP") {
            self.expect_kw("BY")?;
            group_by.push(self.column()?);
            while self.eat_sym(",") {
                group_by.push(self.column()?);
            }
        }
        self.eat_sym(";");
        if *self.peek() != Tok::Eof {
            return self.err("unexpected trailing input");
        }
        Ok(Query { select, from, conditions, group_by })
    }
}

/// Parses a query. Text carrying the rewrite marker is refused, so enforced
/// queries never get enforced twice.
pub fn parse_query(text: &str) -> Result<Query> {
    if text.contains(REWRITE_MARKER) {
        return Err(Error::AlreadyRewritten);
    }
    let toks = lex(text)?;
    Parser { toks, pos: 0 }.query()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_three_templates() {
        let q1 = parse_query(
            "SELECT * FROM wifi AS W WHERE W.location_id IN (3, 4) AND W.time BETWEEN '09:00' AND '10:00' AND W.date BETWEEN '2018-02-01' AND '2018-02-10'",
        )
        .unwrap();
        assert_eq!(q1.conditions.len(), 3);
        assert_eq!(q1.from[0].alias.as_deref(), Some("W"));
        let q3 = parse_query(
            "select W.location_id, count(*) from wifi W where W.time between '09:00' and '10:00' group by W.location_id;",
        )
        .unwrap();
        assert_eq!(q3.group_by.len(), 1);
        assert!(matches!(q3.select[1], SelectItem::CountStar { .. }));
    }

    #[test]
    fn joins_and_rendering() {
        let q = parse_query("SELECT a.owner FROM wifi a JOIN wifi b ON a.location_id = b.location_id WHERE b.owner = 7").unwrap();
        assert_eq!(q.from.len(), 2);
        assert_eq!(q.conditions.len(), 2);
        assert_eq!(
            q.to_string(),
            "SELECT a.owner FROM wifi AS a, wifi AS b WHERE a.location_id = b.location_id AND b.owner = 7"
        );
        let again = parse_query(&q.to_string()).unwrap();
        assert_eq!(again, q);
    }

    #[test]
    fn rejects_unsupported_and_rewritten() {
        assert!(matches!(parse_query("SELECT * FROM t WHERE a = 1 OR b = 2"), Err(Error::Syntax { .. })));
        assert!(matches!(parse_query("SELECT * FROM"), Err(Error::Syntax { .. })));
        assert!(matches!(parse_query("SELECT * FROM t WHERE a = 'x"), Err(Error::Syntax { .. })));
        let marked = format!("{REWRITE_MARKER} SELECT * FROM t");
        assert!(matches!(parse_query(&marked), Err(Error::AlreadyRewritten)));
    }
}
