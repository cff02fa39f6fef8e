//! Policy storage keyed by (querier, purpose, relation), plus persisted
//! guarded expressions and an optional append-only JSONL journal.
//!
//! The store is single-writer: mutation takes `&mut self`. Callers that share
//! it across threads wrap it in a lock.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::ExecMode;
use crate::error::{Error, Result};
use crate::policy::{GroupDirectory, ObjectCondition, Policy, PolicyId};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GeKey {
    pub querier: String,
    pub purpose: String,
    pub relation: String,
}

impl GeKey {
    pub fn new(querier: &str, purpose: &str, relation: &str) -> GeKey {
        GeKey { querier: querier.into(), purpose: purpose.into(), relation: relation.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredGuard {
    pub guard: ObjectCondition,
    pub partition: Vec<PolicyId>,
    pub exec_mode: ExecMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredGuardedExpression {
    pub ge_id: u64,
    pub querier: String,
    pub purpose: String,
    pub relation: String,
    pub guards: Vec<StoredGuard>,
    pub outdated: bool,
    pub built_at: u64,
}

impl StoredGuardedExpression {
    pub fn key(&self) -> GeKey {
        GeKey::new(&self.querier, &self.purpose, &self.relation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeleteRecord {
    delete: PolicyId,
    at: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JournalLine {
    Ge(StoredGuardedExpression),
    Delete(DeleteRecord),
    Policy(Policy),
}

type IndexKey = (String, String, String);

#[derive(Default)]
pub struct PolicyStore {
    policies: BTreeMap<PolicyId, Policy>,
    by_key: BTreeMap<IndexKey, BTreeMap<u64, PolicyId>>,
    deletions: BTreeMap<IndexKey, Vec<u64>>,
    ges: BTreeMap<GeKey, StoredGuardedExpression>,
    groups: GroupDirectory,
    clock: u64,
    next_ge_id: u64,
    journal: Option<BufWriter<File>>,
}

impl std::fmt::Debug for PolicyStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyStore")
            .field("policies", &self.policies.len())
            .field("ges", &self.ges.len())
            .field("clock", &self.clock)
            .finish()
    }
}

fn index_key(p: &Policy) -> IndexKey {
    (p.querier.clone(), p.purpose.clone(), p.relation.clone())
}

impl PolicyStore {
    pub fn new(groups: GroupDirectory) -> PolicyStore {
        PolicyStore { groups, ..Default::default() }
    }

    /// Opens (or creates) a journal file; every later mutation is appended.
    pub fn with_journal(mut self, path: &Path) -> Result<PolicyStore> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        self.journal = Some(BufWriter::new(f));
        Ok(self)
    }

    pub fn groups(&self) -> &GroupDirectory {
        &self.groups
    }

    /// Logical time of the latest mutation.
    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn get(&self, id: PolicyId) -> Option<&Policy> {
        self.policies.get(&id)
    }

    pub fn policies(&self) -> impl Iterator<Item = &Policy> {
        self.policies.values()
    }

    pub fn next_policy_id(&self) -> PolicyId {
        PolicyId(self.policies.keys().next_back().map_or(0, |id| id.0) + 1)
    }

    /// Inserts a policy. An id of 0 asks the store to assign one.
    pub fn insert_policy(&mut self, mut p: Policy) -> Result<PolicyId> {
        if p.id.0 == 0 {
            p.id = self.next_policy_id();
        }
        p.validate()?;
        if self.policies.contains_key(&p.id) {
            return Err(Error::Conflict(p.id));
        }
        self.clock += 1;
        p.inserted_at = self.clock;
        self.journal_write(&p)?;
        let id = p.id;
        self.mark_outdated(&p);
        self.index(p);
        Ok(id)
    }

    fn index(&mut self, p: Policy) {
        self.by_key.entry(index_key(&p)).or_default().insert(p.inserted_at, p.id);
        self.policies.insert(p.id, p);
    }

    pub fn delete_policy(&mut self, id: PolicyId) -> Result<Policy> {
        let p = self.policies.remove(&id).ok_or(Error::NotFound(id))?;
        self.clock += 1;
        let key = index_key(&p);
        if let Some(m) = self.by_key.get_mut(&key) {
            m.remove(&p.inserted_at);
        }
        self.deletions.entry(key).or_default().push(self.clock);
        self.mark_outdated(&p);
        self.journal_write(&DeleteRecord { delete: id, at: self.clock })?;
        Ok(p)
    }

    fn mark_outdated(&mut self, p: &Policy) {
        for (k, ge) in self.ges.iter_mut() {
            if k.relation == p.relation && k.purpose == p.purpose && self.groups.querier_matches(&p.querier, &k.querier) {
                ge.outdated = true;
            }
        }
    }

    fn matching_keys(&self, querier: &str, purpose: &str, relation: &str) -> Vec<IndexKey> {
        std::iter::once(querier)
            .chain(self.groups.groups_of(querier).map(String::as_str))
            .map(|q| (q.to_string(), purpose.to_string(), relation.to_string()))
            .collect()
    }

    /// Policies applicable to the querier (directly or through a group) that
    /// were inserted strictly after `since`, in insertion order.
    pub fn fetch_policies(&self, querier: &str, purpose: &str, relation: &str, since: u64) -> Vec<Policy> {
        let mut hits: Vec<(u64, PolicyId)> = Vec::new();
        for k in self.matching_keys(querier, purpose, relation) {
            if let Some(m) = self.by_key.get(&k) {
                hits.extend(m.range(since + 1..).map(|(t, id)| (*t, *id)));
            }
        }
        hits.sort_unstable();
        hits.into_iter().map(|(_, id)| self.policies[&id].clone()).collect()
    }

    /// Number of applicable policies deleted strictly after `since`.
    pub fn deletions_since(&self, querier: &str, purpose: &str, relation: &str, since: u64) -> usize {
        self.matching_keys(querier, purpose, relation)
            .iter()
            .filter_map(|k| self.deletions.get(k))
            .map(|v| v.len() - v.partition_point(|t| *t <= since))
            .sum()
    }

    /// Persists a guarded expression, replacing any previous one for the key.
    pub fn store_ge(&mut self, mut ge: StoredGuardedExpression) -> Result<u64> {
        self.next_ge_id += 1;
        ge.ge_id = self.next_ge_id;
        ge.outdated = false;
        self.journal_write(&ge)?;
        self.ges.insert(ge.key(), ge);
        Ok(self.next_ge_id)
    }

    pub fn fetch_ge(&self, querier: &str, purpose: &str, relation: &str) -> Option<&StoredGuardedExpression> {
        self.ges.get(&GeKey::new(querier, purpose, relation))
    }

    fn journal_write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        if let Some(j) = self.journal.as_mut() {
            serde_json::to_writer(&mut *j, rec)?;
            j.write_all(b"\n")?;
            j.flush()?;
        }
        Ok(())
    }

    /// Replays a journal or snapshot. Policies keep their recorded ids and
    /// insertion times.
    pub fn import<R: BufRead>(reader: R, groups: GroupDirectory) -> Result<PolicyStore> {
        let mut s = PolicyStore::new(groups);
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<JournalLine>(&line)? {
                JournalLine::Policy(p) => {
                    p.validate()?;
                    if s.policies.contains_key(&p.id) {
                        return Err(Error::Conflict(p.id));
                    }
                    s.clock = s.clock.max(p.inserted_at);
                    s.index(p);
                }
                JournalLine::Delete(d) => {
                    let p = s.policies.remove(&d.delete).ok_or(Error::NotFound(d.delete))?;
                    let key = index_key(&p);
                    if let Some(m) = s.by_key.get_mut(&key) {
                        m.remove(&p.inserted_at);
                    }
                    s.deletions.entry(key).or_default().push(d.at);
                    s.clock = s.clock.max(d.at);
                }
                JournalLine::Ge(ge) => {
                    s.next_ge_id = s.next_ge_id.max(ge.ge_id);
                    s.clock = s.clock.max(ge.built_at);
                    s.ges.insert(ge.key(), ge);
                }
            }
        }
        Ok(s)
    }

    /// Writes a snapshot: live policies in insertion order, then stored
    /// guarded expressions in key order.
    pub fn export<W: Write>(&self, mut w: W) -> Result<()> {
        let mut ps: Vec<&Policy> = self.policies.values().collect();
        ps.sort_by_key(|p| (p.inserted_at, p.id));
        for p in ps {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        for ge in self.ges.values() {
            serde_json::to_writer(&mut w, ge)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Action;
    use crate::value::Value;

    fn pol(owner: i64, querier: &str) -> Policy {
        Policy {
            id: PolicyId(0),
            relation: "wifi".into(),
            owner: Value::Int(owner),
            object_conditions: vec![ObjectCondition::eq("owner", Value::Int(owner))],
            querier: querier.into(),
            purpose: "attendance".into(),
            action: Action::Allow,
            inserted_at: 0,
        }
    }

    fn ge(q: &str) -> StoredGuardedExpression {
        StoredGuardedExpression {
            ge_id: 0,
            querier: q.into(),
            purpose: "attendance".into(),
            relation: "wifi".into(),
            guards: vec![],
            outdated: false,
            built_at: 0,
        }
    }

    #[test]
    fn first_insert_gets_id_one() {
        let mut s = PolicyStore::default();
        assert_eq!(s.insert_policy(pol(1, "a")).unwrap(), PolicyId(1));
        assert_eq!(s.insert_policy(pol(2, "a")).unwrap(), PolicyId(2));
    }

    #[test]
    fn duplicate_and_missing_ids() {
        let mut s = PolicyStore::default();
        let mut p = pol(1, "a");
        p.id = PolicyId(5);
        s.insert_policy(p.clone()).unwrap();
        assert!(matches!(s.insert_policy(p), Err(Error::Conflict(PolicyId(5)))));
        assert!(matches!(s.delete_policy(PolicyId(9)), Err(Error::NotFound(PolicyId(9)))));
    }

    #[test]
    fn fetch_since_is_ordered_and_strict() {
        let mut s = PolicyStore::default();
        for o in 0..5 {
            s.insert_policy(pol(o, "a")).unwrap();
        }
        s.insert_policy(pol(9, "b")).unwrap();
        let all = s.fetch_policies("a", "attendance", "wifi", 0);
        assert_eq!(all.len(), 5);
        let later = s.fetch_policies("a", "attendance", "wifi", 3);
        assert_eq!(later.iter().map(|p| p.inserted_at).collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn group_policies_are_fetched_for_members() {
        let mut s = PolicyStore::new(GroupDirectory::new([("a", "staff")]));
        s.insert_policy(pol(1, "staff")).unwrap();
        s.insert_policy(pol(2, "a")).unwrap();
        assert_eq!(s.fetch_policies("a", "attendance", "wifi", 0).len(), 2);
        assert_eq!(s.fetch_policies("b", "attendance", "wifi", 0).len(), 0);
    }

    #[test]
    fn mutations_mark_ges_outdated() {
        let mut s = PolicyStore::default();
        s.store_ge(ge("a")).unwrap();
        s.store_ge(ge("b")).unwrap();
        s.insert_policy(pol(1, "a")).unwrap();
        assert!(s.fetch_ge("a", "attendance", "wifi").unwrap().outdated);
        assert!(!s.fetch_ge("b", "attendance", "wifi").unwrap().outdated);
        s.store_ge(ge("a")).unwrap();
        assert!(!s.fetch_ge("a", "attendance", "wifi").unwrap().outdated);
        s.delete_policy(PolicyId(1)).unwrap();
        assert!(s.fetch_ge("a", "attendance", "wifi").unwrap().outdated);
        assert_eq!(s.deletions_since("a", "attendance", "wifi", 0), 1);
        assert_eq!(s.deletions_since("a", "attendance", "wifi", s.clock()), 0);
    }

    #[test]
    fn store_ge_replaces() {
        let mut s = PolicyStore::default();
        let first = s.store_ge(ge("a")).unwrap();
        let second = s.store_ge(ge("a")).unwrap();
        assert_ne!(first, second);
        assert_eq!(s.fetch_ge("a", "attendance", "wifi").unwrap().ge_id, second);
    }

    #[test]
    fn export_import_round_trip() {
        let mut s = PolicyStore::default();
        for o in 0..4 {
            s.insert_policy(pol(o, "a")).unwrap();
        }
        s.delete_policy(PolicyId(2)).unwrap();
        s.store_ge(ge("a")).unwrap();
        let mut buf = Vec::new();
        s.export(&mut buf).unwrap();
        let back = PolicyStore::import(&buf[..], GroupDirectory::default()).unwrap();
        let mut again = Vec::new();
        back.export(&mut again).unwrap();
        assert_eq!(buf, again);
        assert_eq!(back.len(), 3);
    }
}
