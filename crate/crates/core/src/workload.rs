//! Synthetic campus workloads: users, policies, WiFi connectivity events and
//! interleaved insert / query / delete streams.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::{Duration, NaiveDate, NaiveTime};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Action, ObjectCondition, Policy, PolicyId, Tuple};
use crate::value::Value;

pub const RELATION: &str = "wifi";
pub const POLICIES_PER_HOLDER: usize = 10;
pub const LOCATIONS: i64 = 64;
const CLASSROOMS: i64 = 24;
const LABS: i64 = 16;
const COURSES_PER_FACULTY: usize = 2;
const COURSES_PER_STUDENT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Attendance,
    SpaceUsage,
}

impl Scenario {
    pub fn purpose(self) -> &'static str {
        match self {
            Scenario::Attendance => "marking attendance",
            Scenario::SpaceUsage => "space-utilization",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scenario> {
        match s {
            "attendance" => Ok(Scenario::Attendance),
            "space-usage" | "space_usage" => Ok(Scenario::SpaceUsage),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Faculty,
    Staff,
    Graduate,
    Undergrad,
    Visitor,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Faculty => "faculty",
            Profile::Staff => "staff",
            Profile::Graduate => "graduate",
            Profile::Undergrad => "undergrad",
            Profile::Visitor => "visitor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    /// User counts divided by ten.
    Desk,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scale> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

/// User population of a scenario.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub counts: BTreeMap<Profile, usize>,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, scale: Scale) -> ScenarioSpec {
        let full: &[(Profile, usize)] = match scenario {
            Scenario::Attendance => &[(Profile::Graduate, 1394), (Profile::Undergrad, 1758), (Profile::Faculty, 388)],
            Scenario::SpaceUsage => &[
                (Profile::Visitor, 31796),
                (Profile::Staff, 1029),
                (Profile::Graduate, 1428),
                (Profile::Undergrad, 1795),
                (Profile::Faculty, 388),
            ],
        };
        let counts = full
            .iter()
            .map(|(p, n)| {
                let n = match scale {
                    Scale::Full => *n,
                    Scale::Desk => (*n + 5) / 10,
                };
                (*p, n)
            })
            .collect();
        ScenarioSpec { scenario, counts }
    }

    pub fn count(&self, p: Profile) -> usize {
        self.counts.get(&p).copied().unwrap_or(0)
    }

    pub fn holder_profiles(&self) -> Vec<Profile> {
        match self.scenario {
            Scenario::Attendance => vec![Profile::Graduate, Profile::Undergrad],
            Scenario::SpaceUsage => {
                vec![Profile::Visitor, Profile::Staff, Profile::Graduate, Profile::Undergrad, Profile::Faculty]
            }
        }
    }

    pub fn querier_profiles(&self) -> Vec<Profile> {
        match self.scenario {
            Scenario::Attendance => vec![Profile::Faculty],
            Scenario::SpaceUsage => vec![Profile::Staff, Profile::Faculty],
        }
    }

    pub fn holders(&self) -> usize {
        self.holder_profiles().iter().map(|p| self.count(*p)).sum()
    }

    pub fn querier_count(&self) -> usize {
        self.querier_profiles().iter().map(|p| self.count(*p)).sum()
    }

    pub fn total_policies(&self) -> usize {
        self.holders() * POLICIES_PER_HOLDER
    }

    /// Size of the query pool: one query per two policies.
    pub fn total_queries(&self) -> usize {
        self.total_policies() / 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Meeting {
    pub classroom: i64,
    pub start: NaiveTime,
    pub end: NaiveTime,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Course {
    pub faculty: i64,
    pub meetings: Vec<Meeting>,
}

#[derive(Clone, Debug, Serialize)]
pub struct User {
    pub id: i64,
    pub profile: Profile,
    /// Locations the user frequents outside of class.
    pub haunts: Vec<i64>,
}

/// Users, courses and enrollments of a synthetic campus.
#[derive(Clone, Debug, Serialize)]
pub struct Campus {
    pub spec: ScenarioSpec,
    pub users: Vec<User>,
    pub courses: Vec<Course>,
    pub enrollments: BTreeMap<i64, Vec<usize>>,
    pub queriers: Vec<i64>,
}

pub fn term_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 2, 1).expect("valid date")
}

pub fn term_end() -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 4, 30).expect("valid date")
}

fn hm(h: u32, m: u32) -> NaiveTime {
    NaiveTime::from_hms_opt(h, m, 0).expect("valid time")
}

/// Class-hour slots: 80 minutes starting every 90 minutes from 08:00.
fn slots() -> Vec<(NaiveTime, NaiveTime)> {
    (0..7)
        .map(|i| {
            let start = hm(8, 0) + Duration::minutes(90 * i);
            (start, start + Duration::minutes(80))
        })
        .collect()
}

impl Campus {
    pub fn generate(spec: &ScenarioSpec, seed: u64) -> Campus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut users = Vec::new();
        let mut next_id = 1;
        for profile in [Profile::Faculty, Profile::Staff, Profile::Graduate, Profile::Undergrad, Profile::Visitor] {
            for _ in 0..spec.count(profile) {
                let haunts = match profile {
                    Profile::Faculty | Profile::Staff => vec![rng.gen_range(CLASSROOMS + LABS + 1..=LOCATIONS)],
                    Profile::Graduate => vec![rng.gen_range(CLASSROOMS + 1..=CLASSROOMS + LABS), rng.gen_range(1..=LOCATIONS)],
                    Profile::Undergrad | Profile::Visitor => vec![rng.gen_range(1..=LOCATIONS), rng.gen_range(1..=LOCATIONS)],
                };
                users.push(User { id: next_id, profile, haunts });
                next_id += 1;
            }
        }
        let faculty: Vec<i64> = users.iter().filter(|u| u.profile == Profile::Faculty).map(|u| u.id).collect();
        let all_slots = slots();
        let mut courses = Vec::new();
        for &f in &faculty {
            for _ in 0..COURSES_PER_FACULTY {
                let room = rng.gen_range(1..=CLASSROOMS);
                let picked: Vec<&(NaiveTime, NaiveTime)> = all_slots.choose_multiple(&mut rng, 2).collect();
                let meetings = picked.iter().map(|(s, e)| Meeting { classroom: room, start: *s, end: *e }).collect();
                courses.push(Course { faculty: f, meetings });
            }
        }
        let students: Vec<i64> = users
            .iter()
            .filter(|u| matches!(u.profile, Profile::Graduate | Profile::Undergrad))
            .map(|u| u.id)
            .collect();
        let mut enrollments: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        if !courses.is_empty() && !students.is_empty() {
            let per_student = COURSES_PER_STUDENT.min(courses.len());
            // Every course gets at least one student, so every faculty member
            // ends up with policies.
            for (c, _) in courses.iter().enumerate() {
                let s = students[c % students.len()];
                let e = enrollments.entry(s).or_default();
                if e.len() < per_student && !e.contains(&c) {
                    e.push(c);
                }
            }
            let idx: Vec<usize> = (0..courses.len()).collect();
            for &s in &students {
                let e = enrollments.entry(s).or_default();
                while e.len() < per_student {
                    let c = *idx.choose(&mut rng).expect("courses");
                    if !e.contains(&c) {
                        e.push(c);
                    }
                }
            }
        }
        let queriers = users
            .iter()
            .filter(|u| spec.querier_profiles().contains(&u.profile))
            .map(|u| u.id)
            .collect();
        Campus { spec: spec.clone(), users, courses, enrollments, queriers }
    }

    pub fn user(&self, id: i64) -> &User {
        &self.users[(id - 1) as usize]
    }

    pub fn querier_names(&self) -> Vec<String> {
        self.queriers.iter().map(|q| q.to_string()).collect()
    }

    fn date_window(&self, rng: &mut ChaCha8Rng) -> (NaiveDate, NaiveDate) {
        let (s, e) = (term_start(), term_end());
        match rng.gen_range(0..10) {
            0 => (s + Duration::days(rng.gen_range(7..=30)), e),
            1 => (s, e - Duration::days(rng.gen_range(7..=45))),
            2 => {
                let d = s + Duration::days(rng.gen_range(0..=87));
                (d, d + Duration::days(rng.gen_range(0..=1)))
            }
            _ => (s, e),
        }
    }

    fn policy(&self, owner: i64, querier: i64, conds: Vec<ObjectCondition>) -> Policy {
        let mut object_conditions = vec![ObjectCondition::eq("owner", Value::Int(owner))];
        object_conditions.extend(conds);
        Policy {
            id: PolicyId(0),
            relation: RELATION.into(),
            owner: Value::Int(owner),
            object_conditions,
            querier: querier.to_string(),
            purpose: self.spec.scenario.purpose().into(),
            action: Action::Allow,
            inserted_at: 0,
        }
    }

    /// Ten policies per holder, ids assigned in shuffled insertion order.
    pub fn generate_policies(&self, seed: u64) -> Vec<Policy> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let mut out = Vec::with_capacity(self.spec.total_policies());
        let holders: Vec<&User> = self
            .users
            .iter()
            .filter(|u| self.spec.holder_profiles().contains(&u.profile))
            .collect();
        let mut rr = 0usize;
        for u in holders {
            let profile_cond = ObjectCondition::eq("user_profile", Value::Text(u.profile.name().into()));
            match self.spec.scenario {
                Scenario::Attendance => {
                    let enrolled = &self.enrollments[&u.id];
                    let mut k = 0;
                    while k < POLICIES_PER_HOLDER {
                        let course = &self.courses[enrolled[(k / 2) % enrolled.len()]];
                        let m = &course.meetings[k % course.meetings.len()];
                        let (d1, d2) = self.date_window(&mut rng);
                        out.push(self.policy(
                            u.id,
                            course.faculty,
                            vec![
                                profile_cond.clone(),
                                ObjectCondition::between("date", Value::Date(d1), Value::Date(d2)),
                                ObjectCondition::between("time", Value::Time(m.start), Value::Time(m.end)),
                                ObjectCondition::eq("location_id", Value::Int(m.classroom)),
                            ],
                        ));
                        k += 1;
                    }
                }
                Scenario::SpaceUsage => {
                    for _ in 0..POLICIES_PER_HOLDER {
                        // Round-robin first so every manager receives policies.
                        let q = if rr < self.queriers.len() {
                            self.queriers[rr]
                        } else {
                            *self.queriers.choose(&mut rng).expect("queriers")
                        };
                        rr += 1;
                        let (open, close) = match u.profile {
                            Profile::Visitor => (hm(9, 0), hm(17, 0)),
                            Profile::Staff => (hm(7, 0), hm(19, 0)),
                            _ => (hm(8, 0), hm(22, 0)),
                        };
                        let span = (close - open).num_minutes();
                        let a = rng.gen_range(0..span - 60);
                        let b = rng.gen_range(a + 60..=span);
                        let (d1, d2) = self.date_window(&mut rng);
                        let loc = if rng.gen_bool(0.5) {
                            ObjectCondition::eq("location_id", Value::Int(*u.haunts.choose(&mut rng).expect("haunt")))
                        } else {
                            let building = rng.gen_range(0..LOCATIONS / 8);
                            ObjectCondition::between("location_id", Value::Int(building * 8 + 1), Value::Int(building * 8 + 8))
                        };
                        out.push(self.policy(
                            u.id,
                            q,
                            vec![
                                profile_cond.clone(),
                                ObjectCondition::between("date", Value::Date(d1), Value::Date(d2)),
                                ObjectCondition::between(
                                    "time",
                                    Value::Time(open + Duration::minutes(a)),
                                    Value::Time(open + Duration::minutes(b)),
                                ),
                                loc,
                            ],
                        ));
                    }
                }
            }
        }
        out.shuffle(&mut rng);
        for (i, p) in out.iter_mut().enumerate() {
            p.id = PolicyId(i as u64 + 1);
        }
        out
    }

    /// Connectivity events. Students and faculty are mostly seen in their
    /// classrooms during class hours; everyone else wanders.
    pub fn generate_events(&self, rows: usize, seed: u64) -> Vec<Tuple> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151_5151);
        let mut teaches: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, c) in self.courses.iter().enumerate() {
            teaches.entry(c.faculty).or_default().push(i);
        }
        let days = (term_end() - term_start()).num_days();
        let mut out = Vec::with_capacity(rows);
        for id in 0..rows {
            let u = &self.users[rng.gen_range(0..self.users.len())];
            let date = term_start() + Duration::days(rng.gen_range(0..=days));
            let courses = self.enrollments.get(&u.id).or_else(|| teaches.get(&u.id));
            let (loc, time) = match courses {
                Some(cs) if rng.gen_bool(0.6) => {
                    let c = &self.courses[*cs.choose(&mut rng).expect("course")];
                    let m = c.meetings.choose(&mut rng).expect("meeting");
                    let secs = rng.gen_range(0..=(m.end - m.start).num_seconds());
                    (m.classroom, m.start + Duration::seconds(secs))
                }
                _ => {
                    let loc = if rng.gen_bool(0.7) {
                        *u.haunts.choose(&mut rng).expect("haunt")
                    } else {
                        rng.gen_range(1..=LOCATIONS)
                    };
                    (loc, hm(7, 0) + Duration::seconds(rng.gen_range(0..15 * 3600)))
                }
            };
            let mut a = BTreeMap::new();
            a.insert("id".to_string(), Value::Int(id as i64 + 1));
            a.insert("owner".to_string(), Value::Int(u.id));
            a.insert("location_id".to_string(), Value::Int(loc));
            a.insert("date".to_string(), Value::Date(date));
            a.insert("time".to_string(), Value::Time(time));
            out.push(Tuple { relation: RELATION.into(), attributes: a });
        }
        out
    }

    /// One query from templates Q1 (locations), Q2 (owners) or Q3 (counts
    /// per location), tailored to the querier.
    pub fn generate_query(&self, querier: i64, policies_for: &[i64], rng: &mut ChaCha8Rng) -> String {
        let own_courses: Vec<&Course> = self.courses.iter().filter(|c| c.faculty == querier).collect();
        let (t1, t2) = match own_courses.choose(rng).and_then(|c| c.meetings.choose(rng)) {
            Some(m) => (m.start - Duration::minutes(10), m.end + Duration::minutes(10)),
            None => {
                let s = hm(7, 0) + Duration::minutes(30 * rng.gen_range(0..24));
                (s, s + Duration::minutes(60 * rng.gen_range(2..=4)))
            }
        };
        let d1 = term_start() + Duration::days(rng.gen_range(0..=80));
        let d2 = d1 + Duration::days(rng.gen_range(0..=13));
        let window = format!(
            "W.time BETWEEN '{}' AND '{}' AND W.date BETWEEN '{}' AND '{}'",
            t1.format("%H:%M:%S"),
            t2.format("%H:%M:%S"),
            d1.format("%Y-%m-%d"),
            d2.format("%Y-%m-%d")
        );
        match rng.gen_range(0..3) {
            0 => {
                let mut locs: BTreeSet<i64> = own_courses.iter().flat_map(|c| c.meetings.iter().map(|m| m.classroom)).collect();
                if locs.is_empty() || rng.gen_bool(0.3) {
                    locs.insert(rng.gen_range(1..=LOCATIONS));
                }
                let list: Vec<String> = locs.iter().map(|l| l.to_string()).collect();
                format!("SELECT * FROM wifi AS W WHERE W.location_id IN ({}) AND {window}", list.join(", "))
            }
            1 => {
                let n = rng.gen_range(3..=10);
                let mut owners: BTreeSet<i64> = policies_for.choose_multiple(rng, n).copied().collect();
                if owners.is_empty() {
                    owners.insert(rng.gen_range(1..=self.users.len() as i64));
                }
                let list: Vec<String> = owners.iter().map(|o| o.to_string()).collect();
                format!("SELECT * FROM wifi AS W WHERE W.owner IN ({}) AND {window}", list.join(", "))
            }
            _ => format!("SELECT W.location_id, COUNT(*) FROM wifi AS W WHERE {window} GROUP BY W.location_id"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Steady,
    Bursty,
    Deletion,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "steady" => Ok(Mode::Steady),
            "bursty" => Ok(Mode::Bursty),
            "deletion" => Ok(Mode::Deletion),
            other => Err(Error::Config(format!("unknown workload mode `{other}`"))),
        }
    }
}

/// Per-cycle drift of the bursty workload, from (start_x, start_y) while x
/// stays at least `min_x` and y at most `max_y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstySchedule {
    pub start_x: usize,
    pub start_y: usize,
    pub dx: usize,
    pub dy: usize,
    pub min_x: usize,
    pub max_y: usize,
}

impl BurstySchedule {
    pub fn for_scale(scale: Scale) -> BurstySchedule {
        match scale {
            Scale::Full => BurstySchedule { start_x: 500, start_y: 1, dx: 10, dy: 5, min_x: 1, max_y: 250 },
            Scale::Desk => BurstySchedule { start_x: 50, start_y: 1, dx: 2, dy: 5, min_x: 1, max_y: 250 },
        }
    }

    pub fn cycles(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let (mut x, mut y) = (self.start_x, self.start_y);
        while x >= self.min_x && y <= self.max_y {
            out.push((x, y));
            if x < self.dx + self.min_x {
                break;
            }
            x -= self.dx;
            y += self.dy;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub scenario: Scenario,
    pub scale: Scale,
    pub mode: Mode,
    pub x_policies: usize,
    pub y_queries: usize,
    pub z_deletions: usize,
    pub zipf_alpha: f64,
    pub window_size: usize,
    pub seed: u64,
    pub bursty: BurstySchedule,
    pub max_epochs: Option<usize>,
}

impl WorkloadConfig {
    pub fn steady(scenario: Scenario, scale: Scale, x: usize, y: usize, seed: u64) -> WorkloadConfig {
        WorkloadConfig {
            scenario,
            scale,
            mode: Mode::Steady,
            x_policies: x,
            y_queries: y,
            z_deletions: 0,
            zipf_alpha: 0.0,
            window_size: 10,
            seed,
            bursty: BurstySchedule::for_scale(scale),
            max_epochs: None,
        }
    }

    pub fn deletion(scenario: Scenario, scale: Scale, x: usize, y: usize, z: usize, seed: u64) -> WorkloadConfig {
        WorkloadConfig { mode: Mode::Deletion, z_deletions: z, ..WorkloadConfig::steady(scenario, scale, x, y, seed) }
    }

    pub fn bursty(scenario: Scenario, scale: Scale, seed: u64) -> WorkloadConfig {
        WorkloadConfig { mode: Mode::Bursty, ..WorkloadConfig::steady(scenario, scale, 0, 0, seed) }
    }
}
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadEvent {
    InsertPolicy { policy: Policy },
    DeletePolicy { policy_id: PolicyId },
    Query { querier: String, purpose: String, sql: String, seen: bool },
    /// Marks the end of an epoch (bursty: one cycle).
    EpochEnd { epoch: usize },
}

/// One line of a workload file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequencedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: WorkloadEvent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadTotals {
    pub policies: usize,
    pub queries: usize,
    pub deletions: usize,
    pub epochs: usize,
    pub queriers: usize,
}

impl WorkloadTotals {
    pub fn of(events: &[WorkloadEvent]) -> WorkloadTotals {
        let mut t = WorkloadTotals::default();
        let mut queriers = BTreeSet::new();
        for e in events {
            match e {
                WorkloadEvent::InsertPolicy { policy } => {
                    t.policies += 1;
                    queriers.insert(policy.querier.clone());
                }
                WorkloadEvent::DeletePolicy { .. } => t.deletions += 1,
                WorkloadEvent::Query { .. } => t.queries += 1,
                WorkloadEvent::EpochEnd { .. } => t.epochs += 1,
            }
        }
        t.queriers = queriers.len();
        t
    }
}

#[derive(Clone, Debug)]
pub struct Workload {
    pub config: WorkloadConfig,
    pub campus: Campus,
    pub events: Vec<WorkloadEvent>,
    pub totals: WorkloadTotals,
}

impl Workload {
    pub fn sequenced(&self) -> impl Iterator<Item = SequencedEvent> + '_ {
        self.events.iter().enumerate().map(|(i, e)| SequencedEvent { seq: i as u64 + 1, event: e.clone() })
    }

    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for e in self.sequenced() {
            serde_json::to_writer(&mut w, &e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads a workload file, checking that sequence numbers increase.
pub fn read_jsonl<R: std::io::BufRead>(r: R) -> Result<Vec<WorkloadEvent>> {
    let mut out = Vec::new();
    let mut last = 0;
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: SequencedEvent = serde_json::from_str(&line)?;
        if e.seq <= last {
            return Err(Error::Config(format!("workload sequence not increasing at {}", e.seq)));
        }
        last = e.seq;
        out.push(e.event);
    }
    Ok(out)
}

/// Querier sampler: uniform at alpha 0, Zipf over a fixed shuffled ranking
/// otherwise.
pub struct QuerierSampler {
    ranked: Vec<i64>,
    dist: WeightedIndex<f64>,
}

impl QuerierSampler {
    pub fn new(queriers: &[i64], alpha: f64, rng: &mut ChaCha8Rng) -> QuerierSampler {
        let mut ranked = queriers.to_vec();
        ranked.shuffle(rng);
        let weights: Vec<f64> = (1..=ranked.len()).map(|r| (r as f64).powf(-alpha)).collect();
        QuerierSampler { ranked, dist: WeightedIndex::new(weights).expect("non-empty querier pool") }
    }

    /// Queriers from most to least popular.
    pub fn ranked(&self) -> &[i64] {
        &self.ranked
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> i64 {
        self.ranked[self.dist.sample(rng)]
    }
}

/// A pool of query texts with their queriers, one per two policies.
pub fn generate_queries(campus: &Campus, policies: &[Policy], zipf_alpha: f64, rng: &mut ChaCha8Rng) -> Vec<(String, String)> {
    let mut owners_by_querier: BTreeMap<&str, Vec<i64>> = BTreeMap::new();
    for p in policies {
        if let Value::Int(o) = p.owner {
            owners_by_querier.entry(p.querier.as_str()).or_default().push(o);
        }
    }
    for v in owners_by_querier.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    let sampler = QuerierSampler::new(&campus.queriers, zipf_alpha, rng);
    (0..policies.len() / 2)
        .map(|_| {
            let q = sampler.sample(rng);
            let name = q.to_string();
            let owners = owners_by_querier.get(name.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let sql = campus.generate_query(q, owners, rng);
            (name, sql)
        })
        .collect()
}

/// Interleaves policy inserts, queries and deletions per the configured
/// rhythm. Stops cleanly once either pool cannot fill a whole epoch.
pub fn interleave(
    policies: &[Policy],
    queries: &[(String, String)],
    purpose: &str,
    cfg: &WorkloadConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<WorkloadEvent>> {
    if cfg.window_size == 0 {
        return Err(Error::Config("window_size must be positive".into()));
    }
    let schedule = match cfg.mode {
        Mode::Bursty => cfg.bursty.cycles(),
        _ if cfg.x_policies == 0 && cfg.y_queries == 0 => {
            return Err(Error::Config("workloads need x or y above zero".into()));
        }
        _ => Vec::new(),
    };
    let z = if cfg.mode == Mode::Deletion { cfg.z_deletions } else { 0 };
    let mut events = Vec::new();
    let mut next_policy = 0usize;
    let mut next_query = 0usize;
    let mut emitted = 0usize;
    let mut live: Vec<PolicyId> = Vec::new();
    let mut window: VecDeque<(String, String)> = VecDeque::new();
    let mut epoch = 0usize;
    loop {
        if cfg.max_epochs.is_some_and(|m| epoch >= m) {
            break;
        }
        let (x, y) = match cfg.mode {
            Mode::Bursty => match schedule.get(epoch) {
                Some(c) => *c,
                None => break,
            },
            _ => (cfg.x_policies, cfg.y_queries),
        };
        if policies.len() - next_policy < x || queries.len() - emitted < y {
            break;
        }
        for p in &policies[next_policy..next_policy + x] {
            live.push(p.id);
            events.push(WorkloadEvent::InsertPolicy { policy: p.clone() });
        }
        next_policy += x;
        for _ in 0..y {
            let seen = emitted % 2 == 1 && !window.is_empty();
            let (querier, sql) = if seen {
                window[rng.gen_range(0..window.len())].clone()
            } else {
                next_query += 1;
                queries[next_query - 1].clone()
            };
            emitted += 1;
            window.push_back((querier.clone(), sql.clone()));
            if window.len() > cfg.window_size {
                window.pop_front();
            }
            events.push(WorkloadEvent::Query { querier, purpose: purpose.to_string(), sql, seen });
        }
        for _ in 0..z.min(live.len()) {
            let id = live.swap_remove(rng.gen_range(0..live.len()));
            events.push(WorkloadEvent::DeletePolicy { policy_id: id });
        }
        events.push(WorkloadEvent::EpochEnd { epoch });
        epoch += 1;
    }
    Ok(events)
}

pub fn generate(cfg: &WorkloadConfig) -> Result<Workload> {
    let spec = ScenarioSpec::new(cfg.scenario, cfg.scale);
    let campus = Campus::generate(&spec, cfg.seed);
    let policies = campus.generate_policies(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(7));
    let queries = generate_queries(&campus, &policies, cfg.zipf_alpha, &mut rng);
    let events = interleave(&policies, &queries, cfg.scenario.purpose(), cfg, &mut rng)?;
    let mut totals = WorkloadTotals::of(&events);
    totals.queriers = campus.queriers.len();
    Ok(Workload { config: cfg.clone(), campus, events, totals })
}
