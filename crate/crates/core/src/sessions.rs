//! Activity-burst segmentation and class-session inference.
//!
//! A student's event stream splits into bursts wherever the gap to the
//! previous event exceeds `split_gap`. Within a class, bursts whose intervals
//! overlap or touch are merged transitively into one candidate session whose
//! bounds are the union envelope. A candidate is then classified from its
//! start instant and peak concurrency:
//!
//! - start outside local school hours or on a weekend  -> Homework
//! - peak concurrency > min_classwork_concurrency      -> Classwork
//! - otherwise                                         -> IndependentWork
//!
//! Peak concurrency counts distinct students, not bursts. Classification keys
//! on the session start, so a session straddling the end of the school day
//! stays Classwork if it started in-hours. A peak of exactly
//! `min_classwork_concurrency` is IndependentWork (the threshold is strict).

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::Serialize;

use crate::model::{student_groups, ClassId, EventLog, SchoolCalendar, StudentId};

/// One maximal run of a student's events with no internal gap above the
/// split threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivityBurst {
    pub student_id: StudentId,
    pub class_id: ClassId,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub event_count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionType {
    Classwork,
    IndependentWork,
    Homework,
}

impl SessionType {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionType::Classwork => "classwork",
            SessionType::IndependentWork => "independent_work",
            SessionType::Homework => "homework",
        }
    }
}

/// A merged burst group before classification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSession {
    pub class_id: ClassId,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub bursts: Vec<ActivityBurst>,
    pub peak_concurrency: u32,
}

impl CandidateSession {
    pub fn n_students(&self) -> u32 {
        let mut ids: Vec<&StudentId> = self.bursts.iter().map(|b| &b.student_id).collect();
        ids.sort();
        ids.dedup();
        ids.len() as u32
    }

    pub fn length_seconds(&self) -> i64 {
        (self.end - self.start).num_seconds()
    }
}

/// A classified class session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSession {
    pub class_id: ClassId,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub session_type: SessionType,
    pub bursts: Vec<ActivityBurst>,
    pub peak_concurrency: u32,
    pub n_students: u32,
}

impl ClassSession {
    pub fn length_seconds(&self) -> i64 {
        (self.end - self.start).num_seconds()
    }
}

/// Optional percentile trim of inferred session bounds.
///
/// The session start moves to the given percentile of member-burst starts and
/// the end to the complementary percentile of member-burst ends. Off by
/// default; student windows are clamped to the trimmed bounds downstream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrimConfig {
    /// Percentile in (0, 50), e.g. 5.0 trims to the 5th/95th percentiles.
    pub percentile: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub split_gap: Duration,
    pub min_classwork_concurrency: u32,
    pub trim: Option<TrimConfig>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            split_gap: Duration::minutes(15),
            min_classwork_concurrency: 5,
            trim: None,
        }
    }
}

/// Step function of simultaneously active distinct students over a session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConcurrencyProfile {
    /// (instant, active count from this instant until the next step).
    pub steps: Vec<(DateTime<Utc>, u32)>,
    pub peak: u32,
}

/// Splits sorted events into per-student activity bursts.
///
/// A new burst begins whenever the gap to the previous event exceeds
/// `split_gap` (strictly). Empty input yields empty output.
pub fn segment_bursts(log: &EventLog, split_gap: Duration) -> Vec<ActivityBurst> {
    let mut bursts = Vec::new();
    for (class_id, class_events) in log.class_groups() {
        for (student_id, events) in student_groups(class_events) {
            let mut start = events[0].timestamp;
            let mut end = start;
            let mut count: u32 = 0;
            for event in events {
                if count > 0 && event.timestamp - end > split_gap {
                    bursts.push(ActivityBurst {
                        student_id: student_id.clone(),
                        class_id: class_id.clone(),
                        start,
                        end,
                        event_count: count,
                    });
                    start = event.timestamp;
                    count = 0;
                }
                end = event.timestamp;
                count += 1;
            }
            bursts.push(ActivityBurst {
                student_id: student_id.clone(),
                class_id: class_id.clone(),
                start,
                end,
                event_count: count,
            });
        }
    }
    bursts
}

/// Result of grouping bursts into candidate sessions.
#[derive(Clone, Debug, Default)]
pub struct SessionGrouping {
    pub candidates: Vec<CandidateSession>,
    /// Single-instant burst groups (zero-length envelope) are dropped; their
    /// burst count is reported here rather than silently discarded.
    pub degenerate_groups: u32,
    pub degenerate_bursts: u32,
}

/// Merges bursts of one class into candidate sessions wherever their
/// intervals overlap or touch, transitively. Bounds are the union envelope.
pub fn build_class_sessions(mut bursts: Vec<ActivityBurst>) -> SessionGrouping {
    bursts.sort_by(|a, b| {
        (&a.class_id, a.start, a.end, &a.student_id).cmp(&(&b.class_id, b.start, b.end, &b.student_id))
    });
    let mut grouping = SessionGrouping::default();
    let mut open: Option<CandidateSession> = None;

    let flush = |session: CandidateSession, grouping: &mut SessionGrouping| {
        if session.start == session.end {
            grouping.degenerate_groups += 1;
            grouping.degenerate_bursts += session.bursts.len() as u32;
        } else {
            grouping.candidates.push(session);
        }
    };

    for burst in bursts {
        match open.as_mut() {
            Some(session) if session.class_id == burst.class_id && burst.start <= session.end => {
                session.end = session.end.max(burst.end);
                session.bursts.push(burst);
            }
            _ => {
                if let Some(done) = open.take() {
                    flush(done, &mut grouping);
                }
                open = Some(CandidateSession {
                    class_id: burst.class_id.clone(),
                    start: burst.start,
                    end: burst.end,
                    bursts: vec![burst],
                    peak_concurrency: 0,
                });
            }
        }
    }
    if let Some(done) = open.take() {
        flush(done, &mut grouping);
    }
    for candidate in &mut grouping.candidates {
        candidate.peak_concurrency = concurrency_profile(candidate).peak;
    }
    grouping
}

/// Sweep-line count of simultaneously active distinct students.
///
/// Burst intervals are closed at second resolution: a student covering
/// `[a, b]` is active at every second `a..=b`, so touching intervals from
/// different students do overlap for one second. A student's own intervals
/// are merged first so the student never counts twice.
pub fn concurrency_profile(session: &CandidateSession) -> ConcurrencyProfile {
    let mut per_student: BTreeMap<&StudentId, Vec<(DateTime<Utc>, DateTime<Utc>)>> =
        BTreeMap::new();
    for burst in &session.bursts {
        per_student
            .entry(&burst.student_id)
            .or_default()
            .push((burst.start, burst.end));
    }

    let mut deltas: BTreeMap<DateTime<Utc>, i64> = BTreeMap::new();
    for intervals in per_student.values_mut() {
        intervals.sort();
        let mut merged: Vec<(DateTime<Utc>, DateTime<Utc>)> = Vec::new();
        for &(start, end) in intervals.iter() {
            match merged.last_mut() {
                // Adjacent seconds (end + 1s == start) still form continuous coverage.
                Some(last) if start <= last.1 + Duration::seconds(1) => {
                    last.1 = last.1.max(end);
                }
                _ => merged.push((start, end)),
            }
        }
        for (start, end) in merged {
            *deltas.entry(start).or_insert(0) += 1;
            *deltas.entry(end + Duration::seconds(1)).or_insert(0) -= 1;
        }
    }

    let mut steps = Vec::with_capacity(deltas.len());
    let mut active: i64 = 0;
    let mut peak: i64 = 0;
    for (instant, delta) in deltas {
        active += delta;
        peak = peak.max(active);
        steps.push((instant, active as u32));
    }
    ConcurrencyProfile {
        steps,
        peak: peak as u32,
    }
}

/// Applies the school-hours and concurrency rules to one candidate.
pub fn classify_session(
    session: &CandidateSession,
    calendar: &SchoolCalendar,
    min_classwork_concurrency: u32,
) -> SessionType {
    if !calendar.is_school_time(session.start) {
        SessionType::Homework
    } else if session.peak_concurrency > min_classwork_concurrency {
        SessionType::Classwork
    } else {
        SessionType::IndependentWork
    }
}

fn percentile_instant(mut values: Vec<DateTime<Utc>>, pct: f64) -> DateTime<Utc> {
    values.sort();
    let n = values.len();
    let rank = ((pct / 100.0) * n as f64).ceil().max(1.0) as usize;
    values[rank.min(n) - 1]
}

fn apply_trim(candidate: &mut CandidateSession, trim: TrimConfig) {
    let p = trim.percentile.clamp(0.0, 50.0);
    let starts: Vec<_> = candidate.bursts.iter().map(|b| b.start).collect();
    let ends: Vec<_> = candidate.bursts.iter().map(|b| b.end).collect();
    let new_start = percentile_instant(starts, p);
    let new_end = percentile_instant(ends, 100.0 - p);
    if new_start < new_end {
        candidate.start = new_start;
        candidate.end = new_end;
    }
}

/// Full inference summary for one event log.
#[derive(Clone, Debug, Default)]
pub struct SessionInference {
    pub sessions: Vec<ClassSession>,
    pub degenerate_groups: u32,
    pub degenerate_bursts: u32,
}

impl SessionInference {
    pub fn of_type(&self, kind: SessionType) -> impl Iterator<Item = &ClassSession> {
        self.sessions.iter().filter(move |s| s.session_type == kind)
    }
}

/// Segments, groups, optionally trims, and classifies the whole log.
pub fn infer_sessions(
    log: &EventLog,
    calendar: &SchoolCalendar,
    config: &SessionConfig,
) -> SessionInference {
    let bursts = segment_bursts(log, config.split_gap);
    let mut grouping = build_class_sessions(bursts);
    if let Some(trim) = config.trim {
        for candidate in &mut grouping.candidates {
            apply_trim(candidate, trim);
        }
    }
    let sessions = grouping
        .candidates
        .into_iter()
        .map(|candidate| {
            let session_type =
                classify_session(&candidate, calendar, config.min_classwork_concurrency);
            let n_students = candidate.n_students();
            ClassSession {
                class_id: candidate.class_id,
                start: candidate.start,
                end: candidate.end,
                session_type,
                bursts: candidate.bursts,
                peak_concurrency: candidate.peak_concurrency,
                n_students,
            }
        })
        .collect();
    SessionInference {
        sessions,
        degenerate_groups: grouping.degenerate_groups,
        degenerate_bursts: grouping.degenerate_bursts,
    }
}
