//! Canonical domain types: transaction events, student profiles, assessment
//! scores, and the school calendar used for local-time rules.
//!
//! Instants are stored as UTC at second resolution. Local-clock rules (school
//! hours, weekends, calendar months) go through [`SchoolCalendar`], which owns
//! the IANA timezone of the school.

use std::fmt;

use chrono::{DateTime, Datelike, NaiveTime, TimeZone, Timelike, Utc, Weekday};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque student identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StudentId(pub String);

/// Opaque class identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub String);

impl StudentId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl ClassId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StudentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StudentId {
    fn from(s: &str) -> Self {
        StudentId(s.to_string())
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        ClassId(s.to_string())
    }
}

/// Kind of logged learner action.
///
/// The declaration order doubles as the tie-break order when two events of one
/// student share a timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ProblemStart,
    Response,
    HintRequest,
    AssignmentStart,
    AssignmentComplete,
}

impl EventKind {
    /// Canonical wire name (snake_case), used by the CSV schemas.
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ProblemStart => "problem_start",
            EventKind::Response => "response",
            EventKind::HintRequest => "hint_request",
            EventKind::AssignmentStart => "assignment_start",
            EventKind::AssignmentComplete => "assignment_complete",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "problem_start" => Some(EventKind::ProblemStart),
            "response" => Some(EventKind::Response),
            "hint_request" => Some(EventKind::HintRequest),
            "assignment_start" => Some(EventKind::AssignmentStart),
            "assignment_complete" => Some(EventKind::AssignmentComplete),
            _ => None,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One timestamped learner action, the atomic log row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionEvent {
    pub student_id: StudentId,
    pub class_id: ClassId,
    /// UTC instant, second resolution.
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    pub assignment_id: String,
    pub problem_id: Option<String>,
}

impl TransactionEvent {
    /// Canonical total order: (class, student, timestamp, kind, assignment,
    /// problem). Within a (student, class) group this sorts by timestamp with
    /// the stable tie-break the ingest contract requires.
    pub fn sort_key(
        &self,
    ) -> (
        &ClassId,
        &StudentId,
        DateTime<Utc>,
        EventKind,
        &str,
        Option<&str>,
    ) {
        (
            &self.class_id,
            &self.student_id,
            self.timestamp,
            self.kind,
            self.assignment_id.as_str(),
            self.problem_id.as_deref(),
        )
    }
}

/// An immutable, canonically sorted event collection.
///
/// Events are sorted by [`TransactionEvent::sort_key`] and exact-duplicate
/// events have been removed, so the order within any (student, class) group is
/// total: no two retained events compare equal.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EventLog {
    events: Vec<TransactionEvent>,
}

impl EventLog {
    /// Sorts canonically and drops exact duplicates. Returns the log and the
    /// number of duplicates removed.
    pub fn from_unsorted(mut events: Vec<TransactionEvent>) -> (Self, usize) {
        events.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let before = events.len();
        events.dedup_by(|a, b| a.sort_key() == b.sort_key());
        let dropped = before - events.len();
        (EventLog { events }, dropped)
    }

    pub fn events(&self) -> &[TransactionEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Contiguous per-class slices, in class-id order.
    pub fn class_groups(&self) -> impl Iterator<Item = (&ClassId, &[TransactionEvent])> {
        self.events
            .chunk_by(|a, b| a.class_id == b.class_id)
            .map(|chunk| (&chunk[0].class_id, chunk))
    }
}

/// Contiguous per-student slices of a per-class event slice.
pub fn student_groups(
    class_events: &[TransactionEvent],
) -> impl Iterator<Item = (&StudentId, &[TransactionEvent])> {
    class_events
        .chunk_by(|a, b| a.student_id == b.student_id)
        .map(|chunk| (&chunk[0].student_id, chunk))
}

/// Outcome of parsing one categorical cell.
pub enum CatParse<T> {
    Known(T),
    /// Empty cell; maps to the Missing level silently.
    Blank,
    /// Non-empty but unrecognized; maps to Missing with a warning.
    Unknown,
}

fn parse_cat<T>(s: &str, f: impl Fn(&str) -> Option<T>) -> CatParse<T> {
    let t = s.trim();
    if t.is_empty() {
        return CatParse::Blank;
    }
    match f(&t.to_ascii_lowercase()) {
        Some(v) => CatParse::Known(v),
        None => CatParse::Unknown,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
    Missing,
}

impl Gender {
    pub fn parse(s: &str) -> CatParse<Self> {
        parse_cat(s, |t| match t {
            "male" | "m" => Some(Gender::Male),
            "female" | "f" => Some(Gender::Female),
            _ => None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Missing => "",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ethnicity {
    White,
    AfricanAmerican,
    Hispanic,
    Other,
    Missing,
}

impl Ethnicity {
    pub fn parse(s: &str) -> CatParse<Self> {
        parse_cat(s, |t| match t {
            "white" => Some(Ethnicity::White),
            "african_american" | "africanamerican" | "african american" => {
                Some(Ethnicity::AfricanAmerican)
            }
            "hispanic" => Some(Ethnicity::Hispanic),
            "other" => Some(Ethnicity::Other),
            _ => None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ethnicity::White => "white",
            Ethnicity::AfricanAmerican => "african_american",
            Ethnicity::Hispanic => "hispanic",
            Ethnicity::Other => "other",
            Ethnicity::Missing => "",
        }
    }
}

/// Yes/no administrative indicator with an explicit Missing level.
/// Used for FRL eligibility, IEP, and ELL status.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriState {
    Yes,
    No,
    Missing,
}

impl TriState {
    pub fn parse(s: &str) -> CatParse<Self> {
        parse_cat(s, |t| match t {
            "yes" | "y" | "true" | "1" | "eligible" => Some(TriState::Yes),
            "no" | "n" | "false" | "0" | "not_eligible" => Some(TriState::No),
            _ => None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TriState::Yes => "yes",
            TriState::No => "no",
            TriState::Missing => "",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locale {
    Urban,
    Rural,
    Missing,
}

impl Locale {
    pub fn parse(s: &str) -> CatParse<Self> {
        parse_cat(s, |t| match t {
            "urban" => Some(Locale::Urban),
            "rural" => Some(Locale::Rural),
            _ => None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Locale::Urban => "urban",
            Locale::Rural => "rural",
            Locale::Missing => "",
        }
    }
}

/// Demographic record for one student. Missing is an explicit level on every
/// field, never an absent record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentProfile {
    pub student_id: StudentId,
    pub gender: Gender,
    pub ethnicity: Ethnicity,
    pub frl: TriState,
    pub iep: TriState,
    pub ell: TriState,
    pub locale: Locale,
}

/// Fall/spring standardized-test scores; either may be missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessmentRecord {
    pub student_id: StudentId,
    pub map_fall: Option<f64>,
    pub map_spring: Option<f64>,
}

#[derive(Debug, Error)]
pub enum CalendarError {
    #[error("unresolvable timezone {0:?}")]
    BadTimezone(String),
    #[error("school day start {start} is not before end {end}")]
    BadHours { start: NaiveTime, end: NaiveTime },
}

/// Per-school local-time rules: timezone, school-day window, weekend days.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchoolCalendar {
    pub timezone: Tz,
    pub day_start: NaiveTime,
    pub day_end: NaiveTime,
    pub weekend: Vec<Weekday>,
}

impl SchoolCalendar {
    pub const DEFAULT_TIMEZONE: &'static str = "America/Chicago";

    /// Calendar with the default 07:00-15:00 school day and Sat/Sun weekend.
    pub fn new(timezone: &str) -> Result<Self, CalendarError> {
        let tz: Tz = timezone
            .parse()
            .map_err(|_| CalendarError::BadTimezone(timezone.to_string()))?;
        Ok(SchoolCalendar {
            timezone: tz,
            day_start: NaiveTime::from_hms_opt(7, 0, 0).unwrap(),
            day_end: NaiveTime::from_hms_opt(15, 0, 0).unwrap(),
            weekend: vec![Weekday::Sat, Weekday::Sun],
        })
    }

    pub fn with_hours(mut self, start: NaiveTime, end: NaiveTime) -> Result<Self, CalendarError> {
        if start >= end {
            return Err(CalendarError::BadHours { start, end });
        }
        self.day_start = start;
        self.day_end = end;
        Ok(self)
    }

    pub fn with_weekend(mut self, weekend: Vec<Weekday>) -> Self {
        self.weekend = weekend;
        self
    }

    pub fn local(&self, instant: DateTime<Utc>) -> DateTime<Tz> {
        instant.with_timezone(&self.timezone)
    }

    /// True when the instant falls on a school day inside
    /// [day_start, day_end) local time.
    pub fn is_school_time(&self, instant: DateTime<Utc>) -> bool {
        let local = self.local(instant);
        if self.weekend.contains(&local.weekday()) {
            return false;
        }
        let t = local.time();
        t >= self.day_start && t < self.day_end
    }

    /// Calendar month of the instant in school-local time, as (year, month).
    pub fn local_month(&self, instant: DateTime<Utc>) -> (i32, u32) {
        let local = self.local(instant);
        (local.year(), local.month())
    }

    /// Resolves a naive local wall-clock time to a UTC instant.
    ///
    /// Ambiguous times (clock fold) resolve to the earlier instant; times
    /// inside a clock gap do not exist and return None.
    pub fn resolve_local(&self, naive: chrono::NaiveDateTime) -> Option<(DateTime<Utc>, bool)> {
        match self.timezone.from_local_datetime(&naive) {
            chrono::LocalResult::Single(dt) => Some((dt.with_timezone(&Utc), false)),
            chrono::LocalResult::Ambiguous(first, _second) => {
                Some((first.with_timezone(&Utc), true))
            }
            chrono::LocalResult::None => None,
        }
    }
}

/// Truncates an instant to whole-second resolution.
pub fn truncate_to_second(instant: DateTime<Utc>) -> DateTime<Utc> {
    instant.with_nanosecond(0).expect("0 ns is always valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn ts(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    fn ev(student: &str, class: &str, t: &str, kind: EventKind) -> TransactionEvent {
        TransactionEvent {
            student_id: student.into(),
            class_id: class.into(),
            timestamp: ts(t),
            kind,
            assignment_id: "a1".to_string(),
            problem_id: None,
        }
    }

    #[test]
    fn event_log_sorts_and_dedups() {
        let events = vec![
            ev("s2", "c1", "2023-02-06T15:00:00Z", EventKind::Response),
            ev("s1", "c1", "2023-02-06T15:00:10Z", EventKind::Response),
            ev("s1", "c1", "2023-02-06T15:00:00Z", EventKind::ProblemStart),
            ev("s1", "c1", "2023-02-06T15:00:00Z", EventKind::ProblemStart),
        ];
        let (log, dropped) = EventLog::from_unsorted(events);
        assert_eq!(dropped, 1);
        assert_eq!(log.len(), 3);
        let evs = log.events();
        assert_eq!(evs[0].student_id.as_str(), "s1");
        assert_eq!(evs[0].kind, EventKind::ProblemStart);
        assert_eq!(evs[2].student_id.as_str(), "s2");
        // Totality: no two retained events compare equal.
        for pair in evs.windows(2) {
            assert!(pair[0].sort_key() < pair[1].sort_key());
        }
    }

    #[test]
    fn tie_break_uses_event_kind_order() {
        let events = vec![
            ev("s1", "c1", "2023-02-06T15:00:00Z", EventKind::AssignmentStart),
            ev("s1", "c1", "2023-02-06T15:00:00Z", EventKind::ProblemStart),
        ];
        let (log, _) = EventLog::from_unsorted(events);
        assert_eq!(log.events()[0].kind, EventKind::ProblemStart);
        assert_eq!(log.events()[1].kind, EventKind::AssignmentStart);
    }

    #[test]
    fn school_time_window_is_half_open() {
        let cal = SchoolCalendar::new("America/Chicago").unwrap();
        // 2023-02-06 is a Monday; Chicago is UTC-6 in February.
        assert!(cal.is_school_time(ts("2023-02-06T13:00:00Z"))); // 07:00 local
        assert!(cal.is_school_time(ts("2023-02-06T20:59:59Z"))); // 14:59:59 local
        assert!(!cal.is_school_time(ts("2023-02-06T21:00:00Z"))); // 15:00 local
        assert!(!cal.is_school_time(ts("2023-02-06T12:59:59Z"))); // 06:59:59 local
        // Saturday 2023-02-11, mid-morning local.
        assert!(!cal.is_school_time(ts("2023-02-11T16:00:00Z")));
    }

    #[test]
    fn local_month_respects_timezone() {
        let cal = SchoolCalendar::new("America/Chicago").unwrap();
        // 2023-03-01T02:00Z is still Feb 28 in Chicago.
        assert_eq!(cal.local_month(ts("2023-03-01T02:00:00Z")), (2023, 2));
        assert_eq!(cal.local_month(ts("2023-03-01T12:00:00Z")), (2023, 3));
    }

    #[test]
    fn resolve_local_handles_dst_gap_and_fold() {
        let cal = SchoolCalendar::new("America/Chicago").unwrap();
        // 2023-03-12 02:30 local does not exist (spring forward).
        let gap = NaiveDate::from_ymd_opt(2023, 3, 12)
            .unwrap()
            .and_hms_opt(2, 30, 0)
            .unwrap();
        assert!(cal.resolve_local(gap).is_none());
        // 2023-11-05 01:30 local occurs twice (fall back); earlier wins.
        let fold = NaiveDate::from_ymd_opt(2023, 11, 5)
            .unwrap()
            .and_hms_opt(1, 30, 0)
            .unwrap();
        let (resolved, ambiguous) = cal.resolve_local(fold).unwrap();
        assert!(ambiguous);
        assert_eq!(resolved, ts("2023-11-05T06:30:00Z"));
    }

    #[test]
    fn bad_calendar_inputs_fail() {
        assert!(SchoolCalendar::new("Mars/Olympus").is_err());
        let cal = SchoolCalendar::new("America/Chicago").unwrap();
        let start = NaiveTime::from_hms_opt(15, 0, 0).unwrap();
        let end = NaiveTime::from_hms_opt(7, 0, 0).unwrap();
        assert!(cal.with_hours(start, end).is_err());
    }
}
