//! Per-student coasting decomposition over classwork sessions.
//!
//! For a student window inside a class session of length `L` seconds:
//!
//! ```text
//! delayed_start = first_event - session_start
//! early_stop    = session_end  - last_event
//! idle_time     = sum of inter-event gaps strictly longer than the idle
//!                 threshold (full gap duration by default)
//! time_on_task  = (last_event - first_event) - idle_time
//! coasted_time  = delayed_start + idle_time + early_stop
//! ```
//!
//! so `delayed_start + idle_time + early_stop + time_on_task == L` exactly,
//! in integer seconds, by construction. Adjusted coasting zeroes the early
//! stop for sessions with at least one assignment completion; extra effort is
//! the active time after the first completion. Students with no events in a
//! session are absent, not coasting, and produce no record.
//!
//! The final action's own working duration is unobservable from timestamps
//! and is implicitly attributed to the window; the bias is uniform across
//! students. A student reaching one session through multiple bursts is
//! measured over the merged first-to-last envelope, so inter-burst silence
//! surfaces as idle time.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::Serialize;

use crate::model::{ClassId, EventKind, EventLog, StudentId};
use crate::sessions::{ClassSession, SessionInference, SessionType};

/// How a qualifying gap (longer than the threshold) is charged to idle time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IdleMode {
    /// The full gap duration counts as idle.
    FullGap,
    /// Only the excess over the threshold counts as idle.
    ExcessOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdleConfig {
    pub threshold: Duration,
    pub mode: IdleMode,
}

impl Default for IdleConfig {
    fn default() -> Self {
        IdleConfig {
            threshold: Duration::seconds(120),
            mode: IdleMode::FullGap,
        }
    }
}

/// A student's active span within one class session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudentWindow {
    pub student_id: StudentId,
    pub first_event: DateTime<Utc>,
    pub last_event: DateTime<Utc>,
    /// Positive-length intervals between consecutive events.
    pub gaps: Vec<(DateTime<Utc>, DateTime<Utc>)>,
}

/// Builds the window spanning the student's first to last event inside the
/// session. `None` means the student was absent from this session.
pub fn student_window(
    student_id: &StudentId,
    event_times: &[DateTime<Utc>],
) -> Option<StudentWindow> {
    let first = *event_times.first()?;
    let last = *event_times.last()?;
    let mut gaps = Vec::new();
    for pair in event_times.windows(2) {
        if pair[1] > pair[0] {
            gaps.push((pair[0], pair[1]));
        }
    }
    Some(StudentWindow {
        student_id: student_id.clone(),
        first_event: first,
        last_event: last,
        gaps,
    })
}

/// Identity of the session a record was measured against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionBounds {
    pub class_id: ClassId,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl From<&ClassSession> for SessionBounds {
    fn from(s: &ClassSession) -> Self {
        SessionBounds {
            class_id: s.class_id.clone(),
            start: s.start,
            end: s.end,
        }
    }
}

/// The per-(student, session) decomposition. All durations are integer
/// seconds; proportional forms are exposed as methods against the session
/// length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoastingRecord {
    pub student_id: StudentId,
    pub class_id: ClassId,
    pub session_start: DateTime<Utc>,
    pub session_end: DateTime<Utc>,
    pub session_length: i64,
    pub delayed_start: i64,
    pub idle_time: i64,
    pub early_stop: i64,
    pub time_on_task: i64,
    pub coasted_time: i64,
    pub adjusted_coasted_time: i64,
    pub completed_assignment: bool,
    pub extra_effort_time: i64,
}

impl CoastingRecord {
    fn prop(&self, seconds: i64) -> f64 {
        seconds as f64 / self.session_length as f64
    }

    pub fn prop_delayed(&self) -> f64 {
        self.prop(self.delayed_start)
    }

    pub fn prop_idle(&self) -> f64 {
        self.prop(self.idle_time)
    }

    pub fn prop_early(&self) -> f64 {
        self.prop(self.early_stop)
    }

    pub fn prop_time_on_task(&self) -> f64 {
        self.prop(self.time_on_task)
    }

    pub fn prop_coasted(&self) -> f64 {
        self.prop(self.coasted_time)
    }

    pub fn prop_adjusted_coasted(&self) -> f64 {
        self.prop(self.adjusted_coasted_time)
    }

    pub fn prop_extra_effort(&self) -> f64 {
        self.prop(self.extra_effort_time)
    }

    /// Exact integer decomposition identity.
    pub fn identity_holds(&self) -> bool {
        self.delayed_start + self.idle_time + self.early_stop + self.time_on_task
            == self.session_length
            && self.coasted_time == self.delayed_start + self.idle_time + self.early_stop
    }
}

/// Idle seconds contributed by `gaps` inside the clip range `[lo, hi]`.
/// A gap qualifies by its full (unclipped) duration.
fn idle_seconds(
    gaps: &[(DateTime<Utc>, DateTime<Utc>)],
    lo: DateTime<Utc>,
    hi: DateTime<Utc>,
    idle: &IdleConfig,
) -> i64 {
    let threshold = idle.threshold.num_seconds();
    let mut total = 0;
    for &(gs, ge) in gaps {
        let full = (ge - gs).num_seconds();
        if full <= threshold {
            continue;
        }
        let clipped = ((ge.min(hi)) - (gs.max(lo))).num_seconds();
        if clipped <= 0 {
            continue;
        }
        total += match idle.mode {
            IdleMode::FullGap => clipped,
            IdleMode::ExcessOnly => (clipped - threshold).max(0),
        };
    }
    total
}

/// Computes the decomposition for one window against its session bounds.
///
/// Window endpoints are clamped into the session interval (they can fall
/// outside it only when boundary trimming moved the bounds), so delayed start
/// and early stop never go negative. The adjusted fields default to the
/// unadjusted values; see [`adjust_for_completion`] and [`extra_effort`].
pub fn measure_session(
    window: &StudentWindow,
    session: &SessionBounds,
    idle: &IdleConfig,
) -> CoastingRecord {
    let length = (session.end - session.start).num_seconds();
    debug_assert!(length > 0, "coasting is undefined for zero-length sessions");
    let first = window.first_event.clamp(session.start, session.end);
    let last = window.last_event.clamp(session.start, session.end);
    let delayed_start = (first - session.start).num_seconds();
    let early_stop = (session.end - last).num_seconds();
    let idle_time = idle_seconds(&window.gaps, first, last, idle);
    let time_on_task = (last - first).num_seconds() - idle_time;
    let coasted_time = delayed_start + idle_time + early_stop;
    CoastingRecord {
        student_id: window.student_id.clone(),
        class_id: session.class_id.clone(),
        session_start: session.start,
        session_end: session.end,
        session_length: length,
        delayed_start,
        idle_time,
        early_stop,
        time_on_task,
        coasted_time,
        adjusted_coasted_time: coasted_time,
        completed_assignment: false,
        extra_effort_time: 0,
    }
}

/// Zeroes the early stop when the student completed at least one assignment
/// in the session; otherwise the adjusted value equals the unadjusted one.
pub fn adjust_for_completion(record: &mut CoastingRecord, completions: &[DateTime<Utc>]) {
    record.completed_assignment = !completions.is_empty();
    record.adjusted_coasted_time = if record.completed_assignment {
        record.delayed_start + record.idle_time
    } else {
        record.coasted_time
    };
}

/// Active (idle-excluded) seconds after the first assignment completion in
/// the window. Zero when there is no completion, or when the completion is
/// the last event.
pub fn extra_effort(
    window: &StudentWindow,
    completions: &[DateTime<Utc>],
    idle: &IdleConfig,
) -> i64 {
    let Some(&t0) = completions.first() else {
        return 0;
    };
    let t0 = t0.clamp(window.first_event, window.last_event);
    let active = (window.last_event - t0).num_seconds();
    active - idle_seconds(&window.gaps, t0, window.last_event, idle)
}

/// Estimated idle threshold derived from within-burst response gaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct IdleThresholdEstimate {
    pub seconds: i64,
    /// True when fewer than 100 gaps were available and the 120 s default
    /// was used instead.
    pub fallback: bool,
    pub n_gaps: usize,
}

/// 99th percentile (nearest-rank) of within-burst inter-event gaps, rounded
/// up to whole minutes. Gaps above `split_gap` belong to burst boundaries and
/// are excluded. Falls back to 120 s when fewer than 100 gaps exist.
pub fn derive_idle_threshold(log: &EventLog, split_gap: Duration) -> IdleThresholdEstimate {
    let mut gaps: Vec<i64> = Vec::new();
    for (_, class_events) in log.class_groups() {
        for (_, events) in crate::model::student_groups(class_events) {
            for pair in events.windows(2) {
                let gap = (pair[1].timestamp - pair[0].timestamp).num_seconds();
                if gap <= split_gap.num_seconds() {
                    gaps.push(gap);
                }
            }
        }
    }
    let n_gaps = gaps.len();
    if n_gaps < 100 {
        return IdleThresholdEstimate {
            seconds: 120,
            fallback: true,
            n_gaps,
        };
    }
    gaps.sort_unstable();
    let rank = ((0.99 * n_gaps as f64).ceil() as usize).clamp(1, n_gaps);
    let p99 = gaps[rank - 1];
    // Ceiling to whole minutes, with a one-minute floor so a degenerate
    // all-zero distribution cannot yield a zero threshold.
    let seconds = (((p99 as f64) / 60.0).ceil() as i64 * 60).max(60);
    IdleThresholdEstimate {
        seconds,
        fallback: false,
        n_gaps,
    }
}

/// Per-student unweighted means of the proportional measures across that
/// student's classwork sessions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudentAggregate {
    pub student_id: StudentId,
    pub n_classwork_sessions: u32,
    pub mean_prop_coasted: f64,
    pub mean_prop_adjusted_coasted: f64,
    pub mean_prop_time_on_task: f64,
    pub mean_prop_extra_effort: f64,
}

/// Aggregates one student's records; `None` on empty input.
pub fn aggregate_student(records: &[&CoastingRecord]) -> Option<StudentAggregate> {
    let first = records.first()?;
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&CoastingRecord) -> f64| records.iter().map(|r| f(r)).sum::<f64>() / n;
    Some(StudentAggregate {
        student_id: first.student_id.clone(),
        n_classwork_sessions: records.len() as u32,
        mean_prop_coasted: mean(&CoastingRecord::prop_coasted),
        mean_prop_adjusted_coasted: mean(&CoastingRecord::prop_adjusted_coasted),
        mean_prop_time_on_task: mean(&CoastingRecord::prop_time_on_task),
        mean_prop_extra_effort: mean(&CoastingRecord::prop_extra_effort),
    })
}

/// Groups records by student and aggregates each, sorted by student id.
pub fn aggregate_all_students(records: &[CoastingRecord]) -> Vec<StudentAggregate> {
    let mut by_student: BTreeMap<&StudentId, Vec<&CoastingRecord>> = BTreeMap::new();
    for record in records {
        by_student.entry(&record.student_id).or_default().push(record);
    }
    by_student
        .values()
        .filter_map(|group| aggregate_student(group))
        .collect()
}

/// Whether corpus summaries weight each session equally or each student
/// equally. Both are reported, since aggregate composition differs when
/// students attend different numbers of sessions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    SessionEqual,
    StudentEqual,
}

/// Mean/SD/median of one measure in minutes, plus its share of available
/// time and (for the coasting components) of total coasted time. Shares are
/// ratios of means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeasureSummary {
    pub mean_mins: f64,
    pub sd_mins: f64,
    pub median_mins: f64,
    pub share_of_available: f64,
    pub share_of_coasted: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusDescriptives {
    pub weighting: Weighting,
    pub n_records: usize,
    pub n_students: usize,
    pub available: MeasureSummary,
    pub time_on_task: MeasureSummary,
    pub coasted: MeasureSummary,
    pub delayed_start: MeasureSummary,
    pub idle: MeasureSummary,
    pub early_stop: MeasureSummary,
    pub adjusted_coasted: MeasureSummary,
}

fn summarize(values: &[f64], available_mean: f64, coasted_mean: Option<f64>) -> MeasureSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    MeasureSummary {
        mean_mins: mean,
        sd_mins: sd,
        median_mins: median,
        share_of_available: mean / available_mean,
        share_of_coasted: coasted_mean.map(|c| mean / c),
    }
}

/// Corpus-level summary of the decomposition, in minutes.
///
/// With `StudentEqual` weighting each student's records are averaged first;
/// with `SessionEqual` every record counts once. Returns `None` on empty
/// input.
pub fn corpus_descriptives(
    records: &[CoastingRecord],
    weighting: Weighting,
) -> Option<CorpusDescriptives> {
    if records.is_empty() {
        return None;
    }
    let n_records = records.len();
    let mut by_student: BTreeMap<&StudentId, Vec<&CoastingRecord>> = BTreeMap::new();
    for record in records {
        by_student.entry(&record.student_id).or_default().push(record);
    }
    let n_students = by_student.len();

    // One row of minutes per unit of analysis.
    let rows: Vec<[f64; 7]> = match weighting {
        Weighting::SessionEqual => records.iter().map(minutes_row).collect(),
        Weighting::StudentEqual => by_student
            .values()
            .map(|group| {
                let mut acc = [0.0; 7];
                for record in group {
                    let row = minutes_row(record);
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc.map(|v| v / group.len() as f64)
            })
            .collect(),
    };

    let column = |idx: usize| rows.iter().map(|r| r[idx]).collect::<Vec<f64>>();
    let available = column(0);
    let coasted = column(2);
    let available_mean = available.iter().sum::<f64>() / available.len() as f64;
    let coasted_mean = coasted.iter().sum::<f64>() / coasted.len() as f64;

    Some(CorpusDescriptives {
        weighting,
        n_records,
        n_students,
        available: summarize(&available, available_mean, None),
        time_on_task: summarize(&column(1), available_mean, None),
        coasted: summarize(&coasted, available_mean, Some(coasted_mean)),
        delayed_start: summarize(&column(3), available_mean, Some(coasted_mean)),
        idle: summarize(&column(4), available_mean, Some(coasted_mean)),
        early_stop: summarize(&column(5), available_mean, Some(coasted_mean)),
        adjusted_coasted: summarize(&column(6), available_mean, None),
    })
}

fn minutes_row(record: &CoastingRecord) -> [f64; 7] {
    let m = |s: i64| s as f64 / 60.0;
    [
        m(record.session_length),
        m(record.time_on_task),
        m(record.coasted_time),
        m(record.delayed_start),
        m(record.idle_time),
        m(record.early_stop),
        m(record.adjusted_coasted_time),
    ]
}

/// Runs the full per-(student, session) measurement over every classwork
/// session in the inference, returning records sorted by
/// (class, session start, student).
pub fn measure_classwork_sessions(
    log: &EventLog,
    inference: &SessionInference,
    idle: &IdleConfig,
) -> Vec<CoastingRecord> {
    // Per (class, student): all event times and completion times, sorted.
    let mut times: BTreeMap<(&ClassId, &StudentId), Vec<DateTime<Utc>>> = BTreeMap::new();
    let mut completions: BTreeMap<(&ClassId, &StudentId), Vec<DateTime<Utc>>> = BTreeMap::new();
    for event in log.events() {
        let key = (&event.class_id, &event.student_id);
        times.entry(key).or_default().push(event.timestamp);
        if event.kind == EventKind::AssignmentComplete {
            completions.entry(key).or_default().push(event.timestamp);
        }
    }

    let in_range = |sorted: &[DateTime<Utc>], lo: DateTime<Utc>, hi: DateTime<Utc>| {
        let from = sorted.partition_point(|&t| t < lo);
        let to = sorted.partition_point(|&t| t <= hi);
        (from, to)
    };

    let mut records = Vec::new();
    for session in inference.of_type(SessionType::Classwork) {
        if session.length_seconds() <= 0 {
            continue;
        }
        let bounds = SessionBounds::from(session);
        let mut students: Vec<&StudentId> =
            session.bursts.iter().map(|b| &b.student_id).collect();
        students.sort();
        students.dedup();
        for student in students {
            let key = (&session.class_id, student);
            let Some(all) = times.get(&key) else { continue };
            let (from, to) = in_range(all, session.start, session.end);
            let Some(window) = student_window(student, &all[from..to]) else {
                continue; // absent after trimming
            };
            let empty = Vec::new();
            let comp_all = completions.get(&key).unwrap_or(&empty);
            let (cfrom, cto) = in_range(comp_all, session.start, session.end);
            let session_completions = &comp_all[cfrom..cto];

            let mut record = measure_session(&window, &bounds, idle);
            adjust_for_completion(&mut record, session_completions);
            record.extra_effort_time = extra_effort(&window, session_completions, idle);
            records.push(record);
        }
    }
    records.sort_by(|a, b| {
        (&a.class_id, a.session_start, &a.student_id).cmp(&(
            &b.class_id,
            b.session_start,
            &b.student_id,
        ))
    });
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    fn bounds(start: &str, end: &str) -> SessionBounds {
        SessionBounds {
            class_id: "c1".into(),
            start: ts(start),
            end: ts(end),
        }
    }

    fn window_at(times: &[DateTime<Utc>]) -> StudentWindow {
        student_window(&"s1".into(), times).unwrap()
    }

    fn minute_marks(start: DateTime<Utc>, end: DateTime<Utc>, step_secs: i64) -> Vec<DateTime<Utc>> {
        let mut out = Vec::new();
        let mut t = start;
        while t <= end {
            out.push(t);
            t += Duration::seconds(step_secs);
        }
        if *out.last().unwrap() != end {
            out.push(end);
        }
        out
    }

    #[test]
    fn absent_student_has_no_window() {
        assert!(student_window(&"s1".into(), &[]).is_none());
    }

    #[test]
    fn window_at_exact_session_bounds_spans_full_session() {
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T15:30:00Z");
        let w = window_at(&[s.start, s.end]);
        assert_eq!(w.first_event, s.start);
        assert_eq!(w.last_event, s.end);
    }

    #[test]
    fn worked_decomposition_example() {
        // Session 09:00-09:30 local (15:00-15:30 UTC), first event 09:05,
        // last 09:20, dense events in between.
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T15:30:00Z");
        let times = minute_marks(ts("2023-02-06T15:05:00Z"), ts("2023-02-06T15:20:00Z"), 60);
        let record = measure_session(&window_at(&times), &s, &IdleConfig::default());
        assert_eq!(record.delayed_start, 300);
        assert_eq!(record.early_stop, 600);
        assert_eq!(record.idle_time, 0);
        assert_eq!(record.time_on_task, 900);
        assert_eq!(record.coasted_time, 900);
        assert!(record.identity_holds());
    }

    #[test]
    fn wall_to_wall_activity_coasts_nothing() {
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T15:30:00Z");
        let times = minute_marks(s.start, s.end, 30);
        let record = measure_session(&window_at(&times), &s, &IdleConfig::default());
        assert_eq!(record.coasted_time, 0);
        assert_eq!(record.time_on_task, record.session_length);
    }

    #[test]
    fn gap_above_threshold_counts_as_idle_in_full() {
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T15:30:00Z");
        // Dense activity except one 300 s gap (60 -> 360).
        let mut times = vec![s.start, s.start + Duration::seconds(60)];
        times.extend(minute_marks(s.start + Duration::seconds(360), s.end, 60));
        let record = measure_session(&window_at(&times), &s, &IdleConfig::default());
        assert_eq!(record.idle_time, 300);
        assert!(record.identity_holds());

        let excess = IdleConfig {
            threshold: Duration::seconds(120),
            mode: IdleMode::ExcessOnly,
        };
        let record = measure_session(&window_at(&times), &s, &excess);
        assert_eq!(record.idle_time, 180);
        assert!(record.identity_holds());
    }

    #[test]
    fn gap_exactly_at_threshold_is_not_idle() {
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T15:30:00Z");
        let times = vec![s.start, s.start + Duration::seconds(120), s.end];
        // 120 s gap == threshold: not idle; the 1680 s tail gap is idle.
        let record = measure_session(&window_at(&times), &s, &IdleConfig::default());
        assert_eq!(record.idle_time, 1680);
    }

    #[test]
    fn merged_multi_burst_window_turns_silence_into_idle() {
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T16:00:00Z");
        // Two activity runs separated by 20 minutes of silence.
        let mut times = minute_marks(s.start, s.start + Duration::minutes(10), 60);
        times.extend(minute_marks(s.start + Duration::minutes(30), s.end, 60));
        let record = measure_session(&window_at(&times), &s, &IdleConfig::default());
        assert_eq!(record.idle_time, 1200);
        assert!(record.identity_holds());
    }

    #[test]
    fn completion_zeroes_early_stop_in_adjusted() {
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T15:30:00Z");
        let times = minute_marks(ts("2023-02-06T15:05:00Z"), ts("2023-02-06T15:20:00Z"), 60);
        let mut record = measure_session(&window_at(&times), &s, &IdleConfig::default());
        assert_eq!(record.early_stop, 600);
        adjust_for_completion(&mut record, &[ts("2023-02-06T15:18:00Z")]);
        assert!(record.completed_assignment);
        assert_eq!(record.adjusted_coasted_time, 300);
    }

    #[test]
    fn no_completion_leaves_adjusted_equal() {
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T15:30:00Z");
        let times = minute_marks(ts("2023-02-06T15:05:00Z"), ts("2023-02-06T15:20:00Z"), 60);
        let mut record = measure_session(&window_at(&times), &s, &IdleConfig::default());
        adjust_for_completion(&mut record, &[]);
        assert!(!record.completed_assignment);
        assert_eq!(record.adjusted_coasted_time, record.coasted_time);
    }

    #[test]
    fn extra_effort_zero_without_completion_or_at_last_event() {
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T15:30:00Z");
        let times = minute_marks(s.start, s.end, 60);
        let w = window_at(&times);
        let idle = IdleConfig::default();
        assert_eq!(extra_effort(&w, &[], &idle), 0);
        assert_eq!(extra_effort(&w, &[s.end], &idle), 0);
    }

    #[test]
    fn extra_effort_measures_post_completion_active_time() {
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T15:30:00Z");
        let times = minute_marks(s.start, s.end, 60);
        let w = window_at(&times);
        let t0 = s.start + Duration::minutes(20);
        assert_eq!(extra_effort(&w, &[t0], &IdleConfig::default()), 600);
    }

    #[test]
    fn derive_threshold_uses_default_on_scarce_data() {
        let log = EventLog::default();
        let est = derive_idle_threshold(&log, Duration::minutes(15));
        assert!(est.fallback);
        assert_eq!(est.seconds, 120);
    }

    #[test]
    fn constant_gaps_round_up_to_one_minute() {
        use crate::model::{EventKind, TransactionEvent};
        let t0 = ts("2023-02-06T15:00:00Z");
        let events: Vec<TransactionEvent> = (0..200)
            .map(|i| TransactionEvent {
                student_id: "s1".into(),
                class_id: "c1".into(),
                timestamp: t0 + Duration::seconds(10 * i),
                kind: EventKind::Response,
                assignment_id: "a1".into(),
                problem_id: None,
            })
            .collect();
        let log = EventLog::from_unsorted(events).0;
        let est = derive_idle_threshold(&log, Duration::minutes(15));
        assert!(!est.fallback);
        assert_eq!(est.seconds, 60);
    }

    #[test]
    fn single_session_aggregate_echoes_its_proportions() {
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T15:30:00Z");
        let times = minute_marks(s.start, s.start + Duration::minutes(15), 60);
        let record = measure_session(&window_at(&times), &s, &IdleConfig::default());
        assert!((record.prop_coasted() - 0.5).abs() < 1e-12);
        let agg = aggregate_student(&[&record]).unwrap();
        assert_eq!(agg.n_classwork_sessions, 1);
        assert!((agg.mean_prop_coasted - 0.5).abs() < 1e-12);
    }

    #[test]
    fn descriptive_shares_are_ratios_of_means() {
        let s = bounds("2023-02-06T15:00:00Z", "2023-02-06T15:30:00Z");
        let make = |first_min: i64, last_min: i64| {
            let times = minute_marks(
                s.start + Duration::minutes(first_min),
                s.start + Duration::minutes(last_min),
                60,
            );
            measure_session(&window_at(&times), &s, &IdleConfig::default())
        };
        let records = vec![make(0, 30), make(15, 30)];
        let d = corpus_descriptives(&records, Weighting::SessionEqual).unwrap();
        assert!((d.available.mean_mins - 30.0).abs() < 1e-9);
        assert!((d.time_on_task.mean_mins - 22.5).abs() < 1e-9);
        assert!((d.time_on_task.share_of_available - 0.75).abs() < 1e-9);
        assert!((d.delayed_start.share_of_coasted.unwrap() - 1.0).abs() < 1e-9);
        // Component shares of coasted time sum to one.
        let sum = d.delayed_start.share_of_coasted.unwrap()
            + d.idle.share_of_coasted.unwrap()
            + d.early_stop.share_of_coasted.unwrap();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}
