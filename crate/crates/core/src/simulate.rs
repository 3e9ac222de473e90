//! Seeded generative model of classes, scheduled sessions, and student
//! practice behavior. Emits platform-style transaction logs plus exact ground
//! truth, serving as the end-to-end oracle for the pipeline.
//!
//! The generator works backwards from the measurement definitions so truth is
//! exact rather than emergent: each present (student, session) first draws its
//! delayed-start and early-stop fractions, then an optional explicit idle gap,
//! and only then fills the remaining active span with events at the student's
//! pace. Inter-event gaps stay below the idle threshold and the planted gap
//! stays above it, so the decomposition identity holds in integer seconds by
//! construction.
//!
//! Determinism: one master stream derives a sub-seed per class; classes
//! generate independently (in parallel) and outputs are canonically sorted
//! before export, so parallelism never changes bytes.

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coasting::CoastingRecord;
use crate::model::{
    AssessmentRecord, ClassId, Ethnicity, EventKind, EventLog, Gender, Locale, SchoolCalendar,
    StudentId, StudentProfile, TransactionEvent, TriState,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("degenerate config: {0}")]
    DegenerateConfig(String),
    #[error(transparent)]
    Calendar(#[from] crate::model::CalendarError),
}

/// Generator parameters. Defaults reproduce the corpus shape the pipeline is
/// calibrated against: ~27-minute classwork sessions where students practice
/// for about 40% of the available time, early stops dominate the lost time,
/// and idling is rare but unambiguous.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimConfig {
    pub n_classes: u32,
    pub students_per_class_mean: f64,
    pub students_per_class_sd: f64,
    pub sessions_per_class: u32,
    /// Local date of the first school week's Monday.
    pub start_date: (i32, u32, u32),
    pub timezone: String,

    pub session_length_mean_mins: f64,
    pub session_length_sd_mins: f64,
    /// Lengths are truncated to be strictly greater than this.
    pub session_length_min_mins: f64,

    pub absence_rate: f64,
    /// Per-session probability range of starting within 1% of the bell.
    pub prompt_start_rate: (f64, f64),
    /// Mean delayed-start fraction among non-prompt starts.
    pub delay_frac_mean: f64,
    pub completion_rate: f64,
    /// P(keep practicing past the first completion | completed), per student.
    pub extra_effort_rate_range: (f64, f64),
    /// Share of students who never show extra effort.
    pub never_extra_share: f64,
    /// Mean early-stop fraction for students who complete and then leave.
    pub early_frac_mean_completed: f64,
    /// Mean early-stop fraction for students who drift off unfinished.
    pub early_frac_mean_not_completed: f64,
    /// Per-session probability range of working to the end while unfinished.
    pub work_to_end_rate: (f64, f64),

    pub idle_rate: f64,
    /// Planted idle gap bounds in seconds; must exceed the 120 s threshold.
    pub idle_gap_secs: (i64, i64),
    /// Inter-event pace bounds in seconds; must stay under the threshold.
    pub pace_secs: (i64, i64),
    pub problems_per_assignment: (u32, u32),

    pub map_fall_mean: f64,
    pub map_fall_sd: f64,
    pub map_missing_rate: f64,
    /// Spring-score generation in z-units:
    /// `spring_z = b_fall fall_z + b_task on_task + b_extra extra + u + e`.
    pub beta_fall: f64,
    pub beta_on_task: f64,
    pub beta_extra_effort: f64,
    pub class_intercept_sd: f64,
    pub residual_sd: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_classes: 24,
            students_per_class_mean: 12.92,
            students_per_class_sd: 5.79,
            sessions_per_class: 15,
            start_date: (2023, 1, 9),
            timezone: SchoolCalendar::DEFAULT_TIMEZONE.to_string(),
            session_length_mean_mins: 26.9,
            session_length_sd_mins: 7.93,
            session_length_min_mins: 5.0,
            absence_rate: 0.08,
            prompt_start_rate: (0.15, 0.40),
            delay_frac_mean: 0.340,
            completion_rate: 0.70,
            extra_effort_rate_range: (0.20, 0.90),
            never_extra_share: 0.40,
            early_frac_mean_completed: 0.66,
            early_frac_mean_not_completed: 0.40,
            work_to_end_rate: (0.05, 0.15),
            idle_rate: 0.125,
            idle_gap_secs: (130, 270),
            pace_secs: (12, 40),
            problems_per_assignment: (6, 14),
            map_fall_mean: 220.0,
            map_fall_sd: 15.0,
            map_missing_rate: 0.03,
            beta_fall: 0.78,
            beta_on_task: -0.20,
            beta_extra_effort: 1.44,
            class_intercept_sd: 0.22,
            residual_sd: 0.47,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<SchoolCalendar, SimError> {
        let fail = |msg: &str| Err(SimError::DegenerateConfig(msg.to_string()));
        if self.n_classes == 0 || self.sessions_per_class == 0 {
            return fail("need at least one class and one session");
        }
        if self.session_length_mean_mins <= self.session_length_min_mins {
            return fail("mean session length must exceed the truncation floor");
        }
        if self.session_length_sd_mins <= 0.0 {
            return fail("session length SD must be positive");
        }
        if self.session_length_min_mins * 60.0 <= self.idle_gap_secs.1 as f64 {
            return fail("minimum session length must exceed the idle gap");
        }
        if self.idle_gap_secs.0 <= 120 {
            return fail("idle gaps must exceed the 120 s threshold");
        }
        if self.pace_secs.0 < 1 || self.pace_secs.1 >= 120 {
            return fail("pace must stay within (0, 120) seconds");
        }
        if self.pace_secs.0 > self.pace_secs.1 || self.idle_gap_secs.0 > self.idle_gap_secs.1 {
            return fail("interval bounds are inverted");
        }
        for (name, rate) in [
            ("absence_rate", self.absence_rate),
            ("completion_rate", self.completion_rate),
            ("idle_rate", self.idle_rate),
            ("map_missing_rate", self.map_missing_rate),
            ("never_extra_share", self.never_extra_share),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return fail(&format!("{name} outside [0,1]"));
            }
        }
        NaiveDate::from_ymd_opt(self.start_date.0, self.start_date.1, self.start_date.2)
            .ok_or_else(|| SimError::DegenerateConfig("invalid start date".to_string()))?;
        Ok(SchoolCalendar::new(&self.timezone)?)
    }
}

/// Exact per-(student, session) truth, against scheduled session bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruthRecord {
    pub student_id: StudentId,
    pub class_id: ClassId,
    pub session_index: u32,
    pub scheduled_start: DateTime<Utc>,
    pub scheduled_end: DateTime<Utc>,
    pub absent: bool,
    pub delayed_start: i64,
    pub idle_time: i64,
    pub early_stop: i64,
    pub time_on_task: i64,
    pub completed: bool,
    pub extra_effort: i64,
}

impl TruthRecord {
    pub fn scheduled_length(&self) -> i64 {
        (self.scheduled_end - self.scheduled_start).num_seconds()
    }

    pub fn identity_holds(&self) -> bool {
        self.absent
            || self.delayed_start + self.idle_time + self.early_stop + self.time_on_task
                == self.scheduled_length()
    }
}

/// Per-student latent traits, exported with the truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudentTraits {
    pub student_id: StudentId,
    pub delay_propensity: f64,
    pub early_stop_propensity: f64,
    pub prompt_start_rate: f64,
    pub completion_rate: f64,
    pub extra_effort_rate: f64,
    pub idle_rate: f64,
    pub pace_mean_secs: f64,
    pub problems_per_assignment: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GroundTruth {
    pub records: Vec<TruthRecord>,
    pub traits: Vec<StudentTraits>,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub events: EventLog,
    pub roster: Vec<(StudentId, ClassId)>,
    pub profiles: Vec<StudentProfile>,
    pub assessments: Vec<AssessmentRecord>,
    pub truth: GroundTruth,
}

/// Truncated-normal session length in whole seconds (> floor), by rejection.
pub fn sample_session_length(rng: &mut ChaCha8Rng, config: &SimConfig) -> i64 {
    let dist = Normal::new(
        config.session_length_mean_mins,
        config.session_length_sd_mins,
    )
    .expect("validated");
    loop {
        let mins = dist.sample(rng);
        if mins > config.session_length_min_mins {
            return (mins * 60.0).round() as i64;
        }
    }
}

fn beta_mean(rng: &mut ChaCha8Rng, mean: f64, concentration: f64) -> f64 {
    let mean = mean.clamp(0.02, 0.95);
    let a = mean * concentration;
    let b = (1.0 - mean) * concentration;
    Beta::new(a, b).expect("positive shape").sample(rng)
}

fn categorical<T: Copy>(rng: &mut ChaCha8Rng, table: &[(T, f64)]) -> T {
    let total: f64 = table.iter().map(|(_, w)| w).sum();
    let mut draw = rng.gen::<f64>() * total;
    for &(value, weight) in table {
        if draw < weight {
            return value;
        }
        draw -= weight;
    }
    table.last().expect("non-empty table").0
}

struct ScheduledSession {
    index: u32,
    start: DateTime<Utc>,
    length_secs: i64,
}

struct ClassPlan {
    class_id: ClassId,
    locale: Locale,
    sessions: Vec<ScheduledSession>,
    students: Vec<StudentState>,
}

struct StudentState {
    id: StudentId,
    traits: StudentTraits,
    profile: StudentProfile,
    map_fall: Option<f64>,
    spring_missing: bool,
    // Accumulated truth for the achievement link.
    on_task_secs: i64,
    extra_secs: i64,
    scheduled_secs: i64,
}

/// One fully generated class: events plus per-class slices of every output.
struct ClassOutput {
    class_id: ClassId,
    events: Vec<TransactionEvent>,
    roster: Vec<(StudentId, ClassId)>,
    profiles: Vec<StudentProfile>,
    assessments: Vec<AssessmentRecord>,
    truth_records: Vec<TruthRecord>,
    traits: Vec<StudentTraits>,
}

/// Deterministic generation of the full corpus: events, roster, profiles,
/// assessments, and exact ground truth.
pub fn generate(config: &SimConfig, seed: u64) -> Result<SimOutput, SimError> {
    let calendar = config.validate()?;

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let class_seeds: Vec<u64> = (0..config.n_classes).map(|_| master.gen()).collect();

    let mut class_outputs: Vec<ClassOutput> = class_seeds
        .par_iter()
        .enumerate()
        .map(|(class_idx, &class_seed)| {
            generate_class(config, &calendar, class_idx as u32, class_seed)
        })
        .collect();
    class_outputs.sort_by(|a, b| a.class_id.cmp(&b.class_id));

    let mut events = Vec::new();
    let mut roster = Vec::new();
    let mut profiles = Vec::new();
    let mut assessments = Vec::new();
    let mut truth = GroundTruth::default();
    for output in class_outputs {
        events.extend(output.events);
        roster.extend(output.roster);
        profiles.extend(output.profiles);
        assessments.extend(output.assessments);
        truth.records.extend(output.truth_records);
        truth.traits.extend(output.traits);
    }
    let (events, duplicates) = EventLog::from_unsorted(events);
    debug_assert_eq!(duplicates, 0, "generator must not emit duplicate events");

    Ok(SimOutput {
        events,
        roster,
        profiles,
        assessments,
        truth,
    })
}

fn generate_class(
    config: &SimConfig,
    calendar: &SchoolCalendar,
    class_idx: u32,
    class_seed: u64,
) -> ClassOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(class_seed);
    let plan = plan_class(config, calendar, class_idx, &mut rng);
    run_class(config, plan, &mut rng)
}

fn plan_class(
    config: &SimConfig,
    calendar: &SchoolCalendar,
    class_idx: u32,
    rng: &mut ChaCha8Rng,
) -> ClassPlan {
    let class_id: ClassId = format!("c{class_idx:04}").as_str().into();

    let size_dist = Normal::new(config.students_per_class_mean, config.students_per_class_sd)
        .expect("validated");
    let n_students = (size_dist.sample(rng).round() as i64).clamp(2, 40) as u32;
    let locale = categorical(rng, &[(Locale::Urban, 0.35), (Locale::Rural, 0.65)]);

    // Weekly cadence cycling Mon/Wed/Fri, staggered morning start times.
    let monday = NaiveDate::from_ymd_opt(
        config.start_date.0,
        config.start_date.1,
        config.start_date.2,
    )
    .expect("validated");
    let hour = 8 + (class_idx % 6) as i64;
    let mut sessions = Vec::new();
    for k in 0..config.sessions_per_class {
        let day = monday + chrono::Days::new(7 * (k as u64) + [0, 2, 4][(k % 3) as usize]);
        let minute = rng.gen_range(0..20) as u32;
        let naive = day.and_time(NaiveTime::from_hms_opt(hour as u32, minute, 0).unwrap());
        let (start, _) = calendar
            .resolve_local(naive)
            .expect("morning school times never fall in a DST gap");
        sessions.push(ScheduledSession {
            index: k,
            start,
            length_secs: sample_session_length(rng, config),
        });
    }

    let students = (0..n_students)
        .map(|i| {
            let id: StudentId = format!("c{class_idx:04}s{i:03}").as_str().into();
            let traits = StudentTraits {
                student_id: id.clone(),
                delay_propensity: beta_mean(rng, config.delay_frac_mean, 8.0),
                early_stop_propensity: beta_mean(rng, config.early_frac_mean_completed, 8.0),
                prompt_start_rate: rng
                    .gen_range(config.prompt_start_rate.0..=config.prompt_start_rate.1),
                completion_rate: (config.completion_rate + rng.gen_range(-0.10..=0.10))
                    .clamp(0.05, 0.98),
                extra_effort_rate: if rng.gen_bool(config.never_extra_share) {
                    0.0
                } else {
                    rng.gen_range(
                        config.extra_effort_rate_range.0..=config.extra_effort_rate_range.1,
                    )
                },
                idle_rate: (config.idle_rate + rng.gen_range(-0.05..=0.05)).clamp(0.0, 1.0),
                pace_mean_secs: rng
                    .gen_range(config.pace_secs.0 as f64..=config.pace_secs.1 as f64),
                problems_per_assignment: rng
                    .gen_range(config.problems_per_assignment.0..=config.problems_per_assignment.1),
            };
            let profile = StudentProfile {
                student_id: id.clone(),
                gender: categorical(
                    rng,
                    &[
                        (Gender::Male, 0.4549),
                        (Gender::Female, 0.4962),
                        (Gender::Missing, 0.0489),
                    ],
                ),
                ethnicity: categorical(
                    rng,
                    &[
                        (Ethnicity::White, 0.5863),
                        (Ethnicity::Hispanic, 0.2201),
                        (Ethnicity::AfricanAmerican, 0.0850),
                        (Ethnicity::Other, 0.0657),
                        (Ethnicity::Missing, 0.0433),
                    ],
                ),
                frl: categorical(
                    rng,
                    &[
                        (TriState::Yes, 0.3019),
                        (TriState::No, 0.4110),
                        (TriState::Missing, 0.2872),
                    ],
                ),
                iep: categorical(
                    rng,
                    &[
                        (TriState::Yes, 0.0943),
                        (TriState::No, 0.7268),
                        (TriState::Missing, 0.1789),
                    ],
                ),
                ell: categorical(
                    rng,
                    &[
                        (TriState::Yes, 0.0839),
                        (TriState::No, 0.6695),
                        (TriState::Missing, 0.2467),
                    ],
                ),
                locale,
            };
            let map_fall = if rng.gen_bool(config.map_missing_rate) {
                None
            } else {
                Some(
                    Normal::new(config.map_fall_mean, config.map_fall_sd)
                        .unwrap()
                        .sample(rng),
                )
            };
            StudentState {
                id,
                traits,
                profile,
                map_fall,
                spring_missing: rng.gen_bool(config.map_missing_rate),
                on_task_secs: 0,
                extra_secs: 0,
                scheduled_secs: 0,
            }
        })
        .collect();

    ClassPlan {
        class_id,
        locale,
        sessions,
        students,
    }
}

fn run_class(config: &SimConfig, mut plan: ClassPlan, rng: &mut ChaCha8Rng) -> ClassOutput {
    let _ = plan.locale;
    let mut events = Vec::new();
    let mut truth_records = Vec::new();

    for si in 0..plan.sessions.len() {
        let session = &plan.sessions[si];
        let scheduled_start = session.start;
        let scheduled_end = session.start + Duration::seconds(session.length_secs);
        for student in &mut plan.students {
            student.scheduled_secs += session.length_secs;
            if rng.gen_bool(config.absence_rate) {
                truth_records.push(TruthRecord {
                    student_id: student.id.clone(),
                    class_id: plan.class_id.clone(),
                    session_index: session.index,
                    scheduled_start,
                    scheduled_end,
                    absent: true,
                    delayed_start: 0,
                    idle_time: 0,
                    early_stop: 0,
                    time_on_task: 0,
                    completed: false,
                    extra_effort: 0,
                });
                continue;
            }
            let (student_events, truth) = simulate_student_session(
                config,
                rng,
                student,
                &plan.class_id,
                session,
                scheduled_start,
                scheduled_end,
            );
            student.on_task_secs += truth.time_on_task;
            student.extra_secs += truth.extra_effort;
            events.extend(student_events);
            truth_records.push(truth);
        }
    }

    // Achievement link: spring score from prior score and the planted
    // extra-effort signal, in z-units against the fall scale.
    let class_intercept =
        Normal::new(0.0, config.class_intercept_sd).unwrap().sample(rng);
    let assessments = plan
        .students
        .iter()
        .map(|student| {
            let spring = student.map_fall.and_then(|fall| {
                if student.spring_missing {
                    return None;
                }
                let fall_z = (fall - config.map_fall_mean) / config.map_fall_sd;
                let on_task_prop = student.on_task_secs as f64 / student.scheduled_secs.max(1) as f64;
                let extra_prop = student.extra_secs as f64 / student.scheduled_secs.max(1) as f64;
                let noise = Normal::new(0.0, config.residual_sd).unwrap().sample(rng);
                let spring_z = config.beta_fall * fall_z
                    + config.beta_on_task * on_task_prop
                    + config.beta_extra_effort * extra_prop
                    + class_intercept
                    + noise;
                Some(config.map_fall_mean + config.map_fall_sd * spring_z)
            });
            AssessmentRecord {
                student_id: student.id.clone(),
                map_fall: student.map_fall,
                map_spring: spring,
            }
        })
        .collect();

    ClassOutput {
        class_id: plan.class_id.clone(),
        events,
        roster: plan
            .students
            .iter()
            .map(|s| (s.id.clone(), plan.class_id.clone()))
            .collect(),
        profiles: plan.students.iter().map(|s| s.profile.clone()).collect(),
        assessments,
        truth_records,
        traits: plan.students.iter().map(|s| s.traits.clone()).collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate_student_session(
    config: &SimConfig,
    rng: &mut ChaCha8Rng,
    student: &StudentState,
    class_id: &ClassId,
    session: &ScheduledSession,
    scheduled_start: DateTime<Utc>,
    scheduled_end: DateTime<Utc>,
) -> (Vec<TransactionEvent>, TruthRecord) {
    let length = session.length_secs;
    let traits = &student.traits;

    // Boundary fractions. Prompt starters sit down exactly at the bell and
    // end-workers stay to the bell, which pins the session envelope.
    let mut delay_frac = if rng.gen_bool(traits.prompt_start_rate) {
        0.0
    } else {
        beta_mean(rng, traits.delay_propensity, 6.0)
    };
    let completed = rng.gen_bool(traits.completion_rate);
    let extra = completed && traits.extra_effort_rate > 0.0 && rng.gen_bool(traits.extra_effort_rate);
    let mut early_frac = if extra {
        0.0
    } else if completed {
        beta_mean(rng, traits.early_stop_propensity, 4.0)
    } else {
        let w2e = rng.gen_range(config.work_to_end_rate.0..=config.work_to_end_rate.1);
        if rng.gen_bool(w2e) {
            0.0
        } else {
            beta_mean(rng, config.early_frac_mean_not_completed, 4.0)
        }
    };
    let sum = delay_frac + early_frac;
    if sum > 0.93 {
        delay_frac *= 0.93 / sum;
        early_frac *= 0.93 / sum;
    }
    let delayed = (delay_frac * length as f64).round() as i64;
    let early = (early_frac * length as f64).round() as i64;
    let active = length - delayed - early;
    debug_assert!(active >= 1);

    // Optional planted idle gap, exact by construction.
    let mut idle_gap = 0i64;
    let mut pre_active = 0i64;
    if rng.gen_bool(traits.idle_rate) {
        let gap = rng.gen_range(config.idle_gap_secs.0..=config.idle_gap_secs.1);
        if gap + 2 <= active {
            idle_gap = gap;
            let free = active - gap;
            pre_active = ((rng.gen_range(0.25..0.75) * free as f64).round() as i64).clamp(1, free - 1);
        }
    }

    // Event timestamps walking the active span at the student's pace.
    let window_start = scheduled_start + Duration::seconds(delayed);
    let window_end = scheduled_start + Duration::seconds(length - early);
    let pace_lo = config.pace_secs.0.min(traits.pace_mean_secs as i64 - 5).max(1);
    let pace_hi = (traits.pace_mean_secs as i64 + 10).min(119);
    let pace = Uniform::new_inclusive(pace_lo.min(pace_hi), pace_hi);
    let mut times: Vec<DateTime<Utc>> = Vec::new();
    let walk = |from: DateTime<Utc>, to: DateTime<Utc>, times: &mut Vec<DateTime<Utc>>, rng: &mut ChaCha8Rng| {
        let mut t = from;
        times.push(t);
        while t < to {
            t = (t + Duration::seconds(pace.sample(rng))).min(to);
            times.push(t);
        }
    };
    if idle_gap > 0 {
        let gap_start = window_start + Duration::seconds(pre_active);
        walk(window_start, gap_start, &mut times, rng);
        walk(
            gap_start + Duration::seconds(idle_gap),
            window_end,
            &mut times,
            rng,
        );
    } else if active == 0 {
        times.push(window_start);
    } else {
        walk(window_start, window_end, &mut times, rng);
    }

    // Completion placement: quitters finish at their last event; extra-effort
    // students finish mid-window and keep going on a second assignment.
    let n = times.len();
    let completion_idx = if !completed {
        None
    } else if extra && n >= 4 {
        let u = rng.gen_range(0.4..0.8);
        Some(((u * (n - 1) as f64).round() as usize).clamp(1, n - 2))
    } else {
        Some(n - 1)
    };

    // Exact truth from the constructed timeline.
    let time_on_task = active - idle_gap;
    let extra_effort = match completion_idx {
        Some(idx) => {
            let t_complete = times[idx];
            let after = (window_end - t_complete).num_seconds();
            let idle_after = if idle_gap > 0
                && window_start + Duration::seconds(pre_active) >= t_complete
            {
                idle_gap
            } else {
                0
            };
            after - idle_after
        }
        None => 0,
    };

    let truth = TruthRecord {
        student_id: student.id.clone(),
        class_id: class_id.clone(),
        session_index: session.index,
        scheduled_start,
        scheduled_end,
        absent: false,
        delayed_start: delayed,
        idle_time: idle_gap,
        early_stop: early,
        time_on_task,
        completed,
        extra_effort,
    };
    debug_assert!(truth.identity_holds());

    // Event kinds along the timeline.
    let assignment = |seq: u32| format!("a_{}_{:03}_{}", class_id, session.index, seq);
    let mut events = Vec::with_capacity(n);
    let mut problem_counter = 0u32;
    let mut current_assignment = 1u32;
    for (i, &t) in times.iter().enumerate() {
        let kind = if i == 0 {
            EventKind::AssignmentStart
        } else if completion_idx == Some(i) {
            EventKind::AssignmentComplete
        } else if completion_idx.map_or(false, |c| i == c + 1) {
            current_assignment = 2;
            EventKind::AssignmentStart
        } else if i % 7 == 3 {
            EventKind::HintRequest
        } else if i % 2 == 1 {
            problem_counter += 1;
            EventKind::ProblemStart
        } else {
            EventKind::Response
        };
        let problem_id = match kind {
            EventKind::ProblemStart | EventKind::Response | EventKind::HintRequest => {
                Some(format!("p{problem_counter:04}"))
            }
            _ => None,
        };
        events.push(TransactionEvent {
            student_id: student.id.clone(),
            class_id: class_id.clone(),
            timestamp: t,
            kind,
            assignment_id: assignment(current_assignment),
            problem_id,
        });
    }
    (events, truth)
}

/// Per-component absolute-error quantiles from matching pipeline records to
/// ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DiscrepancyReport {
    pub n_truth_present: usize,
    pub n_matched: usize,
    /// Present truth records with no matching classwork record (e.g. the
    /// session was classified as independent work, or split).
    pub n_unmatched_truth: usize,
    pub n_extra_pipeline: usize,
    pub completion_flag_mismatches: usize,
    pub delayed_start: ErrorQuantiles,
    pub idle_time: ErrorQuantiles,
    pub early_stop: ErrorQuantiles,
    pub time_on_task: ErrorQuantiles,
    pub extra_effort: ErrorQuantiles,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ErrorQuantiles {
    pub p50: i64,
    pub p90: i64,
    pub p95: i64,
    pub max: i64,
}

fn quantiles(mut errors: Vec<i64>) -> ErrorQuantiles {
    if errors.is_empty() {
        return ErrorQuantiles::default();
    }
    errors.sort_unstable();
    let at = |q: f64| {
        let rank = ((q * errors.len() as f64).ceil() as usize).clamp(1, errors.len());
        errors[rank - 1]
    };
    ErrorQuantiles {
        p50: at(0.50),
        p90: at(0.90),
        p95: at(0.95),
        max: *errors.last().unwrap(),
    }
}

/// Joins pipeline classwork records to truth by (student, class) and session
/// overlap, then reports absolute errors for every decomposition component.
pub fn truth_check(records: &[CoastingRecord], truth: &GroundTruth) -> DiscrepancyReport {
    use std::collections::BTreeMap;
    let mut by_key: BTreeMap<(&StudentId, &ClassId), Vec<&CoastingRecord>> = BTreeMap::new();
    for record in records {
        by_key
            .entry((&record.student_id, &record.class_id))
            .or_default()
            .push(record);
    }

    let mut report = DiscrepancyReport::default();
    let mut errs: [Vec<i64>; 5] = Default::default();
    let mut matched_records = 0usize;
    for t in &truth.records {
        if t.absent {
            continue;
        }
        report.n_truth_present += 1;
        let candidates = by_key.get(&(&t.student_id, &t.class_id));
        let matched = candidates.and_then(|list| {
            list.iter().find(|r| {
                r.session_start < t.scheduled_end && t.scheduled_start < r.session_end
            })
        });
        let Some(r) = matched else {
            report.n_unmatched_truth += 1;
            continue;
        };
        report.n_matched += 1;
        matched_records += 1;
        errs[0].push((r.delayed_start - t.delayed_start).abs());
        errs[1].push((r.idle_time - t.idle_time).abs());
        errs[2].push((r.early_stop - t.early_stop).abs());
        errs[3].push((r.time_on_task - t.time_on_task).abs());
        errs[4].push((r.extra_effort_time - t.extra_effort).abs());
        if r.completed_assignment != t.completed {
            report.completion_flag_mismatches += 1;
        }
    }
    report.n_extra_pipeline = records.len().saturating_sub(matched_records);
    let [d, i, e, o, x] = errs;
    report.delayed_start = quantiles(d);
    report.idle_time = quantiles(i);
    report.early_stop = quantiles(e);
    report.time_on_task = quantiles(o);
    report.extra_effort = quantiles(x);
    report
}
