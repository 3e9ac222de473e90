//! File formats for every pipeline artifact: the canonical CSV schemas the
//! ingest layer reads back, audit exports, and markdown tables for the
//! session, coasting, reliability, and model summaries.
//!
//! Writers are deterministic: inputs arrive canonically sorted and all
//! formatting is fixed, so identical inputs produce identical bytes.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

use crate::coasting::{CoastingRecord, CorpusDescriptives, MeasureSummary, StudentAggregate};
use crate::gtheory::{GStudyResult, VarianceComponents};
use crate::lmm::{LmmFit, StudentRow};
use crate::model::{AssessmentRecord, ClassId, EventLog, StudentId, StudentProfile};
use crate::sessions::{ClassSession, SessionInference, SessionType};
use crate::simulate::GroundTruth;

pub type IoResult = std::io::Result<()>;

fn ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

pub fn write_events_csv<W: Write>(events: &EventLog, w: W) -> IoResult {
    let mut out = csv_writer(w);
    out.write_record([
        "student_id",
        "class_id",
        "timestamp",
        "event_kind",
        "assignment_id",
        "problem_id",
    ])?;
    for e in events.events() {
        out.write_record([
            e.student_id.as_str(),
            e.class_id.as_str(),
            &ts(e.timestamp),
            e.kind.as_str(),
            &e.assignment_id,
            e.problem_id.as_deref().unwrap_or(""),
        ])?;
    }
    out.flush()
}

pub fn write_roster_csv<W: Write>(roster: &[(StudentId, ClassId)], w: W) -> IoResult {
    let mut sorted: Vec<_> = roster.iter().collect();
    sorted.sort();
    let mut out = csv_writer(w);
    out.write_record(["student_id", "class_id"])?;
    for (student, class) in sorted {
        out.write_record([student.as_str(), class.as_str()])?;
    }
    out.flush()
}

pub fn write_profiles_csv<W: Write>(profiles: &[StudentProfile], w: W) -> IoResult {
    let mut sorted: Vec<_> = profiles.iter().collect();
    sorted.sort_by(|a, b| a.student_id.cmp(&b.student_id));
    let mut out = csv_writer(w);
    out.write_record([
        "student_id",
        "gender",
        "ethnicity",
        "frl",
        "iep",
        "ell",
        "locale",
    ])?;
    for p in sorted {
        out.write_record([
            p.student_id.as_str(),
            p.gender.as_str(),
            p.ethnicity.as_str(),
            p.frl.as_str(),
            p.iep.as_str(),
            p.ell.as_str(),
            p.locale.as_str(),
        ])?;
    }
    out.flush()
}

pub fn write_assessments_csv<W: Write>(records: &[AssessmentRecord], w: W) -> IoResult {
    let mut sorted: Vec<_> = records.iter().collect();
    sorted.sort_by(|a, b| a.student_id.cmp(&b.student_id));
    let mut out = csv_writer(w);
    out.write_record(["student_id", "map_fall", "map_spring"])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in sorted {
        out.write_record([
            r.student_id.as_str(),
            &fmt(r.map_fall),
            &fmt(r.map_spring),
        ])?;
    }
    out.flush()
}

pub fn write_truth_csv<W: Write>(truth: &GroundTruth, w: W) -> IoResult {
    let mut sorted: Vec<_> = truth.records.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.class_id, a.session_index, &a.student_id).cmp(&(
            &b.class_id,
            b.session_index,
            &b.student_id,
        ))
    });
    let mut out = csv_writer(w);
    out.write_record([
        "student_id",
        "class_id",
        "session_index",
        "scheduled_start",
        "scheduled_end",
        "absent",
        "delayed_start_s",
        "idle_s",
        "early_stop_s",
        "on_task_s",
        "completed",
        "extra_effort_s",
    ])?;
    for t in sorted {
        out.write_record([
            t.student_id.as_str(),
            t.class_id.as_str(),
            &t.session_index.to_string(),
            &ts(t.scheduled_start),
            &ts(t.scheduled_end),
            &t.absent.to_string(),
            &t.delayed_start.to_string(),
            &t.idle_time.to_string(),
            &t.early_stop.to_string(),
            &t.time_on_task.to_string(),
            &t.completed.to_string(),
            &t.extra_effort.to_string(),
        ])?;
    }
    out.flush()
}

/// Audit export of inferred sessions.
pub fn write_sessions_csv<W: Write>(sessions: &[ClassSession], w: W) -> IoResult {
    let mut out = csv_writer(w);
    out.write_record([
        "class_id",
        "start",
        "end",
        "type",
        "peak_concurrency",
        "n_students",
    ])?;
    for s in sessions {
        out.write_record([
            s.class_id.as_str(),
            &ts(s.start),
            &ts(s.end),
            s.session_type.as_str(),
            &s.peak_concurrency.to_string(),
            &s.n_students.to_string(),
        ])?;
    }
    out.flush()
}

/// One row per (student, class session) with seconds and proportions.
pub fn write_records_csv<W: Write>(records: &[CoastingRecord], w: W) -> IoResult {
    let mut out = csv_writer(w);
    out.write_record([
        "student_id",
        "class_id",
        "session_start",
        "session_end",
        "session_length_s",
        "delayed_start_s",
        "idle_s",
        "early_stop_s",
        "on_task_s",
        "coasted_s",
        "adjusted_coasted_s",
        "completed",
        "extra_effort_s",
        "prop_delayed",
        "prop_idle",
        "prop_early",
        "prop_on_task",
        "prop_coasted",
        "prop_adjusted",
        "prop_extra_effort",
    ])?;
    for r in records {
        out.write_record([
            r.student_id.as_str(),
            r.class_id.as_str(),
            &ts(r.session_start),
            &ts(r.session_end),
            &r.session_length.to_string(),
            &r.delayed_start.to_string(),
            &r.idle_time.to_string(),
            &r.early_stop.to_string(),
            &r.time_on_task.to_string(),
            &r.coasted_time.to_string(),
            &r.adjusted_coasted_time.to_string(),
            &r.completed_assignment.to_string(),
            &r.extra_effort_time.to_string(),
            &format!("{:.6}", r.prop_delayed()),
            &format!("{:.6}", r.prop_idle()),
            &format!("{:.6}", r.prop_early()),
            &format!("{:.6}", r.prop_time_on_task()),
            &format!("{:.6}", r.prop_coasted()),
            &format!("{:.6}", r.prop_adjusted_coasted()),
            &format!("{:.6}", r.prop_extra_effort()),
        ])?;
    }
    out.flush()
}

pub fn write_aggregates_csv<W: Write>(aggregates: &[StudentAggregate], w: W) -> IoResult {
    let mut out = csv_writer(w);
    out.write_record([
        "student_id",
        "n_classwork_sessions",
        "mean_prop_coasted",
        "mean_prop_adjusted_coasted",
        "mean_prop_time_on_task",
        "mean_prop_extra_effort",
    ])?;
    for a in aggregates {
        out.write_record([
            a.student_id.as_str(),
            &a.n_classwork_sessions.to_string(),
            &format!("{:.6}", a.mean_prop_coasted),
            &format!("{:.6}", a.mean_prop_adjusted_coasted),
            &format!("{:.6}", a.mean_prop_time_on_task),
            &format!("{:.6}", a.mean_prop_extra_effort),
        ])?;
    }
    out.flush()
}

/// Descriptives per inferred session type.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionTypeSummary {
    pub session_type: SessionType,
    pub n_student_sessions: u64,
    pub n_class_sessions: u64,
    pub avg_students: f64,
    pub sd_students: f64,
    pub avg_length_mins: f64,
    pub sd_length_mins: f64,
}

pub fn summarize_session_types(inference: &SessionInference) -> Vec<SessionTypeSummary> {
    [
        SessionType::IndependentWork,
        SessionType::Classwork,
        SessionType::Homework,
    ]
    .into_iter()
    .map(|session_type| {
        let sessions: Vec<&ClassSession> = inference.of_type(session_type).collect();
        let n = sessions.len() as f64;
        let students: Vec<f64> = sessions.iter().map(|s| s.n_students as f64).collect();
        let lengths: Vec<f64> = sessions
            .iter()
            .map(|s| s.length_seconds() as f64 / 60.0)
            .collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let sd = |v: &[f64]| {
            if v.len() < 2 {
                return 0.0;
            }
            let m = mean(v);
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
        };
        SessionTypeSummary {
            session_type,
            n_student_sessions: students.iter().sum::<f64>() as u64,
            n_class_sessions: n as u64,
            avg_students: mean(&students),
            sd_students: sd(&students),
            avg_length_mins: mean(&lengths),
            sd_length_mins: sd(&lengths),
        }
    })
    .collect()
}

pub fn session_table_markdown(summaries: &[SessionTypeSummary]) -> String {
    let mut s = String::new();
    s.push_str("| Session Type | Total Student-Sessions | Inferred Class-Sessions | Avg Students per Session | Avg Session Length (mins) |\n");
    s.push_str("|---|---|---|---|---|\n");
    for row in summaries {
        let label = match row.session_type {
            SessionType::IndependentWork => "Independent Work",
            SessionType::Classwork => "Classwork",
            SessionType::Homework => "Homework",
        };
        s.push_str(&format!(
            "| {} | {} | {} | {:.2} ({:.2}) | {:.2} ({:.2}) |\n",
            label,
            row.n_student_sessions,
            row.n_class_sessions,
            row.avg_students,
            row.sd_students,
            row.avg_length_mins,
            row.sd_length_mins
        ));
    }
    s
}

fn pct(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

pub fn coasting_table_markdown(d: &CorpusDescriptives) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "Weighting: {:?}; records: {}; students: {}\n\n",
        d.weighting, d.n_records, d.n_students
    ));
    s.push_str("| Measure (mins) | Mean | SD | Median | % Available | % Coasted |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    let row = |name: &str, m: &MeasureSummary| {
        format!(
            "| {} | {:.2} | {:.2} | {:.2} | {} | {} |\n",
            name,
            m.mean_mins,
            m.sd_mins,
            m.median_mins,
            pct(m.share_of_available),
            m.share_of_coasted.map(pct).unwrap_or_else(|| "—".into())
        )
    };
    s.push_str(&row("Available Time", &d.available));
    s.push_str(&row("Time on Task", &d.time_on_task));
    s.push_str(&row("Total Coasted Time", &d.coasted));
    s.push_str(&row("Delayed Start", &d.delayed_start));
    s.push_str(&row("Idle Time", &d.idle));
    s.push_str(&row("Early Stop", &d.early_stop));
    s.push_str(&row("Adjusted Coasted Time", &d.adjusted_coasted));
    s
}

/// One reliability-table row: a measure's variance components plus its
/// coefficients at the design's effective facet sizes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReliabilityRow {
    pub measure: String,
    pub components: VarianceComponents,
    pub result: GStudyResult,
}

pub fn write_reliability_csv<W: Write>(rows: &[ReliabilityRow], w: W) -> IoResult {
    let mut out = csv_writer(w);
    out.write_record([
        "measure",
        "sigma2_student",
        "sigma2_month",
        "sigma2_interaction",
        "sigma2_residual",
        "n_months_eff",
        "n_sessions_eff",
        "g",
        "phi",
        "band",
        "converged",
    ])?;
    for r in rows {
        out.write_record([
            r.measure.as_str(),
            &format!("{:.8}", r.components.student),
            &format!("{:.8}", r.components.month),
            &format!("{:.8}", r.components.interaction),
            &format!("{:.8}", r.components.residual),
            &format!("{:.4}", r.result.n_months_effective),
            &format!("{:.4}", r.result.n_sessions_effective),
            &format!("{:.4}", r.result.g),
            &format!("{:.4}", r.result.phi),
            r.result.interpretation.as_str(),
            &r.components.converged.to_string(),
        ])?;
    }
    out.flush()
}

pub fn reliability_table_markdown(rows: &[ReliabilityRow]) -> String {
    let mut s = String::new();
    s.push_str("| Measure | σ²(student) | σ²(month) | σ²(student:month) | σ²(residual) | G | φ | Band |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.2} | {:.2} | {} |\n",
            r.measure,
            r.components.student,
            r.components.month,
            r.components.interaction,
            r.components.residual,
            r.result.g,
            r.result.phi,
            r.result.interpretation.as_str()
        ));
    }
    s
}

/// Coefficient table in the two-column journal layout: one column per model.
pub fn model_table_markdown(fits: &[&LmmFit]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for fit in fits {
        for c in &fit.coefficients {
            if !names.contains(&c.name.as_str()) {
                names.push(&c.name);
            }
        }
    }
    let mut s = String::new();
    s.push_str("| Predictor |");
    for fit in fits {
        s.push_str(&format!(" {} |", fit.model_name));
    }
    s.push('\n');
    s.push_str("|---|");
    for _ in fits {
        s.push_str("---|");
    }
    s.push('\n');
    for name in &names {
        s.push_str(&format!("| {name} |"));
        for fit in fits {
            match fit.coefficients.iter().find(|c| &c.name == name) {
                Some(c) => s.push_str(&format!(" {:.3} {} |", c.estimate, c.stars)),
                None => s.push_str("  |"),
            }
        }
        s.push('\n');
    }
    s.push_str("| _Random effects_ |");
    for _ in fits {
        s.push_str("  |");
    }
    s.push('\n');
    let numeric_rows: Vec<(&str, Box<dyn Fn(&LmmFit) -> String>)> = vec![
        ("σ²", Box::new(|f: &LmmFit| format!("{:.3}", f.sigma2))),
        ("τ00", Box::new(|f: &LmmFit| format!("{:.3}", f.tau00))),
        ("ICC", Box::new(|f: &LmmFit| format!("{:.2}", f.icc))),
        ("N (classes)", Box::new(|f: &LmmFit| f.n_classes.to_string())),
        (
            "N (students)",
            Box::new(|f: &LmmFit| f.n_students.to_string()),
        ),
        (
            "Marginal R² / Conditional R²",
            Box::new(|f: &LmmFit| format!("{:.3} / {:.3}", f.r2_marginal, f.r2_conditional)),
        ),
        ("BIC", Box::new(|f: &LmmFit| format!("{:.1}", f.bic_ml))),
    ];
    for (label, value) in numeric_rows {
        s.push_str(&format!("| {label} |"));
        for fit in fits {
            s.push_str(&format!(" {} |", value(fit)));
        }
        s.push('\n');
    }
    s.push_str("\n*p < .05, **p < .01, ***p < .001 (Wald z).\n");
    s
}

/// One group-mean row of the comparison figure data: a demographic group's
/// mean coasting proportion with its normal-approximation 95% CI.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupMeanRow {
    /// `unadjusted` or `adjusted`.
    pub panel: &'static str,
    pub family: &'static str,
    pub group: &'static str,
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Group means of the coasting proportions by demographic family, both
/// panels. Missing-level students are excluded, so group Ns within a panel
/// sum to the family's non-missing N.
pub fn compute_group_means(rows: &[StudentRow]) -> Vec<GroupMeanRow> {
    use crate::lmm::FactorVar;
    let mut out = Vec::new();
    for (panel, value) in [
        ("unadjusted", &(|r: &StudentRow| r.coasted_prop) as &dyn Fn(&StudentRow) -> f64),
        ("adjusted", &|r: &StudentRow| r.adjusted_coasted_prop),
    ] {
        for factor in [
            FactorVar::Gender,
            FactorVar::Ethnicity,
            FactorVar::Frl,
            FactorVar::Iep,
            FactorVar::Ell,
            FactorVar::Locale,
        ] {
            let mut by_level: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
            for row in rows {
                if let Some(level) = factor.level_of(row) {
                    by_level.entry(level).or_default().push(value(row));
                }
            }
            for &level in factor.levels() {
                let Some(values) = by_level.get(level) else {
                    continue;
                };
                let n = values.len();
                let mean = values.iter().sum::<f64>() / n as f64;
                let sd = if n > 1 {
                    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0))
                        .sqrt()
                } else {
                    0.0
                };
                let se = if n > 0 { sd / (n as f64).sqrt() } else { 0.0 };
                out.push(GroupMeanRow {
                    panel,
                    family: factor.label(),
                    group: level,
                    n,
                    mean,
                    se,
                    ci_low: mean - 1.96 * se,
                    ci_high: mean + 1.96 * se,
                });
            }
        }
    }
    out
}

pub fn write_group_means_csv<W: Write>(rows: &[GroupMeanRow], w: W) -> IoResult {
    let mut out = csv_writer(w);
    out.write_record([
        "panel", "family", "group", "n", "mean", "se", "ci_low", "ci_high",
    ])?;
    for r in rows {
        out.write_record([
            r.panel,
            r.family,
            r.group,
            &r.n.to_string(),
            &format!("{:.6}", r.mean),
            &format!("{:.6}", r.se),
            &format!("{:.6}", r.ci_low),
            &format!("{:.6}", r.ci_high),
        ])?;
    }
    out.flush()
}
