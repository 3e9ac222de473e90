//! Subcommand orchestration. Every subcommand loads what it needs, computes,
//! writes its artifacts through the tracked writer, and finishes with a
//! manifest; any error removes the partial outputs first.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};

use coasting_core::coasting::{
    aggregate_all_students, corpus_descriptives, derive_idle_threshold,
    measure_classwork_sessions, CoastingRecord, IdleConfig, Weighting,
};
use coasting_core::gtheory::{run_gstudy, MeasureSelector};
use coasting_core::ingest::{ingest_assessments, ingest_events, ingest_profiles, IngestReport};
use coasting_core::lmm::{
    achievement_specs, fit_model, join_student_rows, raftery_band, LmmFit, StudentRow,
};
use coasting_core::model::{AssessmentRecord, EventLog, StudentProfile};
use coasting_core::report as fmt;
use coasting_core::sessions::{infer_sessions, SessionInference};
use coasting_core::simulate::{generate, truth_check, GroundTruth, TruthRecord};

use crate::config::RunConfig;
use crate::manifest::{ArtifactWriter, Manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Ingest,
    Sessions,
    Coasting,
    Gstudy,
    Models,
    Simulate,
    Report,
    All,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Ingest => "ingest",
            Subcommand::Sessions => "sessions",
            Subcommand::Coasting => "coasting",
            Subcommand::Gstudy => "gstudy",
            Subcommand::Models => "models",
            Subcommand::Simulate => "simulate",
            Subcommand::Report => "report",
            Subcommand::All => "all",
        }
    }
}

/// Inputs loaded once and shared by the analysis stages.
struct Loaded {
    events: EventLog,
    profiles: Vec<StudentProfile>,
    assessments: Vec<AssessmentRecord>,
    reports: BTreeMap<String, IngestReport>,
}

fn load_inputs(config: &RunConfig, manifest: &mut Manifest, need_tables: bool) -> Result<Loaded> {
    manifest.record_input("events", &config.events_path)?;
    let (events, events_report) = ingest_events(
        &config.events_path,
        &config.schema.events,
        &config.calendar,
    )?;
    let mut reports = BTreeMap::new();
    reports.insert("events".to_string(), events_report);

    let mut profiles = Vec::new();
    let mut assessments = Vec::new();
    if need_tables {
        manifest.record_input("profiles", &config.profiles_path)?;
        let (p, report) = ingest_profiles(&config.profiles_path, &config.schema.profiles)?;
        reports.insert("profiles".to_string(), report);
        profiles = p;

        manifest.record_input("assessments", &config.assessments_path)?;
        let (a, report) =
            ingest_assessments(&config.assessments_path, &config.schema.assessments)?;
        reports.insert("assessments".to_string(), report);
        assessments = a;
    }
    Ok(Loaded {
        events,
        profiles,
        assessments,
        reports,
    })
}

fn effective_idle(config: &RunConfig, events: &EventLog) -> IdleConfig {
    if !config.derive_idle_threshold {
        return config.idle;
    }
    let estimate = derive_idle_threshold(events, config.session.split_gap);
    IdleConfig {
        threshold: chrono::Duration::seconds(estimate.seconds),
        mode: config.idle.mode,
    }
}

/// Everything the analysis stages derive from the inputs.
struct Analysis {
    inference: SessionInference,
    records: Vec<CoastingRecord>,
    rows: Vec<StudentRow>,
    #[allow(dead_code)]
    idle: IdleConfig,
}

fn analyze(config: &RunConfig, loaded: &Loaded, manifest: &mut Manifest) -> Analysis {
    let inference = infer_sessions(&loaded.events, &config.calendar, &config.session);
    let idle = effective_idle(config, &loaded.events);
    manifest.effective.insert(
        "idle_threshold_secs".to_string(),
        idle.threshold.num_seconds().to_string(),
    );
    let records = measure_classwork_sessions(&loaded.events, &inference, &idle);
    let rows = join_student_rows(&records, &loaded.profiles, &loaded.assessments);
    Analysis {
        inference,
        records,
        rows,
        idle,
    }
}

fn render_csv(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut buffer = Vec::new();
    f(&mut buffer)?;
    Ok(buffer)
}

fn write_ingest_artifacts(
    loaded: &Loaded,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<()> {
    let json = serde_json::to_string_pretty(&loaded.reports)?;
    writer.write(manifest, "ingest_report.json", json.as_bytes())
}

fn write_session_artifacts(
    analysis: &Analysis,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<()> {
    let csv = render_csv(|w| fmt::write_sessions_csv(&analysis.inference.sessions, w))?;
    writer.write(manifest, "sessions.csv", &csv)?;
    let summaries = fmt::summarize_session_types(&analysis.inference);
    let table = fmt::session_table_markdown(&summaries);
    writer.write(manifest, "session_types.md", table.as_bytes())?;
    let json = serde_json::to_string_pretty(&summaries)?;
    writer.write(manifest, "session_types.json", json.as_bytes())
}

fn write_coasting_artifacts(
    analysis: &Analysis,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<()> {
    let csv = render_csv(|w| fmt::write_records_csv(&analysis.records, w))?;
    writer.write(manifest, "records.csv", &csv)?;
    let aggregates = aggregate_all_students(&analysis.records);
    let csv = render_csv(|w| fmt::write_aggregates_csv(&aggregates, w))?;
    writer.write(manifest, "aggregates.csv", &csv)?;
    for (weighting, name) in [
        (Weighting::SessionEqual, "coasting_session_weighted.md"),
        (Weighting::StudentEqual, "coasting_student_weighted.md"),
    ] {
        if let Some(descriptives) = corpus_descriptives(&analysis.records, weighting) {
            let table = fmt::coasting_table_markdown(&descriptives);
            writer.write(manifest, name, table.as_bytes())?;
        }
    }
    Ok(())
}

const GSTUDY_MEASURES: [MeasureSelector; 3] = [
    MeasureSelector::DelayedStartMins,
    MeasureSelector::IdleMins,
    MeasureSelector::EarlyStopMins,
];

fn write_gstudy_artifacts(
    config: &RunConfig,
    analysis: &Analysis,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<()> {
    if analysis.records.is_empty() {
        bail!("no classwork records; cannot run the reliability study");
    }
    let mut rows = Vec::new();
    for measure in GSTUDY_MEASURES {
        let (components, result) =
            run_gstudy(&analysis.records, measure, &config.calendar)
                .with_context(|| format!("G-study for {}", measure.label()))?;
        rows.push(fmt::ReliabilityRow {
            measure: measure.label().to_string(),
            components,
            result,
        });
    }
    let csv = render_csv(|w| fmt::write_reliability_csv(&rows, w))?;
    writer.write(manifest, "reliability.csv", &csv)?;
    let table = fmt::reliability_table_markdown(&rows);
    writer.write(manifest, "reliability.md", table.as_bytes())
}

#[derive(serde::Serialize)]
struct ModelsArtifact {
    fits: Vec<LmmFit>,
    achievement_comparison: Option<AchievementComparison>,
}

#[derive(serde::Serialize)]
struct AchievementComparison {
    base_model: String,
    extra_model: String,
    bic_base: f64,
    bic_extra: f64,
    delta_bic: f64,
    evidence: String,
}

fn fit_models(config: &RunConfig, rows: &[StudentRow]) -> Result<ModelsArtifact> {
    let mut fits = Vec::new();
    for family in &config.models.families {
        for adjusted in [false, true] {
            let mut spec = family.spec(adjusted);
            if !config.standardize_fall_map {
                for term in &mut spec.terms {
                    if let coasting_core::lmm::FixedTerm::Continuous { standardize, .. } = term {
                        *standardize = false;
                    }
                }
            }
            let fit = fit_model(&spec, rows)
                .with_context(|| format!("fitting model {}", spec.name))?;
            fits.push(fit);
        }
    }
    let achievement_comparison = if config.models.achievement {
        let (base_spec, extra_spec) = achievement_specs();
        let base = fit_model(&base_spec, rows).context("fitting the base achievement model")?;
        let extra =
            fit_model(&extra_spec, rows).context("fitting the extra-effort achievement model")?;
        let delta = base.bic_ml - extra.bic_ml;
        let comparison = AchievementComparison {
            base_model: base.model_name.clone(),
            extra_model: extra.model_name.clone(),
            bic_base: base.bic_ml,
            bic_extra: extra.bic_ml,
            delta_bic: delta,
            evidence: raftery_band(delta).as_str().to_string(),
        };
        fits.push(base);
        fits.push(extra);
        Some(comparison)
    } else {
        None
    };
    Ok(ModelsArtifact {
        fits,
        achievement_comparison,
    })
}

fn write_model_artifacts(
    config: &RunConfig,
    analysis: &Analysis,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<()> {
    let artifact = fit_models(config, &analysis.rows)?;
    let json = serde_json::to_string_pretty(&artifact)?;
    writer.write(manifest, "models.json", json.as_bytes())?;

    let mut markdown = String::new();
    let fit_refs: Vec<&LmmFit> = artifact.fits.iter().collect();
    for chunk in fit_refs.chunks(2) {
        markdown.push_str(&fmt::model_table_markdown(chunk));
        markdown.push('\n');
    }
    if let Some(cmp) = &artifact.achievement_comparison {
        markdown.push_str(&format!(
            "BIC {} = {:.1} vs {} = {:.1}; ΔBIC = {:.1} ({} evidence for the smaller BIC).\n",
            cmp.base_model, cmp.bic_base, cmp.extra_model, cmp.bic_extra, cmp.delta_bic, cmp.evidence
        ));
    }
    writer.write(manifest, "models.md", markdown.as_bytes())
}

fn read_truth_csv(path: &std::path::Path) -> Result<GroundTruth> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for row in reader.deserialize::<TruthRow>() {
        let row = row?;
        records.push(TruthRecord {
            student_id: row.student_id.as_str().into(),
            class_id: row.class_id.as_str().into(),
            session_index: row.session_index,
            scheduled_start: chrono::DateTime::parse_from_rfc3339(&row.scheduled_start)?
                .with_timezone(&chrono::Utc),
            scheduled_end: chrono::DateTime::parse_from_rfc3339(&row.scheduled_end)?
                .with_timezone(&chrono::Utc),
            absent: row.absent,
            delayed_start: row.delayed_start_s,
            idle_time: row.idle_s,
            early_stop: row.early_stop_s,
            time_on_task: row.on_task_s,
            completed: row.completed,
            extra_effort: row.extra_effort_s,
        });
    }
    Ok(GroundTruth {
        records,
        traits: Vec::new(),
    })
}

#[derive(serde::Deserialize)]
struct TruthRow {
    student_id: String,
    class_id: String,
    session_index: u32,
    scheduled_start: String,
    scheduled_end: String,
    absent: bool,
    delayed_start_s: i64,
    idle_s: i64,
    early_stop_s: i64,
    on_task_s: i64,
    completed: bool,
    extra_effort_s: i64,
}

fn write_report_artifacts(
    config: &RunConfig,
    analysis: &Analysis,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<()> {
    let group_means = fmt::compute_group_means(&analysis.rows);
    let csv = render_csv(|w| fmt::write_group_means_csv(&group_means, w))?;
    writer.write(manifest, "group_means.csv", &csv)?;

    if let Some(truth_path) = &config.ground_truth_path {
        manifest.record_input("ground_truth", truth_path)?;
        let truth = read_truth_csv(truth_path)?;
        let check = truth_check(&analysis.records, &truth);
        let json = serde_json::to_string_pretty(&check)?;
        writer.write(manifest, "truth_check.json", json.as_bytes())?;
    }
    Ok(())
}

fn write_simulate_artifacts(
    config: &RunConfig,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<()> {
    let output = generate(&config.sim, config.seed)?;
    let events = render_csv(|w| fmt::write_events_csv(&output.events, w))?;
    writer.write(manifest, "sim/events.csv", &events)?;
    let roster = render_csv(|w| fmt::write_roster_csv(&output.roster, w))?;
    writer.write(manifest, "sim/roster.csv", &roster)?;
    let profiles = render_csv(|w| fmt::write_profiles_csv(&output.profiles, w))?;
    writer.write(manifest, "sim/profiles.csv", &profiles)?;
    let assessments = render_csv(|w| fmt::write_assessments_csv(&output.assessments, w))?;
    writer.write(manifest, "sim/assessments.csv", &assessments)?;
    let truth = render_csv(|w| fmt::write_truth_csv(&output.truth, w))?;
    writer.write(manifest, "sim/ground_truth.csv", &truth)?;
    let traits = serde_json::to_string_pretty(&output.truth.traits)?;
    writer.write(manifest, "sim/traits.json", traits.as_bytes())
}

/// Runs one subcommand end to end. On failure every artifact written in this
/// run is removed before the error propagates.
pub fn run_subcommand(subcommand: Subcommand, config: &RunConfig) -> Result<()> {
    let mut manifest = Manifest::new(subcommand.name(), config.seed, &config.echo);
    let mut writer = ArtifactWriter::new(&config.out_dir)?;
    let result = dispatch(subcommand, config, &mut writer, &mut manifest);
    match result {
        Ok(()) => writer.finish(&manifest),
        Err(err) => {
            writer.remove_partial_outputs();
            Err(err)
        }
    }
}

fn dispatch(
    subcommand: Subcommand,
    config: &RunConfig,
    writer: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<()> {
    match subcommand {
        Subcommand::Simulate => write_simulate_artifacts(config, writer, manifest),
        Subcommand::Ingest => {
            let loaded = load_inputs(config, manifest, true)?;
            write_ingest_artifacts(&loaded, writer, manifest)
        }
        Subcommand::Sessions => {
            let loaded = load_inputs(config, manifest, false)?;
            let analysis = analyze(config, &loaded, manifest);
            write_session_artifacts(&analysis, writer, manifest)
        }
        Subcommand::Coasting => {
            let loaded = load_inputs(config, manifest, false)?;
            let analysis = analyze(config, &loaded, manifest);
            write_coasting_artifacts(&analysis, writer, manifest)
        }
        Subcommand::Gstudy => {
            let loaded = load_inputs(config, manifest, false)?;
            let analysis = analyze(config, &loaded, manifest);
            write_gstudy_artifacts(config, &analysis, writer, manifest)
        }
        Subcommand::Models => {
            let loaded = load_inputs(config, manifest, true)?;
            let analysis = analyze(config, &loaded, manifest);
            write_model_artifacts(config, &analysis, writer, manifest)
        }
        Subcommand::Report => {
            let loaded = load_inputs(config, manifest, true)?;
            let analysis = analyze(config, &loaded, manifest);
            write_session_artifacts(&analysis, writer, manifest)?;
            write_coasting_artifacts(&analysis, writer, manifest)?;
            write_gstudy_artifacts(config, &analysis, writer, manifest)?;
            write_model_artifacts(config, &analysis, writer, manifest)?;
            write_report_artifacts(config, &analysis, writer, manifest)
        }
        Subcommand::All => {
            let loaded = load_inputs(config, manifest, true)?;
            let analysis = analyze(config, &loaded, manifest);
            write_ingest_artifacts(&loaded, writer, manifest)?;
            write_session_artifacts(&analysis, writer, manifest)?;
            write_coasting_artifacts(&analysis, writer, manifest)?;
            write_gstudy_artifacts(config, &analysis, writer, manifest)?;
            write_model_artifacts(config, &analysis, writer, manifest)?;
            write_report_artifacts(config, &analysis, writer, manifest)
        }
    }
}
