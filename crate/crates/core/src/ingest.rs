//! CSV ingestion with a column-mapping layer.
//!
//! Source files are RFC-4180 CSV with a header row. A plain-text mapping file
//! binds canonical field names to source column names, so an unfamiliar export
//! schema can be wired up without code changes. Rows that cannot be parsed are
//! rejected and counted per reason; they are never dropped silently.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::keyval::{KeyValError, KeyVals};
use crate::model::{
    truncate_to_second, AssessmentRecord, CatParse, Ethnicity, EventKind, EventLog, Gender,
    Locale, SchoolCalendar, StudentProfile, TransactionEvent, TriState,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{file}: mapped column {column:?} not found in header")]
    MissingColumn { file: String, column: String },
    #[error("duplicate student_id {0:?}")]
    DuplicateStudentId(String),
    #[error(transparent)]
    Schema(#[from] KeyValError),
}

/// Canonical-field-to-source-column bindings for the event log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventColumns {
    pub student_id: String,
    pub class_id: String,
    pub timestamp: String,
    pub event_kind: String,
    pub assignment_id: String,
    pub problem_id: String,
}

impl Default for EventColumns {
    fn default() -> Self {
        EventColumns {
            student_id: "student_id".into(),
            class_id: "class_id".into(),
            timestamp: "timestamp".into(),
            event_kind: "event_kind".into(),
            assignment_id: "assignment_id".into(),
            problem_id: "problem_id".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProfileColumns {
    pub student_id: String,
    pub gender: String,
    pub ethnicity: String,
    pub frl: String,
    pub iep: String,
    pub ell: String,
    pub locale: String,
}

impl Default for ProfileColumns {
    fn default() -> Self {
        ProfileColumns {
            student_id: "student_id".into(),
            gender: "gender".into(),
            ethnicity: "ethnicity".into(),
            frl: "frl".into(),
            iep: "iep".into(),
            ell: "ell".into(),
            locale: "locale".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssessmentColumns {
    pub student_id: String,
    pub map_fall: String,
    pub map_spring: String,
}

impl Default for AssessmentColumns {
    fn default() -> Self {
        AssessmentColumns {
            student_id: "student_id".into(),
            map_fall: "map_fall".into(),
            map_spring: "map_spring".into(),
        }
    }
}

/// Column mappings for all three input files. Defaults to the canonical
/// column names the simulator emits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SchemaMap {
    pub events: EventColumns,
    pub profiles: ProfileColumns,
    pub assessments: AssessmentColumns,
}

impl SchemaMap {
    /// Reads overrides from `key = value` text. Keys are prefixed by file
    /// kind, e.g. `events.student_id = Student ID`. Unknown keys are a hard
    /// failure so mapping typos cannot pass silently.
    pub fn from_keyvals(kv: &KeyVals) -> Result<Self, IngestError> {
        let mut map = SchemaMap::default();
        let bind = |key: &str, slot: &mut String| {
            if let Some(v) = kv.get(key) {
                *slot = v.to_string();
            }
        };
        bind("events.student_id", &mut map.events.student_id);
        bind("events.class_id", &mut map.events.class_id);
        bind("events.timestamp", &mut map.events.timestamp);
        bind("events.event_kind", &mut map.events.event_kind);
        bind("events.assignment_id", &mut map.events.assignment_id);
        bind("events.problem_id", &mut map.events.problem_id);
        bind("profiles.student_id", &mut map.profiles.student_id);
        bind("profiles.gender", &mut map.profiles.gender);
        bind("profiles.ethnicity", &mut map.profiles.ethnicity);
        bind("profiles.frl", &mut map.profiles.frl);
        bind("profiles.iep", &mut map.profiles.iep);
        bind("profiles.ell", &mut map.profiles.ell);
        bind("profiles.locale", &mut map.profiles.locale);
        bind("assessments.student_id", &mut map.assessments.student_id);
        bind("assessments.map_fall", &mut map.assessments.map_fall);
        bind("assessments.map_spring", &mut map.assessments.map_spring);
        let leftover = kv.unconsumed();
        if let Some(key) = leftover.first() {
            return Err(KeyValError::UnknownKey(key.clone()).into());
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let kv = KeyVals::load(path)?;
        Self::from_keyvals(&kv)
    }
}

/// Per-file ingestion accounting. `accepted + rejected == rows_read` always.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub rows_read: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub reject_reasons: BTreeMap<String, u64>,
    pub warnings: BTreeMap<String, u64>,
}

impl IngestReport {
    fn reject(&mut self, reason: &str) {
        self.rejected += 1;
        *self.reject_reasons.entry(reason.to_string()).or_insert(0) += 1;
    }

    fn warn(&mut self, reason: &str) {
        *self.warnings.entry(reason.to_string()).or_insert(0) += 1;
    }
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "rows_read={} accepted={} rejected={}",
            self.rows_read, self.accepted, self.rejected
        )?;
        for (reason, n) in &self.reject_reasons {
            writeln!(f, "reject[{reason}]={n}")?;
        }
        for (reason, n) in &self.warnings {
            writeln!(f, "warn[{reason}]={n}")?;
        }
        Ok(())
    }
}

struct HeaderIndex {
    by_name: BTreeMap<String, usize>,
    file: String,
}

impl HeaderIndex {
    fn new(file: &str, headers: &csv::StringRecord) -> Self {
        let by_name = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        HeaderIndex {
            by_name,
            file: file.to_string(),
        }
    }

    fn require(&self, column: &str) -> Result<usize, IngestError> {
        self.by_name
            .get(column)
            .copied()
            .ok_or_else(|| IngestError::MissingColumn {
                file: self.file.clone(),
                column: column.to_string(),
            })
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, IngestError> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn field<'a>(record: &'a csv::StringRecord, idx: usize) -> &'a str {
    record.get(idx).unwrap_or("").trim()
}

/// Parses a timestamp cell. RFC 3339 is tried first; a bare
/// `YYYY-MM-DD HH:MM:SS` is interpreted as school-local wall-clock time.
/// Returns the UTC instant truncated to seconds plus an ambiguity flag.
fn parse_timestamp(raw: &str, calendar: &SchoolCalendar) -> Option<(DateTime<Utc>, bool)> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some((truncate_to_second(dt.with_timezone(&Utc)), false));
    }
    let naive = NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S").ok()?;
    let (dt, ambiguous) = calendar.resolve_local(naive)?;
    Some((truncate_to_second(dt), ambiguous))
}

/// Reads, validates, timezone-normalizes, and canonically sorts the event log.
pub fn ingest_events(
    path: &Path,
    columns: &EventColumns,
    calendar: &SchoolCalendar,
) -> Result<(EventLog, IngestReport), IngestError> {
    let mut reader = open_reader(path)?;
    let wrap_csv = |source: csv::Error| IngestError::Csv {
        path: path.display().to_string(),
        source,
    };
    let header = HeaderIndex::new("events", reader.headers().map_err(wrap_csv)?);
    let i_student = header.require(&columns.student_id)?;
    let i_class = header.require(&columns.class_id)?;
    let i_ts = header.require(&columns.timestamp)?;
    let i_kind = header.require(&columns.event_kind)?;
    let i_assignment = header.require(&columns.assignment_id)?;
    let i_problem = header.require(&columns.problem_id)?;

    let mut report = IngestReport::default();
    let mut events = Vec::new();
    for record in reader.records() {
        let record = record.map_err(wrap_csv)?;
        report.rows_read += 1;
        let student = field(&record, i_student);
        let class = field(&record, i_class);
        if student.is_empty() || class.is_empty() {
            report.reject("missing id");
            continue;
        }
        let assignment = field(&record, i_assignment);
        if assignment.is_empty() {
            report.reject("missing id");
            continue;
        }
        let Some((timestamp, ambiguous)) = parse_timestamp(field(&record, i_ts), calendar) else {
            report.reject("bad timestamp");
            continue;
        };
        if ambiguous {
            report.warn("ambiguous local timestamp");
        }
        let Some(kind) = EventKind::parse(field(&record, i_kind)) else {
            report.reject("unknown event kind");
            continue;
        };
        let problem = field(&record, i_problem);
        events.push(TransactionEvent {
            student_id: student.into(),
            class_id: class.into(),
            timestamp,
            kind,
            assignment_id: assignment.to_string(),
            problem_id: (!problem.is_empty()).then(|| problem.to_string()),
        });
    }

    let (log, duplicates) = EventLog::from_unsorted(events);
    for _ in 0..duplicates {
        report.reject("duplicate event");
    }
    report.accepted = log.len() as u64;
    debug_assert_eq!(report.accepted + report.rejected, report.rows_read);
    Ok((log, report))
}

/// Reads the demographic table. Unknown categorical values map to Missing
/// with a warning; duplicate student ids are a hard failure.
pub fn ingest_profiles(
    path: &Path,
    columns: &ProfileColumns,
) -> Result<(Vec<StudentProfile>, IngestReport), IngestError> {
    let mut reader = open_reader(path)?;
    let wrap_csv = |source: csv::Error| IngestError::Csv {
        path: path.display().to_string(),
        source,
    };
    let header = HeaderIndex::new("profiles", reader.headers().map_err(wrap_csv)?);
    let i_student = header.require(&columns.student_id)?;
    let i_gender = header.require(&columns.gender)?;
    let i_ethnicity = header.require(&columns.ethnicity)?;
    let i_frl = header.require(&columns.frl)?;
    let i_iep = header.require(&columns.iep)?;
    let i_ell = header.require(&columns.ell)?;
    let i_locale = header.require(&columns.locale)?;

    let mut report = IngestReport::default();
    let mut profiles: Vec<StudentProfile> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(wrap_csv)?;
        report.rows_read += 1;
        let student = field(&record, i_student);
        if student.is_empty() {
            report.reject("missing id");
            continue;
        }
        if !seen.insert(student.to_string()) {
            return Err(IngestError::DuplicateStudentId(student.to_string()));
        }

        fn resolve<T>(parsed: CatParse<T>, missing: T, field_name: &str, report: &mut IngestReport) -> T {
            match parsed {
                CatParse::Known(v) => v,
                CatParse::Blank => missing,
                CatParse::Unknown => {
                    report.warn(&format!("unknown {field_name}"));
                    missing
                }
            }
        }

        let profile = StudentProfile {
            student_id: student.into(),
            gender: resolve(
                Gender::parse(field(&record, i_gender)),
                Gender::Missing,
                "gender",
                &mut report,
            ),
            ethnicity: resolve(
                Ethnicity::parse(field(&record, i_ethnicity)),
                Ethnicity::Missing,
                "ethnicity",
                &mut report,
            ),
            frl: resolve(
                TriState::parse(field(&record, i_frl)),
                TriState::Missing,
                "frl",
                &mut report,
            ),
            iep: resolve(
                TriState::parse(field(&record, i_iep)),
                TriState::Missing,
                "iep",
                &mut report,
            ),
            ell: resolve(
                TriState::parse(field(&record, i_ell)),
                TriState::Missing,
                "ell",
                &mut report,
            ),
            locale: resolve(
                Locale::parse(field(&record, i_locale)),
                Locale::Missing,
                "locale",
                &mut report,
            ),
        };
        profiles.push(profile);
    }
    profiles.sort_by(|a, b| a.student_id.cmp(&b.student_id));
    report.accepted = profiles.len() as u64;
    debug_assert_eq!(report.accepted + report.rejected, report.rows_read);
    Ok((profiles, report))
}

/// Reads fall/spring assessment scores. Blank cells are missing scores;
/// non-finite or unparseable values reject the row.
pub fn ingest_assessments(
    path: &Path,
    columns: &AssessmentColumns,
) -> Result<(Vec<AssessmentRecord>, IngestReport), IngestError> {
    let mut reader = open_reader(path)?;
    let wrap_csv = |source: csv::Error| IngestError::Csv {
        path: path.display().to_string(),
        source,
    };
    let header = HeaderIndex::new("assessments", reader.headers().map_err(wrap_csv)?);
    let i_student = header.require(&columns.student_id)?;
    let i_fall = header.require(&columns.map_fall)?;
    let i_spring = header.require(&columns.map_spring)?;

    let mut report = IngestReport::default();
    let mut records: Vec<AssessmentRecord> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    'rows: for record in reader.records() {
        let record = record.map_err(wrap_csv)?;
        report.rows_read += 1;
        let student = field(&record, i_student);
        if student.is_empty() {
            report.reject("missing id");
            continue;
        }
        if !seen.insert(student.to_string()) {
            return Err(IngestError::DuplicateStudentId(student.to_string()));
        }
        let mut scores = [None, None];
        for (slot, idx) in scores.iter_mut().zip([i_fall, i_spring]) {
            let raw = field(&record, idx);
            if raw.is_empty() {
                continue;
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => *slot = Some(v),
                _ => {
                    report.reject("bad score");
                    seen.remove(student);
                    continue 'rows;
                }
            }
        }
        records.push(AssessmentRecord {
            student_id: student.into(),
            map_fall: scores[0],
            map_spring: scores[1],
        });
    }
    records.sort_by(|a, b| a.student_id.cmp(&b.student_id));
    report.accepted = records.len() as u64;
    debug_assert_eq!(report.accepted + report.rejected, report.rows_read);
    Ok((records, report))
}
