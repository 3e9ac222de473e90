//! Run configuration: a plain-text `key = value` file plus command-line
//! overrides. Unknown keys are a hard error. The only environment variable
//! consulted is `COASTING_DEFAULT_TZ`, which supplies the default timezone.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{Duration, NaiveTime, Weekday};

use coasting_core::coasting::{IdleConfig, IdleMode, Weighting};
use coasting_core::ingest::SchemaMap;
use coasting_core::keyval::KeyVals;
use coasting_core::lmm::DemographicFamily;
use coasting_core::model::SchoolCalendar;
use coasting_core::sessions::{SessionConfig, TrimConfig};
use coasting_core::simulate::SimConfig;

pub const DEFAULT_TZ_ENV: &str = "COASTING_DEFAULT_TZ";

/// Which model families the `models` and `report` subcommands fit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSelection {
    pub families: Vec<DemographicFamily>,
    pub achievement: bool,
}

impl Default for ModelSelection {
    fn default() -> Self {
        ModelSelection {
            families: DemographicFamily::ALL.to_vec(),
            achievement: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub events_path: PathBuf,
    pub profiles_path: PathBuf,
    pub assessments_path: PathBuf,
    /// Optional ground-truth CSV; when present the report stage emits a
    /// truth-check artifact.
    pub ground_truth_path: Option<PathBuf>,
    pub schema: SchemaMap,
    pub calendar: SchoolCalendar,
    pub session: SessionConfig,
    pub idle: IdleConfig,
    /// Re-derive the idle threshold from the data instead of the fixed one.
    pub derive_idle_threshold: bool,
    pub weighting: Weighting,
    pub models: ModelSelection,
    pub standardize_fall_map: bool,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub sim: SimConfig,
    /// Echo of the resolved key/value pairs for the manifest.
    pub echo: Vec<(String, String)>,
}

/// Command-line overrides applied after the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub split_gap_mins: Option<i64>,
    pub idle_threshold_secs: Option<i64>,
    pub min_concurrency: Option<u32>,
}

fn parse_weekdays(raw: &str) -> Result<Vec<Weekday>> {
    raw.split(',')
        .map(|token| match token.trim().to_ascii_lowercase().as_str() {
            "mon" => Ok(Weekday::Mon),
            "tue" => Ok(Weekday::Tue),
            "wed" => Ok(Weekday::Wed),
            "thu" => Ok(Weekday::Thu),
            "fri" => Ok(Weekday::Fri),
            "sat" => Ok(Weekday::Sat),
            "sun" => Ok(Weekday::Sun),
            other => bail!("unknown weekday {other:?}"),
        })
        .collect()
}

impl RunConfig {
    /// Loads the config file (when given) and applies overrides; `None`
    /// means all defaults.
    pub fn load(config_path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let kv = match config_path {
            Some(path) => {
                KeyVals::load(path).with_context(|| format!("loading {}", path.display()))?
            }
            None => KeyVals::parse("").expect("empty config"),
        };
        let mut config = Self::from_keyvals(&kv)?;
        if let Some(out) = &overrides.out {
            config.out_dir = out.clone();
        }
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(mins) = overrides.split_gap_mins {
            config.session.split_gap = Duration::minutes(mins);
        }
        if let Some(secs) = overrides.idle_threshold_secs {
            config.idle.threshold = Duration::seconds(secs);
        }
        if let Some(min) = overrides.min_concurrency {
            config.session.min_classwork_concurrency = min;
        }
        // Unset input paths default to the simulator exports under the
        // resolved out dir, so `simulate` followed by `all` works unchanged.
        let sim_dir = config.out_dir.join("sim");
        if config.events_path.as_os_str().is_empty() {
            config.events_path = sim_dir.join("events.csv");
        }
        if config.profiles_path.as_os_str().is_empty() {
            config.profiles_path = sim_dir.join("profiles.csv");
        }
        if config.assessments_path.as_os_str().is_empty() {
            config.assessments_path = sim_dir.join("assessments.csv");
        }
        if config.ground_truth_path.is_none() {
            let default = sim_dir.join("ground_truth.csv");
            if default.exists() {
                config.ground_truth_path = Some(default);
            }
        }
        config.validate()?;
        Ok(config)
    }

    fn from_keyvals(kv: &KeyVals) -> Result<RunConfig> {
        let out_dir: PathBuf = kv.get("out").unwrap_or("out").into();

        let timezone = kv
            .get("timezone")
            .map(str::to_string)
            .or_else(|| std::env::var(DEFAULT_TZ_ENV).ok())
            .unwrap_or_else(|| SchoolCalendar::DEFAULT_TIMEZONE.to_string());
        let mut calendar = SchoolCalendar::new(&timezone)?;
        let day_start = kv.get("school_day_start").unwrap_or("07:00").to_string();
        let day_end = kv.get("school_day_end").unwrap_or("15:00").to_string();
        let parse_time = |raw: &str| {
            NaiveTime::parse_from_str(raw, "%H:%M")
                .or_else(|_| NaiveTime::parse_from_str(raw, "%H:%M:%S"))
                .with_context(|| format!("bad clock time {raw:?}"))
        };
        calendar = calendar.with_hours(parse_time(&day_start)?, parse_time(&day_end)?)?;
        if let Some(raw) = kv.get("weekend") {
            calendar = calendar.with_weekend(parse_weekdays(raw)?);
        }

        let mut session = SessionConfig::default();
        if let Some(mins) = kv.get_parsed::<i64>("split_gap_mins")? {
            session.split_gap = Duration::minutes(mins);
        }
        if let Some(min) = kv.get_parsed::<u32>("min_classwork_concurrency")? {
            session.min_classwork_concurrency = min;
        }
        if let Some(pct) = kv.get_parsed::<f64>("trim_percentile")? {
            session.trim = Some(TrimConfig { percentile: pct });
        }

        let mut idle = IdleConfig::default();
        if let Some(secs) = kv.get_parsed::<i64>("idle_threshold_secs")? {
            idle.threshold = Duration::seconds(secs);
        }
        idle.mode = match kv.get("idle_mode").unwrap_or("full_gap") {
            "full_gap" => IdleMode::FullGap,
            "excess_only" => IdleMode::ExcessOnly,
            other => bail!("unknown idle_mode {other:?}"),
        };

        let weighting = match kv.get("weighting").unwrap_or("session") {
            "session" => Weighting::SessionEqual,
            "student" => Weighting::StudentEqual,
            other => bail!("unknown weighting {other:?}"),
        };

        let models = match kv.get("models") {
            None => ModelSelection::default(),
            Some(raw) => {
                let mut selection = ModelSelection {
                    families: Vec::new(),
                    achievement: false,
                };
                for token in raw.split(',') {
                    match token.trim() {
                        "gender_ethnicity" => {
                            selection.families.push(DemographicFamily::GenderEthnicity)
                        }
                        "frl" => selection.families.push(DemographicFamily::Frl),
                        "iep" => selection.families.push(DemographicFamily::Iep),
                        "ell" => selection.families.push(DemographicFamily::Ell),
                        "locale" => selection.families.push(DemographicFamily::Locale),
                        "achievement" => selection.achievement = true,
                        other => bail!("unknown model family {other:?}"),
                    }
                }
                selection
            }
        };

        let mut sim = SimConfig {
            timezone: timezone.clone(),
            ..Default::default()
        };
        if let Some(n) = kv.get_parsed::<u32>("sim.n_classes")? {
            sim.n_classes = n;
        }
        if let Some(n) = kv.get_parsed::<u32>("sim.sessions_per_class")? {
            sim.sessions_per_class = n;
        }
        if let Some(v) = kv.get_parsed::<f64>("sim.students_per_class_mean")? {
            sim.students_per_class_mean = v;
        }
        if let Some(v) = kv.get_parsed::<f64>("sim.students_per_class_sd")? {
            sim.students_per_class_sd = v;
        }
        if let Some(v) = kv.get_parsed::<f64>("sim.absence_rate")? {
            sim.absence_rate = v;
        }
        if let Some(v) = kv.get_parsed::<f64>("sim.session_length_mean_mins")? {
            sim.session_length_mean_mins = v;
        }
        if let Some(v) = kv.get_parsed::<f64>("sim.session_length_sd_mins")? {
            sim.session_length_sd_mins = v;
        }

        let config = RunConfig {
            events_path: kv.get("events").map(PathBuf::from).unwrap_or_default(),
            profiles_path: kv.get("profiles").map(PathBuf::from).unwrap_or_default(),
            assessments_path: kv
                .get("assessments")
                .map(PathBuf::from)
                .unwrap_or_default(),
            ground_truth_path: kv.get("ground_truth").map(PathBuf::from),
            // Consumes every `events.* / profiles.* / assessments.*` mapping
            // key and rejects anything still unconsumed.
            schema: SchemaMap::from_keyvals(kv)?,
            calendar,
            session,
            idle,
            derive_idle_threshold: kv
                .get_parsed::<bool>("derive_idle_threshold")?
                .unwrap_or(false),
            weighting,
            models,
            standardize_fall_map: kv
                .get_parsed::<bool>("fall_map_standardize")?
                .unwrap_or(true),
            out_dir,
            seed: kv.get_parsed::<u64>("seed")?.unwrap_or(42),
            sim,
            echo: kv
                .entries()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        };
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.session.split_gap.num_seconds() <= 0 {
            bail!("split_gap must be positive");
        }
        if self.idle.threshold.num_seconds() <= 0 {
            bail!("idle_threshold must be positive");
        }
        if self.session.split_gap <= self.idle.threshold {
            bail!(
                "split_gap ({}s) must exceed idle_threshold ({}s)",
                self.session.split_gap.num_seconds(),
                self.idle.threshold.num_seconds()
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn load_text(text: &str) -> Result<RunConfig> {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(text.as_bytes()).unwrap();
        file.flush().unwrap();
        RunConfig::load(Some(file.path()), &Overrides::default())
    }

    #[test]
    fn defaults_resolve_without_a_file() {
        let config = RunConfig::load(None, &Overrides::default()).unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.session.split_gap, Duration::minutes(15));
        assert_eq!(config.idle.threshold, Duration::seconds(120));
        assert!(config.events_path.ends_with("sim/events.csv"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load_text("splitgap_mins = 10\n").unwrap_err();
        assert!(err.to_string().contains("splitgap_mins"), "{err}");
    }

    #[test]
    fn threshold_ordering_is_enforced() {
        let err = load_text("split_gap_mins = 1\nidle_threshold_secs = 120\n").unwrap_err();
        assert!(err.to_string().contains("split_gap"));
    }

    #[test]
    fn overrides_beat_file_values() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(b"seed = 7\nsplit_gap_mins = 20\n").unwrap();
        file.flush().unwrap();
        let overrides = Overrides {
            seed: Some(99),
            split_gap_mins: Some(25),
            ..Default::default()
        };
        let config = RunConfig::load(Some(file.path()), &overrides).unwrap();
        assert_eq!(config.seed, 99);
        assert_eq!(config.session.split_gap, Duration::minutes(25));
    }

    #[test]
    fn model_selection_parses() {
        let config = load_text("models = iep,achievement\n").unwrap();
        assert_eq!(config.models.families, vec![DemographicFamily::Iep]);
        assert!(config.models.achievement);
        assert!(load_text("models = bogus\n").is_err());
    }
}
