//! Random-intercept linear mixed models over the per-student analysis table.
//!
//! Model: `y_i = x_i' beta + u_{class(i)} + e_i` with
//! `u ~ N(0, tau00)`, `e ~ N(0, sigma2)`. Writing `lambda = tau00 / sigma2`,
//! the marginal covariance is `sigma2 (I + lambda Z Z')`, block-diagonal per
//! class, so for fixed `lambda` generalized least squares collapses to
//! per-group shrinkage identities:
//!
//! ```text
//! w_g = lambda / (1 + lambda n_g)
//! X'V^-1 X = X'X - sum_g w_g s_g s_g'      (s_g = column sums of X in g)
//! X'V^-1 y = X'y - sum_g w_g s_g t_g       (t_g = sum of y in g)
//! ln|V|    = sum_g ln(1 + lambda n_g)
//! ```
//!
//! The criterion is profiled to a one-dimensional search over `ln lambda`
//! (coarse scan plus golden-section refinement, boundary `lambda = 0`
//! admissible). REML supplies variance components and coefficient standard
//! errors; a maximum-likelihood refit supplies the log-likelihood behind BIC.
//! Wald z-tests give p-values; the choice of z over finite-df approximations
//! is deliberate and documented in the fit output.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::coasting::CoastingRecord;
use crate::model::{
    AssessmentRecord, ClassId, Ethnicity, Gender, Locale, StudentId, StudentProfile, TriState,
};

#[derive(Debug, Error)]
pub enum LmmError {
    #[error("no usable rows after applying the missing-data policy")]
    EmptyDesign,
    #[error("grouping factor has {0} level(s); at least 2 required")]
    TooFewGroups(usize),
    #[error("design matrix is rank deficient; suspect columns: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("non-finite likelihood at lambda={lambda}: {detail}")]
    NonFinite { lambda: f64, detail: String },
}

/// One student's joined analysis row: aggregated coasting measures, modal
/// class, demographics, and assessment scores.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentRow {
    pub student_id: StudentId,
    pub class_id: ClassId,
    pub n_classwork_sessions: u32,
    pub coasted_prop: f64,
    pub adjusted_coasted_prop: f64,
    pub time_on_task_prop: f64,
    pub extra_effort_prop: f64,
    pub gender: Gender,
    pub ethnicity: Ethnicity,
    pub frl: TriState,
    pub iep: TriState,
    pub ell: TriState,
    pub locale: Locale,
    pub map_fall: Option<f64>,
    pub map_spring: Option<f64>,
}

/// Joins classwork records with profiles and assessments into one row per
/// student. The grouping class is the student's modal classwork class
/// (ties break to the lexicographically smallest id). Students without any
/// classwork record are omitted; missing profile fields stay at their
/// explicit Missing levels.
pub fn join_student_rows(
    records: &[CoastingRecord],
    profiles: &[StudentProfile],
    assessments: &[AssessmentRecord],
) -> Vec<StudentRow> {
    let profile_by_id: BTreeMap<&StudentId, &StudentProfile> =
        profiles.iter().map(|p| (&p.student_id, p)).collect();
    let scores_by_id: BTreeMap<&StudentId, &AssessmentRecord> =
        assessments.iter().map(|a| (&a.student_id, a)).collect();

    let mut by_student: BTreeMap<&StudentId, Vec<&CoastingRecord>> = BTreeMap::new();
    for record in records {
        by_student.entry(&record.student_id).or_default().push(record);
    }

    by_student
        .into_iter()
        .map(|(student_id, group)| {
            let mut class_counts: BTreeMap<&ClassId, u32> = BTreeMap::new();
            for record in &group {
                *class_counts.entry(&record.class_id).or_insert(0) += 1;
            }
            let modal_class = class_counts
                .iter()
                .max_by_key(|(id, count)| (**count, std::cmp::Reverse(*id)))
                .map(|(id, _)| (*id).clone())
                .expect("group is non-empty");

            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&CoastingRecord) -> f64| {
                group.iter().map(|r| f(r)).sum::<f64>() / n
            };
            let profile = profile_by_id.get(student_id);
            let scores = scores_by_id.get(student_id);
            StudentRow {
                student_id: student_id.clone(),
                class_id: modal_class,
                n_classwork_sessions: group.len() as u32,
                coasted_prop: mean(&CoastingRecord::prop_coasted),
                adjusted_coasted_prop: mean(&CoastingRecord::prop_adjusted_coasted),
                time_on_task_prop: mean(&CoastingRecord::prop_time_on_task),
                extra_effort_prop: mean(&CoastingRecord::prop_extra_effort),
                gender: profile.map_or(Gender::Missing, |p| p.gender),
                ethnicity: profile.map_or(Ethnicity::Missing, |p| p.ethnicity),
                frl: profile.map_or(TriState::Missing, |p| p.frl),
                iep: profile.map_or(TriState::Missing, |p| p.iep),
                ell: profile.map_or(TriState::Missing, |p| p.ell),
                locale: profile.map_or(Locale::Missing, |p| p.locale),
                map_fall: scores.and_then(|s| s.map_fall),
                map_spring: scores.and_then(|s| s.map_spring),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuousVar {
    MapFall,
    MapSpring,
    CoastedProp,
    AdjustedCoastedProp,
    TimeOnTaskProp,
    ExtraEffortProp,
}

impl ContinuousVar {
    pub fn value(self, row: &StudentRow) -> Option<f64> {
        match self {
            ContinuousVar::MapFall => row.map_fall,
            ContinuousVar::MapSpring => row.map_spring,
            ContinuousVar::CoastedProp => Some(row.coasted_prop),
            ContinuousVar::AdjustedCoastedProp => Some(row.adjusted_coasted_prop),
            ContinuousVar::TimeOnTaskProp => Some(row.time_on_task_prop),
            ContinuousVar::ExtraEffortProp => Some(row.extra_effort_prop),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ContinuousVar::MapFall => "map_fall",
            ContinuousVar::MapSpring => "map_spring",
            ContinuousVar::CoastedProp => "coasted_prop",
            ContinuousVar::AdjustedCoastedProp => "adjusted_coasted_prop",
            ContinuousVar::TimeOnTaskProp => "time_on_task_prop",
            ContinuousVar::ExtraEffortProp => "extra_effort_prop",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorVar {
    Gender,
    Ethnicity,
    Frl,
    Iep,
    Ell,
    Locale,
}

impl FactorVar {
    pub fn label(self) -> &'static str {
        match self {
            FactorVar::Gender => "gender",
            FactorVar::Ethnicity => "ethnicity",
            FactorVar::Frl => "frl",
            FactorVar::Iep => "iep",
            FactorVar::Ell => "ell",
            FactorVar::Locale => "locale",
        }
    }

    /// Non-missing levels, reference level first.
    pub fn levels(self) -> &'static [&'static str] {
        match self {
            FactorVar::Gender => &["female", "male"],
            FactorVar::Ethnicity => &["white", "african_american", "hispanic", "other"],
            FactorVar::Frl | FactorVar::Iep | FactorVar::Ell => &["no", "yes"],
            FactorVar::Locale => &["urban", "rural"],
        }
    }

    /// The row's level, or None when missing.
    pub fn level_of(self, row: &StudentRow) -> Option<&'static str> {
        match self {
            FactorVar::Gender => match row.gender {
                Gender::Female => Some("female"),
                Gender::Male => Some("male"),
                Gender::Missing => None,
            },
            FactorVar::Ethnicity => match row.ethnicity {
                Ethnicity::White => Some("white"),
                Ethnicity::AfricanAmerican => Some("african_american"),
                Ethnicity::Hispanic => Some("hispanic"),
                Ethnicity::Other => Some("other"),
                Ethnicity::Missing => None,
            },
            FactorVar::Frl => tri(row.frl),
            FactorVar::Iep => tri(row.iep),
            FactorVar::Ell => tri(row.ell),
            FactorVar::Locale => match row.locale {
                Locale::Urban => Some("urban"),
                Locale::Rural => Some("rural"),
                Locale::Missing => None,
            },
        }
    }
}

fn tri(v: TriState) -> Option<&'static str> {
    match v {
        TriState::No => Some("no"),
        TriState::Yes => Some("yes"),
        TriState::Missing => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedTerm {
    Continuous {
        var: ContinuousVar,
        standardize: bool,
    },
    Categorical(FactorVar),
    /// Dummy-by-dummy products over the non-reference levels of both factors.
    Interaction(FactorVar, FactorVar),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Drop the row when any used factor is missing.
    DropRow,
    /// Encode Missing as its own dummy level.
    RetainMissingLevel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub response: ContinuousVar,
    pub standardize_response: bool,
    pub terms: Vec<FixedTerm>,
    pub missing_policy: MissingPolicy,
}

/// Row-accounting from design construction.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EncodingReport {
    pub n_input_rows: usize,
    pub n_rows_used: usize,
    pub dropped_missing_response: usize,
    pub dropped_missing_covariate: usize,
    pub dropped_missing_factor: usize,
    /// (variable, mean, sd) for each standardized column.
    pub standardizations: Vec<(String, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct LmmDesign {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub column_names: Vec<String>,
    /// Per-row group index into `group_labels`.
    pub groups: Vec<usize>,
    pub group_labels: Vec<ClassId>,
    pub report: EncodingReport,
    pub response_name: String,
}

impl LmmDesign {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }
}

fn zscore(values: &mut [f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    if sd > 0.0 {
        for v in values.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    (mean, sd)
}

/// Builds response, fixed-effects matrix, and group index from the spec.
///
/// Dummy coding uses the first level of each factor as the reference. Rows
/// with a missing response or missing continuous covariate always drop; rows
/// with missing factors drop or gain a `missing` level per the policy.
pub fn build_design(spec: &ModelSpec, rows: &[StudentRow]) -> Result<LmmDesign, LmmError> {
    let mut report = EncodingReport {
        n_input_rows: rows.len(),
        ..Default::default()
    };

    // Which factors the model touches (for the missing policy).
    let mut factors: Vec<FactorVar> = Vec::new();
    for term in &spec.terms {
        match term {
            FixedTerm::Categorical(f) => factors.push(*f),
            FixedTerm::Interaction(a, b) => {
                factors.push(*a);
                factors.push(*b);
            }
            FixedTerm::Continuous { .. } => {}
        }
    }
    factors.dedup();

    let mut used: Vec<&StudentRow> = Vec::new();
    let mut y_raw: Vec<f64> = Vec::new();
    'rows: for row in rows {
        let Some(response) = spec.response.value(row) else {
            report.dropped_missing_response += 1;
            continue;
        };
        for term in &spec.terms {
            if let FixedTerm::Continuous { var, .. } = term {
                if var.value(row).is_none() {
                    report.dropped_missing_covariate += 1;
                    continue 'rows;
                }
            }
        }
        if spec.missing_policy == MissingPolicy::DropRow {
            for factor in &factors {
                if factor.level_of(row).is_none() {
                    report.dropped_missing_factor += 1;
                    continue 'rows;
                }
            }
        }
        used.push(row);
        y_raw.push(response);
    }
    if used.is_empty() {
        return Err(LmmError::EmptyDesign);
    }
    report.n_rows_used = used.len();

    let mut response_name = spec.response.label().to_string();
    if spec.standardize_response {
        let (mean, sd) = zscore(&mut y_raw);
        report
            .standardizations
            .push((format!("{response_name} (response)"), mean, sd));
        response_name = format!("{response_name}_z");
    }

    // Group index over retained rows.
    let mut group_labels: Vec<ClassId> = used.iter().map(|r| r.class_id.clone()).collect();
    group_labels.sort();
    group_labels.dedup();
    if group_labels.len() < 2 {
        return Err(LmmError::TooFewGroups(group_labels.len()));
    }
    let group_index: BTreeMap<&ClassId, usize> = group_labels
        .iter()
        .enumerate()
        .map(|(i, c)| (c, i))
        .collect();
    let groups: Vec<usize> = used.iter().map(|r| group_index[&r.class_id]).collect();

    // Factor level dummies, with an optional trailing `missing` level.
    let dummy = |factor: FactorVar, level: &'static str, row: &StudentRow| -> f64 {
        match factor.level_of(row) {
            Some(l) if l == level => 1.0,
            _ => 0.0,
        }
    };
    let missing_dummy =
        |factor: FactorVar, row: &StudentRow| -> f64 {
            if factor.level_of(row).is_none() {
                1.0
            } else {
                0.0
            }
        };

    let mut columns: Vec<(String, Vec<f64>)> = vec![(
        "intercept".to_string(),
        vec![1.0; used.len()],
    )];
    for term in &spec.terms {
        match *term {
            FixedTerm::Continuous { var, standardize } => {
                let mut col: Vec<f64> = used
                    .iter()
                    .map(|r| var.value(r).expect("checked above"))
                    .collect();
                let mut name = var.label().to_string();
                if standardize {
                    let (mean, sd) = zscore(&mut col);
                    report.standardizations.push((name.clone(), mean, sd));
                    name = format!("{name}_z");
                }
                columns.push((name, col));
            }
            FixedTerm::Categorical(factor) => {
                for &level in &factor.levels()[1..] {
                    let col = used.iter().map(|r| dummy(factor, level, r)).collect();
                    columns.push((format!("{}[{level}]", factor.label()), col));
                }
                if spec.missing_policy == MissingPolicy::RetainMissingLevel
                    && used.iter().any(|r| factor.level_of(r).is_none())
                {
                    let col = used.iter().map(|r| missing_dummy(factor, r)).collect();
                    columns.push((format!("{}[missing]", factor.label()), col));
                }
            }
            FixedTerm::Interaction(a, b) => {
                for &la in &a.levels()[1..] {
                    for &lb in &b.levels()[1..] {
                        let col = used
                            .iter()
                            .map(|r| dummy(a, la, r) * dummy(b, lb, r))
                            .collect();
                        columns.push((format!(
                            "{}[{la}]:{}[{lb}]",
                            a.label(),
                            b.label()
                        ), col));
                    }
                }
            }
        }
    }

    let n = used.len();
    let p = columns.len();
    let mut x = DMatrix::<f64>::zeros(n, p);
    for (j, (_, col)) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let column_names: Vec<String> = columns.into_iter().map(|(name, _)| name).collect();

    // Rank check; a deficient design names every column that is a linear
    // combination of the others (dropping it does not reduce the rank).
    let rank_of = |m: &DMatrix<f64>| {
        let svd = m.clone().svd(false, false);
        let max_sv = svd.singular_values.iter().fold(0.0_f64, |a, &b| a.max(b));
        let tol = 1e-10 * max_sv.max(1.0);
        svd.singular_values.iter().filter(|&&s| s > tol).count()
    };
    let rank = rank_of(&x);
    if rank < p {
        let mut suspects = Vec::new();
        for j in 0..p {
            let reduced = x.clone().remove_column(j);
            if rank_of(&reduced) == rank {
                suspects.push(column_names[j].clone());
            }
        }
        return Err(LmmError::RankDeficient(suspects));
    }

    Ok(LmmDesign {
        y: DVector::from_vec(y_raw),
        x,
        column_names,
        groups,
        group_labels,
        report,
        response_name,
    })
}

/// Per-group sufficient statistics for the shrinkage identities.
struct ProfiledStats {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    group_x_sums: Vec<DVector<f64>>,
    group_y_sums: Vec<f64>,
    group_sizes: Vec<f64>,
    n: usize,
    p: usize,
}

impl ProfiledStats {
    fn new(design: &LmmDesign) -> Self {
        let n = design.n_rows();
        let p = design.n_fixed();
        let g = design.n_groups();
        let xtx = design.x.transpose() * &design.x;
        let xty = design.x.transpose() * &design.y;
        let yty = design.y.dot(&design.y);
        let mut group_x_sums = vec![DVector::<f64>::zeros(p); g];
        let mut group_y_sums = vec![0.0; g];
        let mut group_sizes = vec![0.0; g];
        for i in 0..n {
            let gi = design.groups[i];
            for j in 0..p {
                group_x_sums[gi][j] += design.x[(i, j)];
            }
            group_y_sums[gi] += design.y[i];
            group_sizes[gi] += 1.0;
        }
        ProfiledStats {
            xtx,
            xty,
            yty,
            group_x_sums,
            group_y_sums,
            group_sizes,
            n,
            p,
        }
    }

    /// GLS pieces at a given variance ratio.
    fn at_lambda(&self, lambda: f64) -> Option<GlsAtLambda> {
        let mut a = self.xtx.clone();
        let mut b = self.xty.clone();
        let mut q = self.yty;
        let mut logdet_v = 0.0;
        for g in 0..self.group_sizes.len() {
            let n_g = self.group_sizes[g];
            let w = lambda / (1.0 + lambda * n_g);
            let s = &self.group_x_sums[g];
            let t = self.group_y_sums[g];
            a.syger(-w, s, s, 1.0);
            b.axpy(-w * t, s, 1.0);
            q -= w * t * t;
            logdet_v += (1.0 + lambda * n_g).ln();
        }
        let chol = a.clone().cholesky()?;
        let beta = chol.solve(&b);
        let rss = q - beta.dot(&b);
        let logdet_a = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Some(GlsAtLambda {
            beta,
            rss,
            logdet_v,
            logdet_a,
            xtvinvx: a,
        })
    }

    /// `-2 * restricted log-likelihood`, profiled over sigma2.
    fn reml_criterion(&self, gls: &GlsAtLambda) -> f64 {
        let df = (self.n - self.p) as f64;
        let sigma2 = gls.rss / df;
        df * (2.0 * std::f64::consts::PI * sigma2).ln() + gls.logdet_v + gls.logdet_a + df
    }

    /// `-2 * log-likelihood`, profiled over sigma2.
    fn ml_criterion(&self, gls: &GlsAtLambda) -> f64 {
        let n = self.n as f64;
        let sigma2 = gls.rss / n;
        n * (2.0 * std::f64::consts::PI * sigma2).ln() + gls.logdet_v + n
    }
}

struct GlsAtLambda {
    beta: DVector<f64>,
    rss: f64,
    logdet_v: f64,
    logdet_a: f64,
    xtvinvx: DMatrix<f64>,
}

const LN_LAMBDA_LO: f64 = -25.0;
const LN_LAMBDA_HI: f64 = 15.0;
const SCAN_POINTS: usize = 401;
const GOLDEN_TOL: f64 = 1e-10;

/// Minimizes the criterion over lambda >= 0: coarse scan over ln(lambda),
/// golden-section refinement, then comparison against the exact boundary.
fn optimize_lambda(
    mut criterion: impl FnMut(f64) -> Option<f64>,
) -> Result<f64, LmmError> {
    let eval_ln = |c: &mut dyn FnMut(f64) -> Option<f64>, ln_l: f64| c(ln_l.exp());

    let mut best_idx = 0;
    let mut best_val = f64::INFINITY;
    let step = (LN_LAMBDA_HI - LN_LAMBDA_LO) / (SCAN_POINTS - 1) as f64;
    for i in 0..SCAN_POINTS {
        let ln_l = LN_LAMBDA_LO + step * i as f64;
        if let Some(v) = eval_ln(&mut criterion, ln_l) {
            if v < best_val {
                best_val = v;
                best_idx = i;
            }
        }
    }
    if !best_val.is_finite() {
        return Err(LmmError::NonFinite {
            lambda: f64::NAN,
            detail: "criterion non-finite over the whole scan range".into(),
        });
    }

    // Golden-section refine within the bracketing neighbours.
    let mut lo = LN_LAMBDA_LO + step * best_idx.saturating_sub(1) as f64;
    let mut hi = (LN_LAMBDA_LO + step * (best_idx + 1) as f64).min(LN_LAMBDA_HI);
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = eval_ln(&mut criterion, x1).unwrap_or(f64::INFINITY);
    let mut f2 = eval_ln(&mut criterion, x2).unwrap_or(f64::INFINITY);
    while hi - lo > GOLDEN_TOL {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = eval_ln(&mut criterion, x1).unwrap_or(f64::INFINITY);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = eval_ln(&mut criterion, x2).unwrap_or(f64::INFINITY);
        }
    }
    let ln_best = if f1 <= f2 { x1 } else { x2 };
    let interior_val = f1.min(f2);
    let boundary_val = criterion(0.0).unwrap_or(f64::INFINITY);
    if boundary_val <= interior_val {
        Ok(0.0)
    } else {
        Ok(ln_best.exp())
    }
}

/// Variance part of a fitted model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RemlFit {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub sigma2: f64,
    pub tau00: f64,
    pub lambda: f64,
    pub icc: f64,
    pub loglik_reml: f64,
}

/// Fits the variance components by profiled REML.
pub fn fit_reml(design: &LmmDesign) -> Result<RemlFit, LmmError> {
    let stats = ProfiledStats::new(design);
    let lambda = optimize_lambda(|l| {
        let gls = stats.at_lambda(l)?;
        let v = stats.reml_criterion(&gls);
        v.is_finite().then_some(v)
    })?;
    let gls = stats.at_lambda(lambda).ok_or(LmmError::NonFinite {
        lambda,
        detail: "X'V^-1 X not positive definite at the optimum".into(),
    })?;
    let df = (stats.n - stats.p) as f64;
    let sigma2 = gls.rss / df;
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(LmmError::NonFinite {
            lambda,
            detail: format!("profiled sigma2 = {sigma2}"),
        });
    }
    let tau00 = lambda * sigma2;
    let cov = gls
        .xtvinvx
        .clone()
        .cholesky()
        .ok_or(LmmError::NonFinite {
            lambda,
            detail: "covariance factorization failed".into(),
        })?
        .inverse()
        * sigma2;
    let se: Vec<f64> = (0..stats.p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    Ok(RemlFit {
        beta: gls.beta.iter().copied().collect(),
        se,
        sigma2,
        tau00,
        lambda,
        icc: tau00 / (tau00 + sigma2),
        loglik_reml: -0.5 * stats.reml_criterion(&gls),
    })
}

/// Maximum-likelihood refit: log-likelihood and BIC inputs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MlFit {
    pub loglik_ml: f64,
    pub lambda_ml: f64,
    /// Fixed effects + 2 variance parameters.
    pub k_params: usize,
    /// BIC at n = number of students (rows); fixed-effects model comparisons
    /// always use this value.
    pub bic_ml: f64,
    pub n: usize,
}

impl MlFit {
    /// BIC evaluated at an alternative sample-size convention.
    pub fn bic_with_n(&self, n: usize) -> f64 {
        -2.0 * self.loglik_ml + self.k_params as f64 * (n as f64).ln()
    }
}

pub fn fit_ml(design: &LmmDesign) -> Result<MlFit, LmmError> {
    let stats = ProfiledStats::new(design);
    let lambda = optimize_lambda(|l| {
        let gls = stats.at_lambda(l)?;
        let v = stats.ml_criterion(&gls);
        v.is_finite().then_some(v)
    })?;
    let gls = stats.at_lambda(lambda).ok_or(LmmError::NonFinite {
        lambda,
        detail: "X'V^-1 X not positive definite at the optimum".into(),
    })?;
    let loglik_ml = -0.5 * stats.ml_criterion(&gls);
    let k_params = stats.p + 2;
    let n = stats.n;
    Ok(MlFit {
        loglik_ml,
        lambda_ml: lambda,
        k_params,
        bic_ml: -2.0 * loglik_ml + k_params as f64 * (n as f64).ln(),
        n,
    })
}

/// Two-sided normal p-value for a Wald z statistic.
pub fn wald_p_value(z: f64) -> f64 {
    crate::special::normal_two_sided_p(z)
}

/// Significance stars at the conventional strict thresholds.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Nakagawa marginal and conditional R^2 from the fixed-effect predictions.
pub fn r2_nakagawa(design: &LmmDesign, beta: &[f64], tau00: f64, sigma2: f64) -> (f64, f64) {
    let beta = DVector::from_column_slice(beta);
    let fitted = &design.x * beta;
    let n = fitted.len() as f64;
    let mean = fitted.iter().sum::<f64>() / n;
    let var_fixed = fitted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let total = var_fixed + tau00 + sigma2;
    (var_fixed / total, (var_fixed + tau00) / total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    pub stars: String,
}

/// A complete fitted model: coefficients, variance components, fit indices.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LmmFit {
    pub model_name: String,
    pub response: String,
    pub coefficients: Vec<Coefficient>,
    pub sigma2: f64,
    pub tau00: f64,
    pub icc: f64,
    pub lambda: f64,
    pub r2_marginal: f64,
    pub r2_conditional: f64,
    pub loglik_reml: f64,
    pub loglik_ml: f64,
    pub bic_ml: f64,
    pub n_students: usize,
    pub n_classes: usize,
    pub encoding: EncodingReport,
    /// p-values are Wald z tests (normal reference), not finite-df
    /// approximations.
    pub p_value_method: String,
}

/// REML for variances and coefficients, ML refit for BIC, Wald tests and
/// Nakagawa R^2 on top.
pub fn fit_model(spec: &ModelSpec, rows: &[StudentRow]) -> Result<LmmFit, LmmError> {
    let design = build_design(spec, rows)?;
    let reml = fit_reml(&design)?;
    let ml = fit_ml(&design)?;
    let coefficients = design
        .column_names
        .iter()
        .zip(reml.beta.iter().zip(&reml.se))
        .map(|(name, (&estimate, &se))| {
            let z = if se > 0.0 { estimate / se } else { 0.0 };
            let p = if se > 0.0 { wald_p_value(z) } else { 1.0 };
            Coefficient {
                name: name.clone(),
                estimate,
                se,
                z,
                p_value: p,
                stars: stars(p).to_string(),
            }
        })
        .collect();
    let (r2_marginal, r2_conditional) =
        r2_nakagawa(&design, &reml.beta, reml.tau00, reml.sigma2);
    Ok(LmmFit {
        model_name: spec.name.clone(),
        response: design.response_name.clone(),
        coefficients,
        sigma2: reml.sigma2,
        tau00: reml.tau00,
        icc: reml.icc,
        lambda: reml.lambda,
        r2_marginal,
        r2_conditional,
        loglik_reml: reml.loglik_reml,
        loglik_ml: ml.loglik_ml,
        bic_ml: ml.bic_ml,
        n_students: design.n_rows(),
        n_classes: design.n_groups(),
        encoding: design.report.clone(),
        p_value_method: "wald_z".to_string(),
    })
}

/// Evidence bands for a BIC difference, after Raftery: 0-2 weak, 2-6
/// positive, 6-10 strong, above 10 very strong.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceBand {
    Weak,
    Positive,
    Strong,
    VeryStrong,
}

impl EvidenceBand {
    pub fn as_str(self) -> &'static str {
        match self {
            EvidenceBand::Weak => "weak",
            EvidenceBand::Positive => "positive",
            EvidenceBand::Strong => "strong",
            EvidenceBand::VeryStrong => "very strong",
        }
    }
}

/// Band for the absolute BIC difference in favor of the smaller-BIC model.
pub fn raftery_band(delta_bic: f64) -> EvidenceBand {
    let d = delta_bic.abs();
    if d <= 2.0 {
        EvidenceBand::Weak
    } else if d <= 6.0 {
        EvidenceBand::Positive
    } else if d <= 10.0 {
        EvidenceBand::Strong
    } else {
        EvidenceBand::VeryStrong
    }
}

/// The built-in demographic model families: each family regresses a coasting
/// response on prior achievement plus one demographic block, with a random
/// class intercept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DemographicFamily {
    GenderEthnicity,
    Frl,
    Iep,
    Ell,
    Locale,
}

impl DemographicFamily {
    pub const ALL: [DemographicFamily; 5] = [
        DemographicFamily::GenderEthnicity,
        DemographicFamily::Frl,
        DemographicFamily::Iep,
        DemographicFamily::Ell,
        DemographicFamily::Locale,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DemographicFamily::GenderEthnicity => "gender_ethnicity",
            DemographicFamily::Frl => "frl",
            DemographicFamily::Iep => "iep",
            DemographicFamily::Ell => "ell",
            DemographicFamily::Locale => "locale",
        }
    }

    fn terms(self) -> Vec<FixedTerm> {
        let fall = FixedTerm::Continuous {
            var: ContinuousVar::MapFall,
            standardize: true,
        };
        match self {
            DemographicFamily::GenderEthnicity => vec![
                fall,
                FixedTerm::Categorical(FactorVar::Gender),
                FixedTerm::Categorical(FactorVar::Ethnicity),
                FixedTerm::Interaction(FactorVar::Ethnicity, FactorVar::Gender),
            ],
            DemographicFamily::Frl => vec![fall, FixedTerm::Categorical(FactorVar::Frl)],
            DemographicFamily::Iep => vec![fall, FixedTerm::Categorical(FactorVar::Iep)],
            DemographicFamily::Ell => vec![fall, FixedTerm::Categorical(FactorVar::Ell)],
            DemographicFamily::Locale => vec![fall, FixedTerm::Categorical(FactorVar::Locale)],
        }
    }

    /// The family's model over the unadjusted or adjusted coasting response.
    pub fn spec(self, adjusted: bool) -> ModelSpec {
        let response = if adjusted {
            ContinuousVar::AdjustedCoastedProp
        } else {
            ContinuousVar::CoastedProp
        };
        ModelSpec {
            name: format!(
                "{}_{}",
                self.label(),
                if adjusted { "adjusted" } else { "unadjusted" }
            ),
            response,
            standardize_response: false,
            terms: self.terms(),
            missing_policy: MissingPolicy::DropRow,
        }
    }
}

/// The achievement pair: spring score on prior score and time on task, with
/// and without the extra-effort proportion. The BIC difference between the
/// two quantifies the evidence for extra effort.
pub fn achievement_specs() -> (ModelSpec, ModelSpec) {
    let fall = FixedTerm::Continuous {
        var: ContinuousVar::MapFall,
        standardize: true,
    };
    let on_task = FixedTerm::Continuous {
        var: ContinuousVar::TimeOnTaskProp,
        standardize: false,
    };
    let extra = FixedTerm::Continuous {
        var: ContinuousVar::ExtraEffortProp,
        standardize: false,
    };
    let base = ModelSpec {
        name: "achievement_base".to_string(),
        response: ContinuousVar::MapSpring,
        standardize_response: true,
        terms: vec![fall, on_task],
        missing_policy: MissingPolicy::DropRow,
    };
    let with_extra = ModelSpec {
        name: "achievement_extra_effort".to_string(),
        terms: vec![fall, on_task, extra],
        ..base.clone()
    };
    (base, with_extra)
}
