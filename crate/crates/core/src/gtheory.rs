//! Generalizability-theory reliability for session-level measures.
//!
//! Each classwork record contributes one observation to a two-facet random
//! design: students crossed with calendar months, with sessions as replicates
//! inside each (student, month) cell:
//!
//! ```text
//! y_jlr = mu + s_j + m_l + c_jl + e_jlr
//! s ~ (0, sigma2_student)   m ~ (0, sigma2_month)
//! c ~ (0, sigma2_interaction)   e ~ (0, sigma2_residual)
//! ```
//!
//! Components are estimated two ways: closed-form expected-mean-squares
//! identities for balanced designs, and EM-based REML for the general case.
//! Reliability coefficients follow from the components at effective facet
//! sizes `n_m` (months) and `n_s` (sessions per month):
//!
//! ```text
//! sigma2_rel = sigma2_interaction / n_m + sigma2_residual / (n_m * n_s)
//! sigma2_abs = sigma2_rel + sigma2_month / n_m
//! G   = sigma2_student / (sigma2_student + sigma2_rel)
//! phi = sigma2_student / (sigma2_student + sigma2_abs)
//! ```
//!
//! Interpretation uses Brennan's bands: G >= 0.80 strong, 0.60-0.80 moderate,
//! below 0.60 low.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::coasting::CoastingRecord;
use crate::model::{SchoolCalendar, StudentId};

#[derive(Debug, Error)]
pub enum GTheoryError {
    #[error("design is empty")]
    EmptyDesign,
    #[error("balanced ANOVA requires a balanced design (equal replicates, all cells present)")]
    Unbalanced,
    #[error("REML requires at least 2 students and 2 months, got {students} and {months}")]
    TooSmall { students: usize, months: usize },
    #[error("mixed-model equations are numerically singular")]
    Singular,
}

/// Which session-level score feeds the design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureSelector {
    DelayedStartMins,
    IdleMins,
    EarlyStopMins,
    TimeOnTaskMins,
    PropCoasted,
    PropAdjustedCoasted,
}

impl MeasureSelector {
    pub fn score(self, record: &CoastingRecord) -> f64 {
        match self {
            MeasureSelector::DelayedStartMins => record.delayed_start as f64 / 60.0,
            MeasureSelector::IdleMins => record.idle_time as f64 / 60.0,
            MeasureSelector::EarlyStopMins => record.early_stop as f64 / 60.0,
            MeasureSelector::TimeOnTaskMins => record.time_on_task as f64 / 60.0,
            MeasureSelector::PropCoasted => record.prop_coasted(),
            MeasureSelector::PropAdjustedCoasted => record.prop_adjusted_coasted(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MeasureSelector::DelayedStartMins => "delayed_start_mins",
            MeasureSelector::IdleMins => "idle_mins",
            MeasureSelector::EarlyStopMins => "early_stop_mins",
            MeasureSelector::TimeOnTaskMins => "time_on_task_mins",
            MeasureSelector::PropCoasted => "prop_coasted",
            MeasureSelector::PropAdjustedCoasted => "prop_adjusted_coasted",
        }
    }
}

/// One scored observation, indexed into the design's level tables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub student: usize,
    pub month: usize,
    pub score: f64,
}

/// A students-by-months design with session replicates.
#[derive(Clone, Debug, PartialEq)]
pub struct GDesign {
    pub student_ids: Vec<StudentId>,
    /// Month labels as `YYYY-MM` in school-local time, sorted.
    pub month_labels: Vec<String>,
    pub observations: Vec<Observation>,
    pub balanced: bool,
}

impl GDesign {
    pub fn n_students(&self) -> usize {
        self.student_ids.len()
    }

    pub fn n_months(&self) -> usize {
        self.month_labels.len()
    }

    /// Observation count per observed (student, month) cell.
    pub fn cell_counts(&self) -> BTreeMap<(usize, usize), u32> {
        let mut cells = BTreeMap::new();
        for obs in &self.observations {
            *cells.entry((obs.student, obs.month)).or_insert(0) += 1;
        }
        cells
    }

    /// Harmonic-mean effective facet sizes: months per student, and sessions
    /// per observed cell.
    pub fn effective_counts(&self) -> (f64, f64) {
        let cells = self.cell_counts();
        let mut months_per_student: BTreeMap<usize, u32> = BTreeMap::new();
        for &(student, _month) in cells.keys() {
            *months_per_student.entry(student).or_insert(0) += 1;
        }
        let harmonic = |counts: &mut dyn Iterator<Item = f64>| {
            let mut n = 0usize;
            let mut recip = 0.0;
            for c in counts {
                n += 1;
                recip += 1.0 / c;
            }
            if n == 0 {
                0.0
            } else {
                n as f64 / recip
            }
        };
        let n_m = harmonic(&mut months_per_student.values().map(|&c| c as f64));
        let n_s = harmonic(&mut cells.values().map(|&c| c as f64));
        (n_m, n_s)
    }
}

/// Builds the design from classwork records: one observation per record,
/// month = calendar month of the session start in school-local time.
/// Students observed in a single month are retained.
pub fn build_design(
    records: &[CoastingRecord],
    measure: MeasureSelector,
    calendar: &SchoolCalendar,
) -> GDesign {
    let mut students: Vec<StudentId> = records.iter().map(|r| r.student_id.clone()).collect();
    students.sort();
    students.dedup();
    let mut months: Vec<(i32, u32)> = records
        .iter()
        .map(|r| calendar.local_month(r.session_start))
        .collect();
    months.sort();
    months.dedup();

    let student_index: BTreeMap<&StudentId, usize> =
        students.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let month_index: BTreeMap<(i32, u32), usize> =
        months.iter().enumerate().map(|(i, &m)| (m, i)).collect();

    let observations: Vec<Observation> = records
        .iter()
        .map(|r| Observation {
            student: student_index[&r.student_id],
            month: month_index[&calendar.local_month(r.session_start)],
            score: measure.score(r),
        })
        .collect();

    let design = GDesign {
        student_ids: students,
        month_labels: months
            .iter()
            .map(|(y, m)| format!("{y:04}-{m:02}"))
            .collect(),
        observations,
        balanced: false,
    };
    let balanced = is_balanced(&design);
    GDesign { balanced, ..design }
}

fn is_balanced(design: &GDesign) -> bool {
    let cells = design.cell_counts();
    if cells.len() != design.n_students() * design.n_months() {
        return false;
    }
    let mut counts = cells.values();
    let first = match counts.next() {
        Some(&c) => c,
        None => return false,
    };
    counts.all(|&c| c == first)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMethod {
    AnovaBalanced,
    Reml,
}

/// Nonnegative variance-component estimates with estimation diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceComponents {
    pub student: f64,
    pub month: f64,
    pub interaction: f64,
    pub residual: f64,
    pub method: EstimationMethod,
    pub converged: bool,
    pub iterations: usize,
    /// Component names whose raw estimate was negative and truncated to 0.
    pub truncated: Vec<String>,
    /// True when single-replicate cells make interaction and residual
    /// inseparable; `residual` then carries their confounded sum.
    pub confounded_interaction_residual: bool,
}

/// Closed-form estimates from expected-mean-squares identities; balanced
/// designs only. Negative solutions truncate to 0 and are recorded.
pub fn estimate_anova_balanced(design: &GDesign) -> Result<VarianceComponents, GTheoryError> {
    if design.observations.is_empty() {
        return Err(GTheoryError::EmptyDesign);
    }
    if !is_balanced(design) {
        return Err(GTheoryError::Unbalanced);
    }
    let p = design.n_students();
    let m = design.n_months();
    let cells = design.cell_counts();
    let n = *cells.values().next().unwrap() as usize;

    let mut cell_mean = vec![vec![0.0; m]; p];
    for obs in &design.observations {
        cell_mean[obs.student][obs.month] += obs.score / n as f64;
    }
    let student_mean: Vec<f64> = cell_mean
        .iter()
        .map(|row| row.iter().sum::<f64>() / m as f64)
        .collect();
    let month_mean: Vec<f64> = (0..m)
        .map(|l| cell_mean.iter().map(|row| row[l]).sum::<f64>() / p as f64)
        .collect();
    let grand = student_mean.iter().sum::<f64>() / p as f64;

    let ss_student: f64 = student_mean.iter().map(|&v| (v - grand).powi(2)).sum::<f64>()
        * (n * m) as f64;
    let ss_month: f64 = month_mean.iter().map(|&v| (v - grand).powi(2)).sum::<f64>()
        * (n * p) as f64;
    let mut ss_interaction = 0.0;
    for (j, row) in cell_mean.iter().enumerate() {
        for (l, &cm) in row.iter().enumerate() {
            ss_interaction += (cm - student_mean[j] - month_mean[l] + grand).powi(2);
        }
    }
    ss_interaction *= n as f64;
    let mut ss_within = 0.0;
    for obs in &design.observations {
        ss_within += (obs.score - cell_mean[obs.student][obs.month]).powi(2);
    }

    let ms_student = ss_student / (p - 1).max(1) as f64;
    let ms_month = ss_month / (m - 1).max(1) as f64;
    let ms_interaction = ss_interaction / ((p - 1) * (m - 1)).max(1) as f64;

    let mut truncated = Vec::new();
    let mut clamp = |name: &str, v: f64| {
        if v < 0.0 {
            truncated.push(name.to_string());
            0.0
        } else {
            v
        }
    };

    if n == 1 {
        // No within-cell replication: interaction and residual are
        // confounded; MS_interaction estimates their sum.
        let student = clamp("student", (ms_student - ms_interaction) / m as f64);
        let month = clamp("month", (ms_month - ms_interaction) / p as f64);
        return Ok(VarianceComponents {
            student,
            month,
            interaction: 0.0,
            residual: ms_interaction,
            method: EstimationMethod::AnovaBalanced,
            converged: true,
            iterations: 0,
            truncated,
            confounded_interaction_residual: true,
        });
    }

    let ms_within = ss_within / (p * m * (n - 1)) as f64;
    let residual = ms_within;
    let interaction = clamp("interaction", (ms_interaction - ms_within) / n as f64);
    let student = clamp("student", (ms_student - ms_interaction) / (n * m) as f64);
    let month = clamp("month", (ms_month - ms_interaction) / (n * p) as f64);
    Ok(VarianceComponents {
        student,
        month,
        interaction,
        residual,
        method: EstimationMethod::AnovaBalanced,
        converged: true,
        iterations: 0,
        truncated,
        confounded_interaction_residual: false,
    })
}

/// Sufficient statistics for the mixed-model equations: observed cells only.
struct CellStats {
    student: usize,
    month: usize,
    count: f64,
    sum: f64,
}

const REML_MAX_ITER: usize = 500;
const REML_REL_TOL: f64 = 1e-8;
const VAR_FLOOR: f64 = 1e-12;

/// REML estimates via expectation-maximization over the three random factors
/// plus residual. Deterministic given the data. Interaction levels enter the
/// mixed-model equations only through a diagonal block, which is eliminated
/// by a Schur complement, so each iteration solves a
/// (1 + students + months)-dimensional system.
pub fn estimate_reml(design: &GDesign) -> Result<VarianceComponents, GTheoryError> {
    let p = design.n_students();
    let m = design.n_months();
    if p < 2 || m < 2 {
        return Err(GTheoryError::TooSmall {
            students: p,
            months: m,
        });
    }

    let n_obs = design.observations.len() as f64;
    let mut cells: BTreeMap<(usize, usize), CellStats> = BTreeMap::new();
    let mut total_sum = 0.0;
    let mut total_sq = 0.0;
    for obs in &design.observations {
        let cell = cells
            .entry((obs.student, obs.month))
            .or_insert_with(|| CellStats {
                student: obs.student,
                month: obs.month,
                count: 0.0,
                sum: 0.0,
            });
        cell.count += 1.0;
        cell.sum += obs.score;
        total_sum += obs.score;
        total_sq += obs.score * obs.score;
    }
    let cells: Vec<CellStats> = cells.into_values().collect();
    let k = cells.len();

    // Single replicate everywhere: interaction and residual are one
    // confounded component; drop the interaction factor and report the sum.
    let confounded = cells.iter().all(|c| c.count == 1.0);

    let grand_mean = total_sum / n_obs;
    let total_var = (total_sq - n_obs * grand_mean * grand_mean) / (n_obs - 1.0).max(1.0);
    if total_var <= 0.0 {
        return Ok(VarianceComponents {
            student: 0.0,
            month: 0.0,
            interaction: 0.0,
            residual: 0.0,
            method: EstimationMethod::Reml,
            converged: true,
            iterations: 0,
            truncated: Vec::new(),
            confounded_interaction_residual: confounded,
        });
    }

    // Fixed parts of the reduced coefficient matrix S (before the Schur
    // correction): order [mu, students.., months..].
    let dim = 1 + p + m;
    let mut student_count = vec![0.0; p];
    let mut month_count = vec![0.0; m];
    let mut student_sum = vec![0.0; p];
    let mut month_sum = vec![0.0; m];
    for cell in &cells {
        student_count[cell.student] += cell.count;
        month_count[cell.month] += cell.count;
        student_sum[cell.student] += cell.sum;
        month_sum[cell.month] += cell.sum;
    }

    let init = total_var / 4.0;
    let mut sigma = [init, init, init, init]; // student, month, interaction, residual
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..REML_MAX_ITER {
        iterations = iter + 1;
        let lambda_s = sigma[3] / sigma[0].max(VAR_FLOOR);
        let lambda_m = sigma[3] / sigma[1].max(VAR_FLOOR);
        let lambda_c = sigma[3] / sigma[2].max(VAR_FLOOR);

        let mut s_mat = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        s_mat[(0, 0)] = n_obs;
        rhs[0] = total_sum;
        for j in 0..p {
            s_mat[(1 + j, 1 + j)] = student_count[j] + lambda_s;
            s_mat[(0, 1 + j)] = student_count[j];
            s_mat[(1 + j, 0)] = student_count[j];
            rhs[1 + j] = student_sum[j];
        }
        for l in 0..m {
            let idx = 1 + p + l;
            s_mat[(idx, idx)] = month_count[l] + lambda_m;
            s_mat[(0, idx)] = month_count[l];
            s_mat[(idx, 0)] = month_count[l];
            rhs[idx] = month_sum[l];
        }
        for cell in &cells {
            let sj = 1 + cell.student;
            let ml = 1 + p + cell.month;
            s_mat[(sj, ml)] += cell.count;
            s_mat[(ml, sj)] += cell.count;
        }

        // Schur elimination of the diagonal interaction block:
        // S -= B D^-1 B^T, rhs -= B D^-1 t, with column b_k supported on
        // {mu, student(k), month(k)} and d_k = n_k + lambda_c.
        if !confounded {
            for cell in &cells {
                let d = cell.count + lambda_c;
                let w = cell.count * cell.count / d;
                let idx = [0, 1 + cell.student, 1 + p + cell.month];
                for a in idx {
                    for b in idx {
                        s_mat[(a, b)] -= w;
                    }
                    rhs[a] -= cell.count * cell.sum / d;
                }
            }
        }

        let chol = Cholesky::new(s_mat).ok_or(GTheoryError::Singular)?;
        let solution = chol.solve(&rhs);
        let s_inv = chol.inverse();

        let u_student = solution.rows(1, p);
        let u_month = solution.rows(1 + p, m);

        // Interaction BLUPs recovered from the eliminated block.
        let mut u_cell_sq = 0.0;
        let mut trace_cell = 0.0;
        let mut u_cell: Vec<f64> = Vec::with_capacity(k);
        if !confounded {
            for cell in &cells {
                let d = cell.count + lambda_c;
                let idx = [0, 1 + cell.student, 1 + p + cell.month];
                let bx: f64 = idx.iter().map(|&i| cell.count * solution[i]).sum();
                let u = (cell.sum - bx) / d;
                u_cell_sq += u * u;
                u_cell.push(u);
                let mut quad = 0.0;
                for a in idx {
                    for b in idx {
                        quad += s_inv[(a, b)];
                    }
                }
                trace_cell += 1.0 / d + cell.count * cell.count * quad / (d * d);
            }
        }

        let trace_student: f64 = (0..p).map(|j| s_inv[(1 + j, 1 + j)]).sum();
        let trace_month: f64 = (0..m).map(|l| s_inv[(1 + p + l, 1 + p + l)]).sum();

        // Residual update: sigma2_e = y'(y - X beta - Z u) / (N - rank X).
        let mut fitted_dot = solution[0] * total_sum;
        for j in 0..p {
            fitted_dot += u_student[j] * student_sum[j];
        }
        for l in 0..m {
            fitted_dot += u_month[l] * month_sum[l];
        }
        if !confounded {
            for (cell, u) in cells.iter().zip(&u_cell) {
                fitted_dot += u * cell.sum;
            }
        }
        let new_residual = ((total_sq - fitted_dot) / (n_obs - 1.0)).max(VAR_FLOOR);

        let u_student_sq: f64 = u_student.iter().map(|v| v * v).sum();
        let u_month_sq: f64 = u_month.iter().map(|v| v * v).sum();
        let new_student = ((u_student_sq + sigma[3] * trace_student) / p as f64).max(VAR_FLOOR);
        let new_month = ((u_month_sq + sigma[3] * trace_month) / m as f64).max(VAR_FLOOR);
        let new_interaction = if confounded {
            0.0
        } else {
            ((u_cell_sq + sigma[3] * trace_cell) / k as f64).max(VAR_FLOOR)
        };

        let new_sigma = [new_student, new_month, new_interaction, new_residual];
        let rel_change = sigma
            .iter()
            .zip(&new_sigma)
            .map(|(&old, &new)| (new - old).abs() / old.max(VAR_FLOOR))
            .fold(0.0_f64, f64::max);
        sigma = new_sigma;
        if rel_change < REML_REL_TOL {
            converged = true;
            break;
        }
    }

    let snap = |v: f64| if v <= VAR_FLOOR * 2.0 { 0.0 } else { v };
    Ok(VarianceComponents {
        student: snap(sigma[0]),
        month: snap(sigma[1]),
        interaction: if confounded { 0.0 } else { snap(sigma[2]) },
        residual: snap(sigma[3]),
        method: EstimationMethod::Reml,
        converged,
        iterations,
        truncated: Vec::new(),
        confounded_interaction_residual: confounded,
    })
}

/// Convenience pipeline: builds the design for one measure, fits REML, and
/// evaluates the coefficients at the design's harmonic-mean facet sizes.
pub fn run_gstudy(
    records: &[CoastingRecord],
    measure: MeasureSelector,
    calendar: &SchoolCalendar,
) -> Result<(VarianceComponents, GStudyResult), GTheoryError> {
    let design = build_design(records, measure, calendar);
    if design.observations.is_empty() {
        return Err(GTheoryError::EmptyDesign);
    }
    let components = estimate_reml(&design)?;
    let (n_m, n_s) = design.effective_counts();
    let result = g_coefficients(&components, n_m.max(1.0), n_s.max(1.0));
    Ok((components, result))
}

/// Brennan's interpretation bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityBand {
    Strong,
    Moderate,
    Low,
}

impl ReliabilityBand {
    pub fn from_coefficient(g: f64) -> Self {
        if g >= 0.80 {
            ReliabilityBand::Strong
        } else if g >= 0.60 {
            ReliabilityBand::Moderate
        } else {
            ReliabilityBand::Low
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReliabilityBand::Strong => "strong",
            ReliabilityBand::Moderate => "moderate",
            ReliabilityBand::Low => "low",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GStudyResult {
    pub g: f64,
    pub phi: f64,
    pub n_months_effective: f64,
    pub n_sessions_effective: f64,
    pub interpretation: ReliabilityBand,
    /// True when both student and error variance were zero and G defaulted
    /// to 0 (0/0 guard).
    pub degenerate: bool,
}

/// Evaluates the G and phi coefficients at the given effective facet sizes.
pub fn g_coefficients(
    components: &VarianceComponents,
    n_months_effective: f64,
    n_sessions_effective: f64,
) -> GStudyResult {
    assert!(n_months_effective > 0.0 && n_sessions_effective > 0.0);
    let relative = components.interaction / n_months_effective
        + components.residual / (n_months_effective * n_sessions_effective);
    let absolute = relative + components.month / n_months_effective;
    let ratio = |err: f64| {
        if components.student == 0.0 && err == 0.0 {
            None
        } else {
            Some(components.student / (components.student + err))
        }
    };
    let (g, phi, degenerate) = match (ratio(relative), ratio(absolute)) {
        (Some(g), Some(phi)) => (g, phi, false),
        _ => (0.0, 0.0, true),
    };
    GStudyResult {
        g,
        phi,
        n_months_effective,
        n_sessions_effective,
        interpretation: ReliabilityBand::from_coefficient(g),
        degenerate,
    }
}
