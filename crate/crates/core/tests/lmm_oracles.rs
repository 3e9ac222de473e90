//! Oracle checks for the mixed-model engine. The profiled fit is compared
//! against an independent dense-algebra grid search over the variance ratio,
//! ordinary least squares at the boundary, a quadrature oracle for normal
//! p-values, and brute-force design encoding.

use coasting_core::lmm::{
    build_design, fit_ml, fit_model, fit_reml, wald_p_value, ContinuousVar, FactorVar, FixedTerm,
    LmmDesign, MissingPolicy, ModelSpec,
};
use coasting_core::model::{Ethnicity, Gender, Locale, TriState};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn blank_row(id: &str, class: &str) -> coasting_core::lmm::StudentRow {
    coasting_core::lmm::StudentRow {
        student_id: id.into(),
        class_id: class.into(),
        n_classwork_sessions: 1,
        coasted_prop: 0.0,
        adjusted_coasted_prop: 0.0,
        time_on_task_prop: 0.0,
        extra_effort_prop: 0.0,
        gender: Gender::Female,
        ethnicity: Ethnicity::White,
        frl: TriState::No,
        iep: TriState::No,
        ell: TriState::No,
        locale: Locale::Urban,
        map_fall: Some(0.0),
        map_spring: None,
    }
}

/// Rows for `y = 0.5 + 0.8 x1 - 0.3 x2 + u_class + e`, with x1 in map_fall,
/// x2 in time_on_task_prop, and y in coasted_prop.
fn synthetic_rows(
    seed: u64,
    n_classes: usize,
    per_class: usize,
    tau00: f64,
    sigma2: f64,
) -> Vec<coasting_core::lmm::StudentRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    for c in 0..n_classes {
        let u = norm.sample(&mut rng) * tau00.sqrt();
        for i in 0..per_class {
            let x1 = norm.sample(&mut rng);
            let x2 = norm.sample(&mut rng);
            let y = 0.5 + 0.8 * x1 - 0.3 * x2 + u + norm.sample(&mut rng) * sigma2.sqrt();
            let mut row = blank_row(&format!("s{c:02}_{i:02}"), &format!("c{c:02}"));
            row.map_fall = Some(x1);
            row.time_on_task_prop = x2;
            row.coasted_prop = y;
            rows.push(row);
        }
    }
    rows
}

fn synthetic_spec() -> ModelSpec {
    ModelSpec {
        name: "synthetic".into(),
        response: ContinuousVar::CoastedProp,
        standardize_response: false,
        terms: vec![
            FixedTerm::Continuous {
                var: ContinuousVar::MapFall,
                standardize: false,
            },
            FixedTerm::Continuous {
                var: ContinuousVar::TimeOnTaskProp,
                standardize: false,
            },
        ],
        missing_policy: MissingPolicy::DropRow,
    }
}

/// Independent evaluation of the -2 restricted log-likelihood at one lambda
/// using dense per-group covariance factorizations (no shrinkage identities).
fn dense_reml_criterion(design: &LmmDesign, lambda: f64) -> f64 {
    let n = design.n_rows();
    let p = design.n_fixed();
    let n_groups = design.n_groups();
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in design.groups.iter().enumerate() {
        rows_of[g].push(i);
    }
    let mut xtvinvx = DMatrix::<f64>::zeros(p, p);
    let mut xtvinvy = DVector::<f64>::zeros(p);
    let mut yvinvy = 0.0;
    let mut logdet_v = 0.0;
    for rows in &rows_of {
        let ng = rows.len();
        let mut v = DMatrix::<f64>::from_element(ng, ng, lambda);
        for i in 0..ng {
            v[(i, i)] += 1.0;
        }
        let mut xg = DMatrix::<f64>::zeros(ng, p);
        let mut yg = DVector::<f64>::zeros(ng);
        for (a, &i) in rows.iter().enumerate() {
            for j in 0..p {
                xg[(a, j)] = design.x[(i, j)];
            }
            yg[a] = design.y[i];
        }
        let chol = v.cholesky().expect("per-group V is SPD");
        logdet_v += 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let vinv_x = chol.solve(&xg);
        let vinv_y = chol.solve(&yg);
        xtvinvx += xg.transpose() * &vinv_x;
        xtvinvy += xg.transpose() * &vinv_y;
        yvinvy += yg.dot(&vinv_y);
    }
    let chol_a = xtvinvx.clone().cholesky().expect("X'V^-1X SPD");
    let beta = chol_a.solve(&xtvinvy);
    let rss = yvinvy - beta.dot(&xtvinvy);
    let logdet_a = 2.0 * chol_a.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let df = (n - p) as f64;
    let sigma2 = rss / df;
    df * (2.0 * std::f64::consts::PI * sigma2).ln() + logdet_v + logdet_a + df
}

#[test]
fn profiled_optimum_matches_dense_grid_search() {
    let rows = synthetic_rows(42, 20, 20, 0.04, 0.09);
    let spec = synthetic_spec();
    let design = build_design(&spec, &rows).unwrap();
    let fit = fit_reml(&design).unwrap();

    let lo = -20.0_f64;
    let hi = 10.0_f64;
    let points = 10_001;
    let step = (hi - lo) / (points - 1) as f64;
    let mut best_ln = lo;
    let mut best_val = f64::INFINITY;
    for i in 0..points {
        let ln_l = lo + step * i as f64;
        let v = dense_reml_criterion(&design, ln_l.exp());
        if v < best_val {
            best_val = v;
            best_ln = ln_l;
        }
    }
    assert!(
        fit.lambda > 0.0,
        "interior optimum expected for tau00 > 0 data"
    );
    assert!(
        (fit.lambda.ln() - best_ln).abs() <= step,
        "ln lambda {} vs grid argmin {} (step {step})",
        fit.lambda.ln(),
        best_ln
    );
    // The returned optimum is at least as good as every grid point.
    assert!(fit.loglik_reml >= -0.5 * best_val - 1e-9);

    // Recovered parameters are in the right neighbourhood.
    assert!((fit.beta[1] - 0.8).abs() < 0.05);
    assert!((fit.beta[2] + 0.3).abs() < 0.05);
}

#[test]
fn zero_tau_data_reduces_to_ols() {
    let rows = synthetic_rows(7, 20, 20, 0.0, 0.09);
    let spec = synthetic_spec();
    let design = build_design(&spec, &rows).unwrap();
    let fit = fit_reml(&design).unwrap();
    assert!(fit.tau00 < 1e-6, "tau00 = {}", fit.tau00);

    let xtx = design.x.transpose() * &design.x;
    let xty = design.x.transpose() * &design.y;
    let ols = xtx.cholesky().unwrap().solve(&xty);
    for (b, o) in fit.beta.iter().zip(ols.iter()) {
        assert!((b - o).abs() < 1e-8, "beta {b} vs OLS {o}");
    }
}

/// Adaptive Simpson integration of the standard normal density.
fn simpson_phi(a: f64, b: f64, tol: f64) -> f64 {
    fn pdf(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }
    fn simpson(a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (pdf(a) + 4.0 * pdf(0.5 * (a + b)) + pdf(b))
    }
    fn recurse(a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(a, m);
        let right = simpson(m, b);
        if depth > 40 || (left + right - whole).abs() < 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(a, m, left, tol / 2.0, depth + 1) + recurse(m, b, right, tol / 2.0, depth + 1)
        }
    }
    recurse(a, b, simpson(a, b), tol, 0)
}

#[test]
fn wald_p_values_match_quadrature_oracle() {
    for &z in &[0.0, 0.31, 0.5, 1.0, 1.644, 1.96, 2.576, 3.29, 4.0, 5.0, 6.0] {
        let oracle = 1.0 - 2.0 * simpson_phi(0.0, z, 1e-16);
        let got = wald_p_value(z);
        assert!(
            (got - oracle).abs() < 1e-12,
            "z={z}: p={got}, oracle={oracle}, diff={:e}",
            (got - oracle).abs()
        );
    }
}

#[test]
fn encoding_matches_brute_force_one_hot() {
    let mut rows = Vec::new();
    let genders = [Gender::Female, Gender::Male];
    let ethnicities = [
        Ethnicity::White,
        Ethnicity::AfricanAmerican,
        Ethnicity::Hispanic,
        Ethnicity::Other,
    ];
    let mut k = 0;
    for &g in &genders {
        for &e in &ethnicities {
            for c in 0..3 {
                let mut row = blank_row(&format!("s{k:02}"), &format!("c{c}"));
                row.gender = g;
                row.ethnicity = e;
                row.coasted_prop = 0.1 * k as f64;
                rows.push(row);
                k += 1;
            }
        }
    }
    let spec = ModelSpec {
        name: "enc".into(),
        response: ContinuousVar::CoastedProp,
        standardize_response: false,
        terms: vec![
            FixedTerm::Categorical(FactorVar::Gender),
            FixedTerm::Categorical(FactorVar::Ethnicity),
            FixedTerm::Interaction(FactorVar::Ethnicity, FactorVar::Gender),
        ],
        missing_policy: MissingPolicy::DropRow,
    };
    let design = build_design(&spec, &rows).unwrap();

    // Brute force: one-hot every non-reference level by direct comparison.
    let eth_levels = ["african_american", "hispanic", "other"];
    let eth_of = |e: Ethnicity| match e {
        Ethnicity::AfricanAmerican => "african_american",
        Ethnicity::Hispanic => "hispanic",
        Ethnicity::Other => "other",
        _ => "white",
    };
    for (i, row) in rows.iter().enumerate() {
        let male = if row.gender == Gender::Male { 1.0 } else { 0.0 };
        let mut expected = vec![1.0, male];
        for lev in eth_levels {
            expected.push(if eth_of(row.ethnicity) == lev { 1.0 } else { 0.0 });
        }
        for lev in eth_levels {
            expected.push(if eth_of(row.ethnicity) == lev { male } else { 0.0 });
        }
        for (j, &want) in expected.iter().enumerate() {
            assert_eq!(design.x[(i, j)], want, "row {i}, column {j}");
        }
    }
}

#[test]
fn adding_constant_shifts_only_intercept() {
    let rows = synthetic_rows(13, 15, 12, 0.05, 0.1);
    let spec = synthetic_spec();
    let base = fit_model(&spec, &rows).unwrap();

    let mut shifted_rows = rows.clone();
    for row in &mut shifted_rows {
        row.coasted_prop += 10.0;
    }
    let shifted = fit_model(&spec, &shifted_rows).unwrap();

    assert!(
        (shifted.coefficients[0].estimate - base.coefficients[0].estimate - 10.0).abs() < 1e-7
    );
    for j in 1..base.coefficients.len() {
        assert!(
            (shifted.coefficients[j].estimate - base.coefficients[j].estimate).abs() < 1e-8
        );
    }
    // The optimizer can land a hair apart on the two (analytically
    // identical) criterion surfaces; variances agree to optimizer noise.
    assert!((shifted.sigma2 - base.sigma2).abs() < 1e-6);
    assert!((shifted.tau00 - base.tau00).abs() < 1e-6);
}

#[test]
fn row_order_and_class_labels_do_not_matter() {
    let rows = synthetic_rows(99, 12, 14, 0.03, 0.08);
    let spec = synthetic_spec();
    let base = fit_model(&spec, &rows).unwrap();

    // Reverse row order and relabel classes so their sort order flips.
    let mut relabeled: Vec<_> = rows
        .iter()
        .rev()
        .cloned()
        .map(|mut r| {
            r.class_id = format!("z{}", r.class_id.as_str()).as_str().into();
            r
        })
        .collect();
    relabeled.sort_by(|a, b| a.student_id.cmp(&b.student_id));
    let refit = fit_model(&spec, &relabeled).unwrap();

    for (a, b) in base.coefficients.iter().zip(&refit.coefficients) {
        assert!((a.estimate - b.estimate).abs() < 1e-10);
        assert!((a.se - b.se).abs() < 1e-10);
    }
    assert!((base.tau00 - refit.tau00).abs() < 1e-10);
    assert!((base.loglik_reml - refit.loglik_reml).abs() < 1e-9);
}

#[test]
fn zero_effect_covariate_pays_the_bic_penalty() {
    // x2 has no effect here; the richer model should lose on BIC and the
    // gap should be in the ln(n) ballpark.
    let mut rows = synthetic_rows(21, 30, 30, 0.04, 0.09);
    for row in &mut rows {
        // Rebuild y without the x2 effect.
        let x2 = row.time_on_task_prop;
        row.coasted_prop += 0.3 * x2;
    }
    let with_both = synthetic_spec();
    let only_x1 = ModelSpec {
        name: "reduced".into(),
        terms: vec![FixedTerm::Continuous {
            var: ContinuousVar::MapFall,
            standardize: false,
        }],
        ..with_both.clone()
    };
    let design_full = build_design(&with_both, &rows).unwrap();
    let design_reduced = build_design(&only_x1, &rows).unwrap();
    let bic_full = fit_ml(&design_full).unwrap().bic_ml;
    let bic_reduced = fit_ml(&design_reduced).unwrap().bic_ml;
    let n = design_full.n_rows() as f64;
    let delta = bic_full - bic_reduced;
    assert!(delta > 0.0, "useless covariate should raise BIC, delta={delta}");
    assert!(delta < 2.0 * n.ln(), "penalty should be on the ln(n) scale");
}

#[test]
fn marginal_r2_recovers_variance_share_of_dominant_fixed_effect() {
    // y = 2 x + u + e, var(x)=1 -> marginal share 4 / (4 + tau + sigma).
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let norm = Normal::new(0.0, 1.0).unwrap();
    let (tau00, sigma2): (f64, f64) = (0.04, 0.09);
    let mut rows = Vec::new();
    for c in 0..25 {
        let u = norm.sample(&mut rng) * tau00.sqrt();
        for i in 0..25 {
            let x = norm.sample(&mut rng);
            let mut row = blank_row(&format!("s{c:02}_{i:02}"), &format!("c{c:02}"));
            row.map_fall = Some(x);
            row.coasted_prop = 2.0 * x + u + norm.sample(&mut rng) * sigma2.sqrt();
            rows.push(row);
        }
    }
    let spec = ModelSpec {
        name: "dominant".into(),
        response: ContinuousVar::CoastedProp,
        standardize_response: false,
        terms: vec![FixedTerm::Continuous {
            var: ContinuousVar::MapFall,
            standardize: false,
        }],
        missing_policy: MissingPolicy::DropRow,
    };
    let fit = fit_model(&spec, &rows).unwrap();
    let truth = 4.0 / (4.0 + tau00 + sigma2);
    assert!(
        (fit.r2_marginal - truth).abs() < 0.02,
        "marginal {} vs truth {}",
        fit.r2_marginal,
        truth
    );
    assert!(fit.r2_conditional >= fit.r2_marginal);
}
