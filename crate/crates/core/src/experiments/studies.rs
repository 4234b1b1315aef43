use std::time::Instant;

use serde_json::json;

use super::stats::{loglog_fit, mean_stderr};
use super::{ExperimentResult, GridPoint};
use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::multiscale::ergodicity::fit_exponential;
use crate::multiscale::{
    ergodicity_decay, simulate_auxiliary, simulate_slow_fast, strong_error, time_integrated_gap,
    time_integrated_increment, AveragedDrift, BlockSnapshots, ErgodicSettings, FrozenInput,
    MultiscaleConfig,
};
use crate::noise::derive_seed;
use crate::solver::{picard_law_iteration, SimConfig};

/// Relative tolerance on the ratio of consecutive grid values.
const GEOMETRIC_TOL: f64 = 1e-6;

fn check_geometric(name: &'static str, grid: &[f64], min_len: usize) -> Result<()> {
    if grid.len() < min_len {
        return Err(Error::range(name, format!("need at least {min_len} points, got {}", grid.len())));
    }
    if grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::range(name, "grid values must be positive"));
    }
    if grid.len() >= 2 {
        let r = grid[1] / grid[0];
        if (r - 1.0).abs() < GEOMETRIC_TOL
            || grid.windows(2).any(|w| ((w[1] / w[0]) / r - 1.0).abs() > GEOMETRIC_TOL)
        {
            return Err(Error::range(name, "grid must be geometric with a ratio other than 1"));
        }
    }
    Ok(())
}

/// Excludes points within three standard errors of zero (the error of a
/// coupling with itself) or at round-off, then fits the log-log slope.
fn fit_above_floor(result: &mut ExperimentResult) {
    let scale = result.grid.iter().map(|g| g.error).fold(0.0, f64::max);
    let round_off = 1e-12 * (1.0 + scale);
    result.excluded = result
        .grid
        .iter()
        .enumerate()
        .filter(|(_, g)| g.error <= 3.0 * g.stderr || g.error <= round_off)
        .map(|(i, _)| i)
        .collect();
    for &i in &result.excluded {
        result.flags.push(format!(
            "noise floor at param = {}: error {:.3e} within 3 stderr of zero",
            result.grid[i].param, result.grid[i].error
        ));
    }
    let kept: Vec<&GridPoint> = result
        .grid
        .iter()
        .enumerate()
        .filter(|(i, _)| !result.excluded.contains(i))
        .map(|(_, g)| g)
        .collect();
    if kept.len() < 3 {
        result.flags.push("degenerate: fewer than three points above the noise floor; no slope fitted".into());
        return;
    }
    let ps: Vec<f64> = kept.iter().map(|g| g.param).collect();
    let es: Vec<f64> = kept.iter().map(|g| g.error).collect();
    let ss: Vec<f64> = kept.iter().map(|g| g.stderr).collect();
    match loglog_fit(&ps, &es, &ss) {
        Some(fit) => {
            result.fitted_slope = Some(fit.slope);
            result.slope_stderr = Some(fit.slope_stderr);
            result.fit_r2 = Some(fit.r2);
            if let Some(reference) = result.reference_slope {
                if fit.slope > reference + 0.1 {
                    result.flags.push(format!(
                        "above envelope: slope {:.3} exceeds the upper-bound exponent {:.3}",
                        fit.slope, reference
                    ));
                }
            }
        }
        None => result.flags.push("degenerate: log-log fit failed".into()),
    }
}

fn describe(cfg: &MultiscaleConfig) -> serde_json::Value {
    json!({
        "n_modes": cfg.base.spec.n_modes,
        "alpha": cfg.base.spec.alpha,
        "theta": cfg.base.spec.theta,
        "T": cfg.base.t_end,
        "h": cfg.base.h,
        "M": cfg.base.m,
        "seed": cfg.base.seed,
        "epsilon": cfg.epsilon,
        "h_fast": cfg.h_fast,
    })
}

/// Inputs of the strong averaging rate study.
#[derive(Clone, Debug)]
pub struct RateStudy {
    /// Template run; `epsilon`, `h_fast`, `delta` and the seed are set per point.
    pub template: MultiscaleConfig,
    pub eps_grid: Vec<f64>,
    /// Moment of the error norm.
    pub m: f64,
    /// `h_fast = eps / fast_steps_per_eps`; at least 10.
    pub fast_steps_per_eps: usize,
}

impl RateStudy {
    pub fn new(template: MultiscaleConfig, eps_grid: Vec<f64>, m: f64) -> Self {
        RateStudy {
            template,
            eps_grid,
            m,
            fast_steps_per_eps: 10,
        }
    }
}

/// Strong error for each `eps` with `delta = eps^{1/(1+theta)}`; point `i`
/// uses the seed `derive_seed(master, i)`.
pub fn rate_study(study: &RateStudy) -> Result<ExperimentResult> {
    let start = Instant::now();
    check_geometric("eps_grid", &study.eps_grid, 4)?;
    if study.fast_steps_per_eps < 10 {
        return Err(Error::range("fast_steps_per_eps", "at least 10 fine steps per eps are required"));
    }
    let base = &study.template.base;
    if !base.coeffs.f_bounded() {
        return Err(Error::Assumption {
            id: "B3",
            detail: "F has no declared bound; the rate study needs a bounded slow drift".into(),
        });
    }
    let drift = AveragedDrift::best_available(
        &base.spec,
        &base.coeffs,
        ErgodicSettings {
            seed: base.seed,
            ..ErgodicSettings::default()
        },
    )?;
    let theta = base.spec.theta;
    let mut result = ExperimentResult::new("rate");
    result.reference_slope = Some(theta / (2.0 * (1.0 + theta)));
    let mut deltas = Vec::new();
    for (i, &eps) in study.eps_grid.iter().enumerate() {
        let mut cfg = study.template.clone();
        cfg.epsilon = eps;
        cfg.h_fast = eps / study.fast_steps_per_eps as f64;
        cfg.delta = None;
        cfg.base.seed = derive_seed(base.seed, i as u64);
        cfg.check()?;
        let err = strong_error(&cfg, &drift, study.m)?;
        result.seeds.push(cfg.base.seed);
        deltas.push(cfg.delta());
        result.grid.push(GridPoint {
            param: eps,
            error: err.value,
            stderr: err.stderr,
        });
    }
    result.series.insert("delta".into(), deltas);
    fit_above_floor(&mut result);
    let mut by_eps: Vec<&GridPoint> = result
        .grid
        .iter()
        .enumerate()
        .filter(|(i, _)| !result.excluded.contains(i))
        .map(|(_, g)| g)
        .collect();
    by_eps.sort_by(|a, b| b.param.total_cmp(&a.param));
    if by_eps.windows(2).any(|w| !(w[1].error < w[0].error)) {
        result.flags.push("non-monotone: errors do not decrease strictly with eps".into());
    }
    let mut config = describe(&study.template);
    config["eps_grid"] = json!(study.eps_grid);
    config["m"] = json!(study.m);
    config["fast_steps_per_eps"] = json!(study.fast_steps_per_eps);
    config["fbar"] = json!(drift.mode_name());
    result = result.with_config(config);
    result.runtime_s = start.elapsed().as_secs_f64();
    Ok(result)
}

/// `(1/T) int_0^T E|X_t - X_{t(delta)}| dt` along one slow-fast run for each `delta`.
pub fn hoelder_study(cfg: &MultiscaleConfig, delta_grid: &[f64]) -> Result<ExperimentResult> {
    let start = Instant::now();
    check_geometric("delta_grid", delta_grid, 1)?;
    cfg.check()?;
    let run = simulate_slow_fast(cfg)?;
    let mut result = ExperimentResult::new("hoelder");
    result.reference_slope = Some(cfg.base.spec.theta / 2.0);
    for &delta in delta_grid {
        let (error, stderr) = time_integrated_increment(&run.slow, delta)?;
        result.grid.push(GridPoint { param: delta, error, stderr });
    }
    result.seeds.push(cfg.base.seed);
    fit_above_floor(&mut result);
    let mut config = describe(cfg);
    config["delta_grid"] = json!(delta_grid);
    result = result.with_config(config);
    result.runtime_s = start.elapsed().as_secs_f64();
    Ok(result)
}

/// `(1/T) int_0^T E|Y_t - Y_hat_t| dt` between the fast component and the
/// auxiliary process with inputs frozen on blocks of length `delta`.
pub fn auxiliary_gap_study(cfg: &MultiscaleConfig, delta_grid: &[f64]) -> Result<ExperimentResult> {
    let start = Instant::now();
    check_geometric("delta_grid", delta_grid, 1)?;
    cfg.check()?;
    let run = simulate_slow_fast(cfg)?;
    let mut result = ExperimentResult::new("auxiliary_gap");
    result.reference_slope = Some(cfg.base.spec.theta / 2.0);
    for &delta in delta_grid {
        let mut c = cfg.clone();
        c.delta = Some(delta);
        let snapshots = BlockSnapshots::from_slow(&run.slow, &c)?;
        let aux = simulate_auxiliary(&c, &snapshots)?;
        let (error, stderr) = time_integrated_gap(&run.fast, &aux)?;
        result.grid.push(GridPoint { param: delta, error, stderr });
    }
    result.seeds.push(cfg.base.seed);
    fit_above_floor(&mut result);
    let mut config = describe(cfg);
    config["delta_grid"] = json!(delta_grid);
    result = result.with_config(config);
    result.runtime_s = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Decay of `|E F(x, mu, Y_t^y) - F_bar(x, mu)|` over a grid of inputs.
///
/// Each curve is normalized by `1 + |x| + mu_stat + |y|`; the grid holds the
/// mean normalized curve and `fitted_slope` its exponential rate, to be read
/// against `lambda_1 - L_G`. Input `i` uses the seed `derive_seed(seed, i)`.
pub fn ergodicity_study(
    inputs: &[FrozenInput],
    drift: &AveragedDrift,
    coeffs: &CoefficientSet,
    t_grid: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<ExperimentResult> {
    let start = Instant::now();
    if inputs.is_empty() {
        return Err(Error::range("inputs", "need at least one frozen input"));
    }
    let mut result = ExperimentResult::new("ergodicity");
    let mut sums = vec![0.0; t_grid.len()];
    let mut vars = vec![0.0; t_grid.len()];
    let mut rates = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let s = derive_seed(seed, i as u64);
        let report = ergodicity_decay(input, drift, coeffs, t_grid, replicas, s)?;
        let scale = 1.0 + input.x.norm() + input.mu_stat + input.y0.norm();
        for j in 0..t_grid.len() {
            sums[j] += report.gap_values[j] / scale;
            vars[j] += (report.stderrs[j] / scale).powi(2);
        }
        match report.fitted_rate {
            Some(r) => rates.push(r),
            None => result.flags.push(format!("input {i}: no signal, rate fit rejected")),
        }
        result.reference_slope = Some(report.theoretical_rate);
        result.seeds.push(s);
    }
    let n = inputs.len() as f64;
    result.grid = t_grid
        .iter()
        .zip(sums.iter().zip(&vars))
        .map(|(&t, (s, v))| GridPoint {
            param: t,
            error: s / n,
            stderr: v.sqrt() / n,
        })
        .collect();
    let errors = result.errors();
    let stderrs: Vec<f64> = result.grid.iter().map(|g| g.stderr).collect();
    match fit_exponential(t_grid, &errors, &stderrs) {
        Some(fit) => {
            result.fitted_slope = Some(fit.rate);
            result.slope_stderr = Some(fit.rate_stderr);
        }
        None => result.flags.push("no signal: pooled curve has fewer than three points above 3 stderr".into()),
    }
    result.series.insert("input_rates".into(), rates);
    result = result.with_config(json!({
        "n_modes": drift.spec().n_modes,
        "t_grid": t_grid,
        "replicas": replicas,
        "seed": seed,
        "inputs": inputs,
        "fbar": drift.mode_name(),
    }));
    result.runtime_s = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Picard law iteration; the grid lists `(n, d_n, 0)` and `series["ratios"]`
/// the successive ratios. No slope is fitted.
pub fn picard_study(cfg: &SimConfig, n_iters: usize, lambda_weight: Option<f64>) -> Result<ExperimentResult> {
    let start = Instant::now();
    let report = picard_law_iteration(cfg, n_iters, lambda_weight)?;
    let mut result = ExperimentResult::new("picard");
    result.grid = report
        .d
        .iter()
        .enumerate()
        .map(|(n, &d)| GridPoint {
            param: n as f64,
            error: d,
            stderr: 0.0,
        })
        .collect();
    result.series.insert("ratios".into(), report.ratios.clone());
    if let Some(f) = report.floor_index {
        result.excluded = (f..report.d.len()).collect();
        result.series.insert("floor_index".into(), vec![f as f64]);
    }
    result.flags = report.warnings.clone();
    let before = report.ratios_before_floor();
    if before.iter().any(|r| *r >= 1.0) {
        result.flags.push("no contraction: some ratio before the floor is >= 1".into());
    }
    result.seeds.push(cfg.seed);
    let (mean_ratio, _) = mean_stderr(before);
    if !before.is_empty() {
        result.series.insert("mean_ratio".into(), vec![mean_ratio]);
    }
    result = result.with_config(json!({
        "n_modes": cfg.spec.n_modes,
        "T": cfg.t_end,
        "h": cfg.h,
        "M": cfg.m,
        "seed": cfg.seed,
        "n_iters": n_iters,
        "lambda_weight": report.lambda_weight,
    }));
    result.runtime_s = start.elapsed().as_secs_f64();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{BuiltinFamily, CoefficientSet};
    use crate::multiscale::tests::ms_cfg;
    use crate::spectral::SpectralField;
    use crate::spectral::tests::spec;

    #[test]
    fn grid_checks() {
        assert!(check_geometric("g", &[0.5, 0.25, 0.125, 0.0625], 4).is_ok());
        assert!(check_geometric("g", &[0.5, 0.25, 0.125], 4).is_err());
        assert!(check_geometric("g", &[0.5, 0.25, 0.1, 0.05], 4).is_err());
        assert!(check_geometric("g", &[0.5, 0.5, 0.5, 0.5], 4).is_err());
    }

    #[test]
    fn floor_points_are_excluded() {
        let mut r = ExperimentResult::new("t");
        r.grid = vec![
            GridPoint { param: 1.0, error: 1.0, stderr: 0.01 },
            GridPoint { param: 0.5, error: 0.5, stderr: 0.01 },
            GridPoint { param: 0.25, error: 0.25, stderr: 0.01 },
            GridPoint { param: 0.125, error: 0.02, stderr: 0.01 },
        ];
        fit_above_floor(&mut r);
        assert_eq!(r.excluded, vec![3]);
        assert!((r.fitted_slope.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rate_slope_reference() {
        let cfg = ms_cfg(2, 8, 0.1);
        let study = RateStudy::new(cfg, vec![0.08, 0.04, 0.02, 0.01], 1.0);
        let r = rate_study(&study).unwrap();
        assert!((r.reference_slope.unwrap() - 2.0 / 7.0).abs() < 1e-12);
        assert_eq!(r.grid.len(), 4);
        assert_eq!(r.seeds.len(), 4);
        assert!((r.series["delta"][0] - 0.08f64.powf(3.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn y_independent_drift_is_degenerate() {
        let mut cfg = ms_cfg(2, 8, 0.1);
        // a = 0 removes the fast argument from F.
        cfg.base.coeffs = CoefficientSet::builtin(
            BuiltinFamily::BoundedSmooth { a: 0.0, b_mu: 0.5, c: 0.5, k: 2 },
            1.0,
        )
        .unwrap();
        let study = RateStudy::new(cfg, vec![0.08, 0.04, 0.02, 0.01], 1.0);
        let r = rate_study(&study).unwrap();
        assert!(r.grid.iter().all(|g| g.error == 0.0));
        assert_eq!(r.fitted_slope, None);
        assert!(r.flags.iter().any(|f| f.starts_with("degenerate")));
    }

    #[test]
    fn studies_are_reproducible() {
        let cfg = ms_cfg(2, 8, 0.05);
        let deltas = [0.25, 0.125, 0.0625];
        let a = hoelder_study(&cfg, &deltas).unwrap();
        let b = hoelder_study(&cfg, &deltas).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.config_hash, b.config_hash);
        let c = auxiliary_gap_study(&cfg, &deltas).unwrap();
        assert_eq!(c.grid.len(), 3);
    }

    #[test]
    fn ergodicity_flat_curve_has_no_signal() {
        // y0 at the stationary mean of the linear frozen equation.
        let s = spec(1, 2.0);
        let coeffs = CoefficientSet::builtin(BuiltinFamily::LinearTest { a: 1.0, c: 0.5 }, 1.0).unwrap();
        let drift = AveragedDrift::analytic_linear(&s, &coeffs).unwrap();
        let input = FrozenInput::new(SpectralField(vec![2.0]), 0.0, SpectralField(vec![4.0])).unwrap();
        let t: Vec<f64> = (1..=6).map(|j| j as f64 * 0.5).collect();
        let r = ergodicity_study(&[input], &drift, &coeffs, &t, 400, 1).unwrap();
        assert_eq!(r.fitted_slope, None);
        assert!(r.flags.iter().any(|f| f.contains("no signal")));
    }

    #[test]
    fn picard_grid_matches_iterations() {
        let cfg = crate::solver::tests::smooth_cfg(2, 16, 5);
        let r = picard_study(&cfg, 4, None).unwrap();
        assert_eq!(r.grid.len(), 4);
        assert_eq!(r.series["ratios"].len(), 3);
    }
}
