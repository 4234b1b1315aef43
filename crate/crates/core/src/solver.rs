//! Single-scale McKean-Vlasov integrator and the Picard iteration on law flows.
//!
//! The scheme is exponential Euler on the mild formulation: the linear part
//! and the stochastic convolution are exact over a step, the drift is frozen
//! at the left endpoint. The law of the solution is closed by `M`
//! interacting particles whose empirical `p`-moment is recomputed once per
//! step in a fixed sequential order, so results do not depend on the number
//! of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{validate_model, CoefficientSet};
use crate::error::{Error, Result};
use crate::experiments::stats::{mean_stderr, weighted_fit};
use crate::measure::{dt_metric, moment_of_rows, EmpiricalMeasure, LawFlow};
use crate::noise::{Channel, IncrementKernel, NoiseProcess, RngStream, StreamId};
use crate::spectral::{norm, OperatorSpec, SpectralField, ValidationReport};

/// Inputs of a single-scale run.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub spec: OperatorSpec,
    pub coeffs: CoefficientSet,
    /// Horizon `T`.
    pub t_end: f64,
    /// Macro step; `T / h` is rounded to the nearest integer.
    pub h: f64,
    /// Particle count `M`.
    pub m: usize,
    /// Deterministic initial value.
    pub xi: SpectralField,
    pub seed: u64,
}

impl SimConfig {
    /// Number of macro steps `J` and the step `T / J` actually used.
    pub fn grid(&self) -> Result<(usize, f64)> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::range("T", format!("horizon must be positive, got {}", self.t_end)));
        }
        if !(self.h > 0.0) {
            return Err(Error::range("h", format!("step must be positive, got {}", self.h)));
        }
        let steps = (self.t_end / self.h).round();
        if steps < 1.0 || (steps * self.h - self.t_end).abs() > 1e-9 * self.t_end {
            return Err(Error::range(
                "h",
                format!("step {} does not divide T = {}", self.h, self.t_end),
            ));
        }
        Ok((steps as usize, self.t_end / steps))
    }

    pub fn times(&self) -> Result<Vec<f64>> {
        let (steps, h) = self.grid()?;
        Ok((0..=steps).map(|j| j as f64 * h).collect())
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::range("M", "at least one particle is required"));
        }
        if self.xi.len() != self.spec.n_modes {
            return Err(Error::Dimension {
                expected: self.spec.n_modes,
                got: self.xi.len(),
            });
        }
        if !self.xi.is_finite() {
            return Err(Error::Invalid("xi has non-finite coordinates".into()));
        }
        self.grid().map(|_| ())
    }
}

/// Fails on the first violated check among `ids`.
pub(crate) fn require(report: &ValidationReport, ids: &[&str]) -> Result<()> {
    let subset = ValidationReport {
        checks: report
            .checks
            .iter()
            .filter(|c| ids.contains(&c.id.as_str()))
            .cloned()
            .collect(),
    };
    subset.into_result().map(|_| ())
}

/// Trajectories of `M` particles on a time grid.
///
/// Stored time-major: the state of particle `i` at grid index `j` is the
/// slice `[(j*M + i)*N, (j*M + i + 1)*N)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    n_particles: usize,
    n_modes: usize,
    times: Vec<f64>,
    data: Vec<f64>,
}

impl PathEnsemble {
    pub(crate) fn with_capacity(n_particles: usize, n_modes: usize, times: Vec<f64>) -> Self {
        let cap = n_particles * n_modes * times.len();
        PathEnsemble {
            n_particles,
            n_modes,
            times,
            data: Vec::with_capacity(cap),
        }
    }

    pub(crate) fn push_slice(&mut self, state: &[f64]) {
        debug_assert_eq!(state.len(), self.n_particles * self.n_modes);
        self.data.extend_from_slice(state);
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// State of particle `i` at grid index `j`.
    pub fn value(&self, i: usize, j: usize) -> &[f64] {
        let start = (j * self.n_particles + i) * self.n_modes;
        &self.data[start..start + self.n_modes]
    }

    /// All particles at grid index `j`, row-major `M x N`.
    pub fn slice_at(&self, j: usize) -> &[f64] {
        let len = self.n_particles * self.n_modes;
        &self.data[j * len..(j + 1) * len]
    }

    pub fn measure_at(&self, j: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.n_modes, self.slice_at(j).to_vec())
            .expect("ensemble slices are nonempty M x N matrices")
    }

    pub fn law_flow(&self) -> LawFlow {
        LawFlow::new(
            self.times.clone(),
            (0..self.n_times()).map(|j| self.measure_at(j)).collect(),
        )
        .expect("ensemble grid is increasing")
    }

    /// `((1/M) sum |X_t^i|^p)^{1/p}` at every grid time.
    pub fn moments(&self, p: f64) -> Vec<f64> {
        (0..self.n_times())
            .map(|j| moment_of_rows(self.slice_at(j), self.n_modes, p))
            .collect()
    }
}

/// Per-mode coefficients of one exponential Euler step at time-rate `rate`.
#[derive(Clone, Debug)]
pub(crate) struct StepTable {
    pub(crate) decay: Vec<f64>,
    pub(crate) weight: Vec<f64>,
}

impl StepTable {
    /// `rate = 1` for the slow scale, `1/eps` for the fast one.
    pub(crate) fn new(spec: &OperatorSpec, h: f64, rate: f64) -> Self {
        let lam = spec.eigenvalues();
        StepTable {
            decay: lam.iter().map(|l| (-l * h * rate).exp()).collect(),
            weight: lam.iter().map(|l| -(-l * h * rate).exp_m1() / l).collect(),
        }
    }

    #[inline]
    pub(crate) fn apply(&self, x: &mut [f64], drift: &[f64], inc: &[f64]) {
        for k in 0..x.len() {
            x[k] = self.decay[k] * x[k] + self.weight[k] * drift[k] + inc[k];
        }
    }
}

/// One exponential Euler step for a single field.
pub fn step_exponential_euler(
    u: &SpectralField,
    drift: &SpectralField,
    h: f64,
    spec: &OperatorSpec,
    noise_inc: &SpectralField,
) -> Result<SpectralField> {
    if !(h > 0.0) {
        return Err(Error::range("h", format!("step must be positive, got {h}")));
    }
    u.check_against(spec)?;
    drift.check_against(spec)?;
    noise_inc.check_against(spec)?;
    let table = StepTable::new(spec, h, 1.0);
    let mut out = u.0.clone();
    table.apply(&mut out, &drift.0, &noise_inc.0);
    Ok(SpectralField(out))
}

/// Convolution sampler that skips stream draws when the noise is switched off.
#[derive(Clone, Debug)]
pub(crate) struct NoiseSource {
    kernel: Option<IncrementKernel>,
}

impl NoiseSource {
    pub(crate) fn new(spec: &OperatorSpec, h: f64, process: NoiseProcess) -> Result<Self> {
        let amp = match process {
            NoiseProcess::Slow => spec.c_beta,
            NoiseProcess::Fast { .. } => spec.c_gamma,
        };
        let kernel = if amp == 0.0 {
            None
        } else {
            Some(IncrementKernel::new(spec, h, process)?)
        };
        Ok(NoiseSource { kernel })
    }

    #[inline]
    pub(crate) fn fill(&self, rng: &mut RngStream, out: &mut [f64]) {
        match &self.kernel {
            Some(k) => k.fill(rng, out),
            None => out.iter_mut().for_each(|o| *o = 0.0),
        }
    }
}

pub(crate) fn particle_streams(seed: u64, replica: u32, m: usize, channel: Channel) -> Vec<RngStream> {
    (0..m)
        .map(|i| RngStream::new(seed, StreamId::new(replica, i as u32, channel)))
        .collect()
}

/// Where the law argument of `B` comes from.
enum LawSource<'a> {
    /// The particle ensemble itself.
    Interacting,
    /// A prescribed moment per grid time.
    Given(&'a [f64]),
}

fn run_single_scale(cfg: &SimConfig, law: LawSource<'_>) -> Result<PathEnsemble> {
    run_with_streams(cfg, law, particle_streams(cfg.seed, 0, cfg.m, Channel::Slow))
}

fn run_with_streams(cfg: &SimConfig, law: LawSource<'_>, mut rngs: Vec<RngStream>) -> Result<PathEnsemble> {
    let (steps, h) = cfg.grid()?;
    let n = cfg.spec.n_modes;
    let p = cfg.spec.p;
    let table = StepTable::new(&cfg.spec, h, 1.0);
    let noise = NoiseSource::new(&cfg.spec, h, NoiseProcess::Slow)?;
    let mut state = cfg.xi.0.repeat(cfg.m);
    let mut out = PathEnsemble::with_capacity(cfg.m, n, cfg.times()?);
    out.push_slice(&state);
    let maps = &cfg.coeffs.maps;
    for j in 0..steps {
        let mu_stat = match law {
            LawSource::Interacting => moment_of_rows(&state, n, p),
            LawSource::Given(stats) => stats[j],
        };
        state
            .par_chunks_mut(n)
            .zip(rngs.par_iter_mut())
            .for_each_init(
                || (vec![0.0; n], vec![0.0; n]),
                |(drift, inc), (x, rng)| {
                    maps.single(x, mu_stat, drift);
                    noise.fill(rng, inc);
                    table.apply(x, drift, inc);
                },
            );
        out.push_slice(&state);
    }
    Ok(out)
}

/// Interacting-particle solution of the McKean-Vlasov equation.
pub fn simulate_mkv(config: &SimConfig) -> Result<PathEnsemble> {
    config.check()?;
    let report = validate_model(&config.spec, &config.coeffs)?;
    require(&report, &["A1", "A2", "A3"])?;
    run_single_scale(config, LawSource::Interacting)
}

/// Result of the executable Picard iteration on law flows.
///
/// The ratios mix the contraction of the law map with the particle noise of
/// the empirical flows; the two are not separable from one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    /// `d_n = D_T(mu^{(n+1)}, mu^{(n)})`.
    pub d: Vec<f64>,
    /// `d_{n+1} / d_n`, set to 0 once `d_n = 0`.
    pub ratios: Vec<f64>,
    /// First index `n` at which `d_n` stopped decreasing or reached round-off.
    pub floor_index: Option<usize>,
    pub lambda_weight: f64,
    /// True when some `W_p` used the sliced estimator (`M > 256`).
    pub sliced: bool,
    pub warnings: Vec<String>,
}

impl PicardReport {
    /// Ratios strictly before the detected floor.
    pub fn ratios_before_floor(&self) -> &[f64] {
        let end = match self.floor_index {
            Some(f) => f.saturating_sub(1).min(self.ratios.len()),
            None => self.ratios.len(),
        };
        &self.ratios[..end]
    }
}

/// Picard iteration `mu^{(n+1)} = law of X^{mu^{(n)}}` from the constant flow `delta_xi`.
///
/// The particles of stage `n` read their law argument from `mu^{(n)}` and do
/// not interact. Every stage reuses the same noise streams. `lambda_weight`
/// defaults to `4 C`.
pub fn picard_law_iteration(
    config: &SimConfig,
    n_iters: usize,
    lambda_weight: Option<f64>,
) -> Result<PicardReport> {
    if n_iters < 2 {
        return Err(Error::range("n_iters", format!("need at least 2 iterations, got {n_iters}")));
    }
    config.check()?;
    let report = validate_model(&config.spec, &config.coeffs)?;
    require(&report, &["A1", "A2", "A3"])?;
    let lambda_weight = lambda_weight.unwrap_or(4.0 * config.coeffs.lip_c);
    let p = config.spec.p;
    let times = config.times()?;
    let m = config.m;

    let mut previous = LawFlow::constant(
        times.clone(),
        EmpiricalMeasure::dirac(&config.xi, m)?,
    )?;
    let mut stats = vec![config.xi.norm(); times.len()];
    let mut projections = RngStream::new(config.seed, StreamId::new(0, 0, Channel::Projection));
    let mut out = PicardReport {
        d: Vec::with_capacity(n_iters),
        ratios: Vec::new(),
        floor_index: None,
        lambda_weight,
        sliced: false,
        warnings: Vec::new(),
    };
    let mut scale = stats[0];
    for _ in 0..n_iters {
        let ens = run_single_scale(config, LawSource::Given(&stats))?;
        stats = ens.moments(p);
        scale = scale.max(stats.iter().cloned().fold(0.0, f64::max));
        let next = ens.law_flow();
        let dist = dt_metric(&next, &previous, lambda_weight, p, &mut projections)?;
        out.sliced |= dist.sliced;
        out.d.push(dist.value);
        previous = next;
    }
    out.ratios = out
        .d
        .windows(2)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
        .collect();
    let round_off = 1e-12 * (1.0 + scale);
    out.floor_index = out
        .d
        .iter()
        .enumerate()
        .find(|(n, d)| **d <= round_off || (*n > 0 && **d >= out.d[n - 1]))
        .map(|(n, _)| n);
    if let Some(f) = out.floor_index {
        out.warnings.push(format!(
            "d_n reached the particle-noise floor at n = {f} (d = {:.3e})",
            out.d[f]
        ));
    }
    if out.sliced {
        out.warnings
            .push(format!("M = {m} exceeds the exact assignment limit; sliced W_p used"));
    }
    Ok(out)
}

/// Moment statistics of an ensemble over its grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub m: f64,
    /// `((1/M) sum |X_t^i|^m)^{1/m}` at each grid time.
    pub values: Vec<f64>,
    pub sup: f64,
    pub finite: bool,
    /// Linear-trend increase over the second half of the horizon.
    pub late_growth: f64,
    /// Linear-trend increase over the first half.
    pub early_growth: f64,
    /// Finite, and the late trend does not exceed the early one by more than
    /// 5% of the sup.
    pub stable: bool,
}

fn trend(times: &[f64], values: &[f64]) -> f64 {
    if times.len() < 2 {
        return 0.0;
    }
    match weighted_fit(times, values, &vec![1.0; times.len()]) {
        Some(fit) => fit.slope * (times[times.len() - 1] - times[0]),
        None => 0.0,
    }
}

/// Sup over the grid of the empirical `m`-th moment, with a growth verdict.
pub fn moment_bound_check(ensemble: &PathEnsemble, m: f64, p: f64, alpha: f64) -> Result<MomentReport> {
    if !(m >= p && m < alpha) {
        return Err(Error::range("m", format!("m out of range: {m} not in [p = {p}, alpha = {alpha})")));
    }
    let values = ensemble.moments(m);
    let sup = values.iter().cloned().fold(0.0, f64::max);
    let finite = values.iter().all(|v| v.is_finite());
    let times = ensemble.times();
    let half = times.len() / 2;
    let early_growth = trend(&times[..=half], &values[..=half]);
    let late_growth = trend(&times[half..], &values[half..]);
    let stable = finite && late_growth <= early_growth.max(0.0) + 0.05 * sup;
    Ok(MomentReport {
        m,
        values,
        sup,
        finite,
        late_growth,
        early_growth,
        stable,
    })
}

/// Mean and standard error of `|X_T^i|^p` over particles at the final time.
pub fn terminal_abs_moment(ensemble: &PathEnsemble, p: f64) -> (f64, f64) {
    let j = ensemble.n_times() - 1;
    let v: Vec<f64> = (0..ensemble.n_particles())
        .map(|i| norm(ensemble.value(i, j)).powf(p))
        .collect();
    mean_stderr(&v)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::coefficients::BuiltinFamily;
    use crate::spectral::{apply_semigroup, tests::spec};
    use approx::assert_abs_diff_eq;

    pub(crate) fn smooth_cfg(n: usize, m: usize, seed: u64) -> SimConfig {
        let mut s = spec(n, 2.0);
        s.c_beta = 0.3;
        SimConfig {
            coeffs: CoefficientSet::builtin(
                BuiltinFamily::BoundedSmooth { a: 1.0, b_mu: 0.5, c: 0.5, k: n.min(4) },
                s.p,
            )
            .unwrap(),
            spec: s,
            t_end: 1.0,
            h: 1.0 / 32.0,
            m,
            xi: SpectralField::mode(n, 1, 0.5),
            seed,
        }
    }

    fn zero_coeffs(p: f64) -> CoefficientSet {
        CoefficientSet::builtin(BuiltinFamily::BoundedSmooth { a: 0.0, b_mu: 0.0, c: 0.0, k: 0 }, p).unwrap()
    }

    #[test]
    fn step_examples() {
        let s = spec(2, 2.0);
        let u = SpectralField(vec![1.0, -2.0]);
        let zero = SpectralField::zeros(2);
        let out = step_exponential_euler(&u, &zero, 0.3, &s, &zero).unwrap();
        assert_eq!(out, apply_semigroup(&u, 0.3, &s).unwrap());
        let s1 = spec(1, 2.0);
        let out = step_exponential_euler(
            &SpectralField(vec![1.0]),
            &SpectralField(vec![1.0]),
            2f64.ln(),
            &s1,
            &SpectralField(vec![0.0]),
        )
        .unwrap();
        assert_abs_diff_eq!(out.0[0], 1.0, epsilon = 1e-15);
        assert!(step_exponential_euler(&u, &zero, 0.0, &s, &zero).is_err());
    }

    #[test]
    fn constant_drift_converges_to_stationary_point() {
        let s = spec(3, 2.0);
        let d = SpectralField(vec![1.0, 2.0, -3.0]);
        let zero = SpectralField::zeros(3);
        let mut u = zero.clone();
        for _ in 0..2000 {
            u = step_exponential_euler(&u, &d, 0.05, &s, &zero).unwrap();
        }
        for k in 0..3 {
            assert_abs_diff_eq!(u.0[k], d.0[k] / s.lambda(k + 1), epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_part_is_exact() {
        let mut cfg = smooth_cfg(4, 3, 1);
        cfg.coeffs = zero_coeffs(1.0);
        cfg.spec.c_beta = 0.0;
        cfg.xi = SpectralField(vec![1.0, -0.5, 0.25, 2.0]);
        let ens = simulate_mkv(&cfg).unwrap();
        for (j, t) in ens.times().iter().enumerate() {
            let exact = apply_semigroup(&cfg.xi, *t, &cfg.spec).unwrap();
            for (a, b) in ens.value(2, j).iter().zip(&exact.0) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-13 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn zero_fixed_point_with_single_particle() {
        let mut cfg = smooth_cfg(2, 1, 1);
        cfg.coeffs = CoefficientSet::builtin(BuiltinFamily::BoundedSmooth { a: 0.0, b_mu: 1.0, c: 0.0, k: 0 }, 1.0).unwrap();
        cfg.spec.c_beta = 0.0;
        cfg.xi = SpectralField::zeros(2);
        let ens = simulate_mkv(&cfg).unwrap();
        assert!(ens.slice_at(ens.n_times() - 1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn euler_error_is_first_order() {
        // x' = (-lambda + a) x, exact solution e^{(a - lambda) t} x0.
        let mut base = smooth_cfg(1, 1, 0);
        base.spec.c_beta = 0.0;
        base.coeffs = CoefficientSet::builtin(BuiltinFamily::LinearTest { a: 0.7, c: 0.0 }, 1.0).unwrap();
        base.xi = SpectralField(vec![1.0]);
        let exact = ((0.7 - 1.0) * base.t_end).exp();
        let mut hs = Vec::new();
        let mut errs = Vec::new();
        for j in [64.0, 128.0, 256.0, 512.0, 1024.0] {
            let mut cfg = base.clone();
            cfg.h = cfg.t_end / j;
            let ens = simulate_mkv(&cfg).unwrap();
            hs.push(cfg.h);
            errs.push((ens.value(0, ens.n_times() - 1)[0] - exact).abs());
        }
        let fit = crate::experiments::stats::loglog_fit(&hs, &errs, &vec![0.0; hs.len()]).unwrap();
        assert!((fit.slope - 1.0).abs() < 0.15, "{fit:?}");
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let cfg = smooth_cfg(4, 64, 9);
        let a = simulate_mkv(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_mkv(&cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn picard_with_law_independent_drift_stops_after_one_step() {
        let mut cfg = smooth_cfg(3, 16, 2);
        cfg.coeffs = CoefficientSet::builtin(BuiltinFamily::BoundedSmooth { a: 1.0, b_mu: 0.0, c: 0.5, k: 3 }, 1.0).unwrap();
        let rep = picard_law_iteration(&cfg, 3, None).unwrap();
        assert!(rep.d[0] > 0.0);
        assert_eq!(rep.d[1], 0.0);
        assert_eq!(rep.floor_index, Some(1));
    }

    #[test]
    fn picard_is_reproducible() {
        let cfg = smooth_cfg(4, 32, 5);
        let a = picard_law_iteration(&cfg, 4, None).unwrap();
        let b = picard_law_iteration(&cfg, 4, None).unwrap();
        assert_eq!(a, b);
        assert!(picard_law_iteration(&cfg, 1, None).is_err());
    }

    #[test]
    fn moment_check_examples() {
        let mut cfg = smooth_cfg(3, 4, 1);
        cfg.coeffs = zero_coeffs(1.0);
        cfg.spec.c_beta = 0.0;
        cfg.xi = SpectralField(vec![0.3, 0.4, 0.0]);
        let ens = simulate_mkv(&cfg).unwrap();
        let rep = moment_bound_check(&ens, 1.0, 1.0, 1.5).unwrap();
        assert_abs_diff_eq!(rep.sup, 0.5, epsilon = 1e-15);
        assert!(rep.stable);
        assert!(moment_bound_check(&ens, 1.5, 1.0, 1.5).is_err());
        assert!(moment_bound_check(&ens, 0.9, 1.0, 1.5).is_err());
    }

    #[test]
    fn permuting_streams_permutes_particles() {
        let cfg = smooth_cfg(3, 12, 8);
        let perm: Vec<usize> = (0..cfg.m).map(|i| (5 * i + 3) % cfg.m).collect();
        let base = run_single_scale(&cfg, LawSource::Interacting).unwrap();
        let streams = perm
            .iter()
            .map(|&i| RngStream::new(cfg.seed, StreamId::new(0, i as u32, Channel::Slow)))
            .collect();
        let permuted = run_with_streams(&cfg, LawSource::Interacting, streams).unwrap();
        for j in 0..base.n_times() {
            for (i, &pi) in perm.iter().enumerate() {
                for (a, b) in permuted.value(i, j).iter().zip(base.value(pi, j)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        for (a, b) in base.moments(1.0).iter().zip(permuted.moments(1.0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
