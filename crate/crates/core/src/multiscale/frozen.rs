//! The frozen fast equation `dY = (A Y + G(x, mu, Y)) dt + dZ` at unit time scale.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{effective_constants, CoefficientSet};
use crate::error::{Error, Result};
use crate::experiments::stats::batch_means;
use crate::noise::{Channel, NoiseProcess, RngStream, StreamId};
use crate::solver::{particle_streams, NoiseSource, PathEnsemble, StepTable};
use crate::spectral::{OperatorSpec, SpectralField};

/// Slow arguments held fixed, and the fast starting point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenInput {
    pub x: SpectralField,
    /// `(mu(|.|^p))^{1/p}` of the frozen law.
    pub mu_stat: f64,
    pub y0: SpectralField,
}

impl FrozenInput {
    pub fn new(x: SpectralField, mu_stat: f64, y0: SpectralField) -> Result<Self> {
        if !(mu_stat >= 0.0 && mu_stat.is_finite()) {
            return Err(Error::range("mu_stat", format!("must be finite and >= 0, got {mu_stat}")));
        }
        if x.len() != y0.len() {
            return Err(Error::Dimension {
                expected: x.len(),
                got: y0.len(),
            });
        }
        Ok(FrozenInput { x, mu_stat, y0 })
    }

    pub(crate) fn check(&self, spec: &OperatorSpec) -> Result<()> {
        self.x.check_against(spec)?;
        self.y0.check_against(spec)?;
        if !(self.mu_stat >= 0.0 && self.mu_stat.is_finite()) {
            return Err(Error::range("mu_stat", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Grid and replica count of a frozen-equation ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenRun {
    pub t_end: f64,
    /// Integration step.
    pub h: f64,
    /// Recording step, a multiple of `h`; `None` records every step.
    pub record_h: Option<f64>,
    pub replicas: usize,
    pub seed: u64,
}

impl FrozenRun {
    fn grid(&self) -> Result<(usize, usize, f64)> {
        if !(self.t_end > 0.0 && self.h > 0.0) {
            return Err(Error::range("h", "frozen horizon and step must be positive"));
        }
        if self.replicas == 0 {
            return Err(Error::range("replicas", "at least one replica is required"));
        }
        let steps = (self.t_end / self.h).round().max(1.0) as usize;
        let h = self.t_end / steps as f64;
        let every = match self.record_h {
            None => 1,
            Some(r) => {
                let e = (r / h).round();
                if e < 1.0 || (e * h - r).abs() > 1e-9 * r {
                    return Err(Error::range("record_h", format!("{r} is not a multiple of the step {h}")));
                }
                e as usize
            }
        };
        if !steps.is_multiple_of(every) {
            return Err(Error::range("record_h", "recording step does not divide the horizon"));
        }
        Ok((steps, every, h))
    }
}

/// Stepping kernel of the frozen equation.
#[derive(Clone, Debug)]
pub(crate) struct FrozenStepper {
    table: StepTable,
    noise: NoiseSource,
}

impl FrozenStepper {
    pub(crate) fn new(spec: &OperatorSpec, h: f64) -> Result<Self> {
        Ok(FrozenStepper {
            table: StepTable::new(spec, h, 1.0),
            noise: NoiseSource::new(spec, h, NoiseProcess::Fast { epsilon: 1.0 })?,
        })
    }

    #[inline]
    pub(crate) fn step(
        &self,
        coeffs: &CoefficientSet,
        input: (&[f64], f64),
        y: &mut [f64],
        rng: &mut RngStream,
        scratch: &mut (Vec<f64>, Vec<f64>),
    ) {
        let (drift, inc) = scratch;
        coeffs.maps.fast(input.0, input.1, y, drift);
        self.noise.fill(rng, inc);
        self.table.apply(y, drift, inc);
    }
}

/// Replicas of the frozen equation on a common grid, one fast stream each.
pub fn simulate_frozen(
    input: &FrozenInput,
    run: &FrozenRun,
    spec: &OperatorSpec,
    coeffs: &CoefficientSet,
) -> Result<PathEnsemble> {
    input.check(spec)?;
    run_frozen_from(input.y0.0.repeat(run.replicas.max(1)), input.x.as_slice(), input.mu_stat, run, spec, coeffs)
}

/// [`simulate_frozen`] with one starting state per replica (`replicas x N`, row-major).
pub(crate) fn run_frozen_from(
    mut state: Vec<f64>,
    x: &[f64],
    mu_stat: f64,
    run: &FrozenRun,
    spec: &OperatorSpec,
    coeffs: &CoefficientSet,
) -> Result<PathEnsemble> {
    effective_constants(coeffs, spec).require_dissipative()?;
    let (steps, every, h) = run.grid()?;
    let n = spec.n_modes;
    if state.len() != run.replicas * n {
        return Err(Error::Dimension {
            expected: run.replicas * n,
            got: state.len(),
        });
    }
    let stepper = FrozenStepper::new(spec, h)?;
    let times: Vec<f64> = (0..=steps / every).map(|j| (j * every) as f64 * h).collect();
    let mut out = PathEnsemble::with_capacity(run.replicas, n, times);
    let mut rngs = particle_streams(run.seed, 0, run.replicas, Channel::Frozen);
    out.push_slice(&state);
    for _ in 0..steps / every {
        state
            .par_chunks_mut(n)
            .zip(rngs.par_iter_mut())
            .for_each_init(
                || (vec![0.0; n], vec![0.0; n]),
                |scratch, (y, rng)| {
                    for _ in 0..every {
                        stepper.step(coeffs, (x, mu_stat), y, rng, scratch);
                    }
                },
            );
        out.push_slice(&state);
    }
    Ok(out)
}

/// Time-average settings of the ergodic estimator of the averaged drift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicSettings {
    /// Burn-in `T_b`; defaults to `8 / gap`.
    pub burn_in: Option<f64>,
    /// Averaging window `T_a`; defaults to `64 / gap`.
    pub window: Option<f64>,
    pub h: f64,
    /// Cache quantization step for `(x, mu_stat)`.
    pub resolution: f64,
    pub seed: u64,
}

impl Default for ErgodicSettings {
    fn default() -> Self {
        ErgodicSettings {
            burn_in: None,
            window: None,
            h: 0.01,
            resolution: 1e-3,
            seed: 0,
        }
    }
}

impl ErgodicSettings {
    pub(crate) fn times(&self, gap: f64) -> (f64, f64) {
        (
            self.burn_in.unwrap_or(8.0 / gap),
            self.window.unwrap_or(64.0 / gap),
        )
    }
}

/// Number of batches used for the time-average standard error.
const BATCHES: usize = 32;

/// `(1/T_a) int_{T_b}^{T_b+T_a} F(x, mu, Y_s) ds` along one path, with a
/// batch-means standard error per coordinate.
pub(crate) fn ergodic_average(
    x: &[f64],
    mu_stat: f64,
    y0: &[f64],
    spec: &OperatorSpec,
    coeffs: &CoefficientSet,
    settings: &ErgodicSettings,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let gap = effective_constants(coeffs, spec);
    gap.require_dissipative()?;
    let (burn, window) = settings.times(gap.gap);
    if !(settings.h > 0.0 && window > 0.0 && burn >= 0.0) {
        return Err(Error::range("h", "ergodic settings need positive step and window"));
    }
    let n = spec.n_modes;
    let stepper = FrozenStepper::new(spec, settings.h)?;
    let mut scratch = (vec![0.0; n], vec![0.0; n]);
    let mut y = y0.to_vec();
    let burn_steps = (burn / settings.h).round() as usize;
    let avg_steps = ((window / settings.h).round() as usize).max(BATCHES);
    for _ in 0..burn_steps {
        stepper.step(coeffs, (x, mu_stat), &mut y, rng, &mut scratch);
    }
    let mut series = vec![0.0; avg_steps * n];
    let mut f = vec![0.0; n];
    for s in 0..avg_steps {
        coeffs.maps.slow(x, mu_stat, &y, &mut f);
        series[s * n..(s + 1) * n].copy_from_slice(&f);
        stepper.step(coeffs, (x, mu_stat), &mut y, rng, &mut scratch);
    }
    let mut value = vec![0.0; n];
    let mut stderr = vec![0.0; n];
    let mut column = vec![0.0; avg_steps];
    for k in 0..n {
        for (s, c) in column.iter_mut().enumerate() {
            *c = series[s * n + k];
        }
        let (m, se) = batch_means(&column, BATCHES);
        value[k] = m;
        stderr[k] = se;
    }
    Ok((value, stderr))
}

/// Long-path stream for the ergodic estimator keyed by `index`.
pub(crate) fn ergodic_stream(seed: u64, index: u64) -> RngStream {
    RngStream::new(
        crate::noise::derive_seed(seed, index),
        StreamId::new(0, 0, Channel::Ergodic),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::BuiltinFamily;
    use crate::experiments::stats::mean_stderr;
    use crate::spectral::tests::spec;
    use approx::assert_abs_diff_eq;

    fn linear(c: f64) -> CoefficientSet {
        CoefficientSet::builtin(BuiltinFamily::LinearTest { a: 1.0, c }, 1.0).unwrap()
    }

    #[test]
    fn equilibrium_without_noise_is_constant() {
        let mut s = spec(1, 2.0);
        s.c_gamma = 0.0;
        let input = FrozenInput::new(SpectralField(vec![2.0]), 0.0, SpectralField(vec![4.0])).unwrap();
        let run = FrozenRun { t_end: 3.0, h: 0.01, record_h: Some(0.5), replicas: 2, seed: 0 };
        let ens = simulate_frozen(&input, &run, &s, &linear(0.5)).unwrap();
        assert_eq!(ens.n_times(), 7);
        for j in 0..ens.n_times() {
            assert_abs_diff_eq!(ens.value(1, j)[0], 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_non_dissipative() {
        let s = spec(1, 2.0);
        let input = FrozenInput::new(SpectralField(vec![2.0]), 0.0, SpectralField(vec![0.0])).unwrap();
        let run = FrozenRun { t_end: 1.0, h: 0.01, record_h: None, replicas: 1, seed: 0 };
        let err = simulate_frozen(&input, &run, &s, &linear(1.0)).unwrap_err();
        assert!(err.to_string().contains("strong dissipative"));
    }

    #[test]
    fn linear_mean_follows_ode() {
        // m(t) = e^{-(lambda-c)t} y + a x/(lambda-c) (1 - e^{-(lambda-c)t}) = 2.5285 at t = 2
        let s = spec(1, 2.0);
        let input = FrozenInput::new(SpectralField(vec![2.0]), 0.0, SpectralField(vec![0.0])).unwrap();
        let run = FrozenRun { t_end: 2.0, h: 0.001, record_h: Some(2.0), replicas: 4000, seed: 3 };
        let ens = simulate_frozen(&input, &run, &s, &linear(0.5)).unwrap();
        let v: Vec<f64> = (0..4000).map(|i| ens.value(i, 1)[0]).collect();
        let (m, se) = mean_stderr(&v);
        let exact = 4.0 * (1.0 - (-1.0f64).exp());
        assert_abs_diff_eq!(exact, 2.5285, epsilon = 1e-4);
        assert!((m - exact).abs() < 3.0 * se, "{m} +- {se}");
    }
}
