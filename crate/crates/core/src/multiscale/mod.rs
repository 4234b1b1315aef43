//! Slow-fast system, Khasminskii auxiliary process, averaged equation and
//! strong-error measurement.
//!
//! ```text
//! dX = [A X + F(X, L(X), Y)] dt + dL
//! dY = eps^{-1} [A Y + G(X, L(X), Y)] dt + eps^{-1/alpha} dZ
//! ```
//!
//! Both components are integrated with exponential Euler on a fine grid of
//! step `h_fast` (the fast one with rate `1/eps`); paths are recorded on the
//! macro grid of step `h`, and the law statistic of the slow ensemble is
//! refreshed once per macro step. The averaged equation is integrated on the
//! same fine grid from the same slow-noise streams, so differences between
//! the two runs are pathwise (synchronous coupling).

mod averaging;
pub(crate) mod ergodicity;
mod frozen;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{effective_constants, validate_model};
use crate::error::{Error, Result};
use crate::experiments::stats::{lm_norm, mean_stderr};
use crate::measure::moment_of_rows;
use crate::noise::{Channel, NoiseProcess};
use crate::solver::{particle_streams, require, NoiseSource, PathEnsemble, SimConfig, StepTable};
use crate::spectral::{distance, SpectralField};

pub use averaging::{
    estimate_fbar, probe_fbar_lipschitz, AveragedDrift, AveragedMode, FbarEstimate, FbarProbe, SmoothedTanh,
    StableQuadrature,
};
pub use ergodicity::{ergodicity_decay, DecayReport};
pub use frozen::{simulate_frozen, ErgodicSettings, FrozenInput, FrozenRun};

/// Relative slack when checking grid alignment.
const GRID_SLACK: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct MultiscaleConfig {
    /// Slow-side settings: spec, coefficients, `T`, macro step `h`, `M`, `xi`, seed.
    pub base: SimConfig,
    pub epsilon: f64,
    /// Upper bound on the fine step; the step used is `h / ceil(h / h_fast)`.
    pub h_fast: f64,
    /// Khasminskii block length; defaults to `eps^{1/(1+theta)}`.
    pub delta: Option<f64>,
    /// Fast initial value.
    pub eta: SpectralField,
}

impl MultiscaleConfig {
    pub fn delta(&self) -> f64 {
        self.delta
            .unwrap_or_else(|| self.epsilon.powf(1.0 / (1.0 + self.base.spec.theta)))
    }

    /// `(macro steps, substeps per macro step, fine step)`.
    pub fn fine_grid(&self) -> Result<(usize, usize, f64)> {
        let (steps, h) = self.base.grid()?;
        let sub = (h / self.h_fast * (1.0 - GRID_SLACK)).ceil().max(1.0) as usize;
        Ok((steps, sub, h / sub as f64))
    }

    /// Checks the structural invariants and the model assumptions.
    pub fn check(&self) -> Result<()> {
        self.base.check()?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::range("epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if !(self.h_fast > 0.0) {
            return Err(Error::range("h_fast", format!("must be positive, got {}", self.h_fast)));
        }
        if self.h_fast > self.epsilon / 10.0 * (1.0 + GRID_SLACK) {
            return Err(Error::range(
                "h_fast",
                format!("h_fast = {} exceeds eps/10 = {}", self.h_fast, self.epsilon / 10.0),
            ));
        }
        let (_, _, fine) = self.fine_grid()?;
        let delta = self.delta();
        if !(delta >= fine * (1.0 - GRID_SLACK) && delta < self.base.t_end) {
            return Err(Error::range(
                "delta",
                format!("delta = {delta} must lie in [h_fast = {fine}, T = {})", self.base.t_end),
            ));
        }
        self.eta.check_against(&self.base.spec)?;
        let report = validate_model(&self.base.spec, &self.base.coeffs)?;
        require(&report, &["A1", "A2", "A3", "B1", "B2", "B3"])
    }

    /// Stream assignment shared by the slow-fast and averaged runs.
    pub fn coupling_manifest(&self) -> Result<CouplingManifest> {
        let (steps, sub, fine) = self.fine_grid()?;
        Ok(CouplingManifest {
            seed: self.base.seed,
            replica: 0,
            particles: self.base.m,
            n_modes: self.base.spec.n_modes,
            fine_step: fine,
            fine_steps: steps * sub,
            substeps: sub,
            slow_channel: Channel::Slow,
            fast_channel: Channel::Fast,
        })
    }
}

/// Which noise streams a run consumed, recorded so paired runs can be
/// checked for synchronous coupling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingManifest {
    pub seed: u64,
    pub replica: u32,
    pub particles: usize,
    pub n_modes: usize,
    pub fine_step: f64,
    pub fine_steps: usize,
    pub substeps: usize,
    pub slow_channel: Channel,
    pub fast_channel: Channel,
}

#[derive(Clone, Debug)]
pub struct SlowFastRun {
    pub slow: PathEnsemble,
    pub fast: PathEnsemble,
    pub manifest: CouplingManifest,
}

/// Integrates the coupled slow-fast particle system.
pub fn simulate_slow_fast(cfg: &MultiscaleConfig) -> Result<SlowFastRun> {
    cfg.check()?;
    let spec = &cfg.base.spec;
    let n = spec.n_modes;
    let p = spec.p;
    let (steps, sub, fine) = cfg.fine_grid()?;
    let slow_table = StepTable::new(spec, fine, 1.0);
    let fast_table = StepTable::new(spec, fine, 1.0 / cfg.epsilon);
    let slow_noise = NoiseSource::new(spec, fine, NoiseProcess::Slow)?;
    let fast_noise = NoiseSource::new(spec, fine, NoiseProcess::Fast { epsilon: cfg.epsilon })?;
    let m = cfg.base.m;
    let mut slow_rngs = particle_streams(cfg.base.seed, 0, m, Channel::Slow);
    let mut fast_rngs = particle_streams(cfg.base.seed, 0, m, Channel::Fast);
    let mut xs = cfg.base.xi.0.repeat(m);
    let mut ys = cfg.eta.0.repeat(m);
    let times = cfg.base.times()?;
    let mut slow = PathEnsemble::with_capacity(m, n, times.clone());
    let mut fast = PathEnsemble::with_capacity(m, n, times);
    slow.push_slice(&xs);
    fast.push_slice(&ys);
    let maps = &cfg.base.coeffs.maps;
    for _ in 0..steps {
        let mu_stat = moment_of_rows(&xs, n, p);
        xs.par_chunks_mut(n)
            .zip(ys.par_chunks_mut(n))
            .zip(slow_rngs.par_iter_mut().zip(fast_rngs.par_iter_mut()))
            .for_each_init(
                || [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
                |[f, g, dl, dz], ((x, y), (rl, rz))| {
                    for _ in 0..sub {
                        maps.slow(x, mu_stat, y, f);
                        maps.fast(x, mu_stat, y, g);
                        slow_noise.fill(rl, dl);
                        fast_noise.fill(rz, dz);
                        slow_table.apply(x, f, dl);
                        fast_table.apply(y, g, dz);
                    }
                },
            );
        slow.push_slice(&xs);
        fast.push_slice(&ys);
    }
    Ok(SlowFastRun {
        slow,
        fast,
        manifest: cfg.coupling_manifest()?,
    })
}

/// Slow states and law statistics at the block starts `l * delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSnapshots {
    /// Macro steps per block.
    pub block_steps: usize,
    /// Row-major `M x N` slow states, one matrix per block.
    pub states: Vec<Vec<f64>>,
    pub mu_stats: Vec<f64>,
}

impl BlockSnapshots {
    /// Reads the snapshots off a recorded slow ensemble. `delta` must be a
    /// multiple of the macro step.
    pub fn from_slow(slow: &PathEnsemble, cfg: &MultiscaleConfig) -> Result<Self> {
        let (steps, h) = cfg.base.grid()?;
        let delta = cfg.delta();
        let block = (delta / h).round();
        if block < 1.0 || (block * h - delta).abs() > GRID_SLACK * delta {
            return Err(Error::StreamMismatch(format!(
                "delta = {delta} is not a multiple of the recording step {h}"
            )));
        }
        if slow.n_times() != steps + 1 || slow.n_particles() != cfg.base.m {
            return Err(Error::StreamMismatch("slow ensemble does not match the configuration grid".into()));
        }
        let block = block as usize;
        let n_blocks = steps.div_ceil(block);
        let p = cfg.base.spec.p;
        let mut states = Vec::with_capacity(n_blocks);
        let mut mu_stats = Vec::with_capacity(n_blocks);
        for l in 0..n_blocks {
            let s = slow.slice_at(l * block);
            mu_stats.push(moment_of_rows(s, slow.n_modes(), p));
            states.push(s.to_vec());
        }
        Ok(BlockSnapshots {
            block_steps: block,
            states,
            mu_stats,
        })
    }
}

/// Fast process with `G`'s slow arguments frozen at block starts, driven by
/// the same fast streams as [`simulate_slow_fast`].
pub fn simulate_auxiliary(cfg: &MultiscaleConfig, snapshots: &BlockSnapshots) -> Result<PathEnsemble> {
    cfg.check()?;
    let spec = &cfg.base.spec;
    let n = spec.n_modes;
    let (steps, sub, fine) = cfg.fine_grid()?;
    let block = snapshots.block_steps;
    if block == 0
        || snapshots.states.len() != steps.div_ceil(block)
        || snapshots.mu_stats.len() != snapshots.states.len()
        || snapshots.states.iter().any(|s| s.len() != cfg.base.m * n)
    {
        return Err(Error::StreamMismatch("snapshots do not match the block grid".into()));
    }
    let fast_table = StepTable::new(spec, fine, 1.0 / cfg.epsilon);
    let fast_noise = NoiseSource::new(spec, fine, NoiseProcess::Fast { epsilon: cfg.epsilon })?;
    let m = cfg.base.m;
    let mut fast_rngs = particle_streams(cfg.base.seed, 0, m, Channel::Fast);
    let mut ys = cfg.eta.0.repeat(m);
    let mut out = PathEnsemble::with_capacity(m, n, cfg.base.times()?);
    out.push_slice(&ys);
    let maps = &cfg.base.coeffs.maps;
    for j in 0..steps {
        let l = j / block;
        let frozen = &snapshots.states[l];
        let mu_stat = snapshots.mu_stats[l];
        ys.par_chunks_mut(n)
            .zip(frozen.par_chunks(n))
            .zip(fast_rngs.par_iter_mut())
            .for_each_init(
                || (vec![0.0; n], vec![0.0; n]),
                |(g, dz), ((y, x), rz)| {
                    for _ in 0..sub {
                        maps.fast(x, mu_stat, y, g);
                        fast_noise.fill(rz, dz);
                        fast_table.apply(y, g, dz);
                    }
                },
            );
        out.push_slice(&ys);
    }
    Ok(out)
}

/// Averaged equation `dX = [A X + F_bar(X, L(X))] dt + dL` on the fine grid
/// of `cfg`, consuming the slow streams listed in `manifest`.
pub fn simulate_averaged(
    cfg: &MultiscaleConfig,
    drift: &AveragedDrift,
    manifest: &CouplingManifest,
) -> Result<PathEnsemble> {
    cfg.check()?;
    if *manifest != cfg.coupling_manifest()? {
        return Err(Error::StreamMismatch(
            "averaged run does not share the slow streams of the paired run".into(),
        ));
    }
    if drift.spec() != &cfg.base.spec {
        return Err(Error::Invalid("averaged drift was built for a different spec".into()));
    }
    let spec = &cfg.base.spec;
    let n = spec.n_modes;
    let p = spec.p;
    let (steps, sub, fine) = cfg.fine_grid()?;
    let table = StepTable::new(spec, fine, 1.0);
    let noise = NoiseSource::new(spec, fine, NoiseProcess::Slow)?;
    let m = cfg.base.m;
    let mut rngs = particle_streams(manifest.seed, manifest.replica, m, manifest.slow_channel);
    let mut xs = cfg.base.xi.0.repeat(m);
    let mut out = PathEnsemble::with_capacity(m, n, cfg.base.times()?);
    out.push_slice(&xs);
    for _ in 0..steps {
        let mu_stat = moment_of_rows(&xs, n, p);
        xs.par_chunks_mut(n)
            .zip(rngs.par_iter_mut())
            .try_for_each_init(
                || (vec![0.0; n], vec![0.0; n]),
                |(f, dl), (x, rl)| -> Result<()> {
                    for _ in 0..sub {
                        drift.eval(x, mu_stat, f)?;
                        noise.fill(rl, dl);
                        table.apply(x, f, dl);
                    }
                    Ok(())
                },
            )?;
        out.push_slice(&xs);
    }
    Ok(out)
}

/// Strong averaging error and its Monte Carlo standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongError {
    /// `((1/M) sum_i max_t |X^eps_t - X_bar_t|^m)^{1/m}`.
    pub value: f64,
    pub stderr: f64,
    /// Mean over particles of `|X^eps_t - X_bar_t|` per macro time.
    pub mean_gap: Vec<f64>,
}

/// Per-particle pathwise distance `max_j |a_j - b_j|` on the macro grid.
fn pathwise_sup(a: &PathEnsemble, b: &PathEnsemble) -> Vec<f64> {
    (0..a.n_particles())
        .map(|i| {
            (0..a.n_times())
                .map(|j| distance(a.value(i, j), b.value(i, j)))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Runs the slow-fast system and the averaged equation on shared slow noise
/// and returns the `L^m` norm of the pathwise sup distance.
///
/// Refuses coefficients without a declared bound on `F`. The block length
/// `delta` does not enter: it only organizes the proof.
pub fn strong_error(cfg: &MultiscaleConfig, drift: &AveragedDrift, m: f64) -> Result<StrongError> {
    let spec = &cfg.base.spec;
    if !(m >= spec.p && m < spec.alpha) {
        return Err(Error::range("m", format!("m out of range: {m} not in [p, alpha)")));
    }
    if !cfg.base.coeffs.f_bounded() {
        return Err(Error::Assumption {
            id: "B3",
            detail: "F has no declared bound; strong-error estimates need a bounded slow drift".into(),
        });
    }
    let run = simulate_slow_fast(cfg)?;
    let avg = simulate_averaged(cfg, drift, &run.manifest)?;
    let sups = pathwise_sup(&run.slow, &avg);
    let (value, stderr) = lm_norm(&sups, m);
    let mean_gap = (0..avg.n_times())
        .map(|j| {
            (0..avg.n_particles())
                .map(|i| distance(run.slow.value(i, j), avg.value(i, j)))
                .sum::<f64>()
                / avg.n_particles() as f64
        })
        .collect();
    Ok(StrongError {
        value,
        stderr,
        mean_gap,
    })
}

/// `(1/T) int_0^T |a_t - b_t| dt` per particle (left Riemann sum on the
/// macro grid), averaged over particles with its standard error.
pub fn time_integrated_gap(a: &PathEnsemble, b: &PathEnsemble) -> Result<(f64, f64)> {
    if a.n_particles() != b.n_particles() || a.times() != b.times() || a.n_modes() != b.n_modes() {
        return Err(Error::Invalid("ensembles live on different grids".into()));
    }
    let times = a.times();
    let total = times[times.len() - 1] - times[0];
    let per: Vec<f64> = (0..a.n_particles())
        .map(|i| {
            (0..times.len() - 1)
                .map(|j| (times[j + 1] - times[j]) * distance(a.value(i, j), b.value(i, j)))
                .sum::<f64>()
                / total
        })
        .collect();
    Ok(mean_stderr(&per))
}

/// `(1/T) int_0^T |X_t - X_{t(delta)}| dt` with `t(delta) = floor(t/delta) delta`;
/// `delta` must be a multiple of the recording step.
///
/// On each grid interval `[t_j, t_{j+1})` the integrand is taken at the right
/// end, `|X_{t_{j+1}} - X_{t(delta)}|`, so `delta = h` gives the mean
/// single-step displacement.
pub fn time_integrated_increment(x: &PathEnsemble, delta: f64) -> Result<(f64, f64)> {
    let times = x.times();
    if times.len() < 2 {
        return Err(Error::Invalid("need at least two grid times".into()));
    }
    let h = times[1] - times[0];
    let block = (delta / h).round();
    if block < 1.0 || (block * h - delta).abs() > GRID_SLACK * delta.max(h) {
        return Err(Error::StreamMismatch(format!(
            "delta = {delta} is not a multiple of the recording step {h}"
        )));
    }
    let block = block as usize;
    let total = times[times.len() - 1] - times[0];
    let per: Vec<f64> = (0..x.n_particles())
        .map(|i| {
            (0..times.len() - 1)
                .map(|j| {
                    let jb = (j / block) * block;
                    (times[j + 1] - times[j]) * distance(x.value(i, j + 1), x.value(i, jb))
                })
                .sum::<f64>()
                / total
        })
        .collect();
    Ok(mean_stderr(&per))
}

/// Constants of the frozen dynamics used by the averaged drift.
pub fn dissipativity_gap(cfg: &MultiscaleConfig) -> f64 {
    effective_constants(&cfg.base.coeffs, &cfg.base.spec).gap
}
