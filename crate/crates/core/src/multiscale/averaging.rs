//! Averaged drift `F_bar(x, mu) = int F(x, mu, y) nu^{x,mu}(dy)`.
//!
//! Three routes:
//!
//! * closed form for `linear_test`, where `nu` has mean `a x_k / (lambda_k - c)`;
//! * Fourier quadrature for `bounded_smooth`. There the frozen modes
//!   decouple into scalar stable Ornstein-Uhlenbeck processes, so the
//!   invariant law of mode `k` is `m_k + s_k S` with
//!   `s_k = gamma_k (alpha (lambda_k - c))^{-1/alpha}`, and
//!   `E tanh(z + s S) = int_0^inf sin(w z) e^{-(s w)^alpha} / sinh(pi w / 2) dw`;
//! * time averages along one long frozen path, for any coefficients.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::coefficients::{effective_constants, BuiltinFamily, CoefficientSet};
use crate::error::{Error, Result};
use crate::noise::RngStream;
use crate::spectral::{OperatorSpec, SpectralField};

use super::frozen::{ergodic_average, ergodic_stream, ErgodicSettings, FrozenInput};

const GL_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Upper frequency cut-off; the integrand is below `e^{-12 pi}` beyond it.
const OMEGA_MAX: f64 = 24.0;
const PANEL: f64 = 1.0 / 64.0;
const TABLE_MAX: f64 = 64.0;
const TABLE_STEP: f64 = 1.0 / 32.0;
/// Beyond this the heavy-tail asymptotic replaces the quadrature.
const DIRECT_MAX: f64 = 4096.0;

/// Appends 8-point Gauss-Legendre nodes and weights on `[lo, hi]`.
fn push_panel(lo: f64, hi: f64, nodes: &mut Vec<f64>, weights: &mut Vec<f64>) {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
        nodes.push(mid - half * x);
        weights.push(half * w);
        nodes.push(mid + half * x);
        weights.push(half * w);
    }
}

/// Frequency grid: geometrically graded panels near 0 (where `w^alpha` is not
/// smooth), then uniform panels of width `width` up to the cut-off.
fn omega_grid(width: f64) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let mut hi = width;
    for _ in 0..30 {
        push_panel(0.5 * hi, hi, &mut nodes, &mut weights);
        hi *= 0.5;
    }
    push_panel(0.0, hi, &mut nodes, &mut weights);
    let panels = (OMEGA_MAX / width).ceil() as usize;
    for i in 1..panels {
        push_panel(i as f64 * width, (i + 1) as f64 * width, &mut nodes, &mut weights);
    }
    (nodes, weights)
}

/// `phi_s(z) = E tanh(z + s S)` for a standard symmetric stable `S`.
#[derive(Clone, Debug)]
pub struct SmoothedTanh {
    s: f64,
    alpha: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl SmoothedTanh {
    pub fn new(s: f64, alpha: f64) -> Self {
        if s == 0.0 {
            return SmoothedTanh {
                s,
                alpha,
                values: Vec::new(),
                slopes: Vec::new(),
            };
        }
        let (omega, w) = omega_grid(PANEL);
        let kernel: Vec<f64> = omega
            .iter()
            .zip(&w)
            .map(|(o, wt)| wt * (-(s * o).powf(alpha)).exp() / (0.5 * PI * o).sinh())
            .collect();
        let n = (TABLE_MAX / TABLE_STEP).round() as usize + 1;
        let mut values = vec![0.0; n];
        let mut slopes = vec![0.0; n];
        for (j, (v, d)) in values.iter_mut().zip(slopes.iter_mut()).enumerate() {
            let z = j as f64 * TABLE_STEP;
            let (mut sv, mut dv) = (0.0, 0.0);
            for (o, kw) in omega.iter().zip(&kernel) {
                let (sn, cs) = (o * z).sin_cos();
                sv += kw * sn;
                dv += kw * o * cs;
            }
            *v = sv;
            *d = dv;
        }
        SmoothedTanh {
            s,
            alpha,
            values,
            slopes,
        }
    }

    pub fn scale(&self) -> f64 {
        self.s
    }

    /// Direct quadrature, used outside the table.
    fn direct(&self, z: f64) -> f64 {
        let width = PANEL.min(1.0 / z);
        let (omega, w) = omega_grid(width);
        omega
            .iter()
            .zip(&w)
            .map(|(o, wt)| wt * (o * z).sin() * (-(self.s * o).powf(self.alpha)).exp() / (0.5 * PI * o).sinh())
            .sum()
    }

    /// `1 - 2 P(s S < -z)` with the stable tail `P(S > u) ~ Gamma(alpha) sin(pi alpha/2)/pi u^{-alpha}`.
    fn tail(&self, z: f64) -> f64 {
        let c = gamma(self.alpha) * (0.5 * PI * self.alpha).sin() / PI;
        1.0 - 2.0 * c * (z / self.s).powf(-self.alpha)
    }

    pub fn eval(&self, z: f64) -> f64 {
        if self.s == 0.0 {
            return z.tanh();
        }
        let a = z.abs();
        let v = if a <= TABLE_MAX {
            let pos = a / TABLE_STEP;
            let j = (pos.floor() as usize).min(self.values.len() - 2);
            let t = pos - j as f64;
            let h = TABLE_STEP;
            let (y0, y1) = (self.values[j], self.values[j + 1]);
            let (d0, d1) = (self.slopes[j] * h, self.slopes[j + 1] * h);
            let t2 = t * t;
            let t3 = t2 * t;
            (2.0 * t3 - 3.0 * t2 + 1.0) * y0
                + (t3 - 2.0 * t2 + t) * d0
                + (-2.0 * t3 + 3.0 * t2) * y1
                + (t3 - t2) * d1
        } else if a <= DIRECT_MAX {
            self.direct(a)
        } else {
            self.tail(a)
        };
        v.copysign(z)
    }
}

/// Quadrature tables for the active modes of `bounded_smooth`.
#[derive(Clone, Debug)]
pub struct StableQuadrature {
    a: f64,
    b_mu: f64,
    /// `lambda_k - c` for the active modes.
    rates: Vec<f64>,
    tables: Vec<SmoothedTanh>,
}

impl StableQuadrature {
    fn new(spec: &OperatorSpec, a: f64, b_mu: f64, c: f64, k: usize) -> Self {
        let rates: Vec<f64> = (1..=k).map(|i| spec.lambda(i) - c).collect();
        let tables = rates
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let s = spec.gamma(i + 1) * (spec.alpha * r).powf(-1.0 / spec.alpha);
                SmoothedTanh::new(s, spec.alpha)
            })
            .collect();
        StableQuadrature {
            a,
            b_mu,
            rates,
            tables,
        }
    }

    fn eval(&self, x: &[f64], mu_stat: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, (rate, table)) in self.rates.iter().zip(&self.tables).enumerate() {
            let mean = self.a * x[i].tanh() / rate;
            out[i] = self.a * table.eval(x[i] + mean);
        }
        out[0] += self.b_mu * mu_stat.min(1.0);
    }
}

type CacheKey = Vec<i64>;

/// Ergodic estimator with a quantized cache.
pub struct ErgodicCache {
    settings: ErgodicSettings,
    cache: RwLock<HashMap<CacheKey, Vec<f64>>>,
}

impl std::fmt::Debug for ErgodicCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ErgodicCache")
            .field("settings", &self.settings)
            .field("entries", &self.cache.read().map(|c| c.len()).unwrap_or(0))
            .finish()
    }
}

/// How the averaged drift is computed.
#[derive(Clone, Debug)]
pub enum AveragedMode {
    /// `F` ignores `y`: `F_bar = F`.
    Direct,
    AnalyticLinear { a: f64, c: f64 },
    StableQuadrature(Arc<StableQuadrature>),
    Ergodic(Arc<ErgodicCache>),
}

/// The averaged drift bound to a model.
#[derive(Clone, Debug)]
pub struct AveragedDrift {
    spec: OperatorSpec,
    coeffs: CoefficientSet,
    mode: AveragedMode,
}

impl AveragedDrift {
    /// Closed form; only for `linear_test`.
    pub fn analytic_linear(spec: &OperatorSpec, coeffs: &CoefficientSet) -> Result<Self> {
        effective_constants(coeffs, spec).require_dissipative()?;
        match coeffs.family {
            Some(BuiltinFamily::LinearTest { a, c }) => Ok(Self::bind(spec, coeffs, AveragedMode::AnalyticLinear { a, c })),
            _ => Err(Error::Invalid(
                "analytic averaged drift requires the linear_test family".into(),
            )),
        }
    }

    /// Fourier quadrature; only for `bounded_smooth`.
    pub fn stable_quadrature(spec: &OperatorSpec, coeffs: &CoefficientSet) -> Result<Self> {
        effective_constants(coeffs, spec).require_dissipative()?;
        match coeffs.family {
            Some(BuiltinFamily::BoundedSmooth { a, b_mu, c, k }) => {
                if k > spec.n_modes {
                    return Err(Error::range("K", "active modes exceed n_modes"));
                }
                let q = StableQuadrature::new(spec, a, b_mu, c, k);
                Ok(Self::bind(spec, coeffs, AveragedMode::StableQuadrature(Arc::new(q))))
            }
            _ => Err(Error::Invalid(
                "quadrature averaged drift requires the bounded_smooth family".into(),
            )),
        }
    }

    /// Time averages along frozen paths, cached on a `(x, mu_stat)` grid.
    pub fn ergodic(spec: &OperatorSpec, coeffs: &CoefficientSet, settings: ErgodicSettings) -> Result<Self> {
        effective_constants(coeffs, spec).require_dissipative()?;
        if !(settings.resolution > 0.0) {
            return Err(Error::range("resolution", "cache resolution must be positive"));
        }
        let cache = ErgodicCache {
            settings,
            cache: RwLock::new(HashMap::new()),
        };
        Ok(Self::bind(spec, coeffs, AveragedMode::Ergodic(Arc::new(cache))))
    }

    /// Exact route for built-in families, ergodic otherwise.
    pub fn best_available(spec: &OperatorSpec, coeffs: &CoefficientSet, settings: ErgodicSettings) -> Result<Self> {
        match coeffs.family {
            Some(BuiltinFamily::LinearTest { .. }) => Self::analytic_linear(spec, coeffs),
            Some(BuiltinFamily::BoundedSmooth { .. }) => Self::stable_quadrature(spec, coeffs),
            None => Self::ergodic(spec, coeffs, settings),
        }
    }

    fn bind(spec: &OperatorSpec, coeffs: &CoefficientSet, mode: AveragedMode) -> Self {
        let mode = if coeffs.maps.slow_uses_fast() {
            mode
        } else {
            AveragedMode::Direct
        };
        AveragedDrift {
            spec: spec.clone(),
            coeffs: coeffs.clone(),
            mode,
        }
    }

    pub fn mode(&self) -> &AveragedMode {
        &self.mode
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            AveragedMode::Direct => "direct",
            AveragedMode::AnalyticLinear { .. } => "analytic_linear",
            AveragedMode::StableQuadrature(_) => "stable_quadrature",
            AveragedMode::Ergodic(_) => "ergodic",
        }
    }

    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    /// `F_bar(x, mu)` into `out`. The ergodic mode evaluates at the nearest
    /// cache grid point with a seed derived from that point, so the value is
    /// a pure function of the grid point.
    pub fn eval(&self, x: &[f64], mu_stat: f64, out: &mut [f64]) -> Result<()> {
        match &self.mode {
            AveragedMode::Direct => {
                let zeros = vec![0.0; x.len()];
                self.coeffs.maps.slow(x, mu_stat, &zeros, out);
            }
            AveragedMode::AnalyticLinear { a, c } => {
                for (k, (o, xv)) in out.iter_mut().zip(x).enumerate() {
                    *o = a * xv / (self.spec.lambda(k + 1) - c);
                }
            }
            AveragedMode::StableQuadrature(q) => q.eval(x, mu_stat, out),
            AveragedMode::Ergodic(cache) => {
                let res = cache.settings.resolution;
                let key: CacheKey = x
                    .iter()
                    .chain(std::iter::once(&mu_stat))
                    .map(|v| (v / res).round() as i64)
                    .collect();
                if let Some(v) = cache.cache.read().expect("cache lock").get(&key) {
                    out.copy_from_slice(v);
                    return Ok(());
                }
                let centre: Vec<f64> = key.iter().map(|q| *q as f64 * res).collect();
                let (xq, mq) = centre.split_at(x.len());
                let mut rng = ergodic_stream(cache.settings.seed, key_hash(&key));
                let zeros = vec![0.0; x.len()];
                let (v, _) = ergodic_average(xq, mq[0], &zeros, &self.spec, &self.coeffs, &cache.settings, &mut rng)?;
                out.copy_from_slice(&v);
                cache.cache.write().expect("cache lock").insert(key, v);
            }
        }
        Ok(())
    }
}

fn key_hash(key: &[i64]) -> u64 {
    key.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ (*v as u64)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Point estimate of `F_bar` with a per-coordinate standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbarEstimate {
    pub value: SpectralField,
    /// Zero for the exact routes.
    pub stderr: SpectralField,
}

/// `F_bar(x, mu)` at `input`.
///
/// The ergodic mode runs a fresh long path from `input.y0` on `rng` (burn-in
/// `T_b`, window `T_a`) and reports batch-means standard errors; it bypasses
/// the cache used by [`AveragedDrift::eval`].
pub fn estimate_fbar(drift: &AveragedDrift, input: &FrozenInput, rng: &mut RngStream) -> Result<FbarEstimate> {
    input.check(&drift.spec)?;
    let n = drift.spec.n_modes;
    match &drift.mode {
        AveragedMode::Ergodic(cache) => {
            let (v, se) = ergodic_average(
                input.x.as_slice(),
                input.mu_stat,
                input.y0.as_slice(),
                &drift.spec,
                &drift.coeffs,
                &cache.settings,
                rng,
            )?;
            Ok(FbarEstimate {
                value: SpectralField(v),
                stderr: SpectralField(se),
            })
        }
        _ => {
            let mut out = vec![0.0; n];
            drift.eval(input.x.as_slice(), input.mu_stat, &mut out)?;
            Ok(FbarEstimate {
                value: SpectralField(out),
                stderr: SpectralField::zeros(n),
            })
        }
    }
}

/// Largest observed `|F_bar(x, mu) - F_bar(x', mu')|` relative to the
/// declared bound `L (|x - x'| + |m - m'|)`, `L = C (1 + C / gap)`.
///
/// The drift sees `mu` only through `m = (mu |.|^p)^{1/p}` and
/// `|m - m'| <= W_p(mu, mu')`, so the moment difference is the tightest
/// law distance compatible with the pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbarProbe {
    pub n_probes: usize,
    pub bound: f64,
    pub max_ratio: f64,
    pub passed: bool,
}

/// Random pairs at coordinate scales 0.1, 1 and 5 in turn.
pub fn probe_fbar_lipschitz(drift: &AveragedDrift, n_probes: usize, rng: &mut RngStream) -> Result<FbarProbe> {
    if n_probes == 0 {
        return Err(Error::Invalid("probe needs at least one pair".into()));
    }
    let eff = effective_constants(&drift.coeffs, &drift.spec);
    let n = drift.spec.n_modes;
    let (mut fa, mut fb) = (vec![0.0; n], vec![0.0; n]);
    let mut max_ratio: f64 = 0.0;
    for i in 0..n_probes {
        let scale = [0.1, 1.0, 5.0][i % 3];
        let mut draw = || scale * (2.0 * rng.uniform() - 1.0);
        let xa: Vec<f64> = (0..n).map(|_| draw()).collect();
        let xb: Vec<f64> = (0..n).map(|_| draw()).collect();
        let ma = draw().abs();
        let mb = draw().abs();
        drift.eval(&xa, ma, &mut fa)?;
        drift.eval(&xb, mb, &mut fb)?;
        let gap = crate::spectral::distance(&xa, &xb) + (ma - mb).abs();
        if gap > 0.0 {
            max_ratio = max_ratio.max(crate::spectral::distance(&fa, &fb) / (eff.fbar_lip * gap));
        }
    }
    Ok(FbarProbe {
        n_probes,
        bound: eff.fbar_lip,
        max_ratio,
        passed: max_ratio <= 1.0 + 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{Channel, StableSampler, StreamId};
    use crate::spectral::tests::spec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_scale_integral_is_tanh() {
        // Quadrature with the noise factor switched off reproduces tanh.
        let (omega, w) = omega_grid(PANEL);
        for z in [0.1, 0.7, 2.5, 10.0, 40.0] {
            let v: f64 = omega
                .iter()
                .zip(&w)
                .map(|(o, wt)| wt * (o * z).sin() / (0.5 * PI * o).sinh())
                .sum();
            assert_abs_diff_eq!(v, f64::tanh(z), epsilon = 1e-12);
        }
    }

    #[test]
    fn smoothed_tanh_matches_monte_carlo() {
        let alpha = 1.5;
        let s = 0.8;
        let table = SmoothedTanh::new(s, alpha);
        let sampler = StableSampler::new(alpha).unwrap();
        let mut rng = RngStream::new(8, StreamId::new(0, 0, Channel::Aux));
        let draws: Vec<f64> = (0..400_000).map(|_| s * sampler.sample(&mut rng)).collect();
        for z in [0.0, 0.3, -1.2, 3.0, 20.0] {
            let vals: Vec<f64> = draws.iter().map(|d| (z + d).tanh()).collect();
            let (m, se) = crate::experiments::stats::mean_stderr(&vals);
            assert!((table.eval(z) - m).abs() < 4.0 * se + 1e-12, "z={z}: {} vs {m} +- {se}", table.eval(z));
        }
    }

    #[test]
    fn smoothed_tanh_is_odd_and_continuous_at_table_edge() {
        let t = SmoothedTanh::new(0.5, 1.7);
        assert_eq!(t.eval(0.0), 0.0);
        assert_abs_diff_eq!(t.eval(1.3), -t.eval(-1.3));
        let inside = t.eval(TABLE_MAX - 1e-9);
        let outside = t.eval(TABLE_MAX + 1e-9);
        assert_abs_diff_eq!(inside, outside, epsilon = 1e-9);
        let near = t.eval(DIRECT_MAX - 1e-6);
        let far = t.eval(DIRECT_MAX + 1e-6);
        assert_abs_diff_eq!(near, far, epsilon = 1e-6);
        for z in [0.05, 0.37, 5.01, 33.3] {
            assert_abs_diff_eq!(t.eval(z), t.direct(z), epsilon = 1e-8);
        }
    }

    #[test]
    fn linear_closed_form() {
        let s = spec(1, 2.0);
        let c = CoefficientSet::builtin(BuiltinFamily::LinearTest { a: 1.0, c: 0.5 }, 1.0).unwrap();
        let d = AveragedDrift::analytic_linear(&s, &c).unwrap();
        let mut out = [0.0];
        d.eval(&[2.0], 0.0, &mut out).unwrap();
        assert_eq!(out[0], 4.0);
        let smooth = CoefficientSet::builtin(BuiltinFamily::BoundedSmooth { a: 1.0, b_mu: 0.0, c: 0.5, k: 1 }, 1.0).unwrap();
        assert!(AveragedDrift::analytic_linear(&s, &smooth).is_err());
    }

    #[test]
    fn y_independent_f_is_returned_directly() {
        let s = spec(2, 2.0);
        let c = CoefficientSet::builtin(BuiltinFamily::BoundedSmooth { a: 0.0, b_mu: 0.7, c: 0.5, k: 2 }, 1.0).unwrap();
        for d in [
            AveragedDrift::stable_quadrature(&s, &c).unwrap(),
            AveragedDrift::ergodic(&s, &c, ErgodicSettings::default()).unwrap(),
        ] {
            assert_eq!(d.mode_name(), "direct");
            let mut out = [0.0; 2];
            d.eval(&[0.3, 0.1], 0.5, &mut out).unwrap();
            assert_eq!(out, [0.35, 0.0]);
        }
    }

    #[test]
    fn ergodic_cache_is_deterministic() {
        let s = spec(2, 2.0);
        let c = CoefficientSet::builtin(BuiltinFamily::BoundedSmooth { a: 1.0, b_mu: 0.5, c: 0.5, k: 2 }, 1.0).unwrap();
        let settings = ErgodicSettings { window: Some(20.0), ..Default::default() };
        let d1 = AveragedDrift::ergodic(&s, &c, settings).unwrap();
        let d2 = AveragedDrift::ergodic(&s, &c, settings).unwrap();
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        d1.eval(&[0.3, -0.2], 0.4, &mut a).unwrap();
        d2.eval(&[0.30001, -0.2], 0.4, &mut b).unwrap();
        assert_eq!(a, b);
    }
}
