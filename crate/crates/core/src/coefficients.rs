//! Drift maps `B(x, mu)`, `F(x, mu, y)`, `G(x, mu, y)` with declared constants.
//!
//! The law argument reaches every map only through the scalar statistic
//! `m = (mu(|.|^p))^{1/p}`. Since `|m(mu_1) - m(mu_2)| <= W_p(mu_1, mu_2)`,
//! a map that is `L`-Lipschitz in `m` is `L`-Lipschitz in `mu` for `W_p`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{moment_of_rows, wasserstein_exact, EmpiricalMeasure};
use crate::noise::RngStream;
use crate::spectral::{distance, norm, validate_spec, OperatorSpec, ValidationReport};

/// Pointwise evaluation of the three drifts. Implementations write into `out`
/// (length `N`) and must be deterministic.
pub trait DriftMaps: Send + Sync {
    /// Single-scale drift `B(x, mu)`.
    fn single(&self, x: &[f64], mu_stat: f64, out: &mut [f64]);
    /// Slow drift `F(x, mu, y)`.
    fn slow(&self, x: &[f64], mu_stat: f64, y: &[f64], out: &mut [f64]);
    /// Fast drift `G(x, mu, y)`; `mu` is the law of the slow component.
    fn fast(&self, x: &[f64], mu_stat: f64, y: &[f64], out: &mut [f64]);
    /// `false` when `F` ignores `y`.
    fn slow_uses_fast(&self) -> bool {
        true
    }
    /// `false` when `G` ignores `(x, mu)`.
    fn fast_uses_slow(&self) -> bool {
        true
    }
}

/// Built-in coefficient families selectable from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum BuiltinFamily {
    /// `F_k = a tanh(x_k + y_k) 1{k<=K} + b_mu min(1, m) 1{k=1}`,
    /// `G_k = a tanh(x_k) 1{k<=K} + c y_k`, `B = F(x, mu, 0)`.
    BoundedSmooth { a: f64, b_mu: f64, c: f64, k: usize },
    /// `G = a x + c y`, `F = y`, `B = a x`. Unbounded `F`; oracle use only.
    LinearTest { a: f64, c: f64 },
}

impl BuiltinFamily {
    /// Default number of active modes for `bounded_smooth`.
    pub fn default_active_modes(n_modes: usize) -> usize {
        n_modes.min(4)
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundedSmooth {
    a: f64,
    b_mu: f64,
    c: f64,
    k: usize,
}

impl DriftMaps for BoundedSmooth {
    fn single(&self, x: &[f64], mu_stat: f64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = if i < self.k { self.a * x[i].tanh() } else { 0.0 };
        }
        out[0] += self.b_mu * mu_stat.min(1.0);
    }

    fn slow(&self, x: &[f64], mu_stat: f64, y: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = if i < self.k { self.a * (x[i] + y[i]).tanh() } else { 0.0 };
        }
        out[0] += self.b_mu * mu_stat.min(1.0);
    }

    fn fast(&self, x: &[f64], _mu_stat: f64, y: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let active = if i < self.k { self.a * x[i].tanh() } else { 0.0 };
            *o = active + self.c * y[i];
        }
    }

    fn slow_uses_fast(&self) -> bool {
        self.a != 0.0 && self.k > 0
    }

    fn fast_uses_slow(&self) -> bool {
        self.a != 0.0 && self.k > 0
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearTest {
    a: f64,
    c: f64,
}

impl DriftMaps for LinearTest {
    fn single(&self, x: &[f64], _mu_stat: f64, out: &mut [f64]) {
        for (o, xv) in out.iter_mut().zip(x) {
            *o = self.a * xv;
        }
    }

    fn slow(&self, _x: &[f64], _mu_stat: f64, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }

    fn fast(&self, x: &[f64], _mu_stat: f64, y: &[f64], out: &mut [f64]) {
        for ((o, xv), yv) in out.iter_mut().zip(x).zip(y) {
            *o = self.a * xv + self.c * yv;
        }
    }

    fn fast_uses_slow(&self) -> bool {
        self.a != 0.0
    }
}

/// Drifts together with the constants the assumptions are stated in.
#[derive(Clone)]
pub struct CoefficientSet {
    pub maps: Arc<dyn DriftMaps>,
    /// Lipschitz constant `C` of `B`, `F` and of `G` in `(x, mu)`.
    pub lip_c: f64,
    /// Lipschitz constant `L_G` of `G` in `y`.
    pub lip_g_y: f64,
    /// Moment order of the law statistic.
    pub p: f64,
    /// `Some(C)` when `sup_{x,y} |F(x, mu, y)| <= C (1 + m(mu))`.
    pub f_envelope: Option<f64>,
    pub family: Option<BuiltinFamily>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("lip_c", &self.lip_c)
            .field("lip_g_y", &self.lip_g_y)
            .field("p", &self.p)
            .field("f_envelope", &self.f_envelope)
            .field("family", &self.family)
            .finish()
    }
}

impl CoefficientSet {
    pub fn builtin(family: BuiltinFamily, p: f64) -> Result<Self> {
        match family {
            BuiltinFamily::BoundedSmooth { a, b_mu, c, k } => {
                for (name, v) in [("a", a), ("b_mu", b_mu), ("c", c)] {
                    if !v.is_finite() {
                        return Err(Error::range(name, format!("{name} must be finite")));
                    }
                }
                Ok(CoefficientSet {
                    maps: Arc::new(BoundedSmooth { a, b_mu, c, k }),
                    lip_c: a.abs().max(b_mu.abs()),
                    lip_g_y: c.abs(),
                    p,
                    f_envelope: Some(a.abs() * (k as f64).sqrt() + b_mu.abs()),
                    family: Some(family),
                })
            }
            BuiltinFamily::LinearTest { a, c } => Ok(CoefficientSet {
                maps: Arc::new(LinearTest { a, c }),
                lip_c: a.abs().max(1.0),
                lip_g_y: c.abs(),
                p,
                f_envelope: None,
                family: Some(family),
            }),
        }
    }

    /// User-supplied drifts with declared constants.
    pub fn custom(
        maps: Arc<dyn DriftMaps>,
        lip_c: f64,
        lip_g_y: f64,
        p: f64,
        f_envelope: Option<f64>,
    ) -> Self {
        CoefficientSet {
            maps,
            lip_c,
            lip_g_y,
            p,
            f_envelope,
            family: None,
        }
    }

    pub fn f_bounded(&self) -> bool {
        self.f_envelope.is_some()
    }

    /// Number of modes a built-in family needs at least.
    fn check_modes(&self, spec: &OperatorSpec) -> Result<()> {
        if let Some(BuiltinFamily::BoundedSmooth { k, .. }) = self.family {
            if k > spec.n_modes {
                return Err(Error::range(
                    "K",
                    format!("K = {k} exceeds the number of modes {}", spec.n_modes),
                ));
            }
        }
        Ok(())
    }
}

/// Declared constants and the dissipativity gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConstants {
    pub lip_c: f64,
    pub lip_g_y: f64,
    /// `lambda_1 - L_G`.
    pub gap: f64,
    /// Lipschitz constant of the averaged drift, `C (1 + C / gap)`.
    pub fbar_lip: f64,
    pub dissipative: bool,
}

impl EffectiveConstants {
    pub fn require_dissipative(&self) -> Result<()> {
        if self.dissipative {
            Ok(())
        } else {
            Err(Error::Assumption {
                id: "B3",
                detail: dissipative_failure(self.gap),
            })
        }
    }
}

fn dissipative_failure(gap: f64) -> String {
    format!("lambda_1 - L_G = {gap} <= 0 (strong dissipative condition violated)")
}

pub fn effective_constants(coeffs: &CoefficientSet, spec: &OperatorSpec) -> EffectiveConstants {
    let gap = spec.lambda_1() - coeffs.lip_g_y;
    let dissipative = gap > 0.0;
    EffectiveConstants {
        lip_c: coeffs.lip_c,
        lip_g_y: coeffs.lip_g_y,
        gap,
        fbar_lip: if dissipative {
            coeffs.lip_c * (1.0 + coeffs.lip_c / gap)
        } else {
            f64::INFINITY
        },
        dissipative,
    }
}

/// Full assumption report for a model: the spectral checks plus the
/// coefficient-level ones.
pub fn validate_model(spec: &OperatorSpec, coeffs: &CoefficientSet) -> Result<ValidationReport> {
    let spectral = validate_spec(spec)?;
    coeffs.check_modes(spec)?;
    if (coeffs.p - spec.p).abs() > 0.0 {
        return Err(Error::Invalid(format!(
            "coefficient moment order {} differs from spec p = {}",
            coeffs.p, spec.p
        )));
    }
    let eff = effective_constants(coeffs, spec);
    let mut report = ValidationReport::default();
    let take = |id: &str| spectral.get(id).cloned().expect("validate_spec emits A1, A3, B2");
    report.checks.push(take("A1"));
    let lip_ok = coeffs.lip_c.is_finite() && coeffs.lip_c >= 0.0;
    report.push("A2", lip_ok, format!("B Lipschitz with declared C = {}", coeffs.lip_c));
    report.checks.push(take("A3"));
    let b1_ok = lip_ok && coeffs.lip_g_y.is_finite() && coeffs.lip_g_y >= 0.0;
    report.push(
        "B1",
        b1_ok,
        format!("F, G Lipschitz with declared C = {}, L_G = {}", coeffs.lip_c, coeffs.lip_g_y),
    );
    report.checks.push(take("B2"));
    let bound = match coeffs.f_envelope {
        Some(c) => format!("F bounded, sup|F| <= {c} (1 + m)"),
        None => "F unbounded (oracle family; averaging-rate estimates refuse it)".to_string(),
    };
    if eff.dissipative {
        report.push("B3", true, format!("lambda_1 - L_G = {} > 0; {bound}", eff.gap));
    } else {
        report.push("B3", false, dissipative_failure(eff.gap));
    }
    Ok(report)
}

/// Largest observed ratio of each drift difference to its declared bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n_probes: usize,
    pub b_ratio: f64,
    pub f_ratio: f64,
    pub g_ratio: f64,
    /// `sup |F| / (C (1 + m))` when an envelope is declared.
    pub envelope_ratio: Option<f64>,
    pub passed: bool,
}

const PROBE_TOLERANCE: f64 = 1e-9;
const PROBE_PARTICLES: usize = 8;

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Random probe pairs for the Lipschitz and envelope bounds.
pub fn probe_lipschitz(
    coeffs: &CoefficientSet,
    spec: &OperatorSpec,
    n_probes: usize,
    rng: &mut RngStream,
) -> Result<ProbeReport> {
    probe_lipschitz_scaled(coeffs, spec, n_probes, 1.0, rng)
}

/// [`probe_lipschitz`] with every probe coordinate multiplied by `scale`.
pub fn probe_lipschitz_scaled(
    coeffs: &CoefficientSet,
    spec: &OperatorSpec,
    n_probes: usize,
    scale: f64,
    rng: &mut RngStream,
) -> Result<ProbeReport> {
    if n_probes == 0 {
        return Err(Error::Invalid("probe_lipschitz needs at least one probe".into()));
    }
    coeffs.check_modes(spec)?;
    let n = spec.n_modes;
    let p = coeffs.p;
    let maps = &coeffs.maps;
    let (c, lg) = (coeffs.lip_c, coeffs.lip_g_y);
    let draw = |len: usize, rng: &mut RngStream| -> Vec<f64> {
        // Mixture of scales so both the linear and saturated regimes of tanh are hit.
        let s = scale * [0.1, 1.0, 5.0][(rng.next_u64() % 3) as usize];
        (0..len).map(|_| s * rng.normal()).collect()
    };
    let mut report = ProbeReport {
        n_probes,
        b_ratio: 0.0,
        f_ratio: 0.0,
        g_ratio: 0.0,
        envelope_ratio: coeffs.f_envelope.map(|_| 0.0),
        passed: true,
    };
    let (mut o1, mut o2) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..n_probes {
        let x1 = draw(n, rng);
        let x2 = draw(n, rng);
        let y1 = draw(n, rng);
        let y2 = draw(n, rng);
        let mu1 = EmpiricalMeasure::new(n, draw(n * PROBE_PARTICLES, rng))?;
        let mu2 = EmpiricalMeasure::new(n, draw(n * PROBE_PARTICLES, rng))?;
        let m1 = moment_of_rows(mu1.as_slice(), n, p);
        let m2 = moment_of_rows(mu2.as_slice(), n, p);
        let w = wasserstein_exact(&mu1, &mu2, p)?;
        let dx = distance(&x1, &x2);
        let dy = distance(&y1, &y2);

        maps.single(&x1, m1, &mut o1);
        maps.single(&x2, m2, &mut o2);
        report.b_ratio = report.b_ratio.max(ratio(distance(&o1, &o2), c * (dx + w)));

        maps.slow(&x1, m1, &y1, &mut o1);
        if let (Some(env), Some(r)) = (coeffs.f_envelope, report.envelope_ratio.as_mut()) {
            *r = r.max(ratio(norm(&o1), env * (1.0 + m1)));
        }
        maps.slow(&x2, m2, &y2, &mut o2);
        report.f_ratio = report.f_ratio.max(ratio(distance(&o1, &o2), c * (dx + w + dy)));

        maps.fast(&x1, m1, &y1, &mut o1);
        maps.fast(&x2, m2, &y2, &mut o2);
        report.g_ratio = report.g_ratio.max(ratio(distance(&o1, &o2), c * (dx + w) + lg * dy));
    }
    let limit = 1.0 + PROBE_TOLERANCE;
    report.passed = report.b_ratio <= limit
        && report.f_ratio <= limit
        && report.g_ratio <= limit
        && report.envelope_ratio.is_none_or(|r| r <= limit);
    Ok(report)
}
