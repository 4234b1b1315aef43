//! Finite spectral truncation of the state space.
//!
//! Every field lives in the eigenbasis `{e_k}` of the diagonal operator `A`,
//! with `A e_k = -lambda_k e_k`. The spectra are power laws
//!
//! ```text
//! lambda_k = c_lambda * k^a,   beta_k = c_beta * k^-b,   gamma_k = c_gamma * k^-g
//! ```
//!
//! so that every summability condition on the infinite-dimensional model
//! reduces to an inequality between exponents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when comparing `theta` against the `2 / alpha` ceiling,
/// so that `theta = 4/3, alpha = 1.5` written in decimal is accepted.
const EXPONENT_SLACK: f64 = 1e-12;

/// Power-law spectrum and noise parameters.
///
/// Serializes to the `operator` section of the JSON configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub n_modes: usize,
    /// Eigenvalue growth exponent.
    pub a: f64,
    /// Slow-noise decay exponent.
    pub b: f64,
    /// Fast-noise decay exponent.
    pub g: f64,
    pub c_lambda: f64,
    /// Slow-noise amplitude; zero switches the slow noise off.
    pub c_beta: f64,
    /// Fast-noise amplitude; zero switches the fast noise off.
    pub c_gamma: f64,
    /// Stability index, in `(1, 2)`.
    pub alpha: f64,
    /// Regularity exponent of the slow noise, in `(0, 2/alpha]`.
    pub theta: f64,
    /// Law-moment order, in `[1, alpha)`.
    pub p: f64,
}

impl OperatorSpec {
    /// `lambda_k`, with `k` counted from 1.
    pub fn lambda(&self, k: usize) -> f64 {
        self.c_lambda * (k as f64).powf(self.a)
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.c_beta * (k as f64).powf(-self.b)
    }

    pub fn gamma(&self, k: usize) -> f64 {
        self.c_gamma * (k as f64).powf(-self.g)
    }

    pub fn lambda_1(&self) -> f64 {
        self.lambda(1)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        (1..=self.n_modes).map(|k| self.lambda(k)).collect()
    }

    pub fn slow_amplitudes(&self) -> Vec<f64> {
        (1..=self.n_modes).map(|k| self.beta(k)).collect()
    }

    pub fn fast_amplitudes(&self) -> Vec<f64> {
        (1..=self.n_modes).map(|k| self.gamma(k)).collect()
    }

    /// Truncated `sum_k beta_k^alpha / lambda_k`.
    pub fn slow_noise_mass(&self) -> f64 {
        (1..=self.n_modes)
            .map(|k| self.beta(k).powf(self.alpha) / self.lambda(k))
            .sum()
    }

    /// Same spectrum with a different truncation level.
    pub fn with_modes(&self, n_modes: usize) -> Self {
        OperatorSpec {
            n_modes,
            ..self.clone()
        }
    }

    /// Range checks that make the model meaningless when violated.
    pub fn check_ranges(&self) -> Result<()> {
        let a = self.alpha;
        if !(a > 1.0 && a < 2.0) {
            return Err(Error::range("alpha", format!("alpha out of range: {a} not in (1, 2)")));
        }
        let t = self.theta;
        if !(t > 0.0 && t <= (2.0 / a) * (1.0 + EXPONENT_SLACK)) {
            return Err(Error::range(
                "theta",
                format!("theta out of range: {t} not in (0, 2/alpha = {}]", 2.0 / a),
            ));
        }
        let p = self.p;
        if !(p >= 1.0 && p < a) {
            return Err(Error::range("p", format!("p out of range: {p} not in [1, alpha = {a})")));
        }
        if self.n_modes == 0 {
            return Err(Error::range("n_modes", "at least one mode is required"));
        }
        for (name, v) in [
            ("a", self.a),
            ("b", self.b),
            ("g", self.g),
            ("c_lambda", self.c_lambda),
            ("c_beta", self.c_beta),
            ("c_gamma", self.c_gamma),
        ] {
            if !v.is_finite() {
                return Err(Error::range(name, format!("{name} must be finite")));
            }
        }
        if self.c_beta < 0.0 || self.c_gamma < 0.0 {
            return Err(Error::range("c_beta", "noise amplitudes must be nonnegative"));
        }
        Ok(())
    }
}

/// Outcome of one assumption check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub id: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn push(&mut self, id: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(AssumptionCheck {
            id: id.to_string(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| !c.passed)
    }

    pub fn get(&self, id: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    /// Turns the first failed check into an [`Error::Assumption`].
    pub fn into_result(self) -> Result<Self> {
        match self.first_failure() {
            None => Ok(self),
            Some(c) => Err(Error::Assumption {
                id: static_id(&c.id),
                detail: c.detail.clone(),
            }),
        }
    }
}

fn static_id(id: &str) -> &'static str {
    match id {
        "A1" => "A1",
        "A2" => "A2",
        "A3" => "A3",
        "B1" => "B1",
        "B2" => "B2",
        "B3" => "B3",
        _ => "assumption",
    }
}

/// Decides the spectral assumptions from the power-law exponents.
///
/// Series are never summed numerically: for `beta_k^alpha / lambda_k^s` with
/// power laws the series converges iff `alpha*b + a*s > 1`.
pub fn validate_spec(spec: &OperatorSpec) -> Result<ValidationReport> {
    spec.check_ranges()?;
    let mut report = ValidationReport::default();
    let (alpha, a) = (spec.alpha, spec.a);

    let a1 = spec.c_lambda > 0.0 && a > 0.0;
    report.push(
        "A1",
        a1,
        format!(
            "lambda_k = {}*k^{a}: lambda_1 = {} > 0, strictly increasing to infinity: {}",
            spec.c_lambda,
            spec.lambda_1(),
            if a1 { "yes" } else { "no" }
        ),
    );

    let slow_a3 = alpha * spec.b + a;
    let a3 = spec.c_beta == 0.0 || slow_a3 > 1.0;
    report.push(
        "A3",
        a3,
        if spec.c_beta == 0.0 {
            "slow noise off".to_string()
        } else {
            format!("sum beta_k^alpha/lambda_k: exponent alpha*b + a = {slow_a3} (needs > 1)")
        },
    );

    let slow_b2 = alpha * spec.b + a * (1.0 - alpha * spec.theta / 2.0);
    let fast_b2 = alpha * spec.g + a;
    let slow_ok = spec.c_beta == 0.0 || slow_b2 > 1.0;
    let fast_ok = spec.c_gamma == 0.0 || fast_b2 > 1.0;
    report.push(
        "B2",
        slow_ok && fast_ok,
        format!(
            "slow exponent alpha*b + a*(1 - alpha*theta/2) = {slow_b2}, fast exponent alpha*g + a = {fast_b2} (both need > 1)"
        ),
    );
    Ok(report)
}

/// Coordinates of a point in the truncated space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpectralField(pub Vec<f64>);

impl SpectralField {
    pub fn zeros(n: usize) -> Self {
        SpectralField(vec![0.0; n])
    }

    /// Unit vector along mode `k` (1-based) scaled by `value`.
    pub fn mode(n: usize, k: usize, value: f64) -> Self {
        let mut v = vec![0.0; n];
        v[k - 1] = value;
        SpectralField(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// The `H`-norm `|u|`.
    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_against(&self, spec: &OperatorSpec) -> Result<()> {
        if self.len() != spec.n_modes {
            return Err(Error::Dimension {
                expected: spec.n_modes,
                got: self.len(),
            });
        }
        if !self.is_finite() {
            return Err(Error::Invalid("field has non-finite coordinates".into()));
        }
        Ok(())
    }
}

impl From<Vec<f64>> for SpectralField {
    fn from(v: Vec<f64>) -> Self {
        SpectralField(v)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `e^{tA} u`: coordinate `k` is damped by `e^{-lambda_k t}`.
pub fn apply_semigroup(u: &SpectralField, t: f64, spec: &OperatorSpec) -> Result<SpectralField> {
    if !(t >= 0.0) {
        return Err(Error::range("t", format!("semigroup time must be >= 0, got {t}")));
    }
    u.check_against(spec)?;
    Ok(SpectralField(
        u.0.iter()
            .enumerate()
            .map(|(i, v)| v * (-spec.lambda(i + 1) * t).exp())
            .collect(),
    ))
}

/// `||u||_sigma = |(-A)^{sigma/2} u|`.
pub fn sobolev_norm(u: &SpectralField, sigma: f64, spec: &OperatorSpec) -> Result<f64> {
    u.check_against(spec)?;
    if !sigma.is_finite() {
        return Err(Error::range("sigma", "must be finite"));
    }
    Ok(u.0
        .iter()
        .enumerate()
        .map(|(i, v)| spec.lambda(i + 1).powf(sigma) * v * v)
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    pub fn spec(n: usize, a: f64) -> OperatorSpec {
        OperatorSpec {
            n_modes: n,
            a,
            b: 1.0,
            g: 1.0,
            c_lambda: 1.0,
            c_beta: 1.0,
            c_gamma: 1.0,
            alpha: 1.5,
            theta: 4.0 / 3.0,
            p: 1.0,
        }
    }

    #[test]
    fn exponent_tests_decide_series() {
        let s = spec(8, 2.0);
        let r = validate_spec(&s).unwrap();
        assert!(r.get("A3").unwrap().passed, "alpha*b + a = 3.5 > 1");
        // alpha*b + a*(1 - alpha*theta/2) = 1.5 + 2*0 = 1.5
        assert!(r.get("B2").unwrap().passed);
        assert!(r.get("B2").unwrap().detail.contains("= 1.5"));

        let mut bad = s.clone();
        bad.a = 0.5;
        bad.b = 0.2;
        // alpha*b + a = 0.8
        assert!(!validate_spec(&bad).unwrap().get("A3").unwrap().passed);
    }

    #[test]
    fn rejects_parameters_out_of_range() {
        let mut s = spec(4, 2.0);
        s.alpha = 2.0;
        let e = validate_spec(&s).unwrap_err().to_string();
        assert!(e.contains("alpha out of range"), "{e}");

        let mut s = spec(4, 2.0);
        s.theta = 1.4;
        assert!(validate_spec(&s).is_err());
        s.theta = 0.0;
        assert!(validate_spec(&s).is_err());

        let mut s = spec(4, 2.0);
        s.p = 1.5;
        assert!(validate_spec(&s).is_err());
        s.p = 0.9;
        assert!(validate_spec(&s).is_err());
    }

    #[test]
    fn semigroup_examples() {
        let s = spec(2, 2.0);
        let u = SpectralField(vec![1.0, 1.0]);
        let v = apply_semigroup(&u, 0.5, &s).unwrap();
        assert_abs_diff_eq!(v.0[0], 0.60653, epsilon = 1e-5);
        assert_abs_diff_eq!(v.0[1], 0.13534, epsilon = 1e-5);
        assert_eq!(apply_semigroup(&u, 0.0, &s).unwrap(), u);
        let z = SpectralField::zeros(2);
        assert_eq!(apply_semigroup(&z, 3.0, &s).unwrap(), z);
        assert!(apply_semigroup(&u, -1.0, &s).is_err());
    }

    #[test]
    fn sobolev_examples() {
        let s = spec(3, 2.0);
        let u = SpectralField(vec![1.0, 0.5, 0.25]);
        assert_abs_diff_eq!(sobolev_norm(&u, 1.0, &s).unwrap(), 1.60078, epsilon = 1e-5);
        let s2 = spec(2, 2.0);
        assert_eq!(sobolev_norm(&SpectralField(vec![3.0, 4.0]), 0.0, &s2).unwrap(), 5.0);
        assert_eq!(sobolev_norm(&SpectralField::zeros(3), 1.0, &s).unwrap(), 0.0);
        assert!(sobolev_norm(&SpectralField(vec![f64::NAN, 0.0, 0.0]), 1.0, &s).is_err());
    }

    fn field(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn semigroup_property(u in field(6), s in 0.0f64..2.0, t in 0.0f64..2.0) {
            let sp = spec(6, 2.0);
            let u = SpectralField(u);
            let two = apply_semigroup(&apply_semigroup(&u, s, &sp).unwrap(), t, &sp).unwrap();
            let one = apply_semigroup(&u, s + t, &sp).unwrap();
            for (a, b) in two.0.iter().zip(&one.0) {
                prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * (1.0 + b.abs()));
            }
        }

        #[test]
        fn contraction(u in field(6), t in 0.0f64..3.0) {
            let sp = spec(6, 2.0);
            let u = SpectralField(u);
            let v = apply_semigroup(&u, t, &sp).unwrap();
            prop_assert!(v.norm() <= (-sp.lambda_1() * t).exp() * u.norm() * (1.0 + 1e-14));
        }

        #[test]
        fn smoothing_bound(u in field(8), t in 0.01f64..2.0) {
            // max_lambda lambda^s e^{-2 lambda t} = t^{-s} (s/2)^s e^{-s}
            let sp = spec(8, 2.0);
            let u = SpectralField(u);
            for sigma in [sp.theta, 1.0] {
                let c = ((sigma / 2.0).powf(sigma) * (-sigma).exp()).sqrt();
                let v = apply_semigroup(&u, t, &sp).unwrap();
                let lhs = sobolev_norm(&v, sigma, &sp).unwrap();
                prop_assert!(lhs <= c * t.powf(-sigma / 2.0) * u.norm() * (1.0 + 1e-12));
            }
        }

        #[test]
        fn norm_monotone_in_sigma(u in field(6), s1 in 0.0f64..2.0, ds in 0.0f64..1.0) {
            let sp = spec(6, 2.0);
            let u = SpectralField(u);
            let s2 = (s1 + ds).min(2.0);
            prop_assert!(sobolev_norm(&u, s1, &sp).unwrap() <= sobolev_norm(&u, s2, &sp).unwrap() * (1.0 + 1e-14));
        }
    }
}
