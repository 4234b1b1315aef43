//! Equal-weight empirical measures, their moments and Wasserstein distances.

mod assignment;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::RngStream;
use crate::spectral::{distance, norm, SpectralField};

pub use assignment::solve as solve_assignment;

/// Largest particle count handled by the exact assignment solver.
pub const EXACT_LIMIT: usize = 256;

/// `M` particles in `N` modes, stored row-major (`M x N`), each with weight `1/M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    n_modes: usize,
    data: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(n_modes: usize, data: Vec<f64>) -> Result<Self> {
        if n_modes == 0 || data.is_empty() || !data.len().is_multiple_of(n_modes) {
            return Err(Error::Invalid(format!(
                "empirical measure needs a nonempty M x {n_modes} matrix, got {} values",
                data.len()
            )));
        }
        Ok(EmpiricalMeasure { n_modes, data })
    }

    pub fn from_fields(fields: &[SpectralField]) -> Result<Self> {
        let n = fields.first().map(|f| f.len()).unwrap_or(0);
        if fields.iter().any(|f| f.len() != n) {
            return Err(Error::Invalid("particles have different lengths".into()));
        }
        Self::new(n, fields.iter().flat_map(|f| f.0.iter().copied()).collect())
    }

    /// `M` copies of one point.
    pub fn dirac(point: &SpectralField, m: usize) -> Result<Self> {
        Self::new(point.len(), point.0.repeat(m))
    }

    pub fn n_particles(&self) -> usize {
        self.data.len() / self.n_modes
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_modes..(i + 1) * self.n_modes]
    }

    pub fn particles(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_modes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `((1/M) sum |x_i|^p)^{1/p}`.
pub fn p_moment(mu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    check_p(p)?;
    Ok(moment_of_rows(mu.as_slice(), mu.n_modes(), p))
}

pub(crate) fn moment_of_rows(data: &[f64], n_modes: usize, p: f64) -> f64 {
    let m = data.len() / n_modes;
    let s: f64 = data.chunks_exact(n_modes).map(|x| norm(x).powf(p)).sum();
    (s / m as f64).powf(1.0 / p)
}

fn check_p(p: f64) -> Result<()> {
    if p >= 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::range("p", format!("p out of range: {p} must be >= 1")))
    }
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.n_modes() != nu.n_modes() {
        return Err(Error::Dimension {
            expected: mu.n_modes(),
            got: nu.n_modes(),
        });
    }
    if mu.n_particles() != nu.n_particles() {
        return Err(Error::Invalid(format!(
            "particle counts differ: {} vs {}",
            mu.n_particles(),
            nu.n_particles()
        )));
    }
    Ok(())
}

/// Exact `W_p` between equal-size empirical measures via optimal assignment.
pub fn wasserstein_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    check_p(p)?;
    check_pair(mu, nu)?;
    let m = mu.n_particles();
    if m > EXACT_LIMIT {
        return Err(Error::Invalid(format!(
            "exact solver limited to M <= {EXACT_LIMIT}, got {m}; use wasserstein_sliced"
        )));
    }
    let cost: Vec<f64> = (0..m * m)
        .map(|idx| distance(mu.particle(idx / m), nu.particle(idx % m)).powf(p))
        .collect();
    let perm = solve_assignment(&cost, m);
    let total: f64 = perm.iter().enumerate().map(|(i, j)| cost[i * m + j]).sum();
    Ok((total.max(0.0) / m as f64).powf(1.0 / p))
}

/// One-dimensional `W_p^p` between equal-size samples (sorted coupling).
fn w1d_pow(a: &mut [f64], b: &mut [f64], p: f64) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs().powf(p)).sum::<f64>() / a.len() as f64
}

/// Sliced estimator: mean over random unit directions of the projected
/// one-dimensional `W_p`.
pub fn wasserstein_sliced(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: f64,
    n_projections: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    check_p(p)?;
    check_pair(mu, nu)?;
    if n_projections == 0 {
        return Err(Error::Invalid("wasserstein_sliced needs at least one projection".into()));
    }
    let n = mu.n_modes();
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let len = norm(&dir);
        dir.iter_mut().for_each(|d| *d /= len);
        total += sliced_along(mu, nu, p, &dir);
    }
    Ok(total / n_projections as f64)
}

/// Projected `W_p` along a given unit direction.
pub fn sliced_along(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64, dir: &[f64]) -> f64 {
    let proj = |x: &[f64]| x.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>();
    let mut a: Vec<f64> = mu.particles().map(proj).collect();
    let mut b: Vec<f64> = nu.particles().map(proj).collect();
    w1d_pow(&mut a, &mut b, p).powf(1.0 / p)
}

/// `W_p` with the exact solver when affordable and the sliced estimator otherwise.
///
/// The boolean reports whether the sliced estimator was used.
pub fn wasserstein_auto(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: f64,
    rng: &mut RngStream,
) -> Result<(f64, bool)> {
    if mu.n_modes() == 1 {
        check_p(p)?;
        check_pair(mu, nu)?;
        return Ok((sliced_along(mu, nu, p, &[1.0]), false));
    }
    if mu.n_particles() <= EXACT_LIMIT {
        Ok((wasserstein_exact(mu, nu, p)?, false))
    } else {
        Ok((wasserstein_sliced(mu, nu, p, 64, rng)?, true))
    }
}

/// Time-indexed family of empirical measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawFlow {
    pub times: Vec<f64>,
    pub measures: Vec<EmpiricalMeasure>,
}

impl LawFlow {
    pub fn new(times: Vec<f64>, measures: Vec<EmpiricalMeasure>) -> Result<Self> {
        if times.len() != measures.len() || times.is_empty() {
            return Err(Error::Invalid("law flow needs one measure per time".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("law flow times must increase".into()));
        }
        let m = measures[0].n_particles();
        if measures.iter().any(|mu| mu.n_particles() != m) {
            return Err(Error::Invalid("law flow measures have different particle counts".into()));
        }
        Ok(LawFlow { times, measures })
    }

    /// The same measure at every time.
    pub fn constant(times: Vec<f64>, mu: EmpiricalMeasure) -> Result<Self> {
        let measures = vec![mu; times.len()];
        Self::new(times, measures)
    }
}

/// Distance between law flows and whether any grid point used the sliced estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowDistance {
    pub value: f64,
    pub sliced: bool,
}

/// `D_T(mu, nu) = max_j e^{-lambda t_j} W_p(mu_{t_j}, nu_{t_j})` on the shared grid.
pub fn dt_metric(
    mu: &LawFlow,
    nu: &LawFlow,
    lambda_weight: f64,
    p: f64,
    rng: &mut RngStream,
) -> Result<FlowDistance> {
    if mu.times.len() != nu.times.len()
        || mu.times.iter().zip(&nu.times).any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + a.abs()))
    {
        return Err(Error::Invalid("law flows live on different time grids".into()));
    }
    let mut out = FlowDistance {
        value: 0.0,
        sliced: false,
    };
    for ((t, a), b) in mu.times.iter().zip(&mu.measures).zip(&nu.measures) {
        let (w, sliced) = wasserstein_auto(a, b, p, rng)?;
        out.value = out.value.max((-lambda_weight * t).exp() * w);
        out.sliced |= sliced;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{Channel, StreamId};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn one_mode(values: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(1, values.to_vec()).unwrap()
    }

    fn rng() -> RngStream {
        RngStream::new(1, StreamId::new(0, 0, Channel::Projection))
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> f64 {
        let m = mu.n_particles();
        permutations(m)
            .iter()
            .map(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(i, j)| distance(mu.particle(i), nu.particle(*j)).powf(p))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            / m as f64
    }

    #[test]
    fn moment_examples() {
        let mu = EmpiricalMeasure::new(2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_abs_diff_eq!(p_moment(&mu, 1.0).unwrap(), 1.5);
        assert_eq!(p_moment(&one_mode(&[0.0]), 1.3).unwrap(), 0.0);
        let u = SpectralField(vec![3.0, 4.0]);
        let mu = EmpiricalMeasure::dirac(&u, 5).unwrap();
        assert_abs_diff_eq!(p_moment(&mu, 1.4).unwrap(), 5.0, epsilon = 1e-12);
        assert!(EmpiricalMeasure::new(2, vec![]).is_err());
    }

    #[test]
    fn exact_examples() {
        let w = wasserstein_exact(&one_mode(&[0.0, 2.0]), &one_mode(&[1.0, 5.0]), 1.0).unwrap();
        assert_abs_diff_eq!(w, 2.0, epsilon = 1e-12);
        let mu = one_mode(&[0.3, -1.0, 2.0]);
        assert_eq!(wasserstein_exact(&mu, &mu, 1.0).unwrap(), 0.0);
        let u = SpectralField(vec![3.0, 4.0]);
        let w = wasserstein_exact(
            &EmpiricalMeasure::dirac(&SpectralField::zeros(2), 4).unwrap(),
            &EmpiricalMeasure::dirac(&u, 4).unwrap(),
            1.2,
        )
        .unwrap();
        assert_abs_diff_eq!(w, 5.0, epsilon = 1e-12);
        assert!(wasserstein_exact(&one_mode(&[0.0]), &one_mode(&[0.0, 1.0]), 1.0).is_err());
        let big = one_mode(&vec![0.0; EXACT_LIMIT + 1]);
        assert!(wasserstein_exact(&big, &big, 1.0).is_err());
    }

    #[test]
    fn exact_matches_brute_force_on_200_instances() {
        let mut r = rng();
        for inst in 0..200 {
            let m = 1 + inst % 7;
            let n = 1 + inst % 3;
            let p = 1.0 + 0.5 * r.uniform();
            let mu = EmpiricalMeasure::new(n, (0..m * n).map(|_| r.normal()).collect()).unwrap();
            let nu = EmpiricalMeasure::new(n, (0..m * n).map(|_| r.normal()).collect()).unwrap();
            let exact = wasserstein_exact(&mu, &nu, p).unwrap().powf(p);
            let brute = brute_force(&mu, &nu, p);
            assert_abs_diff_eq!(exact, brute, epsilon = 1e-10);
        }
    }

    #[test]
    fn sliced_examples() {
        let mu = one_mode(&[0.0, 2.0, 7.0]);
        assert_eq!(wasserstein_sliced(&mu, &mu, 1.0, 8, &mut rng()).unwrap(), 0.0);
        let nu = one_mode(&[1.0, 5.0, -3.0]);
        let s = wasserstein_sliced(&mu, &nu, 1.3, 4, &mut rng()).unwrap();
        assert_abs_diff_eq!(s, wasserstein_exact(&mu, &nu, 1.3).unwrap(), epsilon = 1e-12);
        let u = [3.0, 4.0];
        let a = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::new(2, vec![3.0, 4.0, 4.0, 5.0]).unwrap();
        let dir = [u[0] / 5.0, u[1] / 5.0];
        assert_abs_diff_eq!(sliced_along(&a, &b, 1.0, &dir), 5.0, epsilon = 1e-12);
        assert!(wasserstein_sliced(&mu, &nu, 1.0, 0, &mut rng()).is_err());
    }

    #[test]
    fn sliced_is_deterministic_given_stream() {
        let mut r = rng();
        let mu = EmpiricalMeasure::new(3, (0..30).map(|_| r.normal()).collect()).unwrap();
        let nu = EmpiricalMeasure::new(3, (0..30).map(|_| r.normal()).collect()).unwrap();
        let a = wasserstein_sliced(&mu, &nu, 1.0, 16, &mut rng()).unwrap();
        let b = wasserstein_sliced(&mu, &nu, 1.0, 16, &mut rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dt_examples() {
        let times = vec![0.0, 1.0, 2.0];
        let u = SpectralField(vec![3.0, 4.0]);
        let zero = LawFlow::constant(times.clone(), EmpiricalMeasure::dirac(&SpectralField::zeros(2), 3).unwrap()).unwrap();
        let shifted = LawFlow::constant(times.clone(), EmpiricalMeasure::dirac(&u, 3).unwrap()).unwrap();
        assert_eq!(dt_metric(&zero, &zero, 1.0, 1.0, &mut rng()).unwrap().value, 0.0);
        assert_abs_diff_eq!(dt_metric(&zero, &shifted, 0.0, 1.0, &mut rng()).unwrap().value, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dt_metric(&zero, &shifted, 1.0, 1.0, &mut rng()).unwrap().value, 5.0, epsilon = 1e-12);
        let other = LawFlow::constant(vec![0.0, 1.5, 2.0], EmpiricalMeasure::dirac(&u, 3).unwrap()).unwrap();
        assert!(dt_metric(&zero, &other, 1.0, 1.0, &mut rng()).is_err());
    }

    fn small_measure() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (1usize..6, 1usize..4).prop_flat_map(|(m, n)| (Just(n), prop::collection::vec(-5.0f64..5.0, m * n)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metric_axioms(seed in 0u64..1000, m in 1usize..6, n in 1usize..4, p in 1.0f64..1.9) {
            let mut r = RngStream::new(seed, StreamId::new(0, 0, Channel::Aux));
            let mut draw = || EmpiricalMeasure::new(n, (0..m * n).map(|_| r.normal()).collect()).unwrap();
            let (a, b, c) = (draw(), draw(), draw());
            let ab = wasserstein_exact(&a, &b, p).unwrap();
            let ba = wasserstein_exact(&b, &a, p).unwrap();
            let bc = wasserstein_exact(&b, &c, p).unwrap();
            let ac = wasserstein_exact(&a, &c, p).unwrap();
            prop_assert!((ab - ba).abs() < 1e-10);
            prop_assert!(wasserstein_exact(&a, &a, p).unwrap() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-10);
        }

        #[test]
        fn index_coupling_and_p_monotonicity((n, data) in small_measure(), shift in -3.0f64..3.0, p in 1.0f64..1.9) {
            let mu = EmpiricalMeasure::new(n, data.clone()).unwrap();
            let nu = EmpiricalMeasure::new(n, data.iter().rev().map(|v| v * 0.7 + shift).collect()).unwrap();
            let m = mu.n_particles();
            let index = ((0..m).map(|i| distance(mu.particle(i), nu.particle(i)).powf(p)).sum::<f64>() / m as f64).powf(1.0 / p);
            let wp = wasserstein_exact(&mu, &nu, p).unwrap();
            prop_assert!(wp <= index + 1e-10);
            prop_assert!(wasserstein_exact(&mu, &nu, 1.0).unwrap() <= wp + 1e-10);
        }
    }
}
