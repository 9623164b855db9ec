//! End-to-end estimation: grid, constraints, cutoff scan and the resulting
//! closed-form density and put-price curves.

use serde::Serialize;
use thiserror::Error;

use crate::constraints::{build_grid, ConstraintError, StrikeGrid};
use crate::market::{MarketError, MarketParams, QuoteSheet};
use crate::operators::{GridFunction, OperatorError, Quadrature};
use crate::qp::{CutoffProbe, CutoffScanner, QpError, QpSolution, QpStatus, SolverOptions};
use crate::spectral::{make_basis, BasisSet, Family, SpectralError};

/// Default number of points of exported curves.
pub const DEFAULT_GRID_POINTS: usize = 2001;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("solver did not reach an optimal point at N = {n}: {status:?}")]
    NotOptimal { n: usize, status: QpStatus },
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateConfig {
    /// `B = b_factor * F0`.
    pub b_factor: f64,
    pub n_max: usize,
    pub solver: SolverOptions,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            b_factor: 2.0,
            n_max: 120,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diagnostics {
    /// `int_0^B q_N`.
    pub mass: f64,
    /// `int_0^B x q_N(x) dx`.
    pub mean: f64,
    /// Smallest density value on the export grid.
    pub min_density: f64,
    pub objective: f64,
    pub max_violation: f64,
    pub status: QpStatus,
}

/// Density and put price reconstructed from basis coefficients.
#[derive(Debug, Clone, Serialize)]
pub struct RndEstimate {
    pub b: f64,
    pub n: usize,
    pub omega: Vec<f64>,
    pub params: MarketParams,
    #[serde(skip)]
    basis: BasisSet,
    pub diagnostics: Diagnostics,
}

impl RndEstimate {
    /// Builds the estimate and its diagnostics; `basis` must hold at least `omega.len()` pairs.
    pub fn new(
        basis: &BasisSet,
        omega: &[f64],
        params: MarketParams,
        objective: f64,
        max_violation: f64,
        status: QpStatus,
    ) -> Result<Self, EstimateError> {
        if omega.is_empty() {
            return Err(EstimateError::Config("empty coefficient vector".into()));
        }
        let n = omega.len() - 1;
        let basis = basis.truncated(n)?;
        let mut est = Self {
            b: basis.domain(),
            n,
            omega: omega.to_vec(),
            params,
            basis,
            diagnostics: Diagnostics {
                mass: 0.0,
                mean: 0.0,
                min_density: 0.0,
                objective,
                max_violation,
                status,
            },
        };
        let quad = Quadrature::for_cutoff(est.b, n)?;
        est.diagnostics.mass = quad.integrate(|x| est.density_unchecked(x));
        est.diagnostics.mean = quad.integrate(|x| x * est.density_unchecked(x));
        est.diagnostics.min_density = (0..DEFAULT_GRID_POINTS)
            .map(|i| est.density_unchecked(est.b * i as f64 / (DEFAULT_GRID_POINTS - 1) as f64))
            .fold(f64::INFINITY, f64::min);
        Ok(est)
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    /// `lambda_k^{-1} omega_k`, the coefficients of `e^{-r tau} q_N` on `psi_k`.
    pub fn psi_coefficients(&self) -> Vec<f64> {
        self.omega
            .iter()
            .zip(self.basis.pairs())
            .map(|(w, p)| w / p.lambda)
            .collect()
    }

    fn density_unchecked(&self, xi: f64) -> f64 {
        let row = self.basis.row(Family::Psi, xi.clamp(0.0, self.b), 0).expect("in range");
        let growth = (self.params.r * self.params.tau).exp();
        growth
            * row
                .iter()
                .zip(&self.omega)
                .zip(self.basis.pairs())
                .map(|((v, w), p)| v * w / p.lambda)
                .sum::<f64>()
    }

    /// `q_N(xi) = e^{r tau} sum_k lambda_k^{-1} omega_k psi_k(xi)`.
    pub fn density(&self, xi: f64) -> Result<f64, SpectralError> {
        if !(0.0..=self.b).contains(&xi) {
            return Err(SpectralError::OutsideDomain { xi, b: self.b });
        }
        Ok(self.density_unchecked(xi))
    }

    /// `P_N(xi) = sum_k omega_k phi_k(xi)`.
    pub fn put(&self, xi: f64) -> Result<f64, SpectralError> {
        let row = self.basis.row(Family::Phi, xi, 0)?;
        Ok(row.iter().zip(&self.omega).map(|(v, w)| v * w).sum())
    }

    /// `d`-th strike derivative of `P_N`.
    pub fn put_derivative(&self, xi: f64, d: u32) -> Result<f64, SpectralError> {
        let row = self.basis.row(Family::Phi, xi, d)?;
        Ok(row.iter().zip(&self.omega).map(|(v, w)| v * w).sum())
    }

    pub fn density_function(&self) -> GridFunction {
        let est = self.clone();
        GridFunction::from_fn(self.b, move |x| est.density_unchecked(x))
    }

    /// `(xi, q_N, P_N)` on `points` equally spaced strikes over `[0, B]`.
    pub fn sample(&self, points: usize) -> Vec<(f64, f64, f64)> {
        let points = points.max(2);
        (0..points)
            .map(|i| {
                let x = if i + 1 == points {
                    self.b
                } else {
                    self.b * i as f64 / (points - 1) as f64
                };
                (x, self.density_unchecked(x), self.put(x).expect("in range"))
            })
            .collect()
    }
}

/// Density of `ln S_tau`: `e^x q_N(e^x)` for `e^x` in `(0, B]`.
pub fn log_price_density(estimate: &RndEstimate, x: f64) -> Result<f64, SpectralError> {
    let y = x.exp();
    if !(y > 0.0 && y <= estimate.b) {
        return Err(SpectralError::OutsideDomain { xi: y, b: estimate.b });
    }
    Ok(y * estimate.density(y)?)
}

/// Everything produced by one estimation run.
#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub estimate: RndEstimate,
    pub grid: StrikeGrid,
    pub solution: QpSolution,
    pub trace: Vec<CutoffProbe>,
}

/// Builds the basis and grid for `B = b_factor F0`.
pub fn prepare(
    sheet: &QuoteSheet,
    b_factor: f64,
    n_max: usize,
) -> Result<(BasisSet, StrikeGrid), EstimateError> {
    if !(b_factor > 0.0 && b_factor.is_finite()) {
        return Err(EstimateError::Config(format!("B factor {b_factor}")));
    }
    let b = b_factor * sheet.params.forward();
    let basis = make_basis(b, n_max)?;
    let grid = build_grid(b, &sheet.strikes)?;
    Ok((basis, grid))
}

fn finish(
    basis: &BasisSet,
    grid: StrikeGrid,
    sheet: &QuoteSheet,
    solution: QpSolution,
    trace: Vec<CutoffProbe>,
    n: usize,
) -> Result<EstimateOutput, EstimateError> {
    if solution.status != QpStatus::Optimal {
        return Err(EstimateError::NotOptimal {
            n,
            status: solution.status,
        });
    }
    let estimate = RndEstimate::new(
        basis,
        solution.omega.as_slice(),
        sheet.params,
        solution.objective,
        solution.max_violation,
        solution.status,
    )?;
    Ok(EstimateOutput {
        estimate,
        grid,
        solution,
        trace,
    })
}

/// Smoothest density at the smallest feasible cutoff.
pub fn estimate(sheet: &QuoteSheet, config: &EstimateConfig) -> Result<EstimateOutput, EstimateError> {
    let (basis, grid) = prepare(sheet, config.b_factor, config.n_max)?;
    let scanner = CutoffScanner::new(&basis, &grid, sheet)?;
    let res = scanner.find_min_cutoff(config.n_max, &config.solver)?;
    finish(&basis, grid, sheet, res.solution, res.trace, res.n_star)
}

/// Smoothest density at a fixed cutoff `n`.
pub fn estimate_at(
    sheet: &QuoteSheet,
    b_factor: f64,
    n: usize,
    solver: &SolverOptions,
) -> Result<EstimateOutput, EstimateError> {
    let (basis, grid) = prepare(sheet, b_factor, n)?;
    let scanner = CutoffScanner::new(&basis, &grid, sheet)?;
    let (_, sol) = scanner.solve_at(n, solver)?;
    let probe = CutoffProbe {
        n,
        violation: sol.max_violation,
        feasible: sol.status != QpStatus::Infeasible,
    };
    finish(&basis, grid, sheet, sol, vec![probe], n)
}

/// `<f, psi_k>` for `k = 0..=N` by quadrature.
pub fn psi_projection(
    basis: &BasisSet,
    f: &GridFunction,
    quad: &Quadrature,
) -> Vec<f64> {
    let n = basis.max_index() + 1;
    let mut acc = vec![0.0; n];
    for (x, w) in quad.nodes().iter().zip(quad.weights()) {
        let fx = f.eval(*x);
        let row = basis.row(Family::Psi, *x, 0).expect("quadrature nodes lie in [0, B]");
        for k in 0..n {
            acc[k] += w * fx * row[k];
        }
    }
    acc
}

/// `sum_k c_k psi_k(xi)`.
pub fn psi_series(basis: &BasisSet, coeffs: &[f64], xi: f64) -> Result<f64, SpectralError> {
    let row = basis.row(Family::Psi, xi, 0)?;
    Ok(row.iter().zip(coeffs).map(|(v, c)| v * c).sum())
}

/// Relative `L2` distance `||f - g|| / ||g||` over `[lo, hi]`.
pub fn relative_l2<F, G>(quad: &Quadrature, lo: f64, hi: f64, f: F, g: G) -> f64
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let num = quad.integrate_range(lo, hi, |x| (f(x) - g(x)).powi(2));
    let den = quad.integrate_range(lo, hi, |x| g(x).powi(2));
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{lognormal_density, simulate_quotes};

    #[test]
    fn estimate_links_put_and_density() {
        let p = MarketParams::new(100.0, 0.01, 0.0, 1.0).unwrap();
        let basis = make_basis(200.0, 6).unwrap();
        let omega = [3000.0, -200.0, 150.0, 20.0, -5.0, 1.0, 0.5];
        let est = RndEstimate::new(&basis, &omega, p, 0.0, 0.0, QpStatus::Optimal).unwrap();
        let h = 1e-2;
        for &x in &[20.0, 77.0, 140.0] {
            let fd = (est.put(x - h).unwrap() - 2.0 * est.put(x).unwrap() + est.put(x + h).unwrap()) / (h * h);
            let q = est.density(x).unwrap() * p.discount();
            assert!((fd - q).abs() < 1e-5 * q.abs().max(1e-3), "{fd} {q}");
        }
        assert!(est.density(200.0).unwrap().abs() < 1e-12);
        assert!(log_price_density(&est, 200.0f64.ln()).unwrap().abs() < 1e-10);
        assert!(log_price_density(&est, 201.0f64.ln()).is_err());
    }

    #[test]
    fn log_density_of_lognormal_is_normal() {
        let p = MarketParams::new(100.0, 0.0, 0.0, 1.0).unwrap();
        let sigma = 0.3;
        let mu = 100.0f64.ln() - 0.5 * sigma * sigma;
        for &x in &[4.0, 4.5, 4.9] {
            let y: f64 = x;
            let lhs = y.exp() * lognormal_density(&p, sigma, y.exp()).unwrap();
            let rhs = (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn small_simulated_sheet_end_to_end() {
        let p = MarketParams::new(100.0, 0.0, 0.0, 1.0).unwrap();
        let sheet = simulate_quotes(&p, 0.3, 5, 11).unwrap();
        let cfg = EstimateConfig { n_max: 40, ..EstimateConfig::default() };
        let out = estimate(&sheet, &cfg).unwrap();
        let est = &out.estimate;
        for i in 0..sheet.len() {
            let v = est.put(sheet.strikes[i]).unwrap();
            assert!(v <= sheet.ask[i] + 1e-6 && v >= sheet.bid[i] - 1e-6);
        }
        assert!(est.density(0.0).unwrap().abs() < 1e-8);
        assert!(out.trace.iter().rev().skip(1).all(|t| !t.feasible));
    }
}
