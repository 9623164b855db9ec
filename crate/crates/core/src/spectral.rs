//! Closed-form singular system of the restricted call/put operators on `[0, B]`.
//!
//! For every index `k` the singular value is `lambda_k = (B / rho_k)^2` where
//! `rho_k = pi/2 + k pi + (-1)^k beta_k` and `beta_k` is the smallest positive
//! root of `exp(pi/2 + k pi + (-1)^k u) = (1 + cos u) / sin u`. The singular
//! functions combine an exponential trend `h_{k,1}` with an oscillation
//! `h_{k,2}`:
//!
//! ```text
//! phi_k = h_{k,1} + h_{k,2},    psi_k = h_{k,1} - h_{k,2}
//! ```
//!
//! All exponentials are evaluated with non-positive exponents so that every
//! index up to the configured cap stays finite in double precision.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::Serialize;
use thiserror::Error;

/// Default upper bound on the spectral cutoff accepted by [`make_basis`].
pub const DEFAULT_CUTOFF_CAP: usize = 256;

const BISECTION_MAX_ITER: usize = 200;
/// Lower end of the bracket for `ln(beta)`; far below any root up to the cap.
const LN_BETA_LOWER: f64 = -1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("domain bound must be positive and finite, got {0}")]
    NonPositiveDomain(f64),
    #[error("cutoff {requested} exceeds the configured cap {cap}")]
    CutoffAboveCap { requested: usize, cap: usize },
    #[error("index {k} is outside the basis (max {max})")]
    IndexOutOfRange { k: usize, max: usize },
    #[error("strike {xi} lies outside [0, {b}]")]
    OutsideDomain { xi: f64, b: f64 },
    #[error("fixed-point bracket for beta_{0} could not be established")]
    Bracket(usize),
}

/// One element of the singular system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SingularPair {
    pub k: usize,
    /// Fixed-point correction. Underflows to zero past `k ~ 236`; `ln_beta`
    /// keeps the exact value in that range.
    pub beta: f64,
    pub ln_beta: f64,
    pub rho: f64,
    /// Singular value, in strike units squared.
    pub lambda: f64,
    /// Coefficients `a_{k,1..4}` of the closed form (units strike^{-1/2}).
    ///
    /// `a_{k,1}` multiplies `exp(rho xi / B)` and is tiny for large `k`;
    /// evaluation never uses it directly.
    pub a: [f64; 4],
}

impl SingularPair {
    fn sign(&self) -> f64 {
        parity(self.k)
    }
}

fn parity(k: usize) -> f64 {
    if k % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Log-form of the fixed-point equation as a function of `y = ln u`.
///
/// `pi/2 + k pi + (-1)^k u - ln(1 + cos u) + ln(sin u)`, with `ln(sin u)`
/// written as `y + ln(sin(u)/u)` so that it stays exact when `u` underflows.
fn log_fixed_point(k: usize, y: f64) -> f64 {
    let u = y.exp();
    let sinc = if u < 1e-8 { 1.0 - u * u / 6.0 } else { u.sin() / u };
    (k as f64 + 0.5) * PI + parity(k) * u - (1.0 + u.cos()).ln() + y + sinc.ln()
}

/// Residual of the fixed-point equation in its log form at `u`.
pub fn beta_residual(k: usize, u: f64) -> f64 {
    (k as f64 + 0.5) * PI + parity(k) * u - ((1.0 + u.cos()) / u.sin()).ln()
}

/// `ln(beta_k)` by bisection on the log-form, which is increasing in `u`.
pub fn solve_ln_beta(k: usize) -> Result<f64, SpectralError> {
    let mut lo = LN_BETA_LOWER;
    let mut hi = (FRAC_PI_2 - 1e-12).ln();
    let f_lo = log_fixed_point(k, lo);
    let f_hi = log_fixed_point(k, hi);
    if !(f_lo < 0.0 && f_hi > 0.0) {
        return Err(SpectralError::Bracket(k));
    }
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if log_fixed_point(k, mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Smallest positive solution `beta_k` of the fixed-point equation.
pub fn solve_beta(k: usize) -> Result<f64, SpectralError> {
    solve_ln_beta(k).map(f64::exp)
}

/// `cos(rho) + 1/cosh(rho)`, the overflow-free form of `cos(rho) cosh(rho) + 1`.
pub fn root_residual(rho: f64) -> f64 {
    let e = (-rho).exp();
    rho.cos() + 2.0 * e / (1.0 + e * e)
}

/// Builds the singular pair for index `k` on `[0, b]`.
pub fn singular_pair(b: f64, k: usize) -> Result<SingularPair, SpectralError> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(SpectralError::NonPositiveDomain(b));
    }
    let ln_beta = solve_ln_beta(k)?;
    let beta = ln_beta.exp();
    let s = parity(k);
    let rho = (k as f64 + 0.5) * PI + s * beta;
    let e = (-rho).exp();
    let inv_sqrt_b = 1.0 / b.sqrt();
    let den = 1.0 + s * e;
    let a1 = inv_sqrt_b * s * e / den;
    let a2 = inv_sqrt_b / den;
    let a3 = -inv_sqrt_b;
    let a4 = inv_sqrt_b * (1.0 - s * e) / den;
    Ok(SingularPair {
        k,
        beta,
        ln_beta,
        rho,
        lambda: (b / rho).powi(2),
        a: [a1, a2, a3, a4],
    })
}

/// Which singular family to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Phi,
    Psi,
}

/// Singular system for indices `0..=N` on `[0, B]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasisSet {
    b: f64,
    pairs: Vec<SingularPair>,
}

/// Builds the singular basis on `[0, b]` for `k = 0..=n`, with the default cap.
pub fn make_basis(b: f64, n: usize) -> Result<BasisSet, SpectralError> {
    make_basis_with_cap(b, n, DEFAULT_CUTOFF_CAP)
}

pub fn make_basis_with_cap(b: f64, n: usize, cap: usize) -> Result<BasisSet, SpectralError> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(SpectralError::NonPositiveDomain(b));
    }
    if n > cap {
        return Err(SpectralError::CutoffAboveCap { requested: n, cap });
    }
    let pairs = (0..=n)
        .map(|k| singular_pair(b, k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BasisSet { b, pairs })
}

impl BasisSet {
    pub fn domain(&self) -> f64 {
        self.b
    }

    /// Largest index `N` held by the set.
    pub fn max_index(&self) -> usize {
        self.pairs.len() - 1
    }

    pub fn pairs(&self) -> &[SingularPair] {
        &self.pairs
    }

    pub fn pair(&self, k: usize) -> Result<&SingularPair, SpectralError> {
        self.pairs.get(k).ok_or(SpectralError::IndexOutOfRange {
            k,
            max: self.max_index(),
        })
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.lambda).collect()
    }

    /// Copy restricted to indices `0..=n`.
    pub fn truncated(&self, n: usize) -> Result<BasisSet, SpectralError> {
        if n > self.max_index() {
            return Err(SpectralError::IndexOutOfRange {
                k: n,
                max: self.max_index(),
            });
        }
        Ok(BasisSet {
            b: self.b,
            pairs: self.pairs[..=n].to_vec(),
        })
    }

    fn check_xi(&self, xi: f64) -> Result<(), SpectralError> {
        if (0.0..=self.b).contains(&xi) {
            Ok(())
        } else {
            Err(SpectralError::OutsideDomain { xi, b: self.b })
        }
    }

    /// `d`-th derivatives of `(h_{k,1}, h_{k,2})` at `xi`, no range checks.
    pub(crate) fn parts_unchecked(&self, pair: &SingularPair, xi: f64, d: u32) -> (f64, f64) {
        let b = self.b;
        let rho = pair.rho;
        let s = pair.sign();
        let t = xi / b;
        let scale = (rho / b).powi(d as i32);
        let e_rho = (-rho).exp();
        let den = 1.0 + s * e_rho;
        let rising = (-rho * (1.0 - t)).exp();
        let falling = (-rho * t).exp();
        let odd = if d % 2 == 0 { 1.0 } else { -1.0 };
        let h1 = scale * (s * rising + odd * falling) / (den * b.sqrt());

        let (sn, cs) = (rho * t).sin_cos();
        let [_, _, a3, a4] = pair.a;
        // derivatives of (cos, sin) cycle with period 4
        let (dc, ds) = match d % 4 {
            0 => (cs, sn),
            1 => (-sn, cs),
            2 => (-cs, -sn),
            _ => (sn, -cs),
        };
        let h2 = scale * (a3 * dc + a4 * ds);
        (h1, h2)
    }

    fn eval(&self, family: Family, k: usize, xi: f64, d: u32) -> Result<f64, SpectralError> {
        self.check_xi(xi)?;
        let pair = self.pair(k)?;
        let (h1, h2) = self.parts_unchecked(pair, xi, d);
        Ok(match family {
            Family::Phi => h1 + h2,
            Family::Psi => h1 - h2,
        })
    }

    /// `d`-th derivative of `phi_k` or `psi_k` at `xi`, `d <= 4`.
    pub fn eval_derivative(
        &self,
        family: Family,
        k: usize,
        xi: f64,
        d: u32,
    ) -> Result<f64, SpectralError> {
        self.eval(family, k, xi, d)
    }

    pub fn phi(&self, k: usize, xi: f64) -> Result<f64, SpectralError> {
        self.eval(Family::Phi, k, xi, 0)
    }

    pub fn phi_d1(&self, k: usize, xi: f64) -> Result<f64, SpectralError> {
        self.eval(Family::Phi, k, xi, 1)
    }

    pub fn phi_d2(&self, k: usize, xi: f64) -> Result<f64, SpectralError> {
        self.eval(Family::Phi, k, xi, 2)
    }

    pub fn psi(&self, k: usize, xi: f64) -> Result<f64, SpectralError> {
        self.eval(Family::Psi, k, xi, 0)
    }

    pub fn psi_d1(&self, k: usize, xi: f64) -> Result<f64, SpectralError> {
        self.eval(Family::Psi, k, xi, 1)
    }

    pub fn psi_d2(&self, k: usize, xi: f64) -> Result<f64, SpectralError> {
        self.eval(Family::Psi, k, xi, 2)
    }

    /// `(h_{k,1}(xi), h_{k,2}(xi))`.
    pub fn h_parts(&self, k: usize, xi: f64) -> Result<(f64, f64), SpectralError> {
        self.check_xi(xi)?;
        let pair = self.pair(k)?;
        Ok(self.parts_unchecked(pair, xi, 0))
    }

    /// All indices `0..=N` of one family (derivative `d`) at `xi`.
    pub fn row(&self, family: Family, xi: f64, d: u32) -> Result<Vec<f64>, SpectralError> {
        self.check_xi(xi)?;
        Ok(self
            .pairs
            .iter()
            .map(|p| {
                let (h1, h2) = self.parts_unchecked(p, xi, d);
                match family {
                    Family::Phi => h1 + h2,
                    Family::Psi => h1 - h2,
                }
            })
            .collect())
    }

    /// Closed-form `<h_{k,1}, h_{m,1}>`.
    pub fn inner_h1_h1(&self, k: usize, m: usize) -> Result<f64, SpectralError> {
        let (pk, pm) = (self.pair(k)?, self.pair(m)?);
        let (rk, rm) = (pk.rho, pm.rho);
        let (sk, sm) = (pk.sign(), pm.sign());
        let (ek, em) = ((-rk).exp(), (-rm).exp());
        if k == m {
            return Ok((1.0 - ek * ek + 2.0 * sk * rk * ek) / (rk * (sk + ek).powi(2)));
        }
        let num = (rk + rm) * (em - ek) + sk * (rk - rm) * (1.0 - ek * em);
        Ok((sk + sm) * num / ((rk * rk - rm * rm) * (1.0 + sk * ek) * (1.0 + sm * em)))
    }

    /// Closed-form `<h_{k,1}, h_{m,2}>`; zero on the diagonal.
    pub fn inner_h1_h2(&self, k: usize, m: usize) -> Result<f64, SpectralError> {
        let (pk, pm) = (self.pair(k)?, self.pair(m)?);
        if k == m {
            return Ok(0.0);
        }
        let (rk, rm) = (pk.rho, pm.rho);
        let (sk, sm) = (pk.sign(), pm.sign());
        let (ek, em) = ((-rk).exp(), (-rm).exp());
        let num = (rk + rm) * (em + ek) - sk * (rk - rm) * (1.0 + ek * em);
        Ok((sk - sm) * num / ((rk * rk + rm * rm) * (1.0 + sm * em) * (1.0 + sk * ek)))
    }

    /// Closed-form `<phi_k, psi_m>`.
    pub fn cross_inner(&self, k: usize, m: usize) -> Result<f64, SpectralError> {
        let (pk, pm) = (self.pair(k)?, self.pair(m)?);
        let (rk, rm) = (pk.rho, pm.rho);
        let (sk, sm) = (pk.sign(), pm.sign());
        let (ek, em) = ((-rk).exp(), (-rm).exp());
        if k == m {
            let num = -ek * ek * (rk + 2.0) + 2.0 * rk * sk * ek - rk + 2.0;
            return Ok(num / ((ek + sk).powi(2) * rk));
        }
        let skm = sk * sm;
        let p = |x: f64, y: f64| (-x.powi(3) + x * x * y) * skm - x * y * y + y.powi(3);
        let q = |x: f64, y: f64| (x.powi(3) + x * x * y) * sk + (y.powi(3) + y * y * x) * sm;
        let num = p(rk, rm) * ek * em - q(rk, rm) * ek + q(rm, rk) * em + p(rm, rk);
        Ok(4.0 * num / ((rk.powi(4) - rm.powi(4)) * (1.0 + sm * em) * (1.0 + sk * ek)))
    }
}
