//! Restricted call/put operators on `L2[0, B]`, their composed kernels, and the
//! composite Gauss-Legendre rule used to apply them.
//!
//! ```text
//! (gamma f)(xi)  = int_xi^B (x - xi) f(x) dx      restricted call operator
//! (gamma* f)(xi) = int_0^xi (xi - x) f(x) dx      restricted put operator
//! ```

use std::fmt;
use std::sync::Arc;

use gauss_quad::GaussLegendre;
use thiserror::Error;

/// Default number of Gauss-Legendre nodes per panel.
pub const DEFAULT_NODES_PER_PANEL: usize = 8;
/// Minimum default panel count, regardless of cutoff.
pub const MIN_DEFAULT_PANELS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("invalid quadrature: {0}")]
    InvalidQuadrature(String),
    #[error("quadrature covers [0, {quad}] but the function lives on [0, {func}]")]
    DomainMismatch { quad: f64, func: f64 },
    #[error("point {x} lies outside [0, {b}]")]
    OutsideDomain { x: f64, b: f64 },
    #[error("finite-difference stencil [{lo}, {hi}] leaves [0, {b}]")]
    StencilOutside { lo: f64, hi: f64, b: f64 },
    #[error("sampled function: {0}")]
    InvalidSamples(String),
}

/// Composite Gauss-Legendre rule on `[0, B]` with equal-width panels.
#[derive(Clone, Debug)]
pub struct Quadrature {
    b: f64,
    panels: usize,
    reference: Vec<(f64, f64)>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Quadrature {
    pub fn new(b: f64, panels: usize, nodes_per_panel: usize) -> Result<Self, OperatorError> {
        if !(b > 0.0 && b.is_finite()) {
            return Err(OperatorError::InvalidQuadrature(format!("domain bound {b}")));
        }
        if panels == 0 {
            return Err(OperatorError::InvalidQuadrature("zero panels".into()));
        }
        let rule = GaussLegendre::new(nodes_per_panel)
            .map_err(|e| OperatorError::InvalidQuadrature(e.to_string()))?;
        let mut reference: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
        reference.sort_by(|a, b| a.0.total_cmp(&b.0));
        let width = b / panels as f64;
        let mut nodes = Vec::with_capacity(panels * reference.len());
        let mut weights = Vec::with_capacity(panels * reference.len());
        for p in 0..panels {
            let lo = p as f64 * width;
            for &(t, w) in &reference {
                nodes.push(lo + 0.5 * width * (t + 1.0));
                weights.push(0.5 * width * w);
            }
        }
        Ok(Self {
            b,
            panels,
            reference,
            nodes,
            weights,
        })
    }

    /// Default rule for a basis with cutoff `n`: `max(64, 8(n+1))` panels of 8 nodes.
    pub fn for_cutoff(b: f64, n: usize) -> Result<Self, OperatorError> {
        Self::new(
            b,
            MIN_DEFAULT_PANELS.max(8 * (n + 1)),
            DEFAULT_NODES_PER_PANEL,
        )
    }

    pub fn domain(&self) -> f64 {
        self.b
    }

    pub fn panels(&self) -> usize {
        self.panels
    }

    pub fn nodes_per_panel(&self) -> usize {
        self.reference.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same panel layout with twice as many panels.
    pub fn refined(&self) -> Self {
        Self::new(self.b, 2 * self.panels, self.nodes_per_panel())
            .expect("refining a valid rule")
    }

    /// `int_0^B f`. Summed left to right within a panel, then panel by panel.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let m = self.reference.len();
        let mut total = 0.0;
        for p in 0..self.panels {
            let mut part = 0.0;
            for j in p * m..(p + 1) * m {
                part += self.weights[j] * f(self.nodes[j]);
            }
            total += part;
        }
        total
    }

    /// `int_lo^hi f` for `0 <= lo <= hi <= B`, using the panels clipped to the range.
    ///
    /// Splitting an integral at a kink point and calling this on each side keeps
    /// full Gauss-Legendre accuracy on integrands that are only continuous there.
    pub fn integrate_range<F: Fn(f64) -> f64>(&self, lo: f64, hi: f64, f: F) -> f64 {
        let lo = lo.max(0.0);
        let hi = hi.min(self.b);
        if hi <= lo {
            return 0.0;
        }
        let width = self.b / self.panels as f64;
        let first = ((lo / width).floor() as usize).min(self.panels - 1);
        let last = ((hi / width).ceil() as usize).clamp(first + 1, self.panels);
        let mut total = 0.0;
        for p in first..last {
            let a = (p as f64 * width).max(lo);
            let c = if p + 1 == self.panels {
                hi
            } else {
                ((p + 1) as f64 * width).min(hi)
            };
            if c <= a {
                continue;
            }
            let half = 0.5 * (c - a);
            let mut part = 0.0;
            for &(t, w) in &self.reference {
                part += half * w * f(a + half * (t + 1.0));
            }
            total += part;
        }
        total
    }
}

type Callable = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Repr {
    Analytic(Callable),
    Sampled { xi: Vec<f64>, values: Vec<f64> },
}

/// Function on `[0, B]`, either a closure or samples with linear interpolation.
#[derive(Clone)]
pub struct GridFunction {
    b: f64,
    repr: Repr,
}

impl fmt::Debug for GridFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            Repr::Analytic(_) => write!(f, "GridFunction::Analytic([0, {}])", self.b),
            Repr::Sampled { xi, .. } => {
                write!(f, "GridFunction::Sampled([0, {}], {} points)", self.b, xi.len())
            }
        }
    }
}

impl GridFunction {
    pub fn from_fn<F>(b: f64, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            b,
            repr: Repr::Analytic(Arc::new(f)),
        }
    }

    /// Piecewise-linear interpolant through `(xi, values)`; `xi` must be
    /// strictly ascending from 0 to `b`.
    pub fn sampled(b: f64, xi: Vec<f64>, values: Vec<f64>) -> Result<Self, OperatorError> {
        if xi.len() != values.len() || xi.len() < 2 {
            return Err(OperatorError::InvalidSamples(
                "need at least two points and matching lengths".into(),
            ));
        }
        if xi[0] != 0.0 || *xi.last().unwrap() != b {
            return Err(OperatorError::InvalidSamples("samples must span [0, B]".into()));
        }
        if xi.windows(2).any(|w| w[1] <= w[0]) {
            return Err(OperatorError::InvalidSamples("abscissae not ascending".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(OperatorError::InvalidSamples("non-finite value".into()));
        }
        Ok(Self {
            b,
            repr: Repr::Sampled { xi, values },
        })
    }

    pub fn domain(&self) -> f64 {
        self.b
    }

    pub fn eval(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Analytic(f) => f(x),
            Repr::Sampled { xi, values } => {
                let j = xi.partition_point(|&t| t <= x).clamp(1, xi.len() - 1);
                let (x0, x1) = (xi[j - 1], xi[j]);
                let w = (x - x0) / (x1 - x0);
                values[j - 1] * (1.0 - w) + values[j] * w
            }
        }
    }

    /// `t -> f(B - t)`.
    pub fn reflected(&self) -> Self {
        let b = self.b;
        let inner = self.clone();
        Self::from_fn(b, move |t| inner.eval(b - t))
    }
}

/// `(x - xi)^+`, the call kernel.
pub fn kernel_theta(xi: f64, x: f64) -> f64 {
    (x - xi).max(0.0)
}

/// `(xi - x)^+`, the put kernel.
pub fn kernel_theta_star(xi: f64, x: f64) -> f64 {
    kernel_theta(x, xi)
}

/// Kernel of `gamma* gamma`: `int_0^{xi ^ x} (xi - u)(x - u) du`.
pub fn kernel_vartheta1(xi: f64, x: f64) -> f64 {
    let c = xi.min(x);
    xi * x * c - (xi + x) * c * c / 2.0 + c * c * c / 3.0
}

/// Kernel of `gamma gamma*` on `[0, b]`: `int_{xi v x}^B (u - xi)(u - x) du`.
pub fn kernel_vartheta2(b: f64, xi: f64, x: f64) -> f64 {
    kernel_vartheta1(b - xi, b - x)
}

fn check(quad: &Quadrature, f: &GridFunction, xi: f64) -> Result<(), OperatorError> {
    if (quad.domain() - f.domain()).abs() > 1e-12 * f.domain() {
        return Err(OperatorError::DomainMismatch {
            quad: quad.domain(),
            func: f.domain(),
        });
    }
    if !(0.0..=f.domain()).contains(&xi) {
        return Err(OperatorError::OutsideDomain { x: xi, b: f.domain() });
    }
    Ok(())
}

/// `(gamma f)(xi)`.
pub fn apply_gamma(quad: &Quadrature, f: &GridFunction, xi: f64) -> Result<f64, OperatorError> {
    check(quad, f, xi)?;
    Ok(quad.integrate_range(xi, f.domain(), |x| (x - xi) * f.eval(x)))
}

/// `(gamma* f)(xi)`.
pub fn apply_gamma_star(
    quad: &Quadrature,
    f: &GridFunction,
    xi: f64,
) -> Result<f64, OperatorError> {
    check(quad, f, xi)?;
    Ok(quad.integrate_range(0.0, xi, |x| (xi - x) * f.eval(x)))
}

/// `(gamma* gamma f)(xi)` through the kernel `vartheta1`, split at the kink.
pub fn apply_vartheta1(
    quad: &Quadrature,
    f: &GridFunction,
    xi: f64,
) -> Result<f64, OperatorError> {
    check(quad, f, xi)?;
    let g = |x: f64| kernel_vartheta1(xi, x) * f.eval(x);
    Ok(quad.integrate_range(0.0, xi, g) + quad.integrate_range(xi, f.domain(), g))
}

/// `(gamma gamma* f)(xi)` through the kernel `vartheta2`, split at the kink.
pub fn apply_vartheta2(
    quad: &Quadrature,
    f: &GridFunction,
    xi: f64,
) -> Result<f64, OperatorError> {
    check(quad, f, xi)?;
    let b = f.domain();
    let g = |x: f64| kernel_vartheta2(b, xi, x) * f.eval(x);
    Ok(quad.integrate_range(0.0, xi, g) + quad.integrate_range(xi, b, g))
}

/// Default finite-difference step for density inversion, `B / 2000`.
pub fn default_fd_step(b: f64) -> f64 {
    b / 2000.0
}

/// Central second difference of `price` at `xi`.
pub fn breeden_litzenberger(price: &GridFunction, xi: f64, h: f64) -> Result<f64, OperatorError> {
    let b = price.domain();
    let (lo, hi) = (xi - h, xi + h);
    if !(h > 0.0) || lo < 0.0 || hi > b {
        return Err(OperatorError::StencilOutside { lo, hi, b });
    }
    Ok((price.eval(lo) - 2.0 * price.eval(xi) + price.eval(hi)) / (h * h))
}

/// `m_k(f) = int_0^B x^k f(x) dx` for `k` in {0, 1}.
pub fn moments(quad: &Quadrature, f: &GridFunction, k: u32) -> Result<f64, OperatorError> {
    check(quad, f, 0.0)?;
    Ok(match k {
        0 => quad.integrate(|x| f.eval(x)),
        _ => quad.integrate(|x| x.powi(k as i32) * f.eval(x)),
    })
}

/// `(gamma - gamma*) f (xi) - (m_1(f) - xi m_0(f))`, zero for every `f`.
pub fn parity_residual(
    quad: &Quadrature,
    f: &GridFunction,
    xi: f64,
) -> Result<f64, OperatorError> {
    let call = apply_gamma(quad, f, xi)?;
    let put = apply_gamma_star(quad, f, xi)?;
    let m0 = moments(quad, f, 0)?;
    let m1 = moments(quad, f, 1)?;
    Ok(call - put - (m1 - xi * m0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::make_basis;
    use proptest::prelude::*;

    fn basis_fn(b: f64, k: usize, psi: bool) -> GridFunction {
        let basis = make_basis(b, k).unwrap();
        GridFunction::from_fn(b, move |x| {
            if psi {
                basis.psi(k, x).unwrap()
            } else {
                basis.phi(k, x).unwrap()
            }
        })
    }

    #[test]
    fn weights_sum_to_domain() {
        let q = Quadrature::for_cutoff(1660.0, 30).unwrap();
        assert_eq!(q.panels(), 248);
        assert!(q.weights().iter().all(|&w| w > 0.0));
        let s: f64 = q.weights().iter().sum();
        assert!((s - 1660.0).abs() < 1e-12 * 1660.0);
        assert_eq!(Quadrature::for_cutoff(1.0, 2).unwrap().panels(), 64);
    }

    #[test]
    fn range_integration_exact_for_polynomials() {
        let q = Quadrature::new(10.0, 7, 4).unwrap();
        let v = q.integrate_range(1.3, 8.9, |x| x.powi(5));
        let exact = (8.9f64.powi(6) - 1.3f64.powi(6)) / 6.0;
        assert!((v - exact).abs() < 1e-10 * exact);
        assert_eq!(q.integrate_range(3.0, 3.0, |x| x), 0.0);
        let full = q.integrate_range(0.0, 10.0, |x| x * x);
        assert!((full - 1000.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn theta_values() {
        assert_eq!(kernel_theta(5.0, 3.0), 0.0);
        assert_eq!(kernel_theta(3.0, 5.0), 2.0);
        assert_eq!(kernel_theta(4.0, 4.0), 0.0);
        assert_eq!(kernel_vartheta1(0.0, 7.0), 0.0);
    }

    #[test]
    fn vartheta_kernels_match_quadrature() {
        let b = 12.0;
        let q = Quadrature::new(b, 64, 8).unwrap();
        for &(xi, x) in &[(2.0f64, 9.0f64), (7.5, 3.25), (11.0, 11.0), (0.0, 4.0), (12.0, 1.0)] {
            let v1 = q.integrate_range(0.0, xi.min(x), |u| {
                kernel_theta_star(xi, u) * kernel_theta(u, x)
            });
            let v2 = q.integrate_range(xi.max(x), b, |u| kernel_theta(xi, u) * kernel_theta_star(u, x));
            assert!((v1 - kernel_vartheta1(xi, x)).abs() < 1e-10 * b.powi(3));
            assert!((v2 - kernel_vartheta2(b, xi, x)).abs() < 1e-10 * b.powi(3));
        }
    }

    #[test]
    fn gamma_star_of_one() {
        let b = 20.0;
        let q = Quadrature::new(b, 64, 8).unwrap();
        let one = GridFunction::from_fn(b, |_| 1.0);
        for &xi in &[0.0, 3.0, 13.7, 20.0] {
            let v = apply_gamma_star(&q, &one, xi).unwrap();
            assert!((v - xi * xi / 2.0).abs() < 1e-11);
        }
    }

    #[test]
    fn gamma_maps_phi_to_lambda_psi() {
        let b = 100.0;
        let n = 12;
        let basis = make_basis(b, n).unwrap();
        let q = Quadrature::for_cutoff(b, n).unwrap();
        let lam0 = basis.pairs()[0].lambda;
        for k in 0..=n {
            let phi = basis_fn(b, k, false);
            let psi = basis_fn(b, k, true);
            let lam = basis.pairs()[k].lambda;
            for i in 0..=50 {
                let xi = b * i as f64 / 50.0;
                let g = apply_gamma(&q, &phi, xi).unwrap();
                let gs = apply_gamma_star(&q, &psi, xi).unwrap();
                assert!((g - lam * psi.eval(xi)).abs() < 1e-7 * lam0, "k={k} xi={xi}");
                assert!((gs - lam * phi.eval(xi)).abs() < 1e-7 * lam0, "k={k} xi={xi}");
            }
        }
    }

    #[test]
    fn vartheta1_agrees_with_composition() {
        let b = 30.0;
        let q = Quadrature::new(b, 64, 8).unwrap();
        let f = GridFunction::from_fn(b, |x| (x / 7.0).sin() + 0.1 * x);
        let qc = q.clone();
        let fc = f.clone();
        let gf = GridFunction::from_fn(b, move |x| apply_gamma(&qc, &fc, x).unwrap());
        for &xi in &[0.0, 4.5, 17.2, 30.0] {
            let direct = apply_vartheta1(&q, &f, xi).unwrap();
            let composed = apply_gamma_star(&q, &gf, xi).unwrap();
            assert!((direct - composed).abs() < 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn breeden_litzenberger_on_quadratic() {
        let p = GridFunction::from_fn(10.0, |x| x * x / 2.0);
        let v = breeden_litzenberger(&p, 5.0, 0.01).unwrap();
        assert!((v - 1.0).abs() < 1e-8);
        assert!(breeden_litzenberger(&p, 0.005, 0.01).is_err());
        assert!(breeden_litzenberger(&p, 9.995, 0.01).is_err());
    }

    #[test]
    fn moments_of_uniform() {
        let b = 50.0;
        let q = Quadrature::new(b, 64, 8).unwrap();
        let u = GridFunction::from_fn(b, move |_| 1.0 / b);
        assert!((moments(&q, &u, 0).unwrap() - 1.0).abs() < 1e-13);
        assert!((moments(&q, &u, 1).unwrap() - b / 2.0).abs() < 1e-11);
    }

    #[test]
    fn parity_on_psi3() {
        let b = 40.0;
        let q = Quadrature::for_cutoff(b, 3).unwrap();
        let f = basis_fn(b, 3, true);
        for &xi in &[0.0, 11.0, 25.5, 40.0] {
            assert!(parity_residual(&q, &f, xi).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_interpolation() {
        let f = GridFunction::sampled(2.0, vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 0.0]).unwrap();
        assert_eq!(f.eval(0.5), 1.0);
        assert_eq!(f.eval(2.0), 0.0);
        assert_eq!(f.reflected().eval(0.5), 1.0);
        assert!(GridFunction::sampled(2.0, vec![0.0, 2.0, 1.0], vec![0.0; 3]).is_err());
    }

    #[test]
    fn domain_mismatch_rejected() {
        let q = Quadrature::new(5.0, 4, 4).unwrap();
        let f = GridFunction::from_fn(6.0, |x| x);
        assert!(matches!(
            apply_gamma(&q, &f, 1.0),
            Err(OperatorError::DomainMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn theta_star_is_transpose(xi in 0.0f64..100.0, x in 0.0f64..100.0) {
            prop_assert_eq!(kernel_theta_star(xi, x), kernel_theta(x, xi));
        }

        #[test]
        fn vartheta_symmetric(xi in 0.0f64..100.0, x in 0.0f64..100.0) {
            let a = kernel_vartheta1(xi, x);
            let c = kernel_vartheta1(x, xi);
            prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
            let a = kernel_vartheta2(100.0, xi, x);
            let c = kernel_vartheta2(100.0, x, xi);
            prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn gamma_is_reflected_gamma_star(xi in 0.0f64..25.0, c in -2.0f64..2.0) {
            let b = 25.0;
            let q = Quadrature::new(b, 64, 8).unwrap();
            let f = GridFunction::from_fn(b, move |x| (c * x / b).exp() + (x / 3.0).cos());
            let lhs = apply_gamma(&q, &f, xi).unwrap();
            let rhs = apply_gamma_star(&q, &f.reflected(), b - xi).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }

        #[test]
        fn parity_holds_for_any_smooth_f(xi in 0.0f64..30.0, a in -1.0f64..1.0, w in 0.0f64..2.0) {
            let b = 30.0;
            let q = Quadrature::new(b, 64, 8).unwrap();
            let f = GridFunction::from_fn(b, move |x| a + (w * x).sin());
            prop_assert!(parity_residual(&q, &f, xi).unwrap().abs() < 1e-10 * b * b);
        }
    }
}
