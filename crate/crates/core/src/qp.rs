//! Dense primal-dual interior-point solver for the smoothness program,
//! phase-1 feasibility certification and the minimal-cutoff scan.
//!
//! The generic problem is
//!
//! ```text
//! min  1/2 x' diag(q) x + c' x    s.t.  G x <= h,  A x = b
//! ```
//!
//! solved with Mehrotra's predictor-corrector on the normal equations
//! `(diag(q) + G' W G) dx = r`, after Ruiz equilibration of `[G; A]`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::constraints::{
    assemble_from_parts, build_price_rows, design_matrix, price_rows_matrix, ConstraintError,
    ConstraintSystem, StrikeGrid,
};
use crate::market::QuoteSheet;
use crate::spectral::BasisSet;

/// Default feasibility tolerance, relative to `max(1, max ask)`.
pub const DEFAULT_FEAS_REL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum QpError {
    #[error(
        "no feasible cutoff up to N = {n_max} (smallest violation {best_violation:.3e}): {}",
        if *.arbitrage { "the quotes contain arbitrage" } else { "raise N_max" }
    )]
    NoFeasibleCutoff {
        n_max: usize,
        arbitrage: bool,
        best_violation: f64,
        trace: Vec<CutoffProbe>,
    },
    #[error("interior-point iteration failed: {0}")]
    Numerical(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub tol_gap: f64,
    /// Feasibility tolerance relative to the system's price scale.
    pub feas_rel: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            tol_gap: 1e-9,
            feas_rel: DEFAULT_FEAS_REL,
        }
    }
}

impl SolverOptions {
    pub fn feas_tol(&self, price_scale: f64) -> f64 {
        self.feas_rel * price_scale.max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    /// Converged, but the external constraint check exceeds the tolerance.
    Inaccurate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QpSolution {
    pub omega: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
    /// Largest row violation of `omega` in price units.
    pub max_violation: f64,
}

/// Outcome of the generic interior-point method.
#[derive(Debug, Clone)]
pub struct IpmResult {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub kkt: KktResiduals,
}

/// `min 1/2 x' diag(q) x + c' x  s.t.  G x <= h, A x = b`.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub q: DVector<f64>,
    pub c: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut a: f64 = 1.0;
    for (x, d) in v.iter().zip(dv.iter()) {
        if *d < 0.0 {
            a = a.min(-x / d);
        }
    }
    a
}

/// Factor of the normal matrix `Q + G' W G + reg I`, taken as the R of a QR
/// decomposition of the stacked `[sqrt(Q + reg); sqrt(W) G]`. Forming
/// `G' W G` explicitly loses the small-weight rows once `W` spans many
/// decades near the optimum; the stacked form keeps them. `reg` starts at
/// 1e-17 relative: LPs need some, but 1e-14 already swamps the directions
/// where Q is tiny and stalls the dual residual.
struct Normal {
    r: DMatrix<f64>,
    schur: Option<(DMatrix<f64>, nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>)>,
}

impl Normal {
    fn factor(p: &DenseQp, w: &DVector<f64>) -> Option<Self> {
        let n = p.q.len();
        let m = p.g.nrows();
        let col_scale = (0..n)
            .map(|j| p.q[j] + (0..m).map(|i| w[i] * p.g[(i, j)] * p.g[(i, j)]).sum::<f64>())
            .fold(0.0f64, f64::max)
            .max(1e-300);
        let mut reg = 1e-17 * col_scale;
        for _ in 0..8 {
            let mut stacked = DMatrix::zeros(n + m, n);
            for j in 0..n {
                stacked[(j, j)] = (p.q[j] + reg).sqrt();
            }
            for i in 0..m {
                let sw = w[i].sqrt();
                for j in 0..n {
                    stacked[(n + i, j)] = sw * p.g[(i, j)];
                }
            }
            let r = stacked.qr().r();
            let this = Self { r, schur: None };
            let ok = (0..n).all(|j| this.r[(j, j)].abs() > 0.0 && this.r[(j, j)].is_finite());
            if ok {
                let schur = if p.a.nrows() > 0 {
                    let kinv_at = this.solve_k(&p.a.transpose())?;
                    let s = &p.a * &kinv_at;
                    Some((kinv_at, s.lu()))
                } else {
                    None
                };
                return Some(Self { schur, ..this });
            }
            reg *= 100.0;
        }
        None
    }

    fn solve_k(&self, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let u = self.r.tr_solve_upper_triangular(rhs)?;
        self.r.solve_upper_triangular(&u)
    }

    /// Solves `K dx + A' dy = r1`, `A dx = r2`.
    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let kr1 = self.solve_k(&DMatrix::from_column_slice(r1.len(), 1, r1.as_slice()))?.column(0).into_owned();
        match &self.schur {
            None => Some((kr1, DVector::zeros(0))),
            Some((kinv_at, lu)) => {
                // A K^-1 (r1 - A' dy) = r2
                let rhs = kinv_at.transpose() * r1 - r2;
                let dy = lu.solve(&rhs)?;
                let dx = kr1 - kinv_at * &dy;
                Some((dx, dy))
            }
        }
    }
}

/// Mehrotra predictor-corrector on an already well-scaled problem.
pub fn interior_point(p: &DenseQp, opts: &SolverOptions) -> Result<IpmResult, QpError> {
    let n = p.q.len();
    let m = p.g.nrows();
    let ne = p.a.nrows();
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(ne);
    let r0 = &p.h - &p.g * &x;
    let shift = (1.0 - r0.min()).max(0.0);
    let mut s = r0.add_scalar(shift);
    let mut z = DVector::from_element(m, 1.0);

    let h_norm = 1.0 + inf_norm(&p.h);
    let b_norm = 1.0 + inf_norm(&p.b);
    let c_norm = 1.0 + inf_norm(&p.c);
    let merit = |k: &KktResiduals| {
        (k.primal / opts.tol_primal)
            .max(k.dual / opts.tol_dual)
            .max(k.gap / opts.tol_gap)
    };
    let mut best: Option<(f64, IpmResult)> = None;
    let mut stalled = 0;
    for it in 0..opts.max_iter {
        let qx = p.q.component_mul(&x);
        let gtz = p.g.transpose() * &z;
        let r_d = &qx + &p.c + &gtz + p.a.transpose() * &y;
        let r_p = &p.g * &x + &s - &p.h;
        let r_e = &p.a * &x - &p.b;
        let sz = s.dot(&z);
        let mu = if m > 0 { sz / m as f64 } else { 0.0 };
        let pobj = 0.5 * x.dot(&qx) + p.c.dot(&x);
        let kkt = KktResiduals {
            primal: (inf_norm(&r_p) / h_norm).max(inf_norm(&r_e) / b_norm),
            dual: inf_norm(&r_d) / (c_norm + inf_norm(&qx) + inf_norm(&gtz)),
            gap: sz / (1.0 + pobj.abs()),
        };
        let score = merit(&kkt);
        if !score.is_finite() {
            break;
        }
        if best.as_ref().map_or(true, |(b, _)| score < *b) {
            best = Some((
                score,
                IpmResult {
                    x: x.clone(),
                    z: z.clone(),
                    y: y.clone(),
                    converged: score <= 1.0,
                    iterations: it,
                    kkt,
                },
            ));
        }
        if score <= 1.0 || stalled >= 10 {
            break;
        }
        let w = z.component_div(&s);
        let Some(normal) = Normal::factor(p, &w) else {
            break;
        };
        // Newton step for right-hand sides (r_d, r_p, r_e, r_c)
        let newton = |rd: &DVector<f64>, rp: &DVector<f64>, re: &DVector<f64>, rc: &DVector<f64>| {
            let t = w.component_mul(rp) - rc.component_div(&s);
            let r1 = -rd - p.g.transpose() * &t;
            let (dx, dy) = normal.solve(&r1, &(-re))?;
            let gdx = &p.g * &dx;
            let dz = w.component_mul(&(&gdx + rp)) - rc.component_div(&s);
            let ds = -rp - gdx;
            Some([dx, dy, dz, ds])
        };
        let direction = |r_c: &DVector<f64>| -> Option<[DVector<f64>; 4]> {
            let [mut dx, mut dy, mut dz, mut ds] = newton(&r_d, &r_p, &r_e, r_c)?;
            // refinement against the unreduced linearization
            for _ in 0..2 {
                let e1 = p.q.component_mul(&dx) + p.g.transpose() * &dz + p.a.transpose() * &dy + &r_d;
                let e2 = &p.g * &dx + &ds + &r_p;
                let e3 = &p.a * &dx + &r_e;
                let e4 = z.component_mul(&ds) + s.component_mul(&dz) + r_c;
                let [cx, cy, cz, cs] = newton(&e1, &e2, &e3, &e4)?;
                dx -= cx;
                dy -= cy;
                dz -= cz;
                ds -= cs;
            }
            Some([dx, dy, dz, ds])
        };
        let rc_aff = s.component_mul(&z);
        let Some([_, _, dz_a, ds_a]) = direction(&rc_aff) else {
            break;
        };
        let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let mu_aff = (&s + &ds_a * a_aff).dot(&(&z + &dz_a * a_aff)) / m.max(1) as f64;
        let sigma = if mu > 0.0 { (mu_aff / mu).clamp(0.0, 1.0).powi(3) } else { 0.0 };
        // Do not aim below the gap tolerance: a smaller target only widens the
        // spread of W and costs accuracy in the dual residual.
        let floor = 0.05 * opts.tol_gap * (1.0 + pobj.abs()) / m.max(1) as f64;
        let target = (sigma * mu).max(floor.min(mu));
        let rc = rc_aff + ds_a.component_mul(&dz_a) - DVector::from_element(m, target);
        let Some([dx, dy, dz, ds]) = direction(&rc) else {
            break;
        };
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        // a run of negligible steps means roundoff has taken over
        stalled = if alpha < 1e-4 { stalled + 1 } else { 0 };
        x += &dx * alpha;
        y += &dy * alpha;
        z += &dz * alpha;
        s += &ds * alpha;
        // keep strictly positive after rounding
        s.apply(|v| *v = v.max(1e-300));
        z.apply(|v| *v = v.max(1e-300));
    }
    best.map(|(_, r)| r)
        .ok_or_else(|| QpError::Numerical("interior point produced no finite iterate".into()))
}

/// Ruiz equilibration of `[G; A]`; returns row factors for `G`, for `A`, and column factors.
fn ruiz(g: &DMatrix<f64>, a: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let (mg, n) = g.shape();
    let ma = a.nrows();
    let mut rg = DVector::from_element(mg, 1.0);
    let mut ra = DVector::from_element(ma, 1.0);
    let mut d = DVector::from_element(n, 1.0);
    let mut gs = g.clone();
    let mut as_ = a.clone();
    for _ in 0..25 {
        let mut cmax = DVector::<f64>::zeros(n);
        for i in 0..mg {
            let rmax = gs.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let f = if rmax > 0.0 { 1.0 / rmax.sqrt() } else { 1.0 };
            rg[i] *= f;
            gs.row_mut(i).scale_mut(f);
        }
        for i in 0..ma {
            let rmax = as_.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let f = if rmax > 0.0 { 1.0 / rmax.sqrt() } else { 1.0 };
            ra[i] *= f;
            as_.row_mut(i).scale_mut(f);
        }
        for j in 0..n {
            let cg = gs.column(j).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let ca = as_.column(j).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            cmax[j] = cg.max(ca);
        }
        for j in 0..n {
            let f = if cmax[j] > 0.0 { 1.0 / cmax[j].sqrt() } else { 1.0 };
            d[j] *= f;
            gs.column_mut(j).scale_mut(f);
            as_.column_mut(j).scale_mut(f);
        }
    }
    // finish with exact unit row norms
    for i in 0..mg {
        let rmax = gs.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if rmax > 0.0 {
            rg[i] /= rmax;
            gs.row_mut(i).scale_mut(1.0 / rmax);
        }
    }
    for i in 0..ma {
        let rmax = as_.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if rmax > 0.0 {
            ra[i] /= rmax;
        }
    }
    (rg, ra, d)
}

/// Equilibrates, solves and maps back to the original variables.
pub fn solve_dense(p: &DenseQp, opts: &SolverOptions) -> Result<IpmResult, QpError> {
    let eq_keep = nonzero_rows(&p.a);
    if eq_keep.len() < p.a.nrows() {
        if (0..p.a.nrows()).any(|i| !eq_keep.contains(&i) && p.b[i] != 0.0) {
            return Err(QpError::Numerical("inconsistent zero equality row".into()));
        }
        let (a, b) = select_rows(&p.a, &p.b, &eq_keep);
        let mut res = solve_dense(&DenseQp { a, b, ..p.clone() }, opts)?;
        let mut y = DVector::zeros(p.a.nrows());
        for (j, &i) in eq_keep.iter().enumerate() {
            y[i] = res.y[j];
        }
        res.y = y;
        return Ok(res);
    }
    let (rg, ra, d) = ruiz(&p.g, &p.a);
    let mut g = p.g.clone();
    for (i, mut row) in g.row_iter_mut().enumerate() {
        row *= rg[i];
    }
    for (j, mut col) in g.column_iter_mut().enumerate() {
        col *= d[j];
    }
    let mut a = p.a.clone();
    for (i, mut row) in a.row_iter_mut().enumerate() {
        row *= ra[i];
    }
    for (j, mut col) in a.column_iter_mut().enumerate() {
        col *= d[j];
    }
    let q = p.q.component_mul(&d).component_mul(&d);
    let c = p.c.component_mul(&d);
    let obj_scale = 1.0 / inf_norm(&q).max(inf_norm(&c)).max(1e-300);
    let scaled = DenseQp {
        q: q * obj_scale,
        c: c * obj_scale,
        g,
        h: p.h.component_mul(&rg),
        a,
        b: p.b.component_mul(&ra),
    };
    let mut res = interior_point(&scaled, opts)?;
    res.x = res.x.component_mul(&d);
    res.z = res.z.component_mul(&rg) / obj_scale;
    res.y = res.y.component_mul(&ra) / obj_scale;
    Ok(res)
}

/// Rows with at least one entry above roundoff relative to its column.
/// A row of pure roundoff (basis functions that vanish analytically at a
/// node) would be blown up to unit norm by equilibration and then pin the
/// iterate; such rows only contribute `-h_i` to violations.
fn nonzero_rows(g: &DMatrix<f64>) -> Vec<usize> {
    let colmax: Vec<f64> = g
        .column_iter()
        .map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    (0..g.nrows())
        .filter(|&i| {
            g.row(i)
                .iter()
                .zip(&colmax)
                .any(|(v, cm)| v.abs() > 1e-12 * cm)
        })
        .collect()
}

fn select_rows(g: &DMatrix<f64>, h: &DVector<f64>, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let gs = DMatrix::from_fn(idx.len(), g.ncols(), |i, j| g[(idx[i], j)]);
    let hs = DVector::from_iterator(idx.len(), idx.iter().map(|&i| h[i]));
    (gs, hs)
}

/// Result of the phase-1 program `min t  s.t.  G x - t <= h, A x = b`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phase1 {
    pub x: DVector<f64>,
    /// `max_i (G x - h)_i` at the returned point, in the units of `h`.
    pub violation: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Minimizes the largest violation of `G x <= h` subject to `A x = b`.
pub fn phase1_dense(
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<Phase1, QpError> {
    let n = g.ncols();
    let keep = nonzero_rows(g);
    let (gk, hk) = select_rows(g, h, &keep);
    let cap = 1.0f64.max(inf_norm(h));
    let mk = gk.nrows();
    let mut gaug = DMatrix::zeros(mk + 1, n + 1);
    gaug.view_mut((0, 0), (mk, n)).copy_from(&gk);
    for i in 0..mk {
        gaug[(i, n)] = -1.0;
    }
    gaug[(mk, n)] = -1.0;
    let mut haug = DVector::zeros(mk + 1);
    haug.rows_mut(0, mk).copy_from(&hk);
    haug[mk] = cap;
    let mut aaug = DMatrix::zeros(a.nrows(), n + 1);
    aaug.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let mut c = DVector::zeros(n + 1);
    c[n] = 1.0;
    let lp = DenseQp {
        q: DVector::zeros(n + 1),
        c,
        g: gaug,
        h: haug,
        a: aaug,
        b: b.clone(),
    };
    let res = solve_dense(&lp, opts)?;
    let x = res.x.rows(0, n).into_owned();
    let violation = (g * &x - h).max();
    Ok(Phase1 {
        x,
        violation,
        converged: res.converged,
        iterations: res.iterations,
    })
}

fn equality(system: &ConstraintSystem) -> (DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_row_slice(1, system.eq_row.len(), system.eq_row.as_slice());
    (a, DVector::zeros(1))
}

/// Phase-1 feasibility of a constraint system.
pub fn phase1(system: &ConstraintSystem, opts: &SolverOptions) -> Result<Phase1, QpError> {
    let (a, b) = equality(system);
    let mut p = phase1_dense(&system.g, &system.h, &a, &b, opts)?;
    // the equality row is exact in the reported point
    p.violation = system.max_violation(&p.x);
    Ok(p)
}

/// Solves the smoothness program, certifying infeasibility through phase 1.
pub fn solve(system: &ConstraintSystem, opts: &SolverOptions) -> Result<QpSolution, QpError> {
    let p1 = phase1(system, opts)?;
    solve_after_phase1(system, &p1, opts)
}

fn solve_after_phase1(
    system: &ConstraintSystem,
    p1: &Phase1,
    opts: &SolverOptions,
) -> Result<QpSolution, QpError> {
    let tol = opts.feas_tol(system.price_scale);
    if p1.violation > tol {
        return Ok(QpSolution {
            objective: system.objective(&p1.x),
            omega: p1.x.clone(),
            status: QpStatus::Infeasible,
            kkt: KktResiduals {
                primal: p1.violation,
                dual: 0.0,
                gap: 0.0,
            },
            iterations: p1.iterations,
            max_violation: p1.violation,
        });
    }
    let (a, b) = equality(system);
    let keep = nonzero_rows(&system.g);
    let (g, h) = select_rows(&system.g, &system.h, &keep);
    let attempt = |relax: f64| -> Result<(IpmResult, f64), QpError> {
        let qp = DenseQp {
            q: system.hessian_diag.clone(),
            c: DVector::zeros(system.hessian_diag.len()),
            g: g.clone(),
            h: h.add_scalar(relax),
            a: a.clone(),
            b: b.clone(),
        };
        let res = solve_dense(&qp, opts)?;
        let v = system.max_violation(&res.x);
        Ok((res, v))
    };
    let base = p1.violation.max(0.0);
    let (mut res, mut v) = attempt(base + 0.01 * (tol - base))?;
    if v > tol {
        (res, v) = attempt(base)?;
    }
    let status = if !res.converged {
        QpStatus::MaxIterations
    } else if v > tol {
        QpStatus::Inaccurate
    } else {
        QpStatus::Optimal
    };
    Ok(QpSolution {
        objective: system.objective(&res.x),
        omega: res.x,
        status,
        kkt: res.kkt,
        iterations: res.iterations,
        max_violation: v,
    })
}

/// Phase-1 outcome at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CutoffProbe {
    pub n: usize,
    pub violation: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct CutoffResult {
    pub n_star: usize,
    pub solution: QpSolution,
    pub system: ConstraintSystem,
    pub trace: Vec<CutoffProbe>,
}

/// Reusable per-sheet data for scanning cutoffs.
pub struct CutoffScanner<'a> {
    basis: &'a BasisSet,
    grid: StrikeGrid,
    rows: Vec<crate::constraints::PriceRow>,
    phi: DMatrix<f64>,
    price_scale: f64,
    quotes: QuoteSheet,
}

impl<'a> CutoffScanner<'a> {
    pub fn new(
        basis: &'a BasisSet,
        grid: &StrikeGrid,
        quotes: &QuoteSheet,
    ) -> Result<Self, QpError> {
        let rows = build_price_rows(grid, quotes)?;
        let phi = design_matrix(basis, grid)?;
        Ok(Self {
            basis,
            grid: grid.clone(),
            rows,
            phi,
            price_scale: quotes.max_ask().max(1.0),
            quotes: quotes.clone(),
        })
    }

    pub fn system(&self, n: usize) -> Result<ConstraintSystem, QpError> {
        let mut sys = assemble_from_parts(self.basis, &self.grid, &self.rows, &self.phi, n)?;
        sys.price_scale = self.price_scale;
        Ok(sys)
    }

    pub fn probe(&self, n: usize, opts: &SolverOptions) -> Result<(ConstraintSystem, Phase1), QpError> {
        let sys = self.system(n)?;
        let p1 = phase1(&sys, opts)?;
        Ok((sys, p1))
    }

    pub fn solve_at(&self, n: usize, opts: &SolverOptions) -> Result<(ConstraintSystem, QpSolution), QpError> {
        let (sys, p1) = self.probe(n, opts)?;
        let sol = solve_after_phase1(&sys, &p1, opts)?;
        Ok((sys, sol))
    }

    /// Scans `N = 0, 1, ...` and solves at the first feasible cutoff.
    pub fn find_min_cutoff(&self, n_max: usize, opts: &SolverOptions) -> Result<CutoffResult, QpError> {
        if n_max > self.basis.max_index() {
            return Err(ConstraintError::CutoffTooLarge {
                n: n_max,
                max: self.basis.max_index(),
            }
            .into());
        }
        let tol = opts.feas_tol(self.price_scale);
        let mut trace = Vec::new();
        for n in 0..=n_max {
            let (sys, p1) = self.probe(n, opts)?;
            let feasible = p1.violation <= tol;
            trace.push(CutoffProbe {
                n,
                violation: p1.violation,
                feasible,
            });
            if feasible {
                let solution = solve_after_phase1(&sys, &p1, opts)?;
                return Ok(CutoffResult {
                    n_star: n,
                    solution,
                    system: sys,
                    trace,
                });
            }
        }
        let best_violation = trace.iter().map(|t| t.violation).fold(f64::INFINITY, f64::min);
        let arbitrage = quotes_contain_arbitrage(&self.quotes, self.grid.domain(), opts)?;
        Err(QpError::NoFeasibleCutoff {
            n_max,
            arbitrage,
            best_violation,
            trace,
        })
    }
}

/// Minimal feasible cutoff for a quote sheet.
pub fn find_min_cutoff(
    basis: &BasisSet,
    grid: &StrikeGrid,
    quotes: &QuoteSheet,
    n_max: usize,
    opts: &SolverOptions,
) -> Result<CutoffResult, QpError> {
    CutoffScanner::new(basis, grid, quotes)?.find_min_cutoff(n_max, opts)
}

/// Whether no price vector at all satisfies the constraints.
///
/// Feasibility over grid prices only needs the nodes `0`, the quoted strikes
/// and `B`: linear interpolation of a feasible coarse vector is feasible on
/// any refinement.
pub fn quotes_contain_arbitrage(
    quotes: &QuoteSheet,
    b: f64,
    opts: &SolverOptions,
) -> Result<bool, QpError> {
    let s = quotes.len();
    let mut xi = Vec::with_capacity(s + 2);
    xi.push(0.0);
    xi.extend_from_slice(&quotes.strikes);
    xi.push(b);
    let coarse = StrikeGrid {
        xi,
        quoted_idx: (1..=s).collect(),
    };
    let rows = build_price_rows(&coarse, quotes)?;
    let (g, h) = price_rows_matrix(&rows, s + 2);
    let p1 = phase1_dense(&g, &h, &DMatrix::zeros(0, s + 2), &DVector::zeros(0), opts)?;
    Ok(p1.violation > opts.feas_tol(quotes.max_ask()))
}
