//! Strike grid and the affine constraint set of the smoothness program.
//!
//! Rows are first built on the vector `m` of put prices at the grid strikes
//! and then mapped to basis coefficients through `m = Phi omega`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::market::{MarketParams, QuoteSheet};
use crate::spectral::{BasisSet, Family, SpectralError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("quoted strike {strike} is outside (0, {b})")]
    StrikeOutside { strike: f64, b: f64 },
    #[error("duplicate or unsorted quoted strike {0}")]
    DuplicateStrike(f64),
    #[error("grid has {0} points; at least 3 are needed")]
    GridTooSmall(usize),
    #[error("bid {bid} above ask {ask} at strike {strike}")]
    BidAboveAsk { strike: f64, bid: f64, ask: f64 },
    #[error("quotes do not match the grid's quoted strikes")]
    QuoteMismatch,
    #[error("cutoff {n} exceeds basis size {max}")]
    CutoffTooLarge { n: usize, max: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Ascending strikes `0 = xi_1 < ... < xi_n = B` with the positions of the quotes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrikeGrid {
    pub xi: Vec<f64>,
    /// Zero-based positions in `xi` of the quoted strikes, in quote order.
    pub quoted_idx: Vec<usize>,
}

impl StrikeGrid {
    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    pub fn domain(&self) -> f64 {
        *self.xi.last().expect("non-empty grid")
    }
}

/// Integer grid `0, 1, ..., floor(B)` plus `B` when fractional, merged with the quotes.
pub fn build_grid(b: f64, quoted: &[f64]) -> Result<StrikeGrid, ConstraintError> {
    let mut prev = 0.0;
    for &k in quoted {
        if !(k > 0.0 && k < b) {
            return Err(ConstraintError::StrikeOutside { strike: k, b });
        }
        if k <= prev {
            return Err(ConstraintError::DuplicateStrike(k));
        }
        prev = k;
    }
    let top = b.floor() as usize;
    let mut xi: Vec<f64> = (0..=top).map(|i| i as f64).collect();
    if (top as f64) < b {
        xi.push(b);
    }
    xi.extend_from_slice(quoted);
    xi.sort_by(f64::total_cmp);
    xi.dedup();
    if xi.len() < 3 {
        return Err(ConstraintError::GridTooSmall(xi.len()));
    }
    let quoted_idx = quoted
        .iter()
        .map(|k| xi.binary_search_by(|x| x.total_cmp(k)).expect("merged strike"))
        .collect();
    Ok(StrikeGrid { xi, quoted_idx })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RowKind {
    Convexity,
    LowerBound,
    RightSlope,
    LeftSlope,
    Ask,
    Bid,
}

/// One inequality `sum_j c_j m_{i_j} <= rhs` on grid prices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PriceRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
    pub kind: RowKind,
}

impl PriceRow {
    pub fn eval(&self, m: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * m[i]).sum()
    }

    /// `eval(m) - rhs`; positive means violated.
    pub fn violation(&self, m: &[f64]) -> f64 {
        self.eval(m) - self.rhs
    }
}

/// Convexity, intrinsic lower bound and the two end-slope rows.
pub fn build_noarb(grid: &StrikeGrid, params: &MarketParams) -> Result<Vec<PriceRow>, ConstraintError> {
    let n = grid.len();
    if n < 3 {
        return Err(ConstraintError::GridTooSmall(n));
    }
    let xi = &grid.xi;
    let mut rows = Vec::with_capacity(2 * n);
    // slope decrease (m_{i+1}-m_i)/dx_i - (m_{i+2}-m_{i+1})/dx_{i+1} <= 0
    for i in 0..n - 2 {
        let d0 = xi[i + 1] - xi[i];
        let d1 = xi[i + 2] - xi[i + 1];
        rows.push(PriceRow {
            terms: vec![(i, -1.0 / d0), (i + 1, 1.0 / d0 + 1.0 / d1), (i + 2, -1.0 / d1)],
            rhs: 0.0,
            kind: RowKind::Convexity,
        });
    }
    let disc = params.discount();
    let spot = params.dividend_discounted_spot();
    for (i, &x) in xi.iter().enumerate() {
        rows.push(PriceRow {
            terms: vec![(i, -1.0)],
            rhs: -(x * disc - spot).max(0.0),
            kind: RowKind::LowerBound,
        });
    }
    let dn = xi[n - 1] - xi[n - 2];
    rows.push(PriceRow {
        terms: vec![(n - 2, -1.0 / dn), (n - 1, 1.0 / dn)],
        rhs: disc,
        kind: RowKind::RightSlope,
    });
    let d1 = xi[1] - xi[0];
    rows.push(PriceRow {
        terms: vec![(0, 1.0 / d1), (1, -1.0 / d1)],
        rhs: 0.0,
        kind: RowKind::LeftSlope,
    });
    Ok(rows)
}

/// Ask rows at the quotes and both ends, bid rows at the quotes.
pub fn build_bidask(
    grid: &StrikeGrid,
    quotes: &QuoteSheet,
) -> Result<Vec<PriceRow>, ConstraintError> {
    let s = quotes.len();
    if s != grid.quoted_idx.len()
        || grid
            .quoted_idx
            .iter()
            .zip(&quotes.strikes)
            .any(|(&i, &k)| grid.xi[i] != k)
    {
        return Err(ConstraintError::QuoteMismatch);
    }
    for i in 0..s {
        if quotes.bid[i] > quotes.ask[i] {
            return Err(ConstraintError::BidAboveAsk {
                strike: quotes.strikes[i],
                bid: quotes.bid[i],
                ask: quotes.ask[i],
            });
        }
    }
    let n = grid.len();
    let last_q = grid.quoted_idx[s - 1];
    let ask_n = quotes.ask[s - 1] + quotes.params.discount() * (grid.xi[n - 1] - grid.xi[last_q]);
    let mut rows = Vec::with_capacity(2 * s + 2);
    rows.push(PriceRow {
        terms: vec![(0, 1.0)],
        rhs: 0.0,
        kind: RowKind::Ask,
    });
    for (j, &i) in grid.quoted_idx.iter().enumerate() {
        rows.push(PriceRow {
            terms: vec![(i, 1.0)],
            rhs: quotes.ask[j],
            kind: RowKind::Ask,
        });
    }
    rows.push(PriceRow {
        terms: vec![(n - 1, 1.0)],
        rhs: ask_n,
        kind: RowKind::Ask,
    });
    for (j, &i) in grid.quoted_idx.iter().enumerate() {
        rows.push(PriceRow {
            terms: vec![(i, -1.0)],
            rhs: -quotes.bid[j],
            kind: RowKind::Bid,
        });
    }
    Ok(rows)
}

/// All price rows for a grid and quote sheet.
pub fn build_price_rows(
    grid: &StrikeGrid,
    quotes: &QuoteSheet,
) -> Result<Vec<PriceRow>, ConstraintError> {
    let mut rows = build_noarb(grid, &quotes.params)?;
    rows.extend(build_bidask(grid, quotes)?);
    Ok(rows)
}

/// Dense rows `sum_j c_j e_{i_j}` over `n` price variables.
pub fn price_rows_matrix(rows: &[PriceRow], n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut g = DMatrix::zeros(rows.len(), n);
    let mut h = DVector::zeros(rows.len());
    for (r, row) in rows.iter().enumerate() {
        for &(i, c) in &row.terms {
            g[(r, i)] += c;
        }
        h[r] = row.rhs;
    }
    (g, h)
}

/// Program data in basis coefficients for one cutoff `N`.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub cutoff: usize,
    pub grid: StrikeGrid,
    /// `Phi[i, k] = phi_k(xi_i)`.
    pub phi: DMatrix<f64>,
    pub rows: Vec<PriceRow>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    /// `psi_k(0) / lambda_k`; the equality is `eq_row . omega = 0`.
    pub eq_row: DVector<f64>,
    /// `lambda_k^{-4}`.
    pub hessian_diag: DVector<f64>,
    pub lambdas: Vec<f64>,
    /// `max(1, max ask)`, the unit of the feasibility tolerance.
    pub price_scale: f64,
}

impl ConstraintSystem {
    /// `m = Phi omega`.
    pub fn prices(&self, omega: &DVector<f64>) -> DVector<f64> {
        &self.phi * omega
    }

    /// Largest row violation of `omega`, in price units (negative when strictly inside).
    pub fn max_violation(&self, omega: &DVector<f64>) -> f64 {
        let m = self.prices(omega);
        self.rows
            .iter()
            .map(|r| r.violation(m.as_slice()))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn objective(&self, omega: &DVector<f64>) -> f64 {
        0.5 * omega
            .iter()
            .zip(self.hessian_diag.iter())
            .map(|(w, q)| q * w * w)
            .sum::<f64>()
    }
}

/// Grid values of `phi_0..phi_N` for the whole basis.
pub fn design_matrix(basis: &BasisSet, grid: &StrikeGrid) -> Result<DMatrix<f64>, ConstraintError> {
    let cols = basis.max_index() + 1;
    let mut phi = DMatrix::zeros(grid.len(), cols);
    for (i, &x) in grid.xi.iter().enumerate() {
        let row = basis.row(Family::Phi, x, 0)?;
        for (k, v) in row.into_iter().enumerate() {
            phi[(i, k)] = v;
        }
    }
    Ok(phi)
}

/// Builds the program for cutoff `n` from precomputed rows and a full design matrix.
pub fn assemble_from_parts(
    basis: &BasisSet,
    grid: &StrikeGrid,
    rows: &[PriceRow],
    phi_full: &DMatrix<f64>,
    n: usize,
) -> Result<ConstraintSystem, ConstraintError> {
    if n > basis.max_index() || phi_full.ncols() <= n {
        return Err(ConstraintError::CutoffTooLarge {
            n,
            max: basis.max_index(),
        });
    }
    let cols = n + 1;
    let phi = phi_full.columns(0, cols).into_owned();
    let mut g = DMatrix::zeros(rows.len(), cols);
    let mut h = DVector::zeros(rows.len());
    for (r, row) in rows.iter().enumerate() {
        for &(i, c) in &row.terms {
            for k in 0..cols {
                g[(r, k)] += c * phi[(i, k)];
            }
        }
        h[r] = row.rhs;
    }
    let pairs = &basis.pairs()[..cols];
    let psi0 = basis.row(Family::Psi, 0.0, 0)?;
    let eq_row = DVector::from_iterator(cols, pairs.iter().map(|p| psi0[p.k] / p.lambda));
    let hessian_diag = DVector::from_iterator(cols, pairs.iter().map(|p| p.lambda.powi(-4)));
    Ok(ConstraintSystem {
        cutoff: n,
        grid: grid.clone(),
        phi,
        rows: rows.to_vec(),
        g,
        h,
        eq_row,
        hessian_diag,
        lambdas: pairs.iter().map(|p| p.lambda).collect(),
        price_scale: 1.0,
    })
}

/// Full constraint system at cutoff `n`.
pub fn assemble(
    basis: &BasisSet,
    grid: &StrikeGrid,
    quotes: &QuoteSheet,
    n: usize,
) -> Result<ConstraintSystem, ConstraintError> {
    if n > basis.max_index() {
        return Err(ConstraintError::CutoffTooLarge {
            n,
            max: basis.max_index(),
        });
    }
    let rows = build_price_rows(grid, quotes)?;
    let phi = design_matrix(&basis.truncated(n)?, grid)?;
    let mut sys = assemble_from_parts(basis, grid, &rows, &phi, n)?;
    sys.price_scale = quotes.max_ask().max(1.0);
    Ok(sys)
}
