//! Market inputs, the Black-Scholes reference model, synthetic quotes and the
//! lognormal least-squares baseline.

use std::fs;
use std::path::Path;

use argmin::core::{CostFunction, Executor};
use argmin::solver::brent::BrentOpt;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

pub use crate::estimate::log_price_density;

/// Generator used by [`simulate_quotes`], recorded in run metadata.
pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha 0.3, seed_from_u64)";

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("quote sheet is empty")]
    Empty,
    #[error("bid {bid} exceeds ask {ask} at strike {strike}")]
    BidAboveAsk { strike: f64, bid: f64, ask: f64 },
    #[error("strikes must be strictly ascending and positive (strike {strike})")]
    Unsorted { strike: f64 },
    #[error("negative price at strike {strike}")]
    NegativePrice { strike: f64 },
    #[error("invalid market parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate quote sheet: {0}")]
    Degenerate(String),
    #[error("argument out of range: {0}")]
    Domain(String),
    #[error("optimizer failure: {0}")]
    Optimizer(String),
}

/// Spot, rates and maturity of one option chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    #[serde(rename = "S0")]
    pub s0: f64,
    pub r: f64,
    pub delta: f64,
    pub tau: f64,
}

impl MarketParams {
    pub fn new(s0: f64, r: f64, delta: f64, tau: f64) -> Result<Self, MarketError> {
        let p = Self { s0, r, delta, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return Err(MarketError::InvalidParams(format!("S0 = {}", self.s0)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(MarketError::InvalidParams(format!("tau = {}", self.tau)));
        }
        if !self.r.is_finite() || !self.delta.is_finite() {
            return Err(MarketError::InvalidParams("non-finite rate".into()));
        }
        Ok(())
    }

    /// `F0 = S0 exp((r - delta) tau)`.
    pub fn forward(&self) -> f64 {
        self.s0 * ((self.r - self.delta) * self.tau).exp()
    }

    pub fn discount(&self) -> f64 {
        (-self.r * self.tau).exp()
    }

    /// `S0 exp(-delta tau)`.
    pub fn dividend_discounted_spot(&self) -> f64 {
        self.s0 * (-self.delta * self.tau).exp()
    }
}

/// Contents of a parameter file; `B_factor` is optional there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(flatten)]
    pub market: MarketParams,
    #[serde(rename = "B_factor", default, skip_serializing_if = "Option::is_none")]
    pub b_factor: Option<f64>,
}

/// Put quotes of one maturity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuoteSheet {
    pub strikes: Vec<f64>,
    pub bid: Vec<f64>,
    pub ask: Vec<f64>,
    pub params: MarketParams,
}

impl QuoteSheet {
    pub fn new(
        strikes: Vec<f64>,
        bid: Vec<f64>,
        ask: Vec<f64>,
        params: MarketParams,
    ) -> Result<Self, MarketError> {
        if strikes.is_empty() {
            return Err(MarketError::Empty);
        }
        if strikes.len() != bid.len() || strikes.len() != ask.len() {
            return Err(MarketError::Degenerate("column lengths differ".into()));
        }
        params.validate()?;
        let mut prev = 0.0;
        for i in 0..strikes.len() {
            let (k, b, a) = (strikes[i], bid[i], ask[i]);
            if !(k > prev) || !k.is_finite() {
                return Err(MarketError::Unsorted { strike: k });
            }
            if !(b >= 0.0) || !a.is_finite() {
                return Err(MarketError::NegativePrice { strike: k });
            }
            if b > a {
                return Err(MarketError::BidAboveAsk { strike: k, bid: b, ask: a });
            }
            prev = k;
        }
        Ok(Self {
            strikes,
            bid,
            ask,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.strikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strikes.is_empty()
    }

    pub fn mid(&self) -> Vec<f64> {
        self.bid
            .iter()
            .zip(&self.ask)
            .map(|(b, a)| 0.5 * (b + a))
            .collect()
    }

    pub fn max_ask(&self) -> f64 {
        self.ask.iter().cloned().fold(0.0, f64::max)
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn d1_d2(params: &MarketParams, sigma: f64, xi: f64) -> (f64, f64) {
    let v = sigma * params.tau.sqrt();
    let d1 = ((params.s0 / xi).ln() + (params.r - params.delta + 0.5 * sigma * sigma) * params.tau) / v;
    (d1, d1 - v)
}

fn check_sigma(sigma: f64) -> Result<(), MarketError> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(MarketError::Domain(format!("sigma = {sigma}")))
    }
}

/// Black-Scholes European put with continuous dividend yield.
pub fn bs_put(params: &MarketParams, sigma: f64, xi: f64) -> Result<f64, MarketError> {
    check_sigma(sigma)?;
    if xi < 0.0 {
        return Err(MarketError::Domain(format!("negative strike {xi}")));
    }
    if xi == 0.0 {
        return Ok(0.0);
    }
    let n = std_normal();
    let (d1, d2) = d1_d2(params, sigma, xi);
    Ok(xi * params.discount() * n.cdf(-d2) - params.dividend_discounted_spot() * n.cdf(-d1))
}

/// Black-Scholes European call with continuous dividend yield.
pub fn bs_call(params: &MarketParams, sigma: f64, xi: f64) -> Result<f64, MarketError> {
    check_sigma(sigma)?;
    if xi < 0.0 {
        return Err(MarketError::Domain(format!("negative strike {xi}")));
    }
    if xi == 0.0 {
        return Ok(params.dividend_discounted_spot());
    }
    let n = std_normal();
    let (d1, d2) = d1_d2(params, sigma, xi);
    Ok(params.dividend_discounted_spot() * n.cdf(d1) - xi * params.discount() * n.cdf(d2))
}

/// Lognormal density of `S_tau` with total variance `sigma^2 tau`.
pub fn lognormal_density(params: &MarketParams, sigma: f64, x: f64) -> Result<f64, MarketError> {
    check_sigma(sigma)?;
    if !(x > 0.0) {
        return Err(MarketError::Domain(format!("density argument {x}")));
    }
    let v = sigma * params.tau.sqrt();
    let mu = params.s0.ln() + (params.r - params.delta - 0.5 * sigma * sigma) * params.tau;
    let z = (x.ln() - mu) / v;
    Ok((-0.5 * z * z).exp() / (x * v * (2.0 * std::f64::consts::PI).sqrt()))
}

/// Strikes `floor(F0), floor(F0) - 1, floor(F0) + 1, floor(F0) - 2, ...`, sorted.
pub fn simulated_strikes(forward: f64, s: usize) -> Result<Vec<f64>, MarketError> {
    if s == 0 {
        return Err(MarketError::Domain("need at least one strike".into()));
    }
    let first = forward.floor();
    let mut strikes = Vec::with_capacity(s);
    for j in 0..s {
        let step = j.div_ceil(2) as f64;
        let k = if j % 2 == 1 { first - step } else { first + step };
        if k <= 0.0 {
            return Err(MarketError::Domain(format!(
                "{s} strikes around {first} reach non-positive strike {k}"
            )));
        }
        strikes.push(k);
    }
    strikes.sort_by(f64::total_cmp);
    Ok(strikes)
}

/// Black-Scholes put quotes with random spreads `z_i = max(1, min(3, w |e_i|))`,
/// where `w = 0.1 max_i P(xi_i)` and `e_i` are standard normal draws.
pub fn simulate_quotes(
    params: &MarketParams,
    sigma: f64,
    s: usize,
    seed: u64,
) -> Result<QuoteSheet, MarketError> {
    let strikes = simulated_strikes(params.forward(), s)?;
    let prices = strikes
        .iter()
        .map(|&k| bs_put(params, sigma, k))
        .collect::<Result<Vec<_>, _>>()?;
    let w = 0.1 * prices.iter().cloned().fold(0.0, f64::max);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut bid = Vec::with_capacity(s);
    let mut ask = Vec::with_capacity(s);
    for &p in &prices {
        let e: f64 = StandardNormal.sample(&mut rng);
        let z = (w * e.abs()).clamp(1.0, 3.0);
        ask.push(p + 0.5 * z);
        bid.push((p - 0.5 * z).max(0.0));
    }
    QuoteSheet::new(strikes, bid, ask, *params)
}

struct MidFit<'a> {
    sheet: &'a QuoteSheet,
    mid: Vec<f64>,
}

impl CostFunction for MidFit<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, sigma: &f64) -> Result<f64, argmin::core::Error> {
        let mut sse = 0.0;
        for (k, m) in self.sheet.strikes.iter().zip(&self.mid) {
            let p = bs_put(&self.sheet.params, *sigma, *k)?;
            sse += (p - m).powi(2);
        }
        Ok(sse)
    }
}

/// Least-squares lognormal volatility against mid prices, `sigma` in `(1e-4, 5)`.
pub fn fit_lognormal_sigma(sheet: &QuoteSheet) -> Result<f64, MarketError> {
    if sheet.len() < 2 {
        return Err(MarketError::Degenerate("need at least two quotes".into()));
    }
    let mid = sheet.mid();
    if mid.iter().all(|&m| m == 0.0) {
        return Err(MarketError::Degenerate("all mid prices are zero".into()));
    }
    let problem = MidFit { sheet, mid };
    let solver = BrentOpt::new(1e-4, 5.0).set_tolerance(1e-10, 1e-9);
    let res = Executor::new(problem, solver)
        .configure(|state| state.max_iters(500))
        .run()
        .map_err(|e| MarketError::Optimizer(e.to_string()))?;
    res.state()
        .best_param
        .ok_or_else(|| MarketError::Optimizer("no iterate".into()))
}

/// Per-strike comparison of lognormal prices with the quotes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LognormalResidual {
    pub strike: f64,
    pub bid: f64,
    pub ask: f64,
    pub mid: f64,
    pub model: f64,
    pub residual: f64,
    pub outside_band: bool,
}

pub fn lognormal_residuals(
    sheet: &QuoteSheet,
    sigma: f64,
) -> Result<Vec<LognormalResidual>, MarketError> {
    let mid = sheet.mid();
    (0..sheet.len())
        .map(|i| {
            let model = bs_put(&sheet.params, sigma, sheet.strikes[i])?;
            Ok(LognormalResidual {
                strike: sheet.strikes[i],
                bid: sheet.bid[i],
                ask: sheet.ask[i],
                mid: mid[i],
                model,
                residual: model - mid[i],
                outside_band: model < sheet.bid[i] || model > sheet.ask[i],
            })
        })
        .collect()
}

fn parse_field(field: Option<&str>, name: &str, line: u64) -> Result<f64, MarketError> {
    let raw = field.ok_or_else(|| MarketError::Parse {
        line,
        msg: format!("missing column {name}"),
    })?;
    raw.trim().parse::<f64>().map_err(|e| MarketError::Parse {
        line,
        msg: format!("{name} = {raw:?}: {e}"),
    })
}

/// Reads a `strike,bid,ask` CSV.
pub fn load_quote_rows(path: &Path) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), MarketError> {
    let text = fs::read_to_string(path).map_err(|source| MarketError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_quote_rows(&text)
}

pub fn parse_quote_rows(text: &str) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), MarketError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| MarketError::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(MarketError::Empty);
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| MarketError::Parse {
                line: 1,
                msg: format!("header lacks column {name}"),
            })
    };
    let (ck, cb, ca) = (col("strike")?, col("bid")?, col("ask")?);
    let (mut strikes, mut bid, mut ask) = (Vec::new(), Vec::new(), Vec::new());
    for rec in reader.records() {
        let rec = rec.map_err(|e| MarketError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let k = parse_field(rec.get(ck), "strike", line)?;
        let b = parse_field(rec.get(cb), "bid", line)?;
        let a = parse_field(rec.get(ca), "ask", line)?;
        if b > a {
            return Err(MarketError::BidAboveAsk { strike: k, bid: b, ask: a });
        }
        if let Some(&prev) = strikes.last() {
            if k <= prev {
                return Err(MarketError::Parse {
                    line,
                    msg: format!("strike {k} not above previous {prev}"),
                });
            }
        }
        strikes.push(k);
        bid.push(b);
        ask.push(a);
    }
    if strikes.is_empty() {
        return Err(MarketError::Empty);
    }
    Ok((strikes, bid, ask))
}

pub fn load_params(path: &Path) -> Result<ParamsFile, MarketError> {
    let text = fs::read_to_string(path).map_err(|source| MarketError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_params(&text)
}

pub fn parse_params(text: &str) -> Result<ParamsFile, MarketError> {
    let p: ParamsFile = toml::from_str(text).map_err(|e| MarketError::Parse {
        line: e
            .span()
            .map_or(0, |s| text[..s.start].matches('\n').count() as u64 + 1),
        msg: e.message().to_string(),
    })?;
    p.market.validate()?;
    if let Some(f) = p.b_factor {
        if !(f > 1.0 && f.is_finite()) {
            return Err(MarketError::InvalidParams(format!("B_factor = {f}")));
        }
    }
    Ok(p)
}

pub fn load_quote_sheet(quotes: &Path, params: &MarketParams) -> Result<QuoteSheet, MarketError> {
    let (strikes, bid, ask) = load_quote_rows(quotes)?;
    QuoteSheet::new(strikes, bid, ask, *params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sim_params() -> MarketParams {
        MarketParams::new(100.0, 0.0, 0.0, 1.0).unwrap()
    }

    /// Normal CDF from the Taylor series of erf, enough terms for 1e-15 near 0.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..60 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn atm_put_against_series_oracle() {
        let p = bs_put(&sim_params(), 0.3, 100.0).unwrap();
        let oracle = 100.0 * erf_series(0.15 / std::f64::consts::SQRT_2);
        assert!((p - oracle).abs() < 1e-10);
        assert!((p - 11.9235).abs() < 1e-4);
        assert_eq!(bs_put(&sim_params(), 0.3, 0.0).unwrap(), 0.0);
        assert!(bs_put(&sim_params(), 0.3, -1.0).is_err());
    }

    #[test]
    fn second_strike_derivative_is_discounted_density() {
        let p = MarketParams::new(1183.74, 0.0269, 0.017, 72.0 / 365.0).unwrap();
        let h = 0.01;
        for &k in &[900.0, 1100.0, 1183.74, 1300.0] {
            let d2 = (bs_put(&p, 0.15, k - h).unwrap() - 2.0 * bs_put(&p, 0.15, k).unwrap()
                + bs_put(&p, 0.15, k + h).unwrap())
                / (h * h);
            let q = p.discount() * lognormal_density(&p, 0.15, k).unwrap();
            assert!((d2 - q).abs() < 1e-4 * q, "k={k}");
        }
    }

    #[test]
    fn density_mode() {
        let p = MarketParams::new(100.0, 0.03, 0.01, 2.0).unwrap();
        let sigma = 0.25;
        let mode = p.s0 * ((p.r - p.delta) * p.tau - 1.5 * sigma * sigma * p.tau).exp();
        let f = |x: f64| lognormal_density(&p, sigma, x).unwrap();
        assert!(f(mode) > f(mode * 1.001) && f(mode) > f(mode * 0.999));
    }

    #[test]
    fn simulated_strike_pattern() {
        assert_eq!(
            simulated_strikes(100.0, 5).unwrap(),
            vec![98.0, 99.0, 100.0, 101.0, 102.0]
        );
        let s50 = simulated_strikes(100.0, 50).unwrap();
        assert_eq!((s50[0], s50[49]), (75.0, 124.0));
        assert!(simulated_strikes(3.0, 10).is_err());
    }

    #[test]
    fn simulation_is_reproducible() {
        let a = simulate_quotes(&sim_params(), 0.3, 50, 7).unwrap();
        let b = simulate_quotes(&sim_params(), 0.3, 50, 7).unwrap();
        let c = simulate_quotes(&sim_params(), 0.3, 50, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_spread_sheet_recovers_sigma() {
        let p = sim_params();
        let strikes: Vec<f64> = (80..=120).step_by(5).map(f64::from).collect();
        let prices: Vec<f64> = strikes.iter().map(|&k| bs_put(&p, 0.27, k).unwrap()).collect();
        let sheet = QuoteSheet::new(strikes, prices.clone(), prices, p).unwrap();
        let s = fit_lognormal_sigma(&sheet).unwrap();
        assert!((s - 0.27).abs() < 1e-6);
        let res = lognormal_residuals(&sheet, s).unwrap();
        assert!(res.iter().all(|r| r.residual.abs() < 1e-5));
    }

    #[test]
    fn quote_parsing_errors() {
        assert!(matches!(parse_quote_rows(""), Err(MarketError::Empty)));
        assert!(matches!(
            parse_quote_rows("strike,bid,ask\n"),
            Err(MarketError::Empty)
        ));
        assert!(matches!(
            parse_quote_rows("strike,bid,ask\n1000,5.0,4.0\n"),
            Err(MarketError::BidAboveAsk { .. })
        ));
        match parse_quote_rows("strike,bid,ask\n900,1,2\n950,x,3\n") {
            Err(MarketError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_quote_rows("strike,bid,ask\n900,1,2\n800,1,3\n").is_err());
        let (k, b, _) = parse_quote_rows("strike,bid,ask\n500,0.00,0.05\n").unwrap();
        assert_eq!((k[0], b[0]), (500.0, 0.0));
    }

    #[test]
    fn params_parsing() {
        let p = parse_params("S0 = 100.0\nr = 0.0\ndelta = 0.0\ntau = 1.0\nB_factor = 2.0\n").unwrap();
        assert_eq!(p.b_factor, Some(2.0));
        assert_eq!(p.market.forward(), 100.0);
        assert!(parse_params("S0 = -1.0\nr = 0.0\ndelta = 0.0\ntau = 1.0\n").is_err());
        assert!(matches!(
            parse_params("S0 = 1.0\nr = 0.0\ndelta = 0.0\n"),
            Err(MarketError::Parse { .. })
        ));
    }

    #[test]
    fn load_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let q = dir.path().join("q.csv");
        let t = dir.path().join("p.toml");
        fs::write(&q, "strike,bid,ask\n90,1.0,1.5\n100,4.0,4.6\n").unwrap();
        fs::write(&t, "S0 = 100.0\nr = 0.01\ndelta = 0.0\ntau = 0.5\n").unwrap();
        let pf = load_params(&t).unwrap();
        assert_eq!(pf.b_factor, None);
        let sheet = load_quote_sheet(&q, &pf.market).unwrap();
        assert_eq!(sheet.strikes, vec![90.0, 100.0]);
        assert_eq!(sheet.max_ask(), 4.6);
        assert!(matches!(
            load_quote_sheet(&dir.path().join("missing.csv"), &pf.market),
            Err(MarketError::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn put_call_parity(k in 1.0f64..400.0, sigma in 0.05f64..1.0, r in -0.02f64..0.1, d in 0.0f64..0.05) {
            let p = MarketParams::new(100.0, r, d, 0.7).unwrap();
            let lhs = bs_call(&p, sigma, k).unwrap() - bs_put(&p, sigma, k).unwrap();
            let rhs = p.dividend_discounted_spot() - k * p.discount();
            prop_assert!((lhs - rhs).abs() < 1e-9 * 100.0);
        }

        #[test]
        fn put_monotone_convex_and_bounded(k in 2.0f64..300.0, sigma in 0.05f64..1.0) {
            let p = MarketParams::new(100.0, 0.02, 0.01, 0.5).unwrap();
            let f = |x: f64| bs_put(&p, sigma, x).unwrap();
            let h = 1.0;
            prop_assert!(f(k + h) >= f(k));
            prop_assert!(f(k - h) - 2.0 * f(k) + f(k + h) >= -1e-9);
            let lower = (k * p.discount() - p.dividend_discounted_spot()).max(0.0);
            prop_assert!(f(k) >= lower - 1e-9 && f(k) <= k * p.discount() + 1e-9);
        }

        #[test]
        fn simulated_bands(seed in 0u64..1000, s in 1usize..60) {
            let p = sim_params();
            let sheet = simulate_quotes(&p, 0.3, s, seed).unwrap();
            for i in 0..sheet.len() {
                let model = bs_put(&p, 0.3, sheet.strikes[i]).unwrap();
                let z = sheet.ask[i] - model;
                prop_assert!((0.5..=1.5 + 1e-12).contains(&z));
                prop_assert!(sheet.ask[i] > model);
                prop_assert!(sheet.bid[i] < model || sheet.bid[i] == 0.0);
            }
        }
    }
}
