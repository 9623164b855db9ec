use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use specrnd::estimate::{
    estimate, estimate_at, psi_projection, EstimateConfig, EstimateOutput, RndEstimate,
};
use specrnd::market::{
    fit_lognormal_sigma, load_params, load_quote_sheet, lognormal_density, lognormal_residuals,
    simulate_quotes, MarketParams, ParamsFile, QuoteSheet, RNG_ALGORITHM,
};
use specrnd::operators::{GridFunction, Quadrature};
use specrnd::qp::SolverOptions;
use specrnd::spectral::{make_basis, BasisSet};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{gnuplot_header, num, say, OutDir};

pub const MANIFEST: &str = "manifest.json";

/// Everything needed to repeat a run, plus a summary of what it produced.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_algorithm: Option<String>,
    pub outputs: Vec<String>,
    pub result: Value,
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

/// Executes `cfg`, writing into `out` when given (required for all but the lognormal fit).
pub fn run(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let mut dir = out.map(OutDir::create).transpose()?;
    let result = match (cfg, dir.as_mut()) {
        (RunConfig::Basis { domain, n_max, grid_points }, Some(d)) => {
            basis(*domain, *n_max, *grid_points, d)?
        }
        (
            RunConfig::Estimate {
                quotes,
                params,
                b_factor,
                n_max,
                tol_feas,
                grid_points,
            },
            Some(d),
        ) => {
            let market = load_params(params)?.market;
            let sheet = load_quote_sheet(quotes, &market)?;
            let config = EstimateConfig {
                b_factor: *b_factor,
                n_max: *n_max,
                solver: solver(*tol_feas),
            };
            run_estimate(&sheet, &config, *grid_points, d)?
        }
        (
            RunConfig::Simulate {
                s0,
                sigma,
                strikes,
                seed,
                b_factor,
                n_max,
                tol_feas,
                grid_points,
            },
            Some(d),
        ) => {
            let market = MarketParams::new(*s0, 0.0, 0.0, 1.0)?;
            let config = EstimateConfig {
                b_factor: *b_factor,
                n_max: *n_max,
                solver: solver(*tol_feas),
            };
            simulate(market, *sigma, *strikes, *seed, &config, *grid_points, d)?
        }
        (RunConfig::FitLognormal { quotes, params }, d) => {
            let market = load_params(params)?.market;
            let sheet = load_quote_sheet(quotes, &market)?;
            fit_lognormal(&sheet, d)?
        }
        _ => return Err(CliError::Input("--out is required for this command".into())),
    };
    if let Some(mut d) = dir {
        let rng_algorithm = matches!(cfg, RunConfig::Simulate { .. }).then(|| RNG_ALGORITHM.to_string());
        let mut outputs = d.written().to_vec();
        outputs.push(MANIFEST.to_string());
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            rng_algorithm,
            outputs,
            result,
        };
        d.json(MANIFEST, &manifest)?;
    }
    Ok(())
}

fn solver(tol_feas: f64) -> SolverOptions {
    SolverOptions {
        feas_rel: tol_feas,
        ..SolverOptions::default()
    }
}

/// `points` equally spaced abscissae on `[0, b]` with exact end points.
fn abscissae(b: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| if i + 1 == points { b } else { b * i as f64 / (points - 1) as f64 })
        .collect()
}

fn basis(domain: f64, n: usize, points: usize, out: &mut OutDir) -> Result<Value, CliError> {
    let set = make_basis(domain, n)?;
    let eigen: Vec<Vec<String>> = set
        .pairs()
        .iter()
        .map(|p| {
            vec![
                p.k.to_string(),
                num(p.rho),
                num(p.beta),
                num(p.ln_beta),
                num(p.lambda),
            ]
        })
        .collect();
    out.csv("eigen.csv", &["k", "rho", "beta", "ln_beta", "lambda"], &eigen)?;

    let mut header = vec!["xi".to_string()];
    header.extend((0..=n).map(|k| format!("phi_{k}")));
    header.extend((0..=n).map(|k| format!("psi_{k}")));
    let mut rows = Vec::with_capacity(points);
    for x in abscissae(domain, points) {
        let mut r = vec![num(x)];
        for k in 0..=n {
            r.push(num(set.phi(k, x)?));
        }
        for k in 0..=n {
            r.push(num(set.psi(k, x)?));
        }
        rows.push(r);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("curves.csv", &header, &rows)?;

    let mut gp = gnuplot_header("Singular bases", "basis.png");
    gp += &format!(
        "set multiplot layout 1,2\n\
         set xlabel 'xi'\n\
         plot for [i=2:{a}] 'curves.csv' using 1:i with lines\n\
         plot for [i={b}:{c}] 'curves.csv' using 1:i with lines\n\
         unset multiplot\n",
        a = n + 2,
        b = n + 3,
        c = 2 * n + 3
    );
    out.text("basis.gp", &gp)?;
    say(&format!("wrote {} singular pairs on [0, {domain}]", n + 1));
    Ok(json!({ "domain": domain, "n_max": n, "rho_0": set.pairs()[0].rho, "lambda_0": set.pairs()[0].lambda }))
}

fn diagnostics(est: &RndEstimate) -> Value {
    let d = &est.diagnostics;
    json!({
        "N_star": est.n,
        "B": est.b,
        "objective": d.objective,
        "mass": d.mass,
        "mean": d.mean,
        "min_density": d.min_density,
        "max_violation": d.max_violation,
        "status": d.status,
        "omega": est.omega,
    })
}

fn fitted_rows(sheet: &QuoteSheet, fits: &[&RndEstimate]) -> Result<Vec<Vec<String>>, CliError> {
    (0..sheet.len())
        .map(|i| {
            let k = sheet.strikes[i];
            let mut r = vec![num(k), num(sheet.bid[i]), num(sheet.ask[i])];
            for est in fits {
                r.push(num(est.put(k)?));
            }
            Ok(r)
        })
        .collect()
}

fn run_estimate(
    sheet: &QuoteSheet,
    config: &EstimateConfig,
    points: usize,
    out: &mut OutDir,
) -> Result<Value, CliError> {
    info!("estimating with B = {} F0, N_max = {}", config.b_factor, config.n_max);
    let EstimateOutput { estimate: est, trace, .. } = estimate(sheet, config)?;
    info!("minimal feasible cutoff N = {}", est.n);

    let rows: Vec<Vec<String>> = est
        .sample(points)
        .into_iter()
        .map(|(x, q, p)| vec![num(x), num(q), num(p)])
        .collect();
    out.csv("density.csv", &["xi", "density", "put"], &rows)?;
    out.csv("fitted.csv", &["strike", "bid", "ask", "fitted"], &fitted_rows(sheet, &[&est])?)?;
    let trace: Vec<Vec<String>> = trace
        .iter()
        .map(|t| vec![t.n.to_string(), num(t.violation), u8::from(t.feasible).to_string()])
        .collect();
    out.csv("trace.csv", &["n", "violation", "feasible"], &trace)?;
    let diag = diagnostics(&est);
    out.json("diagnostics.json", &diag)?;

    let mut gp = gnuplot_header(&format!("Estimated density, N = {}", est.n), "estimate.png");
    gp += "set multiplot layout 1,2\n\
           set xlabel 'strike'\n\
           plot 'density.csv' using 1:2 with lines\n\
           plot 'fitted.csv' using 1:2 with points, '' using 1:3 with points, '' using 1:4 with linespoints\n\
           unset multiplot\n";
    out.text("estimate.gp", &gp)?;
    say(&format!(
        "N_star = {}, objective = {}, mass = {}, min density = {}",
        est.n,
        num(est.diagnostics.objective),
        num(est.diagnostics.mass),
        num(est.diagnostics.min_density)
    ));
    Ok(diag)
}

fn simulate(
    market: MarketParams,
    sigma: f64,
    strikes: usize,
    seed: u64,
    config: &EstimateConfig,
    points: usize,
    out: &mut OutDir,
) -> Result<Value, CliError> {
    let sheet = simulate_quotes(&market, sigma, strikes, seed)?;
    let quotes: Vec<Vec<String>> = (0..sheet.len())
        .map(|i| vec![num(sheet.strikes[i]), num(sheet.bid[i]), num(sheet.ask[i])])
        .collect();
    out.csv("quotes.csv", &["strike", "bid", "ask"], &quotes)?;
    let params = ParamsFile {
        market,
        b_factor: Some(config.b_factor),
    };
    let toml = toml::to_string(&params).map_err(|e| CliError::Numerical(e.to_string()))?;
    out.text("params.toml", &toml)?;

    let first = estimate(&sheet, config)?.estimate;
    let n = first.n;
    info!("minimal feasible cutoff N = {n}; refitting at N = {}", n + 1);
    let second = estimate_at(&sheet, config.b_factor, n + 1, &config.solver)?.estimate;

    let b = first.b;
    let truth = GridFunction::from_fn(b, move |x| {
        if x > 0.0 {
            lognormal_density(&market, sigma, x).unwrap_or(0.0)
        } else {
            0.0
        }
    });
    let quad = Quadrature::for_cutoff(b, n + 1)?.refined();
    let project = |set: &BasisSet| psi_projection(set, &truth, &quad);
    let (c1, c2) = (project(first.basis()), project(second.basis()));

    let mut rows = Vec::with_capacity(points);
    for x in abscissae(b, points) {
        rows.push(vec![
            num(x),
            num(first.density(x)?),
            num(second.density(x)?),
            num(truth.eval(x)),
            num(specrnd::estimate::psi_series(first.basis(), &c1, x)?),
            num(specrnd::estimate::psi_series(second.basis(), &c2, x)?),
        ]);
    }
    let (qa, qb) = (format!("q_{n}"), format!("q_{}", n + 1));
    let (pa, pb) = (format!("projection_{n}"), format!("projection_{}", n + 1));
    out.csv("density.csv", &["xi", &qa, &qb, "truth", &pa, &pb], &rows)?;
    let (fa, fb) = (format!("fitted_{n}"), format!("fitted_{}", n + 1));
    out.csv(
        "fitted.csv",
        &["strike", "bid", "ask", &fa, &fb],
        &fitted_rows(&sheet, &[&first, &second])?,
    )?;

    let mut gp = gnuplot_header(&format!("Simulated study, {strikes} strikes, seed {seed}"), "simulate.png");
    gp += "set xlabel 'strike'\n\
           plot 'density.csv' using 1:2 with lines, '' using 1:3 with lines, \
           '' using 1:4 with lines dashtype 2, '' using 1:5 with lines lw 2\n";
    out.text("simulate.gp", &gp)?;
    say(&format!("N_star = {n}; densities written for N = {n} and N = {}", n + 1));
    Ok(json!({ "first": diagnostics(&first), "second": diagnostics(&second) }))
}

fn fit_lognormal(sheet: &QuoteSheet, out: Option<&mut OutDir>) -> Result<Value, CliError> {
    let sigma = fit_lognormal_sigma(sheet)?;
    let res = lognormal_residuals(sheet, sigma)?;
    let outside = res.iter().filter(|r| r.outside_band).count();
    let mut report = format!("sigma_opt = {sigma:.6}\n");
    report += &format!("{:>12} {:>12} {:>12} {:>12} {:>12}  band\n", "strike", "bid", "ask", "lognormal", "residual");
    for r in &res {
        report += &format!(
            "{:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4e}  {}\n",
            r.strike,
            r.bid,
            r.ask,
            r.model,
            r.residual,
            if r.outside_band { "OUTSIDE" } else { "inside" }
        );
    }
    report += &format!("{outside} of {} strikes outside their bid-ask band", res.len());
    say(&report);
    if let Some(d) = out {
        let rows: Vec<Vec<String>> = res
            .iter()
            .map(|r| {
                vec![
                    num(r.strike),
                    num(r.bid),
                    num(r.ask),
                    num(r.mid),
                    num(r.model),
                    num(r.residual),
                    u8::from(r.outside_band).to_string(),
                ]
            })
            .collect();
        d.csv(
            "residuals.csv",
            &["strike", "bid", "ask", "mid", "lognormal", "residual", "outside"],
            &rows,
        )?;
        let mut gp = gnuplot_header(&format!("Lognormal fit, sigma = {sigma:.4}"), "lognormal.png");
        gp += "set xlabel 'strike'\n\
               plot 'residuals.csv' using 1:2 with points, '' using 1:3 with points, '' using 1:5 with lines\n";
        d.text("lognormal.gp", &gp)?;
    }
    Ok(json!({ "sigma_opt": sigma, "outside_band": outside }))
}
