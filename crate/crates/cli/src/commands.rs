use qef_core::freqrate::{
    classical_rate, qef_rate, rate_derivative_at_zero, small_theta_rate, RateConfig, RateMethod, RateResult,
};
use qef_core::homotopy::{rate_via_homotopy, HomotopyConfig};
use qef_core::horizon::{
    build_operators, constant_mean, eigenbasis, finite_horizon_log_qef, write_eigenpairs_csv, TimeGrid,
};
use qef_core::io::{ModelFile, System};
use qef_core::model::{admissibility, SpectralSource};
use qef_core::robust::{tail_exponent, worst_case_bound, FrequencyRate, RangeLimit, ThetaRange};
use qef_core::stochastic::{fock_truncation_check, mc_log_qef};
use qef_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Command, RunConfig};
use crate::output::{csv_float, inputs_digest, to_json, write_csv, Document};

pub const DEFAULT_DENSITY: f64 = 50.0;
pub const DEFAULT_SAMPLES: usize = 100_000;
pub const DEFAULT_THETA_HI: f64 = 3.0;
pub const DEFAULT_ZERO_TOL: f64 = 1e-8;

/// Text outputs of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub document: String,
    pub csv: Option<String>,
    pub eigenpairs: Option<String>,
}

struct Loaded {
    bytes: Vec<u8>,
    file: Option<ModelFile>,
    system: Option<System>,
}

fn load(cmd: Command, cfg: &RunConfig) -> Result<Loaded> {
    if !cmd.needs_model() {
        return Ok(Loaded {
            bytes: Vec::new(),
            file: None,
            system: None,
        });
    }
    let path = cfg
        .model_path
        .as_ref()
        .ok_or_else(|| Error::invalid("model_path", "required for this command"))?;
    let bytes =
        std::fs::read(path).map_err(|e| Error::invalid("model_path", format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::invalid("model", "file is not UTF-8"))?;
    let file = ModelFile::parse(&text)?;
    let system = file.build()?;
    Ok(Loaded {
        bytes,
        file: Some(file),
        system: Some(system),
    })
}

pub fn compute_rate(src: &dyn SpectralSource, theta: f64, method: RateMethod, cfg: &RateConfig) -> Result<RateResult> {
    match method {
        RateMethod::Frequency => qef_rate(src, theta, cfg),
        RateMethod::Homotopy => rate_via_homotopy(
            src,
            theta,
            &HomotopyConfig {
                rate: *cfg,
                ..HomotopyConfig::default()
            },
        ),
        RateMethod::SmallTheta => small_theta_rate(src, theta, cfg),
        RateMethod::Classical => classical_rate(src, theta, cfg),
    }
}

fn rate_diagnostics(r: &RateResult) -> Value {
    json!({
        "lambda_cut": r.lambda_cut,
        "n_nodes": r.n_nodes,
        "est_quadrature_error": r.est_quadrature_error,
        "tail_bound": r.tail_bound,
        "admissibility_margin": r.admissibility_margin,
    })
}

fn range_json(r: &ThetaRange) -> Value {
    match r.limit {
        RangeLimit::Admissibility { root } => json!({"theta_max": r.max, "limit": "admissibility", "margin_root": root}),
        RangeLimit::Cap => json!({"theta_max": r.max, "limit": "cap", "margin_root": null}),
    }
}

fn mean_samples(cfg: &RunConfig, grid: &TimeGrid, n: usize) -> Result<Option<qef_core::matfun::RVector>> {
    match &cfg.mu {
        None => Ok(None),
        Some(mu) if mu.len() == n && mu.iter().all(|v| v.is_finite()) => Ok(Some(constant_mean(grid, mu))),
        Some(_) => Err(Error::invalid("mu", format!("expected {n} finite values"))),
    }
}

struct Output<T: Serialize> {
    result: T,
    diagnostics: Value,
    csv: Option<String>,
    eigenpairs: Option<String>,
}

impl<T: Serialize> Output<T> {
    fn plain(result: T, diagnostics: Value) -> Self {
        Self {
            result,
            diagnostics,
            csv: None,
            eigenpairs: None,
        }
    }
}

fn finish<T: Serialize>(cmd: Command, cfg: &RunConfig, loaded: &Loaded, out: Output<T>) -> Artifacts {
    let digest = inputs_digest(&loaded.bytes, cfg);
    let doc = Document {
        command: cmd.as_str(),
        qef_version: env!("CARGO_PKG_VERSION"),
        inputs_digest: &digest,
        config: cfg.echo(),
        result: out.result,
        diagnostics: out.diagnostics,
    };
    Artifacts {
        document: to_json(&doc) + "\n",
        csv: out.csv,
        eigenpairs: out.eigenpairs,
    }
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, header, rows).expect("in-memory write");
    String::from_utf8(buf).expect("CSV is UTF-8")
}

/// Runs one command on a fully resolved configuration.
pub fn execute(cmd: Command, cfg: &RunConfig) -> Result<Artifacts> {
    if let Some(c) = cfg.command {
        if c != cmd {
            return Err(Error::invalid(
                "command",
                format!("config is for `{}`, invoked as `{}`", c.as_str(), cmd.as_str()),
            ));
        }
    }
    let cfg = &RunConfig {
        command: Some(cmd),
        ..cfg.clone()
    };
    let loaded = load(cmd, cfg)?;
    let rate_cfg = cfg.rate_config()?;
    let system = loaded.system.as_ref();
    let src = || system.map(|s| s.source()).expect("model loaded");
    Ok(match cmd {
        Command::Validate => {
            #[derive(Serialize)]
            struct V {
                valid: bool,
                mode: &'static str,
                nu: usize,
                n: usize,
                classical: bool,
                margin: Option<f64>,
            }
            let sys = system.expect("model loaded");
            let margin = match cfg.theta {
                Some(_) => Some(admissibility(src(), cfg.require_theta()?, &rate_cfg.grid)?.margin),
                None => None,
            };
            let diagnostics = match sys {
                System::Oscillator(ss) => json!({
                    "hurwitz": ss.hurwitz,
                    "spectral_abscissa": ss.spectral_abscissa,
                    "pr_residual": ss.pr_residual,
                    "s_full_rank": ss.s_full_rank,
                }),
                System::Ou(_) => json!({"hurwitz": true}),
            };
            let (nu, n) = match sys {
                System::Oscillator(ss) => (ss.nu(), ss.n()),
                System::Ou(_) => (1, 1),
            };
            let mode = loaded.file.as_ref().expect("model loaded").mode();
            finish(
                cmd,
                cfg,
                &loaded,
                Output::plain(
                    V {
                        valid: true,
                        mode,
                        nu,
                        n,
                        classical: src().is_classical(),
                        margin,
                    },
                    diagnostics,
                ),
            )
        }
        Command::Rate => {
            #[derive(Serialize)]
            struct R {
                theta: f64,
                upsilon: f64,
                margin: f64,
                method: RateMethod,
            }
            let theta = cfg.require_theta()?;
            let method = cfg.method.unwrap_or(RateMethod::Frequency);
            let r = compute_rate(src(), theta, method, &rate_cfg)?;
            let diagnostics = rate_diagnostics(&r);
            finish(
                cmd,
                cfg,
                &loaded,
                Output::plain(
                    R {
                        theta,
                        upsilon: r.value,
                        margin: r.admissibility_margin,
                        method: r.method,
                    },
                    diagnostics,
                ),
            )
        }
        Command::RateCurve => {
            #[derive(Serialize)]
            struct Row {
                theta: f64,
                upsilon: f64,
                method: RateMethod,
                est_error: f64,
                margin: f64,
            }
            #[derive(Serialize)]
            struct C {
                method: RateMethod,
                rows: Vec<Row>,
            }
            let thetas = cfg.theta_values()?;
            let method = cfg.method.unwrap_or(RateMethod::Frequency);
            let results: Vec<Result<RateResult>> = thetas
                .par_iter()
                .map(|&t| compute_rate(src(), t, method, &rate_cfg))
                .collect();
            let rows = results
                .into_iter()
                .map(|r| {
                    r.map(|r| Row {
                        theta: r.theta,
                        upsilon: r.value,
                        method: r.method,
                        est_error: r.est_quadrature_error,
                        margin: r.admissibility_margin,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let csv_rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        csv_float(r.theta),
                        csv_float(r.upsilon),
                        r.method.as_str().to_string(),
                        csv_float(r.est_error),
                    ]
                })
                .collect();
            let max_err = rows.iter().map(|r| r.est_error).fold(0.0, f64::max);
            let min_margin = rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
            finish(
                cmd,
                cfg,
                &loaded,
                Output {
                    result: C { method, rows },
                    diagnostics: json!({"max_est_error": max_err, "min_margin": min_margin, "points": thetas.len()}),
                    csv: Some(csv_string(&["theta", "upsilon", "method", "est_error"], &csv_rows)),
                    eigenpairs: None,
                },
            )
        }
        Command::Horizon => {
            #[derive(Serialize)]
            struct Row {
                #[serde(rename = "T")]
                horizon: f64,
                #[serde(rename = "N")]
                n_points: usize,
                rate_estimate: f64,
                target: f64,
                rel_error: f64,
                mean_term: f64,
                spectral_radius: f64,
            }
            #[derive(Serialize)]
            struct H {
                theta: f64,
                rows: Vec<Row>,
            }
            let ss = system.expect("model loaded").state_space()?;
            let theta = cfg.require_theta()?;
            let horizons = cfg.horizons()?;
            let density = cfg.positive("density", cfg.density, Some(DEFAULT_DENSITY))?;
            if cfg.n_points.is_some() && horizons.len() > 1 {
                return Err(Error::invalid("N", "a fixed node count applies to a single T; use density with T_sweep"));
            }
            let grids = horizons
                .iter()
                .map(|&t| match cfg.n_points {
                    Some(n) => TimeGrid::new(t, n),
                    None => TimeGrid::with_density(t, density),
                })
                .collect::<Result<Vec<_>>>()?;
            let target = qef_rate(ss, theta, &rate_cfg)?;
            let results: Vec<Result<Row>> = grids
                .par_iter()
                .map(|g| {
                    let mu = mean_samples(cfg, g, ss.n())?;
                    let r = finite_horizon_log_qef(ss, g, theta, mu.as_ref())?;
                    let est = r.log_qef / g.horizon;
                    Ok(Row {
                        horizon: g.horizon,
                        n_points: g.n_points,
                        rate_estimate: est,
                        target: target.value,
                        rel_error: (est - target.value).abs() / target.value.abs(),
                        mean_term: r.mean_term,
                        spectral_radius: r.spectral_radius,
                    })
                })
                .collect();
            let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
            let eigenpairs = match &cfg.eigenpairs_path {
                None => None,
                Some(_) => {
                    let g = grids.last().expect("nonempty");
                    let ops = build_operators(ss, g, theta)?;
                    let basis = eigenbasis(&ops, DEFAULT_ZERO_TOL)?;
                    let mut buf = Vec::new();
                    write_eigenpairs_csv(&mut buf, &basis.pairs, ss.n()).expect("in-memory write");
                    Some(String::from_utf8(buf).expect("CSV is UTF-8"))
                }
            };
            let csv_rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        csv_float(r.horizon),
                        csv_float(r.rate_estimate),
                        csv_float(r.target),
                        csv_float(r.rel_error),
                    ]
                })
                .collect();
            finish(
                cmd,
                cfg,
                &loaded,
                Output {
                    result: H { theta, rows },
                    diagnostics: json!({
                        "density": if cfg.n_points.is_some() { Value::Null } else { json!(density) },
                        "target_method": "frequency",
                        "target_est_error": target.est_quadrature_error,
                        "target_margin": target.admissibility_margin,
                    }),
                    csv: Some(csv_string(&["T", "rate_estimate", "target", "rel_error"], &csv_rows)),
                    eigenpairs,
                },
            )
        }
        Command::Montecarlo => {
            #[derive(Serialize)]
            struct M {
                theta: f64,
                value: f64,
                stderr: f64,
                n_samples: usize,
                seed: u64,
                closed_form: f64,
            }
            let ss = system.expect("model loaded").state_space()?;
            let theta = cfg.require_theta()?;
            let t = cfg.positive("T", cfg.horizon, None)?;
            let n = cfg.n_points.ok_or_else(|| Error::invalid("N", "required for this command"))?;
            let grid = TimeGrid::new(t, n)?;
            let mu = mean_samples(cfg, &grid, ss.n())?;
            let samples = cfg.n_samples.unwrap_or(DEFAULT_SAMPLES);
            let seed = cfg.seed.unwrap_or(0);
            let est = mc_log_qef(ss, &grid, theta, mu.as_ref(), samples, seed)?;
            let exact = finite_horizon_log_qef(ss, &grid, theta, mu.as_ref())?;
            let z = if est.stderr > 0.0 {
                (est.value - exact.log_qef) / est.stderr
            } else {
                0.0
            };
            finish(
                cmd,
                cfg,
                &loaded,
                Output::plain(
                    M {
                        theta,
                        value: est.value,
                        stderr: est.stderr,
                        n_samples: est.n_samples,
                        seed: est.seed,
                        closed_form: exact.log_qef,
                    },
                    json!({"deviation_in_stderr": z, "spectral_radius": exact.spectral_radius, "mean_term": exact.mean_term}),
                ),
            )
        }
        Command::Tail | Command::WorstCase => {
            let hi = cfg.positive("theta_hi", cfg.theta_hi, Some(DEFAULT_THETA_HI))?;
            let range = ThetaRange::admissible(src(), hi, &rate_cfg.grid)?;
            let rate = FrequencyRate {
                src: src(),
                cfg: RateConfig {
                    check_admissibility: false,
                    ..rate_cfg
                },
                classical: false,
            };
            let slope = rate_derivative_at_zero(src(), &rate_cfg)?;
            let mut diagnostics = range_json(&range);
            diagnostics["slope_at_zero"] = json!(slope.value);
            if cmd == Command::Tail {
                #[derive(Serialize)]
                struct T {
                    alpha: f64,
                    exponent: f64,
                    argmax_theta: f64,
                    at_boundary: bool,
                    theta_max: f64,
                }
                let alpha = cfg.positive("alpha", cfg.alpha, None)?;
                let t = tail_exponent(&rate, alpha, &range)?;
                finish(
                    cmd,
                    cfg,
                    &loaded,
                    Output::plain(
                        T {
                            alpha,
                            exponent: t.exponent,
                            argmax_theta: t.argmax_theta,
                            at_boundary: t.at_boundary,
                            theta_max: range.max,
                        },
                        diagnostics,
                    ),
                )
            } else {
                #[derive(Serialize)]
                struct W {
                    epsilon: f64,
                    bound: f64,
                    argmin_theta: Option<f64>,
                    limit_at_zero: bool,
                    at_boundary: bool,
                    nominal: f64,
                    theta_max: f64,
                }
                let eps = cfg
                    .epsilon
                    .ok_or_else(|| Error::invalid("epsilon", "required for this command"))?;
                let w = worst_case_bound(&rate, eps, &range)?;
                finish(
                    cmd,
                    cfg,
                    &loaded,
                    Output::plain(
                        W {
                            epsilon: eps,
                            bound: w.bound,
                            argmin_theta: w.argmin_theta,
                            limit_at_zero: w.limit_at_zero,
                            at_boundary: w.at_boundary,
                            nominal: 2.0 * slope.value,
                            theta_max: range.max,
                        },
                        diagnostics,
                    ),
                )
            }
        }
        Command::AppendixCheck => {
            #[derive(Serialize)]
            struct A {
                omega: f64,
                n_trunc: usize,
                quad_order: usize,
                max_block_error: f64,
                sigma: f64,
            }
            let omega = cfg.omega.unwrap_or(0.2);
            let n_trunc = cfg.n_trunc.unwrap_or(60);
            let quad_order = cfg.quad_order.unwrap_or(40);
            let (err, sigma) = fock_truncation_check(omega, n_trunc, quad_order)?;
            finish(
                cmd,
                cfg,
                &loaded,
                Output::plain(
                    A {
                        omega,
                        n_trunc,
                        quad_order,
                        max_block_error: err,
                        sigma,
                    },
                    json!({"block": n_trunc / 4, "refined_n_trunc": n_trunc + n_trunc / 3}),
                ),
            )
        }
    })
}
