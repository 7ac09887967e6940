//! `nosetori`: exact normal-form checks and numerical torus diagnostics.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 usage or
//! configuration error, 3 runtime failure.

mod config;
mod verify;

use std::f64::consts::TAU;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use nosetori::averaging::{
    averaged_oscillator, averaging_discrepancies, critical_fast_energy, discrepancy_markdown,
    maclaurin_expand, quartic_at_critical_energy, scaled_average,
};
use nosetori::jet::{parse_rational, to_f64, GradedJet, Rational};
use nosetori::models::{HamiltonianModel, ModelKind};
use nosetori::normal_form::{
    bnf_oscillator, hat_g_normal_form, hat_g_solved, monomial_name, nose_like_normal_form, nose_normal_form,
    NormalFormResult,
};
use nosetori::simulate::{
    integrate_every, linearized_rotation_number, near_xi1, poincare_section, rotation_number, run_grid,
    ExperimentGrid, SectionRecord, SectionSpec,
};
use serde_json::{json, Value};

use config::{parse_list, section_named, ModelFlags, RunConfig, RunFlags};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    /// Some verification checks failed; the report was already written.
    Verify(usize),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "nosetori", version, about = "Normal forms and KAM-tori diagnostics for Nose-type thermostats")]
struct Cli {
    /// Omit the generation timestamp so that outputs are byte-reproducible
    #[arg(long, global = true)]
    no_timestamp: bool,
    /// JSON run configuration; flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct OutFlag {
    /// Output file; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct SectionFlags {
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    t_max: Option<f64>,
    /// angle, momentum-zero or momentum-zero-increasing
    #[arg(long)]
    section: Option<String>,
    /// Level of the angle section
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    level: f64,
    /// JSON summary file (stderr when absent)
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the exact results against the golden fixtures
    Verify {
        /// nose, nose-like, hessian, oscillator or symplectic
        #[arg(long)]
        filter: Option<String>,
        /// Golden fixture file; the built-in one when absent
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where the oscillator discrepancy table goes
        #[arg(long, default_value = "DISCREPANCIES.md")]
        discrepancies: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Integrate one trajectory and write it as CSV
    Simulate {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        t_end: Option<f64>,
        /// Record every n-th step
        #[arg(long)]
        every: Option<usize>,
        #[command(flatten)]
        out: OutFlag,
    },
    /// Poincare section points as CSV, with a torus classification
    Poincare {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        section: SectionFlags,
        #[command(flatten)]
        out: OutFlag,
    },
    /// Rotation number of a section, with the linearized value at the
    /// periodic orbit when available
    Rotation {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        section: SectionFlags,
        #[command(flatten)]
        out: OutFlag,
    },
    /// Sections and temperature averages over a grid of initial conditions
    Ergodicity {
        #[command(flatten)]
        model: ModelFlags,
        /// Comma-separated beta values
        #[arg(long)]
        betas: Option<String>,
        /// Comma-separated radii around the periodic orbit
        #[arg(long)]
        radii: Option<String>,
        #[arg(long)]
        angles: Option<usize>,
        #[arg(long)]
        n_points: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_max: Option<f64>,
        /// Per-beta JSON summary (stderr when absent)
        #[arg(long)]
        summary: Option<PathBuf>,
        #[command(flatten)]
        out: OutFlag,
    },
    /// Exact Birkhoff normal form of nose, nose-like or hat-g
    NormalForm {
        #[arg(long)]
        model: Option<String>,
        /// Inverse-mass jet of nose-like, as p/q; symbolic when absent
        #[arg(long, allow_hyphen_values = true)]
        a: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        b: Option<String>,
        /// Oscillator coupling for hat-g, as p/q
        #[arg(long)]
        kappa: Option<String>,
        #[command(flatten)]
        out: OutFlag,
    },
    /// Averaged oscillator and its expansions
    AverageHo {
        #[arg(long)]
        kappa: Option<String>,
        #[command(flatten)]
        out: OutFlag,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Verify(n) => eprintln!("{n} check(s) failed"),
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(m) => {
                    eprintln!("{}", json!({ "error": m, "kind": "runtime" }));
                }
            }
            ExitCode::from(e.code())
        }
    }
}

struct Output {
    timestamp: bool,
}

impl Output {
    fn stamp_line(&self) -> String {
        if self.timestamp {
            format!("# generated unix={}\n", unix_now())
        } else {
            String::new()
        }
    }

    fn stamp_json(&self, mut v: Value) -> Value {
        if self.timestamp {
            if let Value::Object(m) = &mut v {
                m.insert("generated_unix".into(), json!(unix_now()));
            }
        }
        v
    }

    fn text(&self, body: &str) -> String {
        format!("{}{body}", self.stamp_line())
    }

    fn json(&self, v: Value) -> Result<String, CliError> {
        let mut s = serde_json::to_string_pretty(&self.stamp_json(v)).map_err(runtime)?;
        s.push('\n');
        Ok(s)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Writes through a temporary file in the same directory, so readers never
/// see a partial file.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::Runtime(format!("cannot write in {}: {e}", dir.display())))?;
    tmp.write_all(contents.as_bytes()).map_err(runtime)?;
    tmp.persist(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {}", path.display(), e.error)))?;
    Ok(())
}

fn emit(path: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write_atomic(p, contents),
        None => std::io::stdout().write_all(contents.as_bytes()).map_err(runtime),
    }
}

fn emit_summary(path: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write_atomic(p, contents),
        None => std::io::stderr().write_all(contents.as_bytes()).map_err(runtime),
    }
}

fn rational_arg(name: &str, s: &str) -> Result<Rational, CliError> {
    parse_rational(s).map_err(|e| CliError::Usage(format!("--{name} `{s}`: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = Output {
        timestamp: !cli.no_timestamp,
    };
    let config = cli.config.as_deref();
    match cli.command {
        Command::Verify {
            filter,
            fixtures,
            out: path,
            discrepancies,
            seed,
        } => {
            let cfg = RunConfig::from_optional(config, "verify")?;
            let golden = match fixtures {
                Some(p) => std::fs::read_to_string(&p)
                    .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?,
                None => verify::GOLDEN.to_string(),
            };
            let golden = verify::parse_golden(&golden).map_err(CliError::Usage)?;
            let seed = seed.or(cfg.seed).unwrap_or(0);
            let report = verify::run(&golden, filter.as_deref(), seed).map_err(|e| {
                if e.starts_with("unknown check group") {
                    CliError::Usage(e)
                } else {
                    CliError::Runtime(e)
                }
            })?;
            if let Some(md) = &report.discrepancies {
                write_atomic(&discrepancies, &out.text(md))?;
            }
            emit(path.or(cfg.output).as_deref(), &out.text(&report.render()))?;
            match report.failures() {
                0 => Ok(()),
                n => Err(CliError::Verify(n)),
            }
        }
        Command::Simulate {
            model,
            run,
            t_end,
            every,
            out: o,
        } => {
            let cfg = RunConfig::from_optional(config, "simulate")?;
            let m = model.resolve(cfg.model.clone())?;
            let method = run.method(cfg.method);
            let ic = run.ic(cfg.ic.clone(), &m)?.state();
            let t_end = t_end.or(cfg.t_end).unwrap_or(100.0);
            let every = every.or(cfg.every).unwrap_or(10);
            let tr = integrate_every(&m, &ic, t_end, method, every).map_err(runtime)?;
            let names: Vec<&str> = m.kind.state_names()[..m.dim()].to_vec();
            let mut csv = format!("t,{},energy\n", names.join(","));
            for ((t, x), e) in tr.times.iter().zip(&tr.states).zip(&tr.energies) {
                let xs: Vec<String> = x.iter().map(f64::to_string).collect();
                csv.push_str(&format!("{t},{},{e}\n", xs.join(",")));
            }
            emit(o.out.or(cfg.output).as_deref(), &out.text(&csv))?;
            let summary = json!({
                "model": m.kind.name(),
                "method": method,
                "steps_recorded": tr.times.len(),
                "max_energy_drift": tr.max_energy_drift,
                "exit": tr.exit,
            });
            eprint!("{}", out.json(summary)?);
            Ok(())
        }
        Command::Poincare {
            model,
            run,
            section,
            out: o,
        } => {
            let (m, rec) = section_run(config, "poincare", &model, &run, &section)?;
            let [a, b] = rec.spec.plane;
            let names = m.kind.state_names();
            let mut csv = format!("t,{},{}\n", names[a], names[b]);
            for (t, x) in rec.times.iter().zip(&rec.points) {
                csv.push_str(&format!("{t},{},{}\n", x[a], x[b]));
            }
            emit(o.out.as_deref(), &out.text(&csv))?;
            emit_summary(section.summary.as_deref(), &out.json(section_summary(&m, &rec))?)
        }
        Command::Rotation {
            model,
            run,
            section,
            out: o,
        } => {
            let (m, rec) = section_run(config, "rotation", &model, &run, &section)?;
            let mut v = section_summary(&m, &rec);
            match rotation_number(&rec) {
                Ok(r) => {
                    v["rotation"] = json!(r);
                }
                Err(e) => {
                    v["rotation"] = Value::Null;
                    v["rotation_error"] = json!(e.to_string());
                }
            }
            if m.kind == ModelKind::RescaledFBeta && m.beta == 0.0 && rec.spec.period.is_some() {
                let rho = linearized_rotation_number(&m, &near_xi1(0.0, 0.0), TAU, &rec.spec).map_err(runtime)?;
                v["linearized_rotation"] = json!(rho);
            }
            emit(o.out.as_deref(), &out.json(v)?)
        }
        Command::Ergodicity {
            model,
            betas,
            radii,
            angles,
            n_points,
            dt,
            t_max,
            summary,
            out: o,
        } => {
            let cfg = RunConfig::from_optional(config, "ergodicity")?;
            let m = model.resolve(cfg.model.clone())?;
            if m.kind != ModelKind::RescaledFBeta && m.kind != ModelKind::NoseLike {
                return Err(CliError::Usage("ergodicity needs the rescaled or nose-like model".into()));
            }
            let mut grid = cfg.grid.clone().unwrap_or_default();
            if let Some(s) = betas {
                grid.betas = parse_list(&s)?;
            }
            if let Some(s) = radii {
                grid.radii = parse_list(&s)?;
            }
            grid.angles = angles.unwrap_or(grid.angles);
            grid.n_points = n_points.unwrap_or(grid.n_points);
            grid.dt = dt.unwrap_or(grid.dt);
            grid.t_max = t_max.unwrap_or(grid.t_max);
            check_grid(&grid)?;
            let cells = run_grid(&m, &grid);
            let mut csv = String::from(
                "beta,radius,angle_index,points,class,residual,rotation,rotation_uncertainty,\
                 temperature_average,temperature_tail,energy_drift,error\n",
            );
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            for c in &cells {
                let class = c.evidence.map(|e| class_name(&e.class)).unwrap_or("");
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    c.beta,
                    c.radius,
                    c.angle_index,
                    c.points,
                    class,
                    opt(c.evidence.map(|e| e.residual)),
                    opt(c.rotation.map(|r| r.estimate)),
                    opt(c.rotation.map(|r| r.uncertainty)),
                    c.temperature_average,
                    c.temperature_tail,
                    c.energy_drift,
                    c.error.as_deref().unwrap_or("").replace(',', ";"),
                ));
            }
            emit(o.out.or(cfg.output).as_deref(), &out.text(&csv))?;
            let per_beta: Vec<Value> = grid
                .betas
                .iter()
                .map(|&beta| {
                    let mine: Vec<_> = cells.iter().filter(|c| c.beta == beta).collect();
                    let curves = mine
                        .iter()
                        .filter(|c| c.evidence.is_some_and(|e| class_name(&e.class) == "curve"))
                        .count();
                    let tail = mine.iter().map(|c| c.temperature_tail).fold(0.0, f64::max);
                    json!({
                        "beta": beta,
                        "cells": mine.len(),
                        "curves": curves,
                        "curve_fraction": curves as f64 / mine.len().max(1) as f64,
                        "max_temperature_tail": tail,
                        "errors": mine.iter().filter(|c| c.error.is_some()).count(),
                    })
                })
                .collect();
            emit_summary(summary.as_deref(), &out.json(json!({ "grid": grid, "per_beta": per_beta }))?)
        }
        Command::NormalForm { model, a, b, kappa, out: o } => {
            let cfg = RunConfig::from_optional(config, "normal-form")?;
            let exact = cfg.exact.clone().unwrap_or_default();
            let model = model.or(exact.model).unwrap_or_else(|| "nose".into());
            let a = a.or(exact.a);
            let b = b.or(exact.b);
            let kappa = kappa.or(exact.kappa);
            let v = match model.as_str() {
                "nose" => normal_form_json(&nose_normal_form().map_err(runtime)?),
                "nose-like" => {
                    let ab = match (a, b) {
                        (Some(a), Some(b)) => Some((rational_arg("a", &a)?, rational_arg("b", &b)?)),
                        (None, None) => None,
                        _ => return Err(CliError::Usage("give both --a and --b, or neither".into())),
                    };
                    normal_form_json(&nose_like_normal_form(ab).map_err(runtime)?)
                }
                "hat-g" => {
                    let k = rational_arg("kappa", kappa.as_deref().unwrap_or("1/10"))?;
                    if k <= Rational::from_integer(0.into()) {
                        return Err(CliError::Usage("--kappa must be positive".into()));
                    }
                    let r = hat_g_normal_form(&k).map_err(runtime)?;
                    let full = hat_g_solved(&k).map_err(runtime)?;
                    let mut v = normal_form_json(&r.result);
                    v["kappa"] = json!(k.to_string());
                    v["reduced_j"] = json!(r.reduced_j.to_string());
                    v["full_coupling_image"] = json!(r.full_coupling_image.to_string());
                    v["full_coupling"] = normal_form_json(&full);
                    v
                }
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown normal form `{other}`; expected nose, nose-like or hat-g"
                    )))
                }
            };
            let mut v = v;
            v["model"] = json!(model);
            emit(o.out.or(cfg.output).as_deref(), &out.json(v)?)
        }
        Command::AverageHo { kappa, out: o } => {
            let cfg = RunConfig::from_optional(config, "average-ho")?;
            let kappa = kappa.or(cfg.exact.and_then(|e| e.kappa));
            let avg = averaged_oscillator().map_err(runtime)?;
            let t2 = maclaurin_expand(&scaled_average().map_err(runtime)?, 2, None).map_err(runtime)?;
            let t4 = quartic_at_critical_energy().map_err(runtime)?;
            let ec = critical_fast_energy(3).map_err(runtime)?;
            let a3 = t4.coefficient_of(&[("u", 3)]).map_err(runtime)?;
            let a4 = t4.coefficient_of(&[("u", 4)]).map_err(runtime)?;
            let bnf = bnf_oscillator(&a3, &a4).map_err(runtime)?;
            let disc = averaging_discrepancies().map_err(runtime)?;
            let mut v = json!({
                "averaged": avg.to_string(),
                "averaged_jet": avg.to_json(),
                "expansion_order2": t2.to_string(),
                "quartic_at_critical_energy": t4.to_string(),
                "critical_energy": ec.to_string(),
                "bnf_coefficient_over_kappa": bnf.to_string(),
                "discrepancies": disc.iter().map(|d| json!({
                    "term": d.term,
                    "printed": d.printed.to_string(),
                    "computed": d.computed.to_string(),
                    "note": d.note,
                })).collect::<Vec<_>>(),
                "discrepancies_markdown": discrepancy_markdown(&disc),
            });
            if let Some(k) = kappa {
                let k = rational_arg("kappa", &k)?;
                v["kappa"] = json!(k.to_string());
                v["bnf_coefficient"] = json!((&bnf * &k).to_string());
                v["critical_energy_at_kappa"] = json!(ec.eval_exact(std::slice::from_ref(&k)).to_string());
                v["critical_energy_at_kappa_f64"] = json!(to_f64(&ec.eval_exact(&[k])));
            }
            emit(o.out.or(cfg.output).as_deref(), &out.json(v)?)
        }
    }
}

fn check_grid(g: &ExperimentGrid) -> Result<(), CliError> {
    let bad = g.betas.is_empty()
        || g.radii.is_empty()
        || g.angles == 0
        || g.n_points == 0
        || !(g.dt > 0.0 && g.t_max > 0.0)
        || g.betas.iter().any(|b| !(*b >= 0.0 && b.is_finite()))
        || g.radii.iter().any(|r| !(*r > 0.0 && *r < 1.0));
    if bad {
        return Err(CliError::Usage(format!("invalid grid {g:?}")));
    }
    Ok(())
}

fn section_run(
    config: Option<&Path>,
    sub: &str,
    model: &ModelFlags,
    run: &RunFlags,
    flags: &SectionFlags,
) -> Result<(HamiltonianModel, SectionRecord), CliError> {
    let cfg = RunConfig::from_optional(config, sub)?;
    let m = model.resolve(cfg.model.clone())?;
    let method = run.method(cfg.method);
    let ic = run.ic(cfg.ic.clone(), &m)?.state();
    let spec: SectionSpec = match (&flags.section, cfg.section.clone()) {
        (Some(name), _) => section_named(name, flags.level)?,
        (None, Some(s)) => s,
        (None, None) => SectionSpec::angle(flags.level),
    };
    let n_points = flags.n_points.or(cfg.n_points).unwrap_or(256);
    let t_max = flags.t_max.or(cfg.t_max).unwrap_or(1e4);
    let rec = poincare_section(&m, &ic, &spec, n_points, method, t_max).map_err(|e| match e {
        nosetori::simulate::SimError::InvalidSettings(m) => CliError::Usage(m),
        e => runtime(e),
    })?;
    Ok((m, rec))
}

fn class_name(c: &nosetori::simulate::TorusClass) -> &'static str {
    use nosetori::simulate::TorusClass::*;
    match c {
        Curve => "curve",
        Ambiguous => "ambiguous",
        Scattered => "scattered",
    }
}

fn section_summary(m: &HamiltonianModel, rec: &SectionRecord) -> Value {
    json!({
        "model": m.kind.name(),
        "parameters": m,
        "section": rec.spec,
        "points": rec.points.len(),
        "energy": rec.energy,
        "max_section_error": rec.max_section_error,
        "class": rec.evidence.map(|e| class_name(&e.class)),
        "residual": rec.evidence.map(|e| e.residual),
        "rotation": rec.rotation,
        "termination": rec.termination,
    })
}

fn jet_terms(j: &GradedJet) -> Vec<Value> {
    j.terms()
        .map(|(e, c)| json!({ "monomial": monomial_name(j.vars(), e), "coefficient": c.to_string() }))
        .collect()
}

fn normal_form_json(r: &NormalFormResult) -> Value {
    let values: serde_json::Map<String, Value> =
        r.values.iter().map(|(n, v)| (n.clone(), json!(v.to_string()))).collect();
    let mut v = Value::Object(values);
    v["nu"] = json!(jet_terms(&r.nu));
    v["normal_form"] = json!(r.normal_form.to_string());
    v["hessian"] = json!(jet_terms(&r.hessian_series));
    v["hessian_series"] = json!(r.hessian_series.to_string());
    v["kam_sufficient"] = json!(r.kam_sufficient);
    v["equations"] = r
        .reports
        .iter()
        .map(|d| {
            json!({
                "degree": d.degree,
                "equations": d.equations,
                "active": d.active,
                "vacuous": d.vacuous,
                "rank": d.rank,
                "free": d.free,
                "pinned": d.pinned,
            })
        })
        .collect();
    v
}
