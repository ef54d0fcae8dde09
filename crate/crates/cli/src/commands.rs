use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use freqsynth::config::{Experiment, ScenarioConfig};
use freqsynth::ev_baseline::{default_half_widths, sweep_to_csv};
use freqsynth::experiment::{Stage, Verdicts};
use freqsynth::io::{hash_comment, with_hash_comment, write_atomic};
use freqsynth::multiphase::{phase_regressions, reference_participation, Perturbation};
use freqsynth::plot::frequency_svg;
use freqsynth::{state_to_cell, ChargingMode, Controller, Error, SymbolicModel, Trace};

use crate::{Cli, Command, ControllerKind, TargetArg, EXIT_INTERNAL, EXIT_OK, EXIT_SPEC_FAIL, EXIT_USAGE};

/// Misuse of the command line or missing inputs.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code_for(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(fe) = cause.downcast_ref::<Error>() {
            return match fe {
                Error::Config(_)
                | Error::HashMismatch { .. }
                | Error::InvalidParameter(_)
                | Error::MemoryBudget { .. }
                | Error::Format(_) => EXIT_USAGE,
                _ => EXIT_INTERNAL,
            };
        }
    }
    EXIT_INTERNAL
}

struct Ctx {
    raw: ScenarioConfig,
    exp: Experiment,
    out: PathBuf,
    force: bool,
    seed: u64,
    hash: String,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(value)?;
        write_atomic(&self.path(name), &bytes).with_context(|| format!("writing {name}"))?;
        Ok(())
    }

    fn write_csv(&self, name: &str, csv: &str) -> Result<()> {
        write_atomic(&self.path(name), with_hash_comment(&self.hash, csv).as_bytes())
            .with_context(|| format!("writing {name}"))?;
        Ok(())
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("FREQSYNTH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(format!("FREQSYNTH_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn context(cli: &Cli) -> Result<Ctx> {
    let mut raw = match &cli.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = cli.seed {
        raw.robustness.base_seed = seed;
    }
    if let Some(out) = &cli.out {
        raw.output.dir = out.clone();
    }
    let exp = raw.resolve()?;
    let hash = exp.config_hash();
    Ok(Ctx {
        out: exp.output.dir.clone(),
        seed: exp.robustness.base_seed,
        force: cli.force,
        exp,
        raw,
        hash,
    })
}

pub fn run(cli: &Cli) -> Result<u8> {
    configure_threads()?;
    let ctx = context(cli)?;
    match &cli.command {
        Command::Abstract => cmd_abstract(&ctx),
        Command::Synth { target, model, csv } => cmd_synth(&ctx, *target, model.as_deref(), *csv),
        Command::Simulate { controller, robust } => match controller {
            ControllerKind::Symbolic => cmd_simulate_symbolic(&ctx, *robust),
            ControllerKind::Baseline => cmd_baseline(&ctx, false),
        },
        Command::Baseline { no_ev } => cmd_baseline(&ctx, *no_ev),
        Command::Sweep => cmd_sweep(&ctx),
        Command::Robustness => cmd_robustness(&ctx),
        Command::Check { trace } => cmd_check(&ctx, trace),
    }
}

const MODEL_FILE: &str = "model.fsm";

fn cmd_abstract(ctx: &Ctx) -> Result<u8> {
    let path = ctx.path(MODEL_FILE);
    if path.exists() && !ctx.force {
        return Err(usage(format!("{} exists; pass --force to overwrite it", path.display())));
    }
    let t0 = Instant::now();
    let model = ctx.exp.build_model().context("building the symbolic model")?;
    let build_s = t0.elapsed().as_secs_f64();
    let stats = model.stats();
    model.save(&path).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "{} cells ({:?}), {} inputs, {} transitions, {} out-of-domain pairs, built in {build_s:.2} s",
        stats.cells, ctx.exp.grid.counts, stats.inputs, stats.transitions, stats.out_of_domain
    );
    ctx.write_json(
        "abstract.json",
        &json!({
            "config_hash": ctx.hash,
            "model_hash": model.config_hash,
            "mode": ctx.exp.mode,
            "cells": stats.cells,
            "counts": ctx.exp.grid.counts,
            "inputs": stats.inputs,
            "transitions": stats.transitions,
            "out_of_domain_pairs": stats.out_of_domain,
            "tau": ctx.exp.tau,
            "eta": ctx.exp.grid.eta,
            "build_seconds": build_s,
        }),
    )?;
    Ok(EXIT_OK)
}

fn load_model(ctx: &Ctx, path: Option<&Path>) -> Result<SymbolicModel> {
    let path = path.map_or_else(|| ctx.path(MODEL_FILE), Path::to_path_buf);
    if !path.exists() {
        return Err(usage(format!(
            "model file {} not found; run `freqsynth abstract` first",
            path.display()
        )));
    }
    Ok(SymbolicModel::load(&path, Some(&ctx.exp.model_hash()?))?)
}

fn controller_file(stage: Stage) -> String {
    format!("{}.ctl", stage.name())
}

fn cmd_synth(ctx: &Ctx, target: TargetArg, model_path: Option<&Path>, csv: bool) -> Result<u8> {
    let model = load_model(ctx, model_path)?;
    let stages: &[Stage] = match target {
        TargetArg::I1 => &[Stage::I1],
        TargetArg::I2 => &[Stage::I2],
        TargetArg::Both => &[Stage::I1, Stage::I2],
    };
    let m = ctx.exp.matrices()?;
    let mut reports = Vec::new();
    for &stage in stages {
        let t0 = Instant::now();
        let c = ctx.exp.synthesize(&model, stage)?;
        let solve_s = t0.elapsed().as_secs_f64();
        c.save(&ctx.path(&controller_file(stage)))?;
        if csv {
            ctx.write_csv(&format!("{}.csv", stage.name()), &c.to_csv()?)?;
        }
        let band = match stage {
            Stage::I1 => ctx.exp.spec.i1,
            Stage::I2 => ctx.exp.spec.i2,
        };
        let f_nom = ctx.exp.spec.f_nom;
        let u_ref = reference_participation(&m, band.lo - f_nom, band.hi - f_nom, ctx.exp.w)?;
        let steady = m.steady_state(u_ref, ctx.exp.w)?;
        let in_winning = |x| state_to_cell(x, &ctx.exp.grid).is_some_and(|cell| c.winning.contains(cell));
        println!(
            "{}: winning {:.1}% of {} cells, {} rounds, {solve_s:.2} s",
            c.name,
            100.0 * c.winning_fraction(),
            c.winning.capacity(),
            c.iterations
        );
        reports.push(json!({
            "name": c.name,
            "target": stage,
            "winning_fraction": c.winning_fraction(),
            "winning_cells": c.winning.count(),
            "iterations": c.iterations,
            "solve_seconds": solve_s,
            "x0_winning": in_winning(&ctx.exp.x0),
            "reference_participation": u_ref,
            "steady_state_winning": in_winning(&steady),
        }));
    }
    ctx.write_json(
        "synth.json",
        &json!({
            "config_hash": ctx.hash,
            "model_hash": model.config_hash,
            "mode": ctx.exp.mode,
            "controllers": reports,
        }),
    )?;
    Ok(EXIT_OK)
}

fn load_controllers(ctx: &Ctx) -> Result<(Controller, Controller)> {
    let hash = ctx.exp.model_hash()?;
    let load = |stage| -> Result<Controller> {
        let path = ctx.path(&controller_file(stage));
        if !path.exists() {
            return Err(usage(format!(
                "controller file {} not found; run `freqsynth synth` first",
                path.display()
            )));
        }
        Ok(Controller::load(&path, Some(&hash))?)
    };
    Ok((load(Stage::I1)?, load(Stage::I2)?))
}

#[derive(Serialize)]
struct RunReport<'a> {
    config_hash: &'a str,
    mode: ChargingMode,
    controller: &'a str,
    loss_mw: f64,
    w: f64,
    seed: Option<u64>,
    delta_max: Option<f64>,
    psi: bool,
    phase_regressions: Option<usize>,
    verdicts: Option<Verdicts>,
    error: Option<String>,
}

fn emit_run(ctx: &Ctx, exp: &Experiment, prefix: &str, kind: &str, trace: &Trace, report: &mut RunReport) -> Result<()> {
    let v = exp.verdict(trace)?;
    report.psi = v.two_stage.psi.holds;
    report.phase_regressions = phase_regressions(trace);
    println!(
        "{prefix}: psi {}, min f {:.4} Hz, final f {:.4} Hz, I2 entry {}",
        if report.psi { "pass" } else { "fail" },
        v.min_f_hz,
        v.final_f_hz,
        v.i2_entry_t.map_or("never".to_string(), |t| format!("{t} s"))
    );
    report.verdicts = Some(v);
    ctx.write_csv(&format!("{prefix}_trace.csv"), &trace.to_csv())?;
    ctx.write_json(&format!("{prefix}_verdict.json"), report)?;
    if exp.output.plots {
        let title = format!("{} {kind}, {} MW loss, config {}", exp.mode, exp.loss_mw, &ctx.hash[..12]);
        let svg = frequency_svg(trace, &exp.spec, &title);
        write_atomic(&ctx.path(&format!("{prefix}.svg")), svg.as_bytes())?;
    }
    Ok(())
}

fn cmd_simulate_symbolic(ctx: &Ctx, robust: bool) -> Result<u8> {
    let (c1, c2) = load_controllers(ctx)?;
    let perturbation = robust
        .then(|| Perturbation::new(ctx.exp.robustness.delta_max, ctx.seed))
        .transpose()?;
    let prefix = if robust { format!("symbolic_seed{}", ctx.seed) } else { "symbolic".to_string() };
    let mut report = RunReport {
        config_hash: &ctx.hash,
        mode: ctx.exp.mode,
        controller: "symbolic",
        loss_mw: ctx.exp.loss_mw,
        w: ctx.exp.w,
        seed: robust.then_some(ctx.seed),
        delta_max: robust.then_some(ctx.exp.robustness.delta_max),
        psi: false,
        phase_regressions: None,
        verdicts: None,
        error: None,
    };
    match ctx.exp.run_symbolic(&c1, &c2, perturbation) {
        Ok(trace) => emit_run(ctx, &ctx.exp, &prefix, "symbolic", &trace, &mut report)?,
        Err(e @ (Error::NotWinning { .. } | Error::OutsideRegion { .. })) => {
            eprintln!("{prefix}: run aborted: {e}");
            report.error = Some(e.to_string());
            ctx.write_json(&format!("{prefix}_verdict.json"), &report)?;
        }
        Err(e) => return Err(e.into()),
    }
    Ok(if report.psi { EXIT_OK } else { EXIT_SPEC_FAIL })
}

fn cmd_baseline(ctx: &Ctx, no_ev: bool) -> Result<u8> {
    let mut exp = ctx.exp.clone();
    if no_ev {
        exp.params = exp.params.without_evs();
    }
    let trace = exp.run_baseline()?;
    let mut report = RunReport {
        config_hash: &ctx.hash,
        mode: exp.mode,
        controller: if no_ev { "none" } else { "baseline" },
        loss_mw: exp.loss_mw,
        w: exp.w,
        seed: None,
        delta_max: None,
        psi: false,
        phase_regressions: None,
        verdicts: None,
        error: None,
    };
    let (prefix, kind) = if no_ev { ("noev", "without EVs") } else { ("baseline", "droop baseline") };
    emit_run(ctx, &exp, prefix, kind, &trace, &mut report)?;
    Ok(EXIT_OK)
}

fn cmd_sweep(ctx: &Ctx) -> Result<u8> {
    let widths = default_half_widths();
    let mut rows = Vec::new();
    for mode in [ChargingMode::Uni, ChargingMode::Bi] {
        let mut raw = ctx.raw.clone();
        raw.ev.mode = Some(mode);
        rows.extend(raw.resolve()?.run_sweep(&widths)?);
    }
    for r in &rows {
        println!(
            "{:>4} ±{:.2} Hz: {:.4} Hz{}",
            r.mode.as_str(),
            r.half_width_hz,
            r.steady_f_hz,
            if r.settled { "" } else { " (not settled)" }
        );
    }
    ctx.write_csv("sweep.csv", &sweep_to_csv(&rows))?;
    ctx.write_json("sweep.json", &json!({ "config_hash": ctx.hash, "rows": rows }))?;
    Ok(EXIT_OK)
}

fn cmd_robustness(ctx: &Ctx) -> Result<u8> {
    let (c1, c2) = load_controllers(ctx)?;
    let t0 = Instant::now();
    let report = ctx.exp.run_robustness(&c1, &c2)?;
    println!(
        "{}: {}/{} runs satisfy the specification, worst I2 entry {}, {:.1} s",
        ctx.exp.mode,
        report.passed,
        report.total,
        report.worst_i2_entry_t.map_or("never".to_string(), |t| format!("{t} s")),
        t0.elapsed().as_secs_f64()
    );
    ctx.write_csv("robustness.csv", &report.to_csv())?;
    ctx.write_json(
        "robustness.json",
        &json!({ "config_hash": ctx.hash, "mode": ctx.exp.mode, "report": report }),
    )?;
    Ok(if report.passed == report.total { EXIT_OK } else { EXIT_SPEC_FAIL })
}

fn cmd_check(ctx: &Ctx, path: &Path) -> Result<u8> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read trace {}: {e}", path.display())))?;
    let trace = Trace::from_csv(&text, ctx.exp.spec.f_nom)?;
    let v = ctx.exp.verdict(&trace)?;
    let psi = v.two_stage.psi.holds;
    let out = json!({
        "config_hash": ctx.hash,
        "trace_config_hash": hash_comment(&text),
        "trace": path,
        "psi": psi,
        "verdicts": v,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(if psi { EXIT_OK } else { EXIT_SPEC_FAIL })
}
