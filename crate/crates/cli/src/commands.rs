use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rkstack_core::data::{read_cifar10_bin, ChannelNorm, Dataset, Split};
use rkstack_core::diagnostics::{
    degradation_sweep, init_probe, lr_grid, lr_sweep, probe_batch, seed_list, time_to_threshold,
};
use rkstack_core::network::{Checkpoint, HoNetwork};
use rkstack_core::ode::{halving_grid, measure_order, IvProblem};
use rkstack_core::report::{
    epoch_table, heat_strip, line_chart, num, range_bars, ArtifactWriter, RunReport, Table,
    TableauDigest,
};
use rkstack_core::rng::split_seed;
use rkstack_core::schemes::{tableau_json, Scheme, VernerCoefficients};
use rkstack_core::training::{EpochRecord, TrainConfig, Trainer};
use serde_json::json;

use crate::config::{RunConfig, TaskConfig};
use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepCmd {
    InitProbe,
    Lr,
    Degradation,
    TimeToThreshold,
}

pub fn dump_tableau(scheme: Scheme, verner: VernerCoefficients) -> Result<String> {
    Ok(tableau_json(&scheme.tableau(verner))?)
}

fn digests(schemes: &[Scheme], verner: VernerCoefficients) -> Result<Vec<TableauDigest>> {
    schemes
        .iter()
        .map(|s| Ok(TableauDigest::of(&s.tableau(verner))?))
        .collect()
}

/// Exit 0 when every order lands in its scheme's declared band, 1 otherwise.
pub fn ode_verify(
    dir: &Path,
    schemes: &[Scheme],
    verner: VernerCoefficients,
    h_from: i32,
    h_to: i32,
) -> Result<ExitCode> {
    let start = Instant::now();
    if h_to < h_from + 3 {
        return Err(UsageError(format!("need at least 4 step sizes, got 2^-{h_from}..2^-{h_to}")).into());
    }
    let grid = halving_grid(h_from, h_to);
    let mut orders = Table::new(["scheme", "problem", "order", "residual", "target", "pass", "shifted", "points"]);
    let mut errors = Table::new(["scheme", "problem", "h", "error"]);
    let mut series = Vec::new();
    let mut all_pass = true;
    let mut rows = Vec::new();
    for &scheme in schemes {
        let tableau = scheme.tableau(verner);
        let target = scheme.declared_order(verner);
        for problem in IvProblem::suite() {
            let (order, residual, shifted, points, pass) = match measure_order(&tableau, &problem, &grid) {
                Ok(est) => {
                    for (h, e) in est.h.iter().zip(&est.errors) {
                        errors.push(vec![scheme.to_string(), problem.name.clone(), num(*h), num(*e)])?;
                    }
                    series.push((
                        format!("{scheme}/{}", problem.name),
                        est.h
                            .iter()
                            .zip(&est.errors)
                            .filter(|(_, e)| **e > 0.0)
                            .map(|(h, e)| (h.log10(), e.log10()))
                            .collect(),
                    ));
                    let pass = target.accepts(est.order);
                    (est.order, est.residual, est.shifted, est.h.len(), pass)
                }
                Err(e) => {
                    eprintln!("{scheme} on {}: {e}", problem.name);
                    (f64::NAN, f64::NAN, false, 0, false)
                }
            };
            all_pass &= pass;
            println!(
                "{:<16} {:<16} order {:>7.3}  target {:<8} {}",
                scheme.name(),
                problem.name,
                order,
                target.to_string(),
                if pass { "ok" } else { "FAIL" }
            );
            orders.push(vec![
                scheme.to_string(),
                problem.name.clone(),
                num(order),
                num(residual),
                target.to_string(),
                pass.to_string(),
                shifted.to_string(),
                points.to_string(),
            ])?;
            rows.push(json!({"scheme": scheme, "problem": problem.name, "order": order, "pass": pass}));
        }
    }
    let mut w = ArtifactWriter::create(dir)?;
    w.write("orders.csv", orders.to_csv()?.as_bytes())?;
    w.write("errors.csv", errors.to_csv()?.as_bytes())?;
    if !series.is_empty() {
        let svg = line_chart("global error against step", &series, "log10 h", "log10 error")?;
        w.write("orders.svg", svg.as_bytes())?;
    }
    let config = json!({
        "command": "ode-verify",
        "schemes": schemes,
        "verner": verner,
        "h_from": h_from,
        "h_to": h_to,
    });
    let mut report = RunReport::new("ode-verify", config);
    report.diagnostics = json!({ "orders": rows, "all_pass": all_pass });
    report.tableaux = digests(schemes, verner)?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    w.finish(report)?;
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn load_task(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.task {
        TaskConfig::Synthetic(spec) => Ok(spec.generate(split_seed(cfg.seed, "data", 0))?),
        TaskConfig::Cifar10 {
            dir,
            train_samples,
            test_samples,
        } => {
            let norm = ChannelNorm::cifar10();
            let mut parts = Vec::new();
            for i in 1..=5 {
                let path = dir.join(format!("data_batch_{i}.bin"));
                if parts.iter().map(Dataset::len).sum::<usize>() >= *train_samples {
                    break;
                }
                parts.push(read_cifar10_bin(&path, &norm).with_context(|| format!("reading {}", path.display()))?);
            }
            let mut train = parts.remove(0);
            for p in parts {
                train.features.extend(p.features);
                train.labels.extend(p.labels);
            }
            let train = train.take(*train_samples);
            let path = dir.join("test_batch.bin");
            let mut test = read_cifar10_bin(&path, &norm)
                .with_context(|| format!("reading {}", path.display()))?
                .take(*test_samples);
            test.split = Split::Test;
            Ok((train, test))
        }
    }
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        seed: split_seed(cfg.seed, "shuffle", 0),
        ..cfg.train.clone()
    }
}

fn init_seed(cfg: &RunConfig) -> u64 {
    split_seed(cfg.seed, "init", 0)
}

pub fn train(mut cfg: RunConfig, resume: Option<&Path>, checkpoint_every: Option<usize>) -> Result<ExitCode> {
    let start = Instant::now();
    let (train_set, test_set) = load_task(&cfg)?;
    let tcfg = train_config(&cfg);
    let (mut trainer, mut net) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            // The checkpoint fixes the architecture.
            cfg.schemes = vec![ckpt.shape.scheme];
            cfg.depth = ckpt.shape.depth;
            cfg.width = ckpt.shape.width;
            cfg.activation = ckpt.shape.activation;
            cfg.verner = ckpt.shape.verner;
            cfg.h_granularity = ckpt.shape.h_granularity;
            cfg.h_clamp = ckpt.shape.h_clamp;
            Trainer::resume(tcfg, &ckpt)?
        }
        None => {
            let shape = cfg.shape(cfg.scheme()?, cfg.depth);
            let net = HoNetwork::build(&shape, init_seed(&cfg))?;
            (Trainer::new(tcfg, &net)?, net)
        }
    };
    let mut w = ArtifactWriter::create(&cfg.output)?;
    let ckpt_path = cfg.output.join("checkpoint.bin");
    let config_json = serde_json::to_value(&cfg)?;
    let every = checkpoint_every.unwrap_or(0);
    let count = net.param_count();
    eprintln!(
        "{}: {} blocks, {} trainable parameters, epochs {}..{}",
        net.shape.scheme,
        net.blocks.len(),
        count.trainable,
        trainer.epoch,
        trainer.config.epochs
    );
    let records: Vec<EpochRecord> = trainer.run(&mut net, &train_set, &test_set, &mut |net, t, r| {
        eprintln!(
            "epoch {:>4}  lr {:.4}  loss {:.4}  train {:.4}  test {:.4}{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_accuracy,
            r.test_accuracy,
            if r.diverged { "  DIVERGED" } else { "" }
        );
        if every > 0 && t.epoch % every == 0 {
            t.checkpoint(net).save(&ckpt_path, net, Some(&config_json["train"]))?;
        }
        Ok(())
    })?;
    trainer.checkpoint(&net).save(&ckpt_path, &net, Some(&config_json["train"]))?;
    w.record("checkpoint.bin");
    w.record("checkpoint.json");
    w.write("epochs.csv", epoch_table(&records).to_csv()?.as_bytes())?;
    if !records.is_empty() {
        let acc = |f: fn(&EpochRecord) -> f64| records.iter().map(|r| (r.epoch as f64, f(r))).collect();
        let svg = line_chart(
            "accuracy",
            &[("train".into(), acc(|r| r.train_accuracy)), ("test".into(), acc(|r| r.test_accuracy))],
            "epoch",
            "accuracy",
        )?;
        w.write("accuracy.svg", svg.as_bytes())?;
    }
    let mut report = RunReport::new("train", config_json);
    report.diagnostics = json!({
        "diverged": trainer.diverged,
        "initial_loss": trainer.initial_loss,
        "params": count,
        "step_scales": net.step_scales(),
        "resumed_from": resume.map(Path::to_path_buf),
    });
    report.tableaux = digests(&[net.shape.scheme], net.shape.verner)?;
    report.records = records;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    w.finish(report)?;
    Ok(ExitCode::SUCCESS)
}

fn seeds(cfg: &RunConfig, default: usize, tag: &str) -> Result<Vec<u64>> {
    let n = cfg.sweep.seeds.unwrap_or(default);
    if n == 0 {
        bail!(UsageError("need at least one seed".into()));
    }
    Ok(seed_list(cfg.seed, tag, n))
}

pub fn sweep(kind: SweepCmd, cfg: RunConfig) -> Result<ExitCode> {
    let start = Instant::now();
    if cfg.schemes.is_empty() {
        bail!(UsageError("no schemes given".into()));
    }
    let depths = match kind {
        SweepCmd::Degradation => cfg.sweep.depths.clone(),
        _ => vec![cfg.depth],
    };
    for &scheme in &cfg.schemes {
        for &depth in &depths {
            cfg.shape(scheme, depth).validate()?;
        }
    }
    let grid = match kind {
        SweepCmd::Lr => {
            let (a, b, c) = cfg.sweep.lr_grid;
            let grid = lr_grid(a, b, c).map_err(|e| UsageError(e.to_string()))?;
            if grid.len() < 3 {
                bail!(UsageError(format!("lr grid {a}:{b}:{c} has fewer than 3 points")));
            }
            grid
        }
        _ => Vec::new(),
    };
    let (train_set, test_set) = load_task(&cfg)?;
    let tcfg = train_config(&cfg);
    tcfg.validate()?;
    let mut w = ArtifactWriter::create(&cfg.output)?;
    let mut table;
    let diagnostics;
    match kind {
        SweepCmd::InitProbe => {
            let TaskConfig::Synthetic(task) = &cfg.task else {
                bail!(UsageError("the init probe runs on synthetic tasks".into()));
            };
            let seeds = seeds(&cfg, 20, "init")?;
            if seeds.len() < 2 {
                bail!(UsageError("the init probe needs at least 2 seeds".into()));
            }
            let probe = probe_batch(task, split_seed(cfg.seed, "data", 0), cfg.sweep.probe_size)?;
            table = Table::new(["scheme", "depth", "seeds", "min", "max", "spread", "median_log_spread"]);
            let mut results = Vec::new();
            for &scheme in &cfg.schemes {
                let r = init_probe(&cfg.shape(scheme, cfg.depth), &seeds, &probe)?;
                println!(
                    "{:<16} loss range [{:.4e}, {:.4e}]  median log-spread {:.3}",
                    scheme.name(),
                    r.min,
                    r.max,
                    r.median_log_spread
                );
                table.push(vec![
                    scheme.to_string(),
                    r.depth.to_string(),
                    seeds.len().to_string(),
                    num(r.min),
                    num(r.max),
                    num(r.spread),
                    num(r.median_log_spread),
                ])?;
                results.push(r);
            }
            let labels: Vec<String> = results.iter().map(|r| r.scheme.to_string()).collect();
            let ranges: Vec<(f64, f64)> = results.iter().map(|r| (r.min, r.max)).collect();
            let svg = range_bars("untrained loss range over seeds", &labels, &ranges, "mean probe loss")?;
            w.write("init_probe.svg", svg.as_bytes())?;
            diagnostics = serde_json::to_value(&results)?;
        }
        SweepCmd::Lr => {
            let base = TrainConfig {
                epochs: cfg.sweep.lr_epochs,
                milestones: Vec::new(),
                ..tcfg.clone()
            };
            table = Table::new(["scheme", "depth", "lr", "diverged", "epochs", "final_train_loss", "final_test_accuracy"]);
            let mut results = Vec::new();
            for &scheme in &cfg.schemes {
                let r = lr_sweep(&cfg.shape(scheme, cfg.depth), &grid, &base, &train_set, &test_set, init_seed(&cfg))?;
                println!("{:<16} max stable lr {:?}", scheme.name(), r.max_stable_lr);
                for c in &r.cells {
                    table.push(vec![
                        scheme.to_string(),
                        r.depth.to_string(),
                        num(c.lr),
                        c.diverged.to_string(),
                        c.epochs.to_string(),
                        num(c.final_train_loss),
                        num(c.final_test_accuracy),
                    ])?;
                }
                results.push(r);
            }
            let rows: Vec<(String, Vec<Option<f64>>)> = results
                .iter()
                .map(|r| {
                    let cells = r.cells.iter().map(|c| (!c.diverged).then_some(c.final_test_accuracy)).collect();
                    (r.scheme.to_string(), cells)
                })
                .collect();
            let cols: Vec<String> = grid.iter().map(|g| num(*g)).collect();
            let svg = heat_strip("test accuracy by learning rate (dark: diverged)", &rows, &cols)?;
            w.write("lr.svg", svg.as_bytes())?;
            diagnostics = serde_json::to_value(&results)?;
        }
        SweepCmd::Degradation => {
            if cfg.sweep.depths.is_empty() {
                bail!(UsageError("no depths given".into()));
            }
            let seeds = seeds(&cfg, 3, "init")?;
            table = Table::new(["scheme", "depth", "blocks", "test_accuracy", "train_accuracy", "diverged"]);
            let mut results = Vec::new();
            let mut series = Vec::new();
            for &scheme in &cfg.schemes {
                let curve = degradation_sweep(
                    &cfg.shape(scheme, cfg.depth),
                    &cfg.sweep.depths,
                    &tcfg,
                    &train_set,
                    &test_set,
                    &seeds,
                )?;
                println!(
                    "{:<16} first drop at {:?}, peak before max depth: {}",
                    scheme.name(),
                    curve.first_drop_depth(),
                    curve.peaks_before_max_depth()
                );
                for p in &curve.points {
                    table.push(vec![
                        scheme.to_string(),
                        p.depth.to_string(),
                        p.blocks.to_string(),
                        num(p.test_accuracy),
                        num(p.train_accuracy),
                        p.diverged.to_string(),
                    ])?;
                }
                series.push((
                    scheme.to_string(),
                    curve.points.iter().map(|p| (p.depth as f64, p.test_accuracy)).collect(),
                ));
                results.push(json!({
                    "curve": curve,
                    "first_drop_depth": curve.first_drop_depth(),
                    "peaks_before_max_depth": curve.peaks_before_max_depth(),
                }));
            }
            let svg = line_chart("final test accuracy against depth", &series, "depth", "test accuracy")?;
            w.write("degradation.svg", svg.as_bytes())?;
            diagnostics = json!(results);
        }
        SweepCmd::TimeToThreshold => {
            let seeds = seeds(&cfg, 5, "init")?;
            table = Table::new(["scheme", "depth", "threshold", "median_epochs", "per_seed"]);
            let mut results = Vec::new();
            for &scheme in &cfg.schemes {
                let r = time_to_threshold(
                    &cfg.shape(scheme, cfg.depth),
                    &tcfg,
                    &train_set,
                    &test_set,
                    cfg.sweep.threshold,
                    &seeds,
                )?;
                println!("{:<16} median epochs to {}: {}", scheme.name(), r.threshold, r.median_epochs);
                let per: Vec<String> = r
                    .epochs
                    .iter()
                    .map(|e| e.map_or_else(|| "-".to_string(), |v| v.to_string()))
                    .collect();
                table.push(vec![
                    scheme.to_string(),
                    r.depth.to_string(),
                    num(r.threshold),
                    num(r.median_epochs),
                    per.join(";"),
                ])?;
                results.push(r);
            }
            let labels: Vec<String> = results.iter().map(|r| r.scheme.to_string()).collect();
            let ranges: Vec<(f64, f64)> = results.iter().map(|r| (0.0, r.median_epochs)).collect();
            let svg = range_bars("median epochs to threshold", &labels, &ranges, "epochs")?;
            w.write("time_to_threshold.svg", svg.as_bytes())?;
            diagnostics = serde_json::to_value(&results)?;
        }
    }
    let stem = match kind {
        SweepCmd::InitProbe => "init_probe",
        SweepCmd::Lr => "lr",
        SweepCmd::Degradation => "degradation",
        SweepCmd::TimeToThreshold => "time_to_threshold",
    };
    w.write(&format!("{stem}.csv"), table.to_csv()?.as_bytes())?;
    let mut report = RunReport::new(&cfg.command, serde_json::to_value(&cfg)?);
    report.diagnostics = diagnostics;
    report.tableaux = digests(&cfg.schemes, cfg.verner)?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    w.finish(report)?;
    Ok(ExitCode::SUCCESS)
}

pub fn report(dir: &Path) -> Result<ExitCode> {
    let path: PathBuf = dir.join("report.json");
    let report = RunReport::load(&path).with_context(|| format!("loading {}", path.display()))?;
    report.verify(dir)?;
    println!("command         {}", report.command);
    println!("schema version  {}", report.schema_version);
    println!("wall clock      {:.2} s", report.wall_clock_seconds);
    for t in &report.tableaux {
        println!("tableau         {} ({} stages, weights sum {}, crc32 {})", t.name, t.stages, t.weight_sum, t.crc32);
    }
    if let Some(last) = report.records.last() {
        println!(
            "epochs          {} (last: train acc {:.4}, test acc {:.4}{})",
            report.records.len(),
            last.train_accuracy,
            last.test_accuracy,
            if last.diverged { ", diverged" } else { "" }
        );
    }
    println!("artifacts       {}", report.artifacts.join(", "));
    Ok(ExitCode::SUCCESS)
}
