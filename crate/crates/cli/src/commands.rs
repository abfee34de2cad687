use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};

use anyhow::{bail, Context, Result};
use cgct::allocation::{bootstrap_pipeline, plan_for_model, AllocationPlan, BootstrapResult, SolverOptions};
use cgct::data::{impute_knn, load_panel, summarize, write_panel, Dataset};
use cgct::evaluation::{ablation_matrix, format_ablation_table, repeat_runs, repeat_runs_factual, tune};
use cgct::inference::InferenceKind;
use cgct::pipeline::{
    default_inference, ensemble_curve, inference_grid, load_model, save_model, train_cgct, AblationFlags, CgCtModel,
    HyperParams, MethodConfig, ResponseCurve,
};
use cgct::quadrature::lattice;
use cgct::semi_synthetic::SemiSynthetic;
use cgct::{CgctError, Stage};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::args::*;

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(a, cli.json, out),
        Command::Train(a) => train(a, cli.json, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Curves(a) => curves(a, cli.json, out),
        Command::Allocate(a) => allocate(a, cli.json, out),
        Command::Ablation(a) => ablation(a, cli.json, out),
        Command::Serve(a) => crate::service::serve(a),
    }
}

fn print_json(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Loads the panel and imputes missing covariates over all years jointly.
pub fn load_imputed(args: &DataArgs) -> Result<Dataset> {
    let raw = load_panel(&args.data).map_err(|e| e.at(Stage::Data))?;
    Ok(impute_knn(&raw, args.knn).map_err(|e| e.at(Stage::Data))?)
}

fn year(panel: &Dataset, y: i32) -> Result<Dataset> {
    Ok(panel.for_year(y).map_err(|e| e.at(Stage::Data))?)
}

/// Rates come from `explicit` or the year before `decision` when present.
fn previous_year(panel: &Dataset, decision: i32, explicit: Option<i32>) -> Result<Option<Dataset>> {
    match explicit {
        Some(y) => Ok(Some(year(panel, y)?)),
        None => Ok(panel.for_year(decision - 1).ok()),
    }
}

pub fn build_config(args: &ConfigArgs) -> Result<MethodConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| CgctError::InvalidArgument(format!("config {}: {e}", path.display())))?
        }
        None => args.method.default_config(),
    };
    if let Some(b) = args.bae {
        cfg.flags.bae = b;
    }
    if let Some(c) = args.cfgen {
        cfg.flags.cfgen = c;
    }
    if let Some(e) = args.epochs {
        cfg.hp.epochs = e;
    }
    if let Some(m) = args.m {
        cfg.hp.m = m;
    }
    Ok(cfg)
}

fn ingest(a: &IngestArgs, as_json: bool, out: &mut dyn Write) -> Result<()> {
    let mut raw = load_panel(&a.data.data).map_err(|e| e.at(Stage::Data))?;
    if let Some(y) = a.year {
        raw = year(&raw, y)?;
    }
    let missing: usize = raw.records.iter().map(|r| r.covariates.iter().filter(|c| c.is_none()).count()).sum();
    let imputed = impute_knn(&raw, a.data.knn).map_err(|e| e.at(Stage::Data))?;
    if let Some(path) = &a.out {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_panel(&imputed, BufWriter::new(f)).map_err(|e| e.at(Stage::Data))?;
    }
    let columns: Vec<_> = summarize(&raw)
        .into_iter()
        .map(|(name, stats)| json!({ "column": name, "stats": stats }))
        .collect();
    let mut countries: Vec<&str> = raw.records.iter().map(|r| r.country_id.as_str()).collect();
    countries.sort_unstable();
    countries.dedup();
    let summary = json!({
        "path": a.data.data,
        "rows": raw.n(),
        "countries": countries.len(),
        "years": raw.years(),
        "missing_cells": missing,
        "knn": a.data.knn,
        "data_hash": imputed.content_hash(),
        "imputed_out": a.out,
        "columns": columns,
    });
    if as_json {
        return print_json(out, &summary);
    }
    writeln!(
        out,
        "{} rows, {} countries, years {:?}, {} missing covariate cells imputed (k={})",
        raw.n(),
        countries.len(),
        raw.years(),
        missing,
        a.data.knn
    )?;
    writeln!(out, "{:<28}{:>7}{:>14}{:>14}{:>14}{:>14}{:>14}", "column", "count", "mean", "sd", "median", "min", "max")?;
    for (name, stats) in summarize(&raw) {
        match stats {
            Some(s) => writeln!(
                out,
                "{:<28}{:>7}{:>14.4}{:>14.4}{:>14.4}{:>14.4}{:>14.4}",
                name, s.count, s.mean, s.sd, s.median, s.min, s.max
            )?,
            None => writeln!(out, "{name:<28}{:>7}", 0)?,
        }
    }
    writeln!(out, "data hash {}", imputed.content_hash())?;
    Ok(())
}

/// `samples` configurations drawn from the method's grid, after the base one.
fn tuning_grid(base: &MethodConfig, samples: usize, seed: u64) -> Vec<MethodConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![base.clone()];
    match base.inference.kind() {
        InferenceKind::Gps if base.flags.bae || base.flags.cfgen => {
            let all = HyperParams::grid();
            grid.extend(all.choose_multiple(&mut rng, samples).map(|hp| MethodConfig { hp: *hp, ..base.clone() }));
        }
        kind => {
            let all = inference_grid(kind);
            grid.extend(
                all.choose_multiple(&mut rng, samples)
                    .map(|inf| MethodConfig { inference: inf.clone(), ..base.clone() }),
            );
        }
    }
    grid
}

fn train(a: &TrainArgs, as_json: bool, out: &mut dyn Write) -> Result<()> {
    let panel = load_imputed(&a.data)?;
    let d = panel.for_years(&a.year).map_err(|e| e.at(Stage::Data))?;
    let mut cfg = build_config(&a.config)?;
    let mut tuned = None;
    if let Some(samples) = a.tune {
        let grid = tuning_grid(&cfg, samples, a.seed);
        let res = tune(&grid, &d, a.seed)?;
        log::info!("tuning picked grid point {} of {} (validation MSE {:e})", res.best, grid.len(), res.scores[res.best]);
        cfg = res.best_config.clone();
        tuned = Some(json!({ "grid_points": grid.len(), "best": res.best, "scores": res.scores }));
    }
    let model = train_cgct(&d, &cfg, a.seed)?;
    save_model(&model, &a.out).map_err(|e| e.at(Stage::Persistence))?;
    if as_json {
        return print_json(
            out,
            &json!({
                "model": a.out,
                "config": model.config,
                "metadata": model.metadata,
                "tuning": tuned,
            }),
        );
    }
    writeln!(
        out,
        "trained {} ({}) on {} rows ({} fitted), bound {:.4} USD millions, saved to {}",
        label(&model.config),
        model.config.inference.kind(),
        model.metadata.observed_rows,
        model.metadata.fitted_rows,
        model.treatment_bound(),
        a.out.display()
    )?;
    Ok(())
}

fn label(cfg: &MethodConfig) -> String {
    format!("{}/{}", cfg.flags.label(), cfg.inference.kind())
}

fn evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let panel = load_imputed(&a.data)?;
    let train = year(&panel, a.train_year)?;
    let eval = year(&panel, a.eval_year)?;
    let cfg = build_config(&a.config)?;
    let name = label(&cfg);
    let report = if a.semi_synthetic {
        let setup = SemiSynthetic::standard(&train, &eval).map_err(|e| e.at(Stage::SemiSynthetic))?;
        if let Some(path) = &a.sidecar {
            let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            serde_json::to_writer_pretty(BufWriter::new(f), &setup.sidecar())?;
        }
        repeat_runs(&cfg, &setup, a.runs, a.seed, &name)?
    } else {
        if a.sidecar.is_some() {
            bail!(CgctError::InvalidArgument("--sidecar needs --semi-synthetic".into()).at(Stage::Evaluation));
        }
        repeat_runs_factual(&cfg, &train, &eval, a.runs, a.seed, &name)?
    };
    print_json(out, &report)
}

fn grid_for(bound: f64, min: Option<f64>, max: Option<f64>, points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        bail!(CgctError::InvalidArgument(format!("points must be >= 2, got {points}")));
    }
    let lo = min.unwrap_or(0.0);
    let hi = max.unwrap_or(bound);
    if !(lo < hi) {
        bail!(CgctError::InvalidArgument(format!("grid needs min < max, got [{lo}, {hi}]")));
    }
    Ok(lattice(lo, hi, points))
}

fn curves(a: &CurvesArgs, as_json: bool, out: &mut dyn Write) -> Result<()> {
    let models = a
        .model
        .iter()
        .map(|p| load_model(p).map_err(|e| e.at(Stage::Persistence)))
        .collect::<Result<Vec<CgCtModel>, _>>()?;
    let bound = models.iter().map(CgCtModel::treatment_bound).fold(f64::INFINITY, f64::min);
    let grid = grid_for(bound, a.min, a.max, a.points)?;
    let panel = load_imputed(&a.data)?;
    let d = year(&panel, a.year)?;
    let ids: Vec<String> = match &a.country {
        Some(c) => {
            if d.get(c).is_none() {
                bail!(CgctError::UnknownCountry(c.clone()).at(Stage::Data));
            }
            vec![c.clone()]
        }
        None => d.records.iter().map(|r| r.country_id.clone()).collect(),
    };
    let mut out_curves = Vec::with_capacity(ids.len());
    for id in &ids {
        let x = d.get(id).expect("checked above").covariate_values()?;
        out_curves.push(ensemble_curve(&models, id, &x, &grid)?);
    }
    if as_json {
        return print_json(out, &json!({ "year": a.year, "bound": bound, "models": models.len(), "curves": out_curves }));
    }
    ResponseCurve::write_csv(&out_curves, out)?;
    Ok(())
}

fn allocation_summary(plan: &AllocationPlan) -> serde_json::Value {
    let pct = if plan.current_objective != 0.0 { 100.0 * plan.reduction() / plan.current_objective } else { 0.0 };
    json!({
        "current_infections": plan.current_objective,
        "suggested_infections": plan.objective,
        "reduction": plan.reduction(),
        "reduction_percent": pct,
    })
}

fn allocate(a: &AllocateArgs, as_json: bool, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model).map_err(|e| e.at(Stage::Persistence))?;
    let panel = load_imputed(&a.data)?;
    let decision = year(&panel, a.year)?;
    let previous = previous_year(&panel, a.year, a.previous_year)?;
    let pins: BTreeMap<String, f64> = a.pin.iter().cloned().collect();
    let opts = SolverOptions { max_iterations: a.max_iterations, tolerance: a.tolerance };
    let plan = plan_for_model(&model, &decision, previous.as_ref(), a.budget, pins.clone(), a.seed, &opts)?;
    let boot: Option<BootstrapResult> = match a.bootstrap {
        Some(n) => {
            if !pins.is_empty() {
                bail!(CgctError::InvalidArgument("--bootstrap does not support pins".into()).at(Stage::Allocation));
            }
            let train = match a.train_year {
                Some(y) => year(&panel, y)?,
                None => panel.for_years(&model.metadata.years).map_err(|e| e.at(Stage::Data))?,
            };
            Some(bootstrap_pipeline(&model.config, &train, &decision, previous.as_ref(), a.budget, n, a.seed, &opts)?)
        }
        None => None,
    };
    if let Some(path) = &a.out {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        plan.write_csv(BufWriter::new(f))?;
    }
    let summary = allocation_summary(&plan);
    if as_json {
        return print_json(out, &json!({ "year": a.year, "plan": plan, "comparison": summary, "bootstrap": boot }));
    }
    let report = format!(
        "budget {:.4}, bound {:.4} USD millions: expected infections {:.1} current, {:.1} suggested ({:.2}% reduction), {} iterations",
        plan.budget,
        plan.bound,
        plan.current_objective,
        plan.objective,
        summary["reduction_percent"].as_f64().unwrap_or(0.0),
        plan.iterations
    );
    let boot_line = boot.as_ref().map(|b| {
        format!(
            "bootstrap ({} resamples): reduction {:.1} ± {:.1}, {:.2}% ± {:.2}%",
            b.reductions.len(),
            b.mean,
            b.std,
            b.percent_mean,
            b.percent_std
        )
    });
    if a.out.is_some() {
        writeln!(out, "{report}")?;
        if let Some(l) = boot_line {
            writeln!(out, "{l}")?;
        }
    } else {
        plan.write_csv(&mut *out)?;
        eprintln!("{report}");
        if let Some(l) = boot_line {
            eprintln!("{l}");
        }
    }
    Ok(())
}

fn ablation(a: &AblationArgs, as_json: bool, out: &mut dyn Write) -> Result<()> {
    let panel = load_imputed(&a.data)?;
    let setup = SemiSynthetic::standard(&year(&panel, a.train_year)?, &year(&panel, a.eval_year)?)
        .map_err(|e| e.at(Stage::SemiSynthetic))?;
    let kinds = a
        .inference
        .iter()
        .map(|s| s.parse::<InferenceKind>().map_err(|e| e.at(Stage::Evaluation)))
        .collect::<Result<Vec<_>, _>>()?;
    let configs: Vec<(InferenceKind, MethodConfig)> = kinds
        .iter()
        .map(|&k| {
            let mut hp = HyperParams::default();
            if let Some(e) = a.epochs {
                hp.epochs = e;
            }
            (k, MethodConfig { flags: AblationFlags::ON, hp, inference: default_inference(k) })
        })
        .collect();
    let reports = ablation_matrix(&setup, &configs, a.runs, a.seed)?;
    if as_json {
        return print_json(out, &reports);
    }
    write!(out, "{}", format_ablation_table(&reports, &kinds))?;
    Ok(())
}
