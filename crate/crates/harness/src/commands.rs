//! One function per CLI command. Every command writes its outputs through
//! a [`RunRecorder`] so the run directory ends with a `run.json` manifest.

use std::path::{Path, PathBuf};

use log::{info, warn};
use mtrlab_core::advtrain::{adversarial_train_with, robust_eval, TaskCombinationSet};
use mtrlab_core::attacks::{evaluate_subsampled_attack, evaluate_under_attack, AttackConfig, AttackObjective, Steps};
use mtrlab_core::data::{write_dataset, Dataset};
use mtrlab_core::nn::{encode_checkpoint, load_checkpoint, SharedBackboneModel};
use mtrlab_core::train::train_with;
use mtrlab_core::vulnerability::{subsample_curve, vulnerability_report};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{HarnessError, HarnessResult};
use crate::experiments::{
    adv_train_config, attack_matrix, eval_indices, fresh_model, load_data, spearman, theory_grid, train_config,
    train_model,
};
use crate::manifest::{read_manifest, verify_manifest, RunRecorder};
use crate::svg::{heatmap, LinePlot, Series, Table};

/// Builds a CSV document from a header and stringified rows.
pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> HarnessResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Other(anyhow::anyhow!("{e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn io_err(e: std::io::Error) -> mtrlab_core::Error {
    mtrlab_core::FormatError::Io(e).into()
}

/// Everything a command needs besides its configuration.
pub struct RunContext {
    pub out: PathBuf,
    pub workers: usize,
}

pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig, ctx: &RunContext) -> HarnessResult<()> {
    if kind != ExperimentKind::Report {
        cfg.validate()?;
    }
    let value = serde_json::to_value(cfg).map_err(|e| HarnessError::Other(e.into()))?;
    let mut rec = RunRecorder::new(&ctx.out, kind.as_str(), cfg.seed, value)?;
    match kind {
        ExperimentKind::GenData => gen_data(cfg, &mut rec)?,
        ExperimentKind::Train => cmd_train(cfg, &mut rec)?,
        ExperimentKind::AttackEval => attack_eval(cfg, &mut rec)?,
        ExperimentKind::VulnScan => vuln_scan(cfg, &mut rec)?,
        ExperimentKind::SubsampleCurve => subsample(cfg, &mut rec)?,
        ExperimentKind::TheoryCheck => {
            // the manifest is written even when the threshold fails
            let verdict = theory_check(cfg, &mut rec);
            rec.finish()?;
            return verdict;
        }
        ExperimentKind::Advtrain => cmd_advtrain(cfg, &mut rec)?,
        ExperimentKind::Sweep => sweep(cfg, &mut rec)?,
        ExperimentKind::Report => {
            let verdict = report(cfg, &mut rec);
            rec.finish()?;
            return verdict;
        }
    }
    let m = rec.finish()?;
    info!("{} wrote {} outputs in {:.1}s", kind.as_str(), m.outputs.len(), m.wall_clock_secs);
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> HarnessResult<()> {
    let (train, test) = load_data(cfg)?;
    for (name, ds) in [("train.mtds", &train), ("test.mtds", &test)] {
        write_dataset(ds, &rec.path(name))?;
        rec.track(name);
    }
    Ok(())
}

/// The checkpointed model when configured, else one trained on `cfg.tasks`.
fn obtain_model(cfg: &ExperimentConfig, train: &Dataset, rec: &mut RunRecorder) -> HarnessResult<SharedBackboneModel> {
    match &cfg.checkpoint {
        Some(path) => {
            let mut model = fresh_model(cfg, &train.params, cfg.seed)?;
            load_checkpoint(&mut model, path)?;
            Ok(model)
        }
        None => {
            let (model, history) = train_model(cfg, train, cfg.weights(), cfg.seed)?;
            let rows: Vec<Vec<String>> = history
                .iter()
                .map(|e| vec![e.epoch.to_string(), num(e.mean_loss), num(e.lr), e.steps.to_string()])
                .collect();
            rec.write("history.csv", csv_text(&["epoch", "mean_loss", "lr", "steps"], &rows)?.as_bytes())?;
            rec.write("model.mtck", &encode_checkpoint(&model))?;
            Ok(model)
        }
    }
}

fn clean_config() -> AttackConfig {
    AttackConfig::pgd(0.0, Steps::Fixed(1))
}

fn cmd_train(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> HarnessResult<()> {
    let (train, test) = load_data(cfg)?;
    let mut model = fresh_model(cfg, &train.params, cfg.seed)?;
    let tc = train_config(cfg, cfg.weights(), cfg.seed);
    let history = train_with(&mut model, &train, &tc, &mut |e, _| {
        info!("epoch {} loss {:.5} lr {}", e.epoch, e.mean_loss, e.lr);
        Ok(())
    })?;
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|e| vec![e.epoch.to_string(), num(e.mean_loss), num(e.lr), e.steps.to_string()])
        .collect();
    let hist = csv_text(&["epoch", "mean_loss", "lr", "steps"], &rows)?;
    rec.write("history.csv", hist.as_bytes())?;
    let t = Table::parse(&hist)?;
    let plot = LinePlot {
        title: "training loss".into(),
        x_label: "epoch".into(),
        y_label: "mean loss".into(),
        log_x: false,
        series: vec![Series::from_columns("loss", &t, "epoch", "mean_loss")?],
    };
    rec.write("history.svg", plot.render().as_bytes())?;
    rec.write("model.mtck", &encode_checkpoint(&model))?;

    let scored = cfg.scored();
    let names: Vec<&str> = scored.iter().map(String::as_str).collect();
    let idx = eval_indices(cfg, &test);
    let clean = evaluate_under_attack(&model, &test, &idx, &AttackObjective::SingleTask(names[0].into()), &clean_config(), &names)?;
    let rows: Vec<Vec<String>> = clean
        .rows
        .iter()
        .map(|r| vec![r.task.clone(), r.metric.name().into(), num(r.clean)])
        .collect();
    rec.write("metrics.csv", csv_text(&["task", "metric", "value"], &rows)?.as_bytes())?;
    Ok(())
}

fn attack_eval(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> HarnessResult<()> {
    let (train, test) = load_data(cfg)?;
    let model = obtain_model(cfg, &train, rec)?;
    let objective = cfg.attack_objective.resolve(&cfg.tasks)?;
    let scored = cfg.scored();
    let names: Vec<&str> = scored.iter().map(String::as_str).collect();
    let idx = eval_indices(cfg, &test);
    let mut rows = Vec::new();
    for section in &cfg.attacks {
        let attack = section.to_config(cfg.seed)?;
        let t = evaluate_under_attack(&model, &test, &idx, &objective, &attack, &names)?;
        for r in &t.rows {
            info!("{} eps {}: {} {} clean {:.4} attacked {:.4}", t.attack, t.epsilon, r.task, r.metric.name(), r.clean, r.attacked);
            rows.push(vec![
                t.attack.clone(),
                num(t.epsilon),
                r.task.clone(),
                r.metric.name().into(),
                num(r.clean),
                num(r.attacked),
                num(r.metric.relative_improvement(r.attacked, r.clean)),
                t.gradient_passes.to_string(),
            ]);
        }
    }
    let header = ["attack", "epsilon", "task", "metric", "clean", "attacked", "relative_change", "gradient_passes"];
    rec.write("attack_eval.csv", csv_text(&header, &rows)?.as_bytes())?;
    Ok(())
}

fn vuln_scan(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> HarnessResult<()> {
    let (train, test) = load_data(cfg)?;
    let v = &cfg.vuln;
    let idx: Vec<usize> = (0..v.examples.min(test.len())).collect();
    if idx.len() < 2 {
        return Err(HarnessError::Config("vuln.examples must be >= 2".into()));
    }
    let mut rows = Vec::new();
    for &m in &v.task_counts {
        if m == 0 || m > v.tasks.len() {
            return Err(HarnessError::Config(format!("task count {m} outside 1..={}", v.tasks.len())));
        }
        let tasks: Vec<&str> = v.tasks[..m].iter().map(String::as_str).collect();
        let weights = tasks.iter().map(|t| (t.to_string(), 1.0 / m as f64)).collect();
        let (model, _) = train_model(cfg, &train, weights, cfg.seed)?;
        let r = vulnerability_report(&model, &test, &idx, &tasks, 1.0)?;
        info!("M={m}: joint {:.4} ratio {:.4} theorem1 {:.4}", r.joint_norm, r.empirical_ratio, r.theorem1);
        let pair_rows: Vec<Vec<String>> = (0..m)
            .flat_map(|i| (i..m).map(move |j| (i, j)))
            .map(|(i, j)| {
                vec![
                    r.tasks[i].clone(),
                    r.tasks[j].clone(),
                    num(r.covariance.centered[i][j]),
                    num(r.covariance.raw[i][j]),
                ]
            })
            .collect();
        let name = format!("pairwise_m{m}.csv");
        rec.write(&name, csv_text(&["task_i", "task_j", "cov", "raw_moment"], &pair_rows)?.as_bytes())?;
        rows.push(vec![
            m.to_string(),
            num(r.joint_norm),
            num(r.theorem1),
            num(r.corollary1),
            num(r.empirical_ratio),
            num(r.theorem1_homogeneous),
            r.theorem1_centered.map_or(String::new(), num),
        ]);
    }
    let header = [
        "M",
        "joint_norm",
        "theorem1_pred",
        "corollary1_pred",
        "empirical_ratio",
        "theorem1_homogeneous",
        "theorem1_centered",
    ];
    let text = csv_text(&header, &rows)?;
    rec.write("summary.csv", text.as_bytes())?;
    let t = Table::parse(&text)?;
    let plot = LinePlot {
        title: "joint gradient ratio vs task count".into(),
        x_label: "M".into(),
        y_label: "ratio to single-task norm".into(),
        log_x: false,
        series: vec![
            Series::from_columns("empirical", &t, "M", "empirical_ratio")?,
            Series::from_columns("theorem 1", &t, "M", "theorem1_pred")?.dashed(),
            Series::from_columns("1/sqrt(M)", &t, "M", "corollary1_pred")?.dashed(),
        ],
    };
    rec.write("summary.svg", plot.render().as_bytes())?;
    Ok(())
}

fn subsample(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> HarnessResult<()> {
    let (train, test) = load_data(cfg)?;
    let model = obtain_model(cfg, &train, rec)?;
    let s = &cfg.subsample;
    let idx: Vec<usize> = (0..s.examples.min(test.len())).collect();
    let curve = subsample_curve(&model, &test, &idx, &s.task, &s.ks, s.repeats, cfg.seed)?;
    let attack = cfg
        .attacks
        .first()
        .ok_or_else(|| HarnessError::Config("no attack configured".into()))?
        .to_config(cfg.seed)?;
    let mut rows = Vec::new();
    for p in &curve {
        let attacked = if s.attacked_metric {
            num(evaluate_subsampled_attack(&model, &test, &idx, &s.task, p.k, &attack)?)
        } else {
            String::new()
        };
        rows.push(vec![p.k.to_string(), num(p.mean_grad_norm), attacked]);
    }
    let ks: Vec<f64> = curve.iter().map(|p| p.k as f64).collect();
    let norms: Vec<f64> = curve.iter().map(|p| p.mean_grad_norm).collect();
    if curve.len() >= 2 {
        info!("spearman(k, grad norm) = {:.4}", spearman(&ks, &norms));
    }
    let text = csv_text(&["k", "mean_grad_norm", "attacked_metric"], &rows)?;
    rec.write("subsample.csv", text.as_bytes())?;
    let t = Table::parse(&text)?;
    let plot = LinePlot {
        title: format!("{} input-gradient norm vs supervised pixels", s.task),
        x_label: "k".into(),
        y_label: "mean gradient norm".into(),
        log_x: true,
        series: vec![Series::from_columns("grad norm", &t, "k", "mean_grad_norm")?],
    };
    rec.write("subsample.svg", plot.render().as_bytes())?;
    Ok(())
}

fn theory_check(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> HarnessResult<()> {
    let rows = theory_grid(&cfg.theory, cfg.seed)?;
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.m.to_string(), num(r.rho), num(r.empirical), num(r.predicted), num(r.rel_error)])
        .collect();
    let text = csv_text(&["M", "rho", "empirical", "predicted", "rel_error"], &body)?;
    rec.write("theory.csv", text.as_bytes())?;
    let t = Table::parse(&text)?;
    let (ms, rhos) = (t.numbers("M")?, t.numbers("rho")?);
    let (emp, pred) = (t.numbers("empirical")?, t.numbers("predicted")?);
    let mut distinct: Vec<f64> = Vec::new();
    for r in &rhos {
        if !distinct.contains(r) {
            distinct.push(*r);
        }
    }
    let mut series = Vec::new();
    for rho in distinct {
        let pick = |v: &[f64]| -> Vec<(f64, f64)> {
            ms.iter().zip(&rhos).zip(v).filter(|((_, r), _)| **r == rho).map(|((m, _), y)| (*m, *y)).collect()
        };
        series.push(Series::new(&format!("empirical rho={rho}"), pick(&emp)));
        series.push(Series::new(&format!("predicted rho={rho}"), pick(&pred)).dashed());
    }
    let plot = LinePlot {
        title: "joint gradient RMS in the Gaussian sandbox".into(),
        x_label: "M".into(),
        y_label: "RMS of joint gradient".into(),
        log_x: true,
        series,
    };
    rec.write("theory.svg", plot.render().as_bytes())?;
    let tol = cfg.theory.tolerance;
    let worst = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !(r.rel_error <= tol))
        .map(|r| format!("M={} rho={} rel_error={:.4}", r.m, r.rho, r.rel_error))
        .collect();
    if failed.is_empty() {
        info!("theory check passed, worst relative error {worst:.4}");
        Ok(())
    } else {
        Err(HarnessError::Threshold(format!("{} cells over {tol}: {}", failed.len(), failed.join("; "))))
    }
}

fn cmd_advtrain(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> HarnessResult<()> {
    let (train, test) = load_data(cfg)?;
    let a = &cfg.advtrain;
    let aux: Vec<&str> = a.auxiliary.iter().map(String::as_str).collect();
    let set = if aux.is_empty() {
        TaskCombinationSet::single(&a.main)
    } else {
        TaskCombinationSet::with_auxiliary(&a.main, &aux, a.lambda_a)
    };
    let mut scored = vec![a.main.as_str()];
    scored.extend(aux.iter().copied().filter(|t| *t != a.main));
    let idx = eval_indices(cfg, &test);
    let mut model = fresh_model(cfg, &train.params, cfg.seed)?;
    let mut metrics: Vec<Vec<f64>> = Vec::new();
    let mut checkpoints = Vec::new();
    let dir = rec.dir().to_path_buf();
    let history = adversarial_train_with(&mut model, &train, &set, &adv_train_config(cfg, cfg.seed)?, &mut |h, m| {
        let epoch = h.records.last().map_or(0, |r| r.epoch);
        let t = evaluate_under_attack(m, &test, &idx, &AttackObjective::SingleTask(a.main.clone()), &clean_config(), &scored)?;
        metrics.push(t.rows.iter().map(|r| r.clean).collect());
        let name = format!("checkpoints/epoch_{epoch:03}.mtck");
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(io_err)?;
        std::fs::write(dir.join(&name), encode_checkpoint(m)).map_err(io_err)?;
        checkpoints.push(name);
        info!("epoch {epoch}: {:?}", h.records.iter().filter(|r| r.epoch == epoch).map(|r| r.adv_loss).collect::<Vec<_>>());
        Ok(())
    })?;
    for c in &checkpoints {
        rec.track(c);
    }
    let mut header: Vec<String> = [
        "epoch",
        "subset_id",
        "clean_loss",
        "adv_loss",
        "attack_generations",
        "attack_gradient_passes",
        "optimizer_steps",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(scored.iter().map(|t| format!("clean_{t}")));
    let rows: Vec<Vec<String>> = history
        .records
        .iter()
        .map(|r| {
            let mut row = vec![
                r.epoch.to_string(),
                r.subset.to_string(),
                num(r.clean_loss),
                num(r.adv_loss),
                r.attack_generations.to_string(),
                r.attack_gradient_passes.to_string(),
                r.optimizer_steps.to_string(),
            ];
            row.extend(metrics[r.epoch].iter().map(|v| num(*v)));
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let text = csv_text(&header_refs, &rows)?;
    rec.write("history.csv", text.as_bytes())?;
    let t = Table::parse(&text)?;
    let subset = t.numbers("subset_id")?;
    let epochs = t.numbers("epoch")?;
    let adv = t.numbers("adv_loss")?;
    let series = (0..set.subsets.len())
        .map(|s| {
            let pts = epochs
                .iter()
                .zip(&adv)
                .zip(&subset)
                .filter(|(_, id)| **id == s as f64)
                .map(|((e, l), _)| (*e, *l))
                .collect();
            Series::new(&format!("subset {s}"), pts)
        })
        .collect();
    let plot = LinePlot {
        title: "adversarial training loss".into(),
        x_label: "epoch".into(),
        y_label: "adversarial loss".into(),
        log_x: false,
        series,
    };
    rec.write("history.svg", plot.render().as_bytes())?;
    rec.write("model.mtck", &encode_checkpoint(&model))?;

    let tables = robust_eval(
        &model,
        &test,
        &idx,
        &AttackObjective::SingleTask(a.main.clone()),
        &scored,
        a.eval_epsilon,
        cfg.seed,
    )?;
    let mut rows = Vec::new();
    for t in &tables {
        for r in &t.rows {
            rows.push(vec![t.attack.clone(), num(t.epsilon), r.task.clone(), r.metric.name().into(), num(r.clean), num(r.attacked)]);
        }
    }
    rec.write(
        "robust_eval.csv",
        csv_text(&["attack", "epsilon", "task", "metric", "clean", "attacked"], &rows)?.as_bytes(),
    )?;
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> HarnessResult<()> {
    let (train, test) = load_data(cfg)?;
    let result = attack_matrix(cfg, &train, &test)?;
    let mut base_rows = Vec::new();
    for (task, s) in &result.baselines {
        let (m, c, a) = s
            .as_ref()
            .map_or((String::new(), String::new(), String::new()), |s| (s.metric.name().into(), num(s.clean), num(s.attacked)));
        base_rows.push(vec![task.clone(), m, c, a]);
    }
    rec.write("baselines.csv", csv_text(&["task", "metric", "clean", "attacked"], &base_rows)?.as_bytes())?;
    let mut trial_rows = Vec::new();
    let mut rows = Vec::new();
    for c in &result.cells {
        for (i, (l, s)) in c.trials.iter().enumerate() {
            let (cl, at) = s.as_ref().map_or((String::new(), String::new()), |s| (num(s.clean), num(s.attacked)));
            trial_rows.push(vec![c.main.clone(), c.auxiliary.clone(), num(*l), cl, at, (c.chosen == Some(i)).to_string()]);
        }
        let (lambda, clean, attacked) = c
            .chosen_score()
            .map_or((String::new(), String::new(), String::new()), |(l, s)| (num(l), num(s.clean), num(s.attacked)));
        rows.push(vec![
            c.main.clone(),
            c.auxiliary.clone(),
            lambda,
            clean,
            attacked,
            result.attacked_improvement(c).map_or(String::new(), num),
            result.clean_change(c).map_or(String::new(), num),
        ]);
    }
    rec.write(
        "trials.csv",
        csv_text(&["main", "auxiliary", "lambda", "clean", "attacked", "chosen"], &trial_rows)?.as_bytes(),
    )?;
    let header = ["main", "auxiliary", "lambda", "clean", "attacked", "attacked_improvement", "clean_change"];
    let text = csv_text(&header, &rows)?;
    rec.write("matrix.csv", text.as_bytes())?;

    let t = Table::parse(&text)?;
    let (mains, auxs) = (t.strings("main")?, t.strings("auxiliary")?);
    let imp = t.strings("attacked_improvement")?;
    let values: Vec<Vec<Option<f64>>> = result
        .tasks
        .iter()
        .map(|m| {
            result
                .tasks
                .iter()
                .map(|a| {
                    (0..mains.len())
                        .find(|&i| mains[i] == *m && auxs[i] == *a)
                        .and_then(|i| imp[i].parse::<f64>().ok())
                })
                .collect()
        })
        .collect();
    let svg = heatmap("attacked main-task improvement over single-task", &result.tasks, &result.tasks, &values);
    rec.write("matrix.svg", svg.as_bytes())?;

    let (improved, scored) = result.improved_fraction();
    let summary = csv_text(
        &["improved_pairs", "scored_pairs", "improved_fraction", "mean_clean_change"],
        &[vec![
            improved.to_string(),
            scored.to_string(),
            num(improved as f64 / scored.max(1) as f64),
            num(result.mean_clean_change()),
        ]],
    )?;
    rec.write("summary.csv", summary.as_bytes())?;
    info!("{improved}/{scored} pairs improve the attacked main-task metric");
    Ok(())
}

fn report(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> HarnessResult<()> {
    if cfg.report.inputs.is_empty() {
        return Err(HarnessError::Config("report.inputs is empty".into()));
    }
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for dir in &cfg.report.inputs {
        let m = read_manifest(dir)?;
        let mismatched = verify_manifest(dir, &m);
        if !mismatched.is_empty() {
            warn!("{}: digest mismatch for {}", dir.display(), mismatched.join(", "));
            bad.extend(mismatched.iter().map(|p| format!("{}/{p}", dir.display())));
        }
        rows.push(vec![
            dir.display().to_string(),
            m.command,
            m.seed.to_string(),
            m.tool_version,
            num(m.wall_clock_secs),
            m.outputs.len().to_string(),
            mismatched.join(";"),
        ]);
    }
    let header = ["run_dir", "command", "seed", "tool_version", "wall_clock_secs", "outputs", "mismatched"];
    rec.write("report.csv", csv_text(&header, &rows)?.as_bytes())?;
    if bad.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Other(anyhow::anyhow!("digest mismatch: {}", bad.join(", "))))
    }
}

/// Output directory: `--out`, then the config's `output_dir`, then `runs/<command>`.
pub fn output_dir(cli: Option<&Path>, cfg: &ExperimentConfig, kind: ExperimentKind) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(kind.as_str()))
}
