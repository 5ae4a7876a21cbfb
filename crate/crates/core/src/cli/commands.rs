use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};

use crate::data::{
    align_test, build_dataset, node_holdout, parse_movielens, random_holdout, subsample,
    RatingDataset,
};
use crate::graph::build_graph;
use crate::gradsuite::{run_suite, CaseResult, SuiteOptions};
use crate::heuristics::{analyze, HeuristicReport};
use crate::model::{evaluate_with_imputation, fit_with_progress, FitOutcome, HyperParams, ModelParams};
use crate::tensor::checkpoint::Checkpoint;

use super::{RunConfig, SplitArg};

/// Training and test sides over one shared ID space.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: RatingDataset,
    pub test: Option<RatingDataset>,
}

/// Reads the configured files and applies the configured split.
pub fn load_split(cfg: &RunConfig) -> anyhow::Result<DataSplit> {
    let train_path = cfg.train.as_ref().context("--train is required")?;
    let raw = parse_movielens(train_path, &cfg.delimiter)?;
    let full = build_dataset(&raw)?;
    match cfg.split {
        SplitArg::Files => {
            let test = match &cfg.test {
                Some(p) => {
                    let raw_test = parse_movielens(p, &cfg.delimiter)?;
                    Some(align_test(&raw_test, &full).dataset)
                }
                None => None,
            };
            Ok(DataSplit { train: full, test })
        }
        SplitArg::Random => {
            let (train, test) = random_holdout(&full, cfg.split_fraction, cfg.split_seed)?;
            Ok(DataSplit {
                train,
                test: Some(test),
            })
        }
        SplitArg::Node => {
            let (train, test) = node_holdout(&full, cfg.split_fraction, cfg.split_seed)?;
            Ok(DataSplit {
                train,
                test: Some(test),
            })
        }
    }
}

fn write_outputs(cfg: &RunConfig, out: &Path, csv: &str, txt: &str) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("report.csv"), csv)?;
    fs::write(out.join("report.txt"), txt)?;
    fs::write(out.join("config.resolved"), cfg.resolved_toml()?)?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn test_side(split: &DataSplit) -> anyhow::Result<&RatingDataset> {
    split
        .test
        .as_ref()
        .context("this command needs a test side (--test or a holdout split)")
}

pub fn cmd_analyze(cfg: &RunConfig) -> anyhow::Result<HeuristicReport> {
    let split = load_split(cfg)?;
    let report = analyze(&split.train);
    let mut csv = String::from("metric,value,coverage,n_defined\n");
    writeln!(csv, "density,{},,", report.density)?;
    let mut txt = format!(
        "ratings: {}\nusers: {}\nitems: {}\ndensity: {:.6}\n\nleave-one-out PCC with the true rating\n",
        report.n_pairs, split.train.n_users, split.train.n_items, report.density
    );
    for (name, s) in report.rows() {
        writeln!(csv, "{name},{},{},{}", opt(s.pcc), s.coverage, s.n_defined)?;
        let pcc = s.pcc.map_or("undefined".to_owned(), |p| format!("{p:.4}"));
        writeln!(txt, "{name}: {pcc} (coverage {:.4})", s.coverage)?;
    }
    write_outputs(cfg, &cfg.out, &csv, &txt)?;
    eprint!("{txt}");
    Ok(report)
}

fn train_one(
    train: &RatingDataset,
    test: &RatingDataset,
    hp: &HyperParams,
    label: &str,
) -> anyhow::Result<FitOutcome> {
    let outcome = fit_with_progress(train, hp, Some(test), |r| {
        if r.epoch % 50 == 0 || r.epoch == hp.epochs {
            eprintln!(
                "[{label}] epoch {:>5} loss {:.5} test rmse {}",
                r.epoch,
                r.train_loss,
                r.test_rmse.map_or("-".into(), |x| format!("{x:.5}"))
            );
        }
    })?;
    Ok(outcome)
}

fn epoch_csv(outcome: &FitOutcome) -> anyhow::Result<String> {
    let mut csv = String::from("epoch,train_loss,ce,nrr,test_rmse\n");
    for e in &outcome.report.epochs {
        writeln!(
            csv,
            "{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            e.ce,
            e.nrr,
            opt(e.test_rmse)
        )?;
    }
    Ok(csv)
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<FitOutcome> {
    let split = load_split(cfg)?;
    let test = test_side(&split)?;
    let hp = &cfg.hyper;
    let outcome = train_one(&split.train, test, hp, "train")?;
    let csv = epoch_csv(&outcome)?;
    let r = &outcome.report;
    let mut txt = format!(
        "train ratings: {}\ntest ratings: {}\nepochs: {}\ndropout schedule: {:?}\n",
        split.train.len(),
        test.len(),
        hp.epochs,
        r.dropout_schedule
    );
    match (r.best_epoch, r.best_test_rmse) {
        (Some(e), Some(x)) => writeln!(txt, "best test rmse: {x:.6} at epoch {e}")?,
        _ => writeln!(txt, "best test rmse: none (no epochs run)")?,
    }
    write_outputs(cfg, &cfg.out, &csv, &txt)?;
    outcome
        .params
        .to_checkpoint(hp, &split.train.levels)
        .save(cfg.out.join("ckpt.bin"))?;
    eprint!("{txt}");
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub rmse: f64,
    pub n_test: usize,
}

pub fn cmd_eval(cfg: &RunConfig) -> anyhow::Result<EvalRecord> {
    let split = load_split(cfg)?;
    let test = test_side(&split)?;
    let ck_path = cfg.checkpoint_path();
    let ck = Checkpoint::load(&ck_path)?;
    let (params, levels, layers) = ModelParams::from_checkpoint(&ck)?;
    if levels != split.train.levels {
        bail!(
            "checkpoint rating levels {:?} differ from the data's {:?}",
            levels,
            split.train.levels
        );
    }
    let layout = split.train.widened(test.n_users, test.n_items);
    if params.n_users > layout.n_users || params.n_items > layout.n_items {
        bail!(
            "checkpoint covers {} users and {} items but the data has {} and {}",
            params.n_users,
            params.n_items,
            layout.n_users,
            layout.n_items
        );
    }
    let params = params.resize_nodes(layout.n_users, layout.n_items)?;
    let graph = build_graph(&layout);
    let rmse = evaluate_with_imputation(&params, &graph, test, layers)?;
    let record = EvalRecord {
        rmse,
        n_test: test.len(),
    };
    let csv = format!("metric,value\nrmse,{rmse}\nn_test,{}\n", record.n_test);
    let txt = format!(
        "checkpoint: {}\ntest ratings: {}\nrmse: {rmse:.6}\n",
        ck_path.display(),
        record.n_test
    );
    write_outputs(cfg, &cfg.out, &csv, &txt)?;
    eprint!("{txt}");
    Ok(record)
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// Value of the varied factor, as written to the table.
    pub setting: f64,
    pub n_train: usize,
    pub best_rmse: f64,
    pub best_epoch: usize,
}

fn ablation_row(
    cfg: &RunConfig,
    sub: &str,
    setting: f64,
    train: &RatingDataset,
    test: &RatingDataset,
    hp: &HyperParams,
) -> anyhow::Result<AblationRow> {
    let outcome = train_one(train, test, hp, sub)?;
    write_outputs(cfg, &cfg.out.join(sub), &epoch_csv(&outcome)?, "")?;
    let r = &outcome.report;
    match (r.best_test_rmse, r.best_epoch) {
        (Some(best_rmse), Some(best_epoch)) => Ok(AblationRow {
            setting,
            n_train: train.len(),
            best_rmse,
            best_epoch,
        }),
        _ => bail!("ablations need at least one epoch"),
    }
}

fn ablation_table(header: &str, rows: &[AblationRow]) -> anyhow::Result<(String, String)> {
    let mut csv = format!("{header},n_train,best_rmse,best_epoch\n");
    let mut txt = String::new();
    for r in rows {
        writeln!(csv, "{},{},{},{}", r.setting, r.n_train, r.best_rmse, r.best_epoch)?;
        writeln!(
            txt,
            "{header} {:<6} n_train {:>6}  rmse {:.5}  (epoch {})",
            r.setting, r.n_train, r.best_rmse, r.best_epoch
        )?;
    }
    Ok((csv, txt))
}

pub fn cmd_ablate_sparsity(cfg: &RunConfig) -> anyhow::Result<Vec<AblationRow>> {
    let split = load_split(cfg)?;
    let test = test_side(&split)?;
    let mut rows = Vec::with_capacity(cfg.ratios.len());
    for &ratio in &cfg.ratios {
        let train = subsample(&split.train, ratio, cfg.split_seed)?;
        let sub = format!("ratio-{ratio}");
        rows.push(ablation_row(cfg, &sub, ratio, &train, test, &cfg.hyper)?);
    }
    let (csv, txt) = ablation_table("ratio", &rows)?;
    write_outputs(cfg, &cfg.out, &csv, &txt)?;
    eprint!("{txt}");
    Ok(rows)
}

pub fn cmd_ablate_layers(cfg: &RunConfig) -> anyhow::Result<Vec<AblationRow>> {
    let split = load_split(cfg)?;
    let test = test_side(&split)?;
    let mut rows = Vec::with_capacity(5);
    for layers in 1..=5 {
        let hp = HyperParams {
            layers,
            ..cfg.hyper
        };
        let sub = format!("layers-{layers}");
        rows.push(ablation_row(cfg, &sub, layers as f64, &split.train, test, &hp)?);
    }
    let (csv, txt) = ablation_table("layers", &rows)?;
    write_outputs(cfg, &cfg.out, &csv, &txt)?;
    eprint!("{txt}");
    Ok(rows)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> anyhow::Result<Vec<CaseResult>> {
    let opts = SuiteOptions {
        seed: cfg.hyper.seed,
        ..Default::default()
    };
    let results = run_suite(&opts)?;
    let mut csv = String::from("check,rel_error,passed\n");
    let mut txt = format!(
        "central differences, step {:e}, tolerance {:e}\n",
        opts.step, opts.tolerance
    );
    for r in &results {
        writeln!(csv, "{},{:e},{}", r.name, r.rel_error, r.passed)?;
        let verdict = if r.passed { "ok" } else { "FAILED" };
        writeln!(txt, "{:<24} {:.3e}  {verdict}", r.name, r.rel_error)?;
    }
    write_outputs(cfg, &cfg.out, &csv, &txt)?;
    eprint!("{txt}");
    Ok(results)
}
