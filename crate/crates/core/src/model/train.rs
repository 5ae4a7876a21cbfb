use serde::Serialize;

use crate::data::RatingDataset;
use crate::error::{Error, Result};
use crate::graph::{build_graph, epoch_seed, sample_dropout, RatingGraph};
use crate::tensor::{adam_step, softmax, AdamConfig, AdamState, Tape};

use super::decoder::{decode_on_tape, expected_rating};
use super::encoder::encode_on_tape;
use super::inductive::impute_unseen;
use super::loss::total_loss;
use super::{init_params, HyperParams, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    pub nrr: f64,
    pub test_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub hyper: HyperParams,
    pub dropout_schedule: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept, when a test set was given.
    pub best_epoch: Option<usize>,
    pub best_test_rmse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Best-test parameters when a test set was given, else the final ones.
    pub params: ModelParams,
    pub report: TrainReport,
    /// The training graph over the (possibly widened) node space.
    pub graph: RatingGraph,
}

/// RMSE of the expected rating over `test` triples; dropout is off and
/// `params` must already cover every test node (see [`impute_unseen`]).
pub fn evaluate_rmse(
    params: &ModelParams,
    graph: &RatingGraph,
    test: &RatingDataset,
    layers: usize,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set has no ratings"));
    }
    if test.n_users > graph.n_users || test.n_items > graph.n_items {
        return Err(Error::shape(
            "evaluate_rmse",
            format!(
                "test covers {}+{} nodes, graph {}+{}",
                test.n_users, test.n_items, graph.n_users, graph.n_items
            ),
        ));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let enc = encode_on_tape(&mut tape, graph, &vars, layers, None)?;
    let users: Vec<usize> = test.triples.iter().map(|t| t.user).collect();
    let items: Vec<usize> = test.triples.iter().map(|t| graph.item_node(t.item)).collect();
    let logits = decode_on_tape(&mut tape, enc.nodes, &vars.decoder, &users, &items)?;
    let probs = softmax(tape.value(logits));
    let sq: f64 = test
        .triples
        .iter()
        .enumerate()
        .map(|(k, t)| (expected_rating(probs.row(k), &test.levels) - t.rating).powi(2))
        .sum();
    Ok((sq / test.len() as f64).sqrt())
}

/// Imputes nodes without training edges, then evaluates.
pub fn evaluate_with_imputation(
    params: &ModelParams,
    graph: &RatingGraph,
    test: &RatingDataset,
    layers: usize,
) -> Result<f64> {
    let filled = impute_unseen(params, &graph.seen_nodes())?;
    evaluate_rmse(&filled, graph, test, layers)
}

/// Full-batch training with Adam. Every epoch resamples dropout masks,
/// encodes, decodes all training pairs and takes one optimizer step.
///
/// With a test set, the node space is widened to cover it, test RMSE is
/// recorded per epoch and the best-RMSE parameters are returned.
pub fn fit(
    train: &RatingDataset,
    hp: &HyperParams,
    test: Option<&RatingDataset>,
) -> Result<FitOutcome> {
    fit_with_progress(train, hp, test, |_| {})
}

/// [`fit`] with a callback invoked after every epoch.
pub fn fit_with_progress(
    train: &RatingDataset,
    hp: &HyperParams,
    test: Option<&RatingDataset>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set has no ratings"));
    }
    let layout = match test {
        Some(t) => train.widened(t.n_users, t.n_items),
        None => train.clone(),
    };
    let graph = build_graph(&layout);
    let mut params = init_params(hp, layout.n_users, layout.n_items, layout.n_levels())?;
    let mut adam = AdamState::new(
        AdamConfig::with_lr(hp.lr),
        params.tensors().into_iter().map(|(_, t)| t),
    );
    let users: Vec<usize> = layout.triples.iter().map(|t| t.user).collect();
    let items: Vec<usize> = layout.triples.iter().map(|t| graph.item_node(t.item)).collect();
    let targets: Vec<usize> = layout.triples.iter().map(|t| t.level).collect();
    let dropout_cfg = hp.dropout();
    let n_tensors = params.tensors().len();

    let mut report = TrainReport {
        hyper: *hp,
        dropout_schedule: dropout_cfg.probabilities(),
        epochs: Vec::with_capacity(hp.epochs),
        best_epoch: None,
        best_test_rmse: None,
    };
    let mut best: Option<ModelParams> = None;

    for epoch in 1..=hp.epochs {
        let plan = sample_dropout(&dropout_cfg, graph.n_nodes(), epoch_seed(hp.seed, epoch))?;
        let (loss, ce, nrr, grads) = {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let enc = encode_on_tape(&mut tape, &graph, &vars, hp.layers, Some(&plan))?;
            let logits = decode_on_tape(&mut tape, enc.nodes, &vars.decoder, &users, &items)?;
            let parts = total_loss(&mut tape, logits, &targets, &enc.per_level, hp.lambda)?;
            let scalar = |v| tape.value(v).as_slice()[0];
            let (loss, ce, nrr) = (scalar(parts.total), scalar(parts.ce), scalar(parts.nrr));
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            (loss, ce, nrr, tape.backward(parts.total)?)
        };
        let grad_refs: Vec<_> = (0..n_tensors).map(|k| grads.get(k)).collect();
        adam_step(&mut params.tensors_mut(), &grad_refs, &mut adam)?;
        if !params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }

        let test_rmse = match test {
            Some(t) => Some(evaluate_with_imputation(&params, &graph, t, hp.layers)?),
            None => None,
        };
        if let Some(r) = test_rmse {
            if report.best_test_rmse.map_or(true, |b| r < b) {
                report.best_test_rmse = Some(r);
                report.best_epoch = Some(epoch);
                best = Some(params.clone());
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss,
            ce,
            nrr,
            test_rmse,
        };
        on_epoch(&record);
        report.epochs.push(record);
    }

    Ok(FitOutcome {
        params: best.unwrap_or(params),
        report,
        graph,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, RawRating};
    use crate::gradsuite::toy_dataset;
    use crate::model::encode;
    use crate::tensor::{cosine, NumArray};

    fn dataset(rows: &[(&str, &str, f64)]) -> RatingDataset {
        let raws: Vec<RawRating> = rows
            .iter()
            .map(|&(u, i, r)| RawRating {
                user: u.into(),
                item: i.into(),
                rating: r,
                timestamp: None,
            })
            .collect();
        build_dataset(&raws).unwrap()
    }

    fn small(epochs: usize) -> HyperParams {
        HyperParams {
            dim_id: 4,
            dim_role: 4,
            dim_lat: 4,
            dim_dec: 4,
            epochs,
            ..Default::default()
        }
    }

    #[test]
    fn single_rating_is_memorized() {
        let ds = dataset(&[("u", "i", 4.0)]);
        let out = fit(&ds, &small(200), Some(&ds)).unwrap();
        let last = out.report.epochs.last().unwrap();
        assert!(last.ce < 0.01);
        assert!(evaluate_rmse(&out.params, &out.graph, &ds, 2).unwrap() < 0.1);
    }

    #[test]
    fn several_levels_are_memorized() {
        let ds = dataset(&[("a", "x", 1.0), ("a", "y", 3.0), ("b", "x", 5.0), ("b", "y", 2.0)]);
        let hp = HyperParams {
            p0: 0.0,
            theta: 0.0,
            lambda: 0.0,
            lr: 0.05,
            ..small(300)
        };
        let out = fit(&ds, &hp, None).unwrap();
        assert!(out.report.epochs.last().unwrap().ce < 0.05);
        assert!(evaluate_rmse(&out.params, &out.graph, &ds, 2).unwrap() < 0.1);
    }

    #[test]
    fn huge_lambda_aligns_adjacent_levels() {
        let ds = toy_dataset();
        let hp = HyperParams {
            lambda: 400.0,
            ..small(200)
        };
        let out = fit(&ds, &hp, None).unwrap();
        let enc = encode(&out.graph, &out.params, &hp, None).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for pair in enc.per_level.windows(2) {
            for v in 0..out.graph.n_nodes() {
                total += cosine(pair[0].row(v), pair[1].row(v));
                count += 1;
            }
        }
        assert!(total / count as f64 > 0.9, "mean cos {}", total / count as f64);
    }

    #[test]
    fn same_seed_same_run() {
        let ds = toy_dataset();
        let a = fit(&ds, &small(15), Some(&ds)).unwrap();
        let b = fit(&ds, &small(15), Some(&ds)).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.params, b.params);
        let c = fit(&ds, &HyperParams { seed: 1, ..small(15) }, Some(&ds)).unwrap();
        assert_ne!(a.report, c.report);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let ds = toy_dataset();
        let hp = small(0);
        let out = fit(&ds, &hp, Some(&ds)).unwrap();
        assert!(out.report.epochs.is_empty());
        assert_eq!(out.report.best_epoch, None);
        let init = crate::model::init_params(&hp, ds.n_users, ds.n_items, ds.n_levels()).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn constant_predictor_rmse() {
        let ds = toy_dataset();
        let hp = small(0);
        let mut p = crate::model::init_params(&hp, ds.n_users, ds.n_items, ds.n_levels()).unwrap();
        for w in &mut p.decoder {
            *w = NumArray::zeros(4, 4);
        }
        let g = crate::graph::build_graph(&ds);
        let mean: f64 = ds.levels.iter().sum::<f64>() / ds.levels.len() as f64;
        let want = (ds.triples.iter().map(|t| (t.rating - mean).powi(2)).sum::<f64>()
            / ds.len() as f64)
            .sqrt();
        let got = evaluate_rmse(&p, &g, &ds, 2).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(evaluate_rmse(&p, &g, &ds.with_triples(vec![]), 2).is_err());
    }

    #[test]
    fn loss_is_recorded_per_epoch() {
        let ds = toy_dataset();
        let out = fit(&ds, &small(5), None).unwrap();
        assert_eq!(out.report.epochs.len(), 5);
        assert_eq!(out.report.dropout_schedule, vec![0.2, 0.1]);
        for e in &out.report.epochs {
            assert!((e.train_loss - (e.ce + 4e-3 * e.nrr)).abs() < 1e-12);
            assert!(e.test_rmse.is_none());
        }
    }
}
