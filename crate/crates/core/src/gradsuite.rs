//! Finite-difference verification of every tape primitive and of the full
//! training loss on small seeded instances.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{build_dataset, RatingDataset, RawRating};
use crate::error::Result;
use crate::graph::{build_graph, sample_dropout, DropoutConfig, RatingGraph};
use crate::model::{
    decode_on_tape, encode_on_tape, init_params, total_loss, HyperParams, ModelParams, ParamVars,
};
use crate::tensor::gradcheck::{compare, numeric_gradient};
use crate::tensor::{NumArray, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteOptions {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Analytic gradients are multiplied by `1 + corrupt_analytic` before
    /// comparison. Non-zero only to exercise the failure path.
    pub corrupt_analytic: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            step: 1e-4,
            tolerance: 1e-4,
            corrupt_analytic: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    /// Worst relative error over the case's parameters.
    pub rel_error: f64,
    pub passed: bool,
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> NumArray {
    let d = Uniform::new(lo, hi);
    NumArray::from_vec(rows, cols, (0..rows * cols).map(|_| d.sample(rng)).collect())
        .expect("sized by construction")
}

/// Values bounded away from zero with mixed signs, so ReLU kinks are not
/// crossed by the finite-difference probe.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> NumArray {
    let mut x = random(rng, rows, cols, 0.1, 1.0);
    for (k, v) in x.as_mut_slice().iter_mut().enumerate() {
        if k % 3 == 1 {
            *v = -*v;
        }
    }
    x
}

/// Runs `build` on a fresh tape with `params` registered as parameters
/// `0..params.len()` and compares backward against central differences.
pub fn check_case<'g>(
    name: &str,
    params: &[NumArray],
    opts: &SuiteOptions,
    build: impl Fn(&mut Tape<'g>, &[Var]) -> Result<Var>,
) -> Result<CaseResult> {
    let forward = |values: &[NumArray]| -> Result<(Tape<'g>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .enumerate()
            .map(|(k, v)| tape.param(k, v.clone()))
            .collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, loss))
    };
    let (tape, loss) = forward(params)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut passed = true;
    for (k, p) in params.iter().enumerate() {
        let mut analytic = grads
            .get(k)
            .cloned()
            .unwrap_or_else(|| NumArray::zeros(p.rows(), p.cols()));
        if opts.corrupt_analytic != 0.0 {
            analytic = analytic.map(|v| v * (1.0 + opts.corrupt_analytic));
        }
        let mut failure = None;
        let numeric = numeric_gradient(p, opts.step, |probe| {
            let mut values = params.to_vec();
            values[k] = probe.clone();
            match forward(&values) {
                Ok((t, l)) => t.value(l).as_slice()[0],
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let r = compare(name, &analytic, &numeric, opts.tolerance);
        worst = worst.max(r.rel_error);
        passed &= r.passed;
    }
    Ok(CaseResult {
        name: name.to_owned(),
        rel_error: worst,
        passed,
    })
}

/// Reduces any array to a scalar with non-uniform sensitivities:
/// `Σ tanh(x · Rᵀ)` for a fixed random `R`.
fn readout(tape: &mut Tape<'_>, x: Var, mix: &NumArray) -> Result<Var> {
    let r = tape.constant(mix.clone());
    let y = tape.linear(x, r)?;
    let t = tape.tanh(y);
    Ok(tape.sum(t))
}

/// Three users, three items and ratings 1..3: six nodes, T = 3.
pub fn toy_dataset() -> RatingDataset {
    let rows = [
        ("u0", "i0", 1.0),
        ("u0", "i1", 3.0),
        ("u1", "i0", 2.0),
        ("u1", "i2", 3.0),
        ("u2", "i1", 2.0),
        ("u2", "i2", 1.0),
        ("u2", "i0", 3.0),
    ];
    let raws: Vec<RawRating> = rows
        .iter()
        .map(|&(u, i, r)| RawRating {
            user: u.into(),
            item: i.into(),
            rating: r,
            timestamp: None,
        })
        .collect();
    build_dataset(&raws).expect("non-empty")
}

/// Hyperparameters of the toy instance: D = 2 + 2 + 2 = 6.
pub fn toy_hyper(seed: u64) -> HyperParams {
    HyperParams {
        layers: 2,
        dim_id: 2,
        dim_role: 2,
        dim_lat: 2,
        dim_dec: 3,
        p0: 0.3,
        theta: 0.1,
        lambda: 0.5,
        lr: 0.01,
        epochs: 1,
        seed,
        features: Default::default(),
    }
}

/// Records the full training objective for `params` on `graph`.
pub fn record_training_loss<'g>(
    tape: &mut Tape<'g>,
    vars: &ParamVars,
    graph: &'g RatingGraph,
    train: &RatingDataset,
    hp: &HyperParams,
    plan: Option<&'g crate::graph::DropoutPlan>,
) -> Result<Var> {
    let enc = encode_on_tape(tape, graph, vars, hp.layers, plan)?;
    let users: Vec<usize> = train.triples.iter().map(|t| t.user).collect();
    let items: Vec<usize> = train.triples.iter().map(|t| graph.item_node(t.item)).collect();
    let targets: Vec<usize> = train.triples.iter().map(|t| t.level).collect();
    let logits = decode_on_tape(tape, enc.nodes, &vars.decoder, &users, &items)?;
    Ok(total_loss(tape, logits, &targets, &enc.per_level, hp.lambda)?.total)
}

/// Checks every primitive and the end-to-end loss. One result per case.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ds = toy_dataset();
    let graph = build_graph(&ds);
    let n = graph.n_nodes();
    let d = 6;
    let mix = random(&mut rng, 4, d, -1.0, 1.0);
    let mix_of = |rng: &mut ChaCha8Rng, cols: usize| random(rng, 3, cols, -1.0, 1.0);
    let plan = sample_dropout(
        &DropoutConfig {
            p0: 0.4,
            theta: 0.0,
            layers: 1,
        },
        n,
        opts.seed.wrapping_add(17),
    )?;
    let mut out = Vec::new();

    let table = random(&mut rng, 3, 2, -1.0, 1.0);
    let m2 = mix_of(&mut rng, 2);
    out.push(check_case("gather", &[table], opts, |t, v| {
        let g = t.gather(v[0], &[2, 0, 2])?;
        readout(t, g, &m2)
    })?);

    let parts = [
        random(&mut rng, 4, 1, -1.0, 1.0),
        random(&mut rng, 4, 2, -1.0, 1.0),
        random(&mut rng, 4, 3, -1.0, 1.0),
    ];
    out.push(check_case("concat_cols", &parts, opts, |t, v| {
        let c = t.concat_cols(&[v[0], v[1], v[2]])?;
        readout(t, c, &mix)
    })?);

    let x = random(&mut rng, n, d, -1.0, 1.0);
    out.push(check_case("spmm", &[x.clone()], opts, |t, v| {
        let a = t.spmm(&graph, 0, v[0], None)?;
        let b = t.spmm(&graph, 2, v[0], Some(plan.sender_scale(0)))?;
        let s = t.scale_add(&[(1.0, a), (0.5, b)])?;
        readout(t, s, &mix)
    })?);

    let xr = away_from_zero(&mut rng, n, d);
    out.push(check_case("relu", &[xr], opts, |t, v| {
        let r = t.relu(v[0]);
        readout(t, r, &mix)
    })?);

    out.push(check_case("tanh", &[x.clone()], opts, |t, v| {
        let r = t.tanh(v[0]);
        readout(t, r, &mix)
    })?);

    let w = random(&mut rng, 4, d, -1.0, 1.0);
    let m4 = mix_of(&mut rng, 4);
    out.push(check_case("linear", &[x.clone(), w], opts, |t, v| {
        let y = t.linear(v[0], v[1])?;
        readout(t, y, &m4)
    })?);

    let y = random(&mut rng, n, d, -1.0, 1.0);
    out.push(check_case("scale_add", &[x.clone(), y.clone()], opts, |t, v| {
        let s = t.scale_add(&[(0.3, v[0]), (-1.7, v[1]), (2.0, v[0])])?;
        readout(t, s, &mix)
    })?);

    let nodes = random(&mut rng, n, 3, -1.0, 1.0);
    let ws: Vec<NumArray> = (0..3).map(|_| random(&mut rng, 3, 3, -1.0, 1.0)).collect();
    let m3 = mix_of(&mut rng, 3);
    let mut bil_params = vec![nodes];
    bil_params.extend(ws);
    out.push(check_case("bilinear", &bil_params, opts, |t, v| {
        let e = t.bilinear(v[0], &v[1..], &[0, 1, 2, 0], &[3, 4, 5, 5])?;
        readout(t, e, &m3)
    })?);

    let logits = random(&mut rng, 4, 3, -2.0, 2.0);
    out.push(check_case("softmax_rows", &[logits.clone()], opts, |t, v| {
        let s = t.softmax_rows(v[0]);
        readout(t, s, &m3)
    })?);

    out.push(check_case("cross_entropy_rows", &[logits], opts, |t, v| {
        t.cross_entropy_rows(v[0], &[0, 2, 1, 2])
    })?);

    // Zero rows are excluded: cosine is discontinuous there and the
    // zero-gradient convention is checked exactly elsewhere.
    let a = random(&mut rng, n, d, -1.0, 1.0);
    let m1 = mix_of(&mut rng, 1);
    out.push(check_case("cosine_rows", &[a, y], opts, |t, v| {
        let c = t.cosine_rows(v[0], v[1])?;
        readout(t, c, &m1)
    })?);

    out.push(check_case("sum", &[x], opts, |t, v| {
        let s = t.sum(v[0]);
        let sq = t.tanh(s);
        Ok(t.sum(sq))
    })?);

    let hp = toy_hyper(opts.seed);
    let params = init_params(&hp, ds.n_users, ds.n_items, ds.n_levels())?;
    let model_plan = sample_dropout(&hp.dropout(), n, opts.seed.wrapping_add(29))?;
    out.push(end_to_end(&params, &graph, &ds, &hp, &model_plan, opts)?);
    Ok(out)
}

/// Gradient check of `ce + λ·nrr` with respect to every model parameter.
pub fn end_to_end(
    params: &ModelParams,
    graph: &RatingGraph,
    train: &RatingDataset,
    hp: &HyperParams,
    plan: &crate::graph::DropoutPlan,
    opts: &SuiteOptions,
) -> Result<CaseResult> {
    let values: Vec<NumArray> = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let n_levels = params.n_levels();
    check_case("end_to_end_total_loss", &values, opts, |t, v| {
        let vars = ParamVars::from_slice(v, n_levels);
        record_training_loss(t, &vars, graph, train, hp, Some(plan))
    })
}
