use crate::error::{Error, Result};
use crate::graph::{DropoutPlan, RatingGraph};
use crate::tensor::{NumArray, Tape, Var};

use super::{HyperParams, ModelParams, ParamVars};

/// Encoder outputs recorded on a tape.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final node representations, `n_nodes x d_dec`.
    pub nodes: Var,
    /// Per-level accumulated representations, each `n_nodes x D`.
    pub per_level: Vec<Var>,
}

/// Detached encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub nodes: NumArray,
    pub per_level: Vec<NumArray>,
}

/// Records the encoder on `tape`.
///
/// For every level `t`: `x⁰ = [identical | role | latent_t]`,
/// `x¹ = P_t x⁰`, `x^{l+1} = P_t relu(x^l)`, and
/// `h_t = Σ_{l=0..L} x^l / (l + 1)`. Then `n = tanh(W Σ_t h_t)`.
/// Layer `l` (0-based) of propagation uses the sender scales of
/// `dropout` layer `l` when a plan is given.
pub fn encode_on_tape<'a>(
    tape: &mut Tape<'a>,
    graph: &'a RatingGraph,
    vars: &ParamVars,
    layers: usize,
    dropout: Option<&'a DropoutPlan>,
) -> Result<Encoded> {
    let n = graph.n_nodes();
    if vars.latent.len() != graph.n_levels() {
        return Err(Error::shape(
            "encode",
            format!(
                "{} latent tables for {} rating levels",
                vars.latent.len(),
                graph.n_levels()
            ),
        ));
    }
    if tape.value(vars.latent[0]).rows() != n {
        return Err(Error::shape(
            "encode",
            format!(
                "latent tables have {} rows, graph has {n} nodes",
                tape.value(vars.latent[0]).rows()
            ),
        ));
    }
    if let Some(plan) = dropout {
        if plan.n_layers() < layers {
            return Err(Error::shape(
                "encode",
                format!("dropout plan has {} layers, need {layers}", plan.n_layers()),
            ));
        }
    }
    let shared = tape.gather(vars.identical, &vec![0; n])?;
    let roles: Vec<usize> = (0..n).map(|v| usize::from(!graph.is_user_node(v))).collect();
    let role = tape.gather(vars.role, &roles)?;

    let mut per_level = Vec::with_capacity(graph.n_levels());
    for (t, &latent) in vars.latent.iter().enumerate() {
        let x0 = tape.concat_cols(&[shared, role, latent])?;
        let mut terms = vec![(1.0, x0)];
        let mut x = x0;
        for l in 0..layers {
            let input = if l == 0 { x } else { tape.relu(x) };
            let scale = dropout.map(|p| p.sender_scale(l));
            x = tape.spmm(graph, t, input, scale)?;
            terms.push((1.0 / (l + 2) as f64, x));
        }
        per_level.push(tape.scale_add(&terms)?);
    }
    let level_sum: Vec<(f64, Var)> = per_level.iter().map(|&h| (1.0, h)).collect();
    let h = tape.scale_add(&level_sum)?;
    let pre = tape.linear(h, vars.encoder)?;
    let nodes = tape.tanh(pre);
    Ok(Encoded { nodes, per_level })
}

/// Runs the encoder and returns detached values.
pub fn encode(
    graph: &RatingGraph,
    params: &ModelParams,
    hp: &HyperParams,
    dropout: Option<&DropoutPlan>,
) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let enc = encode_on_tape(&mut tape, graph, &vars, hp.layers, dropout)?;
    Ok(EncoderOutput {
        nodes: tape.value(enc.nodes).clone(),
        per_level: enc.per_level.iter().map(|&h| tape.value(h).clone()).collect(),
    })
}
