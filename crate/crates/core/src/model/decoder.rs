use crate::error::{Error, Result};
use crate::tensor::{softmax, NumArray, Tape, Var};

use super::ModelParams;

/// Decoder output for one (user, item) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkPrediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub rating: f64,
}

/// Bilinear per-level logits for `(user node, item node)` pairs.
pub fn decode_on_tape(
    tape: &mut Tape<'_>,
    nodes: Var,
    decoder: &[Var],
    users: &[usize],
    items: &[usize],
) -> Result<Var> {
    tape.bilinear(nodes, decoder, users, items)
}

/// `Σ_t value_t · p_t`
pub fn expected_rating(probs: &[f64], levels: &[f64]) -> f64 {
    probs.iter().zip(levels).map(|(p, v)| p * v).sum()
}

/// Scores `pairs` of (user index, item index) given node representations
/// over the unified node space. Class `t` is weighted by `levels[t]`.
pub fn decode(
    nodes: &NumArray,
    pairs: &[(usize, usize)],
    params: &ModelParams,
    levels: &[f64],
) -> Result<Vec<LinkPrediction>> {
    if levels.len() != params.n_levels() {
        return Err(Error::shape(
            "decode",
            format!("{} levels for {} decoder matrices", levels.len(), params.n_levels()),
        ));
    }
    let mut users = Vec::with_capacity(pairs.len());
    let mut items = Vec::with_capacity(pairs.len());
    for &(u, i) in pairs {
        if u >= params.n_users {
            return Err(Error::IndexOutOfRange {
                what: "users",
                index: u,
                len: params.n_users,
            });
        }
        if i >= params.n_items {
            return Err(Error::IndexOutOfRange {
                what: "items",
                index: i,
                len: params.n_items,
            });
        }
        users.push(u);
        items.push(params.n_users + i);
    }
    let mut tape = Tape::new();
    let n = tape.constant(nodes.clone());
    let w: Vec<Var> = params
        .decoder
        .iter()
        .map(|d| tape.constant(d.clone()))
        .collect();
    let logits = decode_on_tape(&mut tape, n, &w, &users, &items)?;
    let lv = tape.value(logits);
    let probs = softmax(lv);
    Ok((0..pairs.len())
        .map(|k| LinkPrediction {
            logits: lv.row(k).to_vec(),
            probs: probs.row(k).to_vec(),
            rating: expected_rating(probs.row(k), levels),
        })
        .collect())
}
