use crate::error::Result;
use crate::tensor::{Tape, Var};

/// Mean cross entropy of the softmax over per-level logits.
pub fn ce_loss(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy_rows(logits, targets)
}

/// `-Σ_{t<T-1} Σ_i cos(h_t[i], h_{t+1}[i])`; zero for a single level.
pub fn nrr_loss(tape: &mut Tape<'_>, per_level: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(per_level.len().saturating_sub(1));
    for pair in per_level.windows(2) {
        let cos = tape.cosine_rows(pair[0], pair[1])?;
        terms.push((-1.0, tape.sum(cos)));
    }
    if terms.is_empty() {
        return Ok(tape.constant(crate::tensor::NumArray::scalar(0.0)));
    }
    tape.scale_add(&terms)
}

/// Handles of the loss pieces.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub nrr: Var,
}

/// `ce + λ · nrr`
pub fn total_loss(
    tape: &mut Tape<'_>,
    logits: Var,
    targets: &[usize],
    per_level: &[Var],
    lambda: f64,
) -> Result<LossParts> {
    let ce = ce_loss(tape, logits, targets)?;
    let nrr = nrr_loss(tape, per_level)?;
    let total = tape.scale_add(&[(1.0, ce), (lambda, nrr)])?;
    Ok(LossParts { total, ce, nrr })
}
