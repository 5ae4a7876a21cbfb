use crate::error::{Error, Result};

use super::ModelParams;

/// Replaces the latent rows of unseen nodes, level by level, with the mean
/// latent row of the seen nodes of the same role. `seen` is indexed by
/// unified node id. The shared identical and role rows need no imputation.
pub fn impute_unseen(params: &ModelParams, seen: &[bool]) -> Result<ModelParams> {
    let n = params.n_nodes();
    if seen.len() != n {
        return Err(Error::shape(
            "impute_unseen",
            format!("seen mask has {} entries for {n} nodes", seen.len()),
        ));
    }
    let mut out = params.clone();
    let roles = [0..params.n_users, params.n_users..n];
    for (name, range) in ["user", "item"].iter().zip(roles) {
        let seen_rows: Vec<usize> = range.clone().filter(|&v| seen[v]).collect();
        let unseen_rows: Vec<usize> = range.clone().filter(|&v| !seen[v]).collect();
        if unseen_rows.is_empty() {
            continue;
        }
        if seen_rows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no seen {name} nodes to impute from"
            )));
        }
        for table in &mut out.latent {
            let d = table.cols();
            let mut mean = vec![0.0; d];
            for &v in &seen_rows {
                for (m, &x) in mean.iter_mut().zip(table.row(v)) {
                    *m += x;
                }
            }
            let inv = 1.0 / seen_rows.len() as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
            for &v in &unseen_rows {
                table.row_mut(v).copy_from_slice(&mean);
            }
        }
    }
    Ok(out)
}
