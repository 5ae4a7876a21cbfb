//! Graph autoencoder over per-level rating subgraphs.
//!
//! Each node starts from three embeddings concatenated per level: a single
//! row shared by all nodes ("identical"), one of two rows selected by role
//! (user or item), and a per-node latent row that is distinct for every
//! rating level. Propagation runs separately on each level's subgraph, layer
//! outputs are combined with weights `1/(l+1)`, levels are summed, and a
//! shared linear map followed by `tanh` gives the node representation fed to
//! a per-level bilinear decoder.

mod decoder;
mod encoder;
mod inductive;
mod loss;
mod train;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DropoutConfig;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{NumArray, Tape, Var};

pub use decoder::{decode, decode_on_tape, expected_rating, LinkPrediction};
pub use encoder::{encode, encode_on_tape, Encoded, EncoderOutput};
pub use inductive::impute_unseen;
pub use loss::{ce_loss, nrr_loss, total_loss, LossParts};
pub use train::{
    evaluate_rmse, evaluate_with_imputation, fit, fit_with_progress, EpochRecord, FitOutcome, TrainReport,
};

/// Which input embeddings take part in the node features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub identical: bool,
    pub role: bool,
    pub latent: bool,
}

impl Default for FeatureSet {
    fn default() -> Self {
        FeatureSet {
            identical: true,
            role: true,
            latent: true,
        }
    }
}

impl FeatureSet {
    pub fn only_identical() -> Self {
        FeatureSet {
            identical: true,
            role: false,
            latent: false,
        }
    }

    pub fn only_role() -> Self {
        FeatureSet {
            identical: false,
            role: true,
            latent: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub layers: usize,
    pub dim_id: usize,
    pub dim_role: usize,
    pub dim_lat: usize,
    pub dim_dec: usize,
    pub p0: f64,
    pub theta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub features: FeatureSet,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            layers: 2,
            dim_id: 60,
            dim_role: 60,
            dim_lat: 60,
            dim_dec: 40,
            p0: 0.2,
            theta: 0.1,
            lambda: 4e-3,
            lr: 0.01,
            epochs: 1000,
            seed: 0,
            features: FeatureSet::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.layers == 0 {
            return bad("at least one propagation layer is required".into());
        }
        if self.dim_id == 0 || self.dim_role == 0 || self.dim_lat == 0 || self.dim_dec == 0 {
            return bad("embedding widths must be at least 1".into());
        }
        if !(self.features.identical || self.features.role || self.features.latent) {
            return bad("at least one input feature must be enabled".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        self.dropout().validate()
    }

    pub fn dropout(&self) -> DropoutConfig {
        DropoutConfig {
            p0: self.p0,
            theta: self.theta,
            layers: self.layers,
        }
    }

    /// Widths actually used for (identical, role, latent).
    pub fn feature_widths(&self) -> (usize, usize, usize) {
        let f = self.features;
        (
            if f.identical { self.dim_id } else { 0 },
            if f.role { self.dim_role } else { 0 },
            if f.latent { self.dim_lat } else { 0 },
        )
    }

    pub fn input_width(&self) -> usize {
        let (a, b, c) = self.feature_widths();
        a + b + c
    }
}

/// All learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub n_users: usize,
    pub n_items: usize,
    /// 1 x d_id, shared by every node.
    pub identical: NumArray,
    /// 2 x d_role: row 0 users, row 1 items.
    pub role: NumArray,
    /// One (n_users + n_items) x d_lat table per rating level.
    pub latent: Vec<NumArray>,
    /// d_dec x D
    pub encoder: NumArray,
    /// One d_dec x d_dec matrix per rating level.
    pub decoder: Vec<NumArray>,
}

/// Tape handles of every parameter, in [`ModelParams::tensors`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub identical: Var,
    pub role: Var,
    pub latent: Vec<Var>,
    pub encoder: Var,
    pub decoder: Vec<Var>,
}

impl ParamVars {
    /// Splits handles given in [`ModelParams::tensors`] order.
    pub fn from_slice(vars: &[Var], n_levels: usize) -> Self {
        ParamVars {
            identical: vars[0],
            role: vars[1],
            latent: vars[2..2 + n_levels].to_vec(),
            encoder: vars[2 + n_levels],
            decoder: vars[3 + n_levels..3 + 2 * n_levels].to_vec(),
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> NumArray {
    if rows == 0 || cols == 0 {
        return NumArray::zeros(rows, cols);
    }
    let a = glorot_bound(rows, cols);
    let dist = Uniform::new_inclusive(-a, a);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    NumArray::from_vec(rows, cols, data).expect("sized by construction")
}

/// `sqrt(6 / (fan_in + fan_out))` for a rows x cols table.
pub fn glorot_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Uniform Glorot initialization of every table, deterministic in `hp.seed`.
pub fn init_params(hp: &HyperParams, n_users: usize, n_items: usize, n_levels: usize) -> Result<ModelParams> {
    hp.validate()?;
    if n_users == 0 || n_items == 0 || n_levels == 0 {
        return Err(Error::InvalidArgument(format!(
            "dimensions must be positive: {n_users} users, {n_items} items, {n_levels} levels"
        )));
    }
    let (d_id, d_role, d_lat) = hp.feature_widths();
    let n = n_users + n_items;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let identical = glorot(&mut rng, 1, d_id);
    let role = glorot(&mut rng, 2, d_role);
    let latent = (0..n_levels).map(|_| glorot(&mut rng, n, d_lat)).collect();
    let encoder = glorot(&mut rng, hp.dim_dec, hp.input_width());
    let decoder = (0..n_levels)
        .map(|_| glorot(&mut rng, hp.dim_dec, hp.dim_dec))
        .collect();
    Ok(ModelParams {
        n_users,
        n_items,
        identical,
        role,
        latent,
        encoder,
        decoder,
    })
}

impl ModelParams {
    pub fn n_levels(&self) -> usize {
        self.decoder.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn tensors(&self) -> Vec<(String, &NumArray)> {
        let mut out = vec![
            ("identical".to_string(), &self.identical),
            ("role".to_string(), &self.role),
        ];
        out.extend(self.latent.iter().enumerate().map(|(t, a)| (format!("latent.{t}"), a)));
        out.push(("encoder".to_string(), &self.encoder));
        out.extend(self.decoder.iter().enumerate().map(|(t, a)| (format!("decoder.{t}"), a)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut NumArray> {
        let mut out = vec![&mut self.identical, &mut self.role];
        out.extend(self.latent.iter_mut());
        out.push(&mut self.encoder);
        out.extend(self.decoder.iter_mut());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every tensor as a tape parameter with ids in
    /// [`ModelParams::tensors`] order.
    pub fn register(&self, tape: &mut Tape<'_>) -> ParamVars {
        let mut id = 0;
        let mut next = |tape: &mut Tape<'_>, a: &NumArray| {
            let v = tape.param(id, a.clone());
            id += 1;
            v
        };
        let identical = next(tape, &self.identical);
        let role = next(tape, &self.role);
        let latent = self.latent.iter().map(|a| next(tape, a)).collect();
        let encoder = next(tape, &self.encoder);
        let decoder = self.decoder.iter().map(|a| next(tape, a)).collect();
        ParamVars {
            identical,
            role,
            latent,
            encoder,
            decoder,
        }
    }

    /// Re-lays the latent tables over a larger node space. Existing user and
    /// item rows keep their values; new rows are zero until imputed.
    pub fn resize_nodes(&self, n_users: usize, n_items: usize) -> Result<ModelParams> {
        if n_users < self.n_users || n_items < self.n_items {
            return Err(Error::InvalidArgument(format!(
                "cannot shrink node space from {}+{} to {n_users}+{n_items}",
                self.n_users, self.n_items
            )));
        }
        let latent = self
            .latent
            .iter()
            .map(|old| {
                let mut t = NumArray::zeros(n_users + n_items, old.cols());
                for u in 0..self.n_users {
                    t.row_mut(u).copy_from_slice(old.row(u));
                }
                for i in 0..self.n_items {
                    t.row_mut(n_users + i).copy_from_slice(old.row(self.n_users + i));
                }
                t
            })
            .collect();
        Ok(ModelParams {
            n_users,
            n_items,
            latent,
            ..self.clone()
        })
    }

    pub fn to_checkpoint(&self, hp: &HyperParams, levels: &[f64]) -> Checkpoint {
        let levels_str: Vec<String> = levels.iter().map(|l| l.to_string()).collect();
        Checkpoint {
            meta: vec![
                ("n_users".into(), self.n_users.to_string()),
                ("n_items".into(), self.n_items.to_string()),
                ("levels".into(), levels_str.join(",")),
                ("layers".into(), hp.layers.to_string()),
            ],
            tensors: self
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Rebuilds parameters from a checkpoint; returns them with the stored
    /// rating levels and layer count.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ModelParams, Vec<f64>, usize)> {
        let meta = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad metadata {k}")))
        };
        let n_users = num("n_users")?;
        let n_items = num("n_items")?;
        let layers = num("layers")?;
        let levels: Vec<f64> = meta("levels")?
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint("bad level list".into()))?;
        let tensor = |name: &str| {
            ck.tensor(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let t = levels.len();
        let params = ModelParams {
            n_users,
            n_items,
            identical: tensor("identical")?,
            role: tensor("role")?,
            latent: (0..t).map(|k| tensor(&format!("latent.{k}"))).collect::<Result<_>>()?,
            encoder: tensor("encoder")?,
            decoder: (0..t).map(|k| tensor(&format!("decoder.{k}"))).collect::<Result<_>>()?,
        };
        params.check_consistent()?;
        Ok((params, levels, layers))
    }

    /// Shape agreement between the tables.
    pub fn check_consistent(&self) -> Result<()> {
        let n = self.n_nodes();
        let d_in = self.identical.cols() + self.role.cols() + self.latent.first().map_or(0, NumArray::cols);
        let d_dec = self.encoder.rows();
        let ok = self.identical.rows() == 1
            && self.role.rows() == 2
            && self.latent.len() == self.decoder.len()
            && self.latent.iter().all(|l| l.rows() == n && l.cols() == self.latent[0].cols())
            && self.encoder.cols() == d_in
            && self.decoder.iter().all(|w| w.shape() == (d_dec, d_dec));
        if ok {
            Ok(())
        } else {
            Err(Error::shape("model parameters", "inconsistent table shapes"))
        }
    }
}
