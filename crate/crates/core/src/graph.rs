//! Per-rating-level bipartite subgraphs and layer-wise node dropout.
//!
//! Users and items share one node index space: users occupy
//! `[0, n_users)` and items `[n_users, n_users + n_items)`. Each rating level
//! gets its own symmetric adjacency in CSR form, with the normalization
//! coefficient `1 / sqrt(deg(i) * deg(j))` stored next to every entry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RatingDataset;
use crate::error::{Error, Result};
use crate::tensor::NumArray;

/// Symmetric adjacency of one rating level.
#[derive(Debug, Clone)]
pub struct LevelAdjacency {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    coeffs: Vec<f64>,
    n_edges: usize,
}

impl LevelAdjacency {
    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    /// Number of undirected (user, item) edges.
    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    /// Neighbors of `node` with their normalization coefficients.
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[node]..self.offsets[node + 1];
        self.neighbors[span.clone()]
            .iter()
            .copied()
            .zip(self.coeffs[span].iter().copied())
    }

    fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct RatingGraph {
    pub n_users: usize,
    pub n_items: usize,
    levels: Vec<LevelAdjacency>,
}

impl RatingGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, t: usize) -> &LevelAdjacency {
        &self.levels[t]
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.n_users + item
    }

    pub fn is_user_node(&self, node: usize) -> bool {
        node < self.n_users
    }

    /// Total undirected edges over all levels.
    pub fn n_edges(&self) -> usize {
        self.levels.iter().map(LevelAdjacency::n_edges).sum()
    }

    /// Edges of level `t` as `(user node, item node, coefficient)`.
    pub fn edges(&self, t: usize) -> Vec<(usize, usize, f64)> {
        let adj = &self.levels[t];
        (0..self.n_users)
            .flat_map(|u| adj.neighbors(u).map(move |(j, c)| (u, j, c)))
            .collect()
    }

    /// True for nodes with at least one edge in some level.
    pub fn seen_nodes(&self) -> Vec<bool> {
        (0..self.n_nodes())
            .map(|v| self.levels.iter().any(|adj| adj.degree(v) > 0))
            .collect()
    }

    /// `out[i] = sum_j c_t(i, j) * s_j * x[j]` over the level-`t` neighbors of
    /// `i`, where `s_j` is the sender scale (1 when `sender_scale` is `None`).
    /// Sums are accumulated in CSR order, so results do not depend on
    /// scheduling.
    pub fn propagate(
        &self,
        t: usize,
        x: &NumArray,
        sender_scale: Option<&[f64]>,
    ) -> Result<NumArray> {
        let adj = self.levels.get(t).ok_or(Error::IndexOutOfRange {
            what: "rating levels",
            index: t,
            len: self.levels.len(),
        })?;
        propagate_level(adj, x, sender_scale)
    }
}

pub(crate) fn propagate_level(
    adj: &LevelAdjacency,
    x: &NumArray,
    sender_scale: Option<&[f64]>,
) -> Result<NumArray> {
    let n = adj.n_nodes();
    if x.rows() != n {
        return Err(Error::shape(
            "propagate",
            format!("features have {} rows, graph has {n} nodes", x.rows()),
        ));
    }
    if let Some(s) = sender_scale {
        if s.len() != n {
            return Err(Error::shape(
                "propagate",
                format!("mask has length {}, graph has {n} nodes", s.len()),
            ));
        }
    }
    let d = x.cols();
    let mut out = NumArray::zeros(n, d);
    let src = x.as_slice();
    let dst = out.as_mut_slice();
    for i in 0..n {
        let row = &mut dst[i * d..(i + 1) * d];
        for k in adj.offsets[i]..adj.offsets[i + 1] {
            let j = adj.neighbors[k];
            let mut c = adj.coeffs[k];
            if let Some(s) = sender_scale {
                c *= s[j];
                if c == 0.0 {
                    continue;
                }
            }
            let xj = &src[j * d..(j + 1) * d];
            for (o, &v) in row.iter_mut().zip(xj) {
                *o += c * v;
            }
        }
    }
    Ok(out)
}

/// Builds one subgraph per rating level from the training triples.
pub fn build_graph(train: &RatingDataset) -> RatingGraph {
    let n_users = train.n_users;
    let n = n_users + train.n_items;
    let levels = (0..train.n_levels())
        .map(|t| {
            let edges: Vec<(usize, usize)> = train
                .triples
                .iter()
                .filter(|tr| tr.level == t)
                .map(|tr| (tr.user, n_users + tr.item))
                .collect();
            let mut degree = vec![0usize; n];
            for &(u, i) in &edges {
                degree[u] += 1;
                degree[i] += 1;
            }
            let mut offsets = vec![0usize; n + 1];
            for v in 0..n {
                offsets[v + 1] = offsets[v] + degree[v];
            }
            let mut fill = offsets[..n].to_vec();
            let mut neighbors = vec![0usize; offsets[n]];
            for &(u, i) in &edges {
                neighbors[fill[u]] = i;
                fill[u] += 1;
                neighbors[fill[i]] = u;
                fill[i] += 1;
            }
            // Fixed neighbor order per row keeps accumulation deterministic.
            for v in 0..n {
                neighbors[offsets[v]..offsets[v + 1]].sort_unstable();
            }
            let mut coeffs = Vec::with_capacity(neighbors.len());
            for v in 0..n {
                for &j in &neighbors[offsets[v]..offsets[v + 1]] {
                    coeffs.push(1.0 / ((degree[v] * degree[j]) as f64).sqrt());
                }
            }
            LevelAdjacency {
                offsets,
                neighbors,
                coeffs,
                n_edges: edges.len(),
            }
        })
        .collect();
    RatingGraph {
        n_users,
        n_items: train.n_items,
        levels,
    }
}

/// Layer-wise node dropout schedule: `p_l = max(p0 - (l - 1) * theta, 0)` for
/// message-passing layers `l = 1..=layers`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub p0: f64,
    pub theta: f64,
    pub layers: usize,
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p0) {
            return Err(Error::InvalidArgument(format!(
                "initial dropout probability must lie in [0, 1), got {}",
                self.p0
            )));
        }
        if !(self.theta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout decay must be non-negative, got {}",
                self.theta
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArgument("at least one layer required".into()));
        }
        Ok(())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        (0..self.layers)
            .map(|k| (self.p0 - k as f64 * self.theta).max(0.0))
            .collect()
    }
}

/// Sampled keep decisions for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutPlan {
    probs: Vec<f64>,
    /// Per layer, per node: 0 for dropped senders, `1 / (1 - p_l)` for kept ones.
    scales: Vec<Vec<f64>>,
}

impl DropoutPlan {
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_layers(&self) -> usize {
        self.probs.len()
    }

    /// Sender scale vector for message-passing layer `layer` (0-based).
    pub fn sender_scale(&self, layer: usize) -> &[f64] {
        &self.scales[layer]
    }

    pub fn is_kept(&self, layer: usize, node: usize) -> bool {
        self.scales[layer][node] != 0.0
    }
}

/// Draws independent Bernoulli keep decisions for every (layer, node).
/// One mask per layer is shared by all rating levels.
pub fn sample_dropout(cfg: &DropoutConfig, n_nodes: usize, seed: u64) -> Result<DropoutPlan> {
    cfg.validate()?;
    let probs = cfg.probabilities();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = probs
        .iter()
        .map(|&p| {
            let keep_scale = 1.0 / (1.0 - p);
            (0..n_nodes)
                .map(|_| {
                    if p > 0.0 && rng.gen::<f64>() < p {
                        0.0
                    } else {
                        keep_scale
                    }
                })
                .collect()
        })
        .collect();
    Ok(DropoutPlan { probs, scales })
}

/// Seed for the dropout masks of a given epoch, derived from a run seed.
pub fn epoch_seed(run_seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = run_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, RawRating};

    fn ds(rows: &[(&str, &str, f64)]) -> RatingDataset {
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

    #[test]
    fn single_edge_has_unit_coefficient() {
        let g = build_graph(&ds(&[("u", "i", 1.0)]));
        assert_eq!(g.edges(0), vec![(0, 1, 1.0)]);
    }

    #[test]
    fn coefficient_uses_both_degrees() {
        // user 0 has 4 level-0 items; item "x" has 9 level-0 raters
        let mut rows: Vec<(String, String, f64)> = Vec::new();
        for k in 0..3 {
            rows.push(("u0".into(), format!("other{k}"), 1.0));
        }
        rows.push(("u0".into(), "x".into(), 1.0));
        for k in 0..8 {
            rows.push((format!("v{k}"), "x".into(), 1.0));
        }
        let rows: Vec<(&str, &str, f64)> = rows.iter().map(|(a, b, r)| (a.as_str(), b.as_str(), *r)).collect();
        let d = ds(&rows);
        let g = build_graph(&d);
        let x = g.item_node(d.items.get("x").unwrap());
        let c = g.level(0).neighbors(0).find(|&(j, _)| j == x).unwrap().1;
        assert!((c - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn path_graph_propagation() {
        // u - i - u'
        let g = build_graph(&ds(&[("u", "i", 3.0), ("w", "i", 3.0)]));
        let x = NumArray::from_vec(3, 1, vec![1.0, 1.0, 0.0]).unwrap();
        let out = g.propagate(0, &x, None).unwrap();
        let item = g.item_node(0);
        assert!((out.get(item, 0) - 2.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_edge_item_to_user() {
        let g = build_graph(&ds(&[("u", "i", 3.0)]));
        let x = NumArray::from_vec(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let out = g.propagate(0, &x, None).unwrap();
        assert_eq!(out.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn dropped_sender_contributes_nothing() {
        let g = build_graph(&ds(&[("u", "i", 3.0)]));
        let x = NumArray::from_vec(2, 1, vec![5.0, 7.0]).unwrap();
        let out = g.propagate(0, &x, Some(&[1.0, 0.0])).unwrap();
        assert_eq!(out.row(0), &[0.0]);
        assert_eq!(out.row(1), &[5.0]);
    }

    #[test]
    fn isolated_node_gets_zero() {
        let g = build_graph(&ds(&[("u", "i", 3.0), ("w", "j", 4.0)]));
        let x = NumArray::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = g.propagate(0, &x, None).unwrap();
        // level 0 (rating 3) does not touch w or j
        assert_eq!(out.row(1), &[0.0]);
        assert_eq!(out.row(3), &[0.0]);
    }

    #[test]
    fn mask_length_checked() {
        let g = build_graph(&ds(&[("u", "i", 3.0)]));
        let x = NumArray::zeros(2, 1);
        assert!(g.propagate(0, &x, Some(&[1.0])).is_err());
        assert!(g.propagate(0, &NumArray::zeros(3, 1), None).is_err());
    }

    #[test]
    fn dropout_schedule_clamps() {
        let cfg = DropoutConfig {
            p0: 0.2,
            theta: 0.1,
            layers: 3,
        };
        let p = cfg.probabilities();
        assert!((p[0] - 0.2).abs() < 1e-15 && (p[1] - 0.1).abs() < 1e-15 && p[2] == 0.0);
        let deep = DropoutConfig { layers: 5, ..cfg };
        assert_eq!(deep.probabilities()[4], 0.0);
    }

    #[test]
    fn zero_dropout_keeps_everything() {
        let cfg = DropoutConfig {
            p0: 0.0,
            theta: 0.0,
            layers: 2,
        };
        let plan = sample_dropout(&cfg, 50, 9).unwrap();
        assert!(plan.sender_scale(0).iter().chain(plan.sender_scale(1)).all(|&s| s == 1.0));
    }

    #[test]
    fn dropout_is_seeded() {
        let cfg = DropoutConfig {
            p0: 0.3,
            theta: 0.1,
            layers: 2,
        };
        let a = sample_dropout(&cfg, 100, 4).unwrap();
        assert_eq!(a, sample_dropout(&cfg, 100, 4).unwrap());
        assert_ne!(a, sample_dropout(&cfg, 100, 5).unwrap());
        let kept = (0..100).filter(|&v| a.is_kept(0, v)).count();
        assert!(kept > 50 && kept < 95);
        assert!((a.sender_scale(0).iter().find(|&&s| s > 0.0).unwrap() - 1.0 / 0.7).abs() < 1e-15);
    }

    #[test]
    fn dropout_rejects_bad_config() {
        let bad = DropoutConfig {
            p0: 1.0,
            theta: 0.0,
            layers: 1,
        };
        assert!(sample_dropout(&bad, 3, 0).is_err());
        let steep = DropoutConfig {
            p0: 0.1,
            theta: 0.5,
            layers: 4,
        };
        assert!(sample_dropout(&steep, 3, 0).is_ok());
    }
}
