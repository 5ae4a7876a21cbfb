//! Local-graph heuristic scores and their correlation with true ratings.
//!
//! Four scores are computed for a (user, item) pair: the user's average
//! rating (AUR), the item's average rating (AIR), the most common rating
//! across both histories (MCR), and the rating given to the item by the
//! user sharing the most items with the target user (SCF, "guider").
//! [`analyze`] evaluates them leave-one-out over every observed triple and
//! reports the Pearson correlation of each with the held-out rating.

use serde::Serialize;

use crate::data::RatingDataset;

/// Per-user and per-item rating histories of a dataset.
#[derive(Debug, Clone)]
pub struct RatingIndex {
    levels: Vec<f64>,
    /// `(item, level)` sorted by item
    by_user: Vec<Vec<(usize, usize)>>,
    /// `(user, level)` sorted by user
    by_item: Vec<Vec<(usize, usize)>>,
}

impl RatingIndex {
    pub fn new(ds: &RatingDataset) -> Self {
        let mut by_user = vec![Vec::new(); ds.n_users];
        let mut by_item = vec![Vec::new(); ds.n_items];
        for t in &ds.triples {
            by_user[t.user].push((t.item, t.level));
            by_item[t.item].push((t.user, t.level));
        }
        by_user.iter_mut().for_each(|v| v.sort_unstable());
        by_item.iter_mut().for_each(|v| v.sort_unstable());
        RatingIndex {
            levels: ds.levels.clone(),
            by_user,
            by_item,
        }
    }

    fn mean(&self, hist: &[(usize, usize)]) -> Option<f64> {
        if hist.is_empty() {
            return None;
        }
        Some(hist.iter().map(|&(_, l)| self.levels[l]).sum::<f64>() / hist.len() as f64)
    }

    fn rating_of(&self, user: usize, item: usize) -> Option<f64> {
        let hist = &self.by_user[user];
        hist.binary_search_by_key(&item, |&(i, _)| i)
            .ok()
            .map(|k| self.levels[hist[k].1])
    }
}

/// Average rating of user `u`; `None` for a user without ratings.
pub fn aur(idx: &RatingIndex, u: usize) -> Option<f64> {
    idx.mean(&idx.by_user[u])
}

/// Average rating of item `i`; `None` for an item without ratings.
pub fn air(idx: &RatingIndex, i: usize) -> Option<f64> {
    idx.mean(&idx.by_item[i])
}

fn mode_level(counts: &[usize]) -> Option<usize> {
    // Strict comparison keeps the first (lowest) level on ties.
    let mut best: Option<(usize, usize)> = None;
    for (l, &c) in counts.iter().enumerate() {
        if c > 0 && best.map_or(true, |(_, bc)| c > bc) {
            best = Some((l, c));
        }
    }
    best.map(|(l, _)| l)
}

/// Most common rating value in the union of `u`'s and `i`'s histories,
/// ties broken toward the lower value.
pub fn mcr(idx: &RatingIndex, u: usize, i: usize) -> Option<f64> {
    let mut counts = vec![0usize; idx.levels.len()];
    for &(_, l) in idx.by_user[u].iter().chain(&idx.by_item[i]) {
        counts[l] += 1;
    }
    mode_level(&counts).map(|l| idx.levels[l])
}

fn common_count(a: &[(usize, usize)], b: &[(usize, usize)]) -> usize {
    let (mut x, mut y, mut n) = (0, 0, 0);
    while x < a.len() && y < b.len() {
        match a[x].0.cmp(&b[y].0) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                x += 1;
                y += 1;
            }
        }
    }
    n
}

/// Rating that the guider gave to `i`, where the guider is the user other
/// than `u` who rated `i` and shares the most rated items with `u` (ties to
/// the smaller index). `None` when nobody else rated `i`.
pub fn scf(idx: &RatingIndex, u: usize, i: usize) -> Option<f64> {
    let mine = &idx.by_user[u];
    let mut best: Option<(usize, usize)> = None;
    for &(v, _) in &idx.by_item[i] {
        if v == u {
            continue;
        }
        let overlap = common_count(mine, &idx.by_user[v]);
        if best.map_or(true, |(_, bo)| overlap > bo) {
            best = Some((v, overlap));
        }
    }
    best.and_then(|(v, _)| idx.rating_of(v, i))
}

/// Sample Pearson correlation; `None` on length mismatch, fewer than two
/// points, or zero variance on either side.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeuristicStat {
    pub pcc: Option<f64>,
    /// Fraction of evaluated triples where the heuristic was defined.
    pub coverage: f64,
    pub n_defined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeuristicReport {
    pub density: f64,
    pub n_pairs: usize,
    pub aur: HeuristicStat,
    pub air: HeuristicStat,
    pub mcr: HeuristicStat,
    pub scf: HeuristicStat,
}

impl HeuristicReport {
    pub fn rows(&self) -> [(&'static str, &HeuristicStat); 4] {
        [
            ("AUR", &self.aur),
            ("AIR", &self.air),
            ("MCR", &self.mcr),
            ("SCF", &self.scf),
        ]
    }
}

/// Leave-one-out heuristic scores for one observed triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub truth: f64,
    pub aur: Option<f64>,
    pub air: Option<f64>,
    pub mcr: Option<f64>,
    pub scf: Option<f64>,
}

/// Scores every training triple with that triple removed from the data.
///
/// Users are processed one at a time: the co-rating counts between the
/// current user and every other user are built once, and removing (u, i)
/// lowers the overlap with every rater of `i` by exactly one, which leaves
/// the guider choice unchanged.
pub fn leave_one_out_scores(train: &RatingDataset) -> Vec<PairScores> {
    let idx = RatingIndex::new(train);
    let levels = &idx.levels;
    let user_sum: Vec<f64> = idx
        .by_user
        .iter()
        .map(|h| h.iter().map(|&(_, l)| levels[l]).sum())
        .collect();
    let item_sum: Vec<f64> = idx
        .by_item
        .iter()
        .map(|h| h.iter().map(|&(_, l)| levels[l]).sum())
        .collect();
    let level_counts = |hist: &[(usize, usize)]| {
        let mut c = vec![0usize; levels.len()];
        for &(_, l) in hist {
            c[l] += 1;
        }
        c
    };
    let user_counts: Vec<Vec<usize>> = idx.by_user.iter().map(|h| level_counts(h)).collect();
    let item_counts: Vec<Vec<usize>> = idx.by_item.iter().map(|h| level_counts(h)).collect();

    let mut overlap = vec![0usize; train.n_users];
    let mut order: Vec<usize> = (0..train.triples.len()).collect();
    order.sort_by_key(|&k| train.triples[k].user);
    let mut out: Vec<Option<PairScores>> = vec![None; train.triples.len()];
    let mut current_user = usize::MAX;
    for &k in &order {
        let t = train.triples[k];
        if t.user != current_user {
            current_user = t.user;
            overlap.iter_mut().for_each(|c| *c = 0);
            for &(item, _) in &idx.by_user[t.user] {
                for &(v, _) in &idx.by_item[item] {
                    overlap[v] += 1;
                }
            }
        }
        let r = levels[t.level];
        let (du, di) = (idx.by_user[t.user].len(), idx.by_item[t.item].len());
        let aur = (du > 1).then(|| (user_sum[t.user] - r) / (du - 1) as f64);
        let air = (di > 1).then(|| (item_sum[t.item] - r) / (di - 1) as f64);
        let mut counts: Vec<usize> = user_counts[t.user]
            .iter()
            .zip(&item_counts[t.item])
            .map(|(a, b)| a + b)
            .collect();
        counts[t.level] -= 2;
        let mcr = mode_level(&counts).map(|l| levels[l]);
        let mut guider: Option<(usize, usize, usize)> = None;
        for &(v, lv) in &idx.by_item[t.item] {
            if v == t.user {
                continue;
            }
            if guider.map_or(true, |(_, o, _)| overlap[v] > o) {
                guider = Some((v, overlap[v], lv));
            }
        }
        let scf = guider.map(|(_, _, lv)| levels[lv]);
        out[k] = Some(PairScores {
            truth: t.rating,
            aur,
            air,
            mcr,
            scf,
        });
    }
    out.into_iter()
        .map(|s| s.expect("every triple scored"))
        .collect()
}

fn stat(scores: &[PairScores], pick: impl Fn(&PairScores) -> Option<f64>) -> HeuristicStat {
    let (xs, ys): (Vec<f64>, Vec<f64>) = scores
        .iter()
        .filter_map(|s| pick(s).map(|h| (h, s.truth)))
        .unzip();
    HeuristicStat {
        pcc: pearson(&xs, &ys),
        coverage: if scores.is_empty() {
            0.0
        } else {
            xs.len() as f64 / scores.len() as f64
        },
        n_defined: xs.len(),
    }
}

/// Leave-one-out heuristic correlations over all triples of `train`.
pub fn analyze(train: &RatingDataset) -> HeuristicReport {
    let scores = leave_one_out_scores(train);
    HeuristicReport {
        density: train.len() as f64 / (train.n_users as f64 * train.n_items as f64),
        n_pairs: scores.len(),
        aur: stat(&scores, |s| s.aur),
        air: stat(&scores, |s| s.air),
        mcr: stat(&scores, |s| s.mcr),
        scf: stat(&scores, |s| s.scf),
    }
}
