//! Rating-log ingestion, ID normalization and train/test splitting.
//!
//! Everything downstream works on [`RatingDataset`]: dense user and item
//! indices assigned in first-appearance order, a sorted list of distinct
//! rating values ("levels"), and one [`Triple`] per observed entry.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One line of a rating log, before ID normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRating {
    pub user: String,
    pub item: String,
    pub rating: f64,
    /// Parsed for completeness; nothing downstream reads it.
    pub timestamp: Option<i64>,
}

/// An observed entry of the rating matrix.
///
/// `rating` is the true numeric value. For training data it always equals
/// `levels[level]`; aligned test data may carry a value outside the train
/// levels, in which case `level` is the nearest one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triple {
    pub user: usize,
    pub item: usize,
    pub level: usize,
    pub rating: f64,
}

/// Bijection between external tokens and dense internal indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Index for `token`, assigning the next free one if it is new.
    /// The flag is true when a fresh index was assigned.
    pub fn intern(&mut self, token: &str) -> (usize, bool) {
        if let Some(&i) = self.index.get(token) {
            return (i, false);
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), i);
        (i, true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub triples: Vec<Triple>,
    /// Distinct rating values, strictly ascending.
    pub levels: Vec<f64>,
    pub users: IdMap,
    pub items: IdMap,
}

impl RatingDataset {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Same triples, with the index space widened to at least the given
    /// counts. Used to lay out training data over a space that also covers
    /// entities that only appear in an evaluation set.
    pub fn widened(&self, n_users: usize, n_items: usize) -> RatingDataset {
        RatingDataset {
            n_users: self.n_users.max(n_users),
            n_items: self.n_items.max(n_items),
            ..self.clone()
        }
    }

    /// Copy of this dataset restricted to the given triples; counts, levels
    /// and id maps are kept.
    pub fn with_triples(&self, triples: Vec<Triple>) -> RatingDataset {
        RatingDataset {
            triples,
            ..self.clone()
        }
    }

    /// Number of training ratings per user.
    pub fn user_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_users];
        for t in &self.triples {
            deg[t.user] += 1;
        }
        deg
    }

    /// Position of `value` among the levels, or the nearest level when it is
    /// not one of them (ties go to the lower level).
    pub fn nearest_level(&self, value: f64) -> usize {
        nearest_level(&self.levels, value)
    }
}

fn nearest_level(levels: &[f64], value: f64) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, &l) in levels.iter().enumerate() {
        let d = (l - value).abs();
        if d < best_dist {
            best = k;
            best_dist = d;
        }
    }
    best
}

/// Which kind of split a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    CanonicalFiles,
    RandomHoldout,
    SparsitySubsample,
    NodeHoldout,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(kind: SplitKind, fraction: f64, seed: u64) -> Result<Self> {
        check_fraction("split fraction", fraction)?;
        Ok(SplitSpec {
            kind,
            fraction,
            seed,
        })
    }
}

fn check_fraction(what: &str, f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "{what} must lie in (0, 1], got {f}"
        )));
    }
    Ok(())
}

/// Parses a MovieLens-style rating log: `user<d>item<d>rating[<d>timestamp]`
/// per line. Blank lines are skipped.
pub fn parse_movielens(path: impl AsRef<Path>, delimiter: &str) -> Result<Vec<RawRating>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings_str(&text, delimiter)
}

pub fn parse_ratings_str(text: &str, delimiter: &str) -> Result<Vec<RawRating>> {
    if delimiter.is_empty() {
        return Err(Error::InvalidArgument("empty field delimiter".into()));
    }
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delimiter).map(str::trim).collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("expected at least 3 fields, found {}", fields.len()),
            });
        }
        let rating: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            reason: format!("bad rating {:?}", fields[2]),
        })?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("rating {rating} is not finite"),
            });
        }
        let timestamp = match fields.get(3) {
            Some(s) if !s.is_empty() => Some(s.parse::<i64>().map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("bad timestamp {s:?}"),
            })?),
            _ => None,
        };
        out.push(RawRating {
            user: fields[0].to_owned(),
            item: fields[1].to_owned(),
            rating,
            timestamp,
        });
    }
    Ok(out)
}

fn sorted_levels<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<f64> {
    let mut levels: Vec<f64> = values.copied().collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    levels
}

fn level_of(levels: &[f64], value: f64) -> usize {
    levels
        .binary_search_by(|l| l.total_cmp(&value))
        .expect("value drawn from the level set")
}

/// Normalizes IDs and deduplicates (user, item) pairs, keeping the last
/// occurrence of each pair.
pub fn build_dataset(ratings: &[RawRating]) -> Result<RatingDataset> {
    if ratings.is_empty() {
        return Err(Error::Empty("no ratings to build a dataset from"));
    }
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut slot: HashMap<(usize, usize), usize> = HashMap::with_capacity(ratings.len());
    let mut kept: Vec<(usize, usize, f64)> = Vec::with_capacity(ratings.len());
    for r in ratings {
        let (u, _) = users.intern(&r.user);
        let (i, _) = items.intern(&r.item);
        match slot.get(&(u, i)) {
            Some(&k) => kept[k].2 = r.rating,
            None => {
                slot.insert((u, i), kept.len());
                kept.push((u, i, r.rating));
            }
        }
    }
    let levels = sorted_levels(kept.iter().map(|(_, _, r)| r));
    let triples = kept
        .into_iter()
        .map(|(user, item, rating)| Triple {
            user,
            item,
            level: level_of(&levels, rating),
            rating,
        })
        .collect();
    Ok(RatingDataset {
        n_users: users.len(),
        n_items: items.len(),
        triples,
        levels,
        users,
        items,
    })
}

/// A test set expressed in the training index space.
#[derive(Debug, Clone)]
pub struct AlignedTest {
    pub dataset: RatingDataset,
    /// Per user index of `dataset`: true when the user never appears in train.
    pub unseen_users: Vec<bool>,
    pub unseen_items: Vec<bool>,
}

/// Maps test ratings through the training ID maps. Unknown tokens get fresh
/// indices past the training counts and are flagged unseen. Ratings that
/// are not training levels are clamped to the nearest level for their
/// class index; the numeric rating is kept as is.
pub fn align_test(test: &[RawRating], train: &RatingDataset) -> AlignedTest {
    let mut users = train.users.clone();
    let mut items = train.items.clone();
    let mut slot: HashMap<(usize, usize), usize> = HashMap::with_capacity(test.len());
    let mut triples: Vec<Triple> = Vec::with_capacity(test.len());
    for r in test {
        let (user, _) = users.intern(&r.user);
        let (item, _) = items.intern(&r.item);
        let t = Triple {
            user,
            item,
            level: nearest_level(&train.levels, r.rating),
            rating: r.rating,
        };
        match slot.get(&(user, item)) {
            Some(&k) => triples[k] = t,
            None => {
                slot.insert((user, item), triples.len());
                triples.push(t);
            }
        }
    }
    let n_users = users.len();
    let n_items = items.len();
    AlignedTest {
        unseen_users: (0..n_users).map(|u| u >= train.n_users).collect(),
        unseen_items: (0..n_items).map(|i| i >= train.n_items).collect(),
        dataset: RatingDataset {
            n_users,
            n_items,
            triples,
            levels: train.levels.clone(),
            users,
            items,
        },
    }
}

fn ceil_count(ratio: f64, n: usize) -> usize {
    // Guard against products like 0.1 * 80000 = 8000.000000000001.
    let raw = ratio * n as f64;
    let c = (raw - 1e-9).ceil().max(0.0) as usize;
    c.min(n)
}

fn floor_count(ratio: f64, n: usize) -> usize {
    let raw = ratio * n as f64;
    ((raw + 1e-9).floor().max(0.0) as usize).min(n)
}

/// Uniformly keeps `ceil(ratio * |triples|)` triples without replacement.
/// The surviving triples stay in their original order.
pub fn subsample(ds: &RatingDataset, ratio: f64, seed: u64) -> Result<RatingDataset> {
    check_fraction("subsample ratio", ratio)?;
    let n = ds.triples.len();
    let keep = ceil_count(ratio, n);
    if keep == n {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, n, keep).into_vec();
    chosen.sort_unstable();
    Ok(ds.with_triples(chosen.into_iter().map(|k| ds.triples[k]).collect()))
}

/// Uniform (non-stratified) split of the triples into train and test parts;
/// `test_fraction` of them (rounded up) go to test.
pub fn random_holdout(
    ds: &RatingDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(RatingDataset, RatingDataset)> {
    check_fraction("holdout fraction", test_fraction)?;
    let n = ds.triples.len();
    let n_test = ceil_count(test_fraction, n);
    if n_test == 0 || n_test == n {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction {test_fraction} leaves one side empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; n];
    for k in sample(&mut rng, n, n_test) {
        in_test[k] = true;
    }
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (t, &to_test) in ds.triples.iter().zip(&in_test) {
        if to_test {
            test.push(*t);
        } else {
            train.push(*t);
        }
    }
    Ok((ds.with_triples(train), ds.with_triples(test)))
}

/// Moves every triple of a uniformly chosen `floor(user_fraction * n_users)`
/// users to the test side. Both sides keep the full index space, so held-out
/// users are simply nodes without training edges.
pub fn node_holdout(
    ds: &RatingDataset,
    user_fraction: f64,
    seed: u64,
) -> Result<(RatingDataset, RatingDataset)> {
    if !(user_fraction > 0.0 && user_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "user fraction must lie in (0, 1), got {user_fraction}"
        )));
    }
    let n_held = floor_count(user_fraction, ds.n_users);
    if n_held == 0 || n_held >= ds.n_users {
        return Err(Error::InvalidArgument(format!(
            "user fraction {user_fraction} of {} users selects {n_held}; both sides must be non-empty",
            ds.n_users
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; ds.n_users];
    for u in sample(&mut rng, ds.n_users, n_held) {
        held[u] = true;
    }
    let (test, train): (Vec<Triple>, Vec<Triple>) =
        ds.triples.iter().partition(|t| held[t.user]);
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(
            "node holdout produced an empty side".into(),
        ));
    }
    Ok((ds.with_triples(train), ds.with_triples(test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(u: &str, i: &str, r: f64) -> RawRating {
        RawRating {
            user: u.into(),
            item: i.into(),
            rating: r,
            timestamp: None,
        }
    }

    #[test]
    fn parses_movielens_line() {
        let out = parse_ratings_str("196\t242\t3\t881250949\n", "\t").unwrap();
        assert_eq!(
            out,
            vec![RawRating {
                user: "196".into(),
                item: "242".into(),
                rating: 3.0,
                timestamp: Some(881250949),
            }]
        );
    }

    #[test]
    fn multi_char_delimiter() {
        let out = parse_ratings_str("1::1193::5::978300760\n", "::").unwrap();
        assert_eq!(out[0].item, "1193");
        assert_eq!(out[0].rating, 5.0);
        assert!(parse_ratings_str("1,2,3", "").is_err());
    }

    #[test]
    fn empty_text_parses_to_nothing() {
        assert!(parse_ratings_str("", ",").unwrap().is_empty());
    }

    #[test]
    fn short_line_reports_line_number() {
        let err = parse_ratings_str("a,b\n", ",").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = parse_ratings_str("1,2,3\n\n1,x,y\n", ",").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_movielens("/nonexistent/u1.base", "\t").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn dedup_keeps_last() {
        let ds = build_dataset(&[raw("u1", "i1", 5.0), raw("u2", "i1", 3.0), raw("u1", "i1", 4.0)])
            .unwrap();
        assert_eq!((ds.n_users, ds.n_items), (2, 1));
        assert_eq!(ds.levels, vec![3.0, 4.0]);
        let got: Vec<_> = ds.triples.iter().map(|t| (t.user, t.item, t.level)).collect();
        assert_eq!(got, vec![(0, 0, 1), (1, 0, 0)]);
    }

    #[test]
    fn single_rating_has_one_level() {
        let ds = build_dataset(&[raw("u", "i", 2.0)]).unwrap();
        assert_eq!(ds.levels, vec![2.0]);
        assert_eq!(ds.n_levels(), 1);
    }

    #[test]
    fn empty_build_fails() {
        assert!(matches!(build_dataset(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn align_flags_unseen() {
        let train = build_dataset(&[raw("196", "1", 3.0), raw("7", "2", 5.0)]).unwrap();
        let test = align_test(&[raw("196", "2", 4.0), raw("new", "1", 2.5), raw("7", "9", 6.0)], &train);
        let ds = &test.dataset;
        assert_eq!(ds.triples[0].user, 0);
        assert_eq!(ds.triples[1].user, train.n_users);
        assert_eq!(test.unseen_users, vec![false, false, true]);
        assert_eq!(test.unseen_items, vec![false, false, true]);
        // 4.0 is equidistant from 3 and 5: lower wins. 2.5 clamps to 3, 6 to 5.
        assert_eq!(ds.triples[0].level, 0);
        assert_eq!(ds.triples[0].rating, 4.0);
        assert_eq!(ds.triples[1].level, 0);
        assert_eq!(ds.triples[2].level, 1);
        assert_eq!(ds.triples[2].rating, 6.0);
    }

    fn toy(n_users: usize, n_items: usize) -> RatingDataset {
        let mut raws = Vec::new();
        for u in 0..n_users {
            for i in 0..n_items {
                if (u * 7 + i * 3) % 4 != 0 {
                    raws.push(raw(&u.to_string(), &i.to_string(), ((u + i) % 5 + 1) as f64));
                }
            }
        }
        build_dataset(&raws).unwrap()
    }

    #[test]
    fn subsample_identity_and_determinism() {
        let ds = toy(10, 12);
        assert_eq!(subsample(&ds, 1.0, 3).unwrap(), ds);
        let a = subsample(&ds, 0.2, 7).unwrap();
        let b = subsample(&ds, 0.2, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), (0.2 * ds.len() as f64).ceil() as usize);
        assert!(subsample(&ds, 0.0, 1).is_err());
        assert!(subsample(&ds, 1.5, 1).is_err());
    }

    #[test]
    fn ceil_count_is_exact_on_round_products() {
        assert_eq!(ceil_count(0.1, 80000), 8000);
        assert_eq!(ceil_count(0.01, 80000), 800);
        assert_eq!(ceil_count(0.001, 80000), 80);
        assert_eq!(ceil_count(0.15, 7), 2);
        assert_eq!(floor_count(0.1, 943), 94);
    }

    #[test]
    fn node_holdout_moves_whole_users() {
        let ds = toy(10, 12);
        let (train, test) = node_holdout(&ds, 0.3, 1).unwrap();
        let (train2, test2) = node_holdout(&ds, 0.3, 1).unwrap();
        assert_eq!((&train, &test), (&train2, &test2));
        let held: std::collections::HashSet<usize> = test.triples.iter().map(|t| t.user).collect();
        assert_eq!(held.len(), 3);
        assert!(train.triples.iter().all(|t| !held.contains(&t.user)));
        assert_eq!(train.len() + test.len(), ds.len());
    }

    #[test]
    fn node_holdout_forced_single_user() {
        let ds = build_dataset(&[raw("a", "x", 1.0), raw("a", "y", 2.0), raw("b", "x", 3.0)]).unwrap();
        // Two users, fraction 0.5: exactly one is held out.
        let (train, test) = node_holdout(&ds, 0.5, 0).unwrap();
        let held = test.triples[0].user;
        assert!(test.triples.iter().all(|t| t.user == held));
        assert!(train.triples.iter().all(|t| t.user != held));
        assert_eq!(test.len(), ds.triples.iter().filter(|t| t.user == held).count());
    }

    #[test]
    fn node_holdout_rejects_degenerate() {
        let ds = toy(4, 4);
        assert!(node_holdout(&ds, 0.1, 0).is_err()); // floor(0.4) = 0 users
        assert!(node_holdout(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn random_holdout_partitions() {
        let ds = toy(8, 9);
        let (train, test) = random_holdout(&ds, 0.1, 5).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.len(), (0.1 * ds.len() as f64).ceil() as usize);
    }
}
