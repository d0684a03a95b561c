//! Implicit-feedback datasets: ingestion, holdout splitting, synthetic
//! generation, noise injection and negative sampling.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};

/// One observed (user, item) interaction. Only observed positives are stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    /// Raw rating / dwell value the noise flag was derived from, if any.
    pub value: Option<f64>,
    /// Ground truth: `Some(true)` for a true positive, `Some(false)` for a
    /// false positive. Diagnostics only; losses never read it.
    pub true_positive: Option<bool>,
    /// Member of the reliable extra-feedback set.
    pub extra: bool,
}

impl Interaction {
    pub fn new(user: u32, item: u32) -> Self {
        Interaction {
            user,
            item,
            value: None,
            true_positive: None,
            extra: false,
        }
    }

    pub fn with_flag(mut self, true_positive: bool) -> Self {
        self.true_positive = Some(true_positive);
        self
    }

    pub fn pair(&self) -> (u32, u32) {
        (self.user, self.item)
    }

    pub fn is_false_positive(&self) -> bool {
        self.true_positive == Some(false)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Sorted training-positive items per user.
    user_pos: Vec<Vec<u32>>,
}

impl Dataset {
    /// Builds a dataset and checks index bounds, partition disjointness and
    /// the extra-feedback flag invariant.
    pub fn new(
        n_users: usize,
        n_items: usize,
        train: Vec<Interaction>,
        validation: Vec<Interaction>,
        test: Vec<Interaction>,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(train.len() + validation.len() + test.len());
        for (name, part) in [("train", &train), ("validation", &validation), ("test", &test)] {
            for r in part.iter() {
                if r.user as usize >= n_users {
                    return Err(Error::OutOfRange {
                        what: "user",
                        index: r.user as usize,
                        bound: n_users,
                    });
                }
                if r.item as usize >= n_items {
                    return Err(Error::OutOfRange {
                        what: "item",
                        index: r.item as usize,
                        bound: n_items,
                    });
                }
                if r.extra && r.true_positive == Some(false) {
                    return Err(Error::InvalidArgument(format!(
                        "extra-feedback record ({}, {}) is flagged as a false positive",
                        r.user, r.item
                    )));
                }
                if !seen.insert(r.pair()) {
                    return Err(Error::InvalidArgument(format!(
                        "pair ({}, {}) appears twice (last seen in {name})",
                        r.user, r.item
                    )));
                }
            }
        }
        let user_pos = positive_sets(n_users, &train);
        Ok(Dataset {
            n_users,
            n_items,
            train,
            validation,
            test,
            user_pos,
        })
    }

    pub fn user_pos(&self, user: u32) -> &[u32] {
        &self.user_pos[user as usize]
    }

    pub fn positive_sets(&self) -> &[Vec<u32>] {
        &self.user_pos
    }

    pub fn is_train_positive(&self, user: u32, item: u32) -> bool {
        self.user_pos[user as usize].binary_search(&item).is_ok()
    }

    /// Same users, items, validation and test, different train partition.
    pub fn with_train(&self, train: Vec<Interaction>) -> Result<Self> {
        Dataset::new(
            self.n_users,
            self.n_items,
            train,
            self.validation.clone(),
            self.test.clone(),
        )
    }

    pub fn has_noise_flags(&self) -> bool {
        !self.train.is_empty() && self.train.iter().all(|r| r.true_positive.is_some())
    }

    pub fn extra_records(&self) -> Vec<Interaction> {
        self.train.iter().filter(|r| r.extra).copied().collect()
    }

    pub fn all_records(&self) -> impl Iterator<Item = &Interaction> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    /// Test items per user, sorted.
    pub fn test_items(&self) -> Vec<Vec<u32>> {
        items_by_user(self.n_users, &self.test)
    }

    pub fn validation_items(&self) -> Vec<Vec<u32>> {
        items_by_user(self.n_users, &self.validation)
    }

    pub fn train_counts(&self) -> Vec<usize> {
        self.user_pos.iter().map(Vec::len).collect()
    }

    /// Draws `ratio` negatives per positive, excluding each user's training
    /// positives.
    pub fn sample_negatives(
        &self,
        positives: &[Interaction],
        ratio: usize,
        rng: &mut Rng,
    ) -> Result<Batch> {
        sample_negatives(positives, &self.user_pos, self.n_items, ratio, rng)
    }
}

fn positive_sets(n_users: usize, records: &[Interaction]) -> Vec<Vec<u32>> {
    let mut sets = items_by_user(n_users, records);
    for s in &mut sets {
        s.dedup();
    }
    sets
}

fn items_by_user(n_users: usize, records: &[Interaction]) -> Vec<Vec<u32>> {
    let mut sets = vec![Vec::new(); n_users];
    for r in records {
        sets[r.user as usize].push(r.item);
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    sets
}

/// A training mini-batch: observed positives plus sampled negatives.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub positives: Vec<Interaction>,
    pub negatives: Vec<(u32, u32)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(user, item, label)` for example `k`; positives come first.
    pub fn example(&self, k: usize) -> (u32, u32, f64) {
        if k < self.positives.len() {
            let r = &self.positives[k];
            (r.user, r.item, 1.0)
        } else {
            let (u, i) = self.negatives[k - self.positives.len()];
            (u, i, 0.0)
        }
    }

    pub fn examples(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        (0..self.len()).map(move |k| self.example(k))
    }

    pub fn labels(&self) -> Vec<f64> {
        self.examples().map(|(_, _, y)| y).collect()
    }
}

/// Rejection-samples `ratio` unobserved items per positive. `exclude[u]` must
/// be sorted.
pub fn sample_negatives(
    positives: &[Interaction],
    exclude: &[Vec<u32>],
    n_items: usize,
    ratio: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    if ratio == 0 {
        return Err(Error::InvalidArgument(
            "negative ratio must be at least 1".into(),
        ));
    }
    let mut negatives = Vec::with_capacity(positives.len() * ratio);
    for p in positives {
        let taken = &exclude[p.user as usize];
        if taken.len() >= n_items {
            return Err(Error::NoNegatives { user: p.user });
        }
        for _ in 0..ratio {
            loop {
                let item = rng.random_range(0..n_items as u32);
                if taken.binary_search(&item).is_err() {
                    negatives.push((p.user, item));
                    break;
                }
            }
        }
    }
    Ok(Batch {
        positives: positives.to_vec(),
        negatives,
    })
}

/// Which whitespace-free TSV columns hold what (0-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Columns {
    pub user: usize,
    pub item: usize,
    pub value: Option<usize>,
    pub timestamp: Option<usize>,
}

impl Default for Columns {
    fn default() -> Self {
        Columns {
            user: 0,
            item: 1,
            value: Some(2),
            timestamp: Some(3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub columns: Columns,
    /// Values strictly below this mark the interaction as a false positive
    /// (e.g. 3.0 for ratings, 10.0 for dwell seconds).
    pub threshold: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            columns: Columns::default(),
            threshold: 3.0,
        }
    }
}

/// Reads a TSV interaction file. Raw ids are densely re-indexed in order of
/// first appearance; duplicate pairs keep the last line's value. Everything
/// lands in the train partition; use [`split_holdout`] afterwards.
pub fn load_interactions(path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut users: HashMap<String, u32> = HashMap::new();
    let mut items: HashMap<String, u32> = HashMap::new();
    let mut slot: HashMap<(u32, u32), usize> = HashMap::new();
    let mut records: Vec<Interaction> = Vec::new();
    let cols = opts.columns;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let field = |c: usize, name: &str| -> Result<&str> {
            fields
                .get(c)
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| parse_err(format!("missing {name} column {c}")))
        };
        let user_raw = field(cols.user, "user")?;
        let item_raw = field(cols.item, "item")?;
        let value = match cols.value.and_then(|c| fields.get(c)).map(|s| s.trim()) {
            Some(s) if !s.is_empty() => Some(
                s.parse::<f64>()
                    .map_err(|_| parse_err(format!("bad value `{s}`")))?,
            ),
            _ => None,
        };
        if let Some(s) = cols.timestamp.and_then(|c| fields.get(c)).map(|s| s.trim()) {
            if !s.is_empty() && s.parse::<f64>().is_err() {
                return Err(parse_err(format!("bad timestamp `{s}`")));
            }
        }

        let next_user = users.len() as u32;
        let user = *users.entry(user_raw.to_string()).or_insert(next_user);
        let next_item = items.len() as u32;
        let item = *items.entry(item_raw.to_string()).or_insert(next_item);

        let record = Interaction {
            user,
            item,
            value,
            true_positive: value.map(|v| v >= opts.threshold),
            extra: false,
        };
        match slot.get(&(user, item)) {
            Some(&k) => records[k] = record,
            None => {
                slot.insert((user, item), records.len());
                records.push(record);
            }
        }
    }

    if records.is_empty() {
        return Err(Error::Empty(format!("{} has no interactions", path.display())));
    }
    Dataset::new(users.len(), items.len(), records, Vec::new(), Vec::new())
}

/// Writes records as `user<TAB>item<TAB>value`.
pub fn write_tsv(records: &[Interaction], path: &Path) -> Result<()> {
    write_lines(path, records.iter().map(|r| match r.value {
        Some(v) => format!("{}\t{}\t{}", r.user, r.item, v),
        None => format!("{}\t{}", r.user, r.item),
    }))
}

/// Writes the flags sidecar `user<TAB>item<TAB>noise_flag<TAB>extra_flag`;
/// a missing noise flag is written as `-`.
pub fn write_flags(records: &[Interaction], path: &Path) -> Result<()> {
    write_lines(path, records.iter().map(|r| {
        let flag = match r.true_positive {
            Some(true) => "1",
            Some(false) => "0",
            None => "-",
        };
        format!("{}\t{}\t{}\t{}", r.user, r.item, flag, u8::from(r.extra))
    }))
}

/// Applies a flags sidecar to records in place. Pairs absent from the
/// sidecar keep their flags.
pub fn apply_flags(records: &mut [Interaction], path: &Path) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut flags: HashMap<(u32, u32), (Option<bool>, bool)> = HashMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad("expected 4 columns"));
        }
        let user = f[0].parse::<u32>().map_err(|_| bad("bad user"))?;
        let item = f[1].parse::<u32>().map_err(|_| bad("bad item"))?;
        let noise = match f[2] {
            "1" => Some(true),
            "0" => Some(false),
            "-" => None,
            _ => return Err(bad("bad noise flag")),
        };
        let extra = match f[3] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("bad extra flag")),
        };
        flags.insert((user, item), (noise, extra));
    }
    for r in records.iter_mut() {
        if let Some(&(noise, extra)) = flags.get(&r.pair()) {
            r.true_positive = noise;
            r.extra = extra;
        }
    }
    Ok(())
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

/// Random per-user holdout. Users with fewer than three interactions go
/// entirely to train. False positives drawn into the test share are dropped,
/// so the test partition only holds true positives.
pub fn split_holdout(
    records: &[Interaction],
    n_users: usize,
    n_items: usize,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Dataset> {
    let sum = ratios.train + ratios.validation + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.validation, ratios.test].iter().any(|r| *r < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got {sum}"
        )));
    }
    let mut rng = rng::stream(seed, streams::SPLIT);
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); n_users];
    for (k, r) in records.iter().enumerate() {
        if r.user as usize >= n_users {
            return Err(Error::OutOfRange {
                what: "user",
                index: r.user as usize,
                bound: n_users,
            });
        }
        per_user[r.user as usize].push(k);
    }

    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for idx in &mut per_user {
        let n = idx.len();
        if n < 3 {
            train.extend(idx.iter().map(|&k| records[k]));
            continue;
        }
        idx.shuffle(&mut rng);
        let n_test = ((n as f64 * ratios.test).round() as usize).min(n - 1);
        let n_valid = ((n as f64 * ratios.validation).round() as usize).min(n - 1 - n_test);
        let n_train = n - n_valid - n_test;
        train.extend(idx[..n_train].iter().map(|&k| records[k]));
        validation.extend(idx[n_train..n_train + n_valid].iter().map(|&k| records[k]));
        test.extend(
            idx[n_train + n_valid..]
                .iter()
                .map(|&k| records[k])
                .filter(|r| r.true_positive != Some(false)),
        );
    }
    if test.is_empty() {
        log::warn!("holdout split produced an empty test partition");
    }
    Dataset::new(n_users, n_items, train, validation, test)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub density: f64,
    /// Log-normal sigma of per-user activity; 0 gives every user the same
    /// number of positives. The mean count is kept at `density * n_items`.
    pub activity_spread: f64,
    pub seed: u64,
}

/// Plants Gaussian user/item factors; each user's true positives are the
/// items with the largest inner product, `ceil(density * n_items)` of them
/// on average. All records are true positives and sit in the train
/// partition.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if !(spec.density > 0.0 && spec.density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density must lie in (0, 1], got {}",
            spec.density
        )));
    }
    if spec.density * (spec.n_items as f64) < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "density {} leaves no positives over {} items",
            spec.density, spec.n_items
        )));
    }
    if !(spec.activity_spread >= 0.0 && spec.activity_spread.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "activity spread must be a finite non-negative number, got {}",
            spec.activity_spread
        )));
    }
    if spec.n_users == 0 || spec.latent_dim == 0 {
        return Err(Error::InvalidArgument("zero users or latent dimension".into()));
    }
    let mut rng = rng::stream(spec.seed, streams::SYNTH);
    let d = spec.latent_dim;
    let mut gauss = |n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let users = gauss(spec.n_users * d);
    let items = gauss(spec.n_items * d);
    let k = ((spec.density * spec.n_items as f64).ceil() as usize).min(spec.n_items);
    let sigma = spec.activity_spread;
    let counts: Vec<usize> = if sigma == 0.0 {
        vec![k; spec.n_users]
    } else {
        (0..spec.n_users)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let c = (k as f64 * (sigma * z - sigma * sigma / 2.0).exp()).round() as usize;
                c.clamp(1, spec.n_items)
            })
            .collect()
    };

    let mut records = Vec::with_capacity(counts.iter().sum());
    let mut order: Vec<(f64, u32)> = Vec::with_capacity(spec.n_items);
    for u in 0..spec.n_users {
        let pu = &users[u * d..(u + 1) * d];
        order.clear();
        order.extend((0..spec.n_items).map(|i| {
            let qi = &items[i * d..(i + 1) * d];
            (dot(pu, qi), i as u32)
        }));
        order.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut top: Vec<u32> = order[..counts[u]].iter().map(|&(_, i)| i).collect();
        top.sort_unstable();
        records.extend(top.into_iter().map(|i| Interaction::new(u as u32, i).with_flag(true)));
    }
    Dataset::new(spec.n_users, spec.n_items, records, Vec::new(), Vec::new())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adds `ceil(rate * |train| / (1 - rate))` false positives on pairs absent
/// from every partition, so they make up about `rate` of the new train set.
pub fn inject_false_positives(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "noise rate must lie in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(dataset.clone());
    }
    let needed = (rate * dataset.train.len() as f64 / (1.0 - rate)).ceil() as usize;
    let mut occupied: HashSet<(u32, u32)> = dataset.all_records().map(Interaction::pair).collect();
    let total = dataset.n_users * dataset.n_items;
    let available = total - occupied.len();
    if needed > available {
        return Err(Error::InsufficientPairs { needed, available });
    }

    let mut rng = rng::stream(seed, streams::NOISE);
    let mut injected = Vec::with_capacity(needed);
    if needed * 2 > available {
        let mut free: Vec<(u32, u32)> = (0..dataset.n_users as u32)
            .flat_map(|u| (0..dataset.n_items as u32).map(move |i| (u, i)))
            .filter(|p| !occupied.contains(p))
            .collect();
        let (chosen, _) = free.partial_shuffle(&mut rng, needed);
        injected.extend(chosen.iter().copied());
    } else {
        while injected.len() < needed {
            let u = rng.random_range(0..dataset.n_users as u32);
            let i = rng.random_range(0..dataset.n_items as u32);
            if occupied.insert((u, i)) {
                injected.push((u, i));
            }
        }
    }

    let mut train = dataset.train.clone();
    train.extend(
        injected
            .into_iter()
            .map(|(u, i)| Interaction::new(u, i).with_flag(false)),
    );
    dataset.with_train(train)
}

/// Marks `round(fraction * #true-positive train records)` of them, chosen
/// uniformly, as extra feedback.
pub fn reveal_extra_feedback(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "extra-feedback fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let mut candidates: Vec<usize> = dataset
        .train
        .iter()
        .enumerate()
        .filter(|(_, r)| r.true_positive == Some(true))
        .map(|(k, _)| k)
        .collect();
    let n = (fraction * candidates.len() as f64).round() as usize;
    let mut rng = rng::stream(seed, streams::EXTRA);
    let (chosen, _) = candidates.partial_shuffle(&mut rng, n);
    let mut train = dataset.train.clone();
    for &k in chosen.iter() {
        train[k].extra = true;
    }
    dataset.with_train(train)
}
