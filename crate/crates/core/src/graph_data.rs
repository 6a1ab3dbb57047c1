//! Bipartite user-item interaction graphs.
//!
//! Users and items get dense indices in first-seen order. Edges are binary
//! and deduplicated; degrees always describe the full edge set, while the
//! per-edge [`Split`] labels carve out train/validation/test subsets.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Split {
    Train = 0,
    Valid = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn from_u8(v: u8) -> Option<Split> {
        match v {
            0 => Some(Split::Train),
            1 => Some(Split::Valid),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Which edge set node degrees are counted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DegreeSource {
    Full,
    #[default]
    Train,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    pub num_users: usize,
    pub num_items: usize,
    pub edges: Vec<(usize, usize)>,
    pub user_degrees: Vec<u64>,
    pub item_degrees: Vec<u64>,
    pub split: Vec<Split>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl InteractionGraph {
    /// Builds a graph from index pairs. Duplicates are dropped (first
    /// occurrence kept) and every edge starts in the training split.
    pub fn from_edges(
        num_users: usize,
        num_items: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        for (u, i) in edges {
            if u >= num_users || i >= num_items {
                return Err(Error::invalid(format!(
                    "edge ({u}, {i}) out of range for {num_users} users x {num_items} items"
                )));
            }
            if seen.insert((u, i)) {
                kept.push((u, i));
            }
        }
        let user_ids = (0..num_users).map(|u| u.to_string()).collect();
        let item_ids = (0..num_items).map(|i| i.to_string()).collect();
        Ok(Self::assemble(
            num_users, num_items, kept, user_ids, item_ids,
        ))
    }

    fn assemble(
        num_users: usize,
        num_items: usize,
        edges: Vec<(usize, usize)>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
    ) -> Self {
        let mut user_degrees = vec![0u64; num_users];
        let mut item_degrees = vec![0u64; num_items];
        for &(u, i) in &edges {
            user_degrees[u] += 1;
            item_degrees[i] += 1;
        }
        let split = vec![Split::Train; edges.len()];
        Self {
            num_users,
            num_items,
            edges,
            user_degrees,
            item_degrees,
            split,
            user_ids,
            item_ids,
        }
    }

    /// Reassembles a graph whose edges and labels were stored elsewhere.
    pub fn from_parts(
        num_users: usize,
        num_items: usize,
        edges: Vec<(usize, usize)>,
        split: Vec<Split>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        if split.len() != edges.len() {
            return Err(Error::invalid("split labels do not match edge count"));
        }
        if user_ids.len() != num_users || item_ids.len() != num_items {
            return Err(Error::invalid("id tables do not match node counts"));
        }
        let mut g = Self::from_edges(num_users, num_items, edges.iter().copied())?;
        if g.edges.len() != edges.len() {
            return Err(Error::invalid("duplicate edges in stored graph"));
        }
        g.split = split;
        g.user_ids = user_ids;
        g.item_ids = item_ids;
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn edges_in(&self, split: Split) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .zip(&self.split)
            .filter(move |(_, s)| **s == split)
            .map(|(e, _)| *e)
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for s in &self.split {
            sizes[*s as usize] += 1;
        }
        sizes
    }

    /// Per-user sorted item lists restricted to one split.
    pub fn user_items(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for (u, i) in self.edges_in(split) {
            out[u].push(i);
        }
        for items in &mut out {
            items.sort_unstable();
        }
        out
    }

    /// `(user_degrees, item_degrees)` counted on the requested edge set.
    pub fn degrees(&self, source: DegreeSource) -> (Vec<u64>, Vec<u64>) {
        match source {
            DegreeSource::Full => (self.user_degrees.clone(), self.item_degrees.clone()),
            DegreeSource::Train => {
                let mut ud = vec![0u64; self.num_users];
                let mut id = vec![0u64; self.num_items];
                for (u, i) in self.edges_in(Split::Train) {
                    ud[u] += 1;
                    id[i] += 1;
                }
                (ud, id)
            }
        }
    }

    /// Degrees laid out in token order: all users, then all items.
    pub fn token_degrees(&self, source: DegreeSource) -> Vec<u64> {
        let (mut ud, id) = self.degrees(source);
        ud.extend(id);
        ud
    }
}

/// Reads a `user<TAB>item` file. Lines starting with `#` and blank lines are
/// skipped; string ids are mapped to dense indices in first-seen order.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionGraph> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);

    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen = HashSet::new();
    let mut edges = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (user, item) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), None) if !u.is_empty() && !i.is_empty() => (u, i),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: "expected exactly two tab-separated fields".into(),
                })
            }
        };
        let u = *users.entry(user.to_string()).or_insert_with(|| {
            user_ids.push(user.to_string());
            user_ids.len() - 1
        });
        let i = *items.entry(item.to_string()).or_insert_with(|| {
            item_ids.push(item.to_string());
            item_ids.len() - 1
        });
        if seen.insert((u, i)) {
            edges.push((u, i));
        }
    }

    if edges.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} contains no interactions",
            path.display()
        )));
    }
    Ok(InteractionGraph::assemble(
        user_ids.len(),
        item_ids.len(),
        edges,
        user_ids,
        item_ids,
    ))
}

/// Fractions of edges assigned to train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, valid: f64, test: f64) -> Self {
        Self { train, valid, test }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("train", self.train),
            ("valid", self.valid),
            ("test", self.test),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} ratio {r} outside [0, 1]")));
            }
        }
        let sum = self.train + self.valid + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn get(&self, s: Split) -> f64 {
        match s {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }
}

/// Assigns every edge to a split with a seeded uniform draw.
///
/// Afterwards users with at least three interactions are guaranteed a
/// training edge, and every split with a positive ratio is non-empty once
/// the graph has at least ten edges.
pub fn split_edges(
    mut graph: InteractionGraph,
    ratios: SplitRatios,
    seed: u64,
) -> Result<InteractionGraph> {
    ratios.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // zero-ratio splits get an infinite cut so rounding never lands in them
    let cut_train = if ratios.valid == 0.0 && ratios.test == 0.0 {
        f64::INFINITY
    } else {
        ratios.train
    };
    let cut_valid = if ratios.test == 0.0 {
        f64::INFINITY
    } else {
        ratios.train + ratios.valid
    };
    for label in graph.split.iter_mut() {
        let r: f64 = rng.random();
        *label = if r < cut_train {
            Split::Train
        } else if r < cut_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }

    // users with >= 3 interactions keep at least one training edge
    if ratios.train > 0.0 {
        let mut first_edge = vec![usize::MAX; graph.num_users];
        let mut has_train = vec![false; graph.num_users];
        for (e, &(u, _)) in graph.edges.iter().enumerate() {
            if first_edge[u] == usize::MAX {
                first_edge[u] = e;
            }
            if graph.split[e] == Split::Train {
                has_train[u] = true;
            }
        }
        for u in 0..graph.num_users {
            if !has_train[u] && graph.user_degrees[u] >= 3 {
                graph.split[first_edge[u]] = Split::Train;
            }
        }
    }

    if graph.edges.len() >= 10 {
        for target in Split::ALL {
            if ratios.get(target) > 0.0 && graph.split_sizes()[target as usize] == 0 {
                fill_empty_split(&mut graph, target);
            }
        }
    }
    Ok(graph)
}

fn fill_empty_split(graph: &mut InteractionGraph, target: Split) {
    let mut train_count = vec![0u64; graph.num_users];
    for (u, _) in graph.edges_in(Split::Train) {
        train_count[u] += 1;
    }
    let sizes = graph.split_sizes();
    let donor = Split::ALL
        .into_iter()
        .filter(|s| *s != target)
        .max_by_key(|s| (sizes[*s as usize], std::cmp::Reverse(*s as u8)))
        .expect("two candidate donors");
    for e in (0..graph.edges.len()).rev() {
        if graph.split[e] != donor {
            continue;
        }
        let u = graph.edges[e].0;
        if donor == Split::Train && graph.user_degrees[u] >= 3 && train_count[u] < 2 {
            continue;
        }
        graph.split[e] = target;
        return;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Popularity {
    Unpopular,
    Normal,
    Popular,
}

impl Popularity {
    pub const ALL: [Popularity; 3] = [
        Popularity::Unpopular,
        Popularity::Normal,
        Popularity::Popular,
    ];
}

impl fmt::Display for Popularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Popularity::Unpopular => "unpopular",
            Popularity::Normal => "normal",
            Popularity::Popular => "popular",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopularityBuckets {
    /// Items with degree `<= thresholds.0` are unpopular, `> thresholds.1` popular.
    pub thresholds: (u64, u64),
    pub bucket_of_item: Vec<Popularity>,
}

/// Linear-interpolation quantile of a sorted sample.
fn quantile_sorted(sorted: &[u64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)
}

/// Splits items into popularity buckets by full-graph degree quantiles.
pub fn bucket_items(graph: &InteractionGraph, quantiles: (f64, f64)) -> Result<PopularityBuckets> {
    bucket_degrees(&graph.item_degrees, quantiles)
}

pub fn bucket_degrees(degrees: &[u64], quantiles: (f64, f64)) -> Result<PopularityBuckets> {
    let (q1, q2) = quantiles;
    if !(0.0 < q1 && q1 < q2 && q2 < 1.0) {
        return Err(Error::invalid(format!(
            "popularity quantiles must satisfy 0 < q1 < q2 < 1, got ({q1}, {q2})"
        )));
    }
    let mut sorted = degrees.to_vec();
    sorted.sort_unstable();
    let degenerate = match (sorted.first(), sorted.last()) {
        (Some(lo), Some(hi)) => lo == hi,
        _ => true,
    };
    if degenerate {
        log::warn!(
            "degenerate item degree distribution ({} items); all items bucketed as normal",
            degrees.len()
        );
        let d = sorted.first().copied().unwrap_or(0);
        return Ok(PopularityBuckets {
            thresholds: (d, d),
            bucket_of_item: vec![Popularity::Normal; degrees.len()],
        });
    }
    // degrees are integers, so `deg <= x` iff `deg <= floor(x)`
    let t1 = quantile_sorted(&sorted, q1).floor() as u64;
    let t2 = quantile_sorted(&sorted, q2).floor() as u64;
    let bucket_of_item = degrees
        .iter()
        .map(|&d| {
            if d <= t1 {
                Popularity::Unpopular
            } else if d > t2 {
                Popularity::Popular
            } else {
                Popularity::Normal
            }
        })
        .collect();
    Ok(PopularityBuckets {
        thresholds: (t1, t2),
        bucket_of_item,
    })
}

/// Parameters of the planted-cluster generator used for smoke tests and
/// the end-to-end learning check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub users: usize,
    pub items: usize,
    pub blocks: usize,
    pub per_user: usize,
    pub seed: u64,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 200,
            blocks: 2,
            per_user: 20,
            seed: 7,
        }
    }
}

impl BlockSpec {
    pub fn user_block(&self, u: usize) -> usize {
        u * self.blocks / self.users
    }

    pub fn item_block(&self, i: usize) -> usize {
        i * self.blocks / self.items
    }
}

/// Generates `(user, item)` index pairs where every user draws `per_user`
/// distinct items uniformly from its own block.
pub fn synthetic_blocks(spec: &BlockSpec) -> Result<Vec<(usize, usize)>> {
    if spec.blocks == 0 || spec.users < spec.blocks || spec.items < spec.blocks {
        return Err(Error::invalid(
            "block generator needs at least one user and item per block",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.users * spec.per_user);
    for u in 0..spec.users {
        let b = spec.user_block(u);
        let mut pool: Vec<usize> = (0..spec.items)
            .filter(|&i| spec.item_block(i) == b)
            .collect();
        if pool.len() < spec.per_user {
            return Err(Error::invalid(format!(
                "block {b} has {} items, fewer than {} per user",
                pool.len(),
                spec.per_user
            )));
        }
        pool.shuffle(&mut rng);
        let mut chosen = pool[..spec.per_user].to_vec();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| (u, i)));
    }
    Ok(out)
}

/// Writes block-generator output as a TSV file with `u<idx>`/`i<idx>` ids.
pub fn write_synthetic_tsv(spec: &BlockSpec, path: impl AsRef<Path>) -> Result<()> {
    let pairs = synthetic_blocks(spec)?;
    let mut buf = Vec::new();
    writeln!(
        buf,
        "# synthetic blocks: users={} items={} blocks={} per_user={} seed={}",
        spec.users, spec.items, spec.blocks, spec.per_user, spec.seed
    )?;
    for (u, i) in pairs {
        writeln!(buf, "u{u}\ti{i}")?;
    }
    crate::io_util::write_atomic(path.as_ref(), &buf)
}
