//! Interaction and knowledge-graph ingestion, splitting, statistics and a
//! synthetic long-tail generator.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// A `(user, item)` pair with dense ids.
pub type Interaction = (u32, u32);

/// Implicit-feedback interactions with a disjoint train/validation/test split.
///
/// A freshly loaded dataset has every interaction in `train`; use
/// [`split_dataset`] to partition it.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    interactions: Vec<Interaction>,
    train: Vec<Interaction>,
    val: Vec<Interaction>,
    test: Vec<Interaction>,
    item_popularity: Vec<u32>,
    user_ids: Vec<u64>,
}

impl InteractionDataset {
    /// Dataset with all interactions in the training split. Duplicates are dropped.
    pub fn new(num_users: usize, num_items: usize, interactions: Vec<Interaction>) -> Result<Self> {
        let mut interactions = interactions;
        interactions.sort_unstable();
        interactions.dedup();
        for &(u, i) in &interactions {
            check_pair(u, i, num_users, num_items)?;
        }
        let train = interactions.clone();
        let item_popularity = popularity(&train, num_items);
        Ok(Self {
            num_users,
            num_items,
            interactions,
            train,
            val: Vec::new(),
            test: Vec::new(),
            item_popularity,
            user_ids: (0..num_users as u64).collect(),
        })
    }

    /// Replaces the split. The three parts must be disjoint and cover every interaction.
    pub fn with_splits(
        mut self,
        mut train: Vec<Interaction>,
        mut val: Vec<Interaction>,
        mut test: Vec<Interaction>,
    ) -> Result<Self> {
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        let mut all: Vec<Interaction> = train.iter().chain(&val).chain(&test).copied().collect();
        all.sort_unstable();
        let n = all.len();
        all.dedup();
        if all.len() != n {
            return Err(Error::InvalidArgument("splits overlap".into()));
        }
        if all != self.interactions {
            return Err(Error::InvalidArgument(
                "splits do not cover the interaction set".into(),
            ));
        }
        self.item_popularity = popularity(&train, self.num_items);
        self.train = train;
        self.val = val;
        self.test = test;
        Ok(self)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn train(&self) -> &[Interaction] {
        &self.train
    }

    pub fn val(&self) -> &[Interaction] {
        &self.val
    }

    pub fn test(&self) -> &[Interaction] {
        &self.test
    }

    /// Train-split interaction count per item.
    pub fn item_popularity(&self) -> &[u32] {
        &self.item_popularity
    }

    /// Original id of each dense user index.
    pub fn user_ids(&self) -> &[u64] {
        &self.user_ids
    }

    /// Items per user for a split, sorted ascending.
    pub fn by_user(&self, split: &[Interaction]) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_users];
        for &(u, i) in split {
            out[u as usize].push(i);
        }
        out
    }

    /// Fraction of the user x item matrix without an interaction.
    pub fn sparsity(&self) -> f64 {
        let cells = self.num_users as f64 * self.num_items as f64;
        if cells == 0.0 {
            return 1.0;
        }
        1.0 - self.interactions.len() as f64 / cells
    }

    /// Stable content hash, used to key cached SVD factors.
    pub fn content_hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.num_users as u64).to_le_bytes());
        h.update((self.num_items as u64).to_le_bytes());
        for part in [&self.train, &self.val, &self.test] {
            h.update((part.len() as u64).to_le_bytes());
            for &(u, i) in part.iter() {
                h.update(u.to_le_bytes());
                h.update(i.to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

fn check_pair(u: u32, i: u32, num_users: usize, num_items: usize) -> Result<()> {
    if u as usize >= num_users {
        return Err(Error::OutOfRange {
            what: "user",
            index: u as usize,
            limit: num_users,
        });
    }
    if i as usize >= num_items {
        return Err(Error::OutOfRange {
            what: "item",
            index: i as usize,
            limit: num_items,
        });
    }
    Ok(())
}

fn popularity(train: &[Interaction], num_items: usize) -> Vec<u32> {
    let mut counts = vec![0u32; num_items];
    for &(_, i) in train {
        counts[i as usize] += 1;
    }
    counts
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub lines: usize,
    pub blank_lines: usize,
    pub duplicates: usize,
    pub reindexed_users: bool,
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_fields<const N: usize>(line: &str, lineno: usize) -> Result<[u64; N]> {
    let mut out = [0u64; N];
    let mut fields = line.split_whitespace();
    for slot in out.iter_mut() {
        let f = fields.next().ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("expected {N} fields"),
        })?;
        *slot = f.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid non-negative integer {f:?}"),
        })?;
    }
    if fields.next().is_some() {
        return Err(Error::Parse {
            line: lineno,
            message: format!("expected {N} fields"),
        });
    }
    Ok(out)
}

fn to_u32(v: u64, lineno: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Parse {
        line: lineno,
        message: format!("id {v} exceeds u32"),
    })
}

/// Reads `user<TAB>item` lines.
///
/// Item ids are kept as given (they double as KG entity ids). User ids are
/// re-indexed densely in ascending order when some ids below the maximum
/// never occur.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<(InteractionDataset, IngestReport)> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut report = IngestReport::default();
    let mut raw: Vec<(u64, u32)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        report.lines += 1;
        if line.trim().is_empty() {
            report.blank_lines += 1;
            continue;
        }
        let [u, i] = parse_fields::<2>(line, n + 1)?;
        raw.push((u, to_u32(i, n + 1)?));
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let before = raw.len();
    raw.sort_unstable();
    raw.dedup();
    report.duplicates = before - raw.len();

    let users: BTreeSet<u64> = raw.iter().map(|&(u, _)| u).collect();
    let max_user = *users.iter().next_back().expect("nonempty");
    let dense = users.len() as u64 == max_user + 1;
    let user_ids: Vec<u64> = if dense {
        (0..=max_user).collect()
    } else {
        users.iter().copied().collect()
    };
    let index_of = |u: u64| -> u32 {
        if dense {
            u as u32
        } else {
            user_ids.binary_search(&u).expect("known user") as u32
        }
    };
    let pairs: Vec<Interaction> = raw.iter().map(|&(u, i)| (index_of(u), i)).collect();
    let num_items = raw.iter().map(|&(_, i)| i as usize).max().expect("nonempty") + 1;
    let mut ds = InteractionDataset::new(user_ids.len(), num_items, pairs)?;
    ds.user_ids = user_ids;
    report.reindexed_users = !dense;
    report.num_users = ds.num_users;
    report.num_items = ds.num_items;
    report.num_interactions = ds.interactions.len();
    Ok((ds, report))
}

fn write_pairs(path: &Path, pairs: &[Interaction], user_ids: &[u64]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &(u, i) in pairs {
        writeln!(w, "{}\t{}", user_ids[u as usize], i).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes all interactions as TSV using the original user ids.
pub fn write_interactions(ds: &InteractionDataset, path: impl AsRef<Path>) -> Result<()> {
    write_pairs(path.as_ref(), &ds.interactions, &ds.user_ids)
}

/// Writes `train.tsv`, `val.tsv` and `test.tsv` into `dir`.
pub fn write_splits(ds: &InteractionDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pairs(&dir.join("train.tsv"), &ds.train, &ds.user_ids)?;
    write_pairs(&dir.join("val.tsv"), &ds.val, &ds.user_ids)?;
    write_pairs(&dir.join("test.tsv"), &ds.test, &ds.user_ids)
}

/// A `(head, relation, tail)` triple of entity/relation ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// Multi-relational graph over entities; items `0..N` are entities `0..N`.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    num_entities: usize,
    num_relations: usize,
    triples: Vec<Triple>,
    item_to_entity: Vec<u32>,
    observed: HashSet<Triple>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.num_entities == other.num_entities
            && self.num_relations == other.num_relations
            && self.triples == other.triples
            && self.item_to_entity == other.item_to_entity
    }
}

impl KnowledgeGraph {
    /// Deduplicates triples; entity count is at least `item_count`.
    pub fn new(
        item_count: usize,
        num_entities: usize,
        num_relations: usize,
        triples: Vec<Triple>,
    ) -> Result<Self> {
        let num_entities = num_entities.max(item_count);
        let mut triples = triples;
        triples.sort_unstable();
        triples.dedup();
        for t in &triples {
            for e in [t.head, t.tail] {
                if e as usize >= num_entities {
                    return Err(Error::OutOfRange {
                        what: "entity",
                        index: e as usize,
                        limit: num_entities,
                    });
                }
            }
            if t.relation as usize >= num_relations {
                return Err(Error::OutOfRange {
                    what: "relation",
                    index: t.relation as usize,
                    limit: num_relations,
                });
            }
        }
        let observed = triples.iter().copied().collect();
        Ok(Self {
            num_entities,
            num_relations,
            triples,
            item_to_entity: (0..item_count as u32).collect(),
            observed,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn num_items(&self) -> usize {
        self.item_to_entity.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn item_to_entity(&self) -> &[u32] {
        &self.item_to_entity
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.observed.contains(t)
    }

    /// Relation-agnostic one-hop neighbours of every entity, sorted, without self.
    pub fn neighbors(&self) -> Vec<Vec<u32>> {
        let mut adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); self.num_entities];
        for t in &self.triples {
            if t.head != t.tail {
                adj[t.head as usize].insert(t.tail);
                adj[t.tail as usize].insert(t.head);
            }
        }
        adj.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Writes `head<TAB>relation<TAB>tail` lines.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.triples {
            writeln!(w, "{}\t{}\t{}", t.head, t.relation, t.tail).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct KgReport {
    pub lines: usize,
    pub duplicates: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_triples: usize,
    /// Set when the file held no triples.
    pub empty: bool,
}

/// Reads `head<TAB>relation<TAB>tail` lines. Entity ids below `item_count` are items.
pub fn load_kg_triples(
    path: impl AsRef<Path>,
    item_count: usize,
) -> Result<(KnowledgeGraph, KgReport)> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut report = KgReport::default();
    let mut triples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        report.lines += 1;
        if line.trim().is_empty() {
            continue;
        }
        let [h, r, t] = parse_fields::<3>(line, n + 1)?;
        triples.push(Triple::new(
            to_u32(h, n + 1)?,
            to_u32(r, n + 1)?,
            to_u32(t, n + 1)?,
        ));
    }
    let max_entity = triples
        .iter()
        .map(|t| t.head.max(t.tail) as usize + 1)
        .max()
        .unwrap_or(0);
    let num_relations = triples
        .iter()
        .map(|t| t.relation as usize + 1)
        .max()
        .unwrap_or(0);
    let total = triples.len();
    let kg = KnowledgeGraph::new(item_count, max_entity, num_relations, triples)?;
    report.duplicates = total - kg.triples.len();
    report.num_entities = kg.num_entities;
    report.num_relations = kg.num_relations;
    report.num_triples = kg.triples.len();
    report.empty = kg.triples.is_empty();
    Ok((kg, report))
}

/// Per-user random 8:1:1 partition.
///
/// Users with fewer than three interactions keep everything in train. Others
/// get `max(1, round(n/10))` validation and test items each.
pub fn split_dataset(ds: &InteractionDataset, seed: u64) -> InteractionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_user = ds.by_user(&ds.interactions);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (u, mut items) in by_user.into_iter().enumerate() {
        let u = u as u32;
        let n = items.len();
        if n < 3 {
            train.extend(items.into_iter().map(|i| (u, i)));
            continue;
        }
        items.shuffle(&mut rng);
        let held = ((n as f64) * 0.1).round().max(1.0) as usize;
        test.extend(items[..held].iter().map(|&i| (u, i)));
        val.extend(items[held..2 * held].iter().map(|&i| (u, i)));
        train.extend(items[2 * held..].iter().map(|&i| (u, i)));
    }
    ds.clone()
        .with_splits(train, val, test)
        .expect("per-user partition is disjoint and complete")
}

/// Item-degree histogram over the train split (degree → number of items).
/// Items with no training interactions are not counted.
pub fn degree_histogram(ds: &InteractionDataset) -> BTreeMap<u32, usize> {
    let mut hist = BTreeMap::new();
    for &d in ds.item_popularity() {
        if d > 0 {
            *hist.entry(d).or_insert(0) += 1;
        }
    }
    hist
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub degree_histogram: BTreeMap<u32, usize>,
    pub sparsity: f64,
    pub num_users: usize,
    pub num_items: usize,
}

pub fn dataset_stats(ds: &InteractionDataset) -> DatasetStats {
    DatasetStats {
        degree_histogram: degree_histogram(ds),
        sparsity: ds.sparsity(),
        num_users: ds.num_users(),
        num_items: ds.num_items(),
    }
}

/// Parameters of the synthetic long-tail generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub interactions_per_user: usize,
    pub zipf_exponent: f64,
    pub kg_relations: usize,
    pub kg_triples_per_item: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 500,
            num_items: 300,
            interactions_per_user: 20,
            zipf_exponent: 1.2,
            kg_relations: 4,
            kg_triples_per_item: 3,
            seed: 7,
        }
    }
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|k| (k as f64).powf(-s)).collect()
}

/// Zipf-distributed interactions plus an attribute KG.
///
/// Items are assigned popularity ranks by a seeded permutation and sampled
/// with probability ∝ rank^(-s); a user's repeated draws are resampled. The
/// KG links every item to distinct attribute entities `N..N+⌊N/2⌋` chosen
/// with Zipf weights over attributes, so rare items share neighbours with
/// popular ones.
pub fn gen_synthetic_longtail(spec: &SyntheticSpec) -> Result<(InteractionDataset, KnowledgeGraph)> {
    let SyntheticSpec {
        num_users,
        num_items,
        interactions_per_user,
        zipf_exponent,
        kg_relations,
        kg_triples_per_item,
        seed,
    } = *spec;
    if num_users == 0
        || num_items == 0
        || interactions_per_user == 0
        || kg_relations == 0
        || kg_triples_per_item == 0
    {
        return Err(Error::InvalidArgument("synthetic counts must be positive".into()));
    }
    if !(zipf_exponent > 0.0 && zipf_exponent.is_finite()) {
        return Err(Error::InvalidArgument("zipf exponent must be positive".into()));
    }
    if interactions_per_user >= num_items {
        return Err(Error::InfeasibleDensity {
            per_user: interactions_per_user,
            items: num_items,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_rank: Vec<u32> = (0..num_items as u32).collect();
    by_rank.shuffle(&mut rng);
    let item_dist = WeightedIndex::new(zipf_weights(num_items, zipf_exponent))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut pairs = Vec::with_capacity(num_users * interactions_per_user);
    for u in 0..num_users as u32 {
        let mut chosen = BTreeSet::new();
        while chosen.len() < interactions_per_user {
            chosen.insert(by_rank[item_dist.sample(&mut rng)]);
        }
        pairs.extend(chosen.into_iter().map(|i| (u, i)));
    }
    let ds = InteractionDataset::new(num_users, num_items, pairs)?;

    let num_attrs = (num_items / 2).max(1);
    let per_item = kg_triples_per_item.min(num_attrs);
    let attr_dist = WeightedIndex::new(zipf_weights(num_attrs, zipf_exponent))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut triples = Vec::with_capacity(num_items * per_item);
    for item in 0..num_items as u32 {
        let mut attrs = BTreeSet::new();
        while attrs.len() < per_item {
            attrs.insert(attr_dist.sample(&mut rng));
        }
        for a in attrs {
            let rel = rng.random_range(0..kg_relations as u32);
            triples.push(Triple::new(item, rel, (num_items + a) as u32));
        }
    }
    let kg = KnowledgeGraph::new(num_items, num_items + num_attrs, kg_relations, triples)?;
    Ok((ds, kg))
}
