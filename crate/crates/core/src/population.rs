//! Islands, score-ordered archives, the per-instance Pareto front and the
//! three parent selectors.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::candidate::{CandidateId, InstanceScore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub id: CandidateId,
    pub parent_id: Option<CandidateId>,
    pub island: usize,
    pub score: f64,
    pub per_instance: Vec<InstanceScore>,
    /// Evolve-region text, used for novelty.
    pub region_text: String,
    pub children: u32,
    /// Source of a migrated copy. Copies have no parent and credit no child.
    #[serde(default)]
    pub migrated_from: Option<CandidateId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Island {
    pub index: usize,
    pub members: Vec<CandidateId>,
    /// Best first; ties go to the older candidate.
    pub archive: Vec<CandidateId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub best: BTreeMap<String, f64>,
    pub holders: BTreeMap<String, BTreeSet<CandidateId>>,
}

impl ParetoFront {
    pub fn update(&mut self, id: CandidateId, scores: &[InstanceScore]) {
        for s in scores {
            match self.best.get(&s.id) {
                Some(&b) if s.score < b => {}
                Some(&b) if s.score == b => {
                    self.holders.entry(s.id.clone()).or_default().insert(id);
                }
                _ => {
                    self.best.insert(s.id.clone(), s.score);
                    self.holders.insert(s.id.clone(), BTreeSet::from([id]));
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.holders.values().all(BTreeSet::is_empty)
    }

    pub fn on_front(&self) -> BTreeSet<CandidateId> {
        self.holders.values().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchiveEntry {
    pub id: CandidateId,
    pub score: f64,
    pub children: u32,
    pub novelty: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inserted {
    pub entered_archive: bool,
    pub evicted: Option<CandidateId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Migration {
    pub from_island: usize,
    pub to_island: usize,
    pub source: CandidateId,
    pub copy: CandidateId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub archive_size: usize,
    pub islands: Vec<Island>,
    pub members: BTreeMap<CandidateId, Member>,
    pub front: ParetoFront,
}

fn better(a: (f64, CandidateId), b: (f64, CandidateId)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

impl Population {
    pub fn new(num_islands: usize, archive_size: usize) -> Self {
        Self {
            archive_size,
            islands: (0..num_islands)
                .map(|index| Island {
                    index,
                    members: Vec::new(),
                    archive: Vec::new(),
                })
                .collect(),
            members: BTreeMap::new(),
            front: ParetoFront::default(),
        }
    }

    pub fn contains(&self, id: CandidateId) -> bool {
        self.members.contains_key(&id)
    }

    pub fn score(&self, id: CandidateId) -> Option<f64> {
        self.members.get(&id).map(|m| m.score)
    }

    fn key(&self, id: CandidateId) -> (f64, CandidateId) {
        (self.members[&id].score, id)
    }

    fn archive_insert(&mut self, island: usize, id: CandidateId) -> Inserted {
        let key = self.key(id);
        let archive = &self.islands[island].archive;
        let full = archive.len() >= self.archive_size;
        if full && !archive.last().is_some_and(|&min| key.0 > self.members[&min].score) {
            return Inserted {
                entered_archive: false,
                evicted: None,
            };
        }
        let pos = archive.partition_point(|&other| better(self.key(other), key));
        let archive = &mut self.islands[island].archive;
        archive.insert(pos, id);
        let evicted = if archive.len() > self.archive_size {
            archive.pop()
        } else {
            None
        };
        Inserted {
            entered_archive: true,
            evicted,
        }
    }

    /// Adds a scored member to its island, archive and the Pareto front, and
    /// credits its parent with a child.
    pub fn insert(&mut self, member: Member) -> Inserted {
        let (id, island) = (member.id, member.island);
        assert!(island < self.islands.len(), "island {island} out of range");
        if let Some(p) = member.parent_id.and_then(|p| self.members.get_mut(&p)) {
            p.children += 1;
        }
        self.front.update(id, &member.per_instance);
        self.members.insert(id, member);
        self.islands[island].members.push(id);
        self.archive_insert(island, id)
    }

    /// Counts a child that was stored but kept out of the pools.
    pub fn credit_child(&mut self, parent: CandidateId) {
        if let Some(p) = self.members.get_mut(&parent) {
            p.children += 1;
        }
    }

    /// Copies the top `ceil(rate * |members|)` of each island into the next
    /// island of the ring under fresh ids drawn from `next_id`.
    pub fn migrate(&mut self, rate: f64, next_id: &mut CandidateId) -> Vec<Migration> {
        let n = self.islands.len();
        if n < 2 || rate <= 0.0 {
            return Vec::new();
        }
        let picks: Vec<Vec<CandidateId>> = self
            .islands
            .iter()
            .map(|isl| {
                let k = (rate * isl.members.len() as f64).ceil() as usize;
                let mut order = isl.members.clone();
                order.sort_by(|&a, &b| {
                    let (ka, kb) = (self.key(a), self.key(b));
                    kb.0.total_cmp(&ka.0).then(ka.1.cmp(&kb.1))
                });
                order.truncate(k);
                order
            })
            .collect();
        let mut out = Vec::new();
        for (from, sources) in picks.into_iter().enumerate() {
            let to = (from + 1) % n;
            for source in sources {
                let copy = *next_id;
                *next_id += 1;
                let orig = &self.members[&source];
                let member = Member {
                    id: copy,
                    parent_id: None,
                    island: to,
                    score: orig.score,
                    per_instance: orig.per_instance.clone(),
                    region_text: orig.region_text.clone(),
                    children: 0,
                    migrated_from: Some(source),
                };
                self.front.update(copy, &member.per_instance);
                self.members.insert(copy, member);
                self.islands[to].members.push(copy);
                self.archive_insert(to, copy);
                out.push(Migration {
                    from_island: from,
                    to_island: to,
                    source,
                    copy,
                });
            }
        }
        out
    }

    /// Restricts every pool to candidates with id at most `id`, rebuilding
    /// archives and the front from that slice.
    pub fn rollback(&mut self, id: CandidateId) {
        let kept: Vec<Member> = self.members.range(..=id).map(|(_, m)| m.clone()).collect();
        let islands = self.islands.len();
        let archive_size = self.archive_size;
        *self = Self::new(islands, archive_size);
        for mut m in kept {
            m.children = 0;
            self.insert(m);
        }
    }

    pub fn archive_entries(&self, island: usize) -> Vec<ArchiveEntry> {
        let archive = &self.islands[island].archive;
        archive
            .iter()
            .map(|&id| {
                let m = &self.members[&id];
                let others: Vec<&str> = archive
                    .iter()
                    .filter(|&&o| o != id)
                    .map(|o| self.members[o].region_text.as_str())
                    .collect();
                ArchiveEntry {
                    id,
                    score: m.score,
                    children: m.children,
                    novelty: novelty(&m.region_text, &others),
                }
            })
            .collect()
    }

    /// Global best, ties to the older candidate.
    pub fn best(&self) -> Option<CandidateId> {
        self.members
            .keys()
            .copied()
            .reduce(|a, b| if better(self.key(b), self.key(a)) { b } else { a })
    }

    /// The `k` best archive members of an island, `exclude` left out.
    pub fn top_of_island(&self, island: usize, k: usize, exclude: CandidateId) -> Vec<CandidateId> {
        self.islands[island]
            .archive
            .iter()
            .copied()
            .filter(|&id| id != exclude)
            .take(k)
            .collect()
    }
}

pub fn select_parent_island(island: &Island, exploration: f64, exploitation: f64, rng: &mut impl Rng) -> CandidateId {
    assert!(!island.members.is_empty(), "island {} is empty", island.index);
    let x: f64 = rng.random();
    let pool: Vec<CandidateId> = if x < exploration || island.archive.is_empty() {
        island.members.clone()
    } else if x < exploration + exploitation {
        island.archive.clone()
    } else {
        let mut seen = HashSet::new();
        island
            .members
            .iter()
            .chain(&island.archive)
            .copied()
            .filter(|id| seen.insert(*id))
            .collect()
    };
    pool[rng.random_range(0..pool.len())]
}

pub fn select_parent_pareto(front: &ParetoFront, rng: &mut impl Rng) -> CandidateId {
    let instances: Vec<&BTreeSet<CandidateId>> = front.holders.values().filter(|h| !h.is_empty()).collect();
    assert!(!instances.is_empty(), "empty Pareto front");
    let holders = instances[rng.random_range(0..instances.len())];
    *holders
        .iter()
        .nth(rng.random_range(0..holders.len()))
        .expect("index in range")
}

/// Weight of the entry at `rank` (0 = best).
pub fn archive_weight(entry: &ArchiveEntry, rank: usize, archive_size: usize) -> f64 {
    let rank_weight = archive_size.saturating_sub(rank) as f64 / archive_size as f64;
    rank_weight * (1.0 + entry.novelty) / (1.0 + f64::from(entry.children))
}

/// Samples an entry; `entries` must be in archive (rank) order.
pub fn select_parent_weighted(entries: &[ArchiveEntry], archive_size: usize, rng: &mut impl Rng) -> CandidateId {
    assert!(!entries.is_empty(), "empty archive");
    let weights: Vec<f64> = entries
        .iter()
        .enumerate()
        .map(|(rank, e)| archive_weight(e, rank, archive_size))
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return entries[rng.random_range(0..entries.len())].id;
    }
    let mut x = rng.random::<f64>() * total;
    for (e, w) in entries.iter().zip(&weights) {
        if x < *w {
            return e.id;
        }
        x -= w;
    }
    entries.last().expect("nonempty").id
}

fn shingles(text: &str) -> HashSet<Vec<&str>> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() < 3 {
        return if tokens.is_empty() {
            HashSet::new()
        } else {
            HashSet::from([tokens])
        };
    }
    tokens.windows(3).map(<[&str]>::to_vec).collect()
}

/// One minus the largest 3-gram Jaccard similarity to any archive text.
pub fn novelty(text: &str, archive: &[&str]) -> f64 {
    let mine = shingles(text);
    let mut max_sim: f64 = 0.0;
    for other in archive {
        let theirs = shingles(other);
        let union = mine.union(&theirs).count();
        let sim = if union == 0 {
            1.0
        } else {
            mine.intersection(&theirs).count() as f64 / union as f64
        };
        max_sim = max_sim.max(sim);
    }
    1.0 - max_sim
}
