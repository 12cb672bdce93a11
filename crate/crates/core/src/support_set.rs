//! FIFO support set of teacher embeddings and neighbor selection.
//!
//! Entries are identified by their insertion counter (`age`), which doubles
//! as the `support_index` reported in a [`NeighborSet`]. Smaller age means an
//! older entry.

use std::cmp::Ordering;
use std::collections::VecDeque;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::rng::Rng;
use crate::vecmath::{dot, norm, EmbeddingBatch, UNIT_TOLERANCE};
use rand::SeedableRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub embedding: Vec<f64>,
    pub label: Option<usize>,
    pub age: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    capacity: usize,
    dim: usize,
    entries: VecDeque<SupportEntry>,
    next_age: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborOrder {
    CosineDesc,
    Random,
    Oracle,
    CasDesc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub embedding: Vec<f64>,
    /// Cosine similarity to the anchor.
    pub similarity: f64,
    pub support_index: u64,
    pub label: Option<usize>,
}

/// An ordered set of `K` neighbors retrieved for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub anchor: Vec<f64>,
    pub members: Vec<Neighbor>,
    pub order: NeighborOrder,
    /// Set when oracle selection had fewer than `K` same-label candidates and
    /// padded with cosine neighbors.
    pub shortfall: bool,
}

impl NeighborSet {
    pub fn empty(anchor: &[f64], order: NeighborOrder) -> Self {
        Self {
            anchor: anchor.to_vec(),
            members: Vec::new(),
            order,
            shortfall: false,
        }
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn indices(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.support_index).collect()
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &[f64]> {
        self.members.iter().map(|m| m.embedding.as_slice())
    }
}

/// Serializable snapshot of a support set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSnapshot {
    pub version: u32,
    pub dim: usize,
    pub capacity: usize,
    pub next_age: u64,
    pub entries: Vec<SupportEntry>,
}

pub const SNAPSHOT_VERSION: u32 = 1;

/// Descending similarity, then older entry first.
fn rank(a: (f64, u64), b: (f64, u64)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NotNormalized { norm: n });
    }
    Ok(())
}

impl SupportSet {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(invalid("support set capacity and dimension must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
            next_age: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &SupportEntry> {
        self.entries.iter()
    }

    /// Enqueues a batch of unit-norm embeddings and evicts the oldest entries
    /// beyond capacity.
    pub fn refresh(&mut self, batch: &EmbeddingBatch, labels: Option<&[usize]>) -> Result<()> {
        if batch.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: batch.dim(),
            });
        }
        if batch.len() > self.capacity {
            return Err(invalid(format!(
                "batch of {} exceeds support capacity {}",
                batch.len(),
                self.capacity
            )));
        }
        if let Some(l) = labels {
            if l.len() != batch.len() {
                return Err(invalid("label count differs from batch size"));
            }
        }
        for row in batch.rows() {
            check_unit(row)?;
        }
        for (i, row) in batch.rows().enumerate() {
            self.entries.push_back(SupportEntry {
                embedding: row.to_vec(),
                label: labels.map(|l| l[i]),
                age: self.next_age,
            });
            self.next_age += 1;
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    fn neighbor(&self, pos: usize, anchor: &[f64]) -> Neighbor {
        let e = &self.entries[pos];
        Neighbor {
            embedding: e.embedding.clone(),
            similarity: dot(anchor, &e.embedding).clamp(-1.0, 1.0),
            support_index: e.age,
            label: e.label,
        }
    }

    fn check_query(&self, z: &[f64], k: usize) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        check_unit(z)?;
        if k > self.len() {
            return Err(Error::NotEnoughEntries {
                k,
                available: self.len(),
            });
        }
        Ok(())
    }

    /// Storage positions of the `k` most similar entries, best first.
    fn topk_positions(&self, z: &[f64], k: usize, exclude: impl Fn(usize) -> bool) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let mut scored: Vec<(f64, u64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(pos, _)| !exclude(*pos))
            .map(|(pos, e)| (dot(z, &e.embedding).clamp(-1.0, 1.0), e.age, pos))
            .collect();
        let k = k.min(scored.len());
        let cmp = |a: &(f64, u64, usize), b: &(f64, u64, usize)| rank((a.0, a.1), (b.0, b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        scored.into_iter().map(|(_, _, pos)| pos).collect()
    }

    /// The `k` entries with the largest cosine similarity to `z`, in
    /// descending order; equal similarities put the older entry first.
    pub fn topk_neighbors(&self, z: &[f64], k: usize) -> Result<NeighborSet> {
        self.check_query(z, k)?;
        let members = self
            .topk_positions(z, k, |_| false)
            .into_iter()
            .map(|pos| self.neighbor(pos, z))
            .collect();
        Ok(NeighborSet {
            anchor: z.to_vec(),
            members,
            order: NeighborOrder::CosineDesc,
            shortfall: false,
        })
    }

    /// Runs [`SupportSet::topk_neighbors`] for every row of `queries`.
    pub fn topk_batch(
        &self,
        queries: &EmbeddingBatch,
        k: usize,
        exec: Execution,
    ) -> Result<Vec<NeighborSet>> {
        exec.try_map(queries.len(), |i| self.topk_neighbors(queries.row(i), k))
    }

    /// `k` distinct entries drawn uniformly without replacement.
    pub fn random_neighbors(&self, z: &[f64], k: usize, seed: u64) -> Result<NeighborSet> {
        self.check_query(z, k)?;
        let mut rng = Rng::seed_from_u64(seed);
        let members = sample(&mut rng, self.len(), k)
            .into_iter()
            .map(|pos| self.neighbor(pos, z))
            .collect();
        Ok(NeighborSet {
            anchor: z.to_vec(),
            members,
            order: NeighborOrder::Random,
            shortfall: false,
        })
    }

    /// `k` entries sharing `anchor_label`, drawn uniformly among the
    /// candidates. With fewer than `k` candidates, all of them are returned
    /// followed by the most similar remaining entries, and `shortfall` is set.
    pub fn oracle_neighbors(
        &self,
        z: &[f64],
        anchor_label: usize,
        k: usize,
        seed: u64,
    ) -> Result<NeighborSet> {
        self.check_query(z, k)?;
        let mut candidates = Vec::new();
        for (pos, e) in self.entries.iter().enumerate() {
            match e.label {
                Some(l) if l == anchor_label => candidates.push(pos),
                Some(_) => {}
                None => {
                    return Err(Error::MissingLabel(format!(
                        "support entry {} has no label",
                        e.age
                    )))
                }
            }
        }
        let (positions, shortfall) = if candidates.len() >= k {
            let mut rng = Rng::seed_from_u64(seed);
            let picked = sample(&mut rng, candidates.len(), k)
                .into_iter()
                .map(|i| candidates[i])
                .collect::<Vec<_>>();
            (picked, false)
        } else {
            let mut is_candidate = vec![false; self.len()];
            for &p in &candidates {
                is_candidate[p] = true;
            }
            let pad = self.topk_positions(z, k - candidates.len(), |p| is_candidate[p]);
            candidates.extend(pad);
            (candidates, true)
        };
        Ok(NeighborSet {
            anchor: z.to_vec(),
            members: positions.into_iter().map(|p| self.neighbor(p, z)).collect(),
            order: NeighborOrder::Oracle,
            shortfall,
        })
    }

    /// Drops every hidden label.
    pub fn strip_labels(&mut self) {
        for e in &mut self.entries {
            e.label = None;
        }
    }

    pub fn snapshot(&self) -> SupportSnapshot {
        SupportSnapshot {
            version: SNAPSHOT_VERSION,
            dim: self.dim,
            capacity: self.capacity,
            next_age: self.next_age,
            entries: self.entries.iter().cloned().collect(),
        }
    }

    pub fn from_snapshot(snap: SupportSnapshot) -> Result<Self> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(invalid(format!(
                "unsupported support snapshot version {}",
                snap.version
            )));
        }
        if snap.entries.len() > snap.capacity {
            return Err(invalid("snapshot holds more entries than its capacity"));
        }
        let mut set = Self::new(snap.capacity, snap.dim)?;
        for e in &snap.entries {
            if e.embedding.len() != snap.dim {
                return Err(Error::DimensionMismatch {
                    expected: snap.dim,
                    got: e.embedding.len(),
                });
            }
        }
        set.entries = snap.entries.into();
        set.next_age = snap.next_age;
        Ok(set)
    }
}
