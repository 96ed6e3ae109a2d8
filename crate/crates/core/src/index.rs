//! Nearest-neighbour indexes over real vectors: a layered small-world graph
//! (HNSW) for approximate queries and a linear scan for exact ones.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::l2_distance;
use crate::error::{Error, Result};
use crate::seed::Rng;

pub trait NnIndex {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Store `point` and return its id. Ids are dense and assigned in
    /// insertion order.
    fn insert(&mut self, point: &[f64]) -> Result<usize>;
    /// `(distance, id)` of the (approximate) nearest stored point. The
    /// distance is always the true distance to the returned point.
    fn nn_distance(&self, query: &[f64]) -> Result<(f64, usize)>;
    fn point(&self, id: usize) -> Option<&[f64]>;
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::Dimension { expected, got })
    } else {
        Ok(())
    }
}

/// Flat array with a full scan; ties go to the lowest id.
#[derive(Debug, Clone)]
pub struct ExactIndex {
    dim: usize,
    points: Vec<Vec<f64>>,
}

impl ExactIndex {
    pub fn new(dim: usize) -> Self {
        ExactIndex { dim, points: Vec::new() }
    }
}

impl NnIndex for ExactIndex {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn insert(&mut self, point: &[f64]) -> Result<usize> {
        check_dim(self.dim, point.len())?;
        self.points.push(point.to_vec());
        Ok(self.points.len() - 1)
    }

    fn nn_distance(&self, query: &[f64]) -> Result<(f64, usize)> {
        check_dim(self.dim, query.len())?;
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.points.iter().enumerate() {
            let d = l2_distance(query, p);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.ok_or(Error::EmptyIndex)
    }

    fn point(&self, id: usize) -> Option<&[f64]> {
        self.points.get(id).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HnswParams {
    pub m_link: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    /// Level multiplier; `None` means `1 / ln(m_link)`.
    pub m_l: Option<f64>,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m_link: 16,
            ef_construction: 200,
            ef_search: 64,
            m_l: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    d: f64,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d.total_cmp(&other.d).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Visited {
    bits: Vec<u64>,
    count: usize,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited {
            bits: vec![0; n.div_ceil(64)],
            count: 0,
        }
    }

    /// Mark `id`; true if it was not marked before.
    fn insert(&mut self, id: u32) -> bool {
        let (w, b) = (id as usize / 64, id as usize % 64);
        let fresh = self.bits[w] & (1 << b) == 0;
        if fresh {
            self.bits[w] |= 1 << b;
            self.count += 1;
        }
        fresh
    }
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    dim: usize,
    pub params: HnswParams,
    m_l: f64,
    points: Vec<Vec<f64>>,
    /// `links[node][layer]`
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    max_level: usize,
    rng: Rng,
}

impl HnswIndex {
    pub fn new(dim: usize, params: HnswParams) -> Self {
        assert!(params.m_link >= 2, "m_link must be at least 2");
        let m_l = params.m_l.unwrap_or(1.0 / (params.m_link as f64).ln());
        HnswIndex {
            dim,
            params,
            m_l,
            points: Vec::new(),
            links: Vec::new(),
            entry: None,
            max_level: 0,
            rng: crate::seed::RngSeed(params.seed).stream(crate::seed::Stream::Index),
        }
    }

    pub fn level_of(&self, id: usize) -> usize {
        self.links[id].len() - 1
    }

    pub fn neighbors(&self, id: usize, layer: usize) -> &[u32] {
        &self.links[id][layer]
    }

    pub fn entry_point(&self) -> Option<usize> {
        self.entry.map(|e| e as usize)
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m_link
        } else {
            self.params.m_link
        }
    }

    fn dist(&self, q: &[f64], id: u32) -> f64 {
        l2_distance(q, &self.points[id as usize])
    }

    fn random_level(&mut self) -> usize {
        let u: f64 = 1.0 - self.rng.random::<f64>();
        (-u.ln() * self.m_l).floor() as usize
    }

    /// Beam search on one layer. Returns up to `ef` candidates sorted by
    /// ascending distance.
    fn search_layer(&self, q: &[f64], entries: &[Cand], ef: usize, layer: usize, visited: &mut Visited) -> Vec<Cand> {
        let mut frontier: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        let mut best: BinaryHeap<Cand> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e.id) {
                frontier.push(Reverse(e));
                best.push(e);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(Reverse(c)) = frontier.pop() {
            let worst = best.peek().map_or(f64::INFINITY, |w| w.d);
            if c.d > worst && best.len() >= ef {
                break;
            }
            for &nb in &self.links[c.id as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let d = self.dist(q, nb);
                let worst = best.peek().map_or(f64::INFINITY, |w| w.d);
                if best.len() < ef || d < worst {
                    let cand = Cand { d, id: nb };
                    frontier.push(Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Neighbour selection heuristic: walk candidates by ascending distance
    /// and keep one only if it is closer to the base than to every
    /// neighbour kept so far.
    fn select_neighbors(&self, sorted: &[Cand], m: usize) -> Vec<u32> {
        let mut out: Vec<Cand> = Vec::with_capacity(m);
        for &c in sorted {
            if out.len() >= m {
                break;
            }
            let p = &self.points[c.id as usize];
            if out.iter().all(|r| c.d < self.dist(p, r.id)) {
                out.push(c);
            }
        }
        out.into_iter().map(|c| c.id).collect()
    }

    fn greedy_descent(&self, q: &[f64], from_level: usize, to_level: usize, mut cur: Cand, visited_count: &mut usize) -> Cand {
        for layer in (to_level + 1..=from_level).rev() {
            let mut changed = true;
            while changed {
                changed = false;
                for &nb in &self.links[cur.id as usize][layer] {
                    *visited_count += 1;
                    let d = self.dist(q, nb);
                    if d < cur.d {
                        cur = Cand { d, id: nb };
                        changed = true;
                    }
                }
            }
        }
        cur
    }

    /// Query returning `(distance, id, visited_nodes)`.
    pub fn search_with_stats(&self, query: &[f64]) -> Result<(f64, usize, usize)> {
        check_dim(self.dim, query.len())?;
        let entry = self.entry.ok_or(Error::EmptyIndex)?;
        let mut count = 0;
        let start = Cand {
            d: self.dist(query, entry),
            id: entry,
        };
        let cur = self.greedy_descent(query, self.max_level, 0, start, &mut count);
        let mut visited = Visited::new(self.points.len());
        let found = self.search_layer(query, &[cur], self.params.ef_search.max(1), 0, &mut visited);
        let best = found[0];
        Ok((best.d, best.id as usize, count + visited.count))
    }
}

impl NnIndex for HnswIndex {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn insert(&mut self, point: &[f64]) -> Result<usize> {
        check_dim(self.dim, point.len())?;
        let id = self.points.len() as u32;
        let level = self.random_level();
        self.points.push(point.to_vec());
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(id);
            self.max_level = level;
            return Ok(id as usize);
        };
        let q = point.to_vec();
        let mut count = 0;
        let mut cur = Cand {
            d: self.dist(&q, entry),
            id: entry,
        };
        if self.max_level > level {
            cur = self.greedy_descent(&q, self.max_level, level, cur, &mut count);
        }
        let mut entries = vec![cur];
        for layer in (0..=level.min(self.max_level)).rev() {
            let mut visited = Visited::new(self.points.len());
            let found = self.search_layer(&q, &entries, self.params.ef_construction, layer, &mut visited);
            let chosen = self.select_neighbors(&found, self.params.m_link);
            self.links[id as usize][layer] = chosen.clone();
            let cap = self.cap(layer);
            for nb in chosen {
                let list = &mut self.links[nb as usize][layer];
                list.push(id);
                if list.len() > cap {
                    let base = self.points[nb as usize].clone();
                    let mut cands: Vec<Cand> = self.links[nb as usize][layer]
                        .iter()
                        .map(|&x| Cand {
                            d: self.dist(&base, x),
                            id: x,
                        })
                        .collect();
                    cands.sort();
                    let pruned = self.select_neighbors(&cands, cap);
                    self.links[nb as usize][layer] = pruned;
                }
            }
            entries = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(id);
        }
        Ok(id as usize)
    }

    fn nn_distance(&self, query: &[f64]) -> Result<(f64, usize)> {
        self.search_with_stats(query).map(|(d, id, _)| (d, id))
    }

    fn point(&self, id: usize) -> Option<&[f64]> {
        self.points.get(id).map(Vec::as_slice)
    }
}

/// Either index behind one type, chosen by `filter.exact`.
#[derive(Debug, Clone)]
pub enum AnyIndex {
    Hnsw(HnswIndex),
    Exact(ExactIndex),
}

impl AnyIndex {
    pub fn new(dim: usize, exact: bool, params: HnswParams) -> Self {
        if exact {
            AnyIndex::Exact(ExactIndex::new(dim))
        } else {
            AnyIndex::Hnsw(HnswIndex::new(dim, params))
        }
    }

    fn inner(&self) -> &dyn NnIndex {
        match self {
            AnyIndex::Hnsw(h) => h,
            AnyIndex::Exact(e) => e,
        }
    }
}

impl NnIndex for AnyIndex {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn len(&self) -> usize {
        self.inner().len()
    }

    fn insert(&mut self, point: &[f64]) -> Result<usize> {
        match self {
            AnyIndex::Hnsw(h) => h.insert(point),
            AnyIndex::Exact(e) => e.insert(point),
        }
    }

    fn nn_distance(&self, query: &[f64]) -> Result<(f64, usize)> {
        self.inner().nn_distance(query)
    }

    fn point(&self, id: usize) -> Option<&[f64]> {
        self.inner().point(id)
    }
}

/// Fraction of queries whose returned id has the exact minimum distance.
pub fn recall_at_1<A: NnIndex, B: NnIndex>(approx: &A, exact: &B, queries: &[Vec<f64>]) -> Result<f64> {
    let mut hits = 0;
    for q in queries {
        let (da, _) = approx.nn_distance(q)?;
        let (de, _) = exact.nn_distance(q)?;
        if da <= de {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len().max(1) as f64)
}

/// Median visited-node count over `queries`.
pub fn median_visited(idx: &HnswIndex, queries: &[Vec<f64>]) -> Result<f64> {
    let mut v = queries
        .iter()
        .map(|q| idx.search_with_stats(q).map(|(_, _, c)| c as f64))
        .collect::<Result<Vec<_>>>()?;
    v.sort_by(|a, b| a.total_cmp(b));
    Ok(if v.is_empty() { 0.0 } else { v[v.len() / 2] })
}

pub fn uniform_points(n: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect()
}
