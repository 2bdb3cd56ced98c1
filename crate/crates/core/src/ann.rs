//! Approximate nearest-neighbour search over observations, used to warm-start
//! latent embeddings.
//!
//! The default backend is a hierarchical navigable small-world graph; an
//! exhaustive scan is available for testing and for small streams. Items are
//! identified by insertion order.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{seeded_rng, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnBackend {
    Hnsw,
    BruteForce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnConfig {
    pub backend: AnnBackend,
    /// Neighbour cap per node on the upper layers; the base layer allows twice this.
    pub max_degree: usize,
    /// Candidate-list width for both construction and queries.
    pub ef: usize,
    pub seed: u64,
}

impl Default for AnnConfig {
    fn default() -> Self {
        AnnConfig {
            backend: AnnBackend::Hnsw,
            max_degree: 16,
            ef: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    id: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone)]
pub struct AnnIndex {
    config: AnnConfig,
    dim: usize,
    points: Vec<Vec<f64>>,
    /// `links[node][layer]` lists the neighbours of `node` on `layer`.
    links: Vec<Vec<Vec<usize>>>,
    entry: Option<usize>,
    rng: SeededRng,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl AnnIndex {
    pub fn new(dim: usize, config: AnnConfig) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("index dimension must be positive".into()));
        }
        if config.max_degree < 2 || config.ef == 0 {
            return Err(Error::InvalidArgument("max_degree must be ≥ 2 and ef ≥ 1".into()));
        }
        Ok(AnnIndex {
            config,
            dim,
            points: Vec::new(),
            links: Vec::new(),
            entry: None,
            rng: seeded_rng(config.seed),
        })
    }

    pub fn config(&self) -> AnnConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: usize) -> &[f64] {
        &self.points[id]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    fn dist(&self, q: &[f64], id: usize) -> f64 {
        sq_dist(q, &self.points[id])
    }

    fn level_of(&self, id: usize) -> usize {
        self.links[id].len() - 1
    }

    /// Inserts `y` and returns its id (the previous length of the index).
    pub fn insert(&mut self, y: &[f64]) -> Result<usize> {
        check_dim(self.dim, y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("cannot index a non-finite point".into()));
        }
        let id = self.points.len();
        self.points.push(y.to_vec());
        if self.config.backend == AnnBackend::BruteForce {
            self.links.push(vec![Vec::new()]);
            return Ok(id);
        }

        let ml = 1.0 / (self.config.max_degree as f64).ln();
        let u: f64 = self.rng.random::<f64>();
        let level = (-(1.0 - u).ln() * ml).floor() as usize;
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(mut ep) = self.entry else {
            self.entry = Some(id);
            return Ok(id);
        };
        let top = self.level_of(ep);
        for layer in (level + 1..=top).rev() {
            ep = self.greedy(y, ep, layer);
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(y, &eps, self.config.ef, layer);
            let cap = self.cap(layer);
            let chosen: Vec<usize> = found.iter().take(cap).map(|c| c.id).collect();
            for &n in &chosen {
                self.links[n][layer].push(id);
                if self.links[n][layer].len() > cap {
                    self.prune(n, layer);
                }
            }
            self.links[id][layer] = chosen;
            eps = found.iter().map(|c| c.id).collect();
        }
        if level > top {
            self.entry = Some(id);
        }
        Ok(id)
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.config.max_degree
        } else {
            self.config.max_degree
        }
    }

    fn prune(&mut self, node: usize, layer: usize) {
        let base = self.points[node].clone();
        let cap = self.cap(layer);
        let mut ns: Vec<Candidate> = self.links[node][layer]
            .iter()
            .map(|&id| Candidate {
                dist: self.dist(&base, id),
                id,
            })
            .collect();
        ns.sort();
        ns.truncate(cap);
        self.links[node][layer] = ns.into_iter().map(|c| c.id).collect();
    }

    fn greedy(&self, q: &[f64], mut ep: usize, layer: usize) -> usize {
        let mut best = self.dist(q, ep);
        loop {
            let mut moved = false;
            for &n in &self.links[ep][layer] {
                let d = self.dist(q, n);
                if d < best {
                    best = d;
                    ep = n;
                    moved = true;
                }
            }
            if !moved {
                return ep;
            }
        }
    }

    /// Beam search on one layer; result sorted by increasing distance.
    fn search_layer(&self, q: &[f64], eps: &[usize], ef: usize, layer: usize) -> Vec<Candidate> {
        let mut visited: HashSet<usize> = eps.iter().copied().collect();
        let mut frontier: BinaryHeap<Reverse<Candidate>> = BinaryHeap::new();
        let mut results: BinaryHeap<Candidate> = BinaryHeap::new();
        for &id in eps {
            let c = Candidate { dist: self.dist(q, id), id };
            frontier.push(Reverse(c));
            results.push(c);
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(Reverse(c)) = frontier.pop() {
            let worst = results.peek().map_or(f64::INFINITY, |w| w.dist);
            if c.dist > worst && results.len() >= ef {
                break;
            }
            for &n in &self.links[c.id][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let cand = Candidate { dist: self.dist(q, n), id: n };
                let worst = results.peek().map_or(f64::INFINITY, |w| w.dist);
                if results.len() < ef || cand.dist < worst {
                    frontier.push(Reverse(cand));
                    results.push(cand);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        results.into_sorted_vec()
    }

    /// Id of an (approximately) nearest stored point under Euclidean distance.
    pub fn query(&self, y: &[f64]) -> Result<usize> {
        check_dim(self.dim, y.len())?;
        if self.is_empty() {
            return Err(Error::State("query on an empty index".into()));
        }
        match self.config.backend {
            AnnBackend::BruteForce => Ok(self.exact_nearest(y)),
            AnnBackend::Hnsw => {
                let mut ep = self.entry.expect("non-empty index has an entry point");
                for layer in (1..=self.level_of(ep)).rev() {
                    ep = self.greedy(y, ep, layer);
                }
                let found = self.search_layer(y, &[ep], self.config.ef, 0);
                Ok(found[0].id)
            }
        }
    }

    /// Exhaustive scan; ties go to the earliest inserted point.
    pub fn exact_nearest(&self, y: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (id, p) in self.points.iter().enumerate() {
            let d = sq_dist(y, p);
            if d < best.0 {
                best = (d, id);
            }
        }
        best.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn empty_and_single() {
        let mut idx = AnnIndex::new(3, AnnConfig::default()).unwrap();
        assert!(idx.query(&[0.0; 3]).is_err());
        idx.insert(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(idx.query(&[-5.0, 0.0, 9.0]).unwrap(), 0);
        assert!(idx.insert(&[1.0]).is_err());
    }

    #[test]
    fn duplicates_are_found_exactly() {
        let pts = random_points(300, 5, 1);
        let mut idx = AnnIndex::new(5, AnnConfig::default()).unwrap();
        for p in &pts {
            idx.insert(p).unwrap();
        }
        for p in pts.iter().step_by(7) {
            let hit = idx.query(p).unwrap();
            assert_eq!(sq_dist(idx.point(hit), p), 0.0);
        }
    }

    #[test]
    fn recall_against_brute_force() {
        let dim = 10;
        let pts = random_points(1000, dim, 2);
        let queries = random_points(200, dim, 3);
        let mut idx = AnnIndex::new(dim, AnnConfig::default()).unwrap();
        for p in &pts {
            idx.insert(p).unwrap();
        }
        let hits = queries
            .iter()
            .filter(|q| idx.query(q).unwrap() == idx.exact_nearest(q))
            .count();
        let recall = hits as f64 / queries.len() as f64;
        assert!(recall >= 0.9, "recall@1 = {recall}");
    }

    #[test]
    fn construction_is_deterministic() {
        let pts = random_points(200, 4, 4);
        let build = || {
            let mut idx = AnnIndex::new(4, AnnConfig { seed: 9, ..AnnConfig::default() }).unwrap();
            for p in &pts {
                idx.insert(p).unwrap();
            }
            idx
        };
        let (a, b) = (build(), build());
        assert_eq!(a.links, b.links);
        let q = [0.1, 0.2, -0.3, 0.0];
        assert_eq!(a.query(&q).unwrap(), b.query(&q).unwrap());
    }

    #[test]
    fn brute_force_backend() {
        let pts = random_points(50, 2, 5);
        let cfg = AnnConfig {
            backend: AnnBackend::BruteForce,
            ..AnnConfig::default()
        };
        let mut idx = AnnIndex::new(2, cfg).unwrap();
        for p in &pts {
            idx.insert(p).unwrap();
        }
        let q = [0.3, -0.1];
        assert_eq!(idx.query(&q).unwrap(), idx.exact_nearest(&q));
    }
}
