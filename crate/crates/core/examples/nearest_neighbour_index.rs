//! The approximate nearest-neighbour index used to warm-start embeddings,
//! checked against an exact scan.

use iegp::ann::{AnnConfig, AnnIndex};
use iegp::kernels::seeded_rng;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> iegp::Result<()> {
    let dim = 8;
    let mut rng = seeded_rng(4);
    let mut point = || -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let mut index = AnnIndex::new(dim, AnnConfig::default())?;
    for _ in 0..5000 {
        index.insert(&point())?;
    }
    let queries: Vec<Vec<f64>> = (0..500).map(|_| point()).collect();
    let mut hits = 0;
    for q in &queries {
        hits += usize::from(index.query(q)? == index.exact_nearest(q));
    }
    println!("{} points, recall@1 over {} queries: {:.3}", index.len(), queries.len(), hits as f64 / queries.len() as f64);
    Ok(())
}
