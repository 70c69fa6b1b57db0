//! Planted-preference interaction logs for controlled experiments.
//!
//! Items split into a planted popular block, liked by most users, and
//! long-tail clusters; each user prefers one cluster. The latent factors that
//! drive the sampling double as a frozen embedding table.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ingest::{Interaction, InteractionLog};
use crate::pmf::EmbeddingTable;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// Items `0..n_popular` form the planted popular block.
    pub n_popular: usize,
    pub n_clusters: usize,
    /// Embedding width; at least `1 + n_clusters`.
    pub d: usize,
    pub p_popular: f64,
    pub p_cluster: f64,
    pub p_other: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 20,
            n_items: 50,
            n_popular: 10,
            n_clusters: 4,
            d: 8,
            p_popular: 0.9,
            p_cluster: 0.35,
            p_other: 0.03,
            noise: 0.3,
        }
    }
}

impl SynthConfig {
    /// Scaled-up catalog for long online runs.
    pub fn large(n_items: usize) -> Self {
        SynthConfig {
            n_items,
            n_popular: n_items / 5,
            ..SynthConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_clusters == 0 || self.n_popular == 0 || self.n_popular >= self.n_items {
            return Err(Error::InvalidArgument("synthetic sizes must be positive with a nonempty long tail".into()));
        }
        if self.d < 1 + self.n_clusters {
            return Err(Error::InvalidArgument(format!(
                "embedding width {} cannot hold {} clusters",
                self.d, self.n_clusters
            )));
        }
        for p in [self.p_popular, self.p_cluster, self.p_other] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("probability {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub log: InteractionLog,
    pub embeddings: EmbeddingTable,
    pub user_cluster: Vec<usize>,
    /// Cluster of each long-tail item; `None` for the popular block.
    pub item_cluster: Vec<Option<usize>>,
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthData> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "synth");
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let d = cfg.d;

    let item_cluster: Vec<Option<usize>> = (0..cfg.n_items)
        .map(|i| (i >= cfg.n_popular).then(|| (i - cfg.n_popular) % cfg.n_clusters))
        .collect();
    let user_cluster: Vec<usize> = (0..cfg.n_users).map(|u| u % cfg.n_clusters).collect();

    let mut items = vec![0.0; cfg.n_items * d];
    for (i, c) in item_cluster.iter().enumerate() {
        let row = &mut items[i * d..(i + 1) * d];
        for x in row.iter_mut() {
            *x = noise.sample(&mut r);
        }
        match c {
            None => row[0] += 1.0,
            Some(c) => row[1 + c] += 1.0,
        }
        // Unit length, so no item wins argmax over random directions by norm alone.
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    let mut users = vec![0.0; cfg.n_users * d];
    for (u, &c) in user_cluster.iter().enumerate() {
        let row = &mut users[u * d..(u + 1) * d];
        for x in row.iter_mut() {
            *x = noise.sample(&mut r);
        }
        row[0] += 1.0;
        row[1 + c] += 1.0;
    }

    let mut interactions = Vec::new();
    for (u, &uc) in user_cluster.iter().enumerate() {
        let mut liked: Vec<usize> = (0..cfg.n_items)
            .filter(|&i| {
                let p = match item_cluster[i] {
                    None => cfg.p_popular,
                    Some(c) if c == uc => cfg.p_cluster,
                    Some(_) => cfg.p_other,
                };
                r.random::<f64>() < p
            })
            .collect();
        liked.shuffle(&mut r);
        for (t, i) in liked.into_iter().enumerate() {
            interactions.push(Interaction {
                user_id: u,
                item_id: i,
                rating: r.random_range(3..=5) as f64,
                timestamp: 1_000_000 + (u * cfg.n_items + t) as u64,
            });
        }
    }
    let log = InteractionLog::from_dense(interactions, cfg.n_users, cfg.n_items);
    let embeddings = EmbeddingTable::new(cfg.n_users, cfg.n_items, d, users, items)?;
    Ok(SynthData { log, embeddings, user_cluster, item_cluster })
}

/// Writes the log in tab-separated `user item rating timestamp` form with
/// one-based ids.
pub fn write_udata(log: &InteractionLog, path: &Path) -> Result<()> {
    let mut text = Vec::new();
    for x in &log.interactions {
        writeln!(text, "{}\t{}\t{}\t{}", x.user_id + 1, x.item_id + 1, x.rating, x.timestamp)
            .expect("writing to memory");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
