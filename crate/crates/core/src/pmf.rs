use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ingest::SplitDataset;
use crate::rng;

const EMB_MAGIC: &[u8] = b"FCPO-EMB v1\n";

/// Frozen user and item vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub user_vectors: Vec<f64>,
    pub item_vectors: Vec<f64>,
    pub d: usize,
    pub n_users: usize,
    pub n_items: usize,
}

impl EmbeddingTable {
    pub fn new(n_users: usize, n_items: usize, d: usize, user_vectors: Vec<f64>, item_vectors: Vec<f64>) -> Result<Self> {
        if user_vectors.len() != n_users * d {
            return Err(Error::Shape { expected: n_users * d, got: user_vectors.len() });
        }
        if item_vectors.len() != n_items * d {
            return Err(Error::Shape { expected: n_items * d, got: item_vectors.len() });
        }
        let table = EmbeddingTable { user_vectors, item_vectors, d, n_users, n_items };
        if !table.is_finite() {
            return Err(Error::NonFinite("embedding table"));
        }
        Ok(table)
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.user_vectors[u * self.d..(u + 1) * self.d]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.item_vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn is_finite(&self) -> bool {
        self.user_vectors.iter().chain(&self.item_vectors).all(|x| x.is_finite())
    }

    /// Scores of every item for `user`.
    pub fn user_scores(&self, user: usize) -> Vec<f64> {
        let u = self.user(user);
        (0..self.n_items).map(|i| dot(u, self.item(i))).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmfConfig {
    pub d: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
}

impl Default for PmfConfig {
    fn default() -> Self {
        PmfConfig { d: 100, epochs: 50, lr: 0.01, l2: 0.1, batch_size: 64 }
    }
}

#[derive(Debug, Clone)]
pub struct PmfFit {
    pub table: EmbeddingTable,
    /// Mean regularized squared error after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean of `(r - u.v)^2 + l2 (|u|^2 + |v|^2)` over the ratings.
pub fn pmf_loss(table: &EmbeddingTable, ratings: &[(usize, usize, f64)], l2: f64) -> f64 {
    if ratings.is_empty() {
        return 0.0;
    }
    let total: f64 = ratings
        .iter()
        .map(|&(u, i, r)| {
            let (uv, iv) = (table.user(u), table.item(i));
            let e = r - dot(uv, iv);
            e * e + l2 * (dot(uv, uv) + dot(iv, iv))
        })
        .sum();
    total / ratings.len() as f64
}

/// Minibatch SGD on the training ratings. Gradients within a batch are taken
/// at the batch's starting point and summed.
pub fn train_pmf(train: &SplitDataset, cfg: &PmfConfig, seed: u64) -> Result<PmfFit> {
    if cfg.d == 0 {
        return Err(Error::InvalidArgument("embedding dimension must be at least 1".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let d = cfg.d;
    let mut init = rng::stream(seed, "pmf");
    let mut table = EmbeddingTable {
        user_vectors: (0..train.n_users * d).map(|_| init.random_range(-0.01..=0.01)).collect(),
        item_vectors: (0..train.n_items * d).map(|_| init.random_range(-0.01..=0.01)).collect(),
        d,
        n_users: train.n_users,
        n_items: train.n_items,
    };
    let mut ratings: Vec<(usize, usize, f64)> = train
        .train
        .iter()
        .flatten()
        .map(|x| (x.user_id, x.item_id, x.rating))
        .collect();
    let mut shuffle = rng::stream(seed, "pmf-shuffle");
    let batch = cfg.batch_size.max(1);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut gu = vec![0.0; d];
    let mut gi = vec![0.0; d];
    for epoch in 0..cfg.epochs {
        ratings.shuffle(&mut shuffle);
        for chunk in ratings.chunks(batch) {
            let mut updates: Vec<(bool, usize, Vec<f64>)> = Vec::with_capacity(2 * chunk.len());
            for &(u, i, r) in chunk {
                let (uv, iv) = (table.user(u), table.item(i));
                let e = r - dot(uv, iv);
                for k in 0..d {
                    gu[k] = -2.0 * e * iv[k] + 2.0 * cfg.l2 * uv[k];
                    gi[k] = -2.0 * e * uv[k] + 2.0 * cfg.l2 * iv[k];
                }
                updates.push((true, u, gu.clone()));
                updates.push((false, i, gi.clone()));
            }
            for (is_user, row, g) in updates {
                let dst = if is_user {
                    &mut table.user_vectors[row * d..(row + 1) * d]
                } else {
                    &mut table.item_vectors[row * d..(row + 1) * d]
                };
                for (x, gk) in dst.iter_mut().zip(&g) {
                    *x -= cfg.lr * gk;
                }
            }
        }
        let loss = pmf_loss(&table, &ratings, cfg.l2);
        if !loss.is_finite() || !table.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("pmf epoch {epoch}: loss {loss:.5}");
        epoch_losses.push(loss);
    }
    Ok(PmfFit { table, epoch_losses })
}

pub fn predict_score(table: &EmbeddingTable, user: usize, item: usize) -> Result<f64> {
    if user >= table.n_users {
        return Err(Error::OutOfRange { what: "user", index: user, len: table.n_users });
    }
    if item >= table.n_items {
        return Err(Error::OutOfRange { what: "item", index: item, len: table.n_items });
    }
    Ok(dot(table.user(user), table.item(item)))
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(EMB_MAGIC)?;
        for n in [table.n_users, table.n_items, table.d] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for x in table.user_vectors.iter().chain(&table.item_vectors) {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse { path: path.to_path_buf(), line: 0, msg: msg.to_string() };
    let body = bytes.strip_prefix(EMB_MAGIC).ok_or_else(|| bad("missing FCPO-EMB v1 header"))?;
    if body.len() < 24 {
        return Err(bad("truncated dimensions"));
    }
    let dim = |k: usize| u64::from_le_bytes(body[8 * k..8 * k + 8].try_into().unwrap()) as usize;
    let (n_users, n_items, d) = (dim(0), dim(1), dim(2));
    let values = &body[24..];
    let n_values = (n_users + n_items)
        .checked_mul(d)
        .ok_or_else(|| bad("dimensions overflow"))?;
    if values.len() != n_values * 8 {
        return Err(bad("payload length does not match dimensions"));
    }
    let mut floats = values.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let user_vectors: Vec<f64> = floats.by_ref().take(n_users * d).collect();
    let item_vectors: Vec<f64> = floats.collect();
    EmbeddingTable::new(n_users, n_items, d, user_vectors, item_vectors)
}
