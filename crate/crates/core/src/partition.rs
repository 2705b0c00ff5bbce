//! Non-IID client partitions of a [`Dataset`].
//!
//! Both schemes assign train indices and mirror the same per-client class
//! mix onto the test split, so each client's test set follows its own
//! training label distribution.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::seeds::{self, Stream};

const MAX_REDRAWS: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scheme {
    /// Per class, client shares drawn from `Dir(β·1_M)`.
    Dirichlet { beta: f64 },
    /// Each client holds `s` distinct classes.
    Shard { s: usize },
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Dirichlet { beta } => write!(f, "dirichlet:{beta}"),
            Scheme::Shard { s } => write!(f, "shard:{s}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    /// `dirichlet:<β>` or `shard:<s>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("partition must be dirichlet:<beta> or shard:<s>, got {s:?}"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "dirichlet" => Ok(Scheme::Dirichlet {
                beta: value.parse().map_err(|_| bad())?,
            }),
            "shard" => Ok(Scheme::Shard {
                s: value.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: Scheme,
    pub seed: u64,
    pub client_train: Vec<Vec<usize>>,
    pub client_test: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.client_train.len()
    }

    /// Per-client train label counts, `[M][K]`.
    pub fn label_counts(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.client_train
            .iter()
            .map(|idx| {
                let mut c = vec![0; ds.classes()];
                idx.iter().for_each(|&i| c[ds.labels()[i]] += 1);
                c
            })
            .collect()
    }

    /// Disjoint train lists covering the whole train split; test lists
    /// drawn from the test split.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.client_train.len() != self.client_test.len() {
            return Err(Error::Partition("train and test client counts differ".into()));
        }
        let mut seen = vec![false; ds.len()];
        for (m, idx) in self.client_train.iter().enumerate() {
            for &i in idx {
                if i >= ds.len() || ds.splits()[i] != Split::Train {
                    return Err(Error::Partition(format!("client {m}: index {i} is not a train record")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("train index {i} assigned twice")));
                }
            }
        }
        if let Some(i) = ds.indices(Split::Train).into_iter().find(|&i| !seen[i]) {
            return Err(Error::Partition(format!("train index {i} unassigned")));
        }
        for (m, idx) in self.client_test.iter().enumerate() {
            if let Some(&i) = idx.iter().find(|&&i| i >= ds.len() || ds.splits()[i] != Split::Test) {
                return Err(Error::Partition(format!("client {m}: index {i} is not a test record")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("plan serializes")))
    }
}

pub fn partition(ds: &Dataset, clients: usize, scheme: Scheme, seed: u64) -> Result<PartitionPlan> {
    match scheme {
        Scheme::Dirichlet { beta } => partition_dirichlet(ds, clients, beta, seed),
        Scheme::Shard { s } => partition_shard(ds, clients, s, seed),
    }
}

/// Split `total` into integer counts proportional to `weights`, giving
/// leftover units to the largest fractional remainders (lowest index wins
/// ties). Counts always sum to `total`.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet_draw<R: Rng>(rng: &mut R, beta: f64, m: usize) -> Option<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0).ok()?;
    let g: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let s: f64 = g.iter().sum();
    (s > 0.0 && s.is_finite()).then(|| g.into_iter().map(|v| v / s).collect())
}

/// Class-wise Dirichlet split; redraws up to 100 times if a client ends up
/// with no train or no test records.
pub fn partition_dirichlet(ds: &Dataset, clients: usize, beta: f64, seed: u64) -> Result<PartitionPlan> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("dirichlet beta must be positive, got {beta}")));
    }
    if clients < 2 {
        return Err(Error::Config(format!("need at least 2 clients, got {clients}")));
    }
    let train = ds.by_class(Split::Train);
    let test = ds.by_class(Split::Test);
    'attempt: for attempt in 0..MAX_REDRAWS {
        let mut rng = seeds::stream_rng(seed, Stream::Partition, attempt, 0);
        let mut client_train = vec![Vec::new(); clients];
        let mut client_test = vec![Vec::new(); clients];
        for k in 0..ds.classes() {
            let Some(p) = dirichlet_draw(&mut rng, beta, clients) else {
                continue 'attempt;
            };
            for (pool, out) in [(&train[k], &mut client_train), (&test[k], &mut client_test)] {
                let mut pool = pool.clone();
                pool.shuffle(&mut rng);
                let mut offset = 0;
                for (m, c) in largest_remainder(pool.len(), &p).into_iter().enumerate() {
                    out[m].extend_from_slice(&pool[offset..offset + c]);
                    offset += c;
                }
            }
        }
        if client_train.iter().chain(&client_test).any(Vec::is_empty) {
            continue;
        }
        client_train.iter_mut().chain(client_test.iter_mut()).for_each(|v| v.sort_unstable());
        return Ok(PartitionPlan {
            scheme: Scheme::Dirichlet { beta },
            seed,
            client_train,
            client_test,
        });
    }
    Err(Error::Partition(format!(
        "dirichlet(β={beta}) left a client empty after {MAX_REDRAWS} draws"
    )))
}

/// Each client gets `s` distinct classes taken round-robin from a shuffled
/// class order, so every class has a holder when `M·s ≥ K`. Each class's
/// records are sliced equally among its holders.
pub fn partition_shard(ds: &Dataset, clients: usize, s: usize, seed: u64) -> Result<PartitionPlan> {
    let k = ds.classes();
    if s == 0 || s > k {
        return Err(Error::Config(format!("shard s must be in 1..={k}, got {s}")));
    }
    if clients == 0 || clients * s < k {
        return Err(Error::Partition(format!(
            "{clients} clients × {s} classes cannot cover {k} classes"
        )));
    }
    let mut rng = seeds::stream_rng(seed, Stream::Partition, 0, 0);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let assigned: Vec<Vec<usize>> = (0..clients)
        .map(|m| (0..s).map(|j| order[(m * s + j) % k]).collect())
        .collect();
    let mut holders = vec![Vec::new(); k];
    for (m, cls) in assigned.iter().enumerate() {
        cls.iter().for_each(|&c| holders[c].push(m));
    }

    let mut client_train = vec![Vec::new(); clients];
    let mut client_test = vec![Vec::new(); clients];
    for (pools, out) in [
        (ds.by_class(Split::Train), &mut client_train),
        (ds.by_class(Split::Test), &mut client_test),
    ] {
        for (c, mut pool) in pools.into_iter().enumerate() {
            pool.shuffle(&mut rng);
            let h = &holders[c];
            if pool.len() < h.len() {
                return Err(Error::Partition(format!(
                    "class {c} has {} records for {} holders",
                    pool.len(),
                    h.len()
                )));
            }
            let counts = largest_remainder(pool.len(), &vec![1.0; h.len()]);
            let mut offset = 0;
            for (&m, n) in h.iter().zip(counts) {
                out[m].extend_from_slice(&pool[offset..offset + n]);
                offset += n;
            }
        }
    }
    client_train.iter_mut().chain(client_test.iter_mut()).for_each(|v| v.sort_unstable());
    Ok(PartitionPlan {
        scheme: Scheme::Shard { s },
        seed,
        client_train,
        client_test,
    })
}

/// Shannon entropy (nats) of each client's train label distribution.
pub fn label_entropy(plan: &PartitionPlan, ds: &Dataset) -> Vec<f64> {
    plan.label_counts(ds)
        .iter()
        .map(|c| {
            let n: usize = c.iter().sum();
            c.iter()
                .filter(|&&v| v > 0)
                .map(|&v| {
                    let p = v as f64 / n as f64;
                    p * (1.0 / p).ln()
                })
                .sum()
        })
        .collect()
}
