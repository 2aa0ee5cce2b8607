//! A synthetic user population with known preferences, used as ground truth.
//!
//! Items live in clusters in a latent space. Each user has a latent vector
//! and draws their next item from `softmax(u·v / temperature)`. Catalog text
//! names the item's cluster (artist), a sub-cluster (album) and the two
//! latent directions it leans on most (title), so the text carries most of
//! what the latent vector says.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::logistic;
use crate::error::{Error, Result};
use crate::exec;
use crate::ingest::{CatalogEntry, RawEvent};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub latent_dim: usize,
    pub n_clusters: usize,
    /// Standard deviation of an item around its cluster centre.
    pub spread: f64,
    /// 0 means greedy; infinity means uniform.
    pub temperature: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_items: 500,
            n_users: 2000,
            latent_dim: 8,
            n_clusters: 10,
            spread: 0.5,
            temperature: 0.2,
            min_len: 5,
            max_len: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub users: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
    pub clusters: Vec<usize>,
    /// Sub-cluster index of each item within its cluster (0..4).
    pub albums: Vec<usize>,
    artist_words: Vec<String>,
    album_words: Vec<String>,
    /// Two words per latent dimension: negative lean, positive lean.
    mood_words: Vec<String>,
}

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// `n` distinct pronounceable pseudo-words.
fn pseudo_words<R: Rng>(
    n: usize,
    rng: &mut R,
    taken: &mut std::collections::HashSet<String>,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.random_range(2..=3);
        let w: String = (0..syl)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS[rng.random_range(0..ONSETS.len())],
                    VOWELS[rng.random_range(0..VOWELS.len())]
                )
            })
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn gaussian<R: Rng>(d: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub const ALBUMS_PER_CLUSTER: usize = 4;

/// A short prompt template for synthetic runs; the tiny model gains nothing
/// from long instructions, and prompt length drives the cost.
pub const TEMPLATE: &str = "\
user = listened : {HISTORY}
action = next : {ACTION}
selection = choose from {LIST}
";

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        let c = &config;
        if c.n_items < 2 || c.n_users == 0 || c.latent_dim < 2 || c.n_clusters == 0 {
            return Err(Error::Config(
                "synthetic world needs ≥ 2 items, ≥ 1 user, ≥ 2 latent dimensions and ≥ 1 cluster"
                    .into(),
            ));
        }
        if c.min_len < 2 || c.max_len < c.min_len {
            return Err(Error::Config(
                "session lengths must satisfy 2 ≤ min_len ≤ max_len".into(),
            ));
        }
        if c.temperature.is_nan() || c.temperature < 0.0 || !(c.spread >= 0.0) {
            return Err(Error::Config(
                "temperature and spread must be non-negative".into(),
            ));
        }
        let mut rng = exec::rng(exec::derive_seed(c.seed, 0x0B1D));
        let d = c.latent_dim;
        let centres: Vec<Vec<f64>> = (0..c.n_clusters)
            .map(|_| gaussian(d, 1.0, &mut rng))
            .collect();
        let mut items = Vec::with_capacity(c.n_items);
        let mut clusters = Vec::with_capacity(c.n_items);
        let mut albums = Vec::with_capacity(c.n_items);
        for _ in 0..c.n_items {
            let k = rng.random_range(0..c.n_clusters);
            let noise = gaussian(d, c.spread, &mut rng);
            albums.push(usize::from(noise[0] > 0.0) + 2 * usize::from(noise[1] > 0.0));
            items.push(centres[k].iter().zip(&noise).map(|(a, b)| a + b).collect());
            clusters.push(k);
        }
        let users = (0..c.n_users).map(|_| gaussian(d, 1.0, &mut rng)).collect();
        let mut taken = std::collections::HashSet::new();
        let artist_words = pseudo_words(c.n_clusters, &mut rng, &mut taken);
        let album_words = pseudo_words(c.n_clusters * ALBUMS_PER_CLUSTER, &mut rng, &mut taken);
        let mood_words = pseudo_words(2 * d, &mut rng, &mut taken);
        Ok(SyntheticWorld {
            config,
            users,
            items,
            clusters,
            albums,
            artist_words,
            album_words,
            mood_words,
        })
    }

    pub fn item_key(i: usize) -> String {
        format!("i{i:04}")
    }

    pub fn session_key(k: usize) -> String {
        format!("u{k:05}")
    }

    /// Inverse of [`SyntheticWorld::item_key`].
    pub fn item_index(key: &str) -> Option<usize> {
        key.strip_prefix('i')?.parse().ok()
    }

    pub fn user_index(key: &str) -> Option<usize> {
        key.strip_prefix('u')?.parse().ok()
    }

    pub fn affinity(&self, user: usize, item: usize) -> f64 {
        dot(&self.users[user], &self.items[item])
    }

    /// Ground-truth reward `logistic(u·v)`.
    pub fn reward(&self, user: usize, item: usize) -> f64 {
        logistic(self.affinity(user, item))
    }

    /// Next-item distribution of a user.
    pub fn next_distribution(&self, user: usize) -> Vec<f64> {
        let n = self.items.len();
        let t = self.config.temperature;
        let aff: Vec<f64> = (0..n).map(|i| self.affinity(user, i)).collect();
        if t == 0.0 {
            let best = crate::env::argmax_first(&aff);
            return (0..n).map(|i| if i == best { 1.0 } else { 0.0 }).collect();
        }
        if t.is_infinite() {
            return vec![1.0 / n as f64; n];
        }
        let m = aff.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = aff.iter().map(|a| ((a - m) / t).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    /// Text fields of one item.
    pub fn fields(&self, item: usize) -> IndexMap<String, String> {
        let v = &self.items[item];
        let mut dims: Vec<usize> = (0..v.len()).collect();
        dims.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
        let mood = |k: usize| &self.mood_words[2 * k + usize::from(v[k] > 0.0)];
        let mut f = IndexMap::new();
        f.insert(
            "title".into(),
            format!("{} {}", mood(dims[0]), mood(dims[1])),
        );
        f.insert(
            "album".into(),
            self.album_words[self.clusters[item] * ALBUMS_PER_CLUSTER + self.albums[item]].clone(),
        );
        f.insert(
            "artist".into(),
            self.artist_words[self.clusters[item]].clone(),
        );
        f
    }

    pub fn catalog(&self) -> Vec<CatalogEntry> {
        (0..self.items.len())
            .map(|i| CatalogEntry {
                item_key: Self::item_key(i),
                fields: self.fields(i),
            })
            .collect()
    }

    /// One session per user. Each user has their own random stream, so a
    /// user's session does not depend on the others.
    pub fn events(&self) -> Vec<RawEvent> {
        let c = &self.config;
        let mut out = Vec::new();
        for u in 0..self.users.len() {
            let mut rng = exec::rng(exec::derive_seed(c.seed, 0x5E55_0000 + u as u64));
            let len = rng.random_range(c.min_len..=c.max_len);
            let cdf: Vec<f64> = self
                .next_distribution(u)
                .iter()
                .scan(0.0, |acc, p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect();
            let total = *cdf.last().expect("non-empty catalog");
            for t in 0..len {
                let x = rng.random::<f64>() * total;
                let i = cdf.partition_point(|&c| c <= x).min(cdf.len() - 1);
                out.push(RawEvent {
                    session_id: Self::session_key(u),
                    item_key: Self::item_key(i),
                    ts: 1_700_000_000 + t as i64,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(temperature: f64) -> SyntheticWorld {
        SyntheticWorld::new(WorldConfig {
            n_items: 20,
            n_users: 30,
            temperature,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn greedy_users_repeat_their_best_item() {
        let w = small(0.0);
        let ev = w.events();
        for u in 0..30 {
            let best =
                crate::env::argmax_first(&(0..20).map(|i| w.affinity(u, i)).collect::<Vec<_>>());
            let key = SyntheticWorld::item_key(best);
            let mine: Vec<&RawEvent> = ev
                .iter()
                .filter(|e| e.session_id == SyntheticWorld::session_key(u))
                .collect();
            assert!(mine.len() >= 5);
            assert!(mine.iter().all(|e| e.item_key == key));
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = small(1.0);
        let b = small(1.0);
        assert_eq!(a, b);
        assert_eq!(a.events(), b.events());
        assert_eq!(a.catalog(), b.catalog());
        let c = SyntheticWorld::new(WorldConfig {
            seed: 1,
            ..a.config.clone()
        })
        .unwrap();
        assert_ne!(a.events(), c.events());
    }

    #[test]
    fn text_names_cluster() {
        let w = small(1.0);
        for i in 0..20 {
            for j in 0..20 {
                let same = w.fields(i)["artist"] == w.fields(j)["artist"];
                assert_eq!(same, w.clusters[i] == w.clusters[j]);
            }
        }
        assert_eq!(SyntheticWorld::item_index("i0017"), Some(17));
        assert_eq!(SyntheticWorld::user_index("u00003"), Some(3));
    }

    #[test]
    fn rejects_bad_config() {
        let bad = WorldConfig {
            min_len: 1,
            ..Default::default()
        };
        assert!(SyntheticWorld::new(bad).is_err());
        let bad = WorldConfig {
            temperature: -1.0,
            ..Default::default()
        };
        assert!(SyntheticWorld::new(bad).is_err());
    }
}
