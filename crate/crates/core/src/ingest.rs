//! Loading interaction logs and catalogs, filtering, splitting and
//! windowing.
//!
//! Both input files are JSON Lines, UTF-8, one record per line:
//!
//! ```text
//! {"session_id":"u17","item_key":"track-0042","ts":1700000000}
//! {"item_key":"track-0042","fields":{"title":"live forever","album":"definitely maybe","artist":"oasis"}}
//! ```

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionSequence, ItemId, WindowedExample};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub session_id: String,
    pub item_key: String,
    pub ts: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub item_key: String,
    pub fields: IndexMap<String, String>,
}

impl CatalogEntry {
    pub fn has_text(&self) -> bool {
        self.fields.values().any(|v| !v.trim().is_empty())
    }
}

/// Catalog aligned with dense item ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl ItemCatalog {
    /// Aligns catalog records with `item_keys` (index = ItemId). Every kept
    /// item must have a catalog record with some nonempty text.
    pub fn aligned(item_keys: &[String], records: &[CatalogEntry]) -> Result<Self> {
        let by_key: HashMap<&str, &CatalogEntry> =
            records.iter().map(|e| (e.item_key.as_str(), e)).collect();
        let mut entries = Vec::with_capacity(item_keys.len());
        for key in item_keys {
            let entry = by_key
                .get(key.as_str())
                .ok_or_else(|| Error::MissingInput(format!("no catalog record for item {key}")))?;
            if !entry.has_text() {
                return Err(Error::invalid(format!(
                    "catalog record for {key} has no text"
                )));
            }
            entries.push((*entry).clone());
        }
        Ok(ItemCatalog { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn key(&self, item: ItemId) -> &str {
        &self.entries[item.index()].item_key
    }
}

/// Output of [`filter`]: sequences over dense ids and the key of each id.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredLog {
    pub sequences: Vec<InteractionSequence>,
    pub item_keys: Vec<String>,
}

impl FilteredLog {
    pub fn n_items(&self) -> usize {
        self.item_keys.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }
}

/// Groups events into sessions (ordered by first appearance), sorts each
/// session by timestamp, then repeatedly drops rare items and short
/// sessions until nothing changes. Surviving item keys get dense ids in
/// first-appearance order.
pub fn filter(
    events: &[RawEvent],
    min_seq_len: usize,
    min_item_freq: usize,
) -> Result<FilteredLog> {
    if events.is_empty() {
        return Err(Error::invalid("no events"));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut sessions: HashMap<&str, Vec<(i64, &str)>> = HashMap::new();
    for e in events {
        let s = sessions.entry(e.session_id.as_str()).or_insert_with(|| {
            order.push(e.session_id.as_str());
            Vec::new()
        });
        s.push((e.ts, e.item_key.as_str()));
    }
    let mut seqs: Vec<(&str, Vec<(i64, &str)>)> = order
        .into_iter()
        .map(|id| {
            let mut evs = sessions.remove(id).unwrap_or_default();
            evs.sort_by_key(|&(ts, _)| ts);
            (id, evs)
        })
        .collect();

    loop {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for (_, evs) in &seqs {
            for &(_, k) in evs {
                *freq.entry(k).or_default() += 1;
            }
        }
        let before: usize = seqs.iter().map(|(_, e)| e.len()).sum::<usize>() + seqs.len();
        for (_, evs) in seqs.iter_mut() {
            evs.retain(|&(_, k)| freq[k] >= min_item_freq);
        }
        seqs.retain(|(_, evs)| evs.len() >= min_seq_len);
        let after: usize = seqs.iter().map(|(_, e)| e.len()).sum::<usize>() + seqs.len();
        if after == before {
            break;
        }
    }
    if seqs.is_empty() {
        return Err(Error::EmptyResult("no sequences survive filtering".into()));
    }

    let mut ids: HashMap<&str, ItemId> = HashMap::new();
    let mut item_keys = Vec::new();
    let sequences = seqs
        .into_iter()
        .map(|(sid, evs)| {
            let items = evs
                .iter()
                .map(|&(_, k)| {
                    *ids.entry(k).or_insert_with(|| {
                        item_keys.push(k.to_string());
                        ItemId(item_keys.len() as u32 - 1)
                    })
                })
                .collect();
            InteractionSequence {
                session_id: sid.to_string(),
                items,
                timestamps: evs.iter().map(|&(ts, _)| ts).collect(),
            }
        })
        .collect();
    Ok(FilteredLog {
        sequences,
        item_keys,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<InteractionSequence>,
    pub validation: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
    /// Subset of `train` used to fit the environment.
    pub le_subset: Vec<InteractionSequence>,
}

/// Session-level split. Deterministic given `seed` and input order.
pub fn split(
    seqs: &[InteractionSequence],
    ratios: (f64, f64, f64),
    le_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if seqs.is_empty() {
        return Err(Error::invalid("no sequences to split"));
    }
    let (tr, va, te) = ratios;
    if tr < 0.0 || va < 0.0 || te < 0.0 || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios ({tr}, {va}, {te}) must be non-negative and sum to 1"
        )));
    }
    if !(0.0..=1.0).contains(&le_fraction) {
        return Err(Error::Config(format!(
            "le_fraction {le_fraction} outside [0, 1]"
        )));
    }
    let n = seqs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = exec::rng(seed);
    idx.shuffle(&mut rng);
    let n_train = ((tr * n as f64) + 1e-9).floor() as usize;
    let n_val = (((va * n as f64) + 1e-9).floor() as usize).min(n - n_train);
    let take = |r: &[usize]| r.iter().map(|&i| seqs[i].clone()).collect::<Vec<_>>();
    let train = take(&idx[..n_train]);
    let validation = take(&idx[n_train..n_train + n_val]);
    let test = take(&idx[n_train + n_val..]);

    let n_le = ((le_fraction * train.len() as f64) + 1e-9).floor() as usize;
    let mut le_idx: Vec<usize> = (0..train.len()).collect();
    let mut le_rng = exec::rng(exec::derive_seed(seed, 0x1e));
    le_idx.shuffle(&mut le_rng);
    let mut le_idx = le_idx[..n_le].to_vec();
    le_idx.sort_unstable();
    let le_subset = le_idx.iter().map(|&i| train[i].clone()).collect();
    Ok(DatasetSplit {
        train,
        validation,
        test,
        le_subset,
    })
}

/// Uniform negative sampling over the catalog, excluding a given item set.
#[derive(Clone, Copy, Debug)]
pub struct NegativeSampler {
    pub n_items: usize,
}

impl NegativeSampler {
    pub fn sample<R: Rng + ?Sized>(
        &self,
        exclude: &HashSet<ItemId>,
        rng: &mut R,
    ) -> Result<ItemId> {
        let allowed = self.n_items - exclude.iter().filter(|i| i.index() < self.n_items).count();
        if allowed == 0 {
            return Err(Error::invalid(
                "every catalog item appears in the session; no negative available",
            ));
        }
        if allowed * 4 >= self.n_items {
            loop {
                let cand = ItemId(rng.random_range(0..self.n_items) as u32);
                if !exclude.contains(&cand) {
                    return Ok(cand);
                }
            }
        }
        let pick = rng.random_range(0..allowed);
        let cand = (0..self.n_items as u32)
            .map(ItemId)
            .filter(|i| !exclude.contains(i))
            .nth(pick)
            .expect("pick < allowed");
        Ok(cand)
    }
}

/// One example per next-item position. Contexts hold the last
/// `min(t, seq_len)` items, left-padded with `ItemId(n_items)`.
pub fn window<R: Rng + ?Sized>(
    seq: &InteractionSequence,
    seq_len: usize,
    sampler: &NegativeSampler,
    rng: &mut R,
) -> Result<Vec<WindowedExample>> {
    let pad = ItemId::padding(sampler.n_items);
    let session: HashSet<ItemId> = seq.items.iter().copied().collect();
    let mut out = Vec::with_capacity(seq.len().saturating_sub(1));
    for t in 1..seq.len() {
        let start = t.saturating_sub(seq_len);
        let real = &seq.items[start..t];
        let n_pad = seq_len - real.len();
        let mut context = vec![pad; n_pad];
        context.extend_from_slice(real);
        let mut position_mask = vec![false; n_pad];
        position_mask.extend(std::iter::repeat_n(true, real.len()));
        out.push(WindowedExample {
            context,
            target: seq.items[t],
            negative: sampler.sample(&session, rng)?,
            position_mask,
        });
    }
    Ok(out)
}

/// Windows every sequence with a per-sequence random stream, so the output
/// does not depend on how sequences are grouped or scheduled.
pub fn window_all(
    seqs: &[InteractionSequence],
    seq_len: usize,
    n_items: usize,
    seed: u64,
) -> Result<Vec<WindowedExample>> {
    let sampler = NegativeSampler { n_items };
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let mut rng = exec::rng(exec::derive_seed(seed, i as u64));
        out.extend(window(s, seq_len, &sampler, &mut rng)?);
    }
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<RawEvent>> {
    read_jsonl(path)
}

pub fn write_events(path: &Path, events: &[RawEvent]) -> Result<()> {
    write_jsonl(path, events)
}

pub fn read_catalog(path: &Path) -> Result<Vec<CatalogEntry>> {
    read_jsonl(path)
}

pub fn write_catalog(path: &Path, entries: &[CatalogEntry]) -> Result<()> {
    write_jsonl(path, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, k: &str, ts: i64) -> RawEvent {
        RawEvent {
            session_id: s.into(),
            item_key: k.into(),
            ts,
        }
    }

    fn seq_of(id: &str, items: &[u32]) -> InteractionSequence {
        InteractionSequence {
            session_id: id.into(),
            items: items.iter().map(|&i| ItemId(i)).collect(),
            timestamps: (0..items.len() as i64).collect(),
        }
    }

    #[test]
    fn filter_twice_seen_items_is_empty() {
        let events = vec![
            ev("a", "x", 1),
            ev("a", "y", 2),
            ev("a", "z", 3),
            ev("b", "x", 1),
            ev("b", "y", 2),
            ev("b", "z", 3),
        ];
        assert!(matches!(filter(&events, 3, 3), Err(Error::EmptyResult(_))));
    }

    #[test]
    fn filter_sorts_by_timestamp_and_remaps() {
        let mut events = Vec::new();
        for s in ["s1", "s2", "s3"] {
            events.push(ev(s, "k2", 20));
            events.push(ev(s, "k1", 10));
            events.push(ev(s, "k3", 30));
        }
        let out = filter(&events, 3, 3).unwrap();
        assert_eq!(out.item_keys, vec!["k1", "k2", "k3"]);
        assert_eq!(
            out.sequences[0].items,
            vec![ItemId(0), ItemId(1), ItemId(2)]
        );
        assert_eq!(out.sequences[0].timestamps, vec![10, 20, 30]);
    }

    #[test]
    fn split_degenerate_and_errors() {
        let seqs: Vec<_> = (0..10)
            .map(|i| seq_of(&i.to_string(), &[0, 1, 2]))
            .collect();
        let s = split(&seqs, (1.0, 0.0, 0.0), 0.1, 3).unwrap();
        assert_eq!(s.train.len(), 10);
        assert!(s.validation.is_empty() && s.test.is_empty());
        assert!(matches!(
            split(&seqs, (0.5, 0.1, 0.1), 0.1, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_is_deterministic() {
        let seqs: Vec<_> = (0..10)
            .map(|i| seq_of(&i.to_string(), &[0, 1, 2]))
            .collect();
        assert_eq!(
            split(&seqs, (0.8, 0.1, 0.1), 0.1, 7).unwrap(),
            split(&seqs, (0.8, 0.1, 0.1), 0.1, 7).unwrap()
        );
    }

    #[test]
    fn window_three_items() {
        let s = seq_of("s", &[0, 1, 2]);
        let sampler = NegativeSampler { n_items: 4 };
        let mut rng = exec::rng(1);
        let w = window(&s, 10, &sampler, &mut rng).unwrap();
        assert_eq!(w.len(), 2);
        let pad = ItemId(4);
        let mut c0 = vec![pad; 9];
        c0.push(ItemId(0));
        assert_eq!(w[0].context, c0);
        assert_eq!(w[0].target, ItemId(1));
        let mut c1 = vec![pad; 8];
        c1.extend([ItemId(0), ItemId(1)]);
        assert_eq!(w[1].context, c1);
        assert_eq!(w[1].target, ItemId(2));
        // only candidate outside the session
        assert!(w.iter().all(|e| e.negative == ItemId(3)));
    }

    #[test]
    fn window_truncates_to_seq_len() {
        let s = seq_of("s", &[0, 1, 2, 3, 4, 5]);
        let sampler = NegativeSampler { n_items: 10 };
        let w = window(&s, 3, &sampler, &mut exec::rng(2)).unwrap();
        assert_eq!(w[4].context, vec![ItemId(2), ItemId(3), ItemId(4)]);
        assert_eq!(w[4].target, ItemId(5));
        assert!(w[4].position_mask.iter().all(|&m| m));
    }

    #[test]
    fn sampler_exhausted_catalog_errors() {
        let sampler = NegativeSampler { n_items: 2 };
        let ex: HashSet<_> = [ItemId(0), ItemId(1)].into_iter().collect();
        assert!(sampler.sample(&ex, &mut exec::rng(0)).is_err());
    }

    #[test]
    fn sampler_sparse_path() {
        let sampler = NegativeSampler { n_items: 100 };
        let ex: HashSet<_> = (0..98).map(ItemId).collect();
        let mut rng = exec::rng(5);
        for _ in 0..50 {
            let s = sampler.sample(&ex, &mut rng).unwrap();
            assert!(s == ItemId(98) || s == ItemId(99));
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cat.jsonl");
        let mut fields = IndexMap::new();
        fields.insert("title".to_string(), "live forever".to_string());
        fields.insert("artist".to_string(), "oasis".to_string());
        let cat = vec![CatalogEntry {
            item_key: "t1".into(),
            fields,
        }];
        write_catalog(&p, &cat).unwrap();
        assert_eq!(read_catalog(&p).unwrap(), cat);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "{\"item_key\":\"t1\",\"fields\":{\"title\":\"live forever\",\"artist\":\"oasis\"}}\n"
        );
    }
}
