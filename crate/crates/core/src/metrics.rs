//! Top-k ranking metrics and the evaluation loop over test sequences.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::data::{InteractionSequence, ItemId};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::policy::PolicyNet;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    Ok(())
}

/// 1 if `truth` is among the first `k` of `ranked`.
pub fn hr_at_k(ranked: &[ItemId], truth: ItemId, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(if ranked.iter().take(k).any(|&i| i == truth) {
        1.0
    } else {
        0.0
    })
}

/// `1 / log2(rank + 1)` for a 1-based rank within the first `k`, else 0.
pub fn ndcg_at_k(ranked: &[ItemId], truth: ItemId, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(ranked
        .iter()
        .take(k)
        .position(|&i| i == truth)
        .map_or(0.0, |p| gain(p + 1)))
}

fn gain(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// 1-based rank of `truth` under the ordering of [`crate::policy::rank`]
/// (score descending, id ascending), without sorting.
pub fn rank_of(scores: &[f64], truth: ItemId) -> usize {
    let t = truth.index();
    let st = scores[t];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > st || (s == st && i < t))
        .count()
}

/// Anything that scores every catalog item for a batch of contexts.
pub trait Scorer: Sync {
    fn n_items(&self) -> usize;
    fn scores(&self, contexts: &[&[ItemId]]) -> Result<Mat>;
}

impl Scorer for PolicyNet {
    fn n_items(&self) -> usize {
        PolicyNet::n_items(self)
    }

    fn scores(&self, contexts: &[&[ItemId]]) -> Result<Mat> {
        self.logits(contexts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Number of predictions averaged.
    pub count: usize,
    pub metrics: Vec<AtK>,
    /// Whatever the caller wants echoed with the numbers (usually the
    /// run configuration).
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<AtK> {
        self.metrics.iter().copied().find(|m| m.k == k)
    }

    /// One JSON object per line: a header with the count and the config
    /// echo, then one line per k.
    pub fn to_jsonl(&self) -> String {
        let mut out =
            serde_json::json!({"report": "eval", "count": self.count, "config": self.config})
                .to_string();
        out.push('\n');
        for m in &self.metrics {
            out.push_str(&serde_json::to_string(m).expect("plain numbers serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head: serde_json::Value = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Parse("empty report".into()))?,
        )?;
        let count = head["count"]
            .as_u64()
            .ok_or_else(|| Error::Parse("report header lacks count".into()))?
            as usize;
        let metrics = lines
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            count,
            metrics,
            config: head["config"].clone(),
        })
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>4}  {:>8}  {:>8}\n", "k", "HR", "NDCG");
        for m in &self.metrics {
            let _ = writeln!(s, "{:>4}  {:>8.4}  {:>8.4}", m.k, m.hr, m.ndcg);
        }
        let _ = writeln!(s, "({} predictions)", self.count);
        s
    }
}

/// Context for predicting `items[t]`: the previous `min(t, seq_len)` items,
/// left-padded.
pub fn context_at(items: &[ItemId], t: usize, seq_len: usize, n_items: usize) -> Vec<ItemId> {
    let start = t.saturating_sub(seq_len);
    let mut ctx = vec![ItemId::padding(n_items); seq_len - (t - start)];
    ctx.extend_from_slice(&items[start..t]);
    ctx
}

/// Scores every interaction after the first of every sequence and averages
/// HR@k and NDCG@k. Sequences are processed in session-id order and summed
/// in that order, so the result does not depend on input order or threads.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    sequences: &[InteractionSequence],
    seq_len: usize,
    ks: &[usize],
    par: Parallelism,
) -> Result<EvalReport> {
    for &k in ks {
        check_k(k)?;
    }
    let n = scorer.n_items();
    let mut order: Vec<&InteractionSequence> = sequences.iter().collect();
    order.sort_by(|a, b| {
        a.session_id
            .cmp(&b.session_id)
            .then_with(|| a.items.cmp(&b.items))
    });
    let mut cases: Vec<(Vec<ItemId>, ItemId)> = Vec::new();
    for s in order {
        if let Some(bad) = s.items.iter().find(|i| i.index() >= n) {
            return Err(Error::invalid(format!("item {bad} outside the catalog")));
        }
        for t in 1..s.items.len() {
            cases.push((context_at(&s.items, t, seq_len, n), s.items[t]));
        }
    }
    if cases.is_empty() {
        return Err(Error::EmptyResult(
            "no test interactions to evaluate".into(),
        ));
    }
    let ranks = par.map_chunks(&cases, 256, |chunk| -> Result<Vec<usize>> {
        let ctx: Vec<&[ItemId]> = chunk.iter().map(|(c, _)| c.as_slice()).collect();
        let sc = scorer.scores(&ctx)?;
        Ok(chunk
            .iter()
            .zip(sc.rows())
            .map(|((_, truth), row)| rank_of(row.as_slice().expect("contiguous"), *truth))
            .collect())
    });
    let mut all = Vec::with_capacity(cases.len());
    for r in ranks {
        all.extend(r?);
    }
    let count = all.len();
    let metrics = ks
        .iter()
        .map(|&k| {
            let (mut hr, mut nd) = (0.0, 0.0);
            for &r in &all {
                if r <= k {
                    hr += 1.0;
                    nd += gain(r);
                }
            }
            AtK {
                k,
                hr: hr / count as f64,
                ndcg: nd / count as f64,
            }
        })
        .collect();
    Ok(EvalReport {
        count,
        metrics,
        config: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().copied().map(ItemId).collect()
    }

    #[test]
    fn small_cases() {
        let r = ids(&[4, 2, 7, 1, 0, 3, 5, 6, 8, 9, 10, 11]);
        assert_eq!(hr_at_k(&r, ItemId(4), 5).unwrap(), 1.0);
        assert_eq!(hr_at_k(&r, ItemId(11), 10).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&r, ItemId(4), 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&r, ItemId(7), 10).unwrap(), 0.5);
        assert!(hr_at_k(&r, ItemId(4), 0).is_err());
        assert!(ndcg_at_k(&r, ItemId(4), 0).is_err());
    }

    #[test]
    fn rank_of_matches_sort() {
        let s = [0.5, 2.0, 0.5, -1.0, 2.0];
        let sorted = crate::policy::rank(&s);
        for i in 0..5 {
            let pos = sorted.iter().position(|&x| x == ItemId(i)).unwrap() + 1;
            assert_eq!(rank_of(&s, ItemId(i)), pos);
        }
    }

    #[test]
    fn context_padding() {
        let items = ids(&[3, 1, 2]);
        assert_eq!(context_at(&items, 1, 3, 9), ids(&[9, 9, 3]));
        assert_eq!(context_at(&items, 3, 2, 9), ids(&[1, 2]));
    }

    #[test]
    fn report_round_trip() {
        let r = EvalReport {
            count: 3,
            metrics: vec![AtK {
                k: 5,
                hr: 0.5,
                ndcg: 0.25,
            }],
            config: serde_json::json!({"mode": "normal"}),
        };
        assert_eq!(EvalReport::from_jsonl(&r.to_jsonl()).unwrap(), r);
        assert!(r.table().contains("0.5000"));
    }
}
