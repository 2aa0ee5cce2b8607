//! Item tokenization: one embedding per item, optimised so the frozen
//! language model reproduces the item's description after it.

use serde::{Deserialize, Serialize};

use super::lm::{Sources, TinyLm, Tok};
use super::vocab::{BOS, EOS};
use crate::autodiff::{uniform_init, Mat, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::ingest::CatalogEntry;
use crate::optim::{Adam, AdamConfig};
use crate::prompt::words;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizeConfig {
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
    /// Items optimised together in one batched graph. Rows are independent,
    /// so the batch size does not change results.
    pub batch: usize,
}

impl Default for TokenizeConfig {
    fn default() -> Self {
        TokenizeConfig {
            iters: 300,
            lr: 5e-3,
            seed: 0,
            batch: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizeOutcome {
    pub embedding: Vec<f64>,
    pub nll_before: f64,
    pub nll_after: f64,
}

/// The sentence that follows the item placeholder, e.g. "track is titled
/// live forever from album definitely maybe , its artist is oasis ."
pub fn describe(entry: &CatalogEntry) -> String {
    let f = &entry.fields;
    match (f.get("title"), f.get("album"), f.get("artist")) {
        (Some(t), Some(al), Some(ar)) => {
            let mut s = format!("track is titled {t} from album {al}, its artist is {ar}.");
            for (k, v) in f
                .iter()
                .filter(|(k, _)| !["title", "album", "artist"].contains(&k.as_str()))
            {
                s.push_str(&format!(" {k} is {v}."));
            }
            s
        }
        _ => {
            let parts: Vec<String> = f
                .iter()
                .filter(|(_, v)| !v.trim().is_empty())
                .map(|(k, v)| format!("{k} is {v}"))
                .collect();
            format!("item {}.", parts.join(", "))
        }
    }
}

/// Description words of an entry, ready for the vocabulary.
pub fn description_words(entry: &CatalogEntry) -> Vec<String> {
    words(&describe(entry))
}

fn sentence(lm: &TinyLm, desc: &[String], free_row: usize) -> Vec<Tok> {
    let mut s = vec![Tok::Word(BOS), Tok::Free(free_row)];
    s.extend(lm.vocab.encode(desc).into_iter().map(Tok::Word));
    s.push(Tok::Word(EOS));
    s.truncate(lm.config.max_positions);
    s
}

/// Per-sequence NLL of the description given each embedding row.
pub fn description_nll(lm: &TinyLm, descs: &[Vec<String>], embeddings: &Mat) -> Result<Vec<f64>> {
    let seqs: Vec<Vec<Tok>> = descs
        .iter()
        .enumerate()
        .map(|(i, d)| sentence(lm, d, i))
        .collect();
    let mut tape = Tape::new();
    let base = lm.base.bind(&mut tape, false, 0);
    let free = tape.constant_ref(embeddings);
    let out = lm.forward(
        &mut tape,
        &base,
        None,
        Sources {
            items: None,
            free: Some(free),
        },
        &seqs,
    )?;
    Ok(lm.nll(&mut tape, &base, &out, &seqs, 2)?.1)
}

/// Summed description NLL and its gradient with respect to the embedding
/// rows. Rows are independent, so row i of the gradient is item i's own.
pub fn description_nll_grad(
    lm: &TinyLm,
    seqs: &[Vec<Tok>],
    embeddings: &Mat,
) -> Result<(f64, Mat)> {
    let mut table = ParamSet::new();
    table.push("free", embeddings.clone());
    let mut tape = Tape::new();
    let base = lm.base.bind(&mut tape, false, 0);
    let free = table.bind(&mut tape, true, 0);
    let src = Sources {
        items: None,
        free: Some(free[crate::autodiff::ParamId(0)]),
    };
    let out = lm.forward(&mut tape, &base, None, src, seqs)?;
    let (sum, _) = lm.nll(&mut tape, &base, &out, seqs, 2)?;
    let value = tape.scalar(sum);
    let grads = tape.backward(sum);
    let g = grads
        .get(0)
        .cloned()
        .unwrap_or_else(|| Mat::zeros(embeddings.dim()));
    Ok((value, g))
}

/// Token sequences `BOS <slot i> description EOS` used by tokenization.
pub fn description_sequences(lm: &TinyLm, descs: &[Vec<String>]) -> Vec<Vec<Tok>> {
    descs
        .iter()
        .enumerate()
        .map(|(i, d)| sentence(lm, d, i))
        .collect()
}

/// Initial embedding for one item, drawn from its own seed.
pub fn initial_embedding(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = exec::rng(seed);
    uniform_init(1, d, d, &mut rng).into_raw_vec_and_offset().0
}

/// Optimises one embedding per description. `seeds[i]` initialises item i.
/// Only the embeddings change; the model is read-only.
pub fn tokenize_items(
    lm: &TinyLm,
    descs: &[Vec<String>],
    seeds: &[u64],
    cfg: &TokenizeConfig,
    par: Parallelism,
) -> Result<Vec<TokenizeOutcome>> {
    if descs.len() != seeds.len() {
        return Err(Error::dim("one seed per item required"));
    }
    if let Some(i) = descs.iter().position(|d| d.is_empty()) {
        return Err(Error::invalid(format!("item {i} has no description text")));
    }
    let idx: Vec<usize> = (0..descs.len()).collect();
    let chunks = par.map_chunks(
        &idx,
        cfg.batch.max(1),
        |c| -> Result<Vec<TokenizeOutcome>> {
            let d: Vec<Vec<String>> = c.iter().map(|&i| descs[i].clone()).collect();
            let s: Vec<u64> = c.iter().map(|&i| seeds[i]).collect();
            tokenize_batch(lm, &d, &s, cfg)
        },
    );
    let mut out = Vec::with_capacity(descs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn tokenize_batch(
    lm: &TinyLm,
    descs: &[Vec<String>],
    seeds: &[u64],
    cfg: &TokenizeConfig,
) -> Result<Vec<TokenizeOutcome>> {
    let d = lm.d_model();
    let b = descs.len();
    let init: Vec<f64> = seeds
        .iter()
        .flat_map(|&s| initial_embedding(d, s))
        .collect();
    let mut table = ParamSet::new();
    table.push("free", Mat::from_shape_vec((b, d), init).expect("b × d"));
    let seqs: Vec<Vec<Tok>> = descs
        .iter()
        .enumerate()
        .map(|(i, x)| sentence(lm, x, i))
        .collect();
    let nll_before = description_nll(lm, descs, &table.tensors()[0])?;
    let mut adam = Adam::new(AdamConfig::new(cfg.lr), &table);
    for _ in 0..cfg.iters {
        let (_, grad) = description_nll_grad(lm, &seqs, &table.tensors()[0])?;
        let mut grads = crate::autodiff::Gradients::default();
        grads.set(0, grad);
        adam.step(&mut table, &grads, 0);
    }
    let nll_after = description_nll(lm, descs, &table.tensors()[0])?;
    Ok(table.tensors()[0]
        .rows()
        .into_iter()
        .zip(nll_before.into_iter().zip(nll_after))
        .map(|(r, (nb, na))| TokenizeOutcome {
            embedding: r.to_vec(),
            nll_before: nb,
            nll_after: na,
        })
        .collect())
}
