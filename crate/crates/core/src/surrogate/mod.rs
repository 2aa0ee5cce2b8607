//! The built-in language-model environment: a small transformer, item
//! tokenization, adapter fine-tuning and a synthetic world to check them
//! against.

pub mod finetune;
pub mod lm;
pub mod synthetic;
pub mod tokenize;
pub mod vocab;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use self::finetune::{clip, to_toks, LeExample};
use self::lm::{Adapter, LmConfig, Sources, TinyLm};
use self::vocab::Vocab;
use crate::autodiff::{Mat, Tape};
use crate::checkpoint;
use crate::data::{ItemId, ItemToken, RewardValue, AUGMENT_CANDIDATES};
use crate::env::{Candidates, Capabilities, Environment, Memo};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::ingest::ItemCatalog;
use crate::prompt::{Piece, PromptTemplate};

/// Pre-training text. Every item description appears once after the item
/// placeholder and once after each of its distinctive words (words found in
/// fewer than half of all descriptions). The second form teaches the model
/// to read the slot in front of a description, which is where item tokens
/// go later. The template sentences follow.
pub fn corpus(catalog: &ItemCatalog, template: &PromptTemplate) -> Vec<Vec<String>> {
    let descs: Vec<Vec<String>> = catalog
        .entries
        .iter()
        .map(tokenize::description_words)
        .collect();
    let mut df: HashMap<&str, usize> = HashMap::new();
    for d in &descs {
        let uniq: BTreeSet<&str> = d.iter().map(String::as_str).collect();
        for w in uniq {
            *df.entry(w).or_default() += 1;
        }
    }
    let mut out = Vec::new();
    for d in &descs {
        let mut heads = vec!["<item>"];
        let mut seen = BTreeSet::new();
        for w in d {
            if 2 * df[w.as_str()] < descs.len() && seen.insert(w.as_str()) {
                heads.push(w);
            }
        }
        for h in heads {
            let mut s = vec![h.to_string()];
            s.extend(d.iter().cloned());
            out.push(s);
        }
    }
    out.extend(template.corpus_lines());
    out
}

/// Builds the vocabulary and pre-trains a fresh model on [`corpus`].
pub fn pretrained_lm(
    catalog: &ItemCatalog,
    template: &PromptTemplate,
    config: LmConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(TinyLm, Vec<f64>)> {
    let text = corpus(catalog, template);
    let vocab = Vocab::build(text.iter().map(Vec::as_slice), config.max_words);
    let mut lm = TinyLm::new(config, vocab, seed)?;
    let sents: Vec<Vec<u32>> = text.iter().map(|s| lm.vocab.encode(s)).collect();
    let losses = lm.pretrain(
        &sents,
        epochs,
        32,
        lr,
        crate::exec::derive_seed(seed, 0x9E7),
    )?;
    Ok((lm, losses))
}

pub fn token_matrix(tokens: &[ItemToken]) -> Result<Mat> {
    let d = tokens.first().map_or(0, |t| t.embedding.len());
    if tokens.iter().any(|t| t.embedding.len() != d) {
        return Err(Error::dim("item tokens of unequal width"));
    }
    Ok(Mat::from_shape_fn((tokens.len(), d), |(i, j)| {
        tokens[i].embedding[j]
    }))
}

/// Metadata written next to the tensors of a saved environment.
#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    lm: LmConfig,
    vocab: Vocab,
    rank: usize,
    template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

const META_FORMAT: &str = "lea-surrogate-env";

/// A fine-tuned language model serving states, rewards and selections.
/// States are memoised internally because selections reuse them.
#[derive(Clone)]
pub struct SurrogateEnv {
    pub lm: TinyLm,
    pub adapter: Adapter,
    pub tokens: Mat,
    pub item_keys: Vec<String>,
    pub template: PromptTemplate,
    pub parallelism: Parallelism,
    /// Prompts per forward pass.
    pub chunk: usize,
    cache: Arc<Memo<Vec<ItemId>, Vec<f64>>>,
}

impl SurrogateEnv {
    pub fn new(
        lm: TinyLm,
        adapter: Adapter,
        tokens: Mat,
        item_keys: Vec<String>,
        template: PromptTemplate,
    ) -> Result<Self> {
        if tokens.ncols() != lm.d_model() || tokens.nrows() != item_keys.len() {
            return Err(Error::dim(
                "item tokens do not match the model width or key list",
            ));
        }
        Ok(SurrogateEnv {
            lm,
            adapter,
            tokens,
            item_keys,
            template,
            parallelism: Parallelism::default(),
            chunk: 64,
            cache: Arc::new(Memo::new()),
        })
    }

    pub fn n_items(&self) -> usize {
        self.tokens.nrows()
    }

    /// Runs prompts in fixed chunks and returns the last state of each, plus
    /// the raw score when `score` is set.
    fn run(&self, prompts: Vec<Vec<Piece>>, score: bool) -> Result<Vec<(Vec<f64>, f64)>> {
        let max = self.lm.config.max_positions;
        let seqs: Vec<_> = prompts
            .iter()
            .map(|p| clip(to_toks(&self.lm, p), max))
            .collect();
        let parts = self.parallelism.map_chunks(
            &seqs,
            self.chunk.max(1),
            |c| -> Result<Vec<(Vec<f64>, f64)>> {
                let mut tape = Tape::new();
                let base = self.lm.base.bind(&mut tape, false, 0);
                let ad = self.adapter.params.bind(&mut tape, false, 0);
                let items = tape.constant_ref(&self.tokens);
                let src = Sources {
                    items: Some(items),
                    free: None,
                };
                let out = self.lm.forward(&mut tape, &base, Some(&ad), src, c)?;
                let scores = if score {
                    Some(self.lm.score(&mut tape, &ad, out.last))
                } else {
                    None
                };
                let last = tape.value(out.last);
                Ok((0..c.len())
                    .map(|i| {
                        (
                            last.row(i).to_vec(),
                            scores.map_or(0.0, |s| tape.value(s)[[i, 0]]),
                        )
                    })
                    .collect())
            },
        );
        let mut out = Vec::with_capacity(prompts.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn dot_token(&self, s: &[f64], item: ItemId) -> f64 {
        s.iter()
            .zip(self.tokens.row(item.index()))
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Writes `env.json`, `lm.jsonl`, `adapter.jsonl` and `tokens.jsonl`
    /// into `dir`; `provenance` is copied into every file header.
    pub fn save(&self, dir: &Path, provenance: Option<&serde_json::Value>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = Meta {
            format: META_FORMAT.into(),
            version: checkpoint::VERSION,
            lm: self.lm.config.clone(),
            vocab: self.lm.vocab.clone(),
            rank: self.adapter.rank,
            provenance: provenance.cloned(),
            template: format!(
                "user = {}\naction = {}\nselection = {}\n",
                self.template.user_text, self.template.action_text, self.template.selection_text
            ),
        };
        std::fs::write(
            dir.join("env.json"),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        checkpoint::save_tensors(&dir.join("lm.jsonl"), &self.lm.base, provenance)?;
        checkpoint::save_tensors(&dir.join("adapter.jsonl"), &self.adapter.params, provenance)?;
        let toks: Vec<ItemToken> = self
            .tokens
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| ItemToken {
                item: ItemId(i as u32),
                embedding: r.to_vec(),
            })
            .collect();
        checkpoint::save_tokens(
            &dir.join("tokens.jsonl"),
            &toks,
            &self.item_keys,
            provenance,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("env.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        let meta: Meta = serde_json::from_str(&text)?;
        if meta.format != META_FORMAT {
            return Err(Error::Parse(format!(
                "expected format {META_FORMAT:?}, found {:?}",
                meta.format
            )));
        }
        let lm = TinyLm::from_parts(
            meta.lm,
            meta.vocab,
            checkpoint::load_tensors(&dir.join("lm.jsonl"))?,
        )?;
        let mut adapter = lm.new_adapter(meta.rank, 0);
        checkpoint::restore(
            &mut adapter.params,
            &checkpoint::load_tensors(&dir.join("adapter.jsonl"))?,
        )?;
        let (toks, keys) = checkpoint::load_tokens(&dir.join("tokens.jsonl"))?;
        SurrogateEnv::new(
            lm,
            adapter,
            token_matrix(&toks)?,
            keys,
            PromptTemplate::parse(&meta.template)?,
        )
    }
}

impl Environment for SurrogateEnv {
    fn state_dim(&self) -> usize {
        self.lm.d_model()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            state: true,
            reward: true,
            augment: true,
        }
    }

    fn state_of(&self, history: &[ItemId]) -> Result<Vec<f64>> {
        Ok(self.states(&[history])?.remove(0))
    }

    fn reward_of(&self, history: &[ItemId], action: ItemId) -> Result<RewardValue> {
        Ok(self.rewards(&[(history, action)])?[0])
    }

    /// Label i scores the state against the token of the i-th candidate.
    fn label_scores(
        &self,
        history: &[ItemId],
        list: &Candidates,
    ) -> Result<[f64; AUGMENT_CANDIDATES]> {
        self.template
            .augmentation_prompt(history, list, self.n_items())?;
        let s = self.state_of(history)?;
        Ok(list.map(|i| self.dot_token(&s, i)))
    }

    fn states(&self, histories: &[&[ItemId]]) -> Result<Vec<Vec<f64>>> {
        let keys = histories.iter().map(|h| h.to_vec()).collect();
        self.cache.resolve(keys, |idx| {
            let prompts = idx
                .iter()
                .map(|&i| self.template.state_prompt(histories[i], self.n_items()))
                .collect::<Result<Vec<_>>>()?;
            Ok(self
                .run(prompts, false)?
                .into_iter()
                .map(|(s, _)| s)
                .collect())
        })
    }

    fn rewards(&self, queries: &[(&[ItemId], ItemId)]) -> Result<Vec<RewardValue>> {
        let prompts = queries
            .iter()
            .map(|(h, a)| self.template.reward_prompt(h, *a, self.n_items()))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .run(prompts, true)?
            .into_iter()
            .map(|(_, r)| RewardValue::from_raw(r))
            .collect())
    }

    fn selections(&self, queries: &[(&[ItemId], Candidates)]) -> Result<Vec<usize>> {
        for (h, l) in queries {
            self.template.augmentation_prompt(h, l, self.n_items())?;
        }
        let hs: Vec<&[ItemId]> = queries.iter().map(|(h, _)| *h).collect();
        let states = self.states(&hs)?;
        Ok(queries
            .iter()
            .zip(&states)
            .map(|((_, l), s)| crate::env::argmax_first(&l.map(|i| self.dot_token(s, i))))
            .collect())
    }
}

/// How well a fine-tuned environment orders held-out examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeQuality {
    /// Fraction of examples with `r(a⁺) > r(a⁻)`.
    pub reward_accuracy: f64,
    /// Fraction of (example, other example in the same batch) pairs where
    /// the state scores the example's own next item above the other one's.
    pub state_accuracy: f64,
}

impl SurrogateEnv {
    /// Reward and state ranking quality on held-out examples; the state
    /// check contrasts examples within consecutive groups of `batch`.
    pub fn evaluate(&self, examples: &[LeExample], batch: usize) -> Result<LeQuality> {
        if examples.len() < 2 || batch < 2 {
            return Err(Error::EmptyResult(
                "need at least two held-out examples and a batch of two".into(),
            ));
        }
        let mut q: Vec<(&[ItemId], ItemId)> = Vec::with_capacity(2 * examples.len());
        for e in examples {
            q.push((&e.history, e.positive));
            q.push((&e.history, e.negative));
        }
        let r = self.rewards(&q)?;
        let wins = r.chunks(2).filter(|p| p[0].value > p[1].value).count();
        let hs: Vec<&[ItemId]> = examples.iter().map(|e| e.history.as_slice()).collect();
        let states = self.states(&hs)?;
        let (mut beaten, mut pairs) = (0usize, 0usize);
        for (group, st) in examples.chunks(batch).zip(states.chunks(batch)) {
            for (i, s) in st.iter().enumerate() {
                let own = self.dot_token(s, group[i].positive);
                for (j, other) in group.iter().enumerate() {
                    if j != i && other.positive != group[i].positive {
                        pairs += 1;
                        beaten += usize::from(own > self.dot_token(s, other.positive));
                    }
                }
            }
        }
        Ok(LeQuality {
            reward_accuracy: wins as f64 / examples.len() as f64,
            state_accuracy: beaten as f64 / pairs.max(1) as f64,
        })
    }
}
