//! Orchestration: data preparation, environment construction, policy
//! training with periodic validation, evaluation and ablation.
//!
//! Every artifact begins with a header naming the artifact, the full
//! resolved configuration and git-style hashes of the input files, so a
//! result can always be traced back to what produced it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::bridge::BridgeEnv;
use crate::checkpoint;
use crate::config::{EnvKind, ExperimentConfig};
use crate::data::{ItemToken, WindowedExample};
use crate::env::{CachedEnv, Environment, FixedRewardEnv};
use crate::error::{Error, Result};
use crate::exec::{self, derive_seed};
use crate::ingest::{self, CatalogEntry, DatasetSplit, FilteredLog, ItemCatalog, RawEvent};
use crate::metrics::{self, AtK, EvalReport, DEFAULT_KS};
use crate::policy::{
    Mode, PolicyConfig, PolicyNet, StepRecord, TrainSettings, Trainer, TwinPolicy,
};
use crate::prompt::PromptTemplate;
use crate::surrogate::finetune::{finetune, EpochLoss, LeExample};
use crate::surrogate::lm::TinyLm;
use crate::surrogate::synthetic::SyntheticWorld;
use crate::surrogate::tokenize::{description_words, tokenize_items};
use crate::surrogate::{pretrained_lm, token_matrix, LeQuality, SurrogateEnv};

// Seed streams. Data streams derive from `data.seed`, training streams from
// `hyper.seed`.
const STREAM_TRAIN_WINDOWS: u64 = 0x7A11;
const STREAM_VALID_WINDOWS: u64 = 0x7A12;
const STREAM_LE_WINDOWS: u64 = 0x7A13;
const STREAM_ITEM_INIT: u64 = 0x70C;
const STREAM_POLICY_INIT: u64 = 0x1;
const STREAM_TRAINER: u64 = 0x2;
const STREAM_SHUFFLE: u64 = 0x5A00;

/// Held-out examples used to score a fine-tuned environment.
const LE_QUALITY_EXAMPLES: usize = 1000;

/// Git blob hash computed with SHA-256: `sha256("blob <len>\0" ++ bytes)`.
pub fn git_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(git_hash(&bytes))
}

/// Prepared data shared by every stage.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub log: FilteredLog,
    pub catalog: Option<ItemCatalog>,
    pub split: DatasetSplit,
    /// Input file name to content hash.
    pub hashes: BTreeMap<String, String>,
}

impl Inputs {
    pub fn n_items(&self) -> usize {
        self.log.n_items()
    }

    pub fn catalog(&self) -> Result<&ItemCatalog> {
        self.catalog
            .as_ref()
            .ok_or_else(|| Error::MissingInput("an item catalog is required for this stage".into()))
    }
}

/// Reads, filters and splits the configured event log. The catalog is
/// optional here; stages that need text ask for it.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Inputs> {
    let mut hashes = BTreeMap::new();
    hashes.insert("events".to_string(), hash_file(&cfg.data.events)?);
    let events = ingest::read_events(&cfg.data.events)?;
    let catalog = if cfg.data.catalog.exists() {
        hashes.insert("catalog".to_string(), hash_file(&cfg.data.catalog)?);
        Some(ingest::read_catalog(&cfg.data.catalog)?)
    } else {
        None
    };
    prepare_from(cfg, &events, catalog.as_deref(), hashes)
}

/// [`prepare`] over records already in memory.
pub fn prepare_from(
    cfg: &ExperimentConfig,
    events: &[RawEvent],
    catalog: Option<&[CatalogEntry]>,
    hashes: BTreeMap<String, String>,
) -> Result<Inputs> {
    let d = &cfg.data;
    let log = ingest::filter(events, d.min_seq_len, d.min_item_freq)?;
    let catalog = catalog
        .map(|c| ItemCatalog::aligned(&log.item_keys, c))
        .transpose()?;
    let split = ingest::split(
        &log.sequences,
        (d.split[0], d.split[1], d.split[2]),
        d.le_fraction,
        d.seed,
    )?;
    Ok(Inputs {
        log,
        catalog,
        split,
        hashes,
    })
}

/// Header object written at the top of every artifact.
pub fn provenance(cfg: &ExperimentConfig, inputs: &Inputs, artifact: &str) -> Value {
    json!({
        "artifact": artifact,
        "config": cfg,
        "inputs": inputs.hashes,
    })
}

/// Hash of the configuration sections an environment depends on, used to
/// decide whether a saved environment can be reused.
fn env_key(cfg: &ExperimentConfig, inputs: &Inputs, finetuned: bool) -> String {
    let mut v = json!({
        "data": cfg.data,
        "lm": cfg.lm,
        "tokenize": cfg.tokenize,
        "inputs": inputs.hashes,
    });
    if finetuned {
        v["finetune"] = json!(cfg.finetune);
        v["seq_len"] = json!(cfg.hyper.seq_len);
    }
    git_hash(v.to_string().as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

fn timed<T>(timings: &mut Vec<Timing>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f()?;
    timings.push(Timing {
        stage: stage.to_string(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Per-item result of tokenization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub item: u32,
    pub item_key: String,
    pub nll_before: f64,
    pub nll_after: f64,
}

pub struct TokenizeStage {
    pub lm: TinyLm,
    pub template: PromptTemplate,
    pub pretrain_losses: Vec<f64>,
    pub tokens: Vec<ItemToken>,
    pub records: Vec<TokenRecord>,
}

/// Pre-trains the language model on the catalog text and learns one token
/// embedding per item.
pub fn tokenize_stage(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<TokenizeStage> {
    let catalog = inputs.catalog()?;
    let template = cfg.lm.prompt_template()?;
    let (lm, pretrain_losses) = pretrained_lm(
        catalog,
        &template,
        cfg.lm.model(),
        cfg.lm.pretrain_epochs,
        cfg.lm.pretrain_lr,
        cfg.tokenize.seed,
    )?;
    let descs: Vec<Vec<String>> = catalog.entries.iter().map(description_words).collect();
    let seeds: Vec<u64> = (0..descs.len() as u64)
        .map(|i| derive_seed(derive_seed(cfg.tokenize.seed, STREAM_ITEM_INIT), i))
        .collect();
    let out = tokenize_items(&lm, &descs, &seeds, &cfg.tokenize, cfg.parallelism)?;
    let mut tokens = Vec::with_capacity(out.len());
    let mut records = Vec::with_capacity(out.len());
    for (i, o) in out.into_iter().enumerate() {
        records.push(TokenRecord {
            item: i as u32,
            item_key: inputs.log.item_keys[i].clone(),
            nll_before: o.nll_before,
            nll_after: o.nll_after,
        });
        tokens.push(ItemToken {
            item: crate::data::ItemId(i as u32),
            embedding: o.embedding,
        });
    }
    Ok(TokenizeStage {
        lm,
        template,
        pretrain_losses,
        tokens,
        records,
    })
}

/// Fine-tuning examples from a set of sessions. Negatives come from the
/// data seed, so every training seed sees the same examples.
pub fn le_examples(
    cfg: &ExperimentConfig,
    sequences: &[crate::data::InteractionSequence],
    n_items: usize,
    stream: u64,
) -> Result<Vec<LeExample>> {
    Ok(ingest::window_all(
        sequences,
        cfg.hyper.seq_len,
        n_items,
        derive_seed(cfg.data.seed, stream),
    )?
    .iter()
    .map(LeExample::from_window)
    .collect())
}

pub struct FinetuneStage {
    pub env: SurrogateEnv,
    pub epochs: Vec<EpochLoss>,
    /// Ranking quality on validation sessions, when there are enough.
    pub quality: Option<LeQuality>,
}

/// Fits the adapter and score head on the environment subset of the
/// training sessions.
pub fn finetune_stage(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    lm: TinyLm,
    tokens: Mat,
    template: PromptTemplate,
) -> Result<FinetuneStage> {
    let n = inputs.n_items();
    let examples = le_examples(cfg, &inputs.split.le_subset, n, STREAM_LE_WINDOWS)?;
    if examples.len() < cfg.finetune.batch {
        return Err(Error::EmptyResult(format!(
            "{} fine-tuning examples, fewer than one batch of {}; raise data.le_fraction",
            examples.len(),
            cfg.finetune.batch
        )));
    }
    let (adapter, epochs) = finetune(&lm, &tokens, &template, &examples, &cfg.finetune)?;
    let mut env = SurrogateEnv::new(lm, adapter, tokens, inputs.log.item_keys.clone(), template)?;
    env.parallelism = cfg.parallelism;
    let mut held = le_examples(cfg, &inputs.split.validation, n, STREAM_VALID_WINDOWS)?;
    held.truncate(LE_QUALITY_EXAMPLES);
    let quality = if held.len() >= 2 {
        Some(env.evaluate(&held, cfg.finetune.batch)?)
    } else {
        None
    };
    Ok(FinetuneStage {
        env,
        epochs,
        quality,
    })
}

/// Validation result at one point of training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub step: u64,
    pub epoch: usize,
    pub hr10: f64,
    pub ndcg10: f64,
    pub improved: bool,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogEvent {
    Step(StepRecord),
    Validation(Validation),
}

pub struct TrainOutcome {
    /// The main copy at its best validation point.
    pub policy: PolicyNet,
    pub log: Vec<LogEvent>,
    pub steps: u64,
    pub best_step: u64,
    /// Test-split metrics of `policy`.
    pub report: EvalReport,
    pub timings: Vec<Timing>,
}

pub fn policy_config(cfg: &ExperimentConfig, n_items: usize, d_lm: usize) -> PolicyConfig {
    let h = &cfg.hyper;
    let state = cfg.model.mode.state_source();
    PolicyConfig {
        backbone: cfg.model.backbone,
        n_items,
        emb_dim: h.emb_dim,
        hidden_dim: h.hidden_dim,
        seq_len: h.seq_len,
        state,
        d_lm: if state.uses_env() { d_lm } else { 0 },
        d_proj: cfg.model.d_proj,
    }
}

pub fn train_settings(cfg: &ExperimentConfig) -> TrainSettings {
    let (h, m) = (&cfg.hyper, &cfg.model);
    TrainSettings {
        framework: m.framework,
        mode: m.mode,
        gamma: h.gamma,
        w_ah: h.w_ah,
        w_aq: h.w_aq,
        lr: h.lr,
        fixed: m.fixed,
        sample_candidates: m.sample_candidates,
        chunk: m.chunk,
        parallelism: cfg.parallelism,
    }
}

fn check_capabilities<E: Environment + ?Sized>(mode: Mode, env: &E) -> Result<()> {
    let need = mode.required();
    let have = env.capabilities();
    for (wanted, present, what) in [
        (need.state, have.state, "states"),
        (need.reward, have.reward, "rewards"),
        (need.augment, have.augment, "augmentation"),
    ] {
        if wanted && !present {
            return Err(Error::Env(format!(
                "mode {mode} needs {what}, which the environment does not provide"
            )));
        }
    }
    Ok(())
}

/// Validation bookkeeping: best main copy so far and validations since.
struct Tracker<'a> {
    cfg: &'a ExperimentConfig,
    validation: Option<&'a [crate::data::InteractionSequence]>,
    best: Option<(f64, u64, PolicyNet)>,
    stale: usize,
    last_check: u64,
}

impl Tracker<'_> {
    /// Validates the main copy and switches augmentation on. Returns true
    /// when patience has run out.
    fn check(
        &mut self,
        trainer: &mut Trainer,
        epoch: usize,
        log: &mut Vec<LogEvent>,
    ) -> Result<bool> {
        let h = &self.cfg.hyper;
        trainer.activate_augmentation();
        self.last_check = trainer.steps();
        let Some(val) = self.validation else {
            return Ok(false);
        };
        let r = metrics::evaluate(
            &trainer.twin.main,
            val,
            h.seq_len,
            &[10],
            self.cfg.parallelism,
        )?;
        let m = r.metrics[0];
        let improved = self.best.as_ref().is_none_or(|(b, _, _)| m.ndcg > *b);
        if improved {
            self.best = Some((m.ndcg, trainer.steps(), trainer.twin.main.clone()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        log.push(LogEvent::Validation(Validation {
            step: trainer.steps(),
            epoch,
            hr10: m.hr,
            ndcg10: m.ndcg,
            improved,
        }));
        Ok(h.patience > 0 && self.stale >= h.patience)
    }
}

/// Trains a twin policy on the training split. The main copy is validated
/// on NDCG@10 every `eval_every_steps` steps; augmentation switches on after
/// the first validation; training stops after `patience` validations
/// without improvement or after `max_epochs`. The best main copy is then
/// evaluated on the test split.
pub fn train_policy<E: Environment + ?Sized>(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    env: &E,
) -> Result<TrainOutcome> {
    let h = &cfg.hyper;
    check_capabilities(cfg.model.mode, env)?;
    let n = inputs.n_items();
    let pc = policy_config(cfg, n, env.state_dim());
    let twin = TwinPolicy::new(pc, derive_seed(h.seed, STREAM_POLICY_INIT))?;
    let mut trainer = Trainer::new(
        twin,
        train_settings(cfg),
        derive_seed(h.seed, STREAM_TRAINER),
    )?;
    let windows = ingest::window_all(
        &inputs.split.train,
        h.seq_len,
        n,
        derive_seed(cfg.data.seed, STREAM_TRAIN_WINDOWS),
    )?;
    if windows.is_empty() {
        return Err(Error::EmptyResult("no training examples".into()));
    }
    let has_validation = inputs.split.validation.iter().any(|s| s.len() >= 2);

    let mut timings = Vec::new();
    let t_train = Instant::now();
    let mut log = Vec::new();
    let mut track = Tracker {
        cfg,
        validation: has_validation.then_some(inputs.split.validation.as_slice()),
        best: None,
        stale: 0,
        last_check: 0,
    };
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut batch: Vec<WindowedExample> = Vec::with_capacity(h.batch_size);
    'epochs: for epoch in 0..h.max_epochs {
        order.shuffle(&mut exec::rng(derive_seed(
            h.seed,
            STREAM_SHUFFLE + epoch as u64,
        )));
        for idx in order.chunks(h.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| windows[i].clone()));
            let rec = trainer.train_step(&batch, env)?;
            log.push(LogEvent::Step(rec));
            if trainer.steps() % h.eval_every_steps as u64 == 0
                && track.check(&mut trainer, epoch, &mut log)?
            {
                break 'epochs;
            }
        }
    }
    if trainer.steps() != track.last_check {
        track.check(&mut trainer, h.max_epochs.saturating_sub(1), &mut log)?;
    }
    timings.push(Timing {
        stage: "train".into(),
        seconds: t_train.elapsed().as_secs_f64(),
    });

    let steps = trainer.steps();
    let (best_step, policy) = match track.best {
        Some((_, s, net)) => (s, net),
        None => (steps, trainer.twin.main),
    };
    let report = timed(&mut timings, "test", || {
        metrics::evaluate(
            &policy,
            &inputs.split.test,
            h.seq_len,
            &DEFAULT_KS,
            cfg.parallelism,
        )
    })?;
    Ok(TrainOutcome {
        policy,
        log,
        steps,
        best_step,
        report,
        timings,
    })
}

// ---- artifacts --------------------------------------------------------

fn write_jsonl<T: Serialize>(path: &Path, header: &Value, lines: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Appends timings, starting the file with a header if it is new. Wall
/// times never go into the other artifacts, which stay reproducible.
fn append_timings(out: &Path, header: &Value, command: &str, t: &[Timing]) -> Result<()> {
    let path = out.join("timing.jsonl");
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    for x in t {
        writeln!(
            f,
            "{}",
            json!({"command": command, "stage": x.stage, "seconds": x.seconds})
        )?;
    }
    Ok(())
}

/// Output directory layout.
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Layout {
            out: out.to_path_buf(),
        })
    }

    pub fn prep(&self) -> PathBuf {
        self.out.join("prep.jsonl")
    }
    pub fn tokenize_dir(&self) -> PathBuf {
        self.out.join("tokenize")
    }
    pub fn tokenize_log(&self) -> PathBuf {
        self.out.join("tokenize.jsonl")
    }
    pub fn le_dir(&self) -> PathBuf {
        self.out.join("le")
    }
    pub fn finetune_log(&self) -> PathBuf {
        self.out.join("finetune.jsonl")
    }
    pub fn train_log(&self) -> PathBuf {
        self.out.join("train_log.jsonl")
    }
    pub fn policy(&self) -> PathBuf {
        self.out.join("policy.jsonl")
    }
    pub fn eval(&self) -> PathBuf {
        self.out.join("eval.jsonl")
    }
    pub fn ablate(&self) -> PathBuf {
        self.out.join("ablate.jsonl")
    }
}

/// Counts written by `prep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepSummary {
    pub items: usize,
    pub interactions: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub le_subset: usize,
}

#[derive(Serialize)]
struct SequenceLine<'a> {
    part: &'a str,
    session_id: &'a str,
    items: Vec<&'a str>,
}

pub fn run_prep(cfg: &ExperimentConfig, out: &Path) -> Result<PrepSummary> {
    let lay = Layout::new(out)?;
    let inputs = prepare(cfg)?;
    let s = &inputs.split;
    let summary = PrepSummary {
        items: inputs.n_items(),
        interactions: inputs.log.n_interactions(),
        train: s.train.len(),
        validation: s.validation.len(),
        test: s.test.len(),
        le_subset: s.le_subset.len(),
    };
    let mut header = provenance(cfg, &inputs, "prep");
    header["summary"] = json!(summary);
    let keys = &inputs.log.item_keys;
    let mut lines = Vec::new();
    for (part, seqs) in [
        ("train", &s.train),
        ("validation", &s.validation),
        ("test", &s.test),
        ("le", &s.le_subset),
    ] {
        for q in seqs {
            lines.push(SequenceLine {
                part,
                session_id: &q.session_id,
                items: q.items.iter().map(|i| keys[i.index()].as_str()).collect(),
            });
        }
    }
    write_jsonl(&lay.prep(), &header, &lines)?;
    Ok(summary)
}

fn saved_key(dir: &Path) -> Option<String> {
    let text = std::fs::read_to_string(dir.join("env.json")).ok()?;
    let v: Value = serde_json::from_str(&text).ok()?;
    v["provenance"]["env_key"].as_str().map(str::to_string)
}

fn load_tokenized(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    lay: &Layout,
    timings: &mut Vec<Timing>,
) -> Result<SurrogateEnv> {
    let key = env_key(cfg, inputs, false);
    if saved_key(&lay.tokenize_dir()).as_deref() == Some(key.as_str()) {
        return SurrogateEnv::load(&lay.tokenize_dir());
    }
    let st = timed(timings, "tokenize", || tokenize_stage(cfg, inputs))?;
    let mut header = provenance(cfg, inputs, "tokenize");
    header["env_key"] = json!(key);
    header["pretrain_losses"] = json!(st.pretrain_losses);
    write_jsonl(&lay.tokenize_log(), &header, &st.records)?;
    let adapter = st.lm.new_adapter(cfg.finetune.rank, cfg.finetune.seed);
    let env = SurrogateEnv::new(
        st.lm,
        adapter,
        token_matrix(&st.tokens)?,
        inputs.log.item_keys.clone(),
        st.template,
    )?;
    env.save(&lay.tokenize_dir(), Some(&header))?;
    Ok(env)
}

pub fn run_tokenize(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TokenRecord>> {
    let lay = Layout::new(out)?;
    let inputs = prepare(cfg)?;
    let mut timings = Vec::new();
    let _ = std::fs::remove_file(lay.tokenize_dir().join("env.json"));
    load_tokenized(cfg, &inputs, &lay, &mut timings)?;
    append_timings(
        out,
        &provenance(cfg, &inputs, "timing"),
        "tokenize",
        &timings,
    )?;
    let text = std::fs::read_to_string(lay.tokenize_log())?;
    text.lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub epochs: Vec<EpochLoss>,
    pub quality: Option<LeQuality>,
}

fn load_finetuned(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    lay: &Layout,
    timings: &mut Vec<Timing>,
    force: bool,
) -> Result<(SurrogateEnv, Option<FinetuneSummary>)> {
    let key = env_key(cfg, inputs, true);
    if !force && saved_key(&lay.le_dir()).as_deref() == Some(key.as_str()) {
        let mut env = SurrogateEnv::load(&lay.le_dir())?;
        env.parallelism = cfg.parallelism;
        return Ok((env, None));
    }
    let base = load_tokenized(cfg, inputs, lay, timings)?;
    let st = timed(timings, "finetune", || {
        finetune_stage(cfg, inputs, base.lm, base.tokens, base.template)
    })?;
    let mut header = provenance(cfg, inputs, "finetune");
    header["env_key"] = json!(key);
    header["quality"] = json!(st.quality);
    write_jsonl(&lay.finetune_log(), &header, &st.epochs)?;
    st.env.save(&lay.le_dir(), Some(&header))?;
    let summary = FinetuneSummary {
        epochs: st.epochs,
        quality: st.quality,
    };
    Ok((st.env, Some(summary)))
}

pub fn run_finetune(cfg: &ExperimentConfig, out: &Path) -> Result<FinetuneSummary> {
    let lay = Layout::new(out)?;
    let inputs = prepare(cfg)?;
    let mut timings = Vec::new();
    let (_, summary) = load_finetuned(cfg, &inputs, &lay, &mut timings, true)?;
    append_timings(
        out,
        &provenance(cfg, &inputs, "timing"),
        "finetune-le",
        &timings,
    )?;
    Ok(summary.expect("forced fine-tuning returns a summary"))
}

/// The environment a configuration asks for. Modes that never query the
/// environment get the fixed-reward one whatever `model.env` says, so no
/// language model is built for them.
pub fn open_env(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    out: &Path,
    timings: &mut Vec<Timing>,
) -> Result<Box<dyn Environment>> {
    let need = cfg.model.mode.required();
    if !(need.state || need.reward || need.augment) {
        return Ok(Box::new(FixedRewardEnv::default()));
    }
    match cfg.model.env {
        EnvKind::FixedReward => Ok(Box::new(FixedRewardEnv::default())),
        EnvKind::Bridge => Ok(Box::new(CachedEnv::new(BridgeEnv::connect(
            &cfg.bridge,
            &inputs.log.item_keys,
        )?))),
        EnvKind::Surrogate => {
            let lay = Layout::new(out)?;
            let (env, _) = load_finetuned(cfg, inputs, &lay, timings, false)?;
            if env.item_keys != inputs.log.item_keys {
                return Err(Error::Config(
                    "saved environment was built for a different item set".into(),
                ));
            }
            Ok(Box::new(CachedEnv::new(env)))
        }
    }
}

/// Writes the training log, the policy and the test report of one run.
pub fn write_run(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    lay: &Layout,
    run: &TrainOutcome,
) -> Result<EvalReport> {
    let header = provenance(cfg, inputs, "train_log");
    write_jsonl(&lay.train_log(), &header, &run.log)?;
    let mut ph = provenance(cfg, inputs, "policy");
    ph["policy"] = json!(run.policy.config);
    ph["best_step"] = json!(run.best_step);
    ph["steps"] = json!(run.steps);
    checkpoint::save_tensors(&lay.policy(), &run.policy.params, Some(&ph))?;
    let mut report = run.report.clone();
    report.config = provenance(cfg, inputs, "eval");
    std::fs::write(lay.eval(), report.to_jsonl())?;
    Ok(report)
}

/// The full pipeline: prepare, build or reuse the environment, train,
/// evaluate on test.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let lay = Layout::new(out)?;
    let inputs = prepare(cfg)?;
    let mut timings = Vec::new();
    let env = open_env(cfg, &inputs, out, &mut timings)?;
    let run = train_policy(cfg, &inputs, &*env)?;
    timings.extend(run.timings.iter().cloned());
    let report = write_run(cfg, &inputs, &lay, &run)?;
    append_timings(out, &provenance(cfg, &inputs, "timing"), "train", &timings)?;
    Ok(report)
}

/// Re-evaluates a saved policy on the test split.
pub fn run_eval(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let lay = Layout::new(out)?;
    let inputs = prepare(cfg)?;
    let path = lay.policy();
    let prov = checkpoint::read_provenance(&path)?
        .ok_or_else(|| Error::Parse(format!("{} has no provenance header", path.display())))?;
    let pc: PolicyConfig = serde_json::from_value(prov["policy"].clone())?;
    if pc.n_items != inputs.n_items() {
        return Err(Error::Config(format!(
            "policy was trained on {} items, data has {}",
            pc.n_items,
            inputs.n_items()
        )));
    }
    let mut net = PolicyNet::new(pc, 0)?;
    checkpoint::restore(&mut net.params, &checkpoint::load_tensors(&path)?)?;
    let mut report = metrics::evaluate(
        &net,
        &inputs.split.test,
        cfg.hyper.seq_len,
        &DEFAULT_KS,
        cfg.parallelism,
    )?;
    report.config = provenance(cfg, &inputs, "eval");
    std::fs::write(lay.eval(), report.to_jsonl())?;
    Ok(report)
}

/// One run of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub steps: u64,
    pub best_step: u64,
    pub metrics: Vec<AtK>,
}

/// Mean metrics per grid value, in grid order.
pub fn ablation_means(rows: &[AblationRow]) -> Vec<(f64, Vec<AtK>)> {
    let mut out: Vec<(f64, Vec<AtK>, usize)> = Vec::new();
    for r in rows {
        let slot = match out.iter().position(|(v, _, _)| *v == r.value) {
            Some(i) => i,
            None => {
                let zero = r
                    .metrics
                    .iter()
                    .map(|m| AtK {
                        k: m.k,
                        hr: 0.0,
                        ndcg: 0.0,
                    })
                    .collect();
                out.push((r.value, zero, 0));
                out.len() - 1
            }
        };
        let (_, acc, n) = &mut out[slot];
        for (a, m) in acc.iter_mut().zip(&r.metrics) {
            a.hr += m.hr;
            a.ndcg += m.ndcg;
        }
        *n += 1;
    }
    out.into_iter()
        .map(|(v, acc, n)| {
            let m = acc
                .into_iter()
                .map(|a| AtK {
                    k: a.k,
                    hr: a.hr / n as f64,
                    ndcg: a.ndcg / n as f64,
                })
                .collect();
            (v, m)
        })
        .collect()
}

/// Plain-text table of grid means, one row per value.
pub fn ablation_table(param: &str, rows: &[AblationRow]) -> String {
    let means = ablation_means(rows);
    let mut s = format!("{param:>8}");
    if let Some((_, m)) = means.first() {
        for a in m {
            s.push_str(&format!(
                "  {:>8}  {:>8}",
                format!("HR@{}", a.k),
                format!("NDCG@{}", a.k)
            ));
        }
    }
    s.push('\n');
    for (v, m) in &means {
        s.push_str(&format!("{v:>8}"));
        for a in m {
            s.push_str(&format!("  {:>8.4}  {:>8.4}", a.hr, a.ndcg));
        }
        s.push('\n');
    }
    s
}

/// Trains one policy per (grid value, seed) against a shared environment.
pub fn ablate_with<E: Environment + ?Sized>(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    env: &E,
) -> Result<Vec<AblationRow>> {
    let a = &cfg.ablate;
    if a.grid.is_empty() || a.seeds.is_empty() {
        return Err(Error::Config(
            "ablate.grid and ablate.seeds must be nonempty".into(),
        ));
    }
    let mut rows = Vec::new();
    for &value in &a.grid {
        for &seed in &a.seeds {
            let mut c = cfg.clone();
            match a.param.as_str() {
                "w_ah" => c.hyper.w_ah = value,
                "w_aq" => c.hyper.w_aq = value,
                p => return Err(Error::Config(format!("cannot ablate {p:?}"))),
            }
            c.hyper.seed = seed;
            let run = train_policy(&c, inputs, env)?;
            rows.push(AblationRow {
                param: a.param.clone(),
                value,
                seed,
                steps: run.steps,
                best_step: run.best_step,
                metrics: run.report.metrics,
            });
        }
    }
    Ok(rows)
}

pub fn run_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let lay = Layout::new(out)?;
    let inputs = prepare(cfg)?;
    let mut timings = Vec::new();
    let env = open_env(cfg, &inputs, out, &mut timings)?;
    let rows = timed(&mut timings, "ablate", || ablate_with(cfg, &inputs, &*env))?;
    let mut header = provenance(cfg, &inputs, "ablate");
    header["means"] = json!(ablation_means(&rows)
        .into_iter()
        .map(|(v, m)| json!({"value": v, "metrics": m}))
        .collect::<Vec<_>>());
    write_jsonl(&lay.ablate(), &header, &rows)?;
    append_timings(out, &provenance(cfg, &inputs, "timing"), "ablate", &timings)?;
    Ok(rows)
}

/// Writes a synthetic world's event log, catalog and ground truth into
/// `out` (`events.jsonl`, `catalog.jsonl`, `world.json`).
pub fn run_synth(cfg: &ExperimentConfig, out: &Path) -> Result<SyntheticWorld> {
    std::fs::create_dir_all(out)?;
    let world = SyntheticWorld::new(cfg.synthetic.clone())?;
    ingest::write_events(&out.join("events.jsonl"), &world.events())?;
    ingest::write_catalog(&out.join("catalog.jsonl"), &world.catalog())?;
    std::fs::write(
        out.join("world.json"),
        serde_json::to_string(&world)? + "\n",
    )?;
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_hash_of_empty_blob() {
        // `git hash-object --object-format=sha256 /dev/null`
        assert_eq!(
            git_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn ablation_means_average_seeds() {
        let row = |value: f64, hr: f64| AblationRow {
            param: "w_ah".into(),
            value,
            seed: 0,
            steps: 1,
            best_step: 1,
            metrics: vec![AtK {
                k: 5,
                hr,
                ndcg: hr / 2.0,
            }],
        };
        let rows = [row(0.1, 0.2), row(0.1, 0.4), row(1.0, 0.5)];
        let m = ablation_means(&rows);
        assert_eq!(m.len(), 2);
        assert!((m[0].1[0].hr - 0.3).abs() < 1e-12);
        assert!((m[0].1[0].ndcg - 0.15).abs() < 1e-12);
        assert_eq!(m[1].1[0].hr, 0.5);
        assert!(ablation_table("w_ah", &rows).contains("HR@5"));
    }
}
