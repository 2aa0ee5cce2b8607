//! Prompt templates and their rendering into token streams.
//!
//! A template file holds three `key = value` lines:
//!
//! ```text
//! # comment lines start with '#'
//! user = The user has listened to these tracks in chronological order: {HISTORY}
//! action = Compute the likelihood that {ACTION} be the next track to be listened to based on the listening history.
//! selection = In the list of following 5 tracks: {LIST}, based on the history, select the number of the track that he is most likely to continue to listen to.
//! ```
//!
//! `{HISTORY}`, `{ACTION}` and `{LIST}` are the only placeholders and each
//! must appear exactly once in its own line. `{{` and `}}` produce literal
//! braces. Items are never rendered as text: they become [`Piece::Item`]
//! slots that the language model fills with item-token embeddings.

use std::path::Path;

use crate::data::{ItemId, AUGMENT_CANDIDATES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Piece {
    Word(String),
    Item(ItemId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    History,
    Action,
    List,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Seg {
    Words(Vec<String>),
    Slot(Slot),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    user: Vec<Seg>,
    action: Vec<Seg>,
    selection: Vec<Seg>,
    /// Source text of the three lines, kept for display and hashing.
    pub user_text: String,
    pub action_text: String,
    pub selection_text: String,
}

pub const LFM_TEMPLATE: &str = "\
user = The user has listened to these tracks in chronological order: {HISTORY}
action = Compute the likelihood that {ACTION} be the next track to be listened to based on the listening history.
selection = In the list of following 5 tracks: [{LIST}], based on the history, select the number of the track that he is most likely to continue to listen to.
";

pub const PRODUCT_TEMPLATE: &str = "\
user = The user has shopped for these products in chronological order: {HISTORY}
action = Compute the likelihood that {ACTION} be the next product to be purchased by them based on purchase history.
selection = In the list of following 5 products: [{LIST}], based on the history, select the number of the product that he is most likely to continue to purchase next.
";

/// Lowercased words with punctuation split into separate tokens.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() || ch == '\'' {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn parse_line(text: &str, allowed: Slot) -> Result<Vec<Seg>> {
    let mut segs = Vec::new();
    let mut buf = String::new();
    let mut found = 0;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                buf.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                buf.push('}');
            }
            '{' => {
                let name: String = chars.by_ref().take_while(|&c| c != '}').collect();
                let slot = match name.as_str() {
                    "HISTORY" => Slot::History,
                    "ACTION" => Slot::Action,
                    "LIST" => Slot::List,
                    other => return Err(Error::Parse(format!("unknown placeholder {{{other}}}"))),
                };
                if slot != allowed {
                    return Err(Error::Parse(format!(
                        "placeholder {{{name}}} not allowed here"
                    )));
                }
                found += 1;
                segs.push(Seg::Words(words(&std::mem::take(&mut buf))));
                segs.push(Seg::Slot(slot));
            }
            '}' => {
                return Err(Error::Parse(
                    "unmatched '}' (write '}}' for a literal brace)".into(),
                ))
            }
            c => buf.push(c),
        }
    }
    segs.push(Seg::Words(words(&buf)));
    segs.retain(|s| !matches!(s, Seg::Words(w) if w.is_empty()));
    if found != 1 {
        return Err(Error::Parse(format!(
            "expected exactly one {allowed:?} placeholder, found {found}"
        )));
    }
    Ok(segs)
}

impl PromptTemplate {
    pub fn parse(src: &str) -> Result<Self> {
        let (mut user, mut action, mut selection) = (None, None, None);
        for (no, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", no + 1)))?;
            let value = value.trim().to_string();
            let dst = match key.trim() {
                "user" => &mut user,
                "action" => &mut action,
                "selection" => &mut selection,
                k => return Err(Error::Parse(format!("line {}: unknown key {k:?}", no + 1))),
            };
            if dst.replace(value).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key", no + 1)));
            }
        }
        let need = |v: Option<String>, k: &str| {
            v.ok_or_else(|| Error::Parse(format!("missing key {k:?}")))
        };
        let (user_text, action_text, selection_text) = (
            need(user, "user")?,
            need(action, "action")?,
            need(selection, "selection")?,
        );
        Ok(PromptTemplate {
            user: parse_line(&user_text, Slot::History)?,
            action: parse_line(&action_text, Slot::Action)?,
            selection: parse_line(&selection_text, Slot::List)?,
            user_text,
            action_text,
            selection_text,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::parse(&src)
    }

    pub fn lfm() -> Self {
        Self::parse(LFM_TEMPLATE).expect("built-in template parses")
    }

    fn expand(segs: &[Seg], items: &[ItemId], out: &mut Vec<Piece>) {
        for s in segs {
            match s {
                Seg::Words(ws) => out.extend(ws.iter().cloned().map(Piece::Word)),
                Seg::Slot(_) => out.extend(items.iter().map(|&i| Piece::Item(i))),
            }
        }
    }

    fn check(history: &[ItemId], extra: &[ItemId], n_items: usize) -> Result<()> {
        if history.is_empty() {
            return Err(Error::invalid("empty history"));
        }
        if let Some(bad) = history.iter().chain(extra).find(|i| i.index() >= n_items) {
            return Err(Error::invalid(format!("unknown item {bad}")));
        }
        Ok(())
    }

    /// The user prompt alone; the state model reads its last hidden state.
    pub fn state_prompt(&self, history: &[ItemId], n_items: usize) -> Result<Vec<Piece>> {
        Self::check(history, &[], n_items)?;
        let mut out = Vec::new();
        Self::expand(&self.user, history, &mut out);
        Ok(out)
    }

    /// User prompt followed by the action prompt.
    pub fn reward_prompt(
        &self,
        history: &[ItemId],
        action: ItemId,
        n_items: usize,
    ) -> Result<Vec<Piece>> {
        Self::check(history, &[action], n_items)?;
        let mut out = Vec::new();
        Self::expand(&self.user, history, &mut out);
        Self::expand(&self.action, &[action], &mut out);
        Ok(out)
    }

    /// User prompt followed by the selection prompt over five candidates.
    pub fn augmentation_prompt(
        &self,
        history: &[ItemId],
        list: &[ItemId; AUGMENT_CANDIDATES],
        n_items: usize,
    ) -> Result<Vec<Piece>> {
        Self::check(history, list, n_items)?;
        let mut out = Vec::new();
        Self::expand(&self.user, history, &mut out);
        Self::expand(&self.selection, list, &mut out);
        Ok(out)
    }

    /// Every literal word used by the template.
    pub fn vocabulary(&self) -> Vec<String> {
        [&self.user, &self.action, &self.selection]
            .into_iter()
            .flatten()
            .filter_map(|s| match s {
                Seg::Words(w) => Some(w.clone()),
                Seg::Slot(_) => None,
            })
            .flatten()
            .collect()
    }

    /// The three template lines with items shown as `<item>`, one sentence
    /// each; used as language-model pre-training text.
    pub fn corpus_lines(&self) -> Vec<Vec<String>> {
        [&self.user, &self.action, &self.selection]
            .into_iter()
            .map(|segs| {
                segs.iter()
                    .flat_map(|s| match s {
                        Seg::Words(w) => w.clone(),
                        Seg::Slot(_) => vec!["<item>".to_string()],
                    })
                    .collect()
            })
            .collect()
    }
}

/// Human-readable rendering of a token stream.
pub fn render_text(pieces: &[Piece]) -> String {
    pieces
        .iter()
        .map(|p| match p {
            Piece::Word(w) => w.clone(),
            Piece::Item(i) => format!("<item:{i}>"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}
