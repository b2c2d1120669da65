//! Conversation and document types, the word-level tokenizer, the
//! vocabulary and construction of `[CLS] q_1 [SEP] ... q_n [SEP]` encoder
//! inputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;

const SPECIALS: [&str; 4] = [CLS, SEP, PAD, UNK];

/// Smallest `max_len` accepted by [`build_model_input`].
pub const MIN_MAX_LEN: usize = 8;

/// A multi-turn search conversation. The last query is the current intent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub conv_id: String,
    pub queries: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reformulated_last: Option<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source_tag: String,
}

impl Conversation {
    pub fn new(conv_id: impl Into<String>, queries: Vec<String>) -> Result<Self> {
        let conv = Conversation {
            conv_id: conv_id.into(),
            queries,
            reformulated_last: None,
            source_tag: String::new(),
        };
        conv.validate()?;
        Ok(conv)
    }

    pub fn with_reformulation(mut self, reformulated: impl Into<String>) -> Self {
        self.reformulated_last = Some(reformulated.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidConversation {
            conv_id: self.conv_id.clone(),
            reason: reason.to_string(),
        };
        if self.queries.is_empty() {
            return Err(bad("no queries"));
        }
        if self.queries.iter().any(|q| q.split_whitespace().next().is_none()) {
            return Err(bad("empty utterance"));
        }
        if let Some(r) = &self.reformulated_last {
            if r.split_whitespace().next().is_none() {
                return Err(bad("empty reformulation"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn last_query(&self) -> &str {
        self.queries.last().map(String::as_str).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

/// Lowercase, split on whitespace, and strip leading/trailing
/// non-alphanumeric characters from each piece. Internal punctuation such
/// as the hyphen in "real-time" is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|piece| piece.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|piece| !piece.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn to_word_set<S: AsRef<str>>(tokens: &[S]) -> BTreeSet<String> {
    tokens.iter().map(|t| t.as_ref().to_string()).collect()
}

/// Dense token ↔ id mapping. Ids 0..4 are the reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(
            tokens
                .into_iter()
                .map(Into::into)
                .filter(|t| !SPECIALS.contains(&t.as_str())),
        );
        let mut index = HashMap::with_capacity(all.len());
        for (id, tok) in all.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    /// Builds the vocabulary from raw texts, keeping tokens seen at least
    /// `min_freq` times, in lexicographic order after the specials.
    pub fn build<'a, I>(texts: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        Self::from_tokens(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_freq.max(1))
                .map(|(t, _)| t),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_to_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.token_to_id(token).unwrap_or(UNK_ID)
    }

    pub fn id_to_token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id_or_unk(t)).collect()
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, special) in SPECIALS.iter().enumerate() {
            if lines.get(i) != Some(special) {
                return Err(Error::Parse {
                    path: "<vocab>".into(),
                    line: i + 1,
                    message: format!("expected special token {special}"),
                });
            }
        }
        Self::from_tokens(lines.into_iter().skip(SPECIALS.len()).map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    /// SHA-256 of the vocabulary file contents, hex-encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Token ids for `[CLS] u_1 [SEP] ... u_n [SEP]` with per-utterance
/// bookkeeping. `utterance_spans[i]` is the half-open content range of
/// surviving utterance `i`, and `sep_positions[i]` the `[SEP]` after it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub token_ids: Vec<usize>,
    pub cls_position: usize,
    pub sep_positions: Vec<usize>,
    pub utterance_spans: Vec<(usize, usize)>,
    pub truncated: bool,
    /// Number of leading utterances removed entirely by truncation.
    #[serde(default)]
    pub dropped_utterances: usize,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_utterances(&self) -> usize {
        self.sep_positions.len()
    }
}

/// Builds the encoder input for a conversation. Unknown tokens map to
/// `[UNK]`; overflow is removed from the front (see [`truncate_front`]).
pub fn build_model_input(
    conversation: &Conversation,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<ModelInput> {
    let utterances: Vec<Vec<usize>> = conversation.queries.iter().map(|q| vocab.encode(q)).collect();
    build_from_ids(&utterances, max_len)
}

/// Encoder input for a single text (`[CLS] text [SEP]`), used for the
/// teacher's reformulated query and for documents.
pub fn build_single_input(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<ModelInput> {
    let ids = vocab.encode(text);
    if ids.len() + 2 > max_len {
        // Documents may be longer than the window; keep their head.
        let keep = max_len.saturating_sub(2);
        return build_from_ids(&[ids[..keep].to_vec()], max_len).map(|mut input| {
            input.truncated = true;
            input
        });
    }
    build_from_ids(&[ids], max_len)
}

pub(crate) fn build_from_ids(utterances: &[Vec<usize>], max_len: usize) -> Result<ModelInput> {
    if max_len < MIN_MAX_LEN {
        return Err(Error::InvalidArgument(format!(
            "max_len must be at least {MIN_MAX_LEN}, got {max_len}"
        )));
    }
    let last = utterances
        .last()
        .ok_or_else(|| Error::Empty("conversation has no utterances".into()))?;
    let needed = last.len() + 2;
    if needed > max_len {
        return Err(Error::FinalUtteranceTooLong { max_len, needed });
    }
    let total = 1 + utterances.iter().map(|u| u.len() + 1).sum::<usize>();
    if total <= max_len {
        return Ok(assemble(utterances.iter().map(|u| u.as_slice()), false, 0));
    }
    Ok(truncate_front(utterances, max_len))
}

/// Removes `total - max_len` tokens from the front of the earliest
/// utterances. An utterance whose content is fully consumed is dropped
/// together with its `[SEP]`; the final utterance is never touched.
pub fn truncate_front(utterances: &[Vec<usize>], max_len: usize) -> ModelInput {
    let total = 1 + utterances.iter().map(|u| u.len() + 1).sum::<usize>();
    if total <= max_len {
        return assemble(utterances.iter().map(|u| u.as_slice()), false, 0);
    }
    let mut excess = total - max_len;
    let mut dropped = 0;
    let mut first_kept: &[usize] = &[];
    let context = &utterances[..utterances.len() - 1];
    for utt in context {
        if excess == 0 {
            break;
        }
        if excess < utt.len() {
            first_kept = &utt[excess..];
            dropped += 1;
            break;
        }
        // content fully consumed: the [SEP] goes with it
        excess = excess.saturating_sub(utt.len() + 1);
        dropped += 1;
    }
    let mut kept: Vec<&[usize]> = Vec::with_capacity(utterances.len());
    let partial = !first_kept.is_empty();
    if partial {
        kept.push(first_kept);
    }
    kept.extend(utterances[dropped..].iter().map(|u| u.as_slice()));
    let dropped_whole = if partial { dropped - 1 } else { dropped };
    assemble(kept.into_iter(), true, dropped_whole)
}

fn assemble<'a>(
    utterances: impl Iterator<Item = &'a [usize]>,
    truncated: bool,
    dropped_utterances: usize,
) -> ModelInput {
    let mut token_ids = vec![CLS_ID];
    let mut sep_positions = Vec::new();
    let mut utterance_spans = Vec::new();
    for utt in utterances {
        let start = token_ids.len();
        token_ids.extend_from_slice(utt);
        utterance_spans.push((start, token_ids.len()));
        sep_positions.push(token_ids.len());
        token_ids.push(SEP_ID);
    }
    ModelInput {
        token_ids,
        cls_position: 0,
        sep_positions,
        utterance_spans,
        truncated,
        dropped_utterances,
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("serializable record");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let convs: Vec<Conversation> = read_jsonl(path)?;
    for c in &convs {
        c.validate()?;
    }
    Ok(convs)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let docs: Vec<Document> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for (i, d) in docs.iter().enumerate() {
        if d.text.trim().is_empty() || !seen.insert(d.doc_id.as_str()) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("document {:?} is empty or duplicated", d.doc_id),
            });
        }
    }
    Ok(docs)
}
