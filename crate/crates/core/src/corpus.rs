//! Corpus ingestion, vocabulary and padded batches.
//!
//! Corpora are pre-tokenized: one sentence per line, tokens separated by
//! whitespace, one file per split and style (`train.pos.txt`,
//! `train.neg.txt`, ...).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// One of the two styles. `Negative` is id 0, `Positive` id 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleLabel {
    #[serde(rename = "neg")]
    Negative,
    #[serde(rename = "pos")]
    Positive,
}

impl StyleLabel {
    pub const ALL: [StyleLabel; 2] = [StyleLabel::Negative, StyleLabel::Positive];

    pub fn id(self) -> usize {
        match self {
            StyleLabel::Negative => 0,
            StyleLabel::Positive => 1,
        }
    }

    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            0 => Ok(StyleLabel::Negative),
            1 => Ok(StyleLabel::Positive),
            _ => Err(Error::InvalidArgument(format!("style id {id} is not 0 or 1"))),
        }
    }

    /// The other style; the transfer target in the two-style setting.
    pub fn flip(self) -> Self {
        match self {
            StyleLabel::Negative => StyleLabel::Positive,
            StyleLabel::Positive => StyleLabel::Negative,
        }
    }

    /// Short tag used in file names.
    pub fn tag(self) -> &'static str {
        match self {
            StyleLabel::Negative => "neg",
            StyleLabel::Positive => "pos",
        }
    }
}

impl fmt::Display for StyleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for StyleLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "neg" | "negative" | "0" => Ok(StyleLabel::Negative),
            "pos" | "positive" | "1" => Ok(StyleLabel::Positive),
            other => Err(Error::InvalidArgument(format!("unknown style `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub style: StyleLabel,
}

impl Example {
    pub fn new(sentence: &str, style: StyleLabel) -> Self {
        Example {
            tokens: sentence.split_whitespace().map(str::to_owned).collect(),
            style,
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub examples: Vec<Example>,
    /// Number of blank lines that were skipped.
    pub skipped: usize,
}

/// Reads one labeled sentence per non-blank line.
pub fn load_corpus(path: &Path, style: StyleLabel) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut skipped = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            skipped += 1;
            continue;
        }
        examples.push(Example::new(line, style));
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} empty line(s)", path.display());
    }
    if examples.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(LoadedCorpus { examples, skipped })
}

/// Path of `<dir>/<split>.<style>.txt`.
pub fn split_path(dir: &Path, split: &str, style: StyleLabel) -> PathBuf {
    dir.join(format!("{split}.{}.txt", style.tag()))
}

/// Loads both style files of one split, negative first.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Example>> {
    let mut all = Vec::new();
    for style in StyleLabel::ALL {
        all.extend(load_corpus(&split_path(dir, split, style), style)?.examples);
    }
    Ok(all)
}

/// Reads a reference file: `input \t reference [\t reference ...]` per line.
pub fn load_references(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let input = fields.next().unwrap_or_default().trim().to_owned();
        let refs: Vec<String> = fields.map(|f| f.trim().to_owned()).collect();
        if refs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{}:{}: expected `input<TAB>reference`",
                path.display(),
                n + 1
            )));
        }
        out.push((input, refs));
    }
    Ok(out)
}

pub fn token_frequencies(examples: &[Example]) -> BTreeMap<String, usize> {
    let mut freq = BTreeMap::new();
    for ex in examples {
        for tok in &ex.tokens {
            *freq.entry(tok.clone()).or_insert(0) += 1;
        }
    }
    freq
}

/// Token/id mapping with four reserved ids (`PAD`, `UNK`, `BOS`, `EOS`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved ids first, then tokens with frequency `>= min_freq` by
    /// descending frequency, ties broken lexicographically.
    pub fn build(examples: &[Example], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
        }
        let mut ranked: Vec<(String, usize)> = token_frequencies(examples)
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, stopping at `EOS` and dropping `PAD`/`BOS`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_owned())
            .collect()
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::InvalidArgument(format!(
                "{} is not a vocabulary file",
                path.display()
            )));
        }
        Ok(Self::from_tokens(
            lines[RESERVED.len()..].iter().map(|s| s.to_string()),
        ))
    }
}

/// Padded id matrix for a group of sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, T]`, `PAD` beyond each length.
    pub ids: Array2<usize>,
    pub lengths: Vec<usize>,
    /// `[B, T]`, true on real tokens.
    pub mask: Array2<bool>,
    pub styles: Vec<StyleLabel>,
}

impl Batch {
    /// Truncates each sentence to `max_len` and pads to the longest one.
    pub fn new(examples: &[&Example], vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let seqs: Vec<Vec<usize>> = examples
            .iter()
            .map(|ex| {
                let mut ids = vocab.encode(&ex.tokens);
                ids.truncate(max_len);
                ids
            })
            .collect();
        let styles = examples.iter().map(|ex| ex.style).collect();
        Self::from_ids(seqs, styles)
    }

    pub fn from_ids(seqs: Vec<Vec<usize>>, styles: Vec<StyleLabel>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("cannot batch zero sentences".into()));
        }
        if seqs.len() != styles.len() {
            return Err(Error::InvalidArgument("one style label per sentence".into()));
        }
        if let Some(i) = seqs.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("sentence {i} has no tokens")));
        }
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let t_max = *lengths.iter().max().unwrap();
        let mut ids = Array2::from_elem((seqs.len(), t_max), PAD);
        let mut mask = Array2::from_elem((seqs.len(), t_max), false);
        for (b, seq) in seqs.iter().enumerate() {
            for (t, &id) in seq.iter().enumerate() {
                ids[[b, t]] = id;
                mask[[b, t]] = true;
            }
        }
        Ok(Batch {
            ids,
            lengths,
            mask,
            styles,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.ids.ncols()
    }

    pub fn sentence(&self, b: usize) -> Vec<usize> {
        self.ids.row(b).iter().take(self.lengths[b]).copied().collect()
    }

    /// Decoder inputs, `[B, T+1]`: `BOS` followed by the sentence.
    pub fn decoder_inputs(&self) -> Array2<usize> {
        let (b, t) = self.ids.dim();
        let mut out = Array2::from_elem((b, t + 1), PAD);
        for r in 0..b {
            out[[r, 0]] = BOS;
            for c in 0..self.lengths[r] {
                out[[r, c + 1]] = self.ids[[r, c]];
            }
        }
        out
    }

    /// Decoder targets, `[B, T+1]`: the sentence followed by `EOS`.
    pub fn decoder_targets(&self) -> Array2<usize> {
        let (b, t) = self.ids.dim();
        let mut out = Array2::from_elem((b, t + 1), PAD);
        for r in 0..b {
            for c in 0..self.lengths[r] {
                out[[r, c]] = self.ids[[r, c]];
            }
            out[[r, self.lengths[r]]] = EOS;
        }
        out
    }

    /// Mask over decoder steps: the sentence plus its `EOS`.
    pub fn decoder_mask(&self) -> Array2<bool> {
        let (b, t) = self.ids.dim();
        Array2::from_shape_fn((b, t + 1), |(r, c)| c <= self.lengths[r])
    }

    pub fn target_styles(&self) -> Vec<StyleLabel> {
        self.styles.iter().map(|s| s.flip()).collect()
    }
}

/// Splits `0..n` into consecutive chunks of at most `batch_size`.
pub fn chunk_indices(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
