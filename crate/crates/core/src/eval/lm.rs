//! Interpolated modified Kneser–Ney n-gram language model.
//!
//! Lower orders use continuation counts (number of distinct left
//! extensions), except for n-grams that begin with `<s>`, which cannot be
//! extended and keep their raw counts. After estimation the model is stored
//! in backoff form: every seen n-gram holds its interpolated probability and
//! every seen context its backoff weight, so a query for an unseen n-gram
//! multiplies backoff weights down to the longest seen suffix.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const DEFAULT_ORDER: usize = 5;

/// Discounts used when an order's count-of-counts cannot support the
/// closed-form estimates.
const FALLBACK_DISCOUNTS: [f64; 3] = [0.5, 1.0, 1.5];

/// Anything that assigns conditional probabilities to tokens.
pub trait LanguageModel {
    /// `ln p(</s>, w_1..w_n)` summed over the sentence, and the number of
    /// predicted tokens (`n + 1`).
    fn sentence_log_prob(&self, tokens: &[&str]) -> (f64, usize);
}

/// `exp(−(1/N) Σ ln p)` with `N` counting tokens plus one end marker per
/// sentence.
pub fn perplexity<L: LanguageModel + ?Sized, S: AsRef<str>>(lm: &L, sentences: &[S]) -> Result<f64> {
    let mut log_p = 0.0;
    let mut n = 0;
    for s in sentences {
        let toks: Vec<&str> = s.as_ref().split_whitespace().collect();
        let (lp, c) = lm.sentence_log_prob(&toks);
        log_p += lp;
        n += c;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("perplexity of an empty corpus".into()));
    }
    Ok((-log_p / n as f64).exp())
}

/// Every token, end marker included, has probability `1/V`.
#[derive(Clone, Copy, Debug)]
pub struct UniformLm {
    pub vocab: usize,
}

impl LanguageModel for UniformLm {
    fn sentence_log_prob(&self, tokens: &[&str]) -> (f64, usize) {
        let n = tokens.len() + 1;
        (-(n as f64) * (self.vocab as f64).ln(), n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    prob: f64,
    backoff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KneserNeyLm {
    order: usize,
    words: Vec<String>,
    index: HashMap<String, u32>,
    /// `tables[k]` holds n-grams of length `k + 1`.
    tables: Vec<HashMap<Vec<u32>, Entry>>,
    discounts: Vec<[f64; 3]>,
}

#[derive(Default)]
struct ContextStats {
    total: f64,
    /// Types seen after the context with adjusted count 1, 2, and ≥ 3.
    n: [usize; 3],
}

impl KneserNeyLm {
    /// Estimates a model of the given order. Tokens seen once are mapped to
    /// `<unk>` so that unseen query words receive its probability.
    pub fn train<S: AsRef<str>>(sentences: &[S], order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
        }
        let tokenized: Vec<Vec<&str>> = sentences
            .iter()
            .map(|s| s.as_ref().split_whitespace().collect())
            .collect();
        if tokenized.iter().all(Vec::is_empty) {
            return Err(Error::InvalidArgument("language model training corpus is empty".into()));
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokenized.iter().flatten() {
            *freq.entry(t).or_insert(0) += 1;
        }
        let mut words = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
        words.extend(
            freq.iter()
                .filter(|&(w, &c)| c > 1 && ![BOS, EOS, UNK].contains(w))
                .map(|(w, _)| w.to_string()),
        );
        let index: HashMap<String, u32> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        let mut lm = KneserNeyLm {
            order,
            words,
            index,
            tables: Vec::new(),
            discounts: Vec::new(),
        };

        // Raw counts of every order, contexts truncated at <s>.
        let mut raw: Vec<HashMap<Vec<u32>, f64>> = vec![HashMap::new(); order];
        for sent in &tokenized {
            let mut ids = vec![0u32];
            ids.extend(sent.iter().map(|w| lm.id(w)));
            ids.push(1);
            for end in 1..ids.len() {
                for k in 1..=order.min(end + 1) {
                    *raw[k - 1].entry(ids[end + 1 - k..=end].to_vec()).or_insert(0.0) += 1.0;
                }
            }
        }
        raw[0].remove(&vec![0]);

        // Adjusted counts: continuation counts below the top order.
        let mut adjusted = raw.clone();
        for k in 0..order - 1 {
            let mut cont: HashMap<Vec<u32>, f64> = HashMap::new();
            for g in raw[k + 1].keys() {
                *cont.entry(g[1..].to_vec()).or_insert(0.0) += 1.0;
            }
            for (g, c) in adjusted[k].iter_mut() {
                if g[0] != 0 {
                    *c = cont.get(g).copied().unwrap_or(0.0);
                }
            }
        }

        for k in 0..order {
            let d = estimate_discounts(adjusted[k].values().copied());
            lm.discounts.push(d);
            let mut ctx: HashMap<&[u32], ContextStats> = HashMap::new();
            for (g, &c) in &adjusted[k] {
                let st = ctx.entry(&g[..k]).or_default();
                st.total += c;
                st.n[bucket(c)] += 1;
            }
            let mut table = HashMap::with_capacity(adjusted[k].len());
            for (g, &c) in &adjusted[k] {
                let st = &ctx[&g[..k]];
                let gamma = gamma(&d, st);
                let lower = if k == 0 {
                    1.0 / lm.predictable() as f64
                } else {
                    lm.prob_ids(&g[1..k], g[k])
                };
                let prob = (c - d[bucket(c)]).max(0.0) / st.total + gamma * lower;
                table.insert(g.clone(), Entry { prob, backoff: 1.0 });
            }
            if k == 0 {
                // Unseen vocabulary words get only the uniform share.
                let st = &ctx[&[][..]];
                let share = gamma(&d, st) / lm.predictable() as f64;
                for id in 1..lm.words.len() as u32 {
                    table.entry(vec![id]).or_insert(Entry { prob: share, backoff: 1.0 });
                }
                table.insert(vec![0], Entry { prob: 0.0, backoff: 1.0 });
            }
            lm.tables.push(table);
            // Backoff weights of the contexts just used.
            for (h, st) in ctx {
                if k == 0 {
                    continue;
                }
                let g = gamma(&d, &st);
                if let Some(e) = lm.tables[k - 1].get_mut(h) {
                    e.backoff = g;
                }
            }
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Token types that can be predicted: all but `<s>`.
    pub fn predictable(&self) -> usize {
        self.words.len() - 1
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.words
    }

    pub fn discounts(&self, order: usize) -> [f64; 3] {
        self.discounts[order - 1]
    }

    fn id(&self, w: &str) -> u32 {
        self.index.get(w).copied().unwrap_or(2)
    }

    /// `p(word | history)`; only the last `order − 1` history tokens matter.
    /// Unknown words are scored as `<unk>`. A history that starts the
    /// sentence should begin with `<s>`.
    pub fn prob(&self, history: &[&str], word: &str) -> f64 {
        let h: Vec<u32> = history.iter().map(|w| self.id(w)).collect();
        self.prob_ids(&h, self.id(word))
    }

    fn prob_ids(&self, history: &[u32], word: u32) -> f64 {
        let keep = history.len().min(self.order - 1);
        let h = &history[history.len() - keep..];
        let mut backoff = 1.0;
        for start in 0..=h.len() {
            let ctx = &h[start..];
            let k = ctx.len();
            let mut g = ctx.to_vec();
            g.push(word);
            if let Some(e) = self.tables[k].get(&g) {
                return backoff * e.prob;
            }
            if k > 0 {
                if let Some(e) = self.tables[k - 1].get(ctx) {
                    backoff *= e.backoff;
                }
            }
        }
        unreachable!("every vocabulary id has a unigram entry")
    }

    /// Writes the model in ARPA layout with natural-log values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "\\data\\").unwrap();
        for (k, t) in self.tables.iter().enumerate() {
            writeln!(out, "ngram {}={}", k + 1, t.len()).unwrap();
        }
        for (k, d) in self.discounts.iter().enumerate() {
            writeln!(out, "discount {}={:?} {:?} {:?}", k + 1, d[0], d[1], d[2]).unwrap();
        }
        for (k, t) in self.tables.iter().enumerate() {
            writeln!(out, "\n\\{}-grams:", k + 1).unwrap();
            let mut rows: Vec<(String, &Entry)> = t
                .iter()
                .map(|(g, e)| {
                    let words: Vec<&str> = g.iter().map(|&i| self.words[i as usize].as_str()).collect();
                    (words.join(" "), e)
                })
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            for (g, e) in rows {
                writeln!(out, "{:?}\t{g}\t{:?}", e.prob.ln(), e.backoff.ln()).unwrap();
            }
        }
        writeln!(out, "\n\\end\\").unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(format!("language model: {msg}"));
        let mut sizes = Vec::new();
        let mut discounts = Vec::new();
        let mut tables: Vec<Vec<(Vec<String>, Entry)>> = Vec::new();
        let mut section: Option<usize> = None;
        for line in text.lines() {
            let line = line.trim_end();
            if line.is_empty() || line == "\\data\\" || line == "\\end\\" {
                continue;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let (_, n) = rest.split_once('=').ok_or_else(|| bad(line.into()))?;
                sizes.push(n.parse::<usize>().map_err(|_| bad(line.into()))?);
            } else if let Some(rest) = line.strip_prefix("discount ") {
                let (_, v) = rest.split_once('=').ok_or_else(|| bad(line.into()))?;
                let v: Vec<f64> = v
                    .split(' ')
                    .map(|x| x.parse().map_err(|_| bad(line.into())))
                    .collect::<Result<_>>()?;
                let d: [f64; 3] = v.try_into().map_err(|_| bad(line.into()))?;
                discounts.push(d);
            } else if line.starts_with('\\') && line.ends_with("-grams:") {
                let k: usize = line[1..line.len() - 7].parse().map_err(|_| bad(line.into()))?;
                if k != tables.len() + 1 {
                    return Err(bad(format!("section {k} out of order")));
                }
                tables.push(Vec::new());
                section = Some(k - 1);
            } else {
                let k = section.ok_or_else(|| bad(format!("entry outside a section: {line}")))?;
                let mut parts = line.split('\t');
                let (Some(p), Some(g), Some(b), None) = (parts.next(), parts.next(), parts.next(), parts.next())
                else {
                    return Err(bad(format!("malformed entry: {line}")));
                };
                let lp: f64 = p.parse().map_err(|_| bad(line.into()))?;
                let lb: f64 = b.parse().map_err(|_| bad(line.into()))?;
                let words: Vec<String> = g.split(' ').map(String::from).collect();
                if words.len() != k + 1 {
                    return Err(bad(format!("{}-gram in section {}", words.len(), k + 1)));
                }
                tables[k].push((words, Entry { prob: lp.exp(), backoff: lb.exp() }));
            }
        }
        if tables.is_empty() || sizes.len() != tables.len() || discounts.len() != tables.len() {
            return Err(bad("header does not match sections".into()));
        }
        for (k, t) in tables.iter().enumerate() {
            if t.len() != sizes[k] {
                return Err(bad(format!("order {} lists {} of {} entries", k + 1, t.len(), sizes[k])));
            }
        }
        let mut words = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
        let mut rest: Vec<&String> = tables[0]
            .iter()
            .map(|(g, _)| &g[0])
            .filter(|w| ![BOS, EOS, UNK].contains(&w.as_str()))
            .collect();
        rest.sort();
        words.extend(rest.into_iter().cloned());
        let index: HashMap<String, u32> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        let mut ids_tables = Vec::new();
        for t in tables {
            let mut m = HashMap::with_capacity(t.len());
            for (g, e) in t {
                let ids = g
                    .iter()
                    .map(|w| index.get(w).copied().ok_or_else(|| bad(format!("unknown word `{w}`"))))
                    .collect::<Result<Vec<u32>>>()?;
                m.insert(ids, e);
            }
            ids_tables.push(m);
        }
        if ids_tables[0].len() != words.len() {
            return Err(bad("unigram table must cover the vocabulary".into()));
        }
        Ok(KneserNeyLm {
            order: ids_tables.len(),
            words,
            index,
            tables: ids_tables,
            discounts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

impl LanguageModel for KneserNeyLm {
    fn sentence_log_prob(&self, tokens: &[&str]) -> (f64, usize) {
        let mut ids = vec![0u32];
        ids.extend(tokens.iter().map(|w| self.id(w)));
        ids.push(1);
        let lp = (1..ids.len())
            .map(|i| self.prob_ids(&ids[..i], ids[i]).ln())
            .sum();
        (lp, tokens.len() + 1)
    }
}

fn bucket(c: f64) -> usize {
    if c < 1.5 {
        0
    } else if c < 2.5 {
        1
    } else {
        2
    }
}

fn gamma(d: &[f64; 3], st: &ContextStats) -> f64 {
    (d[0] * st.n[0] as f64 + d[1] * st.n[1] as f64 + d[2] * st.n[2] as f64) / st.total
}

/// `Y = n1/(n1 + 2 n2)`, `D_i = i − (i + 1) Y n_{i+1}/n_i` for `i = 1, 2, 3`.
fn estimate_discounts(counts: impl Iterator<Item = f64>) -> [f64; 3] {
    let mut n = [0usize; 4];
    for c in counts {
        let c = c.round() as usize;
        if (1..=4).contains(&c) {
            n[c - 1] += 1;
        }
    }
    if n.iter().any(|&x| x == 0) {
        return FALLBACK_DISCOUNTS;
    }
    let n: [f64; 4] = n.map(|x| x as f64);
    let y = n[0] / (n[0] + 2.0 * n[1]);
    let d = [
        1.0 - 2.0 * y * n[1] / n[0],
        2.0 - 3.0 * y * n[2] / n[1],
        3.0 - 4.0 * y * n[3] / n[2],
    ];
    if d.iter().enumerate().all(|(i, &x)| x > 0.0 && x <= (i + 1) as f64) {
        d
    } else {
        FALLBACK_DISCOUNTS
    }
}
