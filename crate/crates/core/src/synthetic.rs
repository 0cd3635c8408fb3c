//! Templated two-style review corpus for small-scale runs.
//!
//! Every sentence carries exactly one style-bearing adjective. Each aspect
//! noun owns one positive and one negative adjective, so transferring a
//! sentence means swapping that single word, and the gold transfer is known.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{split_path, Example, StyleLabel};
use crate::error::{Error, Result};

/// `(noun, positive adjective, negative adjective)`.
pub const LEXICON: &[(&str, &str, &str)] = &[
    ("food", "delicious", "bland"),
    ("staff", "friendly", "rude"),
    ("service", "fast", "slow"),
    ("room", "clean", "dirty"),
    ("price", "fair", "outrageous"),
    ("music", "pleasant", "loud"),
    ("coffee", "fresh", "stale"),
    ("owner", "helpful", "useless"),
    ("patio", "lovely", "cramped"),
    ("menu", "creative", "boring"),
    ("bread", "warm", "soggy"),
    ("waiter", "attentive", "careless"),
];

const PEOPLE: &[&str] = &["my wife", "my friend", "my brother", "our group", "my dad", "my coworker"];
const TIMES: &[&str] = &["last night", "on sunday", "this morning", "for lunch", "yesterday", "on friday"];
const PLACES: &[&str] = &["diner", "cafe", "bistro", "hotel", "bakery", "grill"];

/// `{p}` person, `{t}` time, `{l}` place, `{n}` noun, `{a}` adjective.
const TEMPLATES: &[&str] = &[
    "we went to the {l} {t} and the {n} was {a} .",
    "{p} and i stopped by the {l} {t} , the {n} was {a} .",
    "i told {p} that the {n} at this {l} is {a} .",
    "{t} we tried the new {l} and found the {n} {a} .",
    "honestly the {n} here was {a} when we came {t} .",
    "{p} said the {n} at the {l} was really {a} .",
    "we ate at the {l} {t} and thought the {n} was {a} .",
    "the {n} was {a} , {p} agreed after our visit {t} .",
];

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    /// Gold transfer of each test sentence, aligned with `test`.
    pub test_references: Vec<String>,
}

/// Whether `token` is one of the style-bearing adjectives.
pub fn is_lexicon_token(token: &str) -> bool {
    LEXICON.iter().any(|(_, p, n)| *p == token || *n == token)
}

/// The sentence with its style word swapped for the other style's.
pub fn gold_transfer(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            LEXICON
                .iter()
                .find_map(|(_, p, n)| {
                    if t == p {
                        Some(n.to_string())
                    } else if t == n {
                        Some(p.to_string())
                    } else {
                        None
                    }
                })
                .unwrap_or_else(|| t.clone())
        })
        .collect()
}

fn sentence(rng: &mut ChaCha8Rng, style: StyleLabel) -> String {
    let template = TEMPLATES.choose(rng).unwrap();
    let (noun, pos, neg) = LEXICON.choose(rng).unwrap();
    let adj = match style {
        StyleLabel::Positive => pos,
        StyleLabel::Negative => neg,
    };
    template
        .replace("{p}", PEOPLE.choose(rng).unwrap())
        .replace("{t}", TIMES.choose(rng).unwrap())
        .replace("{l}", PLACES.choose(rng).unwrap())
        .replace("{n}", noun)
        .replace("{a}", adj)
}

/// `size` sentences, half per style, split 80/10/10 into train, dev and test.
pub fn make_synthetic(seed: u64, size: usize) -> Result<SyntheticCorpus> {
    if size < 100 {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs at least 100 sentences, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_style = [size / 2, size - size / 2];
    let mut out = SyntheticCorpus {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        test_references: Vec::new(),
    };
    for (style, &n) in StyleLabel::ALL.iter().zip(&per_style) {
        let n_dev = n / 10;
        let n_test = n / 10;
        let n_train = n - n_dev - n_test;
        for i in 0..n {
            let ex = Example::new(&sentence(&mut rng, *style), *style);
            if i < n_train {
                out.train.push(ex);
            } else if i < n_train + n_dev {
                out.dev.push(ex);
            } else {
                out.test_references.push(gold_transfer(&ex.tokens).join(" "));
                out.test.push(ex);
            }
        }
    }
    Ok(out)
}

/// Path of the gold-transfer file for one source style of the test split.
pub fn reference_path(dir: &Path, style: StyleLabel) -> PathBuf {
    dir.join(format!("reference.{}.tsv", style.tag()))
}

/// Writes `<split>.<tag>.txt` files plus `reference.<tag>.tsv` (input, tab,
/// gold transfer) for the test split.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (split, examples) in SPLITS.iter().zip([&corpus.train, &corpus.dev, &corpus.test]) {
        for style in StyleLabel::ALL {
            let path = split_path(dir, split, style);
            let text: String = examples
                .iter()
                .filter(|e| e.style == style)
                .map(|e| e.text() + "\n")
                .collect();
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    for style in StyleLabel::ALL {
        let path = reference_path(dir, style);
        let text: String = corpus
            .test
            .iter()
            .zip(&corpus.test_references)
            .filter(|(e, _)| e.style == style)
            .map(|(e, r)| format!("{}\t{r}\n", e.text()))
            .collect();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_balance() {
        let c = make_synthetic(1, 2000).unwrap();
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (1600, 200, 200));
        for split in [&c.train, &c.dev, &c.test] {
            let pos = split.iter().filter(|e| e.style == StyleLabel::Positive).count();
            assert_eq!(pos * 2, split.len());
        }
        assert!(make_synthetic(1, 99).is_err());
    }

    #[test]
    fn exactly_one_style_word_matching_the_label() {
        let c = make_synthetic(7, 400).unwrap();
        for e in c.train.iter().chain(&c.dev).chain(&c.test) {
            let words: Vec<&String> = e.tokens.iter().filter(|t| is_lexicon_token(t)).collect();
            assert_eq!(words.len(), 1, "{}", e.text());
            let positive = LEXICON.iter().any(|(_, p, _)| p == words[0]);
            assert_eq!(positive, e.style == StyleLabel::Positive);
            assert!((10..=16).contains(&e.tokens.len()), "{}", e.text());
        }
    }

    #[test]
    fn gold_transfer_swaps_one_word() {
        let e = Example::new("the food was bland .", StyleLabel::Negative);
        assert_eq!(gold_transfer(&e.tokens).join(" "), "the food was delicious .");
    }

    #[test]
    fn deterministic() {
        assert_eq!(make_synthetic(3, 200).unwrap(), make_synthetic(3, 200).unwrap());
        assert_ne!(make_synthetic(3, 200).unwrap(), make_synthetic(4, 200).unwrap());
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let c = make_synthetic(2, 200).unwrap();
        let paths = write_corpus(&c, dir.path()).unwrap();
        assert_eq!(paths.len(), 8);
        let test = crate::corpus::load_split(dir.path(), "test").unwrap();
        assert_eq!(test.len(), c.test.len());
        let refs = crate::corpus::load_references(&reference_path(dir.path(), StyleLabel::Negative)).unwrap();
        assert_eq!(refs.len(), c.test.len() / 2);
    }
}
