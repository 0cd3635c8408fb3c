//! Transfer accuracy, G-score and the combined metric report.

use std::fmt::Write as _;

use crate::classifier::StyleClassifier;
use crate::corpus::{Batch, Example, StyleLabel, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Percentage of `outputs` the classifier assigns to their target style.
pub fn transfer_accuracy<F: Float>(
    outputs: &[Vec<String>],
    targets: &[StyleLabel],
    classifier: &StyleClassifier<F>,
    vocab: &Vocabulary,
    max_len: usize,
    batch_size: usize,
) -> Result<f64> {
    if outputs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} outputs but {} target styles",
            outputs.len(),
            targets.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("transfer accuracy over zero outputs".into()));
    }
    let mut correct = 0;
    for (outs, tgts) in outputs.chunks(batch_size.max(1)).zip(targets.chunks(batch_size.max(1))) {
        let seqs: Vec<Vec<usize>> = outs
            .iter()
            .map(|toks| {
                let mut ids = vocab.encode(toks);
                ids.truncate(max_len);
                // An empty output still needs one position to be scored.
                if ids.is_empty() {
                    ids.push(crate::corpus::UNK);
                }
                ids
            })
            .collect();
        let batch = Batch::from_ids(seqs, tgts.to_vec())?;
        let pred = classifier.predict(&batch)?;
        correct += pred.iter().zip(tgts).filter(|(p, t)| p == t).count();
    }
    Ok(100.0 * correct as f64 / outputs.len() as f64)
}

/// Transfer accuracy of labeled examples against their own labels.
pub fn labeled_accuracy<F: Float>(
    examples: &[Example],
    classifier: &StyleClassifier<F>,
    vocab: &Vocabulary,
    max_len: usize,
    batch_size: usize,
) -> Result<f64> {
    let outputs: Vec<Vec<String>> = examples.iter().map(|e| e.tokens.clone()).collect();
    let targets: Vec<StyleLabel> = examples.iter().map(|e| e.style).collect();
    transfer_accuracy(&outputs, &targets, classifier, vocab, max_len, batch_size)
}

/// Geometric mean of transfer accuracy and self-BLEU.
pub fn g_score(s_acc: f64, self_bleu: f64) -> Result<f64> {
    if !(s_acc >= 0.0 && self_bleu >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "g_score needs non-negative inputs, got ({s_acc}, {self_bleu})"
        )));
    }
    Ok((s_acc * self_bleu).sqrt())
}

/// Rounds half away from zero to one decimal, as reported.
pub fn one_decimal(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub s_acc: f64,
    pub self_bleu: f64,
    pub ref_bleu: Option<f64>,
    pub ppl: f64,
    pub g_score: f64,
}

impl MetricReport {
    pub fn new(s_acc: f64, self_bleu: f64, ref_bleu: Option<f64>, ppl: f64) -> Result<Self> {
        Ok(MetricReport {
            s_acc,
            self_bleu,
            ref_bleu,
            ppl,
            g_score: g_score(s_acc, self_bleu)?,
        })
    }

    fn rows(&self) -> Vec<(&'static str, String)> {
        let mut rows = vec![
            ("s_acc", format!("{:.1}", self.s_acc)),
            ("self_bleu", format!("{:.1}", self.self_bleu)),
        ];
        if let Some(r) = self.ref_bleu {
            rows.push(("ref_bleu", format!("{r:.1}")));
        }
        rows.push(("ppl", format!("{:.1}", self.ppl)));
        rows.push(("g_score", format!("{:.1}", self.g_score)));
        rows
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("| metric    | value   |\n|-----------|---------|\n");
        for (k, v) in self.rows() {
            writeln!(out, "| {k:<9} | {v:>7} |").unwrap();
        }
        out
    }

    /// One `key=value` line per metric, full precision.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        writeln!(out, "s_acc={:?}", self.s_acc).unwrap();
        writeln!(out, "self_bleu={:?}", self.self_bleu).unwrap();
        if let Some(r) = self.ref_bleu {
            writeln!(out, "ref_bleu={r:?}").unwrap();
        }
        writeln!(out, "ppl={:?}", self.ppl).unwrap();
        writeln!(out, "g_score={:?}", self.g_score).unwrap();
        out
    }
}
