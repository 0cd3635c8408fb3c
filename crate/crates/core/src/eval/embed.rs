//! Content and style vector export, and a logistic-regression probe over them.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::StyleClassifier;
use crate::corpus::{Batch, Example, StyleLabel, Vocabulary};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub source: StyleLabel,
    pub target: StyleLabel,
    pub content: Vec<f64>,
    pub style: Vec<f64>,
}

/// Which target styles to represent each sentence under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Targets {
    /// One row per sentence, towards the other style.
    Flipped,
    /// Two rows per sentence, one per style.
    Both,
}

pub fn embedding_rows<F: Float>(
    gen: &Generator<F>,
    marker: &StyleClassifier<F>,
    examples: &[Example],
    vocab: &Vocabulary,
    max_len: usize,
    batch_size: usize,
    targets: Targets,
) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::new(&refs, vocab, max_len)?;
        let choices: Vec<Vec<StyleLabel>> = match targets {
            Targets::Flipped => vec![batch.target_styles()],
            Targets::Both => StyleLabel::ALL.iter().map(|&s| vec![s; batch.size()]).collect(),
        };
        let mut per_target = Vec::new();
        for tgt in &choices {
            let (z, s) = gen.represent(&batch, tgt, marker)?;
            per_target.push((tgt, z, s));
        }
        for b in 0..batch.size() {
            for (tgt, z, s) in &per_target {
                rows.push(EmbeddingRow {
                    source: batch.styles[b],
                    target: tgt[b],
                    content: z.row(b).iter().map(|v| v.as_f64()).collect(),
                    style: s.row(b).iter().map(|v| v.as_f64()).collect(),
                });
            }
        }
    }
    Ok(rows)
}

/// Tab-separated: source tag, target tag, content values, style values.
/// A header line names the two vector widths.
pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let (dc, ds) = rows
        .first()
        .map(|r| (r.content.len(), r.style.len()))
        .unwrap_or((0, 0));
    let mut out = format!("#source\ttarget\tcontent:{dc}\tstyle:{ds}\n");
    for r in rows {
        out.push_str(r.source.tag());
        out.push('\t');
        out.push_str(r.target.tag());
        for v in r.content.iter().chain(&r.style) {
            out.push('\t');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::InvalidArgument(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    let width = |prefix: &str| -> Result<usize> {
        header
            .split('\t')
            .find_map(|f| f.strip_prefix(prefix))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("malformed header"))
    };
    let (dc, ds) = (width("content:")?, width("style:")?);
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 2 + dc + ds {
            return Err(bad(&format!("row has {} fields, expected {}", f.len(), 2 + dc + ds)));
        }
        let nums = f[2..]
            .iter()
            .map(|x| x.parse::<f64>().map_err(|_| bad(&format!("not a number: {x}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow {
            source: f[0].parse()?,
            target: f[1].parse()?,
            content: nums[..dc].to_vec(),
            style: nums[dc..].to_vec(),
        });
    }
    Ok(rows)
}

/// Held-out accuracy (%) of an L2-regularized logistic regression that
/// predicts `labels` from `features`.
///
/// Features are standardized with training-split statistics; 70% of the
/// shuffled rows train the probe, the rest score it.
pub fn linear_probe(features: &Array2<f64>, labels: &[bool], seed: u64) -> Result<f64> {
    let n = features.nrows();
    if n != labels.len() {
        return Err(Error::InvalidArgument("one label per feature row".into()));
    }
    if n < 10 {
        return Err(Error::InvalidArgument("linear probe needs at least 10 rows".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = n * 7 / 10;
    let (tr, te) = order.split_at(cut);
    let x_tr = features.select(Axis(0), tr);
    let x_te = features.select(Axis(0), te);
    let y_tr: Array1<f64> = tr.iter().map(|&i| if labels[i] { 1.0 } else { 0.0 }).collect();

    let mean = x_tr.mean_axis(Axis(0)).unwrap();
    let std = x_tr.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let norm = |x: &Array2<f64>| (x - &mean) / &std;
    let (x_tr, x_te) = (norm(&x_tr), norm(&x_te));

    let d = x_tr.ncols();
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let (lr, l2, iters) = (0.1, 1e-3, 500);
    let m = x_tr.nrows() as f64;
    for _ in 0..iters {
        let p = (x_tr.dot(&w) + b).mapv(|z| 1.0 / (1.0 + (-z).exp()));
        let err = &p - &y_tr;
        let gw = x_tr.t().dot(&err) / m + &w * l2;
        let gb = err.sum() / m;
        w.scaled_add(-lr, &gw);
        b -= lr * gb;
    }
    let scores = x_te.dot(&w) + b;
    let correct = te
        .iter()
        .zip(scores.iter())
        .filter(|(&i, &s)| (s > 0.0) == labels[i])
        .count();
    Ok(100.0 * correct as f64 / te.len() as f64)
}

/// Stacks one vector field of the rows into a matrix.
pub fn stack(rows: &[EmbeddingRow], content: bool) -> Array2<f64> {
    let d = rows
        .first()
        .map(|r| if content { r.content.len() } else { r.style.len() })
        .unwrap_or(0);
    Array2::from_shape_fn((rows.len(), d), |(i, j)| {
        if content {
            rows[i].content[j]
        } else {
            rows[i].style[j]
        }
    })
}
