//! Shared fixtures: finite-difference gradient checks and tiny models.

#![allow(dead_code)]

use ndarray::Array2;
use racoln::classifier::{ClassifierDims, ClassifierRole, StyleClassifier, TokenInput};
use racoln::corpus::{Batch, StyleLabel};
use racoln::generator::{Ablation, Generator, GeneratorDims};
use racoln::tape::{Tape, Var};
use racoln::losses::{compute_losses, self_reconstruction_loss, FrozenModels, LossOptions, LossWeights};
use racoln::tensor::{Parameters, Tensor};
use racoln::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor so that gradients near zero are judged absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of `loss` against central differences at
/// `samples` randomly chosen coordinates of the trainable parameters.
pub fn gradcheck<P, L>(model: &mut P, samples: usize, seed: u64, loss: L) -> Result<GradCheck>
where
    P: Parameters<f64>,
    L: for<'t> Fn(&P, &'t Tape<f64>) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<(String, Array2<f64>)> = {
        let tape = Tape::new();
        let l = loss(model, &tape)?;
        let grads = tape.backward(l)?;
        model
            .named_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| {
                let g = grads.get(t).cloned().unwrap_or_else(|| Array2::zeros(t.value().raw_dim()));
                (n, g)
            })
            .collect()
    };
    let total: usize = analytic.iter().map(|(_, g)| g.len()).sum();
    assert!(total > 0, "no trainable parameters");
    let value = |m: &P| -> Result<f64> {
        let tape = Tape::new();
        Ok(loss(m, &tape)?.scalar())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for _ in 0..samples {
        let mut k = rng.random_range(0..total);
        let p = analytic.iter().position(|(_, g)| {
            if k < g.len() {
                true
            } else {
                k -= g.len();
                false
            }
        });
        let p = p.unwrap();
        let (name, g) = &analytic[p];
        let idx = (k / g.ncols(), k % g.ncols());
        let nudge = |m: &mut P, delta: f64| {
            let mut params: Vec<_> = m.named_params_mut().into_iter().filter(|(_, t)| t.requires_grad()).collect();
            params[p].1.value_mut()[idx] += delta;
        };
        nudge(model, STEP);
        let plus = value(model)?;
        nudge(model, -2.0 * STEP);
        let minus = value(model)?;
        nudge(model, STEP);
        let numeric = (plus - minus) / (2.0 * STEP);
        let err = rel_err(g[idx], numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = format!("{name}{idx:?}: tape {} vs numeric {numeric}", g[idx]);
        }
    }
    Ok(report)
}

pub const TINY_VOCAB: usize = 11;

pub fn tiny_generator_dims() -> GeneratorDims {
    GeneratorDims {
        vocab: TINY_VOCAB,
        emb: 4,
        enc_hidden: 3,
        cln: 4,
        dec_hidden: 5,
        cln_eps: 1e-5,
    }
}

pub fn tiny_classifier_dims() -> ClassifierDims {
    ClassifierDims {
        vocab: TINY_VOCAB,
        emb: 4,
        hidden: 3,
        att: 6,
        tau: 1.0,
    }
}

pub fn tiny_generator(seed: u64, ablation: Ablation) -> Generator<f64> {
    Generator::new(tiny_generator_dims(), ablation, seed).unwrap()
}

/// A frozen, truncated marker and a frozen loss classifier with random weights.
pub fn tiny_frozen(seed: u64) -> (StyleClassifier<f64>, StyleClassifier<f64>) {
    let mut marker = StyleClassifier::new(ClassifierRole::StyleMarker, tiny_classifier_dims(), seed + 1).unwrap();
    marker.truncate();
    marker.freeze();
    let mut cls = StyleClassifier::new(ClassifierRole::LossClassifier, tiny_classifier_dims(), seed + 2).unwrap();
    cls.freeze();
    (marker, cls)
}

/// Random sentences of 2..=5 ordinary tokens with alternating styles.
pub fn tiny_batch(seed: u64, size: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb47c);
    let seqs: Vec<Vec<usize>> = (0..size)
        .map(|_| {
            let len = rng.random_range(2..=5);
            (0..len).map(|_| rng.random_range(4..TINY_VOCAB)).collect()
        })
        .collect();
    let styles = (0..size)
        .map(|i| if i % 2 == 0 { StyleLabel::Positive } else { StyleLabel::Negative })
        .collect();
    Batch::from_ids(seqs, styles).unwrap()
}

/// Free tensors exercising every tape operation.
pub struct Leaves {
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
    pub c: Tensor<f64>,
    pub bias: Tensor<f64>,
    pub col: Tensor<f64>,
}

impl Leaves {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |r: usize, c: usize| {
            Tensor::param(Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0)))
        };
        Leaves {
            a: t(3, 4),
            b: t(4, 3),
            c: t(3, 3),
            bias: t(1, 3),
            col: t(3, 1),
        }
    }
}

impl Parameters<f64> for Leaves {
    fn named_params(&self) -> Vec<(String, &Tensor<f64>)> {
        vec![
            ("a".into(), &self.a),
            ("b".into(), &self.b),
            ("c".into(), &self.c),
            ("bias".into(), &self.bias),
            ("col".into(), &self.col),
        ]
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        vec![
            ("a".into(), &mut self.a),
            ("b".into(), &mut self.b),
            ("c".into(), &mut self.c),
            ("bias".into(), &mut self.bias),
            ("col".into(), &mut self.col),
        ]
    }
}

pub fn ops_loss<'t>(m: &Leaves, tape: &'t Tape<f64>) -> Result<Var<'t, f64>> {
    let (a, b, c) = (tape.param(&m.a), tape.param(&m.b), tape.param(&m.c));
    let y = a.matmul(b).add(c).add_row(tape.param(&m.bias)).tanh();
    let z = y.mul(c.sigmoid()).sub(c.square().scale(0.3)).affine(0.7, 0.1);
    let w = z.mul_col(tape.param(&m.col)).one_minus();
    let mask = ndarray::array![[true, false, true], [true, true, true], [false, true, true]];
    let s = tape.softmax_temp(w, 0.7, Some(&mask))?;
    let ln = tape.layer_norm(tape.concat_cols(&[w, y.slice_cols(0, 2)]), 1e-5);
    let g = tape.gather(ln, &[2, 0, 2]);
    let ce = tape.cross_entropy(g, &[1, 4, 0], &[0.5, 0.3, 0.2]);
    Ok(ce.add(s.square().sum()).add(w.softmax().mul(y).sum()))
}

/// Classifier cross-entropy: embedding, both GRU directions, attention, output layer.
pub fn classifier_loss<'t>(m: &StyleClassifier<f64>, tape: &'t Tape<f64>, batch: &Batch) -> Result<Var<'t, f64>> {
    let logits = m.logits(tape, TokenInput::Ids(&batch.ids), &batch.mask)?;
    let ids: Vec<usize> = batch.styles.iter().map(|s| s.id()).collect();
    let w = vec![1.0 / batch.size() as f64; batch.size()];
    Ok(tape.cross_entropy(logits, &ids, &w))
}

/// Gradient checks of every differentiable component for one seed.
///
/// The stylizer's stop-gradient and the constant marker attention over soft
/// inputs are deliberate non-derivatives, so the generator checks lift the
/// former and, where soft inputs are re-encoded, drop reverse attention.
pub fn gradcheck_components(seed: u64, samples: usize) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut out = Vec::new();
    let batch = tiny_batch(seed, 3);

    let mut leaves = Leaves::random(seed);
    out.push(("tape ops", gradcheck(&mut leaves, samples, seed, ops_loss)?));

    let mut cls = StyleClassifier::new(ClassifierRole::LossClassifier, tiny_classifier_dims(), seed).unwrap();
    out.push((
        "classifier",
        gradcheck(&mut cls, samples, seed, |m, t| classifier_loss(m, t, &batch))?,
    ));

    let (marker, frozen_cls) = tiny_frozen(seed);
    let mut gen = tiny_generator(seed, Ablation::default());
    gen.stop_gradient = false;
    out.push((
        "self reconstruction",
        gradcheck(&mut gen, samples, seed, |g, t| self_reconstruction_loss(t, g, &marker, &batch))?,
    ));

    let frozen = FrozenModels {
        marker: &marker,
        classifier: &frozen_cls,
    };
    for (name, ablation) in [
        (
            "full objective",
            Ablation {
                no_reverse_attention: true,
                no_stylizer: false,
            },
        ),
        (
            "full objective, style embedding",
            Ablation {
                no_reverse_attention: true,
                no_stylizer: true,
            },
        ),
    ] {
        let mut gen = tiny_generator(seed, ablation);
        gen.stop_gradient = false;
        let check = gradcheck(&mut gen, samples, seed, |g, t| {
            Ok(compute_losses(t, g, frozen, &batch, &LossWeights::default(), LossOptions::default())?.total)
        })?;
        out.push((name, check));
    }
    Ok(out)
}

/// Corpus BLEU by direct enumeration, written independently of the library.
pub fn brute_bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let count = |seq: &[String], gram: &[String]| -> usize {
        if seq.len() < gram.len() {
            return 0;
        }
        (0..=seq.len() - gram.len()).filter(|&i| seq[i..i + gram.len()] == *gram).count()
    };
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, rs) in cands.iter().zip(refs) {
        c_len += cand.len();
        let mut best = rs[0].len();
        for r in rs {
            let (d, bd) = (r.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best;
        for n in 1..=4 {
            if cand.len() < n {
                continue;
            }
            totals[n - 1] += cand.len() - n + 1;
            for i in 0..=cand.len() - n {
                let gram = &cand[i..i + n];
                if (0..i).any(|j| cand[j..j + n] == *gram) {
                    continue;
                }
                let max_ref = rs.iter().map(|r| count(r, gram)).max().unwrap();
                matches[n - 1] += count(cand, gram).min(max_ref);
            }
        }
    }
    if matches.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|n| (matches[n] as f64 / totals[n] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    100.0 * bp * log_p.exp()
}

pub fn random_sentence(rng: &mut ChaCha8Rng, words: &[&str], max: usize) -> Vec<String> {
    let len = rng.random_range(1..=max);
    (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
}

pub fn random_pairs(seed: u64, n: usize) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["the", "food", "was", "good", "bad", "."];
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..n {
        let c = random_sentence(&mut rng, &words, 14);
        let k = rng.random_range(1..=3);
        let rs: Vec<Vec<String>> = (0..k)
            .map(|_| {
                // Half the references are light edits of the candidate so that
                // higher-order matches occur.
                if rng.random_bool(0.5) {
                    let mut r = c.clone();
                    let i = rng.random_range(0..r.len());
                    r[i] = words[rng.random_range(0..words.len())].to_string();
                    r
                } else {
                    random_sentence(&mut rng, &words, 14)
                }
            })
            .collect();
        cands.push(c);
        refs.push(rs);
    }
    (cands, refs)
}
