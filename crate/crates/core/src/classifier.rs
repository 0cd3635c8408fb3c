//! Attention-pooled BiGRU style classifiers.
//!
//! One architecture, three roles: the style marker (whose attention drives
//! reverse attention, output head dropped after pretraining), the frozen
//! classifier behind the style loss, and the independently seeded
//! evaluation classifier.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::corpus::{chunk_indices, Batch, Example, StyleLabel, Vocabulary};
use crate::error::{Error, Result};
use crate::layers::{context_vector, Attention, BiGru, Embedding, Init, Linear};
use crate::optim::Adam;
use crate::tape::{Tape, Var};
use crate::tensor::{prefixed, Float, Parameters, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassifierRole {
    StyleMarker,
    LossClassifier,
    EvalClassifier,
}

impl ClassifierRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierRole::StyleMarker => "style_marker",
            ClassifierRole::LossClassifier => "loss_classifier",
            ClassifierRole::EvalClassifier => "eval_classifier",
        }
    }
}

impl fmt::Display for ClassifierRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "style_marker" => Ok(ClassifierRole::StyleMarker),
            "loss_classifier" => Ok(ClassifierRole::LossClassifier),
            "eval_classifier" => Ok(ClassifierRole::EvalClassifier),
            other => Err(Error::InvalidArgument(format!("unknown classifier role `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierDims {
    pub vocab: usize,
    pub emb: usize,
    pub hidden: usize,
    pub att: usize,
    pub tau: f64,
}

/// A token sequence as a classifier consumes it: discrete ids, or one
/// `[B, V]` probability block per step (soft-sampled text).
#[derive(Clone, Copy)]
pub enum TokenInput<'a, 't, F: Float> {
    Ids(&'a Array2<usize>),
    Soft(&'a [Var<'t, F>]),
}

pub struct ClassifierOutput<'t, F: Float> {
    pub states: Vec<Var<'t, F>>,
    /// `[B, T]`
    pub alpha: Var<'t, F>,
    /// `[B, 2·hidden]`
    pub context: Var<'t, F>,
}

#[derive(Clone, Debug)]
pub struct StyleClassifier<F: Float> {
    pub role: ClassifierRole,
    pub dims: ClassifierDims,
    pub embedding: Embedding<F>,
    pub encoder: BiGru<F>,
    pub attention: Attention<F>,
    /// `[2·hidden → 2]`; `None` once a style marker has been truncated.
    pub fc: Option<Linear<F>>,
}

impl<F: Float> StyleClassifier<F> {
    pub fn new(role: ClassifierRole, dims: ClassifierDims, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        Ok(StyleClassifier {
            role,
            dims,
            embedding: Embedding::new(dims.vocab, dims.emb, &mut init),
            encoder: BiGru::new(dims.emb, dims.hidden, &mut init),
            attention: Attention::new(2 * dims.hidden, dims.att, dims.tau, &mut init)?,
            fc: Some(Linear::new(2 * dims.hidden, 2, &mut init)),
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.named_params().iter().all(|(_, t)| !t.requires_grad())
    }

    pub fn freeze(&mut self) {
        self.set_requires_grad(false);
    }

    /// Drops the output layer; only the attention remains usable.
    pub fn truncate(&mut self) {
        self.fc = None;
    }

    pub fn embed_steps<'t>(&self, tape: &'t Tape<F>, input: TokenInput<'_, 't, F>) -> Vec<Var<'t, F>> {
        match input {
            TokenInput::Ids(ids) => {
                let table = self.embedding.weights(tape);
                ids.columns()
                    .into_iter()
                    .map(|col| tape.gather(table, &col.to_vec()))
                    .collect()
            }
            TokenInput::Soft(steps) => steps.iter().map(|&p| self.embedding.soft(p)).collect(),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<F>,
        input: TokenInput<'_, 't, F>,
        mask: &Array2<bool>,
    ) -> Result<ClassifierOutput<'t, F>> {
        let steps = self.embed_steps(tape, input);
        let enc = self.encoder.bigru_encode(tape, &steps, mask)?;
        let alpha = self.attention.attention_scores(tape, &enc.states, mask)?;
        let context = context_vector(&enc.states, alpha);
        Ok(ClassifierOutput {
            states: enc.states,
            alpha,
            context,
        })
    }

    /// `[B, 2]` pre-softmax scores.
    pub fn logits<'t>(
        &self,
        tape: &'t Tape<F>,
        input: TokenInput<'_, 't, F>,
        mask: &Array2<bool>,
    ) -> Result<Var<'t, F>> {
        let fc = self.fc.as_ref().ok_or_else(|| {
            Error::InvalidState(format!("{} has no output layer (truncated)", self.role))
        })?;
        Ok(fc.forward(self.forward(tape, input, mask)?.context))
    }

    /// `p = softmax(W_c o + b_c)`, `[B, 2]`.
    pub fn classify<'t>(&self, tape: &'t Tape<F>, batch: &Batch) -> Result<Var<'t, F>> {
        Ok(self.logits(tape, TokenInput::Ids(&batch.ids), &batch.mask)?.softmax())
    }

    /// Argmax style per sentence.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<StyleLabel>> {
        let tape = Tape::new();
        let p = self.classify(&tape, batch)?.value();
        Ok(p.outer_iter()
            .map(|row| {
                if row[1] > row[0] {
                    StyleLabel::Positive
                } else {
                    StyleLabel::Negative
                }
            })
            .collect())
    }

    /// Attention weights over real tokens, computed off-tape.
    pub fn marker_attention(&self, batch: &Batch) -> Result<Array2<F>> {
        let tape = Tape::new();
        Ok(self
            .forward(&tape, TokenInput::Ids(&batch.ids), &batch.mask)?
            .alpha
            .value())
    }

    /// Attention weights for soft-sampled text, treating the probabilities
    /// as constants.
    pub fn marker_attention_soft(&self, probs: &[Array2<F>], mask: &Array2<bool>) -> Result<Array2<F>> {
        let tape = Tape::new();
        let steps: Vec<Var<'_, F>> = probs.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(self.forward(&tape, TokenInput::Soft(&steps), mask)?.alpha.value())
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".into(), "classifier".into()),
            ("role".into(), self.role.to_string()),
            ("vocab".into(), self.dims.vocab.to_string()),
            ("emb".into(), self.dims.emb.to_string()),
            ("hidden".into(), self.dims.hidden.to_string()),
            ("att".into(), self.dims.att.to_string()),
            ("tau".into(), format!("{:?}", self.dims.tau)),
            ("has_fc".into(), self.fc.is_some().to_string()),
            ("frozen".into(), self.is_frozen().to_string()),
        ])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_params(self, self.metadata()).save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "classifier" {
            return Err(Error::Checkpoint("not a classifier checkpoint".into()));
        }
        let role: ClassifierRole = ck.meta("role")?.parse()?;
        let dims = ClassifierDims {
            vocab: ck.meta_usize("vocab")?,
            emb: ck.meta_usize("emb")?,
            hidden: ck.meta_usize("hidden")?,
            att: ck.meta_usize("att")?,
            tau: ck.meta_f64("tau")?,
        };
        let mut model = Self::new(role, dims, 0)?;
        if ck.meta("has_fc")? != "true" {
            model.truncate();
        }
        ck.load_into(&mut model)?;
        if ck.meta("frozen")? == "true" {
            model.freeze();
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl<F: Float> Parameters<F> for StyleClassifier<F> {
    fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = prefixed("embedding", self.embedding.named_params());
        v.extend(prefixed("encoder", self.encoder.named_params()));
        v.extend(prefixed("attention", self.attention.named_params()));
        if let Some(fc) = &self.fc {
            v.extend(prefixed("fc", fc.named_params()));
        }
        v
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = prefixed("embedding", self.embedding.named_params_mut());
        v.extend(prefixed("encoder", self.encoder.named_params_mut()));
        v.extend(prefixed("attention", self.attention.named_params_mut()));
        if let Some(fc) = &mut self.fc {
            v.extend(prefixed("fc", fc.named_params_mut()));
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without held-out improvement.
    pub patience: usize,
    pub max_len: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    /// Held-out accuracy (%) per epoch.
    pub dev_accuracy: Vec<f64>,
    pub best_dev_accuracy: f64,
}

/// Trains a classifier by cross-entropy and returns it frozen (and, for the
/// style marker, without its output layer).
///
/// The best epoch by held-out accuracy is kept. Without `dev` examples, the
/// last tenth of the shuffled training set is held out.
pub fn pretrain<F: Float>(
    role: ClassifierRole,
    dims: ClassifierDims,
    train: &[Example],
    dev: Option<&[Example]>,
    vocab: &Vocabulary,
    opts: &PretrainOptions,
) -> Result<(StyleClassifier<F>, PretrainReport)> {
    let styles: std::collections::BTreeSet<_> = train.iter().map(|e| e.style).collect();
    if styles.len() < 2 {
        return Err(Error::InvalidArgument(
            "classifier pretraining needs examples of both styles".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_c1a5);
    let (train_set, held_out): (Vec<&Example>, Vec<&Example>) = match dev {
        Some(d) if !d.is_empty() => (train.iter().collect(), d.iter().collect()),
        _ => {
            let mut all: Vec<&Example> = train.iter().collect();
            all.shuffle(&mut rng);
            let cut = (all.len() * 9 / 10).max(1);
            let dev = all.split_off(cut);
            (all, dev)
        }
    };

    let mut model = StyleClassifier::<F>::new(role, dims, opts.seed)?;
    let mut opt = Adam::new(opts.lr);
    let mut report = PretrainReport::default();
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in chunk_indices(&order, opts.batch_size) {
            let exs: Vec<&Example> = chunk.iter().map(|&i| train_set[i]).collect();
            let batch = Batch::new(&exs, vocab, opts.max_len)?;
            let tape = Tape::new();
            let logits = model.logits(&tape, TokenInput::Ids(&batch.ids), &batch.mask)?;
            let targets: Vec<usize> = batch.styles.iter().map(|s| s.id()).collect();
            let w = vec![F::c(1.0 / batch.size() as f64); batch.size()];
            let loss = tape.cross_entropy(logits, &targets, &w);
            total += loss.scalar().as_f64() * batch.size() as f64;
            tape.backward(loss)?.accumulate_into(&mut model)?;
            opt.step(&mut model);
        }
        report.epoch_losses.push(total / train_set.len() as f64);
        let acc = accuracy(&model, &held_out, vocab, opts.max_len, opts.batch_size)?;
        report.dev_accuracy.push(acc);
        log::info!(
            "pretrain {role} epoch {}: loss {:.4} dev acc {acc:.2}%",
            epoch + 1,
            report.epoch_losses[epoch]
        );
        if best.is_none() || acc > report.best_dev_accuracy {
            report.best_dev_accuracy = acc;
            best = Some(Checkpoint::from_params(&model, BTreeMap::new()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break;
            }
        }
    }
    if let Some(ck) = best {
        ck.load_into(&mut model)?;
    }
    if role == ClassifierRole::StyleMarker {
        model.truncate();
    }
    model.freeze();
    Ok((model, report))
}

/// Percentage of examples whose predicted style equals their label.
pub fn accuracy<F: Float>(
    model: &StyleClassifier<F>,
    examples: &[&Example],
    vocab: &Vocabulary,
    max_len: usize,
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("accuracy over zero examples".into()));
    }
    let mut correct = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk, vocab, max_len)?;
        let pred = model.predict(&batch)?;
        correct += pred.iter().zip(&batch.styles).filter(|(p, s)| p == s).count();
    }
    Ok(100.0 * correct as f64 / examples.len() as f64)
}

/// Index of the largest weight in each row.
pub fn argmax_rows<F: Float>(a: &Array2<F>) -> Vec<usize> {
    a.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
