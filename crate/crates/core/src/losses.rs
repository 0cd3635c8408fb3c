//! The four training objectives, their weighted sum, and the training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::param_hash;
use crate::classifier::{StyleClassifier, TokenInput};
use crate::corpus::{chunk_indices, Batch, Example, StyleLabel, Vocabulary};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::optim::Adam;
use crate::tape::{Tape, Var};
use crate::tensor::Float;

/// `λ1..λ4` for self-reconstruction, cycle, content and style losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub self_recon: f64,
    pub cycle: f64,
    pub content: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            self_recon: 0.5,
            cycle: 0.5,
            content: 1.0,
            style: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.self_recon, self.cycle, self.content, self.style];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// The loss terms of one batch, on the tape.
pub struct LossTerms<'t, F: Float> {
    pub self_recon: Var<'t, F>,
    pub cycle: Var<'t, F>,
    pub content: Var<'t, F>,
    pub style: Var<'t, F>,
    pub total: Var<'t, F>,
}

impl<F: Float> LossTerms<'_, F> {
    pub fn values(&self) -> LossValues {
        LossValues {
            self_recon: self.self_recon.scalar().as_f64(),
            cycle: self.cycle.scalar().as_f64(),
            content: self.content.scalar().as_f64(),
            style: self.style.scalar().as_f64(),
            total: self.total.scalar().as_f64(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub self_recon: f64,
    pub cycle: f64,
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

impl LossValues {
    fn add_scaled(&mut self, o: &LossValues, k: f64) {
        self.self_recon += k * o.self_recon;
        self.cycle += k * o.cycle;
        self.content += k * o.content;
        self.style += k * o.style;
        self.total += k * o.total;
    }
}

/// Token cross-entropy of per-step logits against `targets`, averaged over
/// each sentence's real positions and then over the batch.
pub fn sequence_nll<'t, F: Float>(
    logits: &[Var<'t, F>],
    targets: &Array2<usize>,
    mask: &Array2<bool>,
) -> Result<Var<'t, F>> {
    let (b, len) = targets.dim();
    if logits.len() != len || mask.dim() != (b, len) || logits.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sequence_nll: {} logit steps for targets {:?} and mask {:?}",
            logits.len(),
            targets.dim(),
            mask.dim()
        )));
    }
    let counts: Vec<usize> = mask.outer_iter().map(|r| r.iter().filter(|&&m| m).count()).collect();
    if counts.contains(&0) {
        return Err(Error::DegenerateInput("sequence_nll: a sentence has no target positions".into()));
    }
    let tape = logits[0].tape();
    let mut total = tape.scalar(F::zero());
    for (t, l) in logits.iter().enumerate() {
        let w: Vec<F> = (0..b)
            .map(|i| {
                if mask[[i, t]] {
                    F::c(1.0 / (b * counts[i]) as f64)
                } else {
                    F::zero()
                }
            })
            .collect();
        let tgt = targets.column(t).to_vec();
        total = total.add(tape.cross_entropy(*l, &tgt, &w));
    }
    Ok(total)
}

/// Mean over rows of `‖a - b‖²`.
pub fn content_distance<'t, F: Float>(a: Var<'t, F>, b: Var<'t, F>) -> Var<'t, F> {
    let rows = a.rows();
    a.sub(b).square().sum().scale(F::c(1.0 / rows as f64))
}

/// Pretrained models consulted, never updated, during generator training.
#[derive(Clone, Copy)]
pub struct FrozenModels<'a, F: Float> {
    pub marker: &'a StyleClassifier<F>,
    pub classifier: &'a StyleClassifier<F>,
}

impl<F: Float> FrozenModels<'_, F> {
    fn check(&self) -> Result<()> {
        for (what, m) in [("style marker", self.marker), ("loss classifier", self.classifier)] {
            if !m.is_frozen() {
                return Err(Error::InvalidState(format!("{what} must be frozen before training")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossOptions {
    /// Treat `z_x` as a constant target in the content loss.
    pub detach_content_target: bool,
}

/// Self-reconstruction loss alone (`ŝ = s`).
pub fn self_reconstruction_loss<'t, F: Float>(
    tape: &'t Tape<F>,
    gen: &Generator<F>,
    marker: &StyleClassifier<F>,
    batch: &Batch,
) -> Result<Var<'t, F>> {
    let z = gen.encode_content(tape, TokenInput::Ids(&batch.ids), &batch.mask, marker)?;
    let s = gen.stylize(z, &batch.styles)?;
    let logits = gen.decode_teacher(z, s, &batch.decoder_inputs());
    sequence_nll(&logits, &batch.decoder_targets(), &batch.decoder_mask())
}

/// `−log p_C(ŝ | x̂)` averaged over the batch, for soft-sampled `x̂`.
pub fn style_loss<'t, F: Float>(
    classifier: &StyleClassifier<F>,
    soft: &[Var<'t, F>],
    mask: &Array2<bool>,
    targets: &[StyleLabel],
) -> Result<Var<'t, F>> {
    if !classifier.is_frozen() {
        return Err(Error::InvalidState("style loss needs a frozen classifier".into()));
    }
    let tape = soft
        .first()
        .ok_or_else(|| Error::InvalidArgument("style_loss: empty soft sequence".into()))?
        .tape();
    let logits = classifier.logits(tape, TokenInput::Soft(soft), mask)?;
    let ids: Vec<usize> = targets.iter().map(|s| s.id()).collect();
    let w = vec![F::c(1.0 / targets.len() as f64); targets.len()];
    Ok(tape.cross_entropy(logits, &ids, &w))
}

/// All four losses for one batch, transferring every sentence to the other style.
pub fn compute_losses<'t, F: Float>(
    tape: &'t Tape<F>,
    gen: &Generator<F>,
    frozen: FrozenModels<'_, F>,
    batch: &Batch,
    weights: &LossWeights,
    opts: LossOptions,
) -> Result<LossTerms<'t, F>> {
    frozen.check()?;
    weights.validate()?;
    let inputs = batch.decoder_inputs();
    let targets = batch.decoder_targets();
    let dmask = batch.decoder_mask();
    let flipped = batch.target_styles();

    let z = gen.encode_content(tape, TokenInput::Ids(&batch.ids), &batch.mask, frozen.marker)?;
    let s_src = gen.stylize(z, &batch.styles)?;
    let self_recon = sequence_nll(&gen.decode_teacher(z, s_src, &inputs), &targets, &dmask)?;

    let s_tgt = gen.stylize(z, &flipped)?;
    let soft = gen.decode_soft(z, s_tgt, batch.max_len())?;
    let z_hat = gen.encode_content(tape, TokenInput::Soft(&soft.probs), &batch.mask, frozen.marker)?;
    let s_back = gen.stylize(z_hat, &batch.styles)?;
    let cycle = sequence_nll(&gen.decode_teacher(z_hat, s_back, &inputs), &targets, &dmask)?;

    let anchor = if opts.detach_content_target { z.detach() } else { z };
    let content = content_distance(anchor, z_hat);
    let style = style_loss(frozen.classifier, &soft.probs, &batch.mask, &flipped)?;

    let total = weighted_total(weights, self_recon, cycle, content, style);
    Ok(LossTerms {
        self_recon,
        cycle,
        content,
        style,
        total,
    })
}

/// `λ1·L_self + λ2·L_cycle + λ3·L_content + λ4·L_style`.
pub fn weighted_total<'t, F: Float>(
    w: &LossWeights,
    self_recon: Var<'t, F>,
    cycle: Var<'t, F>,
    content: Var<'t, F>,
    style: Var<'t, F>,
) -> Var<'t, F> {
    self_recon
        .scale(F::c(w.self_recon))
        .add(cycle.scale(F::c(w.cycle)))
        .add(content.scale(F::c(w.content)))
        .add(style.scale(F::c(w.style)))
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub weights: LossWeights,
    pub loss: LossOptions,
    /// Write a log line every this many steps.
    pub log_every: usize,
    /// Appended to, one line per logged step.
    pub log_path: Option<PathBuf>,
    /// Receives `generator.epoch<N>.ck` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 5e-4,
            batch_size: 64,
            epochs: 20,
            max_len: 32,
            seed: 0,
            clip_norm: Some(5.0),
            weights: LossWeights::default(),
            loss: LossOptions::default(),
            log_every: 10,
            log_path: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: u64,
    /// Per epoch, means over its batches.
    pub epoch_losses: Vec<LossValues>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_HEADER: &str = "step, L_self, L_cycle, L_content, L_style, total";

/// Trains `gen` in place over shuffled mixed-style batches.
pub fn train<F: Float>(
    gen: &mut Generator<F>,
    marker: Option<&StyleClassifier<F>>,
    classifier: Option<&StyleClassifier<F>>,
    data: &[Example],
    vocab: &Vocabulary,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let (Some(marker), Some(classifier)) = (marker, classifier) else {
        return Err(Error::InvalidState(
            "training needs a pretrained style marker and loss classifier".into(),
        ));
    };
    let frozen = FrozenModels { marker, classifier };
    frozen.check()?;
    opts.weights.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if opts.batch_size == 0 || opts.max_len == 0 {
        return Err(Error::InvalidArgument("batch_size and max_len must be positive".into()));
    }
    let frozen_hash = (param_hash(marker), param_hash(classifier));

    let mut log = match &opts.log_path {
        Some(p) => {
            let exists = p.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            if !exists {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
            }
            Some((p.clone(), f))
        }
        None => None,
    };
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Adam::new(opts.lr);
    if let Some(c) = opts.clip_norm {
        opt = opt.with_clip(c);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let chunks = chunk_indices(&order, opts.batch_size);
        let mut mean = LossValues::default();
        for chunk in &chunks {
            let exs: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = Batch::new(&exs, vocab, opts.max_len)?;
            let tape = Tape::new();
            let terms = compute_losses(&tape, gen, frozen, &batch, &opts.weights, opts.loss)?;
            let v = terms.values();
            tape.backward(terms.total)?.accumulate_into(gen)?;
            opt.step(gen);
            report.steps += 1;
            mean.add_scaled(&v, 1.0 / chunks.len() as f64);
            if let Some((path, f)) = log.as_mut() {
                if report.steps % opts.log_every.max(1) as u64 == 0 {
                    writeln!(
                        f,
                        "{}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}",
                        report.steps, v.self_recon, v.cycle, v.content, v.style, v.total
                    )
                    .map_err(|e| Error::io(path.as_path(), e))?;
                }
            }
        }
        log::info!(
            "epoch {epoch}: self {:.4} cycle {:.4} content {:.4} style {:.4} total {:.4}",
            mean.self_recon,
            mean.cycle,
            mean.content,
            mean.style,
            mean.total
        );
        report.epoch_losses.push(mean);
        if let Some(dir) = &opts.checkpoint_dir {
            let path = dir.join(format!("generator.epoch{epoch}.ck"));
            gen.save(&path)?;
            report.checkpoints.push(path);
        }
    }
    if frozen_hash != (param_hash(marker), param_hash(classifier)) {
        return Err(Error::InvalidState("frozen models changed during training".into()));
    }
    Ok(report)
}
