//! The transfer network: reverse-attention content encoder, conditional
//! layer-norm stylizer, and GRU decoder.
//!
//! ```text
//! x ──marker α──► α̃ = 1-α ──► ẽ_t = α̃_t·e_t ──BiGRU──► z_x
//! z_x ──stop-grad──► W_z·+b_z ──► γ^ŝ ⊙ N(·) + β^ŝ ──► z_ŝ
//! (z_x, z_ŝ) ──► h_0 = W_init[z_x; z_ŝ] + b ──GRU, input [e; z_ŝ]──► tokens
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::checkpoint::Checkpoint;
use crate::classifier::{argmax_rows, StyleClassifier, TokenInput};
use crate::corpus::{Batch, StyleLabel, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::layers::{BiGru, Embedding, GruCell, Init, Linear};
use crate::tape::{Tape, Var};
use crate::tensor::{prefixed, Float, Parameters, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorDims {
    pub vocab: usize,
    pub emb: usize,
    /// Per direction; the content vector has `2 × enc_hidden` entries.
    pub enc_hidden: usize,
    pub cln: usize,
    pub dec_hidden: usize,
    pub cln_eps: f64,
}

impl GeneratorDims {
    pub fn content(&self) -> usize {
        2 * self.enc_hidden
    }
}

/// Components that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Feed plain embeddings (`α̃_t = 1`) to the content encoder.
    pub no_reverse_attention: bool,
    /// Replace the stylizer with a learned per-style vector.
    pub no_stylizer: bool,
}

/// `z̃ = W_z z + b_z`, `z_ŝ = γ^ŝ ⊙ (z̃ - μ)/(σ + eps) + β^ŝ`.
#[derive(Clone, Debug)]
pub struct Stylizer<F: Float> {
    pub proj: Linear<F>,
    /// Row `s` is γ^s.
    pub gain: Tensor<F>,
    /// Row `s` is β^s.
    pub bias: Tensor<F>,
    pub eps: F,
}

impl<F: Float> Stylizer<F> {
    pub fn new(d_content: usize, d_style: usize, eps: f64, init: &mut Init) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("CLN eps must be positive, got {eps}")));
        }
        Ok(Stylizer {
            proj: Linear::new(d_content, d_style, init),
            gain: Init::filled(2, d_style, 1.0),
            bias: Init::zeros(2, d_style),
            eps: F::c(eps),
        })
    }
}

#[derive(Clone, Debug)]
pub enum StyleModule<F: Float> {
    Cln(Stylizer<F>),
    /// Ablation: one learned `[1, d_style]` vector per style.
    Embedding(Tensor<F>),
}

#[derive(Clone, Debug)]
pub struct Decoder<F: Float> {
    pub init: Linear<F>,
    pub gru: GruCell<F>,
    pub out: Linear<F>,
}

/// Output of soft sampling.
pub struct SoftSample<'t, F: Float> {
    /// Per step `[B, V]` token distributions.
    pub probs: Vec<Var<'t, F>>,
    /// Per step `[B, d_emb]` expected embeddings `p_t · E`.
    pub embeds: Vec<Var<'t, F>>,
}

#[derive(Clone, Debug)]
pub struct Generator<F: Float> {
    pub dims: GeneratorDims,
    pub ablation: Ablation,
    /// Cut the gradient between the content vector and the stylizer.
    pub stop_gradient: bool,
    pub embedding: Embedding<F>,
    pub encoder: BiGru<F>,
    pub style: StyleModule<F>,
    pub decoder: Decoder<F>,
}

/// `α̃_t = 1 - α_t` on real tokens, 0 on padding.
pub fn reverse_attention<F: Float>(alpha: &Array2<F>, mask: &Array2<bool>) -> Array2<F> {
    let mut out = alpha.mapv(|a| F::one() - a);
    ndarray::Zip::from(&mut out).and(mask).for_each(|o, &m| {
        if !m {
            *o = F::zero();
        }
    });
    out
}

/// `ẽ_t = α̃_t · e_t` for every step; `steps[t]` is `[B, d]`, `alpha_tilde` `[B, T]`.
pub fn apply_reverse<'t, F: Float>(steps: &[Var<'t, F>], alpha_tilde: &Array2<F>) -> Vec<Var<'t, F>> {
    steps
        .iter()
        .enumerate()
        .map(|(t, &e)| {
            let col = alpha_tilde.column(t).to_owned().insert_axis(Axis(1));
            e.mul_col(e.tape().constant(col))
        })
        .collect()
}

fn style_ids(styles: &[StyleLabel]) -> Vec<usize> {
    styles.iter().map(|s| s.id()).collect()
}

impl<F: Float> Generator<F> {
    pub fn new(dims: GeneratorDims, ablation: Ablation, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let embedding = Embedding::new(dims.vocab, dims.emb, &mut init);
        let encoder = BiGru::new(dims.emb, dims.enc_hidden, &mut init);
        let style = if ablation.no_stylizer {
            StyleModule::Embedding(init.uniform(2, dims.cln, 1.0))
        } else {
            StyleModule::Cln(Stylizer::new(dims.content(), dims.cln, dims.cln_eps, &mut init)?)
        };
        let decoder = Decoder {
            init: Linear::new(dims.content() + dims.cln, dims.dec_hidden, &mut init),
            gru: GruCell::new(dims.emb + dims.cln, dims.dec_hidden, &mut init),
            out: Linear::new(dims.dec_hidden, dims.vocab, &mut init),
        };
        Ok(Generator {
            dims,
            ablation,
            stop_gradient: true,
            embedding,
            encoder,
            style,
            decoder,
        })
    }

    /// Content vector `z_x`, `[B, 2·enc_hidden]`.
    ///
    /// Marker attention is evaluated off-tape, so no gradient reaches the
    /// marker or flows back through it into soft-sampled inputs.
    pub fn encode_content<'t>(
        &self,
        tape: &'t Tape<F>,
        input: TokenInput<'_, 't, F>,
        mask: &Array2<bool>,
        marker: &StyleClassifier<F>,
    ) -> Result<Var<'t, F>> {
        let steps: Vec<Var<'t, F>> = match input {
            TokenInput::Ids(ids) => {
                let table = self.embedding.weights(tape);
                ids.columns()
                    .into_iter()
                    .map(|c| tape.gather(table, &c.to_vec()))
                    .collect()
            }
            TokenInput::Soft(probs) => probs.iter().map(|&p| self.embedding.soft(p)).collect(),
        };
        let weights = if self.ablation.no_reverse_attention {
            mask.mapv(|m| if m { F::one() } else { F::zero() })
        } else {
            let alpha = match input {
                TokenInput::Ids(ids) => {
                    let tmp = marker_batch(ids, mask);
                    marker.marker_attention(&tmp)?
                }
                TokenInput::Soft(probs) => {
                    let vals: Vec<Array2<F>> = probs.iter().map(|p| p.value()).collect();
                    marker.marker_attention_soft(&vals, mask)?
                }
            };
            let singles = mask
                .outer_iter()
                .filter(|r| r.iter().filter(|&&m| m).count() == 1)
                .count();
            if singles > 0 {
                log::warn!("{singles} single-token sentence(s): reverse attention suppresses all content");
            }
            reverse_attention(&alpha, mask)
        };
        let suppressed = apply_reverse(&steps, &weights);
        Ok(self.encoder.bigru_encode(tape, &suppressed, mask)?.last)
    }

    /// Style vector `z_ŝ`, `[B, d_style]`, for each row's target style.
    pub fn stylize<'t>(&self, content: Var<'t, F>, targets: &[StyleLabel]) -> Result<Var<'t, F>> {
        let tape = content.tape();
        if content.rows() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "stylize: {} content rows but {} targets",
                content.rows(),
                targets.len()
            )));
        }
        let ids = style_ids(targets);
        match &self.style {
            StyleModule::Cln(s) => {
                let input = if self.stop_gradient { content.detach() } else { content };
                let normed = tape.layer_norm(s.proj.forward(input), s.eps);
                let gain = tape.gather(tape.param(&s.gain), &ids);
                let bias = tape.gather(tape.param(&s.bias), &ids);
                Ok(normed.mul(gain).add(bias))
            }
            StyleModule::Embedding(table) => Ok(tape.gather(tape.param(table), &ids)),
        }
    }

    fn initial_state<'t>(&self, content: Var<'t, F>, style: Var<'t, F>) -> Var<'t, F> {
        let tape = content.tape();
        self.decoder.init.forward(tape.concat_cols(&[content, style]))
    }

    fn step<'t>(&self, h: Var<'t, F>, input_emb: Var<'t, F>, style: Var<'t, F>) -> (Var<'t, F>, Var<'t, F>) {
        let tape = h.tape();
        let x = tape.concat_cols(&[input_emb, style]);
        let h = self.decoder.gru.step(h, x);
        (h, self.decoder.out.forward(h))
    }

    /// Per-step `[B, V]` logits for teacher-forced decoding of `inputs` (`[B, L]`).
    pub fn decode_teacher<'t>(
        &self,
        content: Var<'t, F>,
        style: Var<'t, F>,
        inputs: &Array2<usize>,
    ) -> Vec<Var<'t, F>> {
        let tape = content.tape();
        let table = self.embedding.weights(tape);
        let mut h = self.initial_state(content, style);
        let mut logits = Vec::with_capacity(inputs.ncols());
        for col in inputs.columns() {
            let e = tape.gather(table, &col.to_vec());
            let (next, l) = self.step(h, e, style);
            h = next;
            logits.push(l);
        }
        logits
    }

    /// Differentiable decoding for `length` steps: each step's input is the
    /// previous distribution times the embedding table. `PAD` and `BOS` are
    /// excluded from every distribution.
    pub fn decode_soft<'t>(
        &self,
        content: Var<'t, F>,
        style: Var<'t, F>,
        length: usize,
    ) -> Result<SoftSample<'t, F>> {
        if length == 0 {
            return Err(Error::InvalidArgument("decode_soft needs length >= 1".into()));
        }
        let tape = content.tape();
        let b = content.rows();
        let allowed = output_mask(b, self.dims.vocab);
        let mut h = self.initial_state(content, style);
        let mut input = self.embedding.lookup(tape, &vec![BOS; b]);
        let mut probs = Vec::with_capacity(length);
        let mut embeds = Vec::with_capacity(length);
        for _ in 0..length {
            let (next, logits) = self.step(h, input, style);
            h = next;
            let p = tape.softmax_temp(logits, F::one(), Some(&allowed))?;
            input = self.embedding.soft(p);
            probs.push(p);
            embeds.push(input);
        }
        Ok(SoftSample { probs, embeds })
    }

    /// Argmax decoding from fixed representations. Each sentence stops at
    /// `EOS` (not included) or after `max_len` tokens.
    pub fn decode_greedy(
        &self,
        content: &Array2<F>,
        style: &Array2<F>,
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("decode_greedy needs max_len >= 1".into()));
        }
        let b = content.nrows();
        let tape = Tape::new();
        let (c, s) = (tape.constant(content.clone()), tape.constant(style.clone()));
        let table = self.embedding.weights(&tape);
        let mut h = self.initial_state(c, s);
        let mut prev = vec![BOS; b];
        let mut out = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for _ in 0..max_len {
            let e = tape.gather(table, &prev);
            let (next, logits) = self.step(h, e, s);
            h = next;
            let mut l = logits.value();
            l.column_mut(PAD).fill(F::neg_infinity());
            l.column_mut(BOS).fill(F::neg_infinity());
            prev = argmax_rows(&l);
            for (i, &tok) in prev.iter().enumerate() {
                if done[i] {
                    continue;
                }
                if tok == EOS {
                    done[i] = true;
                } else {
                    out[i].push(tok);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    /// `(z_x, z_ŝ)` values for a batch and per-row target styles.
    pub fn represent(
        &self,
        batch: &Batch,
        targets: &[StyleLabel],
        marker: &StyleClassifier<F>,
    ) -> Result<(Array2<F>, Array2<F>)> {
        let tape = Tape::new();
        let z = self.encode_content(&tape, TokenInput::Ids(&batch.ids), &batch.mask, marker)?;
        let s = self.stylize(z, targets)?;
        Ok((z.value(), s.value()))
    }

    /// Encode, stylize towards `targets`, and decode greedily.
    pub fn transfer(
        &self,
        batch: &Batch,
        targets: &[StyleLabel],
        marker: &StyleClassifier<F>,
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let (z, s) = self.represent(batch, targets, marker)?;
        self.decode_greedy(&z, &s, max_len)
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let d = &self.dims;
        BTreeMap::from([
            ("kind".into(), "generator".into()),
            ("vocab".into(), d.vocab.to_string()),
            ("emb".into(), d.emb.to_string()),
            ("enc_hidden".into(), d.enc_hidden.to_string()),
            ("cln".into(), d.cln.to_string()),
            ("dec_hidden".into(), d.dec_hidden.to_string()),
            ("cln_eps".into(), format!("{:?}", d.cln_eps)),
            (
                "no_reverse_attention".into(),
                self.ablation.no_reverse_attention.to_string(),
            ),
            ("no_stylizer".into(), self.ablation.no_stylizer.to_string()),
        ])
    }

    pub fn to_checkpoint(&self, extra: BTreeMap<String, String>) -> Checkpoint {
        let mut meta = self.metadata();
        meta.extend(extra);
        Checkpoint::from_params(self, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(BTreeMap::new()).save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "generator" {
            return Err(Error::Checkpoint("not a generator checkpoint".into()));
        }
        let dims = GeneratorDims {
            vocab: ck.meta_usize("vocab")?,
            emb: ck.meta_usize("emb")?,
            enc_hidden: ck.meta_usize("enc_hidden")?,
            cln: ck.meta_usize("cln")?,
            dec_hidden: ck.meta_usize("dec_hidden")?,
            cln_eps: ck.meta_f64("cln_eps")?,
        };
        let ablation = Ablation {
            no_reverse_attention: ck.meta("no_reverse_attention")? == "true",
            no_stylizer: ck.meta("no_stylizer")? == "true",
        };
        let mut g = Self::new(dims, ablation, 0)?;
        ck.load_into(&mut g)?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Allowed output tokens: everything but `PAD` and `BOS`.
fn output_mask(rows: usize, vocab: usize) -> Array2<bool> {
    Array2::from_shape_fn((rows, vocab), |(_, v)| v != PAD && v != BOS)
}

/// Wraps raw ids in a `Batch` so the marker can score them.
fn marker_batch(ids: &Array2<usize>, mask: &Array2<bool>) -> Batch {
    let lengths = mask
        .outer_iter()
        .map(|r| r.iter().filter(|&&m| m).count())
        .collect::<Vec<_>>();
    Batch {
        ids: ids.clone(),
        styles: vec![StyleLabel::Negative; lengths.len()],
        lengths,
        mask: mask.clone(),
    }
}

impl<F: Float> Parameters<F> for Generator<F> {
    fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = prefixed("embedding", self.embedding.named_params());
        v.extend(prefixed("encoder", self.encoder.named_params()));
        match &self.style {
            StyleModule::Cln(s) => {
                v.extend(prefixed("stylizer.proj", s.proj.named_params()));
                v.push(("stylizer.gain".into(), &s.gain));
                v.push(("stylizer.bias".into(), &s.bias));
            }
            StyleModule::Embedding(t) => v.push(("style_embedding".into(), t)),
        }
        v.extend(prefixed("decoder.init", self.decoder.init.named_params()));
        v.extend(prefixed("decoder.gru", self.decoder.gru.named_params()));
        v.extend(prefixed("decoder.out", self.decoder.out.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = prefixed("embedding", self.embedding.named_params_mut());
        v.extend(prefixed("encoder", self.encoder.named_params_mut()));
        match &mut self.style {
            StyleModule::Cln(s) => {
                v.extend(prefixed("stylizer.proj", s.proj.named_params_mut()));
                v.push(("stylizer.gain".into(), &mut s.gain));
                v.push(("stylizer.bias".into(), &mut s.bias));
            }
            StyleModule::Embedding(t) => v.push(("style_embedding".into(), t)),
        }
        v.extend(prefixed("decoder.init", self.decoder.init.named_params_mut()));
        v.extend(prefixed("decoder.gru", self.decoder.gru.named_params_mut()));
        v.extend(prefixed("decoder.out", self.decoder.out.named_params_mut()));
        v
    }
}
