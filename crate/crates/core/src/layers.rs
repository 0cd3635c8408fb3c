//! Embeddings, GRU cells, the bidirectional GRU encoder and attention
//! pooling shared by the classifiers and the generator.
//!
//! Sequences are lists of per-step `[B, d]` blocks; masks are `[B, T]`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{prefixed, Float, Parameters, Tensor};

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `uniform(-bound, bound)` entries.
    pub fn uniform<F: Float>(&mut self, rows: usize, cols: usize, bound: f64) -> Tensor<F> {
        let s = bound;
        let rng = &mut self.rng;
        Tensor::param(Array2::from_shape_simple_fn((rows, cols), || {
            F::c(rng.random_range(-s..s))
        }))
    }

    /// `uniform(±1/√fan_in)`.
    pub fn fan_in<F: Float>(&mut self, rows: usize, cols: usize, fan_in: usize) -> Tensor<F> {
        self.uniform(rows, cols, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn zeros<F: Float>(rows: usize, cols: usize) -> Tensor<F> {
        Tensor::zeros(rows, cols, true)
    }

    pub fn filled<F: Float>(rows: usize, cols: usize, v: f64) -> Tensor<F> {
        Tensor::param(Array2::from_elem((rows, cols), F::c(v)))
    }
}

/// `[V, d]` lookup table whose `PAD` row is held at zero.
#[derive(Clone, Debug)]
pub struct Embedding<F: Float> {
    pub table: Tensor<F>,
}

impl<F: Float> Embedding<F> {
    pub fn new(vocab: usize, dim: usize, init: &mut Init) -> Self {
        // Unit variance entries.
        let mut table = init.uniform(vocab, dim, 3f64.sqrt());
        table.value_mut().row_mut(PAD).fill(F::zero());
        Embedding { table }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// The table as a tape node, with the `PAD` row masked out so it never
    /// receives gradient.
    pub fn weights<'t>(&self, tape: &'t Tape<F>) -> Var<'t, F> {
        let mut keep = Array2::ones((self.vocab(), 1));
        keep[[PAD, 0]] = F::zero();
        tape.param(&self.table).mul_col(tape.constant(keep))
    }

    pub fn lookup<'t>(&self, tape: &'t Tape<F>, ids: &[usize]) -> Var<'t, F> {
        tape.gather(self.weights(tape), ids)
    }

    /// Expected embedding under `probs` (`[n, V]`): `probs · table`.
    pub fn soft<'t>(&self, probs: Var<'t, F>) -> Var<'t, F> {
        probs.matmul(self.weights(probs.tape()))
    }
}

impl<F: Float> Parameters<F> for Embedding<F> {
    fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![("table".into(), &self.table)]
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![("table".into(), &mut self.table)]
    }
}

/// `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear<F: Float> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Float> Linear<F> {
    pub fn new(d_in: usize, d_out: usize, init: &mut Init) -> Self {
        Linear {
            w: init.fan_in(d_in, d_out, d_in),
            b: Init::zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward<'t>(&self, x: Var<'t, F>) -> Var<'t, F> {
        let tape = x.tape();
        x.matmul(tape.param(&self.w)).add_row(tape.param(&self.b))
    }
}

impl<F: Float> Parameters<F> for Linear<F> {
    fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

/// GRU cell with gate blocks ordered update, reset, candidate:
///
/// ```text
/// z = σ(x Wz + h Uz + bz)
/// r = σ(x Wr + h Ur + br)
/// n = tanh(x Wn + r ⊙ (h Un) + bn)
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell<F: Float> {
    /// `[d_in, 3·d_h]`
    pub w_x: Tensor<F>,
    /// `[d_h, 3·d_h]`
    pub w_h: Tensor<F>,
    /// `[1, 3·d_h]`
    pub b: Tensor<F>,
}

impl<F: Float> GruCell<F> {
    pub fn new(d_in: usize, d_h: usize, init: &mut Init) -> Self {
        GruCell {
            w_x: init.fan_in(d_in, 3 * d_h, d_h),
            w_h: init.fan_in(d_h, 3 * d_h, d_h),
            b: Init::zeros(1, 3 * d_h),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_x.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_h.shape()[0]
    }

    /// One recurrence step with shapes checked.
    pub fn gru_step<'t>(&self, h_prev: Var<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let (hs, xs) = (h_prev.shape(), x.shape());
        if hs[1] != self.hidden() || xs[1] != self.d_in() || hs[0] != xs[0] {
            return Err(Error::InvalidArgument(format!(
                "gru_step: h {hs:?} and x {xs:?} do not fit cell (d_in {}, d_h {})",
                self.d_in(),
                self.hidden()
            )));
        }
        Ok(self.step(h_prev, x))
    }

    pub(crate) fn step<'t>(&self, h: Var<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let tape = x.tape();
        let d = self.hidden();
        let gx = x.matmul(tape.param(&self.w_x)).add_row(tape.param(&self.b));
        let gh = h.matmul(tape.param(&self.w_h));
        let z = gx.slice_cols(0, d).add(gh.slice_cols(0, d)).sigmoid();
        let r = gx.slice_cols(d, 2 * d).add(gh.slice_cols(d, 2 * d)).sigmoid();
        let n = gx
            .slice_cols(2 * d, 3 * d)
            .add(r.mul(gh.slice_cols(2 * d, 3 * d)))
            .tanh();
        n.add(z.mul(h.sub(n)))
    }

    /// Step that only advances rows whose `keep` entry is 1.
    pub(crate) fn masked_step<'t>(
        &self,
        h: Var<'t, F>,
        x: Var<'t, F>,
        keep: Option<Var<'t, F>>,
    ) -> Var<'t, F> {
        let next = self.step(h, x);
        match keep {
            None => next,
            Some(k) => h.add(next.sub(h).mul_col(k)),
        }
    }
}

impl<F: Float> Parameters<F> for GruCell<F> {
    fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("w_x".into(), &self.w_x),
            ("w_h".into(), &self.w_h),
            ("b".into(), &self.b),
        ]
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("w_x".into(), &mut self.w_x),
            ("w_h".into(), &mut self.w_h),
            ("b".into(), &mut self.b),
        ]
    }
}

/// Per-step `[B, 1]` keep columns for a mask, `None` where every row is real.
pub(crate) fn step_keeps<'t, F: Float>(tape: &'t Tape<F>, mask: &Array2<bool>) -> Vec<Option<Var<'t, F>>> {
    (0..mask.ncols())
        .map(|t| {
            let col = mask.column(t);
            if col.iter().all(|&m| m) {
                None
            } else {
                Some(tape.constant(
                    col.mapv(|m| if m { F::one() } else { F::zero() })
                        .insert_axis(ndarray::Axis(1)),
                ))
            }
        })
        .collect()
}

/// Output of a bidirectional pass.
pub struct BiGruOutput<'t, F: Float> {
    /// Per-step `[B, 2·d_h]`: forward state then backward state.
    pub states: Vec<Var<'t, F>>,
    /// `[B, 2·d_h]`: forward state at the last real token, backward state
    /// at position 0.
    pub last: Var<'t, F>,
}

#[derive(Clone, Debug)]
pub struct BiGru<F: Float> {
    pub fwd: GruCell<F>,
    pub bwd: GruCell<F>,
}

impl<F: Float> BiGru<F> {
    pub fn new(d_in: usize, d_h: usize, init: &mut Init) -> Self {
        BiGru {
            fwd: GruCell::new(d_in, d_h, init),
            bwd: GruCell::new(d_in, d_h, init),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    /// Runs both directions over `inputs` (one `[B, d_in]` block per step).
    /// Padded steps leave the state untouched in both directions.
    pub fn bigru_encode<'t>(
        &self,
        tape: &'t Tape<F>,
        inputs: &[Var<'t, F>],
        mask: &Array2<bool>,
    ) -> Result<BiGruOutput<'t, F>> {
        let t_len = inputs.len();
        if t_len == 0 || mask.ncols() != t_len {
            return Err(Error::InvalidArgument(format!(
                "bigru_encode: {} steps but mask has {} columns",
                t_len,
                mask.ncols()
            )));
        }
        let b = mask.nrows();
        for x in inputs {
            if x.shape() != [b, self.fwd.d_in()] {
                return Err(Error::InvalidArgument(format!(
                    "bigru_encode: step shape {:?}, expected [{b}, {}]",
                    x.shape(),
                    self.fwd.d_in()
                )));
            }
        }
        let keeps = step_keeps(tape, mask);
        let h0 = tape.constant(Array2::zeros((b, self.hidden())));

        let mut fwd = Vec::with_capacity(t_len);
        let mut h = h0;
        for t in 0..t_len {
            h = self.fwd.masked_step(h, inputs[t], keeps[t]);
            fwd.push(h);
        }
        let fwd_last = h;

        let mut bwd = vec![h0; t_len];
        let mut h = h0;
        for t in (0..t_len).rev() {
            h = self.bwd.masked_step(h, inputs[t], keeps[t]);
            bwd[t] = h;
        }
        let states = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &r)| tape.concat_cols(&[f, r]))
            .collect();
        Ok(BiGruOutput {
            states,
            last: tape.concat_cols(&[fwd_last, h]),
        })
    }
}

impl<F: Float> Parameters<F> for BiGru<F> {
    fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = prefixed("fwd", self.fwd.named_params());
        v.extend(prefixed("bwd", self.bwd.named_params()));
        v
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = prefixed("fwd", self.fwd.named_params_mut());
        v.extend(prefixed("bwd", self.bwd.named_params_mut()));
        v
    }
}

/// Additive attention with a learned context vector:
/// `v_t = tanh(W h_t + b)`, `α = softmax(vᵀu / τ)` over unmasked steps.
#[derive(Clone, Debug)]
pub struct Attention<F: Float> {
    pub proj: Linear<F>,
    /// `[d_att, 1]`
    pub u: Tensor<F>,
    pub tau: F,
}

impl<F: Float> Attention<F> {
    pub fn new(d_in: usize, d_att: usize, tau: f64, init: &mut Init) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "attention temperature must be positive, got {tau}"
            )));
        }
        Ok(Attention {
            proj: Linear::new(d_in, d_att, init),
            u: init.fan_in(d_att, 1, d_att),
            tau: F::c(tau),
        })
    }

    /// `[B, T]` attention weights; zero on masked steps.
    pub fn attention_scores<'t>(
        &self,
        tape: &'t Tape<F>,
        states: &[Var<'t, F>],
        mask: &Array2<bool>,
    ) -> Result<Var<'t, F>> {
        if states.len() != mask.ncols() {
            return Err(Error::InvalidArgument(format!(
                "attention: {} states but mask has {} columns",
                states.len(),
                mask.ncols()
            )));
        }
        let u = tape.param(&self.u);
        let scores: Vec<Var<'t, F>> = states
            .iter()
            .map(|&h| self.proj.forward(h).tanh().matmul(u))
            .collect();
        tape.softmax_temp(tape.concat_cols(&scores), self.tau, Some(mask))
    }
}

impl<F: Float> Parameters<F> for Attention<F> {
    fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = prefixed("proj", self.proj.named_params());
        v.push(("u".into(), &self.u));
        v
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = prefixed("proj", self.proj.named_params_mut());
        v.push(("u".into(), &mut self.u));
        v
    }
}

/// `o = Σ_t α_t h_t`, rows of `alpha` (`[B, T]`) weighting the per-step states.
pub fn context_vector<'t, F: Float>(states: &[Var<'t, F>], alpha: Var<'t, F>) -> Var<'t, F> {
    assert_eq!(states.len(), alpha.cols(), "context_vector: one weight per step");
    states
        .iter()
        .enumerate()
        .map(|(t, &h)| h.mul_col(alpha.slice_cols(t, t + 1)))
        .reduce(|a, b| a.add(b))
        .expect("at least one step")
}
