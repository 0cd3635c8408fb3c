//! Persistent tensors: the learnable leaves that live outside any tape.
//!
//! A [`Tensor`] owns its value and, when it requires gradients, a same-shape
//! gradient accumulator. Tapes borrow tensors as leaves for one forward pass;
//! the gradients a backward pass produces are folded back in with
//! [`Tensor::accumulate`] (see [`crate::tape::Gradients`]).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::FromPrimitive;

use crate::error::{Error, Result};

/// Element type of every tensor. Implemented for `f64` (verification
/// precision) and `f32` (training speed).
pub trait Float:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Float for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        TensorId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major matrix with an optional gradient accumulator.
///
/// Every tensor in this crate is rank 2; vectors are `[1, n]` rows and
/// scalars are `[1, 1]`. Cloning a tensor yields a distinct leaf identity.
#[derive(Debug)]
pub struct Tensor<F: Float> {
    id: TensorId,
    value: Array2<F>,
    grad: Option<Array2<F>>,
}

impl<F: Float> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            id: TensorId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

impl<F: Float> Tensor<F> {
    pub fn new(value: Array2<F>, requires_grad: bool) -> Self {
        let grad = requires_grad.then(|| Array2::zeros(value.raw_dim()));
        Tensor {
            id: TensorId::fresh(),
            value,
            grad,
        }
    }

    /// Trainable tensor.
    pub fn param(value: Array2<F>) -> Self {
        Self::new(value, true)
    }

    pub fn zeros(rows: usize, cols: usize, requires_grad: bool) -> Self {
        Self::new(Array2::zeros((rows, cols)), requires_grad)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>, requires_grad: bool) -> Result<Self> {
        let value = Array2::from_shape_vec((rows, cols), data).map_err(|e| {
            Error::InvalidArgument(format!("data does not fit shape [{rows}, {cols}]: {e}"))
        })?;
        Ok(Self::new(value, requires_grad))
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn value(&self) -> &Array2<F> {
        &self.value
    }

    /// Direct mutable access for optimizers and checkpoint loading.
    pub fn value_mut(&mut self) -> &mut Array2<F> {
        &mut self.value
    }

    pub fn shape(&self) -> [usize; 2] {
        let (r, c) = self.value.dim();
        [r, c]
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&Array2<F>> {
        self.grad.as_ref()
    }

    /// Turns gradient tracking on (fresh zero accumulator) or off (drops it).
    pub fn set_requires_grad(&mut self, on: bool) {
        match (on, self.grad.is_some()) {
            (true, false) => self.grad = Some(Array2::zeros(self.value.raw_dim())),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(F::zero());
        }
    }

    /// Adds `delta` into the accumulator. A no-op for frozen tensors.
    pub fn accumulate(&mut self, delta: &Array2<F>) -> Result<()> {
        let Some(g) = self.grad.as_mut() else {
            return Ok(());
        };
        if g.dim() != delta.dim() {
            return Err(Error::InvalidArgument(format!(
                "gradient shape {:?} does not match tensor shape {:?}",
                delta.dim(),
                g.dim()
            )));
        }
        *g += delta;
        Ok(())
    }

    /// Replaces the value, keeping identity and accumulator.
    pub fn assign(&mut self, value: Array2<F>) -> Result<()> {
        if value.dim() != self.value.dim() {
            return Err(Error::InvalidArgument(format!(
                "cannot assign shape {:?} into tensor of shape {:?}",
                value.dim(),
                self.value.dim()
            )));
        }
        self.value = value;
        Ok(())
    }
}

/// Anything that owns named learnable tensors.
///
/// Names are stable dotted paths (`encoder.gru.fwd.w_x`) used by checkpoints,
/// hashing and the optimizer state.
pub trait Parameters<F: Float> {
    fn named_params(&self) -> Vec<(String, &Tensor<F>)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)>;

    fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    fn set_requires_grad(&mut self, on: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(on);
        }
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Prefixes every name of a child module's parameters.
pub(crate) fn prefixed<'a, T>(prefix: &str, items: Vec<(String, T)>) -> Vec<(String, T)>
where
    T: 'a,
{
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn grad_present_iff_requires_grad() {
        let mut t = Tensor::<f64>::zeros(2, 3, false);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap().dim(), (2, 3));
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn clone_gets_new_identity() {
        let t = Tensor::<f64>::zeros(1, 1, true);
        let u = t.clone();
        assert_ne!(t.id(), u.id());
        assert_eq!(t.value(), u.value());
    }

    #[test]
    fn accumulate_adds_and_zero_grad_resets() {
        let mut t = Tensor::param(array![[1.0, 2.0]]);
        t.accumulate(&array![[0.5, 0.5]]).unwrap();
        t.accumulate(&array![[0.5, 1.0]]).unwrap();
        assert_eq!(t.grad().unwrap(), &array![[1.0, 1.5]]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &array![[0.0, 0.0]]);
        assert!(t.accumulate(&array![[1.0]]).is_err());
    }

    #[test]
    fn from_vec_rejects_bad_shape() {
        assert!(Tensor::<f64>::from_vec(2, 2, vec![1.0; 3], false).is_err());
        let t = Tensor::<f32>::from_vec(2, 2, vec![1.0; 4], false).unwrap();
        assert_eq!(t.shape(), [2, 2]);
        assert_eq!(t.len(), 4);
    }
}
