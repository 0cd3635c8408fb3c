//! Adam with optional global-norm gradient clipping.

use ndarray::{Array2, Zip};

use crate::tensor::{Float, Parameters};

#[derive(Clone, Debug)]
pub struct Adam<F: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    step: u64,
    moments: Vec<(String, Array2<F>, Array2<F>)>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Returns the pre-clipping global gradient norm.
    pub fn step<P: Parameters<F> + ?Sized>(&mut self, model: &mut P) -> f64 {
        let mut params: Vec<_> = model
            .named_params_mut()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect();
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(n, t)| {
                    let dim = t.value().raw_dim();
                    (n.clone(), Array2::zeros(dim.clone()), Array2::zeros(dim))
                })
                .collect();
        }
        assert_eq!(
            self.moments.len(),
            params.len(),
            "optimizer reused on a different parameter set"
        );

        let norm = params
            .iter()
            .map(|(_, t)| {
                t.grad()
                    .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
                    .unwrap_or(0.0)
            })
            .sum::<f64>()
            .sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let bc1 = F::c(1.0 - self.beta1.powi(t));
        let bc2 = F::c(1.0 - self.beta2.powi(t));
        let lr = F::c(self.lr);
        let eps = F::c(self.eps);
        let clip = F::c(clip);
        let one = F::one();

        for ((name, tensor), (mname, m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            debug_assert_eq!(name, mname);
            let grad = tensor.grad().expect("filtered on requires_grad").clone();
            let mut value = std::mem::take(tensor.value_mut());
            Zip::from(&mut value)
                .and(m)
                .and(v)
                .and(&grad)
                .for_each(|w, m, v, &g| {
                    let g = g * clip;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
            *tensor.value_mut() = value;
            tensor.zero_grad();
        }
        norm
    }
}
