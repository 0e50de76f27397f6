use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.ids().map(|id| vec![T::zero(); params.get(id).len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every registered parameter.
    ///
    /// Fails without touching anything if some parameter has no gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for id in params.ids() {
            if params.get(id).grad.is_none() {
                return Err(TensorError::MissingGrad(params.name(id).to_string()));
            }
        }
        assert_eq!(self.m.len(), params.len(), "optimizer built for a different store");
        self.t += 1;
        let t = self.t as f64;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powf(t));
        let bc2 = T::of(1.0 - self.beta2.powf(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for id in params.ids() {
            let i = id.index();
            let p = params.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }

    /// Moments and step counter as named tensors, for checkpointing.
    pub fn export(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "adam.t".to_string(),
            Tensor::from_vec(vec![T::of(self.t as f64)]),
        )];
        for id in params.ids() {
            let shape = params.get(id).shape();
            let name = params.name(id);
            let i = id.index();
            out.push((
                format!("adam.m.{name}"),
                Tensor::new(shape, self.m[i].clone()).expect("shape matches"),
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor::new(shape, self.v[i].clone()).expect("shape matches"),
            ));
        }
        out
    }

    /// Restores moments exported by [`AdamState::export`].
    pub fn import(&mut self, params: &ParamStore<T>, lookup: impl Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        let t = lookup("adam.t").ok_or_else(|| TensorError::UnknownParam("adam.t".into()))?;
        self.t = t.item().to_f64_lossy().round() as u64;
        for id in params.ids() {
            let name = params.name(id);
            let i = id.index();
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("adam.{prefix}.{name}");
                let t = lookup(&key).ok_or(TensorError::UnknownParam(key))?;
                if t.len() != slot.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam import",
                        lhs: params.get(id).shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                slot.copy_from_slice(t.data());
            }
        }
        Ok(())
    }
}
