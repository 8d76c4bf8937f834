use crate::numerics::{NumericsError, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Moment buffers and hyper-parameters for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: T) -> Self {
        let zeros: Vec<_> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
/// Frozen parameters are left untouched.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
) -> Result<(), NumericsError> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "adam_step",
            left: vec![store.len()],
            right: vec![grads.len()],
        });
    }
    for id in store.ids() {
        if let Some(g) = &grads[id.0] {
            if g.shape() != store.get(id).shape() || state.first[id.0].shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    left: store.get(id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let m = state.first[id.0].data_mut();
        let v = state.second[id.0].data_mut();
        let x = store.get_mut(id).data_mut();
        let g = grads[id.0].as_ref().map(Tensor::data);
        for i in 0..x.len() {
            let gi = g.map_or(T::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            x[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
