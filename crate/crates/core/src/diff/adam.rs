use super::param::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 4e-3;

/// Adam optimizer state. Moment buffers are indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        AdamState {
            step: 0,
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One Adam update using the gradients held in `store`. Fails without
    /// touching any parameter if a trainable parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (_, p) in store.trainable() {
            match &p.grad {
                None => return Err(Error::MissingGradient(p.id.clone())),
                Some(g) if g.shape() != p.tensor.shape() => {
                    return Err(Error::shape(
                        "adam_step",
                        format!("gradient {:?} for `{}` {:?}", g.shape(), p.id, p.tensor.shape()),
                    ))
                }
                Some(_) => {}
            }
        }
        if self.first.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            let g = p.grad.as_ref().expect("checked above");
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            for (((w, &gv), mv), vv) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *w = *w - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
