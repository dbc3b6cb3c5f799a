//! Adam with a trainability mask.
//!
//! Freezing is realized entirely here: gradients may exist for masked-out
//! parameters, but the step never reads or writes them, so frozen values
//! stay bit-identical.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which parameters an optimizer step may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainMask {
    trainable: Vec<bool>,
}

impl TrainMask {
    pub fn all(store: &ParamStore) -> Self {
        TrainMask {
            trainable: vec![true; store.len()],
        }
    }

    pub fn from_fn(store: &ParamStore, f: impl Fn(ParamId) -> bool) -> Self {
        TrainMask {
            trainable: store.ids().map(f).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.index()]
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.iter().filter(|&&t| t).count()
    }
}

/// First/second moment buffers per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let shapes: Vec<usize> = store.iter().map(|(_, p)| p.value.numel()).collect();
        OptimState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over the trainable parameters. Missing gradients count
/// as zero. Masked-out parameters are untouched, moments included.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut OptimState,
    mask: &TrainMask,
    lr: f64,
) -> Result<()> {
    if state.m.len() != store.len() || mask.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer state/mask sized for {} params, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);

    for id in store.ids().collect::<Vec<_>>() {
        if !mask.is_trainable(id) {
            continue;
        }
        let idx = id.index();
        let param = store.get_mut(id);
        let n = param.value.numel();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        // Missing grad is a zero grad.
        let grad: Vec<f64> = match param.value.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        debug_assert_eq!(grad.len(), n);
        let data = param.value.data_mut();
        for i in 0..n {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    fn store_with(values: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, data) in values {
            let t = Tensor::from_vec(vec![data.len()], data.clone()).unwrap();
            s.add(*name, ParamGroup::EncFfn, None, t);
        }
        s
    }

    #[test]
    fn masked_param_is_bit_identical_after_step() {
        let mut store = store_with(&[("a", vec![1.0, 2.0]), ("b", vec![3.0, 4.0])]);
        let a = store.find("a").unwrap();
        let b = store.find("b").unwrap();
        store.get_mut(a).value.accumulate_grad(&[0.5, 0.5]).unwrap();
        store.get_mut(b).value.accumulate_grad(&[0.5, 0.5]).unwrap();
        let mut state = OptimState::new(&store);
        let mask = TrainMask::from_fn(&store, |id| id == a);
        adam_step(&mut store, &mut state, &mask, 0.1).unwrap();
        assert_eq!(store.get(b).value.data(), &[3.0, 4.0]);
        assert_ne!(store.get(a).value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn first_step_is_signlike_under_bias_correction() {
        // With bias correction the first update is -lr * g / (|g| + eps')
        let mut store = store_with(&[("a", vec![0.0, 0.0])]);
        let a = store.find("a").unwrap();
        store
            .get_mut(a)
            .value
            .accumulate_grad(&[0.25, -3.0])
            .unwrap();
        let mut state = OptimState::new(&store);
        let mask = TrainMask::all(&store);
        adam_step(&mut store, &mut state, &mask, 0.01).unwrap();
        let got = store.get(a).value.data();
        assert!((got[0] - (-0.01)).abs() < 1e-6, "got {}", got[0]);
        assert!((got[1] - 0.01).abs() < 1e-6, "got {}", got[1]);
    }

    #[test]
    fn zero_grad_from_fresh_state_changes_nothing() {
        let mut store = store_with(&[("a", vec![7.0, -7.0])]);
        let mut state = OptimState::new(&store);
        let mask = TrainMask::all(&store);
        adam_step(&mut store, &mut state, &mask, 0.1).unwrap();
        assert_eq!(store.get(store.find("a").unwrap()).value.data(), &[7.0, -7.0]);
    }
}
