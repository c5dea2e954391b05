use super::params::{GradTable, ParamSet};
use super::tensor::{Float, Tensor};
use crate::error::{ElmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..Default::default()
        }
    }
}

/// First and second moments aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || -> Vec<Tensor<T>> {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry
/// (frozen ones) are left untouched. Moments and arithmetic are kept in `T`.
pub fn adam_step<T: Float>(
    params: &mut ParamSet<T>,
    grads: &GradTable<T>,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(ElmError::config(
            "optimizer state does not match parameter set",
        ));
    }
    for (name, g) in grads.iter() {
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(ElmError::numeric(
                name,
                format!("non-finite gradient at flat index {i}"),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::cast_from(hyper.beta1);
    let b2 = T::cast_from(hyper.beta2);
    let one = T::one();
    let bc1 = T::cast_from(1.0 - hyper.beta1.powi(t));
    let bc2 = T::cast_from(1.0 - hyper.beta2.powi(t));
    let lr = T::cast_from(hyper.lr);
    let eps = T::cast_from(hyper.eps);
    for (name, g) in grads.iter() {
        let i = params
            .index_of(name)
            .ok_or_else(|| ElmError::config(format!("gradient for unknown parameter {name}")))?;
        let p = params.by_index_mut(i);
        if !p.trainable {
            continue;
        }
        if p.value.shape() != g.shape() || state.m[i].shape() != g.shape() {
            return Err(ElmError::config(format!(
                "gradient shape mismatch for {name}"
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gj), mj), vj) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = b1 * *mj + (one - b1) * gj;
            *vj = b2 * *vj + (one - b2) * gj * gj;
            let mhat = *mj / bc1;
            let vhat = *vj / bc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut s = ParamSet::new();
        s.push("x", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_bit_identical() {
        let mut p = scalar_set(0.37);
        let mut st = AdamState::new(&p);
        let g = GradTable::from_aligned(&p, vec![Tensor::zeros(&[1])]);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, &AdamHyper::default()).unwrap();
        }
        assert_eq!(p.value(0)[0].to_bits(), 0.37f64.to_bits());
        assert_eq!(st.m[0].data()[0], 0.0);
        assert_eq!(st.v[0].data()[0], 0.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps).
        let mut p = scalar_set(1.0);
        let mut st = AdamState::new(&p);
        let g = GradTable::from_aligned(&p, vec![Tensor::from_f64(&[1], &[1.0]).unwrap()]);
        adam_step(&mut p, &g, &mut st, &AdamHyper::with_lr(0.1)).unwrap();
        let moved = 1.0 - p.value(0)[0];
        assert!((moved - 0.1 / (1.0 + 1e-8)).abs() < 1e-12, "moved {moved}");
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut p = scalar_set(2.0);
        p.push("y", Tensor::from_f64(&[1], &[3.0]).unwrap())
            .unwrap();
        let g_all = vec![
            Tensor::from_f64(&[1], &[1.0]).unwrap(),
            Tensor::from_f64(&[1], &[1.0]).unwrap(),
        ];
        p.train_only(&["y"]);
        let g = GradTable::from_aligned(&p, g_all);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamHyper::default()).unwrap();
        assert_eq!(p.value(0)[0], 2.0);
        assert_ne!(p.value(1)[0], 3.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_set(2.0);
        let g =
            GradTable::from_aligned(&p, vec![Tensor::from_f64(&[1], &[f64::INFINITY]).unwrap()]);
        let mut st = AdamState::new(&p);
        match adam_step(&mut p, &g, &mut st, &AdamHyper::default()) {
            Err(ElmError::Numeric { layer, .. }) => assert_eq!(layer, "x"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
