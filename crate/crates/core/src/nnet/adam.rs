use super::params::Parameters;
use super::tensor::Scalar;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Parameters<T>,
    pub v: Parameters<T>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Parameters<T>, lr: f64) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update with bias-corrected moments.
pub fn adam_step<T: Scalar>(params: &mut Parameters<T>, grads: &Parameters<T>, state: &mut AdamState<T>) -> Result<()> {
    if params.tensors.len() != grads.tensors.len() || params.tensors.len() != state.m.tensors.len() {
        return Err(Error::ShapeMismatch("adam: parameter, gradient and state sets differ".into()));
    }
    for (p, g) in params.tensors.iter().zip(&grads.tensors) {
        if p.data.len() != g.data.len() {
            return Err(Error::ShapeMismatch(format!("adam: gradient for {} has the wrong size", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - state.beta1), T::of(1.0 - state.beta2));
    let c1 = T::of(1.0 / (1.0 - state.beta1.powi(t)));
    let c2 = T::of(1.0 / (1.0 - state.beta2.powi(t)));
    let lr = T::of(state.lr);
    let eps = T::of(state.eps);
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(state.m.tensors.iter_mut())
        .zip(state.v.tensors.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            let mhat = *mv * c1;
            let vhat = *vv * c2;
            *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::params::{ParamTensor, Section};

    fn scalar(v: f64) -> Parameters<f64> {
        Parameters { tensors: vec![ParamTensor { name: "w".into(), section: Section::Dense, shape: vec![1], data: vec![v] }] }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.3);
        let mut s = AdamState::new(&p, 1e-4);
        adam_step(&mut p, &scalar(0.0), &mut s).unwrap();
        assert_eq!(p.tensors[0].data[0], 0.3);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&p, 1e-4);
        adam_step(&mut p, &scalar(1.0), &mut s).unwrap();
        let want = -1e-4 / (1.0 + 1e-8);
        assert!((p.tensors[0].data[0] - want).abs() < 1e-18);
        assert!((p.tensors[0].data[0] + 9.99999e-5).abs() < 1e-10);
    }

    #[test]
    fn size_mismatch() {
        let mut p = scalar(0.0);
        let mut s = AdamState::new(&p, 1e-4);
        let mut g = scalar(0.0);
        g.tensors[0].data.push(1.0);
        assert!(adam_step(&mut p, &g, &mut s).is_err());
    }
}
