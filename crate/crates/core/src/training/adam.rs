use super::TrainError;
use crate::autodiff::Tensor;
use crate::nmt::ParamSet;

pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moments mirroring a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: ParamSet,
    pub second: ParamSet,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self { first: params.zeros_like(), second: params.zeros_like(), step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter moves; a non-finite entry rejects the whole step.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptimizerState, h: AdamHyper) -> Result<(), TrainError> {
    if grads.len() != params.len() {
        return Err(TrainError::Invalid(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensor(i).shape() {
            return Err(TrainError::Invalid(format!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                params.name(i),
                g.shape(),
                params.tensor(i).shape()
            )));
        }
        if let Some(&value) = g.data().iter().find(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient { parameter: params.name(i).to_string(), value });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let m = state.first.tensor_mut(i).data_mut();
        for (m, &g) in m.iter_mut().zip(g.data()) {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        }
        let v = state.second.tensor_mut(i).data_mut();
        for (v, &g) in v.iter_mut().zip(g.data()) {
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        }
        let (m, v) = (state.first.tensor(i).data(), state.second.tensor(i).data());
        let p = params.tensor_mut(i).data_mut();
        for ((p, &m), &v) in p.iter_mut().zip(m).zip(v) {
            *p -= h.lr * (m / c1) / ((v / c2).sqrt() + h.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper { lr, beta1: 0.9, beta2: 0.98, epsilon: ADAM_EPSILON }
    }

    fn one(values: Vec<f64>) -> ParamSet {
        let n = values.len();
        ParamSet::new(vec![("w".into(), Tensor::new(vec![n], values).unwrap())])
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one(vec![1.0, -2.0, 0.5]);
        let mut s = OptimizerState::new(&p);
        let g = Tensor::vector(vec![3.0, -0.2, 1e-2]);
        adam_step(&mut p, &[g], &mut s, hyper(1e-3)).unwrap();
        let d: Vec<f64> = p.tensor(0).data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
        assert!((d[0] + 1e-3).abs() < 1e-5);
        assert!((d[1] - 1e-3).abs() < 1e-5);
        assert!((d[2] + 1e-3).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut p = one(vec![1.0]);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &[Tensor::vector(vec![2.0])], &mut s, hyper(0.1)).unwrap();
        let before = p.clone();
        let (m, v) = (s.first.tensor(0).data()[0], s.second.tensor(0).data()[0]);
        let mut s0 = s.clone();
        s0.first.tensor_mut(0).data_mut()[0] = 0.0;
        s0.second.tensor_mut(0).data_mut()[0] = 0.0;
        let mut p0 = before.clone();
        adam_step(&mut p0, &[Tensor::vector(vec![0.0])], &mut s0, hyper(0.1)).unwrap();
        assert_eq!(p0, before);
        adam_step(&mut p, &[Tensor::vector(vec![0.0])], &mut s, hyper(0.1)).unwrap();
        assert_eq!(s.first.tensor(0).data()[0], 0.9 * m);
        assert_eq!(s.second.tensor(0).data()[0], 0.98 * v);
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let mut p = one(vec![0.5, -1.0]);
        let mut s = OptimizerState::new(&p);
        let g1 = [0.2, -0.4];
        let g2 = [-0.1, 0.3];
        adam_step(&mut p, &[Tensor::vector(g1.to_vec())], &mut s, hyper(0.01)).unwrap();
        adam_step(&mut p, &[Tensor::vector(g2.to_vec())], &mut s, hyper(0.01)).unwrap();
        for (k, start) in [0.5f64, -1.0].into_iter().enumerate() {
            let m1 = 0.1 * g1[k];
            let v1 = 0.02 * g1[k] * g1[k];
            let x1 = start - 0.01 * (m1 / 0.1) / ((v1 / 0.02).sqrt() + 1e-8);
            let m2 = 0.9 * m1 + 0.1 * g2[k];
            let v2 = 0.98 * v1 + 0.02 * g2[k] * g2[k];
            let x2 = x1 - 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.98 * 0.98)).sqrt() + 1e-8);
            assert!((p.tensor(0).data()[k] - x2).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one(vec![1.0, 2.0]);
        let mut s = OptimizerState::new(&p);
        let err = adam_step(&mut p, &[Tensor::vector(vec![0.0, f64::NAN])], &mut s, hyper(0.1)).unwrap_err();
        match err {
            TrainError::NonFiniteGradient { parameter, .. } => assert_eq!(parameter, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.step, 0);
        assert_eq!(p.tensor(0).data(), &[1.0, 2.0]);
    }
}
