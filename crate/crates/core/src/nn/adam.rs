use super::{NnError, Scalar, Tensor};

/// Moment estimates and hyperparameters of an Adam optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction (Kingma & Ba defaults).
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let zeros: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            state: AdamState {
                step: 0,
                second: zeros.clone(),
                first: zeros,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        }
    }

    /// One update of `params` in place. `names` is used for error messages.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        names: &[String],
        lr: f64,
    ) -> Result<(), NnError> {
        let st = &mut self.state;
        if params.len() != grads.len() || params.len() != st.first.len() {
            return Err(NnError::Shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                st.first.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(NnError::Invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != st.first[i].shape() {
                return Err(NnError::Shape(format!(
                    "adam: parameter {} has shape {:?}, gradient {:?}",
                    names.get(i).map(String::as_str).unwrap_or("?"),
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(NnError::NonFinite(format!(
                    "gradient of parameter {}",
                    names.get(i).map(String::as_str).unwrap_or("?")
                )));
            }
        }
        st.step += 1;
        let t = st.step as i32;
        let (b1, b2) = (st.beta1, st.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = st.first[i].data_mut();
            let v = st.second[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk.as_f64();
                let mk = b1 * m[k].as_f64() + (1.0 - b1) * gk;
                let vk = b2 * v[k].as_f64() + (1.0 - b2) * gk * gk;
                m[k] = T::from_f64(mk);
                v[k] = T::from_f64(vk);
                let upd = lr * (mk / c1) / ((vk / c2).sqrt() + st.eps);
                *w = T::from_f64(w.as_f64() - upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut adam = Adam::new(p.iter().map(|t| t.shape()));
        adam.step(&mut p, &[Tensor::zeros(&[3])], &names(1), 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::zeros(&[3])];
        let g = Tensor::new(&[3], vec![5.0, -0.3, 100.0]).unwrap();
        let mut adam = Adam::new(p.iter().map(|t| t.shape()));
        adam.step(&mut p, &[g.clone()], &names(1), 0.01).unwrap();
        for (w, gk) in p[0].data().iter().zip(g.data()) {
            assert!((w + 0.01 * gk.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut p = vec![Tensor::<f64>::zeros(&[1])];
        let mut adam = Adam::new(p.iter().map(|t| t.shape()));
        for _ in 0..100 {
            let w = p[0].data()[0];
            let g = Tensor::new(&[1], vec![2.0 * (w - 3.0)]).unwrap();
            adam.step(&mut p, &[g], &names(1), 0.1).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 0.1, "{}", p[0].data()[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut adam = Adam::new(p.iter().map(|t| t.shape()));
        let g = Tensor::new(&[2], vec![f32::NAN, 0.0]).unwrap();
        let err = adam.step(&mut p, &[g], &["conv1.weight".into()], 0.1).unwrap_err();
        assert!(err.to_string().contains("conv1.weight"));
    }

    proptest::proptest! {
        #[test]
        fn zero_lr_is_identity(vals in proptest::collection::vec(-10.0f64..10.0, 4), grads in proptest::collection::vec(-10.0f64..10.0, 4)) {
            let mut p = vec![Tensor::new(&[4], vals.clone()).unwrap()];
            let mut adam = Adam::new(p.iter().map(|t| t.shape()));
            adam.step(&mut p, &[Tensor::new(&[4], grads).unwrap()], &names(1), 0.0).unwrap();
            proptest::prop_assert_eq!(p[0].data(), &vals[..]);
        }
    }
}
