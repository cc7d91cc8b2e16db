use super::tape::ParamStore;
use super::{Real, Tensor};
use crate::error::{AecError, Result};

/// Adam with bias correction. Moments are kept per parameter, in store
/// order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_betas(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .params
                .iter()
                .map(|p| vec![T::zero(); p.value.numel()])
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.params.len() != self.m.len() {
            return Err(AecError::Autodiff(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.params.len()
            )));
        }
        if store.params.iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(AecError::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for ((p, m), v) in store.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, g), mi), vi) in p.value.data.iter_mut().zip(&mut p.grad).zip(m).zip(v) {
                *mi = b1 * *mi + (T::one() - b1) * *g;
                *vi = b2 * *vi + (T::one() - b2) * *g * *g;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
                *g = T::zero();
            }
        }
        Ok(())
    }

    /// Moment tensors keyed as `adam/m/{name}` and `adam/v/{name}`, plus
    /// the step count under `adam/step`.
    pub fn state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "adam/step".to_string(),
            Tensor::scalar(T::of(self.step as f64)),
        )];
        for ((p, m), v) in store.params.iter().zip(&self.m).zip(&self.v) {
            out.push((
                format!("adam/m/{}", p.name),
                Tensor { shape: p.value.shape.clone(), data: m.clone() },
            ));
            out.push((
                format!("adam/v/{}", p.name),
                Tensor { shape: p.value.shape.clone(), data: v.clone() },
            ));
        }
        out
    }

    /// Restores moments written by [`Adam::state`].
    pub fn load_state(
        &mut self,
        store: &ParamStore<T>,
        lookup: impl Fn(&str) -> Option<Tensor<T>>,
    ) -> Result<()> {
        let step = lookup("adam/step")
            .ok_or_else(|| AecError::Parse("checkpoint lacks adam/step".into()))?;
        self.step = step.data[0].f64() as u64;
        for (i, p) in store.params.iter().enumerate() {
            for (kind, dst) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("adam/{kind}/{}", p.name);
                let t = lookup(&key)
                    .ok_or_else(|| AecError::Parse(format!("checkpoint lacks {key}")))?;
                if t.data.len() != dst.len() {
                    return Err(AecError::Parse(format!("{key} has wrong size")));
                }
                *dst = t.data;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(1.0));
        store.get_mut(id).grad[0] = 1.0;
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.1).unwrap();
        let w = store.get(id).value.data[0];
        assert!((w - 0.9).abs() < 1e-6, "{w}");
        assert_eq!(store.get(id).grad[0], 0.0);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::scalar(1.0));
        store.get_mut(id).grad[0] = f32::NAN;
        let mut adam = Adam::new(&store);
        assert!(adam.step(&mut store, 0.1).is_err());
        assert_eq!(store.get(id).value.data[0], 1.0);
    }
}
