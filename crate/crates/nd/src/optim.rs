use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::Gradients;

/// Dense per-parameter gradient accumulator.
#[derive(Clone, Debug)]
pub struct GradBuffer<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Real> GradBuffer<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        GradBuffer {
            grads: store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect(),
        }
    }

    pub fn accumulate(&mut self, g: &Gradients<T>) {
        for (id, t) in g.params() {
            for (dst, &src) in self.grads[id.index()].iter_mut().zip(t.data()) {
                *dst += src;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(T::of(max_norm / norm));
        }
        norm
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || -> Vec<Vec<T>> {
            store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect()
        };
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                w[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, AdamConfig::default());
        for _ in 0..500 {
            let tape = Tape::with_params(&store);
            let x = tape.param(id);
            let loss = tape.sum(tape.mul(x, x).unwrap());
            let g = tape.backward(loss).unwrap();
            let mut buf = GradBuffer::zeros_like(&store);
            buf.accumulate(&g);
            drop(tape);
            opt.update(&mut store, &buf, 0.05);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::vector(vec![0.0, 0.0]));
        let mut buf = GradBuffer::zeros_like(&store);
        buf.grads[0] = vec![30.0, 40.0];
        assert_eq!(buf.clip_global_norm(5.0), 50.0);
        assert!((buf.global_norm() - 5.0).abs() < 1e-12);
    }
}
