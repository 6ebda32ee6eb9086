use crate::numerics::{Gradients, ParamStore, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that received a gradient on the tape;
    /// parameters the loss never touched, and frozen ones, are left as is.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let k = id.index();
            let m = self.m[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= self.lr * self.weight_decay * *pi;
                *pi -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_rows(&[vec![1.0, -2.0]])).unwrap();
        let tape = Tape::new();
        let w = tape.param(&store, id);
        let grads = tape.backward(w.square().sum()).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store, &grads);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-9 && (p[1] + 1.9).abs() < 1e-9, "{p:?}");
    }

    #[test]
    fn untouched_parameters_are_not_decayed() {
        let mut store = ParamStore::new();
        let used = store.add("a", Tensor::ones(&[1, 1])).unwrap();
        let unused = store.add("b", Tensor::ones(&[1, 1])).unwrap();
        let tape = Tape::new();
        let grads = tape.backward(tape.param(&store, used).sum()).unwrap();
        AdamW::new(0.1, 0.5).step(&mut store, &grads);
        assert_eq!(store.get(unused).data(), &[1.0]);
        assert!(store.get(used).data()[0] < 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_rows(&[vec![3.0, -1.0, 0.5]])).unwrap();
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..500 {
            let tape = Tape::new();
            let grads = tape.backward(tape.param(&store, id).square().sum()).unwrap();
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).max_abs() < 1e-2);
    }
}
