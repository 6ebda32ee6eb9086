//! Small building blocks shared by the model modules.

use super::{glorot_uniform, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};
use crate::error::Result;

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine map `x·W + b` with `W: [fan_in×fan_out]`, `b: [1×fan_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `{prefix}.w` (Glorot-uniform) and, if `bias`, a zero
    /// `{prefix}.b`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}.w"), glorot_uniform(rng, fan_in, fan_out))?;
        let b = if bias {
            Some(store.add(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]))?)
        } else {
            None
        };
        Ok(Self { w, b, fan_in, fan_out })
    }

    /// Looks up an existing layer, checking shapes.
    pub fn bind(store: &ParamStore, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let w = store.expect(&format!("{prefix}.w"), &[fan_in, fan_out])?;
        let b = if bias {
            Some(store.expect(&format!("{prefix}.b"), &[1, fan_out])?)
        } else {
            None
        };
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(tape.param(store, self.w))?;
        match self.b {
            Some(b) => y.add_row(tape.param(store, b)),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.b.into_iter().chain([self.w]).collect()
    }
}

/// Inverted dropout: zeroes entries with probability `p` and rescales the
/// rest by `1/(1−p)`. Identity in eval mode or when `p == 0`.
pub fn dropout<'t>(x: Var<'t>, p: f64, mode: Mode, rng: &mut SeededRng) -> Result<Var<'t>> {
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let keep = 1.0 - p;
    let mut mask = Tensor::zeros(&shape);
    for m in mask.data_mut() {
        if rng.bernoulli(keep) {
            *m = 1.0 / keep;
        }
    }
    x.mul(x.tape().constant(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_bias_starts_at_zero() {
        let mut store = ParamStore::new();
        let lin = Linear::init(&mut store, "dec", 3, 2, true, &mut SeededRng::new(0)).unwrap();
        assert!(store.get(lin.b.unwrap()).data().iter().all(|&v| v == 0.0));
        assert!(Linear::bind(&store, "dec", 3, 2, true).is_ok());
        assert!(Linear::bind(&store, "dec", 2, 2, true).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let tape = Tape::new();
        let x = tape.input(Tensor::ones(&[3, 3]));
        let y = dropout(x, 0.5, Mode::Eval, &mut SeededRng::new(0)).unwrap();
        assert_eq!(*y.value(), Tensor::ones(&[3, 3]));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let tape = Tape::new();
        let x = tape.input(Tensor::ones(&[100, 100]));
        let y = dropout(x, 0.3, Mode::Train, &mut SeededRng::new(1)).unwrap();
        let mean = y.value().sum() / 1e4;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }
}
