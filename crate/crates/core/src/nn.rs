//! Small building blocks shared by the attention stacks and the detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Bindings, Mode, ParamStore, Tape, Tensor, Var};

/// Everything a forward pass needs besides its inputs.
pub struct Forward<'t, 'a> {
    pub tape: &'t Tape,
    pub params: &'a Bindings<'t>,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
}

impl<'t, 'a> Forward<'t, 'a> {
    pub fn new(tape: &'t Tape, params: &'a Bindings<'t>, mode: Mode, seed: u64) -> Self {
        Forward {
            tape,
            params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval(tape: &'t Tape, params: &'a Bindings<'t>) -> Self {
        Self::new(tape, params, Mode::Eval, 0)
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        self.params.get(name)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub fn dropout(&mut self, x: Var<'t>, rate: f64) -> Result<Var<'t>> {
        x.dropout(rate, self.mode, &mut self.rng)
    }
}

/// Names of an affine map `x·W + b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
}

impl Linear {
    /// Registers `W ∈ [in × out]` drawn uniformly from `±1/√in`, and a zero bias.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = format!("{name}.w");
        store.insert(weight.clone(), Tensor::uniform(&[fan_in, fan_out], bound, rng));
        let bias = bias.then(|| {
            let b = format!("{name}.b");
            store.insert(b.clone(), Tensor::vector(vec![0.0; fan_out]));
            b
        });
        Linear { weight, bias }
    }

    pub fn forward<'t>(&self, fwd: &Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(fwd.param(&self.weight)?)?;
        match &self.bias {
            Some(b) => y.add(fwd.param(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(gamma.clone(), Tensor::vector(vec![1.0; dim]));
        store.insert(beta.clone(), Tensor::vector(vec![0.0; dim]));
        LayerNorm { gamma, beta, eps }
    }

    pub fn forward<'t>(&self, fwd: &Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(fwd.param(&self.gamma)?, fwd.param(&self.beta)?, self.eps)
    }
}
