use rand::Rng;

use super::{DiffError, Init, ParamStore, Tape, Var};

/// Fully connected layer stored as `{name}/w` (`[inputs, outputs]`) and
/// `{name}/b` (`[outputs]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self { name: name.into(), inputs, outputs }
    }

    pub fn weight_name(&self) -> String {
        format!("{}/w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/b", self.name)
    }

    /// Fan-in uniform weights and zero bias.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), DiffError> {
        store.get_or_init(&self.weight_name(), &[self.inputs, self.outputs], Init::FanInUniform { fan_in: self.inputs }, rng)?;
        store.get_or_init(&self.bias_name(), &[self.outputs], Init::Constant(0.0), rng)?;
        Ok(())
    }

    /// Zero weights and the given bias values.
    pub fn init_zero_weight(&self, store: &mut ParamStore, bias: &[f64]) -> Result<(), DiffError> {
        assert_eq!(bias.len(), self.outputs, "bias length");
        store.insert(self.weight_name(), super::Tensor::zeros(&[self.inputs, self.outputs]))?;
        store.insert(self.bias_name(), super::Tensor::vector(bias.to_vec()))?;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        linear(tape, store, x, &self.name)
    }
}

/// `x W + b` using the parameters registered under `name`.
pub fn linear(tape: &mut Tape, store: &ParamStore, x: Var, name: &str) -> Result<Var, DiffError> {
    let w = tape.param(store, &format!("{name}/w"))?;
    let b = tape.param(store, &format!("{name}/b"))?;
    tape.affine(x, w, b)
}
