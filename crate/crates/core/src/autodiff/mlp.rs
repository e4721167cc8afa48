use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{squareplus, Tape, Var};
use super::{AutodiffError, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `(x + sqrt(x² + 4)) / 2`, smooth everywhere.
    Squareplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Squareplus => squareplus(x),
        }
    }

    fn apply_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Squareplus => tape.squareplus(x),
        }
    }
}

/// Fully connected stack. `widths` lists every layer's output width; the
/// activation follows every layer except the last unless `activate_last`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub activate_last: bool,
}

impl MlpSpec {
    pub fn output(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.input)
    }
}

/// An MLP bound to parameter slots in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// Registers fresh parameters named `{prefix}.{layer}.weight|bias`.
    /// Weights are drawn from U(−1/√fan_in, 1/√fan_in); biases start at zero.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut R,
    ) -> Result<Self, AutodiffError> {
        let mut layers = Vec::with_capacity(spec.widths.len());
        let mut fan_in = spec.input;
        for (i, &w) in spec.widths.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = Matrix::from_shape_fn((fan_in, w), |_| rng.random_range(-bound..bound));
            let wi = store.add(format!("{prefix}.{i}.weight"), weight)?;
            let bi = store.add(format!("{prefix}.{i}.bias"), Matrix::zeros((1, w)))?;
            layers.push((wi, bi));
            fan_in = w;
        }
        Ok(Self { spec, layers })
    }

    /// Binds to parameters that already exist in `store` (e.g. after loading).
    pub fn attach(store: &ParamStore, prefix: &str, spec: MlpSpec) -> Result<Self, AutodiffError> {
        let mut layers = Vec::with_capacity(spec.widths.len());
        let mut fan_in = spec.input;
        for (i, &w) in spec.widths.iter().enumerate() {
            let wi = store.require(&format!("{prefix}.{i}.weight"))?;
            let bi = store.require(&format!("{prefix}.{i}.bias"))?;
            if store.value(wi).dim() != (fan_in, w) || store.value(bi).dim() != (1, w) {
                return Err(AutodiffError::Config(format!(
                    "parameter shapes for {prefix}.{i} do not match the architecture"
                )));
            }
            layers.push((wi, bi));
            fan_in = w;
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// (weight, bias) parameter indices, first layer first.
    pub fn layers(&self) -> &[(usize, usize)] {
        &self.layers
    }

    fn check_input(&self, cols: usize) -> Result<(), AutodiffError> {
        if cols != self.spec.input {
            return Err(AutodiffError::Config(format!(
                "MLP expects {} input features, got {cols}",
                self.spec.input
            )));
        }
        Ok(())
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.spec.activate_last
    }

    /// Plain forward pass over a batch (rows are items).
    pub fn apply(&self, store: &ParamStore, input: &Matrix) -> Result<Matrix, AutodiffError> {
        self.check_input(input.ncols())?;
        let mut x = input.clone();
        for (l, &(wi, bi)) in self.layers.iter().enumerate() {
            let mut y = x.dot(store.value(wi));
            y += store.value(bi);
            if self.activated(l) {
                let act = self.spec.activation;
                y.mapv_inplace(|v| act.apply(v));
            }
            x = y;
        }
        Ok(x)
    }

    /// Recorded forward pass.
    pub fn apply_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
    ) -> Result<Var, AutodiffError> {
        self.check_input(tape.value(input).ncols())?;
        let mut x = input;
        for (l, &(wi, bi)) in self.layers.iter().enumerate() {
            let w = tape.param(store, wi);
            let b = tape.param(store, bi);
            let y = tape.matmul(x, w)?;
            let y = tape.add_bias(y, b)?;
            x = if self.activated(l) {
                self.spec.activation.apply_tape(tape, y)
            } else {
                y
            };
        }
        Ok(x)
    }
}
