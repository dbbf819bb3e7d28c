//! Dense networks, reverse-mode gradients and the Adam optimizer.

pub mod adam;
pub mod mlp;
pub mod tape;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{
    decode_datadriven, encode, encode_batch, Activation, MlpConfig, NetParams, OutputHead,
};
pub use tape::{Gradients, Tape, Var};

/// Named tensors in a fixed storage order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl ParamSet {
    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, tensor: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor on the tape, returning vars in slot order.
    /// Slots with `trainable[i] == false` become constants.
    pub fn register(&self, tape: &mut Tape, trainable: &[bool]) -> Vec<Var> {
        self.tensors
            .iter()
            .zip(&self.names)
            .zip(trainable)
            .map(|((t, name), &train)| {
                if train {
                    tape.param(name.clone(), t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}
