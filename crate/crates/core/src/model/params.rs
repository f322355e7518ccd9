//! Persistent parameter storage. Parameters live outside any tape as raw
//! buffers; each forward pass binds them onto a fresh tape as leaves, and
//! gradients are harvested back after the backward pass.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    /// Backbone parameters train with a reduced learning rate.
    pub backbone: bool,
}

/// Named parameter buffers in deterministic registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>, backbone: bool) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: shape/data mismatch"
        );
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        let numel = data.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            grad: vec![0.0; numel],
            backbone,
        });
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::InvalidArgument {
                op: "param",
                msg: format!("unknown parameter {name}"),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::InvalidArgument {
                op: "param",
                msg: format!("unknown parameter {name}"),
            }),
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn apply_grads(&mut self, grads: Vec<(usize, Vec<f64>)>) {
        for (idx, g) in grads {
            for (dst, src) in self.entries[idx].grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
    }
}

/// Per-forward binding of every parameter onto a tape. Binding is eager so
/// the context owns its tensors outright and can travel with the forward
/// output.
pub struct ParamCtx {
    tape: Tape,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ParamCtx {
    pub fn bind(tape: &Tape, store: &ParamStore, trainable: bool) -> Result<ParamCtx> {
        let tensors = store
            .entries
            .iter()
            .map(|e| tape.leaf(e.data.clone(), &e.shape, trainable))
            .collect::<Result<_>>()?;
        Ok(ParamCtx {
            tape: tape.clone(),
            index: store.index.clone(),
            tensors,
        })
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.index
            .get(name)
            .map(|&i| self.tensors[i].clone())
            .ok_or_else(|| Error::InvalidArgument {
                op: "param",
                msg: format!("unknown parameter {name}"),
            })
    }

    /// Gradients of every parameter after backward, as (store index,
    /// gradient) pairs ready for [`ParamStore::apply_grads`].
    pub fn collect_grads(&self) -> Vec<(usize, Vec<f64>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(idx, t)| (idx, t.grad()))
            .collect()
    }
}

/// Uniform init in [-limit, limit].
pub fn uniform_init(rng: &mut ChaCha8Rng, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Xavier/Glorot uniform for a [fan_in, fan_out] weight.
pub fn xavier_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_init(rng, fan_in * fan_out, limit)
}
