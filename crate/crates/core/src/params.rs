//! Named, shaped weight storage shared by every network in the pipeline.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// What a tensor parameterizes; recorded in the serialized manifest.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TensorKind {
    Conv,
    Dense,
    Bias,
    Meta,
}

impl TensorKind {
    pub fn code(self) -> u8 {
        match self {
            TensorKind::Conv => 0,
            TensorKind::Dense => 1,
            TensorKind::Bias => 2,
            TensorKind::Meta => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => TensorKind::Conv,
            1 => TensorKind::Dense,
            2 => TensorKind::Bias,
            3 => TensorKind::Meta,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub modulatable: bool,
}

impl ParamTensor {
    pub fn new(
        name: impl Into<String>,
        data: Vec<f32>,
        shape: Vec<usize>,
        kind: TensorKind,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        ParamTensor {
            name: name.into(),
            data,
            shape,
            kind,
            modulatable: false,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, kind: TensorKind) -> Self {
        let n = shape.iter().product();
        ParamTensor::new(name, vec![0.0; n], shape, kind)
    }

    pub fn filled(name: impl Into<String>, v: f32, shape: Vec<usize>, kind: TensorKind) -> Self {
        let n = shape.iter().product();
        ParamTensor::new(name, vec![v; n], shape, kind)
    }

    /// Kaiming-style init: N(0, sqrt(2 / fan_in)) via Box-Muller.
    pub fn he_normal(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        kind: TensorKind,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..n).map(|_| (gaussian(rng) * std) as f32).collect();
        ParamTensor::new(name, data, shape, kind)
    }

    pub fn modulatable(mut self, flag: bool) -> Self {
        self.modulatable = flag;
        self
    }

    pub fn to_var(&self, tape: &mut Tape, requires_grad: bool) -> Result<Var> {
        tape.leaf(self.data.clone(), &self.shape, requires_grad)
    }
}

/// Standard normal draw (Box-Muller, deterministic per generator state).
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Index tensors by name, consuming a flat list (used when loading files).
pub fn index_by_name(tensors: Vec<ParamTensor>) -> std::collections::HashMap<String, ParamTensor> {
    tensors.into_iter().map(|t| (t.name.clone(), t)).collect()
}

pub fn take_tensor(
    map: &mut std::collections::HashMap<String, ParamTensor>,
    name: &str,
) -> Result<ParamTensor> {
    map.remove(name)
        .ok_or_else(|| Error::Parse(format!("model file is missing tensor {name}")))
}
