//! Named parameter storage and its binding onto computation graphs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Ordered, uniquely named trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn assign(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::Shape {
                    op: "assign",
                    detail: format!("{}: {:?} vs {:?}", self.names[i], old.shape(), new.shape()),
                });
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// `f64` copy of a [`ParamStore`] that graphs borrow from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamValues {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl ParamValues {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            shapes: store.tensors.iter().map(|t| t.shape().to_vec()).collect(),
            values: store.tensors.iter().map(Tensor::to_f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }
}

/// Lazily places parameters on a graph, once each.
pub struct Binder<'p> {
    values: &'p ParamValues,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Binder<'p> {
    pub fn new(values: &'p ParamValues, trainable: bool) -> Self {
        Self {
            values,
            vars: vec![None; values.len()],
            trainable,
        }
    }

    pub fn get(&mut self, g: &mut Graph<'p>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let v = g.borrowed(&self.values.shapes[id.0], &self.values.values[id.0], self.trainable)?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    /// Parameters placed on the graph so far.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

/// `y = x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn declare<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / libm::sqrt(fan_in as f64);
        Ok(Self {
            weight: store.push(format!("{name}.weight"), normal_tensor(vec![fan_in, fan_out], std, rng))?,
            bias: store.push(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?,
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, b: &mut Binder<'p>, x: Var) -> Result<Var> {
        let w = b.get(g, self.weight)?;
        let bias = b.get(g, self.bias)?;
        let xw = g.matmul(x, w)?;
        g.add(xw, bias)
    }
}

/// Affine terms applied after a row-wise layer normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn declare(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.push(format!("{name}.gain"), Tensor::new(vec![width], vec![1.0; width])?)?,
            bias: store.push(format!("{name}.bias"), Tensor::zeros(vec![width]))?,
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, b: &mut Binder<'p>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let gain = b.get(g, self.gain)?;
        let bias = b.get(g, self.bias)?;
        let scaled = g.mul(n, gain)?;
        g.add(scaled, bias)
    }
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Tensor::new(shape, data).expect("finite normal draws")
}
