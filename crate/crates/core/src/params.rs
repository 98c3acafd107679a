use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-b, b]`, `b = sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered, named learnable tensors. Order is construction order and is stable for a
/// given topology, which is what checkpoints rely on.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add<R: Rng>(&mut self, name: String, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::KaimingUniform { fan_in } => {
                let bound = num_traits::Float::sqrt(6.0 / fan_in.max(1) as f64);
                Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
            }
        };
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Puts every parameter on the tape as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect()
    }

    /// Adds tape gradients of the bound leaves into the stored gradients.
    pub fn accumulate(&mut self, vars: &[Var], grads: &mut Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.take(v) {
                match &mut p.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    None => p.grad = Some(g),
                }
            }
        }
    }

    /// Replaces every value from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "checkpoint holds {} tensors, network expects {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(tensors) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    context: alloc::format!("checkpoint tensor `{name}` for `{}`", p.name),
                    expected: p.value.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.data().iter().all(|v| v.is_finite()))
    }
}
