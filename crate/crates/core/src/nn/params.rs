use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, Scalar, Tensor, Var};

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// A named non-trainable tensor (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// Named parameter collection for one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
            buffer_index: HashMap::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        assert!(!self.buffer_index.contains_key(&name), "duplicate buffer `{name}`");
        self.buffer_index.insert(name.clone(), self.buffers.len());
        self.buffers.push(Buffer { name, value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffer_index.get(name).map(|&i| BufferId(i))
    }

    /// Record the parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(self.params[id.0].value.clone(), id)
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Add the parameter gradients recorded on `g` into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, g: &Graph<T>) {
        for (id, grad) in g.param_grads() {
            let Some(grad) = grad else { continue };
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .for_each(|(a, &v)| *a += v),
                slot => *slot = Some(grad.clone()),
            }
        }
    }

    /// Same names and values in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
            buffer_index: self.buffer_index.clone(),
        }
    }

    /// Overwrite values from `(name, tensor)` pairs; every parameter and
    /// buffer must be supplied exactly once with a matching shape.
    pub fn load_named(
        &mut self,
        params: &[(String, Tensor<T>)],
        buffers: &[(String, Tensor<T>)],
    ) -> Result<()> {
        fn apply<T: Scalar>(
            what: &str,
            slots: &mut [(&str, &mut Tensor<T>)],
            index: &HashMap<String, usize>,
            values: &[(String, Tensor<T>)],
        ) -> Result<()> {
            if values.len() != slots.len() {
                return Err(Error::Checkpoint(format!(
                    "expected {} {what}s, found {}",
                    slots.len(),
                    values.len()
                )));
            }
            let mut seen = vec![false; slots.len()];
            for (name, t) in values {
                let &i = index
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown {what} `{name}`")))?;
                if seen[i] {
                    return Err(Error::Checkpoint(format!("duplicate {what} `{name}`")));
                }
                seen[i] = true;
                if slots[i].1.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{what} `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        slots[i].1.shape()
                    )));
                }
            }
            for (name, t) in values {
                *slots[index[name]].1 = t.clone();
            }
            Ok(())
        }
        // Validate both tables before mutating either.
        let mut staged = self.clone();
        {
            let mut slots: Vec<_> = staged
                .params
                .iter_mut()
                .map(|p| (p.name.as_str(), &mut p.value))
                .collect();
            apply("parameter", &mut slots, &self.index, params)?;
        }
        {
            let mut slots: Vec<_> = staged
                .buffers
                .iter_mut()
                .map(|b| (b.name.as_str(), &mut b.value))
                .collect();
            apply("buffer", &mut slots, &self.buffer_index, buffers)?;
        }
        *self = staged;
        Ok(())
    }
}
