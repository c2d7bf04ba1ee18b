use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Const(f64),
}

/// Ordered, named model parameters.
///
/// A store built in counting mode records shapes but allocates nothing,
/// which is how the parameter count of large profiles is computed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    counting: bool,
    scalars: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn counting() -> Self {
        Self {
            counting: true,
            ..Self::default()
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut RngHandle) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter '{name}'");
        let n: usize = shape.iter().product();
        self.scalars += n;
        let t = if self.counting {
            Tensor::zeros(&[0])
        } else {
            match init {
                Init::Normal(std) => Tensor::randn(shape, rng).scale(std),
                Init::Const(c) => Tensor::full(shape, c),
            }
        };
        let id = self.names.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.scalars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id_of(name).map(move |id| self.get_mut(id))
    }

    pub fn to_named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`, matching by `prefix + name`
    /// and checking shapes.
    pub fn load_named(&mut self, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let t = lookup
                .get(key.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter '{key}'")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter '{key}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = (*t).clone();
        }
        Ok(())
    }

    /// Places every parameter on `tape`, as gradient-tracked leaves when
    /// `trainable`, else as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Binding<'t> {
        Binding {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Parameters of one [`ParamStore`] recorded on a tape.
pub struct Binding<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Binding<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}
