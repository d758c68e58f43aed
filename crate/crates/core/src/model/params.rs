use std::collections::HashMap;

use linearize_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Role of a parameter, which decides the training stage that may update it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Norm,
    Projection,
    Mlp,
    Head,
    FeatureMap,
    Gamma,
    LoraA,
    LoraB,
}

impl ParamKind {
    pub fn is_base(self) -> bool {
        matches!(
            self,
            ParamKind::Embedding
                | ParamKind::Norm
                | ParamKind::Projection
                | ParamKind::Mlp
                | ParamKind::Head
        )
    }

    pub fn is_attention_transfer(self) -> bool {
        matches!(self, ParamKind::FeatureMap | ParamKind::Gamma)
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, ParamKind::LoraA | ParamKind::LoraB)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<f32>,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<f32>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, kind, tensor });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Tensor by name; panics on names the model itself never created.
    pub fn get(&self, name: &str) -> &Tensor<f32> {
        &self.params[self.expect(name)].tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<f32> {
        let id = self.expect(name);
        &mut self.params[id].tensor
    }

    fn expect(&self, name: &str) -> usize {
        self.id(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn param(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<f32> {
        &mut self.params[id].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Element count over parameters whose kind satisfies `pred`.
    pub fn count(&self, pred: impl Fn(ParamKind) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(p.kind))
            .map(|p| p.tensor.numel())
            .sum()
    }
}
