use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NdError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors. Names are unique; insertion order is kept so
/// optimizer state and serialization are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NdError::DuplicateParam(name));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.tensor(self.id(name)?))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Name → `{shape, data}` JSON object, keys sorted.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, StoredTensor> = self
            .params
            .iter()
            .map(|p| {
                (
                    p.name.as_str(),
                    StoredTensor {
                        shape: p.tensor.shape().to_vec(),
                        data: p.tensor.data().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("tensor map serializes")
    }

    /// Overwrites every parameter from a checkpoint map. The map must contain
    /// exactly the names in this store with matching shapes.
    pub fn load_json(&mut self, value: &serde_json::Value) -> Result<()> {
        let map: BTreeMap<String, StoredTensor> = serde_json::from_value(value.clone())?;
        if let Some(extra) = map.keys().find(|k| !self.index.contains_key(*k)) {
            return Err(NdError::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        for p in &mut self.params {
            let stored = map
                .get(&p.name)
                .ok_or_else(|| NdError::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if stored.shape != p.tensor.shape() {
                return Err(NdError::Checkpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    p.name,
                    stored.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::new(stored.shape.clone(), stored.data.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(1, 1), true).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(1, 1), true),
            Err(NdError::DuplicateParam(_))
        ));
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::zeros(2, 2), true).unwrap();
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(2, 3), true).unwrap();
        assert!(b.load_json(&a.to_json()).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut a = ParamStore::new();
        let vals = vec![0.1, -3.4028235e38, 1e-45, 0.333_333_34, -0.0, 7.0];
        a.insert("w", Tensor::new(vec![2, 3], vals).unwrap(), true).unwrap();
        let text = serde_json::to_string(&a.to_json()).unwrap();
        let mut b = a.clone();
        b.get_mut(ParamId(0)).tensor = Tensor::zeros(2, 3);
        b.load_json(&serde_json::from_str(&text).unwrap()).unwrap();
        let bits = |s: &ParamStore| s.tensor(ParamId(0)).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
