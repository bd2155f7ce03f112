use super::{Gradients, Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_FORMAT: &str = "seqdesign-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk parameter snapshot.
///
/// JSON object with `format`, `version`, an opaque `meta` value (the model
/// configuration) and `params`, a list of `{name, shape, data}` entries with
/// row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub params: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Zero gradient buffers, one per parameter.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }

    /// Adds the parameter gradients of one backward pass into `acc`.
    pub fn accumulate(&self, tape: &Tape, grads: &Gradients, acc: &mut [Tensor]) {
        for (id, var) in tape.param_vars() {
            if let Some(g) = grads.get(var) {
                acc[id.0].add_assign(g);
            }
        }
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            meta,
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, v)| NamedTensor {
                    name: n.clone(),
                    shape: v.shape().to_vec(),
                    data: v.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a checkpoint; names, order and shapes must match.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<(), TensorError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported format {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.params.len() != self.values.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                ck.params.len()
            )));
        }
        let mut loaded = Vec::with_capacity(ck.params.len());
        for (i, p) in ck.params.iter().enumerate() {
            if p.name != self.names[i] || p.shape != self.values[i].shape() {
                return Err(TensorError::Checkpoint(format!(
                    "tensor {i}: expected {} {:?}, found {} {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    p.name,
                    p.shape
                )));
            }
            let t = Tensor::new(p.shape.clone(), p.data.clone())
                .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
            if !t.is_finite() {
                return Err(TensorError::Checkpoint(format!("{} has non-finite entries", p.name)));
            }
            loaded.push(t);
        }
        self.values = loaded;
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TensorError> {
        serde_json::from_str(text).map_err(|e| TensorError::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.1).sin() / 3.0));
        a.add("b", Tensor::from_vec(vec![1e-300, -7.25]));
        let json = a.to_checkpoint(serde_json::json!({"k": 1})).to_json();
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[2, 3]));
        b.add("b", Tensor::zeros(&[2]));
        b.load_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
        for id in a.ids() {
            assert_eq!(a.value(id), b.value(id));
        }
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2, 3]));
        let ck = a.to_checkpoint(serde_json::Value::Null);
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[3, 2]));
        assert!(b.load_checkpoint(&ck).is_err());
    }
}
