//! Named trainable parameters with accumulated gradients, plus the
//! versioned JSON checkpoint format.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::NumericError;
use crate::numeric::Matrix;

/// One trainable parameter. Gradients accumulate across backward passes
/// until `ParamSet::zero_grads` is called.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    /// Whether the optimizer applies weight decay to this parameter.
    /// Biases and edge weights are exempt.
    pub decay: bool,
}

/// Stable handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat, insertion-ordered parameter store. Iteration order is fixed so
/// optimizer updates and reductions are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix, decay: bool) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Matrix) -> Result<(), NumericError> {
        self.params[id.0].grad.add_assign(delta)
    }

    /// Sum of squared values over decayed parameters, for loss-report
    /// bookkeeping of the regularization the optimizer applies.
    pub fn decayed_squared_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.decay)
            .map(|p| p.value.sum_squares())
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Write all parameter values as a versioned JSON checkpoint.
    /// f64 values survive the round trip bit-exactly.
    pub fn save_checkpoint(&self, path: &Path) -> std::io::Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            params: self
                .params
                .iter()
                .map(|p| CheckpointParam {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    decay: p.decay,
                    data: p.value.data().to_vec(),
                })
                .collect(),
        };
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &file)?;
        w.flush()
    }

    /// Load checkpoint values into this set, matching parameters by name.
    /// Every stored parameter must exist here with the same shape.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), NumericError> {
        let reader = BufReader::new(std::fs::File::open(path).map_err(|e| {
            NumericError::Contract(format!("cannot open checkpoint {}: {e}", path.display()))
        })?);
        let file: CheckpointFile = serde_json::from_reader(reader)
            .map_err(|e| NumericError::Contract(format!("malformed checkpoint: {e}")))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(NumericError::Contract(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        for stored in file.params {
            let param = self
                .params
                .iter_mut()
                .find(|p| p.name == stored.name)
                .ok_or_else(|| {
                    NumericError::Contract(format!("checkpoint parameter {:?} not in model", stored.name))
                })?;
            if param.value.shape() != (stored.rows, stored.cols) {
                return Err(NumericError::Shape {
                    op: "load_checkpoint",
                    lhs: param.value.shape(),
                    rhs: (stored.rows, stored.cols),
                });
            }
            param.value = Matrix::from_vec(stored.rows, stored.cols, stored.data)?;
        }
        Ok(())
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    rows: usize,
    cols: usize,
    decay: bool,
    data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut set = ParamSet::new();
        // include awkward values: subnormals-adjacent, long mantissas
        let m = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0) * 1e-7);
        set.register("a", m, true);
        set.register("b", Matrix::from_fn(2, 2, |i, j| (i + j) as f64 / 3.0), false);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        set.save_checkpoint(&path).unwrap();

        let mut other = set.clone();
        for p in other.iter_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        other.load_checkpoint(&path).unwrap();

        for (p, q) in set.iter().zip(other.iter()) {
            for (a, b) in p.value.data().iter().zip(q.value.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let mut set = ParamSet::new();
        set.register("a", Matrix::zeros(2, 2), true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        set.save_checkpoint(&path).unwrap();

        let mut other = ParamSet::new();
        other.register("a", Matrix::zeros(3, 2), true);
        assert!(other.load_checkpoint(&path).is_err());
    }
}
