//! Model checkpoints as a self-describing JSON document of named tensors.
//!
//! ```text
//! {
//!   "format": "cilicia-checkpoint", "version": 1, "scalar": "f64",
//!   "backbone_digest": "<hex>", "task_ids": [..], "dropout": [..],
//!   "tensors": [ { "name": "head.3.fc.weight", "shape": [512, 128], "data": [..] }, .. ]
//! }
//! ```
//!
//! Tensor names: `adapter.{weight,bias}` and, for each task `t`,
//! `head.t.fc.{weight,bias}`, `head.t.bn.{gamma,beta,running_mean,running_var}`,
//! `head.t.out.{weight,bias}`. Weights are stored out×in, row-major. Values are
//! written as shortest round-trip decimals, so f64 parameters reload bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroupModel, TaskHead};
use crate::nn::{BatchNormLayer, DenseLayer, DropoutLayer};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const FORMAT: &str = "cilicia-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub backbone_digest: String,
    pub task_ids: Vec<usize>,
    pub dropout: Vec<f64>,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub tensors: Vec<NamedTensor>,
}

fn vector<F: Scalar>(name: String, v: &[F]) -> NamedTensor {
    NamedTensor { name, shape: vec![v.len()], data: v.iter().map(|x| x.widen()).collect() }
}

fn matrix<F: Scalar>(name: String, m: &Matrix<F>) -> NamedTensor {
    NamedTensor { name, shape: vec![m.rows(), m.cols()], data: m.as_slice().iter().map(|x| x.widen()).collect() }
}

fn push_dense<F: Scalar>(out: &mut Vec<NamedTensor>, prefix: &str, layer: &DenseLayer<F>) {
    out.push(matrix(format!("{prefix}.weight"), &layer.weights));
    out.push(vector(format!("{prefix}.bias"), &layer.bias));
}

impl Checkpoint {
    pub fn from_model<F: Scalar>(model: &GroupModel<F>) -> Self {
        let mut tensors = Vec::new();
        if let Some(a) = &model.adapter {
            push_dense(&mut tensors, "adapter", a);
        }
        for h in &model.heads {
            let p = format!("head.{}", h.task);
            push_dense(&mut tensors, &format!("{p}.fc"), &h.fc);
            tensors.push(vector(format!("{p}.bn.gamma"), &h.bn.gamma));
            tensors.push(vector(format!("{p}.bn.beta"), &h.bn.beta));
            tensors.push(vector(format!("{p}.bn.running_mean"), &h.bn.running_mean));
            tensors.push(vector(format!("{p}.bn.running_var"), &h.bn.running_var));
            push_dense(&mut tensors, &format!("{p}.out"), &h.out);
        }
        let (eps, mom) = model.heads.first().map_or((0.0, 0.0), |h| (h.bn.epsilon.widen(), h.bn.momentum.widen()));
        Self {
            format: FORMAT.into(),
            version: VERSION,
            scalar: F::NAME.into(),
            backbone_digest: model.backbone_digest.clone(),
            task_ids: model.task_ids.clone(),
            dropout: model.heads.iter().map(|h| h.drop.rate).collect(),
            bn_epsilon: eps,
            bn_momentum: mom,
            tensors,
        }
    }

    pub fn to_model<F: Scalar>(&self) -> Result<GroupModel<F>> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::config(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        if self.dropout.len() != self.task_ids.len() {
            return Err(Error::config("checkpoint dropout list does not match its tasks"));
        }
        let by_name: HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let get = |name: &str| -> Result<&NamedTensor> {
            by_name.get(name).copied().ok_or_else(|| Error::config(format!("checkpoint lacks tensor '{name}'")))
        };
        let vec_of = |name: &str| -> Result<Vec<F>> {
            let t = get(name)?;
            if t.shape.len() != 1 || t.shape[0] != t.data.len() {
                return Err(Error::shape(format!("tensor '{name}' is not a vector")));
            }
            Ok(t.data.iter().map(|&v| F::lit(v)).collect())
        };
        let mat_of = |name: &str| -> Result<Matrix<F>> {
            let t = get(name)?;
            if t.shape.len() != 2 {
                return Err(Error::shape(format!("tensor '{name}' is not a matrix")));
            }
            Matrix::new(t.shape[0], t.shape[1], t.data.iter().map(|&v| F::lit(v)).collect())
        };
        let dense = |prefix: &str| -> Result<DenseLayer<F>> {
            DenseLayer::new(mat_of(&format!("{prefix}.weight"))?, vec_of(&format!("{prefix}.bias"))?)
        };
        let adapter = if by_name.contains_key("adapter.weight") { Some(dense("adapter")?) } else { None };
        let mut heads = Vec::with_capacity(self.task_ids.len());
        for (&task, &rate) in self.task_ids.iter().zip(&self.dropout) {
            let p = format!("head.{task}");
            let fc = dense(&format!("{p}.fc"))?;
            let mut bn = BatchNormLayer::with_constants(fc.out_dim(), self.bn_epsilon, self.bn_momentum)?;
            bn.gamma = vec_of(&format!("{p}.bn.gamma"))?;
            bn.beta = vec_of(&format!("{p}.bn.beta"))?;
            bn.running_mean = vec_of(&format!("{p}.bn.running_mean"))?;
            bn.running_var = vec_of(&format!("{p}.bn.running_var"))?;
            if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var].iter().any(|v| v.len() != fc.out_dim()) {
                return Err(Error::shape(format!("batch-norm tensors of head {task} do not match its width")));
            }
            let out = dense(&format!("{p}.out"))?;
            if out.in_dim() != fc.out_dim() {
                return Err(Error::shape(format!("output layer of head {task} does not match its hidden width")));
            }
            heads.push(TaskHead { task, fc, bn, drop: DropoutLayer::new(rate)?, out });
        }
        Ok(GroupModel { task_ids: self.task_ids.clone(), heads, adapter, backbone_digest: self.backbone_digest.clone() })
    }
}

pub fn save_model<F: Scalar>(model: &GroupModel<F>, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&Checkpoint::from_model(model)).expect("checkpoint serializes");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_model<F: Scalar>(path: &Path) -> Result<GroupModel<F>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: bad checkpoint: {e}", path.display())))?;
    ckpt.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn file_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = HeadShape { in_dim: 5, hidden: 7, dropout: 0.5, shared_adapter: true };
        let mut model = GroupModel::<f64>::new(vec![3, 1], &[2, 3], &shape, "abc".into(), &mut rng).unwrap();
        model.heads[0].bn.running_var[2] = 0.123456789012345;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&model, &path).unwrap();
        let back: GroupModel<f64> = load_model(&path).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = HeadShape { in_dim: 2, hidden: 3, dropout: 0.0, shared_adapter: false };
        let model = GroupModel::<f64>::new(vec![0], &[2], &shape, "d".into(), &mut rng).unwrap();
        let mut ckpt = Checkpoint::from_model(&model);
        ckpt.tensors.retain(|t| t.name != "head.0.bn.beta");
        let err = ckpt.to_model::<f64>().unwrap_err();
        assert!(err.to_string().contains("head.0.bn.beta"));
    }
}
