//! Single-file JSON checkpoints. Tensors are stored as IEEE-754 bit patterns
//! so a round trip is exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episodes::eval::DomainStats;
use crate::episodes::model::{Model, ModelConfig};
use crate::episodes::train::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::objectives::{Moments, OptimState};
use crate::tensor::Tensor;

const FORMAT: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    bits: Vec<u32>,
}

impl From<&Tensor> for TensorRecord {
    fn from(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), bits: t.data().iter().map(|v| v.to_bits()).collect() }
    }
}

impl TryFrom<&TensorRecord> for Tensor {
    type Error = Error;

    fn try_from(r: &TensorRecord) -> Result<Self> {
        Tensor::new(r.shape.clone(), r.bits.iter().map(|&b| f32::from_bits(b)).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MomentRecord {
    m: TensorRecord,
    v: TensorRecord,
    t: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimRecord {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: BTreeMap<String, MomentRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Record {
    format: u32,
    model: ModelConfig,
    seed: u64,
    train: Option<TrainConfig>,
    episodes_done: usize,
    params: BTreeMap<String, TensorRecord>,
    optimizer: OptimRecord,
    source_stats: Option<DomainStats>,
}

/// Everything written by training and read by testing.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: Option<TrainConfig>,
    pub source_stats: Option<DomainStats>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let m = &self.state.model;
        let o = &self.state.opt;
        let rec = Record {
            format: FORMAT,
            model: m.config.clone(),
            seed: m.seed,
            train: self.train.clone(),
            episodes_done: self.state.episodes_done,
            params: m.named().into_iter().map(|(n, t)| (n, t.into())).collect(),
            optimizer: OptimRecord {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                moments: o
                    .moments
                    .iter()
                    .map(|(n, mo)| (n.clone(), MomentRecord { m: (&mo.m).into(), v: (&mo.v).into(), t: mo.t }))
                    .collect(),
            },
            source_stats: self.source_stats.clone(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: Record = serde_json::from_str(s)?;
        if rec.format != FORMAT {
            return Err(Error::config(format!("unsupported checkpoint format {}", rec.format)));
        }
        let mut model = Model::new(rec.model, rec.seed)?;
        let mut seen = 0;
        for (name, t) in model.named_mut() {
            let r = rec.params.get(&name).ok_or_else(|| Error::config(format!("checkpoint lacks {name}")))?;
            let v = Tensor::try_from(r)?;
            t.expect_same_shape(&v)?;
            *t = v;
            seen += 1;
        }
        if seen != rec.params.len() {
            return Err(Error::config("checkpoint has parameters the model does not"));
        }
        let moments = rec
            .optimizer
            .moments
            .iter()
            .map(|(n, r)| Ok((n.clone(), Moments { m: (&r.m).try_into()?, v: (&r.v).try_into()?, t: r.t })))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let o = rec.optimizer;
        Ok(Self {
            state: TrainState {
                model,
                opt: OptimState { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, moments },
                episodes_done: rec.episodes_done,
                log: Vec::new(),
            },
            train: rec.train,
            source_stats: rec.source_stats,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_json(&s)
    }
}
