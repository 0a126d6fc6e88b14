//! Feed-forward softmax classifier trained with cross-entropy and Adam.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qnet::{argmax, softmax, Adam, Architecture, Head, Network};
use crate::synthgen::{stream_rng, PatientRecord};

use super::MISSING;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FfnnParams {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FfnnParams {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 100,
            seed: 0,
        }
    }
}

/// Per-feature min-max bounds fitted on the present training values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl MinMax {
    pub fn fit(records: &[PatientRecord], m: usize) -> Self {
        let mut lo = vec![f64::INFINITY; m];
        let mut hi = vec![f64::NEG_INFINITY; m];
        for r in records {
            for (j, v) in r.values.iter().enumerate() {
                if let Some(v) = v {
                    lo[j] = lo[j].min(*v);
                    hi[j] = hi[j].max(*v);
                }
            }
        }
        for j in 0..m {
            if !lo[j].is_finite() {
                (lo[j], hi[j]) = (0.0, 1.0);
            }
        }
        Self { lo, hi }
    }

    /// Maps present values to `[0, 1]` and missing ones to the sentinel.
    pub fn encode(&self, values: &[Option<f64>]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(j, v)| match v {
                None => MISSING,
                Some(x) => {
                    let span = self.hi[j] - self.lo[j];
                    if span > 0.0 {
                        (x - self.lo[j]) / span
                    } else {
                        0.0
                    }
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnnClassifier {
    pub network: Network,
    pub scaling: MinMax,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    architecture: Architecture,
    scaling: MinMax,
    params: Vec<f64>,
}

impl FfnnClassifier {
    /// Trains for `params.epochs`; with a validation set, keeps the epoch
    /// with the best validation accuracy (earliest on ties).
    pub fn fit(
        train: &[PatientRecord],
        validation: Option<&[PatientRecord]>,
        n_classes: usize,
        params: &FfnnParams,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("no training samples".into()));
        }
        if params.batch_size == 0 || !(params.learning_rate > 0.0) {
            return Err(Error::config("batch size and learning rate must be positive"));
        }
        let m = train[0].values.len();
        let scaling = MinMax::fit(train, m);
        let xs: Vec<Vec<f64>> = train.iter().map(|r| scaling.encode(&r.values)).collect();
        let mut arch = Architecture::new(m, n_classes, Head::Plain);
        arch.hidden.clone_from(&params.hidden);
        let mut net = Network::new(arch, params.seed)?;
        let mut opt = Adam::new(&net, params.learning_rate);
        let mut rng = stream_rng(params.seed, 0x66);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best: Option<(f64, Network)> = None;
        for _ in 0..params.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(params.batch_size) {
                let batch: Vec<f64> = chunk.iter().flat_map(|&i| xs[i].iter().copied()).collect();
                let (_, grads) = net.forward_backward(&batch, chunk.len(), |logits| {
                    let mut d = Vec::with_capacity(logits.len());
                    for (row, &i) in logits.chunks(n_classes).zip(chunk) {
                        let p = softmax(row);
                        d.extend(p.iter().enumerate().map(|(c, pc)| pc - f64::from(c == train[i].label)));
                    }
                    d
                })?;
                opt.step(&mut net, &grads)?;
            }
            if let Some(val) = validation {
                let model = Self {
                    network: net.clone(),
                    scaling: scaling.clone(),
                };
                let acc = model.accuracy(val)?;
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, net.clone()));
                }
            }
        }
        Ok(Self {
            network: best.map_or(net, |(_, n)| n),
            scaling,
        })
    }

    pub fn predict_proba(&self, record: &PatientRecord) -> Result<Vec<f64>> {
        Ok(softmax(&self.network.forward(&self.scaling.encode(&record.values))?))
    }

    pub fn predict(&self, record: &PatientRecord) -> Result<usize> {
        Ok(argmax(&self.predict_proba(record)?))
    }

    pub fn accuracy(&self, records: &[PatientRecord]) -> Result<f64> {
        if records.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for r in records {
            hits += usize::from(self.predict(r)? == r.label);
        }
        Ok(hits as f64 / records.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        let stored = Stored {
            architecture: self.network.architecture().clone(),
            scaling: self.scaling.clone(),
            params: (0..self.network.n_params()).map(|i| self.network.param(i)).collect(),
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: Stored = serde_json::from_str(text)?;
        let mut network = Network::zeroed(stored.architecture)?;
        if stored.params.len() != network.n_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a network of {}",
                stored.params.len(),
                network.n_params()
            )));
        }
        for (i, v) in stored.params.into_iter().enumerate() {
            network.set_param(i, v);
        }
        Ok(Self {
            network,
            scaling: stored.scaling,
        })
    }
}
