//! Representation diagnostics: linear CKA and the linear-probe harness.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader};
use crate::dataio::{Dataset, Record, Split};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Model, RepresentationHead};
use crate::optimizer::OptimizerConfig;
use crate::protocol::{Example, TaskStream};
use crate::rng::RngState;

const SNAPSHOT_MAGIC: &[u8; 4] = b"SLCP";
const SNAPSHOT_VERSION: u32 = 1;

/// Features of a fixed probe set under one representation, row `i` always
/// being the same probe input across snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSnapshot {
    pub tag: String,
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub splits: Vec<Split>,
}

impl FeatureSnapshot {
    pub fn new(tag: impl Into<String>, features: Matrix, labels: Vec<u32>, splits: Vec<Split>) -> Result<Self> {
        if features.rows() < 2 {
            return Err(Error::InvalidConfig("snapshot needs at least two rows".into()));
        }
        if labels.len() != features.rows() || splits.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                found: labels.len().min(splits.len()),
            });
        }
        Ok(Self {
            tag: tag.into(),
            features,
            labels,
            splits,
        })
    }

    /// Unlabeled snapshot (every row labeled class 0, train split).
    pub fn unlabeled(tag: impl Into<String>, features: Matrix) -> Result<Self> {
        let n = features.rows();
        Self::new(tag, features, vec![0; n], vec![Split::Train; n])
    }

    pub fn from_dataset(tag: impl Into<String>, dataset: &Dataset) -> Result<Self> {
        let d = dataset.feature_dim();
        let data = dataset
            .records()
            .iter()
            .flat_map(|r| r.features.iter().map(|&v| f64::from(v)))
            .collect();
        let features = Matrix::new(dataset.len(), d, data)?;
        Self::new(
            tag,
            features,
            dataset.records().iter().map(|r| r.class_id).collect(),
            dataset.records().iter().map(|r| r.split).collect(),
        )
    }

    /// Features of every train and test example of `stream` under `head`,
    /// task by task, train before test.
    pub fn from_stream(tag: impl Into<String>, head: &RepresentationHead, stream: &TaskStream) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for task in stream.tasks() {
            for (split, examples) in [(Split::Train, &task.train), (Split::Test, &task.test)] {
                for e in examples {
                    rows.push(head.features(&e.x)?);
                    labels.push(e.y);
                    splits.push(split);
                }
            }
        }
        Self::new(tag, Matrix::from_rows(&rows)?, labels, splits)
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        let records = (0..self.rows())
            .map(|i| Record {
                class_id: self.labels[i],
                split: self.splits[i],
                features: self.features.row(i).iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Dataset::new(self.features.cols(), records)
    }

    /// `SLCP` layout: magic, version u32, tag length u32, UTF-8 tag, then a
    /// complete `SLCF` dataset stream.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        codec::put_u32(&mut buf, SNAPSHOT_VERSION);
        codec::put_u32(&mut buf, codec::to_u32(self.tag.len(), "tag length")?);
        buf.extend_from_slice(self.tag.as_bytes());
        buf.extend_from_slice(&self.to_dataset()?.to_bytes());
        Ok(buf)
    }

    /// Parses either an `SLCP` snapshot or a bare `SLCF` dataset, which gets
    /// `default_tag`.
    pub fn from_bytes(bytes: &[u8], default_tag: &str) -> Result<Self> {
        if bytes.starts_with(SNAPSHOT_MAGIC) {
            let mut r = ByteReader::new(bytes);
            r.magic(SNAPSHOT_MAGIC)?;
            let version = r.u32()?;
            if version != SNAPSHOT_VERSION {
                return Err(Error::BadFormat(format!("unsupported snapshot version {version}")));
            }
            let len = r.u32()? as usize;
            let tag = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::BadFormat("snapshot tag is not UTF-8".into()))?
                .to_owned();
            let rest = r.take(r.remaining())?;
            let ds = Dataset::from_bytes(rest)?;
            Self::from_dataset(tag, &ds)
        } else {
            Self::from_dataset(default_tag, &Dataset::from_bytes(bytes)?)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let tag = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(&std::fs::read(path)?, &tag)
    }
}

fn centered(m: &Matrix) -> Matrix {
    let (n, d) = (m.rows(), m.cols());
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (mu, v) in means.iter_mut().zip(m.row(i)) {
            *mu += v;
        }
    }
    for mu in means.iter_mut() {
        *mu /= n as f64;
    }
    let mut c = m.clone();
    for i in 0..n {
        for (v, mu) in c.row_mut(i).iter_mut().zip(&means) {
            *v -= mu;
        }
    }
    c
}

/// Linear CKA between two snapshots of the same probe inputs.
///
/// Uses the feature-space form `‖Ycᵀ Xc‖²_F / (‖Xcᵀ Xc‖_F ‖Ycᵀ Yc‖_F)` with
/// column-centered `Xc`, `Yc`, avoiding `n × n` Gram matrices.
pub fn cka(x: &FeatureSnapshot, y: &FeatureSnapshot) -> Result<f64> {
    cka_matrices(&x.features, &y.features)
}

pub fn cka_matrices(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            found: y.rows(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::InvalidConfig("cka needs at least two rows".into()));
    }
    let xc = centered(x);
    let yc = centered(y);
    let xt = xc.transpose();
    let yt = yc.transpose();
    let xx = xt.matmul(&xc)?.frobenius_norm();
    let yy = yt.matmul(&yc)?.frobenius_norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Degenerate("snapshot has zero variance"));
    }
    let yx = yt.matmul(&xc)?.frobenius_norm();
    Ok(yx * yx / (xx * yy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 50,
            batch_size: 128,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Trains a fresh linear classifier on the snapshot's train rows with plain
/// cross-entropy over all classes and returns accuracy on its test rows.
pub fn linear_probe(snapshot: &FeatureSnapshot, config: &ProbeConfig) -> Result<f64> {
    let train: Vec<Example> = (0..snapshot.rows())
        .filter(|&i| snapshot.splits[i] == Split::Train)
        .map(|i| Example {
            x: snapshot.features.row(i).to_vec(),
            y: snapshot.labels[i],
        })
        .collect();
    let test: Vec<Example> = (0..snapshot.rows())
        .filter(|&i| snapshot.splits[i] == Split::Test)
        .map(|i| Example {
            x: snapshot.features.row(i).to_vec(),
            y: snapshot.labels[i],
        })
        .collect();
    let classes: BTreeSet<u32> = train.iter().map(|e| e.y).collect();
    if classes.len() < 2 {
        return Err(Error::Degenerate("linear probe needs at least two classes"));
    }
    if test.is_empty() {
        return Err(Error::Empty("probe test rows"));
    }
    let optimizer = OptimizerConfig {
        lr_rep: config.lr,
        lr_cls: config.lr,
        momentum: config.momentum,
        weight_decay: 0.0,
        batch_size: config.batch_size,
        epochs_per_task: config.epochs,
    };
    let root = RngState::new(config.seed);
    let mut model = Model::new(RepresentationHead::Identity {
        dim: snapshot.features.cols(),
    });
    model.extend_classifier(&classes, &mut root.fork(0))?;
    let refs: Vec<&Example> = train.iter().collect();
    crate::protocol::train_examples(&mut model, &refs, &classes, optimizer, true, &mut root.fork(1))?;
    let correct = test
        .iter()
        .map(|e| model.predict(&e.x).map(|p| usize::from(p == Some(e.y))))
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / test.len() as f64)
}
