//! Feature dataset files, task splits and synthetic benchmarks.
//!
//! `SLCF` layout, all little-endian:
//!
//! ```text
//! magic        4 bytes  "SLCF"
//! version      u32      1
//! feature_dim  u32
//! record_count u64
//! records      record_count × (class_id u32, split_flag u8, feature_dim × f32)
//! ```
//!
//! `split_flag` is 0 for train and 1 for test.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader};
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const DATASET_MAGIC: &[u8; 4] = b"SLCF";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn flag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            f => Err(Error::BadFormat(format!("invalid split flag {f}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub class_id: u32,
    pub split: Split,
    pub features: Vec<f32>,
}

/// An in-memory feature dataset. Features stay `f32` as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_dim: usize,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(feature_dim: usize, records: Vec<Record>) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidConfig("feature dimension must be positive".into()));
        }
        if u32::try_from(feature_dim).is_err() {
            return Err(Error::InvalidConfig("feature dimension exceeds u32".into()));
        }
        for r in &records {
            if r.features.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    found: r.features.len(),
                });
            }
        }
        Ok(Self { feature_dim, records })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.class_id).collect()
    }

    /// Classes with at least one train and one test record.
    pub fn benchmark_classes(&self) -> BTreeSet<u32> {
        let train: BTreeSet<u32> = self.split_records(Split::Train).map(|r| r.class_id).collect();
        let test: BTreeSet<u32> = self.split_records(Split::Test).map(|r| r.class_id).collect();
        train.intersection(&test).copied().collect()
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.records.len() * (5 + 4 * self.feature_dim));
        buf.extend_from_slice(DATASET_MAGIC);
        codec::put_u32(&mut buf, DATASET_VERSION);
        codec::put_u32(&mut buf, self.feature_dim as u32);
        codec::put_u64(&mut buf, self.records.len() as u64);
        for r in &self.records {
            codec::put_u32(&mut buf, r.class_id);
            codec::put_u8(&mut buf, r.split.flag());
            for &v in &r.features {
                codec::put_f32(&mut buf, v);
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::BadFormat(format!("unsupported dataset version {version}")));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::BadFormat("feature dim is zero".into()));
        }
        let count = r.u64()?;
        let record_len = 5 + 4 * dim as u64;
        let declared = count
            .checked_mul(record_len)
            .ok_or_else(|| Error::BadFormat("record count overflows".into()))?;
        if declared != r.remaining() as u64 {
            return Err(Error::BadFormat(format!(
                "header declares {count} records ({declared} bytes) but {} bytes follow",
                r.remaining()
            )));
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let class_id = r.u32()?;
            let split = Split::from_flag(r.u8()?)?;
            let features = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            records.push(Record {
                class_id,
                split,
                features,
            });
        }
        r.finish()?;
        Ok(Self {
            feature_dim: dim,
            records,
        })
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

/// Ordered, pairwise-disjoint class sets, one per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub tasks: Vec<BTreeSet<u32>>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn all_classes(&self) -> BTreeSet<u32> {
        self.tasks.iter().flatten().copied().collect()
    }
}

/// Randomly permutes `classes` with `seed` and chunks them into `num_tasks`
/// consecutive groups; the first `|classes| mod num_tasks` groups get one extra class.
pub fn make_split(classes: &BTreeSet<u32>, num_tasks: usize, seed: u64) -> Result<SplitSpec> {
    if num_tasks == 0 {
        return Err(Error::InvalidConfig("number of tasks must be positive".into()));
    }
    if num_tasks > classes.len() {
        return Err(Error::InvalidConfig(format!(
            "{num_tasks} tasks requested but only {} classes available",
            classes.len()
        )));
    }
    let mut order: Vec<u32> = classes.iter().copied().collect();
    RngState::new(seed).shuffle(&mut order);
    let base = order.len() / num_tasks;
    let extra = order.len() % num_tasks;
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut start = 0;
    for t in 0..num_tasks {
        let size = base + usize::from(t < extra);
        tasks.push(order[start..start + size].iter().copied().collect());
        start += size;
    }
    Ok(SplitSpec { tasks, seed })
}

/// Parameters of a synthetic Gaussian benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

/// Unit-covariance Gaussian classes whose means lie at distance `separation`
/// from the origin along random directions.
///
/// Records are ordered by class, train before test within a class.
pub fn gen_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    let SyntheticConfig {
        num_classes,
        dim,
        train_per_class,
        test_per_class,
        separation,
        seed,
    } = *config;
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "separation must be non-negative, got {separation}"
        )));
    }
    if dim == 0 || num_classes == 0 {
        return Err(Error::InvalidConfig("classes and dimension must be positive".into()));
    }
    let num_classes = u32::try_from(num_classes).map_err(|_| Error::InvalidConfig("too many classes".into()))?;
    let root = RngState::new(seed);
    let mut dir_rng = root.fork(0);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| dir_rng.gaussian()).collect();
            let n = crate::linalg::norm(&v).max(f64::MIN_POSITIVE);
            for x in v.iter_mut() {
                *x *= separation / n;
            }
            v
        })
        .collect();
    let mut records = Vec::with_capacity(num_classes as usize * (train_per_class + test_per_class));
    for (c, mean) in (0..num_classes).zip(&means) {
        let mut rng = root.fork(1 + u64::from(c));
        for (split, n) in [(Split::Train, train_per_class), (Split::Test, test_per_class)] {
            for _ in 0..n {
                let features = mean.iter().map(|m| (m + rng.gaussian()) as f32).collect();
                records.push(Record {
                    class_id: c,
                    split,
                    features,
                });
            }
        }
    }
    Dataset::new(dim, records)
}
