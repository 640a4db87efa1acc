//! Per-class Gaussian feature statistics.
//!
//! After a task is learned, the features of each of its classes are reduced
//! to a count, a mean and either a full covariance or a per-coordinate
//! variance. Those statistics are what classifier alignment later samples
//! from; raw features are never kept.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader};
use crate::error::{Error, Result};
use crate::linalg::{factor_covariance, sample_mvn, Matrix, Vector};
use crate::rng::RngState;

/// Generated features per class used by alignment unless configured otherwise.
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 256;

const STATS_MAGIC: &[u8; 4] = b"SLCS";
const STATS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(Matrix),
    Diagonal(Vec<f64>),
}

impl Covariance {
    pub fn mode(&self) -> CovarianceMode {
        match self {
            Covariance::Full(_) => CovarianceMode::Full,
            Covariance::Diagonal(_) => CovarianceMode::Diagonal,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Covariance::Full(m) => m.diagonal(),
            Covariance::Diagonal(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class_id: u32,
    pub count: u64,
    pub mean: Vector,
    pub cov: Covariance,
}

impl ClassStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and unbiased covariance of one class's features.
///
/// Rows are reduced in lexicographic order of their values, so any
/// permutation of the same features gives bit-identical statistics. A single
/// feature yields a zero covariance.
pub fn collect_class_stats(class_id: u32, features: &[Vec<f64>], mode: CovarianceMode) -> Result<ClassStats> {
    let first = features.first().ok_or(Error::Empty("class features"))?;
    let d = first.len();
    if d == 0 {
        return Err(Error::Empty("feature vector"));
    }
    for f in features {
        if f.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: f.len(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class features"));
        }
    }
    let mut order: Vec<&Vec<f64>> = features.iter().collect();
    order.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let n = features.len();
    let mut mean = vec![0.0; d];
    for f in &order {
        for (m, v) in mean.iter_mut().zip(f.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = match mode {
        CovarianceMode::Diagonal => {
            let mut var = vec![0.0; d];
            if n > 1 {
                for f in &order {
                    for i in 0..d {
                        let c = f[i] - mean[i];
                        var[i] += c * c;
                    }
                }
                for v in var.iter_mut() {
                    *v /= denom;
                }
            }
            Covariance::Diagonal(var)
        }
        CovarianceMode::Full => {
            let mut cov = Matrix::zeros(d, d);
            if n > 1 {
                let mut centered = vec![0.0; d];
                for f in &order {
                    for i in 0..d {
                        centered[i] = f[i] - mean[i];
                    }
                    for i in 0..d {
                        let ci = centered[i];
                        let row = cov.row_mut(i);
                        for j in 0..=i {
                            row[j] += ci * centered[j];
                        }
                    }
                }
                for i in 0..d {
                    for j in 0..=i {
                        let v = cov.get(i, j) / denom;
                        cov.set(i, j, v);
                        cov.set(j, i, v);
                    }
                }
            }
            Covariance::Full(cov)
        }
    };
    Ok(ClassStats {
        class_id,
        count: n as u64,
        mean: Vector::from_vec(mean),
        cov,
    })
}

/// Draws `count` features from `N(mean, cov)` of one class.
pub fn sample_class_features(stats: &ClassStats, count: usize, rng: &mut RngState) -> Result<Vec<Vector>> {
    if count == 0 {
        return Err(Error::InvalidConfig("samples per class must be at least 1".into()));
    }
    match &stats.cov {
        Covariance::Full(cov) => {
            let (chol, _jitter) = factor_covariance(cov)?;
            sample_mvn(&stats.mean, &chol, count, rng)
        }
        Covariance::Diagonal(var) => {
            if var.iter().any(|v| *v < 0.0) {
                return Err(Error::NotPositiveDefinite { jitter: 0.0 });
            }
            let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
            Ok((0..count)
                .map(|_| {
                    Vector::from_vec(
                        stats
                            .mean
                            .iter()
                            .zip(&sd)
                            .map(|(m, s)| m + s * rng.gaussian())
                            .collect(),
                    )
                })
                .collect())
        }
    }
}

/// Statistics of every class seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsBank {
    dim: usize,
    mode: CovarianceMode,
    classes: BTreeMap<u32, ClassStats>,
}

impl StatsBank {
    pub fn new(dim: usize, mode: CovarianceMode) -> Self {
        Self {
            dim,
            mode,
            classes: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class_id: u32) -> Option<&ClassStats> {
        self.classes.get(&class_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassStats> {
        self.classes.values()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    /// Adds a class. Existing entries are never overwritten.
    pub fn insert(&mut self, stats: ClassStats) -> Result<()> {
        if stats.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: stats.dim(),
            });
        }
        if stats.cov.mode() != self.mode {
            return Err(Error::InvalidConfig("covariance mode differs from bank".into()));
        }
        if self.classes.contains_key(&stats.class_id) {
            return Err(Error::ClassCollision(stats.class_id));
        }
        self.classes.insert(stats.class_id, stats);
        Ok(())
    }

    /// Collects and inserts statistics for several classes in parallel.
    pub fn collect(&mut self, features_by_class: &BTreeMap<u32, Vec<Vec<f64>>>) -> Result<()> {
        let mode = self.mode;
        let collected = features_by_class
            .par_iter()
            .map(|(&c, feats)| collect_class_stats(c, feats, mode))
            .collect::<Result<Vec<_>>>()?;
        for s in collected {
            self.insert(s)?;
        }
        Ok(())
    }

    pub fn storage_size(&self) -> usize {
        stats_storage_size(self)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STATS_MAGIC);
        codec::put_u32(&mut buf, STATS_VERSION);
        codec::put_u8(
            &mut buf,
            match self.mode {
                CovarianceMode::Full => 0,
                CovarianceMode::Diagonal => 1,
            },
        );
        codec::put_u32(&mut buf, codec::to_u32(self.dim, "feature dim")?);
        codec::put_u32(&mut buf, codec::to_u32(self.classes.len(), "class count")?);
        for s in self.classes.values() {
            codec::put_u32(&mut buf, s.class_id);
            codec::put_u64(&mut buf, s.count);
            codec::put_f64s_as_f32(&mut buf, &s.mean);
            match &s.cov {
                Covariance::Full(m) => codec::put_f64s_as_f32(&mut buf, m.data()),
                Covariance::Diagonal(v) => codec::put_f64s_as_f32(&mut buf, v),
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(STATS_MAGIC)?;
        let version = r.u32()?;
        if version != STATS_VERSION {
            return Err(Error::BadFormat(format!("unsupported stats version {version}")));
        }
        let mode = match r.u8()? {
            0 => CovarianceMode::Full,
            1 => CovarianceMode::Diagonal,
            m => return Err(Error::BadFormat(format!("unknown covariance mode {m}"))),
        };
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(Error::BadFormat("feature dim is zero".into()));
        }
        let n = r.u32()? as usize;
        let mut bank = StatsBank::new(d, mode);
        for _ in 0..n {
            let class_id = r.u32()?;
            let count = r.u64()?;
            if count == 0 {
                return Err(Error::BadFormat(format!("class {class_id} has zero count")));
            }
            let mean = Vector::new(r.f32s_as_f64(d)?).map_err(|e| Error::BadFormat(e.to_string()))?;
            let cov = match mode {
                CovarianceMode::Full => {
                    let m = Matrix::new(d, d, r.f32s_as_f64(d * d)?).map_err(|e| Error::BadFormat(e.to_string()))?;
                    if !m.is_symmetric(crate::linalg::SYMMETRY_TOL) {
                        return Err(Error::BadFormat(format!("class {class_id} covariance not symmetric")));
                    }
                    Covariance::Full(m)
                }
                CovarianceMode::Diagonal => {
                    let v = r.f32s_as_f64(d)?;
                    if v.iter().any(|x| x.is_nan() || *x < 0.0) {
                        return Err(Error::BadFormat(format!("class {class_id} has negative variance")));
                    }
                    Covariance::Diagonal(v)
                }
            };
            bank.insert(ClassStats {
                class_id,
                count,
                mean,
                cov,
            })
            .map_err(|e| Error::BadFormat(e.to_string()))?;
        }
        r.finish()?;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Number of scalars stored: `2·d·C` for diagonal, `d·C + d²·C` for full.
pub fn stats_storage_size(bank: &StatsBank) -> usize {
    let (d, c) = (bank.dim, bank.classes.len());
    match bank.mode {
        CovarianceMode::Diagonal => 2 * d * c,
        CovarianceMode::Full => d * c + d * d * c,
    }
}
