//! The network: a representation head followed by a linear classifier with
//! one output row per seen class.
//!
//! Parameters are split into two groups, the representation group (head
//! weights) and the classifier group (class rows and biases), so that the
//! optimizer can give each its own learning rate.

use std::collections::BTreeSet;
use std::path::Path;

use crate::codec::{self, ByteReader};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::losses::{argmax_class, LossKind};
use crate::rng::RngState;

/// Standard deviation of freshly allocated classifier rows.
pub const CLASSIFIER_INIT_STD: f64 = 0.02;

const MODEL_MAGIC: &[u8; 4] = b"SLCM";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.weight.rows())
            .map(|i| dot(self.weight.row(i), x) + self.bias[i])
            .collect()
    }
}

/// Multi-layer perceptron with rectifiers between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    /// He-initialized MLP `d_in → hidden → … → d_out` with `num_layers` dense layers.
    pub fn new(d_in: usize, hidden: usize, d_out: usize, num_layers: usize, rng: &mut RngState) -> Result<Self> {
        if num_layers == 0 || d_in == 0 || d_out == 0 || (num_layers > 1 && hidden == 0) {
            return Err(Error::InvalidConfig("mlp dimensions must be positive".into()));
        }
        let mut widths = vec![d_in];
        widths.extend(std::iter::repeat_n(hidden, num_layers - 1));
        widths.push(d_out);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if k + 1 < num_layers { 2.0 } else { 1.0 };
                let std = (gain / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| std * rng.gaussian()).collect();
                DenseLayer {
                    weight: Matrix::new(fan_out, fan_in, data).expect("finite init"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].weight.rows(),
                    found: pair[1].weight.cols(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.rows() {
                return Err(Error::DimensionMismatch {
                    expected: l.weight.rows(),
                    found: l.bias.len(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Pre-activations of every layer; the last entry is the output.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&act);
            act = if k + 1 < self.layers.len() {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        pre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RepresentationHead {
    /// Features pass through unchanged; no trainable parameters.
    Identity {
        dim: usize,
    },
    Mlp(Mlp),
}

/// How to build a head for a given input width.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadConfig {
    Identity,
    Mlp {
        hidden: usize,
        out_dim: usize,
        layers: usize,
    },
}

impl HeadConfig {
    pub fn build(&self, d_in: usize, rng: &mut RngState) -> Result<RepresentationHead> {
        match *self {
            HeadConfig::Identity => {
                if d_in == 0 {
                    return Err(Error::InvalidConfig("feature dimension must be positive".into()));
                }
                Ok(RepresentationHead::Identity { dim: d_in })
            }
            HeadConfig::Mlp {
                hidden,
                out_dim,
                layers,
            } => Ok(RepresentationHead::Mlp(Mlp::new(d_in, hidden, out_dim, layers, rng)?)),
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, HeadConfig::Identity)
    }
}

impl RepresentationHead {
    pub fn input_dim(&self) -> usize {
        match self {
            RepresentationHead::Identity { dim } => *dim,
            RepresentationHead::Mlp(m) => m.layers[0].weight.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            RepresentationHead::Identity { dim } => *dim,
            RepresentationHead::Mlp(m) => m.layers.last().unwrap().weight.rows(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            RepresentationHead::Identity { .. } => 0,
            RepresentationHead::Mlp(m) => m.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum(),
        }
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(match self {
            RepresentationHead::Identity { .. } => x.to_vec(),
            RepresentationHead::Mlp(m) => m.forward_trace(x).pop().unwrap(),
        })
    }

    /// Back-propagates `d_features` to parameter gradients, one buffer per
    /// tensor in the order weight₀, bias₀, weight₁, bias₁, …
    fn backward(&self, x: &[f64], trace: &[Vec<f64>], d_features: &[f64]) -> Vec<Vec<f64>> {
        let m = match self {
            RepresentationHead::Identity { .. } => return Vec::new(),
            RepresentationHead::Mlp(m) => m,
        };
        let n = m.layers.len();
        let mut grads = vec![Vec::new(); 2 * n];
        let mut delta = d_features.to_vec();
        for k in (0..n).rev() {
            let layer = &m.layers[k];
            let input: Vec<f64> = if k == 0 {
                x.to_vec()
            } else {
                trace[k - 1].iter().map(|v| v.max(0.0)).collect()
            };
            let (rows, cols) = (layer.weight.rows(), layer.weight.cols());
            let mut gw = vec![0.0; rows * cols];
            for (row, &di) in gw.chunks_mut(cols).zip(&delta) {
                if di != 0.0 {
                    axpy(di, &input, row);
                }
            }
            if k > 0 {
                let mut prev = vec![0.0; cols];
                for (i, &di) in delta.iter().enumerate() {
                    if di != 0.0 {
                        axpy(di, layer.weight.row(i), &mut prev);
                    }
                }
                for (p, z) in prev.iter_mut().zip(&trace[k - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                grads[2 * k + 1] = std::mem::replace(&mut delta, prev);
            } else {
                grads[1] = std::mem::take(&mut delta);
            }
            grads[2 * k] = gw;
        }
        grads
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            RepresentationHead::Identity { .. } => Vec::new(),
            RepresentationHead::Mlp(m) => m
                .layers
                .iter_mut()
                .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
                .collect(),
        }
    }
}

/// Linear classifier over the active classes, rows ordered by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    dim: usize,
    classes: Vec<u32>,
    /// `classes.len() × dim`, row-major
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Classifier {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            classes: Vec::new(),
            weight: Vec::new(),
            bias: Vec::new(),
        }
    }

    /// Builds a classifier from explicit rows.
    pub fn from_parts(classes: Vec<u32>, weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != classes.len() || bias.len() != classes.len() {
            return Err(Error::DimensionMismatch {
                expected: classes.len(),
                found: weight.rows(),
            });
        }
        if !classes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "classifier classes must be strictly increasing".into(),
            ));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("classifier bias"));
        }
        Ok(Self {
            dim: weight.cols(),
            classes,
            weight: weight.into_data(),
            bias,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn row_of(&self, class: u32) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    pub fn weight_row(&self, row: usize) -> &[f64] {
        &self.weight[row * self.dim..(row + 1) * self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_matrix(&self) -> Matrix {
        Matrix::new(self.classes.len(), self.dim, self.weight.clone()).expect("consistent shape")
    }

    /// Logits over all active classes, in class-id order.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: features.len(),
            });
        }
        Ok((0..self.classes.len())
            .map(|r| dot(self.weight_row(r), features) + self.bias[r])
            .collect())
    }

    /// Predicted class id, or `None` when no class is active.
    pub fn predict(&self, features: &[f64]) -> Result<Option<u32>> {
        if self.classes.is_empty() {
            return Ok(None);
        }
        let logits = self.logits(features)?;
        Ok(Some(self.classes[argmax_class(&logits)]))
    }

    /// Allocates rows for `new_classes`, drawn from `N(0, 0.02²)` with zero bias.
    ///
    /// Rows are drawn in increasing class-id order. Existing rows keep their values.
    pub fn extend(&mut self, new_classes: &BTreeSet<u32>, rng: &mut RngState) -> Result<()> {
        if let Some(&c) = new_classes.iter().find(|c| self.row_of(**c).is_some()) {
            return Err(Error::ClassCollision(c));
        }
        let mut rows: Vec<(u32, Vec<f64>, f64)> = (0..self.classes.len())
            .map(|r| (self.classes[r], self.weight_row(r).to_vec(), self.bias[r]))
            .collect();
        for &c in new_classes {
            let w = (0..self.dim).map(|_| CLASSIFIER_INIT_STD * rng.gaussian()).collect();
            rows.push((c, w, 0.0));
        }
        rows.sort_by_key(|r| r.0);
        self.classes = rows.iter().map(|r| r.0).collect();
        self.weight = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
        self.bias = rows.iter().map(|r| r.2).collect();
        Ok(())
    }

    /// Resolves a set of class ids to classifier rows.
    pub fn mask(&self, classes: &BTreeSet<u32>) -> Result<ClassMask> {
        let rows = classes
            .iter()
            .map(|&c| self.row_of(c).ok_or(Error::UnknownClass(c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassMask {
            classes: classes.iter().copied().collect(),
            rows,
        })
    }

    /// Mask covering every active class.
    pub fn full_mask(&self) -> ClassMask {
        ClassMask {
            classes: self.classes.clone(),
            rows: (0..self.classes.len()).collect(),
        }
    }

    /// Gradients of `loss` for one feature vector restricted to `mask`.
    ///
    /// Returns the loss, `[d weight, d bias]` (zero outside the mask) and
    /// the gradient with respect to the input features.
    pub fn backward(
        &self,
        features: &[f64],
        label: u32,
        mask: &ClassMask,
        loss: LossKind,
    ) -> Result<(f64, [Vec<f64>; 2], Vec<f64>)> {
        if features.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: features.len(),
            });
        }
        let label_pos = mask
            .classes
            .binary_search(&label)
            .map_err(|_| Error::LabelNotInMask(label))?;
        let logits: Vec<f64> = mask
            .rows
            .iter()
            .map(|&r| dot(self.weight_row(r), features) + self.bias[r])
            .collect();
        let value = loss.evaluate(&logits, label_pos)?;
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.bias.len()];
        let mut d_features = vec![0.0; self.dim];
        for (&r, &g) in mask.rows.iter().zip(&value.grad) {
            gb[r] = g;
            if g != 0.0 {
                axpy(g, features, &mut gw[r * self.dim..(r + 1) * self.dim]);
                axpy(g, self.weight_row(r), &mut d_features);
            }
        }
        Ok((value.loss, [gw, gb], d_features))
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), self.bias.as_mut_slice()]
    }
}

/// A subset of classifier rows that participate in a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMask {
    classes: Vec<u32>,
    rows: Vec<usize>,
}

impl ClassMask {
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }
}

/// Parameter gradients split by group, one buffer per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub rep: Vec<Vec<f64>>,
    pub cls: Vec<Vec<f64>>,
    pub loss: f64,
}

impl Gradients {
    /// `self += weight · other`
    pub fn add_scaled(&mut self, other: &Gradients, weight: f64) -> Result<()> {
        fn add(dst: &mut [Vec<f64>], src: &[Vec<f64>], w: f64) -> Result<()> {
            if dst.len() != src.len() {
                return Err(Error::DimensionMismatch {
                    expected: dst.len(),
                    found: src.len(),
                });
            }
            for (d, s) in dst.iter_mut().zip(src) {
                if d.len() != s.len() {
                    return Err(Error::DimensionMismatch {
                        expected: d.len(),
                        found: s.len(),
                    });
                }
                axpy(w, s, d);
            }
            Ok(())
        }
        add(&mut self.rep, &other.rep, weight)?;
        add(&mut self.cls, &other.cls, weight)?;
        self.loss += weight * other.loss;
        Ok(())
    }
}

/// Mutable views of the trainable parameters, split by group.
pub struct ParamGroups<'a> {
    pub rep: Vec<&'a mut [f64]>,
    pub cls: Vec<&'a mut [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub head: RepresentationHead,
    pub classifier: Classifier,
}

impl Model {
    pub fn new(head: RepresentationHead) -> Self {
        let dim = head.output_dim();
        Self {
            head,
            classifier: Classifier::new(dim),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let features = self.head.features(x)?;
        let logits = self.classifier.logits(&features)?;
        Ok((features, logits))
    }

    pub fn backward(&self, x: &[f64], label: u32, mask: &ClassMask, loss: LossKind) -> Result<Gradients> {
        if x.len() != self.head.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.head.input_dim(),
                found: x.len(),
            });
        }
        let (trace, features) = match &self.head {
            RepresentationHead::Identity { .. } => (Vec::new(), x.to_vec()),
            RepresentationHead::Mlp(m) => {
                let t = m.forward_trace(x);
                let f = t.last().unwrap().clone();
                (t, f)
            }
        };
        let (loss_value, cls, d_features) = self.classifier.backward(&features, label, mask, loss)?;
        let rep = self.head.backward(x, &trace, &d_features);
        Ok(Gradients {
            rep,
            cls: cls.into(),
            loss: loss_value,
        })
    }

    /// Zero gradients shaped like this model's parameters.
    pub fn zero_gradients(&self) -> Gradients {
        let rep = match &self.head {
            RepresentationHead::Identity { .. } => Vec::new(),
            RepresentationHead::Mlp(m) => m
                .layers
                .iter()
                .flat_map(|l| [vec![0.0; l.weight.data().len()], vec![0.0; l.bias.len()]])
                .collect(),
        };
        Gradients {
            rep,
            cls: vec![
                vec![0.0; self.classifier.weight.len()],
                vec![0.0; self.classifier.bias.len()],
            ],
            loss: 0.0,
        }
    }

    pub fn extend_classifier(&mut self, new_classes: &BTreeSet<u32>, rng: &mut RngState) -> Result<()> {
        self.classifier.extend(new_classes, rng)
    }

    pub fn clone_classifier(&self) -> Classifier {
        self.classifier.clone()
    }

    pub fn param_groups_mut(&mut self) -> ParamGroups<'_> {
        ParamGroups {
            rep: self.head.params_mut(),
            cls: self.classifier.params_mut(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Option<u32>> {
        self.classifier.predict(&self.head.features(x)?)
    }

    /// Serializes to the versioned `SLCM` checkpoint layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        codec::put_u32(&mut buf, MODEL_VERSION);
        match &self.head {
            RepresentationHead::Identity { dim } => {
                codec::put_u8(&mut buf, 0);
                codec::put_u32(&mut buf, codec::to_u32(*dim, "input dim")?);
                codec::put_u32(&mut buf, codec::to_u32(*dim, "feature dim")?);
            }
            RepresentationHead::Mlp(m) => {
                codec::put_u8(&mut buf, 1);
                codec::put_u32(&mut buf, codec::to_u32(self.head.input_dim(), "input dim")?);
                codec::put_u32(&mut buf, codec::to_u32(self.head.output_dim(), "feature dim")?);
                codec::put_u32(&mut buf, codec::to_u32(m.layers.len(), "layer count")?);
                // activation code: 0 = rectifier
                codec::put_u8(&mut buf, 0);
                for l in &m.layers {
                    codec::put_u32(&mut buf, codec::to_u32(l.weight.rows(), "layer rows")?);
                    codec::put_u32(&mut buf, codec::to_u32(l.weight.cols(), "layer cols")?);
                    codec::put_f64s_as_f32(&mut buf, l.weight.data());
                    codec::put_f64s_as_f32(&mut buf, &l.bias);
                }
            }
        }
        let c = &self.classifier;
        codec::put_u32(&mut buf, codec::to_u32(c.classes.len(), "class count")?);
        for &id in &c.classes {
            codec::put_u32(&mut buf, id);
        }
        codec::put_f64s_as_f32(&mut buf, &c.weight);
        codec::put_f64s_as_f32(&mut buf, &c.bias);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::BadFormat(format!("unsupported model version {version}")));
        }
        let kind = r.u8()?;
        let d_in = r.u32()? as usize;
        let d = r.u32()? as usize;
        let head = match kind {
            0 => {
                if d_in != d || d == 0 {
                    return Err(Error::BadFormat("identity head requires equal positive dims".into()));
                }
                RepresentationHead::Identity { dim: d }
            }
            1 => {
                let n = r.u32()? as usize;
                if r.u8()? != 0 {
                    return Err(Error::BadFormat("unknown activation".into()));
                }
                let mut layers = Vec::with_capacity(n.min(64));
                for _ in 0..n {
                    let rows = r.u32()? as usize;
                    let cols = r.u32()? as usize;
                    let w = r.f32s_as_f64(rows * cols)?;
                    let b = r.f32s_as_f64(rows)?;
                    layers.push(DenseLayer {
                        weight: Matrix::new(rows, cols, w).map_err(|e| Error::BadFormat(e.to_string()))?,
                        bias: b,
                    });
                }
                let mlp = Mlp::from_layers(layers).map_err(|e| Error::BadFormat(e.to_string()))?;
                let head = RepresentationHead::Mlp(mlp);
                if head.input_dim() != d_in || head.output_dim() != d {
                    return Err(Error::BadFormat("declared dims disagree with layers".into()));
                }
                head
            }
            k => return Err(Error::BadFormat(format!("unknown head kind {k}"))),
        };
        let n = r.u32()? as usize;
        let classes = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let w = r.f32s_as_f64(n * d)?;
        let b = r.f32s_as_f64(n)?;
        r.finish()?;
        let classifier = Classifier::from_parts(
            classes,
            Matrix::new(n, d, w).map_err(|e| Error::BadFormat(e.to_string()))?,
            b,
        )
        .map_err(|e| Error::BadFormat(e.to_string()))?;
        Ok(Model { head, classifier })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
