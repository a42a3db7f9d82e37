//! Layered parameter containers.
//!
//! A [`LayeredModel`] is an ordered list of [`LayerBlock`]s. Blocks are held
//! behind `Arc` so recombination can move them between models without copying
//! a single parameter; mutation goes through copy-on-write.
//!
//! All reductions across a [`ModelList`] walk the list in order and use
//! Neumaier-compensated summation per element, so results are reproducible
//! bit-for-bit on one platform and almost independent of list order.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::train::ArchitectureSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBlock {
    pub layer_index: usize,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl LayerBlock {
    pub fn new(layer_index: usize, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer_index}: shape {shape:?} holds {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            layer_index,
            shape,
            values,
        })
    }

    pub fn zeros(layer_index: usize, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            layer_index,
            shape,
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Raw parameter payload in bytes (8 per value).
    pub fn byte_size(&self) -> usize {
        self.values.len() * std::mem::size_of::<f64>()
    }
}

/// FNV-1a over the layer shapes. Two models with equal fingerprints have the
/// same layer count and per-layer shapes.
pub fn arch_fingerprint<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    let mut count = 0u64;
    for shape in shapes {
        feed(shape.len() as u64);
        for &d in shape {
            feed(d as u64);
        }
        count += 1;
    }
    feed(count);
    h
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredModel {
    pub arch_id: u64,
    pub layers: Vec<Arc<LayerBlock>>,
}

impl fmt::Debug for LayeredModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LayeredModel")
            .field("arch_id", &format_args!("{:#018x}", self.arch_id))
            .field("layers", &self.layers.len())
            .field("params", &self.num_params())
            .finish()
    }
}

impl LayeredModel {
    /// Builds a model from blocks, renumbering nothing: blocks must already
    /// carry indices `0..n` in order.
    pub fn from_blocks(blocks: Vec<LayerBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArchitecture("model has no layers".into()));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.layer_index != i {
                return Err(Error::ShapeMismatch(format!(
                    "block at position {i} carries layer_index {}",
                    b.layer_index
                )));
            }
            let expected: usize = b.shape.iter().product();
            if b.shape.is_empty() || expected != b.values.len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: shape {:?} does not hold {} values",
                    b.shape,
                    b.values.len()
                )));
            }
        }
        let arch_id = arch_fingerprint(blocks.iter().map(|b| b.shape.as_slice()));
        Ok(Self {
            arch_id,
            layers: blocks.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn zeros(shapes: &[Vec<usize>]) -> Result<Self> {
        Self::from_blocks(
            shapes
                .iter()
                .enumerate()
                .map(|(i, s)| LayerBlock::zeros(i, s.clone()))
                .collect(),
        )
    }

    /// A model with the same architecture and every value replaced by `f(i, v)`
    /// where `i` is the flat position.
    pub fn map_values(&self, mut f: impl FnMut(usize, f64) -> f64) -> Self {
        let mut pos = 0;
        let layers = self
            .layers
            .iter()
            .map(|b| {
                let values = b
                    .values
                    .iter()
                    .map(|&v| {
                        let out = f(pos, v);
                        pos += 1;
                        out
                    })
                    .collect();
                Arc::new(LayerBlock {
                    layer_index: b.layer_index,
                    shape: b.shape.clone(),
                    values,
                })
            })
            .collect();
        Self {
            arch_id: self.arch_id,
            layers,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|b| b.len()).sum()
    }

    pub fn byte_size(&self) -> usize {
        self.layers.iter().map(|b| b.byte_size()).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|b| b.shape.clone()).collect()
    }

    pub fn layer(&self, i: usize) -> &LayerBlock {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerBlock {
        Arc::make_mut(&mut self.layers[i])
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in &self.layers {
            out.extend_from_slice(&b.values);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) against this model's architecture.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} values, architecture needs {}",
                flat.len(),
                self.num_params()
            )));
        }
        Ok(self.map_values(|i, _| flat[i]))
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|b| b.values.iter().copied())
    }

    pub fn same_arch(&self, other: &LayeredModel) -> bool {
        self.arch_id == other.arch_id
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.shape == b.shape)
    }

    pub(crate) fn ensure_same_arch(&self, other: &LayeredModel) -> Result<()> {
        if self.same_arch(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "architecture {:#x} ({} layers) vs {:#x} ({} layers)",
                self.arch_id,
                self.layers.len(),
                other.arch_id,
                other.layers.len()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Scaled-uniform initialisation: every weight block draws from
/// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`; bias blocks are zero.
pub fn init_model(arch: &ArchitectureSpec, seed: u64) -> Result<LayeredModel> {
    arch.validate()?;
    let mut rng = rng::rng_from_seed(seed);
    let mut blocks = Vec::with_capacity(arch.layer_dims.len() * 2);
    for &(fan_in, fan_out) in &arch.layer_dims {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let w_index = blocks.len();
        blocks.push(LayerBlock::new(w_index, vec![fan_out, fan_in], weights)?);
        blocks.push(LayerBlock::zeros(w_index + 1, vec![fan_out]));
    }
    LayeredModel::from_blocks(blocks)
}

/// The K models exchanged in one round. All members share one architecture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelList {
    models: Vec<LayeredModel>,
}

impl ModelList {
    pub fn new(models: Vec<LayeredModel>) -> Result<Self> {
        if let Some(first) = models.first() {
            for m in &models[1..] {
                first.ensure_same_arch(m)?;
            }
        }
        Ok(Self { models })
    }

    pub fn replicate(model: &LayeredModel, k: usize) -> Self {
        Self {
            models: vec![model.clone(); k],
        }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LayeredModel> {
        self.models.iter()
    }

    pub fn as_slice(&self) -> &[LayeredModel] {
        &self.models
    }

    pub fn into_inner(self) -> Vec<LayeredModel> {
        self.models
    }

    fn first_checked(&self) -> Result<&LayeredModel> {
        self.models.first().ok_or(Error::EmptyAggregate)
    }
}

impl std::ops::Index<usize> for ModelList {
    type Output = LayeredModel;

    fn index(&self, i: usize) -> &LayeredModel {
        &self.models[i]
    }
}

impl<'a> IntoIterator for &'a ModelList {
    type Item = &'a LayeredModel;
    type IntoIter = std::slice::Iter<'a, LayeredModel>;

    fn into_iter(self) -> Self::IntoIter {
        self.models.iter()
    }
}

/// Neumaier-compensated running sum. Starts from the first term rather than
/// `0.0` so a single-term sum is bitwise equal to that term (signed zero
/// included).
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
    started: bool,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        if !self.started {
            self.sum = x;
            self.started = true;
            return;
        }
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        if self.comp == 0.0 {
            self.sum
        } else {
            self.sum + self.comp
        }
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn compensated_sum(iter: impl IntoIterator<Item = f64>) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

fn elementwise(models: &ModelList, reduce: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Result<LayeredModel> {
    let first = models.first_checked()?;
    let layers = (0..first.num_layers())
        .map(|li| {
            let template = first.layer(li);
            let values = (0..template.len())
                .map(|vi| reduce(&mut models.iter().map(|m| m.layers[li].values[vi])))
                .collect();
            Arc::new(LayerBlock {
                layer_index: template.layer_index,
                shape: template.shape.clone(),
                values,
            })
        })
        .collect();
    Ok(LayeredModel {
        arch_id: first.arch_id,
        layers,
    })
}

/// Elementwise arithmetic mean: `(1/K) * sum_k m_k`.
///
/// Computed as `m_0 + (1/K) * sum_k (m_k - m_0)`, which is exact when all
/// inputs agree (so averaging replicas returns the replica bit for bit).
pub fn aggregate_mean(models: &ModelList) -> Result<LayeredModel> {
    let k = models.len() as f64;
    elementwise(models, |it| {
        let first = it.next().expect("non-empty list");
        let shift = compensated_sum(std::iter::once(0.0).chain(it.map(|x| x - first)));
        if shift == 0.0 {
            first
        } else {
            first + shift / k
        }
    })
}

pub fn sum_models(models: &ModelList) -> Result<LayeredModel> {
    elementwise(models, |it| compensated_sum(it))
}

/// `sum_k ||m_k - x||^2` over flattened parameters.
pub fn sq_distance_sum(models: &ModelList, x: &LayeredModel) -> Result<f64> {
    if let Some(first) = models.iter().next() {
        first.ensure_same_arch(x)?;
    }
    Ok(compensated_sum(models.iter().map(|m| {
        compensated_sum(m.values().zip(x.values()).map(|(a, b)| {
            let d = a - b;
            d * d
        }))
    })))
}

pub fn dot(a: &LayeredModel, b: &LayeredModel) -> f64 {
    compensated_sum(a.values().zip(b.values()).map(|(x, y)| x * y))
}

pub fn norm(a: &LayeredModel) -> f64 {
    dot(a, a).sqrt()
}

/// Mean cosine similarity over the `K(K-1)/2` unordered pairs.
pub fn pairwise_cosine_mean(models: &ModelList) -> Result<f64> {
    let k = models.len();
    if k < 2 {
        return Err(Error::config(
            "models",
            format!("pairwise cosine needs at least 2 models, got {k}"),
        ));
    }
    let norms: Vec<f64> = models.iter().map(norm).collect();
    if let Some(index) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::DegenerateNorm { index });
    }
    let mut acc = CompensatedSum::default();
    for i in 0..k {
        for j in (i + 1)..k {
            acc.add(dot(&models[i], &models[j]) / (norms[i] * norms[j]));
        }
    }
    Ok(acc.value() / (k * (k - 1) / 2) as f64)
}
