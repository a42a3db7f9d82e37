//! Client-side learner: a ReLU MLP with a softmax cross-entropy head, trained
//! by mini-batch SGD with momentum and an optional proximal term.
//!
//! A model with `L` linear layers is stored as `2L` blocks: weight `[out, in]`
//! (row-major) followed by bias `[out]`.

use std::borrow::Borrow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Sample};
use crate::error::{Error, Result};
use crate::model::{LayerBlock, LayeredModel};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// `(in, out)` of each linear layer; hidden layers use ReLU.
    pub layer_dims: Vec<(usize, usize)>,
}

impl ArchitectureSpec {
    pub fn new(layer_dims: Vec<(usize, usize)>) -> Result<Self> {
        let arch = Self { layer_dims };
        arch.validate()?;
        Ok(arch)
    }

    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect();
        Self::new(widths.windows(2).map(|w| (w[0], w[1])).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() {
            return Err(Error::InvalidArchitecture("no layers".into()));
        }
        for (i, &(a, b)) in self.layer_dims.iter().enumerate() {
            if a == 0 || b == 0 {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {i} has a zero dimension ({a}, {b})"
                )));
            }
        }
        for (i, w) in self.layer_dims.windows(2).enumerate() {
            if w[0].1 != w[1].0 {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].1,
                    i + 1,
                    w[1].0
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0].0
    }

    pub fn num_classes(&self) -> usize {
        self.layer_dims.last().unwrap().1
    }

    pub fn block_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_dims
            .iter()
            .flat_map(|&(i, o)| [vec![o, i], vec![o]])
            .collect()
    }

    /// Recovers the layer chain from a model's block shapes.
    pub fn of_model(model: &LayeredModel) -> Result<Self> {
        if !model.num_layers().is_multiple_of(2) {
            return Err(Error::InvalidArchitecture(format!(
                "{} blocks cannot form (weight, bias) pairs",
                model.num_layers()
            )));
        }
        let mut dims = Vec::with_capacity(model.num_layers() / 2);
        for pair in model.layers.chunks(2) {
            match (pair[0].shape.as_slice(), pair[1].shape.as_slice()) {
                (&[o, i], &[ob]) if o == ob => dims.push((i, o)),
                (w, b) => {
                    return Err(Error::InvalidArchitecture(format!(
                        "blocks {}/{} are not a (weight, bias) pair: {w:?}, {b:?}",
                        pair[0].layer_index, pair[1].layer_index
                    )))
                }
            }
        }
        Self::new(dims)
    }
}

struct Dense<'a> {
    w: &'a [f64],
    b: &'a [f64],
    n_in: usize,
    n_out: usize,
}

fn dense_layers(model: &LayeredModel) -> Result<Vec<Dense<'_>>> {
    let arch = ArchitectureSpec::of_model(model)?;
    Ok(arch
        .layer_dims
        .iter()
        .enumerate()
        .map(|(l, &(n_in, n_out))| Dense {
            w: &model.layers[2 * l].values,
            b: &model.layers[2 * l + 1].values,
            n_in,
            n_out,
        })
        .collect())
}

fn check_batch<S: Borrow<Sample>>(layers: &[Dense<'_>], batch: &[S]) -> Result<()> {
    let n_in = layers[0].n_in;
    let classes = layers.last().unwrap().n_out;
    for (i, s) in batch.iter().enumerate() {
        let s = s.borrow();
        if s.features.len() != n_in {
            return Err(Error::ShapeMismatch(format!(
                "sample {i} has {} features, model expects {n_in}",
                s.features.len()
            )));
        }
        if s.features.iter().any(|f| !f.is_finite()) {
            return Err(Error::NumericInput { sample: i });
        }
        if s.label >= classes {
            return Err(Error::InvalidLabel {
                label: s.label,
                classes,
            });
        }
    }
    Ok(())
}

/// Pre-activations of every layer for one sample.
fn forward_sample(layers: &[Dense<'_>], x: &[f64]) -> Vec<Vec<f64>> {
    let mut zs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let mut z = layer.b.to_vec();
        {
            let input: &[f64] = if l == 0 { x } else { &zs[l - 1] };
            let relu = l > 0;
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                let mut acc = 0.0;
                for (w, &a) in row.iter().zip(input) {
                    let a = if relu { a.max(0.0) } else { a };
                    acc += w * a;
                }
                *zo += acc;
            }
        }
        zs.push(z);
    }
    zs
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f64>>,
    /// Mean softmax cross-entropy over the batch.
    pub loss: f64,
}

pub fn forward<S: Borrow<Sample>>(model: &LayeredModel, batch: &[S]) -> Result<ForwardOutput> {
    let layers = dense_layers(model)?;
    check_batch(&layers, batch)?;
    if batch.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut total = 0.0;
    let logits = batch
        .iter()
        .map(|s| {
            let s = s.borrow();
            let z = forward_sample(&layers, &s.features).pop().unwrap();
            total += log_sum_exp(&z) - z[s.label];
            z
        })
        .collect();
    Ok(ForwardOutput {
        logits,
        loss: total / batch.len() as f64,
    })
}

/// Loss and its gradient with respect to every parameter, averaged over the batch.
pub fn loss_and_gradient<S: Borrow<Sample>>(
    model: &LayeredModel,
    batch: &[S],
) -> Result<(f64, LayeredModel)> {
    let layers = dense_layers(model)?;
    check_batch(&layers, batch)?;
    if batch.is_empty() {
        return Err(Error::EmptyEval);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut gw: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.w.len()]).collect();
    let mut gb: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.b.len()]).collect();
    let mut total = 0.0;

    for s in batch {
        let s = s.borrow();
        let zs = forward_sample(&layers, &s.features);
        let out = zs.last().unwrap();
        let lse = log_sum_exp(out);
        total += lse - out[s.label];

        let mut delta: Vec<f64> = out.iter().map(|z| (z - lse).exp() * scale).collect();
        delta[s.label] -= scale;

        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            let relu_in = l > 0;
            let input: &[f64] = if l == 0 { &s.features } else { &zs[l - 1] };
            for (o, &d) in delta.iter().enumerate() {
                gb[l][o] += d;
                if d != 0.0 {
                    let grow = &mut gw[l][o * layer.n_in..(o + 1) * layer.n_in];
                    for (g, &a) in grow.iter_mut().zip(input) {
                        let a = if relu_in { a.max(0.0) } else { a };
                        *g += d * a;
                    }
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.n_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                for (p, &z) in prev.iter_mut().zip(&zs[l - 1]) {
                    if z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    let mut blocks = Vec::with_capacity(2 * layers.len());
    for (l, (w, b)) in gw.into_iter().zip(gb).enumerate() {
        blocks.push(LayerBlock::new(2 * l, model.layers[2 * l].shape.clone(), w)?);
        blocks.push(LayerBlock::new(2 * l + 1, model.layers[2 * l + 1].shape.clone(), b)?);
    }
    Ok((total * scale, LayeredModel::from_blocks(blocks)?))
}

pub fn backward<S: Borrow<Sample>>(model: &LayeredModel, batch: &[S]) -> Result<LayeredModel> {
    loss_and_gradient(model, batch).map(|(_, g)| g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LocalTrainConfig {
    /// Five epochs, batch 50, lr 0.01, momentum 0.9.
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 50,
            lr: 0.01,
            momentum: 0.9,
            prox_mu: 0.0,
            seed: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("local.lr", format!("must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("local.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("local.momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::config("local.prox_mu", format!("must be finite and non-negative, got {}", self.prox_mu)));
        }
        Ok(())
    }
}

/// SGD iterations one client performs in a round: `epochs * ceil(n / batch)`.
pub fn local_iterations(shard_len: usize, cfg: &LocalTrainConfig) -> usize {
    cfg.epochs * shard_len.div_ceil(cfg.batch_size.max(1))
}

/// Trains a copy of `model` on the shard and returns the new weights.
///
/// Every epoch reshuffles the sample order from the stream seeded by
/// `cfg.seed`. The momentum buffer starts at zero. When `cfg.prox_mu > 0`
/// each gradient gains `mu * (w - global_ref)`.
pub fn client_update(
    model: &LayeredModel,
    shard: &ClientShard,
    cfg: &LocalTrainConfig,
    global_ref: Option<&LayeredModel>,
) -> Result<LayeredModel> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(Error::EmptyShard {
            client: shard.client_id,
        });
    }
    let reference = match (cfg.prox_mu > 0.0, global_ref) {
        (true, None) => return Err(Error::MissingReference { mu: cfg.prox_mu }),
        (true, Some(r)) => {
            model.ensure_same_arch(r)?;
            Some(r)
        }
        (false, _) => None,
    };
    let arch = ArchitectureSpec::of_model(model)?;
    if shard.samples[0].features.len() != arch.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "client {} features have width {}, model expects {}",
            shard.client_id,
            shard.samples[0].features.len(),
            arch.input_dim()
        )));
    }

    let mut w = model.clone();
    let mut velocity: Vec<Vec<f64>> = w.layers.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut rng = rng::rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut steps = 0usize;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &shard.samples[i]).collect();
            let grad = backward(&w, &batch)?;
            for (li, v) in velocity.iter_mut().enumerate() {
                let g = &grad.layers[li].values;
                let prox = reference.map(|r| r.layers[li].values.as_slice());
                let block = w.layer_mut(li);
                for (idx, (vi, wi)) in v.iter_mut().zip(block.values.iter_mut()).enumerate() {
                    let mut gi = g[idx];
                    if let Some(r) = prox {
                        gi += cfg.prox_mu * (*wi - r[idx]);
                    }
                    *vi = cfg.momentum * *vi + gi;
                    *wi -= cfg.lr * *vi;
                }
            }
            steps += 1;
        }
    }
    log::trace!(
        "client {}: {} samples, E = {steps} iterations",
        shard.client_id,
        shard.len()
    );
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &LayeredModel, dataset: &[Sample]) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyEval);
    }
    let out = forward(model, dataset)?;
    let correct = out
        .logits
        .iter()
        .zip(dataset)
        .filter(|(z, s)| argmax(z) == s.label)
        .count();
    Ok(Evaluation {
        loss: out.loss,
        accuracy: correct as f64 / dataset.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters skipped because a ±h perturbation flips some ReLU.
    pub skipped_kinks: usize,
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`; the floor keeps
/// near-zero gradients from amplifying rounding noise.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn relu_pattern(model: &LayeredModel, batch: &[&Sample]) -> Vec<bool> {
    let layers = dense_layers(model).expect("validated");
    batch
        .iter()
        .flat_map(|s| {
            let zs = forward_sample(&layers, &s.features);
            let hidden = zs.len() - 1;
            zs.into_iter().take(hidden).flatten().map(|z| z > 0.0).collect::<Vec<_>>()
        })
        .collect()
}

/// Compares the analytic gradient against central differences with step `h`.
pub fn gradient_check(model: &LayeredModel, batch: &[Sample], h: f64, floor: f64) -> Result<GradCheckReport> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let analytic = backward(model, &refs)?.flatten();
    let base = model.flatten();
    let pattern = relu_pattern(model, &refs);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = model.unflatten(&probe)?;
        probe[i] = base[i] - h;
        let minus = model.unflatten(&probe)?;
        probe[i] = base[i];
        if relu_pattern(&plus, &refs) != pattern || relu_pattern(&minus, &refs) != pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let fd = (forward(&plus, &refs)?.loss - forward(&minus, &refs)?.loss) / (2.0 * h);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic[i], fd, floor));
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn sample(features: Vec<f64>, label: usize) -> Sample {
        Sample { features, label }
    }

    fn random_batch(n: usize, dim: usize, classes: usize, seed: u64) -> Vec<Sample> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| sample((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(), rng.random_range(0..classes)))
            .collect()
    }

    fn shard(samples: Vec<Sample>, classes: usize) -> ClientShard {
        let mut class_histogram = vec![0; classes];
        for s in &samples {
            class_histogram[s.label] += 1;
        }
        ClientShard {
            client_id: 0,
            indices: (0..samples.len()).collect(),
            samples,
            class_histogram,
        }
    }

    fn tiny_net() -> LayeredModel {
        // 2-4-3 with hand-picked weights.
        LayeredModel::from_blocks(vec![
            LayerBlock::new(0, vec![4, 2], vec![0.5, -0.25, 1.0, 0.75, -0.5, 0.5, 0.25, 0.125]).unwrap(),
            LayerBlock::new(1, vec![4], vec![0.1, -0.2, 0.0, 0.3]).unwrap(),
            LayerBlock::new(2, vec![3, 4], vec![1.0, 0.0, -1.0, 0.5, -0.5, 0.25, 0.75, 0.0, 0.2, 0.4, 0.6, 0.8]).unwrap(),
            LayerBlock::new(3, vec![3], vec![0.0, 0.1, -0.1]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn zero_weights_give_log_c_loss() {
        let arch = ArchitectureSpec::mlp(3, &[5], 7).unwrap();
        let m = LayeredModel::zeros(&arch.block_shapes()).unwrap();
        let out = forward(&m, &random_batch(9, 3, 7, 1)).unwrap();
        assert_eq!(out.loss, 7f64.ln());
    }

    #[test]
    fn duplicated_sample_has_the_same_loss() {
        let m = tiny_net();
        let s = sample(vec![0.3, -1.2], 2);
        let one = forward(&m, std::slice::from_ref(&s)).unwrap().loss;
        let two = forward(&m, &[s.clone(), s]).unwrap().loss;
        assert_eq!(one, two);
    }

    #[test]
    fn tiny_net_matches_hand_forward() {
        // Hand-computed forward pass for x = (1, 2), label 1.
        let x: [f64; 2] = [1.0, 2.0];
        let w1: [[f64; 2]; 4] = [[0.5, -0.25], [1.0, 0.75], [-0.5, 0.5], [0.25, 0.125]];
        let b1: [f64; 4] = [0.1, -0.2, 0.0, 0.3];
        let w2 = [[1.0, 0.0, -1.0, 0.5], [-0.5, 0.25, 0.75, 0.0], [0.2, 0.4, 0.6, 0.8]];
        let b2 = [0.0, 0.1, -0.1];
        let h: Vec<f64> = (0..4)
            .map(|o| (w1[o][0] * x[0] + w1[o][1] * x[1] + b1[o]).max(0.0))
            .collect();
        let z: Vec<f64> = (0..3)
            .map(|o| (0..4).map(|i| w2[o][i] * h[i]).sum::<f64>() + b2[o])
            .collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let expected = -(z[1].exp() / denom).ln();

        let out = forward(&tiny_net(), &[sample(x.to_vec(), 1)]).unwrap();
        assert!((out.loss - expected).abs() <= 1e-12);
        for (a, b) in out.logits[0].iter().zip(&z) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn input_errors() {
        let m = tiny_net();
        assert!(matches!(
            forward(&m, &[sample(vec![f64::NAN, 0.0], 0)]),
            Err(Error::NumericInput { sample: 0 })
        ));
        assert!(matches!(
            forward(&m, &[sample(vec![0.0, 0.0], 3)]),
            Err(Error::InvalidLabel { .. })
        ));
        assert!(matches!(
            forward(&m, &[sample(vec![0.0], 0)]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let arch = ArchitectureSpec::new(vec![(1, 2)]).unwrap();
        let m = LayeredModel::zeros(&arch.block_shapes()).unwrap();
        let batch = [sample(vec![0.0], 0), sample(vec![0.0], 1)];
        let g = backward(&m, &batch).unwrap();
        assert!(g.values().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let arch = ArchitectureSpec::mlp(2, &[4], 3).unwrap();
        for seed in 0..5 {
            let m = init_model(&arch, seed).unwrap().map_values(|i, v| v + 0.01 * i as f64);
            let batch = random_batch(6, 2, 3, seed + 100);
            let r = gradient_check(&m, &batch, 1e-5, 1e-6).unwrap();
            assert!(r.max_rel_error <= 1e-5, "{r:?}");
            assert!(r.checked > r.skipped_kinks);
        }
    }

    #[test]
    fn duplicated_batch_gives_the_same_gradient() {
        let m = init_model(&ArchitectureSpec::mlp(3, &[6], 4).unwrap(), 2).unwrap();
        let batch = random_batch(5, 3, 4, 3);
        let doubled: Vec<Sample> = batch.iter().chain(&batch).cloned().collect();
        let g1 = backward(&m, &batch).unwrap();
        let g2 = backward(&m, &doubled).unwrap();
        for (a, b) in g1.values().zip(g2.values()) {
            assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let m = init_model(&ArchitectureSpec::mlp(3, &[4], 2).unwrap(), 1).unwrap();
        let cfg = LocalTrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let out = client_update(&m, &shard(random_batch(7, 3, 2, 4), 2), &cfg, None).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn single_full_batch_step_matches_closed_form() {
        let m = init_model(&ArchitectureSpec::mlp(3, &[4], 2).unwrap(), 5).unwrap();
        let s = random_batch(1, 3, 2, 6);
        let cfg = LocalTrainConfig {
            epochs: 1,
            batch_size: 1,
            lr: 0.05,
            momentum: 0.0,
            prox_mu: 0.0,
            seed: 3,
        };
        let out = client_update(&m, &shard(s.clone(), 2), &cfg, None).unwrap();
        let g = backward(&m, &s).unwrap();
        for ((o, w), g) in out.values().zip(m.values()).zip(g.values()) {
            assert!((o - (w - 0.05 * g)).abs() <= 1e-12);
        }
    }

    #[test]
    fn proximal_term_vanishes_at_the_reference() {
        // Zero weights on a balanced zero-feature shard is a stationary point,
        // and the reference equals the start: nothing moves.
        let arch = ArchitectureSpec::new(vec![(1, 2)]).unwrap();
        let m = LayeredModel::zeros(&arch.block_shapes()).unwrap();
        let data = shard(vec![sample(vec![0.0], 0), sample(vec![0.0], 1)], 2);
        let cfg = LocalTrainConfig {
            epochs: 3,
            batch_size: 2,
            lr: 0.1,
            momentum: 0.9,
            prox_mu: 0.5,
            seed: 1,
        };
        let out = client_update(&m, &data, &cfg, Some(&m)).unwrap();
        for (a, b) in out.values().zip(m.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn proximal_term_pulls_towards_the_reference() {
        let arch = ArchitectureSpec::new(vec![(1, 2)]).unwrap();
        let m = LayeredModel::zeros(&arch.block_shapes()).unwrap().map_values(|_, _| 1.0);
        let reference = LayeredModel::zeros(&arch.block_shapes()).unwrap();
        let data = shard(vec![sample(vec![0.0], 0), sample(vec![0.0], 1)], 2);
        let cfg = LocalTrainConfig {
            epochs: 1,
            batch_size: 2,
            lr: 0.1,
            momentum: 0.0,
            prox_mu: 1.0,
            seed: 1,
        };
        let out = client_update(&m, &data, &cfg, Some(&reference)).unwrap();
        // Weights only see the proximal pull (zero features): 1 - 0.1 * 1.
        assert!((out.layer(0).values[0] - 0.9).abs() <= 1e-15);
    }

    #[test]
    fn client_update_errors() {
        let m = init_model(&ArchitectureSpec::mlp(3, &[4], 2).unwrap(), 1).unwrap();
        let cfg = LocalTrainConfig::default();
        assert!(matches!(
            client_update(&m, &shard(vec![], 2), &cfg, None),
            Err(Error::EmptyShard { client: 0 })
        ));
        let prox = LocalTrainConfig { prox_mu: 0.1, ..cfg.clone() };
        assert!(matches!(
            client_update(&m, &shard(random_batch(3, 3, 2, 1), 2), &prox, None),
            Err(Error::MissingReference { .. })
        ));
        let bad = LocalTrainConfig { momentum: 1.0, ..cfg };
        assert!(matches!(
            client_update(&m, &shard(random_batch(3, 3, 2, 1), 2), &bad, None),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn client_update_is_deterministic() {
        let m = init_model(&ArchitectureSpec::mlp(3, &[8], 3).unwrap(), 9).unwrap();
        let data = shard(random_batch(37, 3, 3, 10), 3);
        let cfg = LocalTrainConfig {
            batch_size: 5,
            seed: 77,
            ..Default::default()
        };
        let a = client_update(&m, &data, &cfg, None).unwrap();
        assert_eq!(a, client_update(&m, &data, &cfg, None).unwrap());
        assert_ne!(a, m);
        assert_eq!(local_iterations(37, &cfg), 5 * 8);
    }

    #[test]
    fn small_step_on_a_linear_model_decreases_loss() {
        let arch = ArchitectureSpec::new(vec![(4, 3)]).unwrap();
        let m = init_model(&arch, 3).unwrap();
        let data = shard(random_batch(20, 4, 3, 8), 3);
        let cfg = LocalTrainConfig {
            epochs: 1,
            batch_size: 20,
            lr: 0.01,
            momentum: 0.0,
            prox_mu: 0.0,
            seed: 0,
        };
        let before = forward(&m, &data.samples).unwrap().loss;
        let after = forward(&client_update(&m, &data, &cfg, None).unwrap(), &data.samples).unwrap().loss;
        assert!(after <= before);
    }

    #[test]
    fn evaluation_cases() {
        // Two separable blobs on the first axis and an explicit separator.
        let blobs: Vec<Sample> = (0..20)
            .map(|i| {
                let label = i % 2;
                let x = if label == 0 { -2.0 - 0.1 * i as f64 } else { 2.0 + 0.1 * i as f64 };
                sample(vec![x, 0.3], label)
            })
            .collect();
        let separator = LayeredModel::from_blocks(vec![
            LayerBlock::new(0, vec![2, 2], vec![-1.0, 0.0, 1.0, 0.0]).unwrap(),
            LayerBlock::new(1, vec![2], vec![0.0, 0.0]).unwrap(),
        ])
        .unwrap();
        assert_eq!(evaluate(&separator, &blobs).unwrap().accuracy, 1.0);

        // All-zero weights: every prediction ties and resolves to class 0.
        let zero = LayeredModel::zeros(&ArchitectureSpec::mlp(2, &[3], 4).unwrap().block_shapes()).unwrap();
        let balanced: Vec<Sample> = (0..40).map(|i| sample(vec![i as f64, 1.0], i % 4)).collect();
        assert_eq!(evaluate(&zero, &balanced).unwrap().accuracy, 0.25);

        assert_eq!(evaluate(&separator, &blobs[..1]).unwrap().accuracy, 1.0);
        assert!(matches!(evaluate(&separator, &[]), Err(Error::EmptyEval)));
    }
}
