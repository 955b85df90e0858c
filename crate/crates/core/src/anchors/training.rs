//! Mini-batch SGD on the anchors, bias and linear readout of an
//! inner-product layer.
//!
//! Prediction is `P = σ(XA + b) W`. The squared-error loss regresses `P` on
//! the stored true conditionals; cross-entropy applies a softmax to `P` and
//! scores the sampled labels.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::covering_radius;
use crate::error::{Error, Result};
use crate::graph_layer::{Activation, GraphLayer, PairwiseFunction};
use crate::linalg;
use crate::regions::LabeledDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    MeanSquaredError,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub gradient_clip: Option<f64>,
    pub loss: Loss,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is accepted: it is the identity update.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if let Some(c) = self.gradient_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidParameter(format!("gradient clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlagKind {
    /// An anchor left the data bounding box inflated by a factor of 2.
    UnboundedIterates,
    /// Two anchor columns coincide within 1e-9.
    SnapshotCollision,
}

impl FlagKind {
    pub fn name(&self) -> &'static str {
        match self {
            FlagKind::UnboundedIterates => "unbounded-iterates",
            FlagKind::SnapshotCollision => "snapshot-collision",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceFlag {
    pub epoch: usize,
    pub kind: FlagKind,
}

/// Per-epoch record of a training run; index 0 is the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub anchors: Vec<Array2<f64>>,
    pub loss: Vec<f64>,
    pub covering_radius: Vec<f64>,
    pub bbox_min: Vec<Vec<f64>>,
    pub bbox_max: Vec<Vec<f64>>,
    /// Largest single-step anchor displacement during each epoch.
    pub max_step_displacement: Vec<f64>,
    pub flags: Vec<TraceFlag>,
}

impl TrainingTrace {
    pub fn epochs(&self) -> usize {
        self.loss.len().saturating_sub(1)
    }

    pub fn flags_at(&self, epoch: usize) -> impl Iterator<Item = &TraceFlag> {
        self.flags.iter().filter(move |f| f.epoch == epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub anchors: Array2<f64>,
    pub bias: Array1<f64>,
    pub readout: Array2<f64>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        let sq = |it: &mut dyn Iterator<Item = &f64>| it.map(|v| v * v).sum::<f64>();
        (sq(&mut self.anchors.iter()) + sq(&mut self.bias.iter()) + sq(&mut self.readout.iter())).sqrt()
    }

    fn scale(&mut self, factor: f64) {
        self.anchors *= factor;
        self.bias *= factor;
        self.readout *= factor;
    }

    fn non_finite_part(&self) -> Option<&'static str> {
        if !self.anchors.iter().all(|v| v.is_finite()) {
            Some("anchors")
        } else if !self.bias.iter().all(|v| v.is_finite()) {
            Some("bias")
        } else if !self.readout.iter().all(|v| v.is_finite()) {
            Some("readout")
        } else {
            None
        }
    }
}

fn check_trainable(layer: &GraphLayer, readout: ArrayView2<f64>, k: usize) -> Result<()> {
    if layer.pairwise() != PairwiseFunction::InnerProduct {
        return Err(Error::InvalidParameter(format!(
            "training supports InnerProduct layers only, got {}",
            layer.pairwise().name()
        )));
    }
    if readout.nrows() != layer.width() {
        return Err(Error::DimensionMismatch {
            expected: layer.width(),
            got: readout.nrows(),
        });
    }
    if readout.ncols() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: readout.ncols(),
        });
    }
    Ok(())
}

/// Mean loss over the batch, evaluated through the layer's forward pass.
pub fn batch_loss(
    layer: &GraphLayer,
    readout: ArrayView2<f64>,
    inputs: ArrayView2<f64>,
    conditionals: ArrayView2<f64>,
    labels: &[usize],
    loss: Loss,
) -> Result<f64> {
    let predictions = layer.forward_batch(inputs)?.dot(&readout);
    let b = inputs.nrows() as f64;
    Ok(match loss {
        Loss::MeanSquaredError => {
            predictions
                .iter()
                .zip(conditionals.iter())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / b
        }
        Loss::CrossEntropy => {
            predictions
                .rows()
                .into_iter()
                .zip(labels)
                .map(|(row, &y)| log_sum_exp(row.iter().copied()) - row[y])
                .sum::<f64>()
                / b
        }
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Loss and closed-form gradients with respect to anchors, bias and readout.
pub fn loss_and_gradients(
    layer: &GraphLayer,
    readout: ArrayView2<f64>,
    inputs: ArrayView2<f64>,
    conditionals: ArrayView2<f64>,
    labels: &[usize],
    loss: Loss,
) -> Result<(f64, Gradients)> {
    check_trainable(layer, readout, conditionals.ncols())?;
    if inputs.ncols() != layer.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: layer.input_dim(),
            got: inputs.ncols(),
        });
    }
    let b = inputs.nrows() as f64;
    let activation = layer.activation();

    let pre = inputs.dot(&layer.anchors()) + layer.bias();
    let hidden = pre.mapv(|v| activation.apply_scalar(v));
    let predictions = hidden.dot(&readout);

    let (value, d_pred) = match loss {
        Loss::MeanSquaredError => {
            let residual = &predictions - &conditionals;
            let value = residual.iter().map(|r| r * r).sum::<f64>() / b;
            (value, residual * (2.0 / b))
        }
        Loss::CrossEntropy => {
            let mut d = predictions.clone();
            let mut value = 0.0;
            for (mut row, &y) in d.axis_iter_mut(Axis(0)).zip(labels) {
                let lse = log_sum_exp(row.iter().copied());
                value += lse - row[y];
                row.mapv_inplace(|v| (v - lse).exp());
                row[y] -= 1.0;
            }
            (value / b, d / b)
        }
    };

    let d_readout = hidden.t().dot(&d_pred);
    let mut d_pre = d_pred.dot(&readout.t());
    d_pre.zip_mut_with(&pre, |g, &h| *g *= activation.derivative(h));
    let d_anchors = inputs.t().dot(&d_pre);
    let d_bias = d_pre.sum_axis(Axis(0));

    Ok((
        value,
        Gradients {
            anchors: d_anchors,
            bias: d_bias,
            readout: d_readout,
        },
    ))
}

const COLLISION_TOL: f64 = 1e-9;

struct Monitor {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Monitor {
    fn new(inputs: ArrayView2<f64>) -> Self {
        let p = inputs.ncols();
        let mut lo = vec![f64::INFINITY; p];
        let mut hi = vec![f64::NEG_INFINITY; p];
        for row in inputs.rows() {
            for (a, &v) in row.iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        // Same center, twice the side length.
        let (lo, hi) = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| {
                let half = h - l;
                let mid = 0.5 * (l + h);
                (mid - half, mid + half)
            })
            .unzip();
        Monitor { lo, hi }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        trace: &mut TrainingTrace,
        epoch: usize,
        layer: &GraphLayer,
        readout: ArrayView2<f64>,
        data: &LabeledDataset,
        loss: Loss,
        displacement: f64,
    ) -> Result<()> {
        let anchors = layer.anchors();
        let p = anchors.nrows();
        let mut bmin = vec![f64::INFINITY; p];
        let mut bmax = vec![f64::NEG_INFINITY; p];
        let mut escaped = false;
        for column in anchors.columns() {
            for (a, &v) in column.iter().enumerate() {
                bmin[a] = bmin[a].min(v);
                bmax[a] = bmax[a].max(v);
                escaped |= v < self.lo[a] || v > self.hi[a];
            }
        }
        if escaped {
            trace.flags.push(TraceFlag {
                epoch,
                kind: FlagKind::UnboundedIterates,
            });
        }
        let columns: Vec<Vec<f64>> = anchors.columns().into_iter().map(|c| c.to_vec()).collect();
        let collided = (0..columns.len()).any(|i| {
            (i + 1..columns.len())
                .any(|j| linalg::max_abs_difference(&columns[i], &columns[j]) <= COLLISION_TOL)
        });
        if collided {
            trace.flags.push(TraceFlag {
                epoch,
                kind: FlagKind::SnapshotCollision,
            });
        }
        trace.anchors.push(anchors.to_owned());
        trace.loss.push(batch_loss(
            layer,
            readout,
            data.inputs(),
            data.true_conditionals(),
            data.labels(),
            loss,
        )?);
        trace
            .covering_radius
            .push(covering_radius(anchors, data.inputs())?);
        trace.bbox_min.push(bmin);
        trace.bbox_max.push(bmax);
        trace.max_step_displacement.push(displacement);
        Ok(())
    }
}

/// Trains anchors, bias and readout (`m × K`) by mini-batch SGD.
///
/// Batches are drawn from a permutation reshuffled every epoch with a
/// generator seeded by `cfg.seed`. When `gradient_clip = c` is set the whole
/// gradient is rescaled to norm at most `c`, so no anchor moves more than
/// `η·c` in one step.
pub fn train_layer_sgd(
    layer: &GraphLayer,
    readout: ArrayView2<f64>,
    data: &LabeledDataset,
    cfg: &TrainingConfig,
) -> Result<(GraphLayer, Array2<f64>, TrainingTrace)> {
    cfg.validate()?;
    check_trainable(layer, readout, data.num_classes())?;
    if data.dim() != layer.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: layer.input_dim(),
            got: data.dim(),
        });
    }
    if !readout.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("readout"));
    }

    let n = data.len();
    let eta = cfg.learning_rate;
    let monitor = Monitor::new(data.inputs());
    let mut trace = TrainingTrace {
        anchors: Vec::new(),
        loss: Vec::new(),
        covering_radius: Vec::new(),
        bbox_min: Vec::new(),
        bbox_max: Vec::new(),
        max_step_displacement: Vec::new(),
        flags: Vec::new(),
    };

    let mut current = layer.clone();
    let mut anchors = layer.anchors().to_owned();
    let mut bias = layer.bias().to_owned();
    let mut readout = readout.to_owned();
    monitor.record(&mut trace, 0, &current, readout.view(), data, cfg.loss, 0.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut displacement = 0.0_f64;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let inputs = data.inputs().select(Axis(0), batch);
            let targets = data.true_conditionals().select(Axis(0), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let (_, mut grad) = loss_and_gradients(
                &current,
                readout.view(),
                inputs.view(),
                targets.view(),
                &labels,
                cfg.loss,
            )?;
            if let Some(parameter) = grad.non_finite_part() {
                return Err(Error::NonFiniteGradient {
                    epoch,
                    step,
                    parameter,
                });
            }
            if let Some(clip) = cfg.gradient_clip {
                let norm = grad.norm();
                if norm > clip {
                    grad.scale(clip / norm);
                }
            }
            let step_move = grad
                .anchors
                .columns()
                .into_iter()
                .map(|c| eta * linalg::norm(c))
                .fold(0.0, f64::max);
            displacement = displacement.max(step_move);

            anchors.scaled_add(-eta, &grad.anchors);
            bias.scaled_add(-eta, &grad.bias);
            readout.scaled_add(-eta, &grad.readout);
            current = current.with_parameters(anchors.clone(), bias.clone())?;
        }
        monitor.record(
            &mut trace,
            epoch,
            &current,
            readout.view(),
            data,
            cfg.loss,
            displacement,
        )?;
    }
    Ok((current, readout, trace))
}

/// Largest norm-wise relative error `‖g − f‖ / max(‖g‖, ‖f‖)` between
/// [`loss_and_gradients`] and central finite differences of [`batch_loss`]
/// over `instances` random small problems (dimensions up to 4, batches up to
/// 8, both losses, ReLU layers).
pub fn gradient_check(instances: usize, seed: u64) -> Result<f64> {
    const STEP: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut done = 0;
    while done < instances {
        let p = rng.random_range(1..=4);
        let m = rng.random_range(1..=4);
        let k = rng.random_range(2..=4);
        let b = rng.random_range(1..=8);
        let loss = if done % 2 == 0 { Loss::MeanSquaredError } else { Loss::CrossEntropy };
        let mut normal = |shape: (usize, usize)| Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal));
        let anchors = normal((p, m));
        let bias = normal((1, m)).row(0).to_owned();
        let readout = normal((m, k));
        let inputs = normal((b, p));
        let logits = normal((b, k));
        let targets = logits.mapv(f64::exp);
        let targets = &targets / &targets.sum_axis(Axis(1)).insert_axis(Axis(1));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let layer = GraphLayer::new(anchors, bias, PairwiseFunction::InnerProduct, Activation::ReLU)?;
        let pre = inputs.dot(&layer.anchors()) + layer.bias();
        if pre.iter().any(|v| v.abs() < 1e-3) {
            // Finite differences straddling the ReLU kink are meaningless.
            continue;
        }
        let (_, grad) = loss_and_gradients(&layer, readout.view(), inputs.view(), targets.view(), &labels, loss)?;
        let eval = |l: &GraphLayer, r: &Array2<f64>| batch_loss(l, r.view(), inputs.view(), targets.view(), &labels, loss);

        let mut diff_sq = 0.0;
        let mut analytic_sq = 0.0;
        let mut numeric_sq = 0.0;
        let mut accumulate = |analytic: f64, numeric: f64| {
            diff_sq += (analytic - numeric).powi(2);
            analytic_sq += analytic * analytic;
            numeric_sq += numeric * numeric;
        };
        for idx in 0..p * m {
            let (r, c) = (idx / m, idx % m);
            let shifted = |h: f64| -> Result<f64> {
                let mut a = layer.anchors().to_owned();
                a[[r, c]] += h;
                eval(&layer.with_parameters(a, layer.bias().to_owned())?, &readout)
            };
            let numeric = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
            accumulate(grad.anchors[[r, c]], numeric);
        }
        for j in 0..m {
            let shifted = |h: f64| -> Result<f64> {
                let mut bias = layer.bias().to_owned();
                bias[j] += h;
                eval(&layer.with_parameters(layer.anchors().to_owned(), bias)?, &readout)
            };
            let numeric = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
            accumulate(grad.bias[j], numeric);
        }
        for idx in 0..m * k {
            let (r, c) = (idx / k, idx % k);
            let shifted = |h: f64| -> Result<f64> {
                let mut w = readout.clone();
                w[[r, c]] += h;
                eval(&layer, &w)
            };
            let numeric = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
            accumulate(grad.readout[[r, c]], numeric);
        }
        let scale = analytic_sq.sqrt().max(numeric_sq.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff_sq.sqrt() / scale);
        }
        done += 1;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::{sample_regioned, ConditionalPerturbation, Region, RegionSpec};
    use ndarray::array;

    fn small_data() -> LabeledDataset {
        let spec = RegionSpec {
            regions: vec![
                Region {
                    center: vec![0.0, 0.0],
                    radius: 1.0,
                    conditional: vec![0.8, 0.2],
                    weight: 0.5,
                },
                Region {
                    center: vec![3.0, 0.0],
                    radius: 1.0,
                    conditional: vec![0.2, 0.8],
                    weight: 0.5,
                },
            ],
            epsilon: 0.0,
            conditional_perturbation: ConditionalPerturbation::None,
        };
        sample_regioned(&spec, 64, 2).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let data = small_data();
        let layer = GraphLayer::unbiased(
            array![[1.0, 0.0, 2.5], [0.0, 1.0, -0.5]],
            PairwiseFunction::InnerProduct,
            Activation::ReLU,
        )
        .unwrap();
        let readout = Array2::from_elem((3, 2), 0.1);
        let cfg = TrainingConfig {
            learning_rate: 0.0,
            epochs: 4,
            batch_size: 8,
            gradient_clip: None,
            loss: Loss::CrossEntropy,
            seed: 1,
        };
        let (trained, w, trace) = train_layer_sgd(&layer, readout.view(), &data, &cfg).unwrap();
        assert_eq!(trained, layer);
        assert_eq!(w, readout);
        assert_eq!(trace.covering_radius.len(), 5);
        assert!(trace.covering_radius.windows(2).all(|w| w[0] == w[1]));
        assert!(trace.loss.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn rejects_non_inner_product_layers() {
        let data = small_data();
        let layer = GraphLayer::unbiased(
            Array2::eye(2),
            PairwiseFunction::gaussian(1.0).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        let cfg = TrainingConfig {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 4,
            gradient_clip: None,
            loss: Loss::MeanSquaredError,
            seed: 0,
        };
        assert!(train_layer_sgd(&layer, Array2::zeros((2, 2)).view(), &data, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainingConfig {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 4,
            gradient_clip: Some(1.0),
            loss: Loss::MeanSquaredError,
            seed: 0,
        };
        cfg.validate().unwrap();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        cfg.epochs = 1;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 1;
        cfg.gradient_clip = Some(0.0);
        assert!(cfg.validate().is_err());
        cfg.gradient_clip = None;
        cfg.learning_rate = f64::NAN;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn diverging_training_aborts() {
        let data = small_data();
        let layer = GraphLayer::unbiased(
            array![[1.0, 0.5], [0.3, 1.0]],
            PairwiseFunction::InnerProduct,
            Activation::Identity,
        )
        .unwrap();
        let cfg = TrainingConfig {
            learning_rate: 1e6,
            epochs: 50,
            batch_size: 64,
            gradient_clip: None,
            loss: Loss::MeanSquaredError,
            seed: 0,
        };
        let err = train_layer_sgd(&layer, Array2::ones((2, 2)).view(), &data, &cfg).unwrap_err();
        assert!(
            matches!(err, Error::NonFiniteGradient { .. } | Error::NonFinite(_)),
            "{err}"
        );
    }
}
