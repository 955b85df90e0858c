//! Finite-width constructions that separate regions exactly.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::anchors::check_general_position;
use crate::error::{Error, Result};
use crate::graph_layer::{Activation, GraphLayer, PairwiseFunction};
use crate::linalg;
use crate::regions::{draw_categorical, sample_rng, uniform_in_ball, LabeledDataset};
use crate::sufficiency::{CodeMatrix, DEFAULT_COLLISION_TOL};

/// Bias used by [`construct_relu_separator`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// `b_j = −‖c_j‖²`. Orthogonal representatives all map to the zero code.
    FullNorm,
    /// `b_j = −½‖c_j‖²`, so that `Z_j(c_j) = ½‖c_j‖² > 0`.
    #[default]
    HalfNorm,
}

fn check_distinct_columns(points: ArrayView2<f64>) -> Result<()> {
    if points.ncols() == 0 {
        return Err(Error::Empty("representatives"));
    }
    if !points.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("representatives"));
    }
    for i in 0..points.ncols() {
        for j in i + 1..points.ncols() {
            if points.column(i) == points.column(j) {
                return Err(Error::DuplicateColumns(i, j));
            }
        }
    }
    Ok(())
}

fn check_codes_distinct(layer: &GraphLayer, points: ArrayView2<f64>) -> Result<()> {
    let codes = layer.forward_batch(points.t())?;
    let rows: Vec<Vec<f64>> = codes.rows().into_iter().map(|r| r.to_vec()).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if linalg::max_abs_difference(&rows[i], &rows[j]) <= DEFAULT_COLLISION_TOL {
                return Err(Error::CodeCollision(i, j));
            }
        }
    }
    Ok(())
}

fn squared_column_norms(points: ArrayView2<f64>) -> Array1<f64> {
    points.columns().into_iter().map(|c| linalg::dot(c, c)).collect()
}

/// Injective inner-product layer on a finite support given as the columns
/// of `support` (`p × m`).
pub fn construct_discrete_separator(support: ArrayView2<f64>) -> Result<GraphLayer> {
    check_distinct_columns(support)?;
    let gp = check_general_position(support)?;
    if !gp.nonsingular {
        return Err(Error::SingularGram {
            det: gp.gram_determinant,
        });
    }
    GraphLayer::unbiased(support.to_owned(), PairwiseFunction::InnerProduct, Activation::Identity)
}

/// Affine layer with anchors `c_j` and biases `−‖c_j‖²`.
pub fn construct_linear_separator(representatives: ArrayView2<f64>) -> Result<GraphLayer> {
    check_distinct_columns(representatives)?;
    let bias = -squared_column_norms(representatives);
    let layer = GraphLayer::new(
        representatives.to_owned(),
        bias,
        PairwiseFunction::InnerProduct,
        Activation::Identity,
    )?;
    check_codes_distinct(&layer, representatives)?;
    Ok(layer)
}

pub fn construct_relu_separator(representatives: ArrayView2<f64>, mode: BiasMode) -> Result<GraphLayer> {
    check_distinct_columns(representatives)?;
    let scale = match mode {
        BiasMode::FullNorm => 1.0,
        BiasMode::HalfNorm => 0.5,
    };
    let bias = squared_column_norms(representatives).mapv(|s| -scale * s);
    let layer = GraphLayer::new(
        representatives.to_owned(),
        bias,
        PairwiseFunction::InnerProduct,
        Activation::ReLU,
    )?;
    check_codes_distinct(&layer, representatives)?;
    Ok(layer)
}

/// Coordinate subset and reference pattern of one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRegion {
    pub coords: Vec<usize>,
    pub pattern: Vec<f64>,
}

impl PatchRegion {
    fn norm_sq(&self) -> f64 {
        self.pattern.iter().map(|v| v * v).sum()
    }

    fn value_at(&self, coord: usize) -> Option<f64> {
        self.coords.iter().position(|&c| c == coord).map(|k| self.pattern[k])
    }
}

/// Sparse-patch regions on `[0, 1]^p` with patch noise bound `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub p: usize,
    pub regions: Vec<PatchRegion>,
    pub delta: f64,
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidSpec(msg));
        if self.p == 0 {
            return invalid("ambient dimension must be positive".into());
        }
        if self.regions.is_empty() {
            return invalid("no regions".into());
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return invalid(format!("noise bound must be finite and non-negative, got {}", self.delta));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.coords.is_empty() {
                return invalid(format!("region {i} has an empty patch"));
            }
            if r.coords.len() != r.pattern.len() {
                return invalid(format!(
                    "region {i}: {} coordinates but {} pattern values",
                    r.coords.len(),
                    r.pattern.len()
                ));
            }
            if let Some(&c) = r.coords.iter().find(|&&c| c >= self.p) {
                return invalid(format!("region {i}: coordinate {c} outside 0..{}", self.p));
            }
            let mut sorted = r.coords.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != r.coords.len() {
                return invalid(format!("region {i}: repeated coordinate"));
            }
            if !r.pattern.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("patch pattern"));
            }
            if r.norm_sq() == 0.0 {
                return invalid(format!("region {i}: pattern has zero norm"));
            }
        }
        for i in 0..self.regions.len() {
            for j in i + 1..self.regions.len() {
                let shared = self.shared_coords(i, j);
                if !shared.is_empty()
                    && shared
                        .iter()
                        .all(|&c| self.regions[i].value_at(c) == self.regions[j].value_at(c))
                {
                    return Err(Error::PatchCondition { i, j, shared });
                }
            }
        }
        Ok(())
    }

    /// Sorted coordinates shared by the patches of regions `i` and `j`.
    pub fn shared_coords(&self, i: usize, j: usize) -> Vec<usize> {
        let mut shared: Vec<usize> = self.regions[i]
            .coords
            .iter()
            .copied()
            .filter(|c| self.regions[j].coords.contains(c))
            .collect();
        shared.sort_unstable();
        shared
    }

    /// Zero-padded patterns as the columns of a `p × m` matrix.
    pub fn padded_patterns(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.p, self.regions.len()));
        for (j, r) in self.regions.iter().enumerate() {
            for (&c, &v) in r.coords.iter().zip(&r.pattern) {
                out[[c, j]] = v;
            }
        }
        out
    }

    /// Worst-case gap between `Z_i` on region `i` and on region `j`, before
    /// noise, with every coordinate outside `𝓠_j` free in `[0, 1]`:
    /// `‖x_i‖² − Σ_{𝓠_i∩𝓠_j} x_i·x_j − Σ_{𝓠_i∖𝓠_j} max(0, x_i)`.
    pub fn inner_product_gap(&self, i: usize, j: usize) -> f64 {
        let (ri, rj) = (&self.regions[i], &self.regions[j]);
        let worst: f64 = ri
            .coords
            .iter()
            .zip(&ri.pattern)
            .map(|(&c, &v)| match rj.value_at(c) {
                Some(w) => v * w,
                None => v.max(0.0),
            })
            .sum();
        ri.norm_sq() - worst
    }
}

/// Sparse inner-product + ReLU layer: `α_i = x_i` on `𝓠_i`, zero elsewhere,
/// `β_i = −½‖x_i‖²`.
pub fn construct_conv_separator(spec: &PatchSpec) -> Result<GraphLayer> {
    spec.validate()?;
    let bias = spec.regions.iter().map(|r| -0.5 * r.norm_sq()).collect();
    GraphLayer::new(spec.padded_patterns(), bias, PairwiseFunction::InnerProduct, Activation::ReLU)
}

/// Samples from a [`PatchSpec`]: equal region weights, class `i` for region
/// `i` with probability one, coordinates outside the patch uniform on
/// `[0, 1]`, patch coordinates uniform in the `delta`-ball around the
/// pattern and clamped to `[0, 1]`.
pub fn sample_patched(spec: &PatchSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("sample size must be positive".into()));
    }
    let m = spec.regions.len();
    let weights = vec![1.0 / m as f64; m];
    let mut inputs = Array2::zeros((n, spec.p));
    let mut conditionals = Array2::zeros((n, m));
    let mut labels = Vec::with_capacity(n);
    let mut region_ids = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, i);
        let r = draw_categorical(&mut rng, &weights);
        let mut row = inputs.row_mut(i);
        row.iter_mut().for_each(|v| *v = rand::Rng::random(&mut rng));
        let region = &spec.regions[r];
        let patch = uniform_in_ball(&mut rng, &region.pattern, spec.delta);
        for (&c, v) in region.coords.iter().zip(patch) {
            row[c] = v.clamp(0.0, 1.0);
        }
        conditionals[[i, r]] = 1.0;
        labels.push(r);
        region_ids.push(r + 1);
    }
    LabeledDataset::new(inputs, labels, region_ids, conditionals)
}

/// `γ = Δ − 2δ‖x_i‖`.
pub fn margin_gamma(gap: f64, pattern_norm: f64, delta: f64) -> f64 {
    gap - 2.0 * delta * pattern_norm
}

/// Margin of coordinate `i` between regions `i` and `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMargin {
    pub i: usize,
    pub j: usize,
    /// `Δ_ij`, see [`PatchSpec::inner_product_gap`].
    pub gap: f64,
    pub gamma: f64,
    /// `min Z_i` over region `i` minus `max Z_i` over region `j`; `None` if
    /// either region has no samples.
    pub empirical: Option<f64>,
    /// `δ < Δ_ij / (2‖x_i‖)` and the ReLU does not clip the bound.
    pub guaranteed: bool,
    /// The worst region-`j` pre-activation of `Z_i` is negative even with
    /// noise, so the margin is `½‖x_i‖² − δ‖x_i‖` rather than `γ`.
    pub relu_clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    pub delta: f64,
    pub pairs: Vec<PairMargin>,
}

impl MarginReport {
    /// Smallest `empirical − γ` over guaranteed pairs.
    pub fn min_slack(&self) -> Option<f64> {
        self.pairs
            .iter()
            .filter(|p| p.guaranteed)
            .filter_map(|p| p.empirical.map(|e| e - p.gamma))
            .min_by(f64::total_cmp)
    }
}

/// Margins for every ordered pair of regions. `codes` are the outputs of
/// [`construct_conv_separator`] on `data`.
pub fn conv_pair_margin(spec: &PatchSpec, data: &LabeledDataset, codes: &CodeMatrix) -> Result<MarginReport> {
    spec.validate()?;
    let m = spec.regions.len();
    if data.region_count() > m {
        return Err(Error::InvalidParameter(format!(
            "dataset has {} regions but the patch spec has {m}",
            data.region_count()
        )));
    }
    if codes.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: codes.len(),
        });
    }
    if codes.dim() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: codes.dim(),
        });
    }
    // lowest[r][c] / highest[r][c]: extreme value of code coordinate c over region r.
    let mut lowest = vec![vec![f64::INFINITY; m]; m];
    let mut highest = vec![vec![f64::NEG_INFINITY; m]; m];
    for (row, &rid) in codes.codes().rows().into_iter().zip(data.region_ids()) {
        let r = rid - 1;
        for (c, &v) in row.iter().enumerate() {
            lowest[r][c] = lowest[r][c].min(v);
            highest[r][c] = highest[r][c].max(v);
        }
    }
    let delta = spec.delta;
    let mut pairs = Vec::with_capacity(m * m.saturating_sub(1));
    for i in 0..m {
        let norm_sq = spec.regions[i].norm_sq();
        let norm = norm_sq.sqrt();
        for j in (0..m).filter(|&j| j != i) {
            let gap = spec.inner_product_gap(i, j);
            let relu_clipped = gap > 0.5 * norm_sq + delta * norm;
            let empirical = (lowest[i][i].is_finite() && highest[j][i].is_finite())
                .then(|| lowest[i][i] - highest[j][i]);
            pairs.push(PairMargin {
                i,
                j,
                gap,
                gamma: margin_gamma(gap, norm, delta),
                empirical,
                guaranteed: delta < gap / (2.0 * norm) && !relu_clipped,
                relu_clipped,
            });
        }
    }
    Ok(MarginReport { delta, pairs })
}

/// Spatial output size `floor((H − k + 2·pd)/s) + 1` in each axis.
pub fn conv_output_shape(
    h: usize,
    w: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || k_h == 0 || k_w == 0 || stride == 0 {
        return Err(Error::InvalidParameter(
            "sizes, kernel and stride must be positive".into(),
        ));
    }
    let axis = |size: usize, kernel: usize| {
        let padded = size + 2 * padding;
        if kernel > padded {
            Err(Error::InvalidParameter(format!(
                "kernel {kernel} larger than padded input {padded}"
            )))
        } else {
            Ok((padded - kernel) / stride + 1)
        }
    };
    Ok((axis(h, k_h)?, axis(w, k_w)?))
}
