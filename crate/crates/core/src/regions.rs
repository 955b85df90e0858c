//! Region-separated synthetic distributions.
//!
//! A [`RegionSpec`] describes `m` disjoint Euclidean balls, each carrying a
//! class-conditional distribution `q_i`. Sampling produces a
//! [`LabeledDataset`] that stores the generator's ground-truth `P(Y | X = x)`
//! next to every sample, which is what the sufficiency diagnostics compare
//! against.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

const SIMPLEX_TOL: f64 = 1e-12;

/// One ball region with its class-conditional distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: Vec<f64>,
    pub radius: f64,
    pub conditional: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionalPerturbation {
    None,
    /// Moves mass between classes 0 and 1 linearly in `x_0 − c_0`, clipped
    /// to the simplex.
    LipschitzTilt { slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub regions: Vec<Region>,
    pub epsilon: f64,
    pub conditional_perturbation: ConditionalPerturbation,
}

impl RegionSpec {
    pub fn dim(&self) -> usize {
        self.regions.first().map_or(0, |r| r.center.len())
    }

    pub fn num_classes(&self) -> usize {
        self.regions.first().map_or(0, |r| r.conditional.len())
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidSpec(msg));
        if self.regions.is_empty() {
            return invalid("no regions".into());
        }
        let p = self.dim();
        let k = self.num_classes();
        if p == 0 {
            return invalid("regions must have at least one coordinate".into());
        }
        if k == 0 {
            return invalid("conditionals must have at least one class".into());
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.center.len() != p {
                return invalid(format!("region {i}: center has dimension {}, expected {p}", r.center.len()));
            }
            if !r.center.iter().all(|v| v.is_finite()) {
                return invalid(format!("region {i}: non-finite center"));
            }
            if !(r.radius.is_finite() && r.radius > 0.0) {
                return invalid(format!("region {i}: radius must be positive, got {}", r.radius));
            }
            if r.conditional.len() != k {
                return invalid(format!("region {i}: conditional has {} classes, expected {k}", r.conditional.len()));
            }
            if !on_simplex(&r.conditional) {
                return invalid(format!("region {i}: conditional is not a probability vector"));
            }
            if !(r.weight.is_finite() && r.weight >= 0.0) {
                return invalid(format!("region {i}: weight must be non-negative, got {}", r.weight));
            }
        }
        let total: f64 = self.regions.iter().map(|r| r.weight).sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return invalid(format!("weights sum to {total}, expected 1"));
        }
        for i in 0..self.regions.len() {
            for j in i + 1..self.regions.len() {
                let (a, b) = (&self.regions[i], &self.regions[j]);
                let dist = linalg::squared_distance_slice(&a.center, &b.center).sqrt();
                if dist <= a.radius + b.radius {
                    return invalid(format!(
                        "regions {i} and {j} overlap: center distance {dist} <= {}",
                        a.radius + b.radius
                    ));
                }
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return invalid(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if let ConditionalPerturbation::LipschitzTilt { slope } = self.conditional_perturbation {
            if !(slope.is_finite() && slope >= 0.0) {
                return invalid(format!("tilt slope must be non-negative, got {slope}"));
            }
            if k < 2 {
                return invalid("a tilt needs at least two classes".into());
            }
            let bound = self.tilt_variation_bound(slope);
            if bound > self.epsilon + SIMPLEX_TOL {
                return invalid(format!(
                    "tilt slope {slope} allows within-region variation {bound} > epsilon {}",
                    self.epsilon
                ));
            }
        }
        Ok(())
    }

    /// Largest within-region L1 variation a tilt with this slope can produce:
    /// the shift moves by at most `slope · 2ρ` and touches two classes.
    fn tilt_variation_bound(&self, slope: f64) -> f64 {
        let max_radius = self.regions.iter().map(|r| r.radius).fold(0.0, f64::max);
        4.0 * slope * max_radius
    }

    /// Ground-truth `P(Y | X = x)` for a point of region `index` (0-based).
    pub fn conditional_at(&self, index: usize, x: ArrayView1<f64>) -> Vec<f64> {
        let region = &self.regions[index];
        let mut q = region.conditional.clone();
        if let ConditionalPerturbation::LipschitzTilt { slope } = self.conditional_perturbation {
            let shift = (slope * (x[0] - region.center[0])).clamp(-q[0], q[1]);
            q[0] += shift;
            q[1] -= shift;
        }
        q
    }

    /// `count` balls of the given radius with centers drawn uniformly in
    /// `[low, high]^dim` and pairwise separated by at least `min_separation`.
    /// Region `i` gets the one-hot conditional on class `i mod classes` and
    /// all regions share equal weight.
    #[allow(clippy::too_many_arguments)]
    pub fn separated_balls(
        count: usize,
        dim: usize,
        radius: f64,
        min_separation: f64,
        low: f64,
        high: f64,
        classes: usize,
        seed: u64,
    ) -> Result<RegionSpec> {
        if count == 0 || dim == 0 || classes == 0 {
            return Err(Error::InvalidParameter("count, dim and classes must be positive".into()));
        }
        if low.partial_cmp(&high) != Some(std::cmp::Ordering::Less) {
            return Err(Error::InvalidParameter(format!("empty box [{low}, {high}]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while centers.len() < count {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::InvalidParameter(format!(
                    "could not place {count} centers with separation {min_separation} in [{low}, {high}]^{dim}"
                )));
            }
            let c: Vec<f64> = (0..dim).map(|_| rng.random_range(low..high)).collect();
            let ok = centers
                .iter()
                .all(|o| linalg::squared_distance_slice(o, &c).sqrt() >= min_separation);
            if ok {
                centers.push(c);
            }
        }
        let regions = centers
            .into_iter()
            .enumerate()
            .map(|(i, center)| {
                let mut conditional = vec![0.0; classes];
                conditional[i % classes] = 1.0;
                Region {
                    center,
                    radius,
                    conditional,
                    weight: 1.0 / count as f64,
                }
            })
            .collect::<Vec<_>>();
        let mut spec = RegionSpec {
            regions,
            epsilon: 0.0,
            conditional_perturbation: ConditionalPerturbation::None,
        };
        normalize_weights(&mut spec.regions);
        spec.validate()?;
        Ok(spec)
    }
}

// Equal weights of 1/count may not sum to exactly 1; push the residue into the last one.
fn normalize_weights(regions: &mut [Region]) {
    let head: f64 = regions[..regions.len() - 1].iter().map(|r| r.weight).sum();
    if let Some(last) = regions.last_mut() {
        last.weight = 1.0 - head;
    }
}

/// Samples `(X, Y)` with per-sample region ids (1-based) and the true
/// conditional `P(Y | X = x_i)` for every row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    region_ids: Vec<usize>,
    true_conditionals: Array2<f64>,
}

impl LabeledDataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        region_ids: Vec<usize>,
        true_conditionals: Array2<f64>,
    ) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        for len in [labels.len(), region_ids.len(), true_conditionals.nrows()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset inputs"));
        }
        let k = true_conditionals.ncols();
        for (i, row) in true_conditionals.rows().into_iter().enumerate() {
            let row = row.to_vec();
            if !on_simplex(&row) {
                return Err(Error::InvalidParameter(format!(
                    "row {i}: true conditional is not a probability vector"
                )));
            }
            if labels[i] >= k {
                return Err(Error::InvalidParameter(format!(
                    "row {i}: label {} outside 0..{k}",
                    labels[i]
                )));
            }
            if region_ids[i] == 0 {
                return Err(Error::InvalidParameter(format!("row {i}: region ids start at 1")));
            }
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            region_ids,
            true_conditionals,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.true_conditionals.ncols()
    }

    /// Largest region id present.
    pub fn region_count(&self) -> usize {
        self.region_ids.iter().copied().max().unwrap_or(0)
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn region_ids(&self) -> &[usize] {
        &self.region_ids
    }

    pub fn true_conditionals(&self) -> ArrayView2<'_, f64> {
        self.true_conditionals.view()
    }

    /// Same samples with region ids replaced, e.g. by partition cells.
    pub fn with_region_ids(&self, region_ids: Vec<usize>) -> Result<Self> {
        LabeledDataset::new(
            self.inputs.clone(),
            self.labels.clone(),
            region_ids,
            self.true_conditionals.clone(),
        )
    }

    /// Sample counts per region id, indexed by id − 1.
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.region_count()];
        for &r in &self.region_ids {
            sizes[r - 1] += 1;
        }
        sizes
    }
}

fn on_simplex(q: &[f64]) -> bool {
    q.iter().all(|&v| v.is_finite() && v >= 0.0) && (q.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}

/// Random stream dedicated to sample `index`, so samples are independent of
/// generation order.
pub(crate) fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub(crate) fn draw_categorical<R: Rng>(rng: &mut R, probabilities: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (c, &p) in probabilities.iter().enumerate() {
        if p > 0.0 {
            last_positive = c;
            cumulative += p;
            if u < cumulative {
                return c;
            }
        }
    }
    last_positive
}

/// Uniform point in the closed ball of radius `radius` around `center`.
pub(crate) fn uniform_in_ball<R: Rng>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    let p = center.len();
    let mut direction: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return center.to_vec();
    }
    let u: f64 = rng.random();
    // Shrink by a hair so rounding never pushes a sample past the boundary.
    let r = radius * (1.0 - 1e-12) * u.powf(1.0 / p as f64);
    for (d, c) in direction.iter_mut().zip(center) {
        *d = c + r * *d / norm;
    }
    direction
}

pub fn sample_regioned(spec: &RegionSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("sample size must be positive".into()));
    }
    let p = spec.dim();
    let k = spec.num_classes();
    let weights: Vec<f64> = spec.regions.iter().map(|r| r.weight).collect();
    let mut inputs = Array2::zeros((n, p));
    let mut conditionals = Array2::zeros((n, k));
    let mut labels = Vec::with_capacity(n);
    let mut region_ids = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, i);
        let r = draw_categorical(&mut rng, &weights);
        let region = &spec.regions[r];
        let x = uniform_in_ball(&mut rng, &region.center, region.radius);
        let xv = ArrayView1::from(&x);
        let q = spec.conditional_at(r, xv);
        labels.push(draw_categorical(&mut rng, &q));
        region_ids.push(r + 1);
        inputs.row_mut(i).assign(&xv);
        conditionals.row_mut(i).assign(&ArrayView1::from(&q));
    }
    LabeledDataset::new(inputs, labels, region_ids, conditionals)
}

/// `n × dim` matrix of i.i.d. uniform points on `[0, 1]^dim`.
pub fn sample_uniform_box(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut out = Array2::zeros((n, dim));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let mut rng = sample_rng(seed, i);
        row.iter_mut().for_each(|v| *v = rng.random());
    }
    out
}

/// Unlabelled samples wrapped as a single-region, single-class dataset.
pub fn unlabeled_dataset(inputs: Array2<f64>) -> Result<LabeledDataset> {
    let n = inputs.nrows();
    LabeledDataset::new(inputs, vec![0; n], vec![1; n], Array2::ones((n, 1)))
}

/// A distribution on finitely many support points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSpec {
    pub points: Vec<Vec<f64>>,
    pub conditionals: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl DiscreteSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.points.len();
        if m == 0 {
            return Err(Error::InvalidSpec("no support points".into()));
        }
        if self.conditionals.len() != m || self.weights.len() != m {
            return Err(Error::InvalidSpec(
                "points, conditionals and weights must have equal length".into(),
            ));
        }
        let p = self.points[0].len();
        let k = self.conditionals[0].len();
        for (i, (x, q)) in self.points.iter().zip(&self.conditionals).enumerate() {
            if x.len() != p || !x.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidSpec(format!("support point {i} is malformed")));
            }
            if q.len() != k || !on_simplex(q) {
                return Err(Error::InvalidSpec(format!("conditional {i} is not a probability vector")));
            }
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL
        {
            return Err(Error::InvalidSpec("weights must be non-negative and sum to 1".into()));
        }
        Ok(())
    }

    /// Support points as the columns of a `p × m` matrix.
    pub fn support_matrix(&self) -> Array2<f64> {
        let p = self.points[0].len();
        Array2::from_shape_fn((p, self.points.len()), |(i, j)| self.points[j][i])
    }
}

pub fn sample_discrete(spec: &DiscreteSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("sample size must be positive".into()));
    }
    let p = spec.points[0].len();
    let k = spec.conditionals[0].len();
    let mut inputs = Array2::zeros((n, p));
    let mut conditionals = Array2::zeros((n, k));
    let mut labels = Vec::with_capacity(n);
    let mut region_ids = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, i);
        let r = draw_categorical(&mut rng, &spec.weights);
        inputs.row_mut(i).assign(&ArrayView1::from(&spec.points[r]));
        conditionals.row_mut(i).assign(&ArrayView1::from(&spec.conditionals[r]));
        labels.push(draw_categorical(&mut rng, &spec.conditionals[r]));
        region_ids.push(r + 1);
    }
    LabeledDataset::new(inputs, labels, region_ids, conditionals)
}

/// Within-region L1 variation of the stored true conditionals.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionVariation {
    /// Region id to max pairwise `‖q(x) − q(x')‖₁`; a single sample gives 0.
    pub per_region: BTreeMap<usize, f64>,
    pub overall: f64,
    /// Region ids below the largest id that have no samples.
    pub skipped: Vec<usize>,
}

pub fn within_region_variation(data: &LabeledDataset) -> Result<RegionVariation> {
    let sizes = data.region_sizes();
    if data.len() < 2 || sizes.iter().all(|&s| s < 2) {
        return Err(Error::InvalidParameter(
            "need at least one region with two samples".into(),
        ));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &r) in data.region_ids().iter().enumerate() {
        members.entry(r).or_default().push(i);
    }
    let q = data.true_conditionals();
    let q = q.as_standard_layout();
    let k = data.num_classes();
    let q = q.as_slice().expect("standard layout");
    let mut per_region = BTreeMap::new();
    for (&r, idx) in &members {
        let mut worst = 0.0_f64;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                worst = worst.max(linalg::l1_distance(&q[i * k..(i + 1) * k], &q[j * k..(j + 1) * k]));
            }
        }
        per_region.insert(r, worst);
    }
    let skipped = (1..=sizes.len()).filter(|r| sizes[r - 1] == 0).collect();
    let overall = per_region.values().copied().fold(0.0, f64::max);
    Ok(RegionVariation {
        per_region,
        overall,
        skipped,
    })
}

/// Grid partition returned by [`epsilon_partition`].
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Cell id (1-based) of every sample.
    pub assignment: Vec<usize>,
    pub cell_count: usize,
    /// Upper bound on the diameter of every cell.
    pub cell_diameter: f64,
    pub cells_per_axis: Vec<usize>,
}

/// Partitions the sample into axis-aligned grid cells of diameter at most
/// `eps / lipschitz_bound` so that the true conditional varies by at most
/// `eps` (in L1) inside each cell.
///
/// The conditional must satisfy `‖q(x) − q(x')‖₁ ≤ L ‖x − x'‖` on the
/// sample; this is checked on every pair. When the whole sample already
/// varies by at most `eps`, a single cell is returned.
pub fn epsilon_partition(data: &LabeledDataset, eps: f64, lipschitz_bound: f64) -> Result<Partition> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    if !(lipschitz_bound.is_finite() && lipschitz_bound > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "Lipschitz bound must be positive, got {lipschitz_bound}"
        )));
    }
    let n = data.len();
    let p = data.dim();
    let k = data.num_classes();
    let x = data.inputs().as_standard_layout().into_owned();
    let q = data.true_conditionals().as_standard_layout().into_owned();
    let xs = x.as_slice().expect("standard layout");
    let qs = q.as_slice().expect("standard layout");

    let mut global_variation = 0.0_f64;
    for i in 0..n {
        for j in i + 1..n {
            let dq = linalg::l1_distance(&qs[i * k..(i + 1) * k], &qs[j * k..(j + 1) * k]);
            let dx = linalg::squared_distance_slice(&xs[i * p..(i + 1) * p], &xs[j * p..(j + 1) * p]).sqrt();
            if dq > lipschitz_bound * dx + 1e-12 {
                return Err(Error::LipschitzViolation {
                    bound: lipschitz_bound,
                    i,
                    j,
                    conditional_distance: dq,
                    input_distance: dx,
                });
            }
            global_variation = global_variation.max(dq);
        }
    }

    let mut lo = vec![f64::INFINITY; p];
    let mut hi = vec![f64::NEG_INFINITY; p];
    for row in x.rows() {
        for (a, &v) in row.iter().enumerate() {
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    let bbox_diameter = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| (h - l) * (h - l))
        .sum::<f64>()
        .sqrt();

    if global_variation <= eps {
        return Ok(Partition {
            assignment: vec![1; n],
            cell_count: 1,
            cell_diameter: bbox_diameter,
            cells_per_axis: vec![1; p],
        });
    }

    let diameter = eps / lipschitz_bound;
    let side = diameter / (p as f64).sqrt();
    let cells_per_axis: Vec<usize> = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| (((h - l) / side).ceil() as usize).max(1))
        .collect();
    let sides: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .zip(&cells_per_axis)
        .map(|((l, h), &c)| if h > l { (h - l) / c as f64 } else { side })
        .collect();

    let keys: Vec<Vec<usize>> = x
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(a, &v)| (((v - lo[a]) / sides[a]).floor() as usize).min(cells_per_axis[a] - 1))
                .collect()
        })
        .collect();
    let mut ids: BTreeMap<&[usize], usize> = BTreeMap::new();
    for key in &keys {
        ids.entry(key.as_slice()).or_insert(0);
    }
    for (next, id) in ids.values_mut().enumerate() {
        *id = next + 1;
    }
    let assignment = keys.iter().map(|key| ids[key.as_slice()]).collect();
    let cell_diameter = sides.iter().map(|s| s * s).sum::<f64>().sqrt();
    Ok(Partition {
        assignment,
        cell_count: ids.len(),
        cell_diameter,
        cells_per_axis,
    })
}
