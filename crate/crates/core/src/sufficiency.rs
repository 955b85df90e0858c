//! Sufficiency diagnostics over a code matrix `Z`.
//!
//! Injectivity is probed by [`collision_report`], region separation by
//! [`region_separation_report`], and information loss by comparing a
//! leave-one-out k-NN estimate of `P(Y | Z)` against the generator's stored
//! `P(Y | X)` in [`sufficiency_gap`]. Running the same estimator on the raw
//! inputs gives the noise floor, which isolates estimation error from loss
//! of information.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{s, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::graph_layer::{GraphLayer, Network};
use crate::linalg;
use crate::regions::LabeledDataset;

/// Absolute per-coordinate tolerance under which two codes collide.
pub const DEFAULT_COLLISION_TOL: f64 = 1e-9;

/// Maximum number of colliding pairs kept in a [`CollisionReport`].
pub const MAX_REPORTED_PAIRS: usize = 100;

/// Codes of `n` samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    codes: Array2<f64>,
    provenance: String,
}

impl CodeMatrix {
    pub fn new(codes: Array2<f64>, provenance: impl Into<String>) -> Result<Self> {
        if !codes.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("codes"));
        }
        Ok(CodeMatrix {
            codes: codes.as_standard_layout().into_owned(),
            provenance: provenance.into(),
        })
    }

    pub fn from_layer(layer: &GraphLayer, inputs: ArrayView2<f64>) -> Result<Self> {
        let provenance = format!(
            "{} layer, {:?} activation, m={}",
            layer.pairwise().name(),
            layer.activation(),
            layer.width()
        );
        CodeMatrix::new(layer.forward_batch(inputs)?, provenance)
    }

    pub fn from_network(net: &Network, inputs: ArrayView2<f64>) -> Result<Self> {
        let widths: Vec<String> = net.layers().iter().map(|l| l.width().to_string()).collect();
        CodeMatrix::new(
            net.forward_batch(inputs)?,
            format!("network of {} layers, widths {}", widths.len(), widths.join("-")),
        )
    }

    /// The raw inputs used as their own representation.
    pub fn raw(inputs: ArrayView2<f64>) -> Result<Self> {
        CodeMatrix::new(inputs.to_owned(), "raw inputs")
    }

    pub fn codes(&self) -> ArrayView2<'_, f64> {
        self.codes.view()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.codes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.ncols()
    }

    fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.flat()[i * d..(i + 1) * d]
    }

    fn flat(&self) -> &[f64] {
        self.codes.as_slice().expect("standard layout")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionReport {
    pub tolerance: f64,
    pub n: usize,
    /// Unordered pairs within `tolerance` in every coordinate.
    pub pair_count: u64,
    /// Lexicographically first colliding pairs, at most [`MAX_REPORTED_PAIRS`].
    pub pairs: Vec<(usize, usize)>,
    /// Smallest positive Euclidean distance between two codes.
    pub min_nonzero_distance: Option<f64>,
}

impl CollisionReport {
    pub fn total_pairs(&self) -> u64 {
        let n = self.n as u64;
        n * (n - 1) / 2
    }

    pub fn fraction(&self) -> f64 {
        self.pair_count as f64 / self.total_pairs() as f64
    }
}

/// Fixed projection direction used to prune pair scans.
fn scan_direction(d: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..d)
        .map(|j| {
            let golden = ((j as f64 + 1.0) * 0.618_033_988_749_895).fract();
            0.5 + golden
        })
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.into_iter().map(|v| v / norm).collect()
}

/// Visits every unordered pair `(i, j)` that could lie within Euclidean
/// distance `window()` of each other, using a sorted 1-D projection. The
/// window may shrink during the scan.
fn scan_pairs(codes: &CodeMatrix, mut window: impl FnMut() -> f64, mut visit: impl FnMut(usize, usize)) {
    let d = codes.dim();
    let u = scan_direction(d);
    let projection: Vec<f64> = (0..codes.len())
        .map(|i| codes.row(i).iter().zip(&u).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..codes.len()).collect();
    order.sort_by(|&a, &b| projection[a].total_cmp(&projection[b]).then(a.cmp(&b)));
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            let w = window();
            // Slack absorbs rounding in the projections.
            if projection[j] - projection[i] > w * (1.0 + 1e-9) + 1e-12 {
                break;
            }
            visit(i.min(j), i.max(j));
        }
    }
}

struct PairSample {
    heap: BinaryHeap<(usize, usize)>,
}

impl PairSample {
    fn new() -> Self {
        PairSample {
            heap: BinaryHeap::new(),
        }
    }

    fn offer(&mut self, pair: (usize, usize)) {
        if self.heap.len() < MAX_REPORTED_PAIRS {
            self.heap.push(pair);
        } else if let Some(&top) = self.heap.peek() {
            if pair < top {
                self.heap.pop();
                self.heap.push(pair);
            }
        }
    }

    fn into_sorted(self) -> Vec<(usize, usize)> {
        self.heap.into_sorted_vec()
    }
}

pub fn collision_report(codes: &CodeMatrix, tol: f64) -> Result<CollisionReport> {
    if codes.len() < 2 {
        return Err(Error::InvalidParameter("collision report needs at least two codes".into()));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let d = codes.dim();
    // ‖a − b‖_∞ ≤ tol implies ‖a − b‖₂ ≤ tol·√d.
    let collision_window = tol * (d.max(1) as f64).sqrt();
    let mut best = f64::INFINITY;
    let mut count = 0u64;
    let mut sample = PairSample::new();
    let best_cell = std::cell::Cell::new(best);
    scan_pairs(
        codes,
        || collision_window.max(best_cell.get()),
        |i, j| {
            let (a, b) = (codes.row(i), codes.row(j));
            if linalg::max_abs_difference(a, b) <= tol {
                count += 1;
                sample.offer((i, j));
            }
            let dist = linalg::squared_distance_slice(a, b).sqrt();
            if dist > 0.0 && dist < best_cell.get() {
                best_cell.set(dist);
            }
        },
    );
    best = best.min(best_cell.get());
    Ok(CollisionReport {
        tolerance: tol,
        n: codes.len(),
        pair_count: count,
        pairs: sample.into_sorted(),
        min_nonzero_distance: best.is_finite().then_some(best),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationReport {
    /// Colliding pairs (tolerance 1e-9) whose region ids differ.
    pub cross_region_collisions: u64,
    /// Number of pairs whose region ids differ.
    pub cross_region_pairs: u64,
    pub fraction: f64,
}

pub fn region_separation_report(codes: &CodeMatrix, region_ids: &[usize]) -> Result<SeparationReport> {
    if region_ids.len() != codes.len() {
        return Err(Error::DimensionMismatch {
            expected: codes.len(),
            got: region_ids.len(),
        });
    }
    let tol = DEFAULT_COLLISION_TOL;
    let window = tol * (codes.dim().max(1) as f64).sqrt();
    let mut collisions = 0u64;
    scan_pairs(
        codes,
        || window,
        |i, j| {
            if region_ids[i] != region_ids[j]
                && linalg::max_abs_difference(codes.row(i), codes.row(j)) <= tol
            {
                collisions += 1;
            }
        },
    );
    let mut sizes = std::collections::BTreeMap::<usize, u64>::new();
    for &r in region_ids {
        *sizes.entry(r).or_default() += 1;
    }
    let n = region_ids.len() as u64;
    let same: u64 = sizes.values().map(|s| s * s.saturating_sub(1) / 2).sum();
    let cross = n * n.saturating_sub(1) / 2 - same;
    Ok(SeparationReport {
        cross_region_collisions: collisions,
        cross_region_pairs: cross,
        fraction: if cross == 0 {
            0.0
        } else {
            collisions as f64 / cross as f64
        },
    })
}

/// `ceil(sqrt(n))`, the default neighbourhood size.
pub fn default_k(n: usize) -> usize {
    let mut k = (n as f64).sqrt().ceil() as usize;
    while k * k < n {
        k += 1;
    }
    while k > 1 && (k - 1) * (k - 1) >= n {
        k -= 1;
    }
    k.max(1)
}

/// k-nearest-neighbour plug-in estimate of `P(Y | Z = z)`.
///
/// Neighbours are ranked by Euclidean distance in code space, ties broken by
/// the lower row index.
#[derive(Debug, Clone)]
pub struct KnnConditional {
    codes: CodeMatrix,
    labels: Vec<usize>,
    num_classes: usize,
    k: usize,
}

impl KnnConditional {
    pub fn new(codes: CodeMatrix, labels: &[usize], num_classes: usize, k: usize) -> Result<Self> {
        if labels.len() != codes.len() {
            return Err(Error::DimensionMismatch {
                expected: codes.len(),
                got: labels.len(),
            });
        }
        if k == 0 || k > codes.len() {
            return Err(Error::InvalidParameter(format!(
                "k = {k} must lie in 1..={}",
                codes.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(KnnConditional {
            codes,
            labels: labels.to_vec(),
            num_classes,
            k,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn estimate(&self, query: ArrayView1<f64>) -> Result<Vec<f64>> {
        if query.len() != self.codes.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.codes.dim(),
                got: query.len(),
            });
        }
        let query = query.to_vec();
        let mut buf = Vec::with_capacity(self.codes.len());
        Ok(self.estimate_into(&query, None, &mut buf))
    }

    /// Estimate at stored row `i` from the other `n − 1` rows.
    pub fn estimate_leave_one_out(&self, i: usize) -> Result<Vec<f64>> {
        if self.k >= self.codes.len() {
            return Err(Error::InvalidParameter(format!(
                "leave-one-out needs k < n, got k = {} and n = {}",
                self.k,
                self.codes.len()
            )));
        }
        let mut buf = Vec::with_capacity(self.codes.len());
        Ok(self.estimate_into(self.codes.row(i), Some(i), &mut buf))
    }

    fn estimate_into(&self, query: &[f64], exclude: Option<usize>, buf: &mut Vec<(f64, usize)>) -> Vec<f64> {
        buf.clear();
        let d = self.codes.dim();
        for (j, row) in self.codes.flat().chunks_exact(d.max(1)).enumerate().take(self.codes.len()) {
            if Some(j) != exclude {
                let row = if d == 0 { &row[..0] } else { row };
                buf.push((linalg::squared_distance_slice(query, row), j));
            }
        }
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| -> Ordering { a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) };
        if self.k < buf.len() {
            buf.select_nth_unstable_by(self.k - 1, by_rank);
        }
        let mut counts = vec![0usize; self.num_classes];
        for &(_, j) in &buf[..self.k] {
            counts[self.labels[j]] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.k as f64).collect()
    }
}

/// Builds the estimator with the number of classes inferred from the labels.
pub fn estimate_conditional(codes: &CodeMatrix, labels: &[usize], k: usize) -> Result<KnnConditional> {
    let num_classes = labels.iter().copied().max().map_or(1, |y| y + 1);
    KnnConditional::new(codes.clone(), labels, num_classes, k)
}

impl KnnConditional {
    /// Leave-one-out estimates for every stored row, as an `n × K` matrix.
    ///
    /// Candidates are prefiltered with Gram-matrix distances in blocks and a
    /// bound on their rounding error, then ranked by exact distance, so the
    /// result equals [`KnnConditional::estimate_leave_one_out`] row by row.
    pub fn leave_one_out_all(&self) -> Result<Array2<f64>> {
        let n = self.codes.len();
        if self.k >= n {
            return Err(Error::InvalidParameter(format!(
                "leave-one-out needs k < n, got k = {} and n = {n}",
                self.k
            )));
        }
        let d = self.codes.dim();
        let z = self.codes.codes();
        let norms: Vec<f64> = (0..n)
            .map(|i| self.codes.row(i).iter().map(|v| v * v).sum())
            .collect();
        let largest = norms.iter().copied().fold(0.0, f64::max);
        let err_coeff = 8.0 * (d as f64 + 4.0) * f64::EPSILON;
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| -> Ordering { a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) };

        let mut out = Array2::zeros((n, self.num_classes));
        let mut approx: Vec<f64> = Vec::with_capacity(n);
        let mut scratch: Vec<f64> = Vec::with_capacity(n);
        let mut exact: Vec<(f64, usize)> = Vec::with_capacity(n);
        for start in (0..n).step_by(KNN_BLOCK) {
            let end = (start + KNN_BLOCK).min(n);
            let gram = z.slice(s![start..end, ..]).dot(&z.t());
            for i in start..end {
                let ni = norms[i];
                approx.clear();
                approx.extend(
                    gram.row(i - start)
                        .iter()
                        .zip(&norms)
                        .map(|(&g, &nj)| ni + nj - 2.0 * g),
                );
                approx[i] = f64::INFINITY;
                scratch.clear();
                scratch.extend_from_slice(&approx);
                let (_, kth, _) = scratch.select_nth_unstable_by(self.k - 1, f64::total_cmp);
                let cut = *kth + 2.0 * err_coeff * (ni + largest);
                let query = self.codes.row(i);
                exact.clear();
                exact.extend(
                    approx
                        .iter()
                        .enumerate()
                        .filter(|&(j, &a)| a <= cut && j != i)
                        .map(|(j, _)| (linalg::squared_distance_slice(query, self.codes.row(j)), j)),
                );
                if self.k < exact.len() {
                    exact.select_nth_unstable_by(self.k - 1, by_rank);
                }
                let mut row = out.row_mut(i);
                for &(_, j) in &exact[..self.k] {
                    row[self.labels[j]] += 1.0;
                }
                row.mapv_inplace(|c| c / self.k as f64);
            }
        }
        Ok(out)
    }
}

/// Query rows per Gram block in [`KnnConditional::leave_one_out_all`].
const KNN_BLOCK: usize = 256;

/// L² and max-L1 distances between leave-one-out estimates and the truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapMetrics {
    pub l2: f64,
    pub max_tv: f64,
}

pub fn estimation_gap(data: &LabeledDataset, codes: &CodeMatrix, k: usize) -> Result<GapMetrics> {
    if codes.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: codes.len(),
        });
    }
    let knn = KnnConditional::new(codes.clone(), data.labels(), data.num_classes(), k)?;
    let estimates = knn.leave_one_out_all()?;
    let mut sum_sq = 0.0;
    let mut max_tv = 0.0_f64;
    for (estimate, truth) in estimates.rows().into_iter().zip(data.true_conditionals().rows()) {
        let (mut sq, mut l1) = (0.0, 0.0);
        for (e, t) in estimate.iter().zip(truth) {
            let diff = e - t;
            sq += diff * diff;
            l1 += diff.abs();
        }
        sum_sq += sq;
        max_tv = max_tv.max(l1);
    }
    Ok(GapMetrics {
        l2: (sum_sq / data.len() as f64).sqrt(),
        max_tv,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    /// Estimate of `‖P(Y|Z) − P(Y|X)‖` in `L²(F_X)`.
    pub l2_gap: f64,
    /// Largest L1 distance between estimated and true conditionals.
    pub max_tv_gap: f64,
    /// `l2_gap` of the raw inputs under the same estimator.
    pub noise_floor: f64,
    /// `max_tv_gap` of the raw inputs under the same estimator.
    pub noise_floor_max_tv: f64,
    pub k: usize,
    pub n: usize,
    pub estimator: String,
}

impl GapReport {
    pub fn from_parts(codes: GapMetrics, floor: GapMetrics, k: usize, n: usize) -> Self {
        GapReport {
            l2_gap: codes.l2,
            max_tv_gap: codes.max_tv,
            noise_floor: floor.l2,
            noise_floor_max_tv: floor.max_tv,
            k,
            n,
            estimator: format!("leave-one-out {k}-NN, Euclidean, index tie-break, n={n}"),
        }
    }
}

pub fn sufficiency_gap(data: &LabeledDataset, codes: &CodeMatrix, k: usize) -> Result<GapReport> {
    let gap = estimation_gap(data, codes, k)?;
    let floor = estimation_gap(data, &CodeMatrix::raw(data.inputs())?, k)?;
    Ok(GapReport::from_parts(gap, floor, k, data.len()))
}
