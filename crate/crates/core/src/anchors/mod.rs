//! Anchor points: i.i.d. initialization from the data, density diagnostics
//! and SGD training with traces.

mod training;

pub use training::{
    batch_loss, gradient_check, loss_and_gradients, train_layer_sgd, FlagKind, Gradients, Loss, TraceFlag, TrainingConfig,
    TrainingTrace,
};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// Draws `m` anchors uniformly with replacement from the rows of `data`
/// (`n × p`), returned as the columns of a `p × m` matrix.
pub fn sample_anchors_iid(data: ArrayView2<f64>, m: usize, seed: u64) -> Result<Array2<f64>> {
    if data.nrows() == 0 {
        return Err(Error::Empty("dataset"));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("anchor count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors = Array2::zeros((data.ncols(), m));
    for mut column in anchors.columns_mut() {
        let row = rng.random_range(0..data.nrows());
        column.assign(&data.row(row));
    }
    Ok(anchors)
}

/// Fill distance of the anchors (`p × m`, columns) relative to the probe
/// rows (`n × p`): the largest distance from a probe to its nearest anchor.
pub fn covering_radius(anchors: ArrayView2<f64>, probes: ArrayView2<f64>) -> Result<f64> {
    if anchors.ncols() == 0 {
        return Err(Error::Empty("anchors"));
    }
    if probes.nrows() == 0 {
        return Err(Error::Empty("probes"));
    }
    if anchors.nrows() != probes.ncols() {
        return Err(Error::DimensionMismatch {
            expected: anchors.nrows(),
            got: probes.ncols(),
        });
    }
    let columns = anchors.t().as_standard_layout().into_owned();
    let p = anchors.nrows();
    let flat = columns.as_slice().expect("standard layout");
    let mut worst = 0.0_f64;
    for probe in probes.rows() {
        let probe = probe.to_vec();
        let nearest = flat
            .chunks_exact(p)
            .map(|a| linalg::squared_distance_slice(&probe, a))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(nearest);
    }
    Ok(worst.sqrt())
}

/// Result of [`check_general_position`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralPosition {
    pub nonsingular: bool,
    pub gram_determinant: f64,
}

/// Gram determinant magnitudes at or below this count as singular.
pub const GRAM_DETERMINANT_FLOOR: f64 = 1e-10;

/// Checks whether the columns of `points` have a nonsingular Gram matrix.
pub fn check_general_position(points: ArrayView2<f64>) -> Result<GeneralPosition> {
    if points.ncols() == 0 {
        return Err(Error::Empty("points"));
    }
    let det = linalg::determinant(linalg::column_gram(points).view()).abs();
    Ok(GeneralPosition {
        nonsingular: det > GRAM_DETERMINANT_FLOOR,
        gram_determinant: det,
    })
}

/// `side × side` grid of probe points covering `[0, 1]²`, endpoints included.
pub fn unit_square_grid(side: usize) -> Array2<f64> {
    let last = side.saturating_sub(1).max(1) as f64;
    Array2::from_shape_fn((side * side, 2), |(i, c)| {
        let idx = if c == 0 { i / side } else { i % side };
        idx as f64 / last
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};

    #[test]
    fn single_row_support() {
        let data = array![[0.25, -1.0]];
        let anchors = sample_anchors_iid(data.view(), 7, 1).unwrap();
        for column in anchors.columns() {
            assert_eq!(column.to_vec(), vec![0.25, -1.0]);
        }
    }

    #[test]
    fn sampling_errors_and_determinism() {
        let data = crate::regions::sample_uniform_box(1000, 2, 5);
        assert!(sample_anchors_iid(data.view(), 0, 1).is_err());
        assert!(sample_anchors_iid(Array2::<f64>::zeros((0, 2)).view(), 3, 1).is_err());
        let a = sample_anchors_iid(data.view(), 100, 17).unwrap();
        let b = sample_anchors_iid(data.view(), 100, 17).unwrap();
        assert_eq!(a, b);
        for column in a.columns() {
            assert!(data.rows().into_iter().any(|r| r == column));
        }
    }

    #[test]
    fn covering_radius_examples() {
        let anchors = array![[0.0, 0.5, 1.0]];
        let probes = Array2::from_shape_fn((101, 1), |(i, _)| i as f64 / 100.0);
        let r = covering_radius(anchors.view(), probes.view()).unwrap();
        assert!((r - 0.25).abs() < 1e-15);

        let probes = array![[0.1, 0.2], [0.3, 0.4], [-1.0, 2.0]];
        let r = covering_radius(probes.t(), probes.view()).unwrap();
        assert_eq!(r, 0.0);

        assert!(covering_radius(array![[0.0]].view(), probes.view()).is_err());
        assert!(covering_radius(Array2::<f64>::zeros((2, 0)).view(), probes.view()).is_err());
    }

    #[test]
    fn general_position_examples() {
        let gp = check_general_position(Array2::<f64>::eye(3).view()).unwrap();
        assert!(gp.nonsingular);
        assert_eq!(gp.gram_determinant, 1.0);

        let dup = array![[1.0, 1.0], [2.0, 2.0], [0.5, 0.5]];
        let gp = check_general_position(dup.view()).unwrap();
        assert!(!gp.nonsingular);
        assert_eq!(gp.gram_determinant, 0.0);
    }

    #[test]
    fn grid_spans_unit_square() {
        let g = unit_square_grid(50);
        assert_eq!(g.nrows(), 2500);
        assert_eq!(g.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(g.row(2499).to_vec(), vec![1.0, 1.0]);
        assert_eq!(g.index_axis(Axis(0), 1).to_vec()[1], 1.0 / 49.0);
    }
}
