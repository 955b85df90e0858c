//! Small dense helpers shared by the layer, anchor and diagnostic modules.

use ndarray::{Array2, ArrayView1, ArrayView2};

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Squared Euclidean distance between two contiguous rows.
#[inline]
pub fn squared_distance_slice(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Max-coordinate (Chebyshev) distance.
#[inline]
pub fn max_abs_difference(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Gram matrix of the columns of `points`.
pub fn column_gram(points: ArrayView2<f64>) -> Array2<f64> {
    points.t().dot(&points)
}

/// Determinant by LU decomposition with partial pivoting.
pub fn determinant(matrix: ArrayView2<f64>) -> f64 {
    let n = matrix.nrows();
    debug_assert_eq!(n, matrix.ncols());
    let mut a = matrix.to_owned();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| a[[r, col]].abs().total_cmp(&a[[s, col]].abs()))
            .unwrap_or(col);
        if a[[pivot, col]] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for c in 0..n {
                a.swap([pivot, c], [col, c]);
            }
            det = -det;
        }
        let diag = a[[col, col]];
        det *= diag;
        for r in col + 1..n {
            let factor = a[[r, col]] / diag;
            if factor != 0.0 {
                for c in col + 1..n {
                    a[[r, c]] -= factor * a[[col, c]];
                }
            }
        }
    }
    det
}
