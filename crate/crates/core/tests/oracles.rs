//! Library results checked against independent brute-force computations.

use graphvar::anchors::{batch_loss, check_general_position, loss_and_gradients, Loss};
use graphvar::separators::{
    construct_discrete_separator, construct_relu_separator, conv_output_shape, BiasMode,
};
use graphvar::sufficiency::{
    collision_report, estimate_conditional, estimation_gap, region_separation_report, CodeMatrix,
};
use graphvar::{Activation, Error, GraphLayer, LabeledDataset, PairwiseFunction};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Direct evaluation of the ReLU inner-product layer with a linear readout.
fn reference_loss(
    anchors: &Array2<f64>,
    bias: &Array1<f64>,
    readout: &Array2<f64>,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    labels: &[usize],
    loss: Loss,
) -> f64 {
    let (p, m) = anchors.dim();
    let k = readout.ncols();
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let mut hidden = vec![0.0; m];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut pre = bias[j];
            for r in 0..p {
                pre += inputs[[b, r]] * anchors[[r, j]];
            }
            *h = pre.max(0.0);
        }
        let out: Vec<f64> = (0..k)
            .map(|c| (0..m).map(|j| hidden[j] * readout[[j, c]]).sum())
            .collect();
        total += match loss {
            Loss::MeanSquaredError => (0..k).map(|c| (out[c] - targets[[b, c]]).powi(2)).sum::<f64>(),
            Loss::CrossEntropy => {
                let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + out.iter().map(|o| (o - max).exp()).sum::<f64>().ln() - out[label]
            }
        };
    }
    total / labels.len() as f64
}

fn central_difference(params: &mut [f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    const STEP: f64 = 1e-6;
    (0..params.len())
        .map(|i| {
            let orig = params[i];
            params[i] = orig + STEP;
            let up = f(params);
            params[i] = orig - STEP;
            let down = f(params);
            params[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().chain(numeric).map(|v| v * v).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[test]
fn gradients_match_independent_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 20 {
        let (p, m, k, b) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(2..=4), rng.random_range(1..=8));
        let loss = if checked % 2 == 0 { Loss::MeanSquaredError } else { Loss::CrossEntropy };
        let anchors = random_matrix(&mut rng, p, m);
        let bias = Array1::from_shape_fn(m, |_| rng.random_range(-0.5..0.5));
        let readout = random_matrix(&mut rng, m, k);
        let inputs = random_matrix(&mut rng, b, p);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let mut targets = Array2::<f64>::zeros((b, k));
        for (row, &y) in labels.iter().enumerate() {
            targets[[row, y]] = 1.0;
        }
        let pre = inputs.dot(&anchors) + &bias;
        if pre.iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let layer = GraphLayer::new(anchors.clone(), bias.clone(), PairwiseFunction::InnerProduct, Activation::ReLU).unwrap();
        let (value, grads) =
            loss_and_gradients(&layer, readout.view(), inputs.view(), targets.view(), &labels, loss).unwrap();
        let expected = reference_loss(&anchors, &bias, &readout, &inputs, &targets, &labels, loss);
        assert!((value - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        let via_forward = batch_loss(&layer, readout.view(), inputs.view(), targets.view(), &labels, loss).unwrap();
        assert!((via_forward - expected).abs() <= 1e-12 * (1.0 + expected.abs()));

        let mut a = anchors.clone().into_raw_vec_and_offset().0;
        let fd_a = central_difference(&mut a, &mut |v| {
            let a = Array2::from_shape_vec((p, m), v.to_vec()).unwrap();
            reference_loss(&a, &bias, &readout, &inputs, &targets, &labels, loss)
        });
        let mut bv = bias.to_vec();
        let fd_b = central_difference(&mut bv, &mut |v| {
            reference_loss(&anchors, &Array1::from(v.to_vec()), &readout, &inputs, &targets, &labels, loss)
        });
        let mut w = readout.clone().into_raw_vec_and_offset().0;
        let fd_w = central_difference(&mut w, &mut |v| {
            let w = Array2::from_shape_vec((m, k), v.to_vec()).unwrap();
            reference_loss(&anchors, &bias, &w, &inputs, &targets, &labels, loss)
        });
        assert!(relative_error(&grads.anchors.iter().copied().collect::<Vec<_>>(), &fd_a) < 1e-5);
        assert!(relative_error(&grads.bias.to_vec(), &fd_b) < 1e-5);
        assert!(relative_error(&grads.readout.iter().copied().collect::<Vec<_>>(), &fd_w) < 1e-5);
        checked += 1;
    }
}

fn cofactor_determinant(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    if n == 1 {
        return m[[0, 0]];
    }
    (0..n)
        .map(|col| {
            let minor = Array2::from_shape_fn((n - 1, n - 1), |(r, c)| m[[r + 1, if c < col { c } else { c + 1 }]]);
            let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
            sign * m[[0, col]] * cofactor_determinant(&minor)
        })
        .sum()
}

#[test]
fn gram_determinant_matches_cofactor_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let p = rng.random_range(1..=5);
        let m = rng.random_range(1..=5);
        let points = random_matrix(&mut rng, p, m);
        let gram = points.t().dot(&points);
        let expected = cofactor_determinant(&gram).abs();
        let got = check_general_position(points.view()).unwrap().gram_determinant;
        assert!((got - expected).abs() <= 1e-10 * (1.0 + expected), "p={p} m={m}: {got} vs {expected}");
        if m > p {
            assert!(!check_general_position(points.view()).unwrap().nonsingular);
        }
    }
}

#[test]
fn conv_output_shape_matches_window_count() {
    let windows = |size: usize, kernel: usize, stride: usize, pad: usize| {
        let padded = size + 2 * pad;
        (0..padded).step_by(stride).filter(|&start| start + kernel <= padded).count()
    };
    for h in 1..=12 {
        for k in 1..=12 {
            for stride in 1..=4 {
                for pad in 0..=3 {
                    let expected = windows(h, k, stride, pad);
                    match conv_output_shape(h, 3, k, 1, stride, pad) {
                        Ok((out, _)) => assert_eq!(out, expected, "h={h} k={k} s={stride} pd={pad}"),
                        Err(_) => assert_eq!(expected, 0, "h={h} k={k} s={stride} pd={pad}"),
                    }
                }
            }
        }
    }
}

fn brute_force_loo(codes: &Array2<f64>, labels: &[usize], classes: usize, k: usize) -> Array2<f64> {
    let n = codes.nrows();
    let mut out = Array2::zeros((n, classes));
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = codes.row(i).iter().zip(codes.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                (d, j)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &others[..k] {
            out[[i, labels[j]]] += 1.0 / k as f64;
        }
    }
    out
}

#[test]
fn leave_one_out_knn_matches_sorted_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (n, d, integer) in [(600, 2, true), (300, 5, false), (257, 1, true)] {
        let codes = Array2::from_shape_fn((n, d), |_| {
            if integer {
                rng.random_range(0..5) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        for k in [1, 7, 25] {
            let est = estimate_conditional(&CodeMatrix::new(codes.clone(), "c").unwrap(), &labels, k).unwrap();
            let got = est.leave_one_out_all().unwrap();
            let expected = brute_force_loo(&codes, &labels, 3, k);
            for (g, e) in got.iter().zip(expected.iter()) {
                assert!((g - e).abs() <= 1e-12, "n={n} k={k}");
            }
        }
    }
}

#[test]
fn collision_count_matches_all_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 400;
    let base = Array2::from_shape_fn((n, 3), |_| rng.random_range(0..4) as f64);
    let codes = base.mapv(|v| v + rng.random_range(-2e-10..2e-10));
    let tol = 1e-9;
    let mut expected = 0u64;
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let close = codes.row(i).iter().zip(codes.row(j)).all(|(a, b)| (a - b).abs() <= tol);
            if close {
                expected += 1;
                pairs.push((i, j));
            }
        }
    }
    let report = collision_report(&CodeMatrix::new(codes, "c").unwrap(), tol).unwrap();
    assert_eq!(report.pair_count, expected);
    pairs.truncate(100);
    assert_eq!(report.pairs, pairs);
}

#[test]
fn total_collapse_gap_matches_closed_form() {
    // Alternating labels on two pure regions, every code identical, k = n − 1:
    // each leave-one-out estimate puts N/(2N−1) on the wrong class.
    for half in [5usize, 50, 500] {
        let n = 2 * half;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let regions: Vec<usize> = labels.iter().map(|&y| y + 1).collect();
        let truth = Array2::from_shape_fn((n, 2), |(i, c)| if c == labels[i] { 1.0 } else { 0.0 });
        let inputs = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let data = LabeledDataset::new(inputs, labels, regions.clone(), truth).unwrap();
        let codes = CodeMatrix::new(Array2::zeros((n, 3)), "collapsed").unwrap();

        let gap = estimation_gap(&data, &codes, n - 1).unwrap();
        let wrong = half as f64 / (n - 1) as f64;
        assert!((gap.l2 - 2f64.sqrt() * wrong).abs() <= 1e-12);
        assert!((gap.max_tv - 2.0 * wrong).abs() <= 1e-12);

        let sep = region_separation_report(&codes, &regions).unwrap();
        assert_eq!(sep.cross_region_collisions, (half * half) as u64);
    }
    let large = 2f64.sqrt() * 500.0 / 999.0;
    assert!((large - 0.5f64.sqrt()).abs() < 1e-3);
}

#[test]
fn collapsed_codes_estimate_the_class_mixture() {
    let n = 40;
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    let est = estimate_conditional(&CodeMatrix::new(Array2::zeros((n, 2)), "c").unwrap(), &labels, n - 1).unwrap();
    let q = est.estimate(Array1::zeros(2).view()).unwrap();
    let mut counts = [0usize; 2];
    for &y in &labels[..n - 1] {
        counts[y] += 1;
    }
    assert_eq!(q, vec![counts[0] as f64 / (n - 1) as f64, counts[1] as f64 / (n - 1) as f64]);
}

#[test]
fn discrete_separator_codes_are_the_support_gram_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let support = random_matrix(&mut rng, 4, 4);
    let layer = construct_discrete_separator(support.view()).unwrap();
    let codes = layer.forward_batch(support.t()).unwrap();
    let gram = support.t().dot(&support);
    for (a, b) in codes.iter().zip(gram.iter()) {
        assert!((a - b).abs() <= 1e-12);
    }
    let mut dup = support.clone();
    let first = dup.column(0).to_owned();
    dup.column_mut(1).assign(&first);
    assert!(construct_discrete_separator(dup.view()).is_err());
}

#[test]
fn full_norm_relu_collapses_orthonormal_representatives() {
    let eye = Array2::<f64>::eye(4);
    // Every code is ReLU(0) = 0, so the construction must refuse.
    assert!(matches!(
        construct_relu_separator(eye.view(), BiasMode::FullNorm),
        Err(Error::CodeCollision(..))
    ));
    let layer = construct_relu_separator(eye.view(), BiasMode::HalfNorm).unwrap();
    let codes = layer.forward_batch(eye.view()).unwrap();
    assert_eq!(codes, Array2::<f64>::eye(4) * 0.5);
}
