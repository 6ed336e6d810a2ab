use approx::assert_abs_diff_eq;
use murssl::data::*;
use murssl::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn labeled_subset_is_balanced() {
    for make in [make_two_moons, make_rings] {
        let d = make(200, 0.1, 6, 3).unwrap();
        assert_eq!(d.labeled.len(), 6);
        for c in 0..2 {
            assert_eq!(d.labeled.labels.iter().filter(|&&l| l == c).count(), 3);
        }
        assert_eq!(d.unlabeled.len(), 194);
        assert_eq!(d.test.len(), 200);
    }
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(
        make_two_moons(100, 0.1, 4, 9).unwrap(),
        make_two_moons(100, 0.1, 4, 9).unwrap()
    );
    assert_ne!(
        make_two_moons(100, 0.1, 4, 9).unwrap(),
        make_two_moons(100, 0.1, 4, 10).unwrap()
    );
    assert_eq!(
        make_rings(100, 0.1, 4, 9).unwrap(),
        make_rings(100, 0.1, 4, 9).unwrap()
    );
}

#[test]
fn bad_label_counts_are_usage_errors() {
    assert!(matches!(
        make_two_moons(100, 0.1, 5, 0),
        Err(Error::Usage(_))
    ));
    assert!(matches!(
        make_two_moons(10, 0.1, 12, 0),
        Err(Error::Usage(_))
    ));
    assert!(matches!(make_rings(100, 0.1, 0, 0), Err(Error::Usage(_))));
}

fn all_points(d: &SslDataset) -> Vec<(Vec<f64>, usize)> {
    [&d.labeled, &d.unlabeled, &d.test]
        .iter()
        .flat_map(|s| (0..s.len()).map(move |i| (s.inputs.row(i).to_vec(), s.labels[i])))
        .collect()
}

#[test]
fn noiseless_moons_lie_on_half_circles() {
    let d = make_two_moons(300, 0.0, 10, 1).unwrap();
    for (p, label) in all_points(&d) {
        let (cx, cy, upper) = if label == 0 {
            (0.0, 0.0, true)
        } else {
            (1.0, 0.5, false)
        };
        assert_abs_diff_eq!((p[0] - cx).hypot(p[1] - cy), 1.0, epsilon = 1e-12);
        assert!(if upper {
            p[1] >= cy - 1e-12
        } else {
            p[1] <= cy + 1e-12
        });
    }
}

#[test]
fn noiseless_rings_have_radius_one_or_two() {
    let d = make_rings(300, 0.0, 10, 1).unwrap();
    for (p, label) in all_points(&d) {
        let r = p[0].hypot(p[1]);
        assert_abs_diff_eq!(r, if label == 0 { 1.0 } else { 2.0 }, epsilon = 1e-12);
    }
}

#[test]
fn labeled_and_unlabeled_are_disjoint() {
    let d = make_two_moons(150, 0.2, 8, 4).unwrap();
    for i in 0..d.labeled.len() {
        for j in 0..d.unlabeled.len() {
            assert_ne!(d.labeled.inputs.row(i), d.unlabeled.inputs.row(j));
        }
    }
}

fn normal_matrix(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(
        n,
        d,
        (0..n * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    )
    .unwrap()
}

fn covariance(x: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    (0..n)
                        .map(|i| (x.get(i, a) - mean[a]) * (x.get(i, b) - mean[b]))
                        .sum::<f64>()
                        / n as f64
                })
                .collect()
        })
        .collect()
}

#[test]
fn zca_on_white_data_is_near_identity() {
    let x = normal_matrix(20_000, 3, 1);
    let t = fit_zca(&x, 1e-5).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let expected = if i == j { 1.0 } else { 0.0 };
            assert!((t.whitening.get(i, j) - expected).abs() < 0.1);
        }
    }
}

#[test]
fn zca_whitens_fitting_data() {
    let base = normal_matrix(500, 3, 2);
    let mix = Tensor::matrix(3, 3, vec![2.0, 0.3, 0.0, 0.5, 1.0, 0.0, 0.1, -0.7, 0.4]).unwrap();
    let x = base.matmul(&mix).unwrap();
    let t = fit_zca(&x, 1e-8).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_abs_diff_eq!(
                t.whitening.get(i, j),
                t.whitening.get(j, i),
                epsilon = 1e-12
            );
        }
    }
    let cov = covariance(&apply_zca(&t, &x).unwrap());
    for (i, row) in cov.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_abs_diff_eq!(*v, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-6);
        }
    }
    let mean = Tensor::row_vector(&t.mean);
    assert!(apply_zca(&t, &mean)
        .unwrap()
        .data()
        .iter()
        .all(|v| v.abs() < 1e-12));
}

#[test]
fn zca_handles_constant_column() {
    let mut x = normal_matrix(50, 2, 3);
    for i in 0..50 {
        x.set(i, 1, 4.0);
    }
    let t = fit_zca(&x, 1e-5).unwrap();
    assert!(apply_zca(&t, &x).unwrap().is_finite());
    assert!(matches!(fit_zca(&x, 0.0), Err(Error::Numeric(_))));
    assert!(fit_zca(&normal_matrix(2, 3, 0), 1e-5).is_err());
}

fn batch_of(n: usize, d: usize) -> Batch {
    Batch::new(Tensor::zeros(n, d), vec![-1; n], 2).unwrap()
}

#[test]
fn gaussian_augmentation() {
    let b = Batch::new(Tensor::full(2, 2, 1.5), vec![0, -1], 2).unwrap();
    assert_eq!(augment_gaussian(&b, 0.0, 3), b);
    assert_ne!(augment_gaussian(&b, 0.1, 3), augment_gaussian(&b, 0.1, 4));
    let sigma = 0.15;
    let big = augment_gaussian(&batch_of(100_000, 2), sigma, 5);
    let n = 100_000.0;
    for j in 0..2 {
        let col: Vec<f64> = (0..100_000).map(|i| big.inputs.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / n;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(
            (std - sigma).abs() < 3.0 * sigma / (2.0 * n).sqrt(),
            "{std}"
        );
    }
}

#[test]
fn batch_mask_follows_labels() {
    let b = Batch::new(Tensor::zeros(3, 2), vec![1, -1, 0], 2).unwrap();
    assert_eq!(b.mask, vec![true, false, true]);
    assert_eq!(b.labeled_count(), 2);
    assert!(Batch::new(Tensor::zeros(2, 2), vec![2, -1], 2).is_err());
    assert!(Batch::new(Tensor::zeros(2, 2), vec![0], 2).is_err());
}

#[test]
fn sampler_keeps_composition() {
    let d = make_two_moons(100, 0.1, 6, 0).unwrap();
    let mut s = BatchSampler::new(5, 15, 1).unwrap();
    for _ in 0..50 {
        let b = s.next_batch(&d).unwrap();
        assert_eq!(b.labeled_count(), 5);
        assert_eq!(b.labels.len(), 20);
        assert!(b.labels[5..].iter().all(|&l| l == -1));
    }
}

#[test]
fn median_nn_distance_of_a_line() {
    let x = Tensor::matrix(4, 1, vec![0.0, 1.0, 3.0, 6.0]).unwrap();
    // nearest distances 1, 1, 2, 3
    assert_eq!(median_nn_distance(&x), 1.5);
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = make_rings(40, 0.05, 4, 2).unwrap();
    let path = dir.path().join("data.csv");
    write_dataset_csv(&path, &d).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("x0,x1,label,split\n"));
    assert_eq!(read_dataset_csv(&path, 2).unwrap(), d);
    std::fs::write(&path, "x0,label,split\n1.0,0,bogus\n").unwrap();
    assert!(matches!(
        read_dataset_csv(&path, 2),
        Err(Error::Format { .. })
    ));
}
