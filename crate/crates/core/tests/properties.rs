use nalgebra::DMatrix;
use proptest::prelude::*;

use vdae::data::{parse_csv, write_csv};
use vdae::metrics::{bilip_k_pairs, euclidean, gromov_wasserstein, mmd};
use vdae::spectral::{build_kernel, transition_matrix};
use vdae::vdae::{kl_term, neighbor_select};
use vdae::PointCloud;

fn cloud(dim: usize, min: usize, max: usize) -> impl Strategy<Value = PointCloud> {
    (min..=max)
        .prop_flat_map(move |n| prop::collection::vec(-5.0f64..5.0, n * dim))
        .prop_map(move |v| PointCloud::new("p", dim, v).unwrap())
}

fn spd(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim * dim).prop_map(move |v| {
        let a = DMatrix::from_vec(dim, dim, v);
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
    })
}

fn rigid(x: &PointCloud, angle: f64, shift: (f64, f64)) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let rows: Vec<Vec<f64>> = x
        .rows()
        .map(|p| vec![c * p[0] - s * p[1] + shift.0, s * p[0] + c * p[1] + shift.1])
        .collect();
    PointCloud::from_rows("moved", &rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bilip_is_at_least_one_and_rigid_invariant(
        z in cloud(2, 8, 30),
        image in prop::collection::vec(-3.0f64..3.0, 60),
        angle in 0.0f64..std::f64::consts::TAU,
        shift in (-10.0f64..10.0, -10.0f64..10.0),
    ) {
        let n = z.len();
        let fz = PointCloud::new("f", 2, image[..2 * n].to_vec()).unwrap();
        let k = 4;
        let Ok(base) = bilip_k_pairs(&z, &fz, k, &euclidean, &euclidean) else { return Ok(()) };
        prop_assert!(base.values.iter().all(|&v| v >= 1.0));
        let moved = bilip_k_pairs(&z, &rigid(&fz, angle, shift), k, &euclidean, &euclidean).unwrap();
        for (a, b) in base.values.iter().zip(&moved.values) {
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn gw_is_symmetric_and_nonnegative(x in cloud(2, 3, 7), y in cloud(2, 3, 7), seed in 0u64..100) {
        let a = gromov_wasserstein(&x, &y, 0.05, 50, seed).unwrap();
        let b = gromov_wasserstein(&y, &x, 0.05, 50, seed).unwrap();
        prop_assert!(a.value >= 0.0);
        prop_assert!((a.value - b.value).abs() <= 1e-9);
    }

    #[test]
    fn kl_is_nonnegative((c, s) in (1usize..=3).prop_flat_map(|d| (spd(d), spd(d))), alpha in 0.1f64..10.0) {
        let kl = kl_term(&c, &s, alpha).unwrap();
        prop_assert!(kl >= -1e-12, "{kl}");
    }

    #[test]
    fn transition_rows_are_stochastic(x in cloud(3, 2, 40), bandwidth in 0.5f64..5.0) {
        let p = transition_matrix(&build_kernel(&x, bandwidth).unwrap());
        for i in 0..p.nrows() {
            prop_assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn neighbor_is_a_distinct_batch_member(z in cloud(2, 3, 20), query in (-5.0f64..5.0, -5.0f64..5.0), pick in any::<prop::sample::Index>()) {
        let batch: Vec<usize> = (0..z.len()).collect();
        let exclude = pick.index(z.len());
        let j = neighbor_select(&batch, &[query.0, query.1], &z, exclude).unwrap();
        prop_assert!(j != exclude && j < z.len());
        let dj = euclidean(z.point(j), &[query.0, query.1]);
        for &i in batch.iter().filter(|&&i| i != exclude) {
            prop_assert!(dj <= euclidean(z.point(i), &[query.0, query.1]));
        }
    }

    #[test]
    fn mmd_is_symmetric(x in cloud(2, 2, 20), y in cloud(2, 2, 20)) {
        let a = mmd(&x, &y, Some(1.3)).unwrap().value;
        let b = mmd(&y, &x, Some(1.3)).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn csv_round_trip_is_exact(x in cloud(3, 1, 30)) {
        let mut buf = Vec::new();
        write_csv(&x, &mut buf).unwrap();
        let back = parse_csv(std::str::from_utf8(&buf).unwrap(), "p").unwrap();
        prop_assert_eq!(back.as_slice(), x.as_slice());
    }
}
