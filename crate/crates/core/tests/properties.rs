use causal_kmeans::diagnostics::boundary_mass;
use causal_kmeans::{
    assign_folds, codebook_error, empirical_risk, lloyd, project, reparametrize, Codebook,
    CounterfactualMatrix, LloydOptions, Matrix, Parametrization,
};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-50.0f64..50.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn points_and_codebook() -> impl Strategy<Value = (Matrix, Codebook)> {
    (1usize..4, 1usize..5).prop_flat_map(|(p, k)| {
        (matrix(30, p), matrix(k, p).prop_map(|m| Codebook::new(m).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_are_balanced_and_reproducible(n in 2usize..200, k in 2usize..10, seed: u64) {
        prop_assume!(k <= n);
        let a = assign_folds(n, k, seed).unwrap();
        let b = assign_folds(n, k, seed).unwrap();
        prop_assert_eq!(a.labels(), b.labels());
        let sizes = a.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(a.labels().iter().all(|&l| (1..=k).contains(&l)));
    }

    #[test]
    fn contrasts_round_trip(m in (2usize..5).prop_flat_map(|p| matrix(12, p))) {
        let levels = CounterfactualMatrix::levels(m.clone()).unwrap();
        let c = reparametrize(&levels, Parametrization::ContrastsVsBaseline).unwrap();
        for (orig, row) in m.rows_iter().zip(c.values().rows_iter()) {
            prop_assert_eq!(orig[0], row[0]);
        }
        let back = reparametrize(&c, Parametrization::Levels).unwrap();
        for (x, y) in back.values().as_slice().iter().zip(m.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        prop_assert!(reparametrize(&c, Parametrization::ContrastsVsBaseline).is_err());
    }

    #[test]
    fn lloyd_never_increases_risk((pts, init) in points_and_codebook()) {
        let start = empirical_risk(&pts, &init);
        let fit = lloyd(&pts, &init, &LloydOptions::default());
        prop_assert!(fit.risk <= start + 1e-9 * start.max(1.0));
        prop_assert!(fit.risk_trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(fit.assignments.len(), pts.nrows());
        for (i, &j) in fit.assignments.iter().enumerate() {
            prop_assert_eq!(project(pts.row(i), &fit.codebook).0, j);
        }
        prop_assert!((fit.risk - empirical_risk(&pts, &fit.codebook)).abs() <= 1e-9 * fit.risk.max(1.0));
    }

    #[test]
    fn boundary_mass_grows_with_t(
        (pts, c) in points_and_codebook(),
        t1 in 0.0f64..20.0,
        dt in 0.0f64..20.0,
    ) {
        let lo = boundary_mass(&pts, &c, t1);
        let hi = boundary_mass(&pts, &c, t1 + dt);
        prop_assert!(lo <= hi);
        prop_assert!((0.0..=1.0).contains(&lo));
        if c.k() > 1 {
            prop_assert_eq!(boundary_mass(&pts, &c, 1e6), 1.0);
        }
    }

    #[test]
    fn codebook_error_is_a_permutation_metric(
        (a, b, c) in (1usize..3, 1usize..6).prop_flat_map(|(p, k)| (matrix(k, p), matrix(k, p), matrix(k, p))),
        shift in 0usize..6,
    ) {
        let (a, b, c) = (Codebook::new(a).unwrap(), Codebook::new(b).unwrap(), Codebook::new(c).unwrap());
        let ab = codebook_error(&a, &b).unwrap().raw_l1;
        let ba = codebook_error(&b, &a).unwrap().raw_l1;
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        let k = a.k();
        let rotated: Vec<Vec<f64>> = (0..k).map(|j| b.center((j + shift) % k).to_vec()).collect();
        let rb = codebook_error(&a, &Codebook::from_rows(&rotated).unwrap()).unwrap().raw_l1;
        prop_assert!((ab - rb).abs() <= 1e-9 * ab.max(1.0));
        let ac = codebook_error(&a, &c).unwrap().raw_l1;
        let cb = codebook_error(&c, &b).unwrap().raw_l1;
        prop_assert!(ab <= ac + cb + 1e-9);
        prop_assert_eq!(codebook_error(&a, &a).unwrap().raw_l1, 0.0);
    }
}
