use gmbua::consensus::{align_cost, permute_rows};
use gmbua::evalkit::{median_iqr, sre};
use gmbua::hsi::{AbundanceLevel, AbundanceMatrix, BundleLibrary, GroupStructure, HsiCube};
use gmbua::io;
use gmbua::multiscale::{build_operators, SuperpixelMap};
use gmbua::penalty::{project_simplex, project_simplex_sorted, prox, PenaltySpec};
use gmbua::solver::{aggregate_global, build_stacked, simplex_gap};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn vec_in(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0_f64, len)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0_f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn groups_for(q: usize, cut: usize) -> GroupStructure {
    let cut = cut % q;
    if cut == 0 {
        GroupStructure::single(q)
    } else {
        GroupStructure::new(vec![0..cut, cut..q]).unwrap()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn projection_lands_on_simplex(v in vec_in(1..=12)) {
        let x = project_simplex(&v);
        prop_assert!(simplex_gap(&x) <= 1e-12);
        prop_assert!(dist(&x, &project_simplex_sorted(&v)) <= 1e-12);
        prop_assert!(dist(&project_simplex(&x), &x) <= 1e-12);
    }

    #[test]
    fn projection_is_closest_vertex_combination(v in vec_in(2..=6), w in prop::collection::vec(0.0..1.0_f64, 6)) {
        // Any other simplex point is no closer to v.
        let x = project_simplex(&v);
        let other = project_simplex(&w[..v.len()]);
        prop_assert!(dist(&x, &v) <= dist(&other, &v) + 1e-12);
    }

    #[test]
    fn convex_prox_is_nonexpansive(
        a in vec_in(6..=6), b in vec_in(6..=6), t in 0.0..2.0_f64, cut in 0usize..6, kind in 0usize..3,
    ) {
        let spec = [PenaltySpec::l1(), PenaltySpec::group(), PenaltySpec::elitist()][kind];
        let g = groups_for(6, cut);
        let (pa, pb) = (prox(&a, &g, &spec, t).unwrap(), prox(&b, &g, &spec, t).unwrap());
        prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + 1e-12);
    }

    #[test]
    fn prox_with_zero_step_is_identity(v in vec_in(1..=6), kind in 0usize..4) {
        let spec = [PenaltySpec::l1(), PenaltySpec::group(), PenaltySpec::elitist(), PenaltySpec::fractional(2.0, 0.5).unwrap()][kind];
        let g = GroupStructure::single(v.len());
        prop_assert_eq!(prox(&v, &g, &spec, 0.0).unwrap(), v);
    }

    #[test]
    fn prox_shrinks_toward_zero(v in vec_in(1..=6), t in 0.0..2.0_f64, kind in 0usize..4) {
        let spec = [PenaltySpec::l1(), PenaltySpec::group(), PenaltySpec::elitist(), PenaltySpec::fractional(2.0, 0.5).unwrap()][kind];
        let g = groups_for(v.len(), 1);
        let u = prox(&v, &g, &spec, t).unwrap();
        for (x, y) in u.iter().zip(&v) {
            prop_assert!(x * y >= 0.0 && x.abs() <= y.abs() + 1e-12);
        }
    }

    #[test]
    fn stacked_form_reproduces_regularized_fit(
        y in matrix(6, 4), b in matrix(6, 3), prior in matrix(3, 4), x in matrix(3, 4), beta in 0.0..5.0_f64,
    ) {
        let st = build_stacked(&y, &b, &prior, beta).unwrap();
        let lhs = (&st.y - &st.b * &x).norm_squared();
        let rhs = (&y - &b * &x).norm_squared() + beta * (&x - &prior).norm_squared();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
    }

    #[test]
    fn align_cost_undoes_row_permutations(z in matrix(4, 9), shift in 0usize..4) {
        let sigma: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let zp = permute_rows(&z, &sigma);
        let a = align_cost(&z, &zp).unwrap();
        prop_assert!(a.cost <= 1e-12);
        prop_assert_eq!(permute_rows(&zp, &a.sigma), z);
    }

    #[test]
    fn align_cost_is_symmetric(zu in matrix(3, 5), zv in matrix(3, 5)) {
        let (a, b) = (align_cost(&zu, &zv).unwrap(), align_cost(&zv, &zu).unwrap());
        prop_assert!((a.cost - b.cost).abs() <= 1e-12);
    }

    #[test]
    fn coarsen_inverts_upsample(labels in prop::collection::vec(0usize..5, 12), d in matrix(2, 5)) {
        let mut seen: Vec<usize> = Vec::new();
        let dense: Vec<usize> = labels
            .iter()
            .map(|l| seen.iter().position(|s| s == l).unwrap_or_else(|| { seen.push(*l); seen.len() - 1 }))
            .collect();
        let map = SuperpixelMap::from_labels(dense, 3, 4).unwrap();
        let ops = build_operators(&map);
        let coarse = d.columns(0, ops.coarse_len()).into_owned();
        let back = ops.coarsen(&ops.upsample(&coarse).unwrap()).unwrap();
        prop_assert_eq!(back, coarse);
    }

    #[test]
    fn sre_is_scale_invariant(r in matrix(3, 6), e in matrix(3, 6), k in 0.1..10.0_f64) {
        let (a, b) = (sre(&r, &e).unwrap(), sre(&(&r * k), &(&e * k)).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 || (a.is_infinite() && b.is_infinite()));
    }

    #[test]
    fn median_iqr_agrees_with_sorting(v in prop::collection::vec(-100.0..100.0_f64, 1..30)) {
        let (m, iqr) = median_iqr(&v);
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        prop_assert!(m >= s[0] && m <= s[s.len() - 1] && iqr >= 0.0);
        if s.len() % 2 == 1 {
            prop_assert_eq!(m, s[s.len() / 2]);
        }
    }

    #[test]
    fn aggregation_preserves_columns_sums(x in prop::collection::vec(0.0..1.0_f64, 12), cut in 1usize..4) {
        let mut x = DMatrix::from_vec(4, 3, x);
        for mut c in x.column_iter_mut() {
            let p = project_simplex(c.as_slice());
            c.copy_from_slice(&p);
        }
        let groups = GroupStructure::new(vec![0..cut, cut..4]).unwrap();
        let a = AbundanceMatrix::new(AbundanceLevel::Bundle(groups), x.clone()).unwrap();
        let z = aggregate_global(&a).unwrap();
        for j in 0..3 {
            prop_assert!((z.coefficients()[(0, j)] - x.view((0, j), (cut, 1)).sum()).abs() <= 1e-12);
            prop_assert!((z.coefficients().column(j).sum() - 1.0).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cube_and_library_round_trip(data in prop::collection::vec(0.0..1.0_f32, 3 * 2 * 5)) {
        let tmp = tempfile::tempdir().unwrap();
        let m = DMatrix::from_iterator(3, 10, data.iter().map(|&v| v as f64));
        let cube = HsiCube::new(m.clone(), 2, 5).unwrap();
        io::save_cube(&cube, &tmp.path().join("c")).unwrap();
        let back = io::load_cube(&tmp.path().join("c")).unwrap();
        prop_assert_eq!(back.data(), &m);
        prop_assert_eq!((back.height(), back.width()), (2, 5));

        let lib = BundleLibrary::new(m.clone(), GroupStructure::new(vec![0..4, 4..10]).unwrap()).unwrap();
        io::save_library(&lib, &tmp.path().join("l")).unwrap();
        let back = io::load_library(&tmp.path().join("l")).unwrap();
        prop_assert_eq!(back.signatures(), &m);
        prop_assert_eq!(back.groups().sizes(), vec![4, 6]);
    }
}
