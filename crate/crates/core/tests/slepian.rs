use nalgebra::DMatrix;
use proptest::prelude::*;
use slepbeam::slepian::{self, SlepianBasis};

/// Independent reference: midpoint-rule Nyström eigenvalues on `m` and `2m`
/// cells, Richardson-extrapolated to remove the leading `h²` term.
fn midpoint_reference(c: f64, m: usize, count: usize) -> Vec<f64> {
    let eig = |m: usize| -> Vec<f64> {
        let h = 1.0 / m as f64;
        let x: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) * h).collect();
        let k = DMatrix::from_fn(m, m, |i, j| {
            let d = x[i] - x[j];
            let v = if i == j { 2.0 * c } else { (2.0 * std::f64::consts::PI * c * d).sin() / (std::f64::consts::PI * d) };
            v * h
        });
        let mut l: Vec<f64> = k.symmetric_eigenvalues().iter().copied().collect();
        l.sort_by(|a, b| b.partial_cmp(a).unwrap());
        l
    };
    let (a, b) = (eig(m), eig(2 * m));
    (0..count).map(|k| (4.0 * b[k] - a[k]) / 3.0).collect()
}

#[test]
fn eigenvalues_match_midpoint_reference() {
    for &c in &[0.5, 2.0] {
        let lam = slepian::eigenvalues::<f64>(c).unwrap();
        let reference = midpoint_reference(c, 600, 4);
        for k in 0..4 {
            let rel = (lam[k] - reference[k]).abs() / reference[k];
            assert!(rel < 1e-6, "c={c} k={k}: {} vs {} ({rel:e})", lam[k], reference[k]);
        }
    }
}

#[test]
fn short_interval_has_dimension_one() {
    let b = SlepianBasis::<f64>::build(1.0, 0.02, 1e-3, 8).unwrap();
    assert_eq!(b.dimension(), 1);
}

#[test]
fn degenerate_interval_is_rank_one() {
    let lam = slepian::eigenvalues::<f64>(1e-6).unwrap();
    assert_eq!(slepian::dimension(1e-6, 1e-3).unwrap(), 1);
    assert!(lam[0] / lam[1] >= 1e10, "ratio {}", lam[0] / lam[1]);
}

#[test]
fn trace_identity_unit_product() {
    let b = SlepianBasis::<f64>::build(1.0, 1.0, 1e-3, 8).unwrap();
    let sum: f64 = b.eigenvalues().iter().sum();
    assert!((sum - 2.0).abs() < 1e-6 * 2.0, "sum {sum}");
}

#[test]
fn dimension_examples() {
    assert_eq!(slepian::dimension(0.1, 1e-3).unwrap(), 2);
    assert_eq!(slepian::dimension(0.2, 1e-4).unwrap(), 3);
    let d = slepian::dimension(1.0, 1e-3).unwrap();
    assert!((3..=4).contains(&d), "d = {d}");
}

#[test]
fn eigenvalues_are_ordered_and_bounded() {
    let b = SlepianBasis::<f64>::build(3.0, 2.0, 1e-3, 8).unwrap();
    let lam = b.eigenvalues();
    for k in 0..lam.len() {
        assert!(lam[k] > 0.0 && lam[k] < 1.0);
        if k > 0 {
            assert!(lam[k] <= lam[k - 1]);
        }
    }
    assert!(b.kept() >= b.dimension() + 8);
}

#[test]
fn kept_functions_are_trapezoid_orthonormal() {
    for &(om, t) in &[(1.0, 1.0), (5.0, 2.0), (0.5, 47.0)] {
        let b = SlepianBasis::<f64>::build(om, t, 1e-3, 8).unwrap();
        let g = b.trapezoid_gram();
        let err = (g - DMatrix::identity(b.kept(), b.kept())).abs().max();
        assert!(err < 1e-8, "ΩT={} gram error {err:e}", om * t);
    }
}

#[test]
fn evaluation_at_grid_points_is_exact() {
    let b = SlepianBasis::<f64>::build(2.0, 1.5, 1e-3, 8).unwrap();
    let times: Vec<f64> = b.grid_times().iter().copied().step_by(37).collect();
    let idx: Vec<usize> = (0..b.kept()).collect();
    let v = b.evaluate(&idx, &times).unwrap();
    for (r, i) in (0..b.grid_len()).step_by(37).enumerate() {
        for k in 0..b.kept() {
            assert_eq!(v[(r, k)], b.basis_samples()[(i, k)]);
        }
    }
}

#[test]
fn leading_function_is_even_about_the_midpoint() {
    let b = SlepianBasis::<f64>::build(4.0, 1.0, 1e-3, 8).unwrap();
    let times: Vec<f64> = (0..97).map(|i| 0.003 + 0.01 * i as f64 * 0.99).collect();
    let reflected: Vec<f64> = times.iter().map(|t| 1.0 - t).collect();
    let a = b.evaluate(&[0], &times).unwrap();
    let r = b.evaluate(&[0], &reflected).unwrap();
    let sign = (a[(0, 0)] * r[(0, 0)]).signum();
    for i in 0..times.len() {
        assert!((a[(i, 0)] - sign * r[(i, 0)]).abs() < 1e-6);
    }
}

#[test]
fn mid_grid_value_matches_refined_rebuild() {
    // ΩT = 80: density 16 gives 2560 grid points, density 64 gives 10240.
    // Compared over the concentrated functions (1 - λ ≤ 1e-6), whose endpoint
    // values are small enough for the trapezoid rule to be exact to rounding.
    let coarse = SlepianBasis::<f64>::build(40.0, 2.0, 1e-3, 16).unwrap();
    let fine = SlepianBasis::<f64>::build(40.0, 2.0, 1e-3, 64).unwrap();
    let step = 2.0 / (coarse.grid_len() - 1) as f64;
    let times: Vec<f64> = (0..coarse.grid_len() - 1).step_by(41).map(|i| (i as f64 + 0.5) * step).collect();
    let concentrated = coarse.eigenvalues().iter().take_while(|&&l| l >= 1.0 - 1e-6).count();
    assert!(concentrated > 100);
    let a = coarse.evaluate_leading(concentrated, &times).unwrap();
    let b = fine.evaluate_leading(concentrated, &times).unwrap();
    let err = (a - b).abs().max();
    assert!(err < 1e-7, "mid-grid disagreement {err:e}");
}

#[test]
fn eigenvalues_plunge_after_the_time_bandwidth_product() {
    for &c in &[0.5, 1.0, 3.0, 10.0, 50.0, 200.0] {
        let lam = slepian::eigenvalues::<f64>(c).unwrap();
        let k = (2.0_f64 * c).ceil() as usize + 6;
        assert!(lam[k - 1] < 1e-3, "ΩT={c}: λ_{k} = {}", lam[k - 1]);
    }
}

#[test]
fn doubling_grid_density_keeps_eigenvalues() {
    let a = SlepianBasis::<f64>::build(3.0, 5.0, 1e-3, 8).unwrap();
    let b = SlepianBasis::<f64>::build(3.0, 5.0, 1e-3, 16).unwrap();
    for k in 0..a.kept() {
        let rel = (a.eigenvalues()[k] - b.eigenvalues()[k]).abs() / a.eigenvalues()[k];
        assert!(rel < 1e-8);
    }
}

#[test]
fn quadrature_size_is_converged() {
    // Eigenvalues above 1e-6 are insensitive to extra quadrature nodes.
    for &c in &[5.0, 60.0] {
        let lam = slepian::eigenvalues::<f64>(c).unwrap();
        let more = slepian::eigenvalues_with_nodes::<f64>(c, 3 * slepian::node_count(c) / 2).unwrap();
        for k in 0..lam.len() {
            if lam[k] > 1e-6 {
                assert!((lam[k] - more[k]).abs() < 1e-12, "ΩT={c} k={k}");
            }
        }
    }
}

#[test]
fn rejects_out_of_range_arguments() {
    assert!(SlepianBasis::<f64>::build(0.0, 1.0, 1e-3, 8).is_err());
    assert!(SlepianBasis::<f64>::build(1.0, 1.0, 0.6, 8).is_err());
    assert!(SlepianBasis::<f64>::build(1.0, 1.0, 1e-3, 4).is_err());
    assert!(SlepianBasis::<f64>::build(1.0, 2e4, 1e-3, 8).is_err());
    let b = SlepianBasis::<f64>::build(1.0, 1.0, 1e-3, 8).unwrap();
    assert!(b.evaluate(&[0], &[1.5]).is_err());
    assert!(b.evaluate(&[b.kept()], &[0.5]).is_err());
}

#[test]
fn cache_round_trip() {
    let b = SlepianBasis::<f64>::build(2.0, 3.0, 1e-4, 8).unwrap();
    let path = std::env::temp_dir().join(format!("slepbeam-cache-{}.bin", std::process::id()));
    b.write_cache(&path).unwrap();
    let c = SlepianBasis::<f64>::read_cache(&path).unwrap();
    std::fs::remove_file(&path).ok();
    assert_eq!(c.eigenvalues(), b.eigenvalues());
    assert_eq!(c.basis_samples(), b.basis_samples());
    assert_eq!(c.dimension(), b.dimension());
}

#[test]
fn single_precision_basis_is_usable() {
    let b = SlepianBasis::<f32>::build(1.0, 2.0, 1e-3, 8).unwrap();
    let g = b.trapezoid_gram();
    let err = (g - DMatrix::<f32>::identity(b.kept(), b.kept())).abs().max();
    assert!(err < 1e-4, "f32 gram error {err}");
    assert_eq!(b.dimension(), slepian::dimension(2.0, 1e-3).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dimension_is_monotone(c in 0.001f64..40.0, dc in 0.0f64..5.0) {
        let a = slepian::dimension(c, 1e-3).unwrap();
        let b = slepian::dimension(c + dc, 1e-3).unwrap();
        prop_assert!(a <= b);
        let tight = slepian::dimension(c, 1e-5).unwrap();
        prop_assert!(tight >= a);
    }

    #[test]
    fn trace_identity_holds(c in 0.01f64..80.0) {
        let lam = slepian::eigenvalues::<f64>(c).unwrap();
        let sum: f64 = lam.iter().sum();
        prop_assert!((sum - 2.0 * c).abs() <= 1e-6 * 2.0 * c);
    }

    #[test]
    fn tail_mass_respects_tolerance(c in 0.01f64..30.0, e in 1e-6f64..0.1) {
        let lam = slepian::eigenvalues::<f64>(c).unwrap();
        let d = slepian::dimension_from_eigenvalues(&lam, e);
        let total: f64 = lam.iter().sum();
        let tail: f64 = lam.iter().skip(d).sum();
        prop_assert!(tail <= e * total * (1.0 + 1e-12));
        if d > 1 {
            let tail_before: f64 = lam.iter().skip(d - 1).sum();
            prop_assert!(tail_before > e * total);
        }
    }

    #[test]
    fn interpolation_reproduces_constants(t in 0.0f64..1.0) {
        let b = SlepianBasis::<f64>::build(1.0, 1.0, 1e-3, 8).unwrap();
        let (_, w) = b.stencil(t).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn exact_functions_are_orthonormal_under_gauss_quadrature() {
    let b = SlepianBasis::<f64>::build(6.0, 2.0, 1e-3, 8).unwrap();
    let (x, w) = slepian::gauss_legendre(200);
    let times: Vec<f64> = x.iter().map(|&u| u + 1.0).collect();
    let f = b.evaluate_exact(b.kept(), &times).unwrap();
    let mut g = DMatrix::<f64>::zeros(b.kept(), b.kept());
    for i in 0..b.kept() {
        for j in 0..b.kept() {
            g[(i, j)] = (0..times.len()).map(|r| w[r] * f[(r, i)] * f[(r, j)]).sum();
        }
    }
    assert!((g - DMatrix::identity(b.kept(), b.kept())).abs().max() < 1e-12);
    // Concentrated functions agree with the grid samples.
    let grid = b.evaluate_leading(4, &times).unwrap();
    assert!((grid - f.columns(0, 4)).abs().max() < 1e-6);
}
