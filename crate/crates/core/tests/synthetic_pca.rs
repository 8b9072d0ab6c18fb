use amoe_core::feature_io::{gen_synthetic, SyntheticSpec};
use nalgebra::DMatrix;

/// Singular values of the mean-centred normal patch features of one class.
fn spectrum(spec: &SyntheticSpec, class: usize) -> (Vec<f64>, usize) {
    let data = gen_synthetic(spec).unwrap();
    let c = &data.classes[class];
    let rows: Vec<Vec<f64>> = c
        .train
        .iter()
        .flat_map(|s| s.target.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        .collect();
    let n = rows.len();
    let d = spec.dim;
    let mut m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    (m.singular_values().iter().copied().collect(), n)
}

#[test]
fn normal_features_lie_on_the_declared_manifold() {
    let spec = SyntheticSpec {
        n_classes: 2,
        train_per_class: 30,
        test_per_class: 4,
        ..SyntheticSpec::default()
    };
    for class in 0..2 {
        let (sv, n) = spectrum(&spec, class);
        let r = spec.manifold_rank;
        let var: Vec<f64> = sv.iter().map(|s| s * s / (n - 1) as f64).collect();
        // Everything outside the top r directions is isotropic noise.
        let residual = var[r..].iter().sum::<f64>() / (spec.dim - r) as f64;
        let noise = spec.noise_std * spec.noise_std;
        assert!((residual / noise - 1.0).abs() < 0.15, "class {class}: residual {residual} vs {noise}");
        assert!(var[r - 1] > 20.0 * var[r], "class {class}: spectrum {var:?}");
    }
}

#[test]
fn noiseless_features_have_exact_rank() {
    let spec = SyntheticSpec {
        n_classes: 1,
        train_per_class: 10,
        test_per_class: 2,
        noise_std: 0.0,
        manifold_rank: 3,
        dim: 12,
        ..SyntheticSpec::default()
    };
    let (sv, _) = spectrum(&spec, 0);
    // Bundles store f32, so the null space carries rounding noise only.
    assert!(sv[3] < 1e-5 * sv[0], "{sv:?}");
    assert!(sv[2] > 1e-2 * sv[0], "{sv:?}");
}
