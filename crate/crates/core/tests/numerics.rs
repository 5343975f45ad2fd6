use masterface::numerics::{dot, norm, pca_fit, sym_eig, Matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn symmetric(n: usize, values: &[f64]) -> Matrix {
    Matrix::from_fn(n, n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        values[a * n + b]
    })
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let c = (dot(a, b) / (norm(a) * norm(b))).abs().min(1.0);
    c.acos().to_degrees()
}

#[test]
fn anisotropic_gaussian_directions_are_recovered() {
    // Axes rotated by 30° in the first plane, spreads 3, 1.5, 0.2.
    let (s, c) = 30f64.to_radians().sin_cos();
    let axes = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
    let spread = [3.0, 1.5, 0.2];
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let samples: Vec<Vec<f64>> = (0..100)
        .map(|_| {
            let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            (0..3)
                .map(|d| (0..3).map(|a| g[a] * spread[a] * axes[a][d]).sum())
                .collect()
        })
        .collect();
    let pca = pca_fit(&samples, 2).unwrap();

    // Oracle: eigenvectors of the brute-force sample covariance.
    let n = samples.len() as f64;
    let mean: Vec<f64> = (0..3)
        .map(|d| samples.iter().map(|x| x[d]).sum::<f64>() / n)
        .collect();
    let cov = Matrix::from_fn(3, 3, |i, j| {
        samples
            .iter()
            .map(|x| (x[i] - mean[i]) * (x[j] - mean[j]))
            .sum::<f64>()
            / (n - 1.0)
    });
    let eig = sym_eig(&cov).unwrap();
    for (k, axis) in axes.iter().take(2).enumerate() {
        let got = pca.components().column(k);
        assert!(angle_deg(&got, &eig.vectors.column(k)) < 5.0);
        assert!(
            angle_deg(&got, axis) < 5.0,
            "component {k} off the generating axis"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sym_eig_reconstructs_within_tolerance(
        n in 1usize..=64,
        values in prop::collection::vec(-10.0f64..10.0, 64 * 64),
    ) {
        let a = symmetric(n, &values);
        let eig = sym_eig(&a).unwrap();
        let resid = eig.reconstruct().sub(&a).unwrap().max_abs();
        prop_assert!(resid <= 1e-6 * a.max_abs().max(f64::MIN_POSITIVE), "residual {}", resid);
        prop_assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        let vtv = eig.vectors.transpose().matmul(&eig.vectors).unwrap();
        prop_assert!(vtv.sub(&Matrix::identity(n)).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn captured_variance_grows_with_k(
        seed in any::<u64>(),
        d in 2usize..12,
        n in 3usize..20,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|j| { let g: f64 = StandardNormal.sample(&mut rng); g * (j + 1) as f64 }).collect::<Vec<f64>>())
            .collect();
        let kmax = d.min(n - 1);
        let mut prev = 0.0;
        for k in 1..=kmax {
            let pca = pca_fit(&samples, k).unwrap();
            let captured: f64 = pca.singular_values().iter().map(|s| s * s).sum();
            prop_assert!(captured >= prev * (1.0 - 1e-12));
            prev = captured;
            let ctc = pca.components().transpose().matmul(pca.components()).unwrap();
            prop_assert!(ctc.sub(&Matrix::identity(k)).unwrap().max_abs() < 1e-7);
        }
    }

    #[test]
    fn reconstruct_then_project_is_idempotent(
        seed in any::<u64>(),
        coeffs in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..6).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>())
            .collect();
        let pca = pca_fit(&samples, 3).unwrap();
        let x = pca.reconstruct(&coeffs).unwrap();
        let y = pca.project(&x).unwrap();
        for (a, b) in y.iter().zip(&coeffs) {
            prop_assert!((a - b).abs() < 1e-7);
        }
        let x2 = pca.reconstruct(&y).unwrap();
        for (a, b) in x.iter().zip(&x2) {
            prop_assert!((a - b).abs() < 1e-7);
        }
    }
}
