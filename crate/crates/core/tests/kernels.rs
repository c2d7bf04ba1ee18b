use bdiff::kernels::{
    fit_pca, make_anisotropic, make_isotropic, pca_training_corpus, sample_gaussian8, BlurKernel, KernelFamily,
    ISO_KERNEL_SIZE,
};
use bdiff::RngHandle;
use nalgebra::DMatrix;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn weight_hash(k: &BlurKernel) -> String {
    let mut h = Sha256::new();
    for w in k.weights() {
        h.update(w.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn isotropic_examples() {
    assert!(make_isotropic(21, 0.01).unwrap().center_weight() > 0.999);
    let k = make_isotropic(21, 2.0).unwrap();
    let raw: Vec<f64> = (0..441)
        .map(|i| {
            let (r, c) = ((i / 21) as f64 - 10.0, (i % 21) as f64 - 10.0);
            (-(r * r + c * c) / 8.0).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    for (w, r) in k.weights().iter().zip(&raw) {
        assert!((w - r / z).abs() < 1e-15);
    }
    assert!(make_isotropic(20, 1.0).is_err());
    assert!(make_isotropic(21, 0.0).is_err());
}

#[test]
fn center_weight_falls_with_width() {
    let mut prev = f64::INFINITY;
    for i in 0..=38 {
        let c = make_isotropic(21, 0.2 + 0.1 * i as f64).unwrap().center_weight();
        assert!(c < prev);
        prev = c;
    }
}

#[test]
fn anisotropic_examples() {
    let mut rng = RngHandle::new(0);
    let iso = make_isotropic(15, 2.0).unwrap();
    for theta in [0.0, 0.7, -2.3] {
        let k = make_anisotropic(15, 2.0, 2.0, theta, 0.0, &mut rng).unwrap();
        for (a, b) in k.weights().iter().zip(iso.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let a = make_anisotropic(15, 1.2, 3.1, std::f64::consts::FRAC_PI_2, 0.0, &mut rng).unwrap();
    let b = make_anisotropic(15, 3.1, 1.2, 0.0, 0.0, &mut rng).unwrap();
    for (x, y) in a.weights().iter().zip(b.weights()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(make_anisotropic(15, 1.0, 1.0, 0.0, 0.3, &mut rng).is_err());
}

#[test]
fn noisy_anisotropic_matches_reference_run() {
    let k = make_anisotropic(11, 1.4, 2.7, 0.6, 0.25, &mut RngHandle::new(2024)).unwrap();
    assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(k.weights().iter().all(|&w| w >= 0.0));
    assert_eq!(
        weight_hash(&k),
        "83ba46aa97929fb68619eb5c3df640540f11a073986181298d12341088bead2b"
    );
}

#[test]
fn gaussian8_widths() {
    let ks = sample_gaussian8();
    assert_eq!(ks.len(), 8);
    assert_eq!(ks[0].meta().sigma_x, 1.8);
    assert!((ks[7].meta().sigma_x - 3.2).abs() < 1e-12);
    for w in ks.windows(2) {
        assert!((w[1].meta().sigma_x - w[0].meta().sigma_x - 0.2).abs() < 1e-12);
    }
    assert!(ks.iter().all(|k| k.size() == 21));
}

#[test]
fn pca_examples() {
    let corpus = pca_training_corpus(600, 21, 5).unwrap();
    let pca = fit_pca(&corpus, 10).unwrap();
    let n = 441;
    let b = pca.basis();
    for i in 0..10 {
        for j in 0..10 {
            let dot: f64 = (0..n).map(|p| b[i * n + p] * b[j * n + p]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-8);
        }
    }
    let code: Vec<f64> = (0..10).map(|i| 0.01 * i as f64 - 0.03).collect();
    let raw = pca.reconstruct_raw(&code).unwrap();
    let proj: Vec<f64> = (0..10)
        .map(|r| (0..n).map(|p| b[r * n + p] * (raw[p] - pca.mean()[p])).sum())
        .collect();
    for (a, c) in proj.iter().zip(&code) {
        assert!((a - c).abs() < 1e-12);
    }
    let decoded = pca.decode(&code).unwrap();
    assert!((decoded.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let mean_kernel = BlurKernel::from_weights(21, pca.mean().to_vec(), bdiff::kernels::KernelMeta::estimated()).unwrap();
    let c = pca.encode(&mean_kernel).unwrap();
    assert!(c.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);

    let full = fit_pca(&corpus, n).unwrap();
    for k in corpus.iter().take(20) {
        let r = full.reconstruct_raw(&full.encode(k).unwrap()).unwrap();
        for (a, b) in r.iter().zip(k.weights()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    assert!(fit_pca(&corpus, n + 1).is_err());
    assert!(fit_pca(&corpus[..5], 10).is_err());
}

#[test]
fn identical_kernels_reconstruct_exactly() {
    let k = make_isotropic(9, 1.3).unwrap();
    let pca = fit_pca(&vec![k.clone(); 20], 3).unwrap();
    let r = pca.reconstruct_raw(&pca.encode(&k).unwrap()).unwrap();
    for (a, b) in r.iter().zip(k.weights()) {
        assert!((a - b).abs() < 1e-15);
    }
}

/// In-sample round-trip MSE of a `d`-dim fit against the tail of the
/// spectrum, with the spectrum taken from an SVD of the centred data.
fn pca_tail_check(count: usize, d: usize) -> (f64, f64) {
    let corpus = pca_training_corpus(count, ISO_KERNEL_SIZE, 0).unwrap();
    let pca = fit_pca(&corpus, d).unwrap();
    let n = ISO_KERNEL_SIZE * ISO_KERNEL_SIZE;
    let mut mse = 0.0;
    for k in &corpus {
        let r = pca.reconstruct_raw(&pca.encode(k).unwrap()).unwrap();
        mse += r.iter().zip(k.weights()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
    }
    mse /= count as f64;

    let mut mean = vec![0.0; n];
    for k in &corpus {
        for (m, w) in mean.iter_mut().zip(k.weights()) {
            *m += w / count as f64;
        }
    }
    let x = DMatrix::from_fn(count, n, |i, j| corpus[i].weights()[j] - mean[j]);
    let mut sv: Vec<f64> = x.singular_values().iter().map(|s| s * s / count as f64).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let tail: f64 = sv[d..].iter().sum::<f64>() / n as f64;
    (mse, tail)
}

#[test]
fn pca_round_trip_meets_spectral_tail() {
    let (mse, tail) = pca_tail_check(2000, 10);
    assert!(mse <= 1.05 * tail, "mse {mse:e} tail {tail:e}");
}

#[test]
fn kernel_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let k = make_anisotropic(11, 0.9, 2.2, 1.1, 0.2, &mut RngHandle::new(3)).unwrap();
    let p = dir.path().join("k.bdk");
    k.save(&p).unwrap();
    let back = BlurKernel::load(&p).unwrap();
    assert_eq!(back, k);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_kernel_is_normalised_and_seeded(seed in any::<u64>(), aniso in any::<bool>()) {
        let fam = if aniso { KernelFamily::anisotropic_default() } else { KernelFamily::isotropic_default() };
        let k = fam.sample(&mut RngHandle::new(seed)).unwrap();
        prop_assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(k.weights().iter().all(|&w| w >= 0.0));
        let again = fam.sample(&mut RngHandle::new(seed)).unwrap();
        prop_assert_eq!(k.weights(), again.weights());
    }

    #[test]
    fn isotropic_is_point_symmetric(half in 1usize..8, sigma in 0.2f64..4.0) {
        let n = 2 * half + 1;
        let k = make_isotropic(n, sigma).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(k.at(i, j), k.at(n - 1 - i, n - 1 - j));
            }
        }
    }
}
