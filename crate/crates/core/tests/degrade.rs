use bdiff::degrade::{
    apply, awgn, bicubic_resize, blur_decimate, blur_decimate_adjoint, fidelity, fidelity_value, DegradationSpec,
    ResizeDirection,
};
use bdiff::harness::gradcheck::{as_case, check_gradients};
use bdiff::kernels::{make_anisotropic, make_isotropic, BlurKernel};
use bdiff::{PaddingMode, RngHandle, Tape, Tensor};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

/// Direct `(k ⊗ x)↓s` with replicate borders, one output pixel at a time.
fn direct_blur_decimate(x: &Tensor, k: &BlurKernel, s: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = k.size() as isize;
    let half = n / 2;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    Tensor::from_fn(&[c, h / s, w / s], |flat| {
        let (ch, rest) = (flat / ((h / s) * (w / s)), flat % ((h / s) * (w / s)));
        let (oi, oj) = ((rest / (w / s) * s) as isize, (rest % (w / s) * s) as isize);
        let mut acc = 0.0;
        for a in 0..n {
            for b in 0..n {
                let xi = clamp(oi - (a - half), h);
                let xj = clamp(oj - (b - half), w);
                acc += k.at(a as usize, b as usize) * x.at(&[ch, xi, xj]);
            }
        }
        acc
    })
}

fn reference_image(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let (r, q) = ((p / w) as f64, (p % w) as f64);
        0.5 + 0.3 * ((0.31 * r + 0.17 * q + c as f64).sin() * (0.23 * q - 0.11 * r).cos())
    })
}

#[test]
fn delta_kernel_examples() {
    let d = BlurKernel::delta(5).unwrap();
    let x = reference_image(4, 4);
    let y = apply(&DegradationSpec::new(d.clone(), 1, 0.0).unwrap(), &x, &mut RngHandle::new(0)).unwrap();
    assert_eq!(y, x);
    let ramp = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
    let y = blur_decimate(&ramp, &d, 2, PaddingMode::Replicate).unwrap();
    assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
    assert!(blur_decimate(&Tensor::zeros(&[1, 5, 4]), &d, 2, PaddingMode::Replicate).is_err());
}

#[test]
fn wide_kernel_at_scale_four_matches_direct_convolution() {
    let x = reference_image(32, 32);
    let k = make_isotropic(21, 2.6).unwrap();
    let y = blur_decimate(&x, &k, 4, PaddingMode::Replicate).unwrap();
    let oracle = direct_blur_decimate(&x, &k, 4);
    assert!(y.max_abs_diff(&oracle).unwrap() < 1e-13);
    let mut h = Sha256::new();
    for v in y.data() {
        h.update(v.to_le_bytes());
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, GOLDEN_SCALE4);
}

const GOLDEN_SCALE4: &str = "1c0f3ff0a98ebe278dd55c6edd16caede9e69ec6c20452b45132728bdcd90b3f";

#[test]
fn fidelity_examples() {
    let x = reference_image(8, 8);
    let k = make_isotropic(5, 1.0).unwrap();
    let y = blur_decimate(&x, &k, 2, PaddingMode::Replicate).unwrap();
    assert_eq!(fidelity_value(&y, &k, &x, 2).unwrap(), 0.0);

    let mut rng = RngHandle::new(3);
    let x_hat = Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
    let f = as_case(|_, v| fidelity(&y, &k, v[0], 2, PaddingMode::Replicate));
    assert!(check_gradients(&f, &[x_hat.clone()], None, &mut rng).unwrap() < 1e-5);

    let tape = Tape::new();
    let v = tape.var(x_hat.clone());
    let r = fidelity(&y, &k, v, 2, PaddingMode::Replicate).unwrap();
    let before = r.value().item().unwrap();
    let g = tape.backward(r).unwrap().take(v).unwrap();
    let stepped = x_hat.zip_map(&g, |a, b| a - 1e-3 * b).unwrap();
    assert!(fidelity_value(&y, &k, &stepped, 2).unwrap() < before);
    assert!(fidelity_value(&y, &k, &Tensor::zeros(&[3, 6, 6]), 2).is_err());
}

#[test]
fn fidelity_vanishes_only_on_consistent_images() {
    let k = make_isotropic(5, 0.9).unwrap();
    let x = reference_image(8, 8);
    let y = blur_decimate(&x, &k, 2, PaddingMode::Replicate).unwrap();
    let mut moved = x.clone();
    moved.data_mut()[0] += 1e-3;
    assert!(fidelity_value(&y, &k, &moved, 2).unwrap() > 0.0);
    let y_shift = y.map(|v| v + 1e-9);
    assert!(fidelity_value(&y_shift, &k, &x, 2).unwrap() > 0.0);
}

#[test]
fn bicubic_examples() {
    let x = reference_image(6, 8);
    assert_eq!(bicubic_resize(&x, (1, 1), ResizeDirection::Up).unwrap(), x);
    for dir in [ResizeDirection::Up, ResizeDirection::Down] {
        let out = bicubic_resize(&Tensor::full(&[2, 10, 14], 0.42), (2, 1), dir).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.42).abs() < 1e-12));
    }
    let ramp = Tensor::from_fn(&[1, 8, 8], |i| 0.1 * (i % 8) as f64 + 0.05 * (i / 8) as f64);
    let up = bicubic_resize(&ramp, (2, 1), ResizeDirection::Up).unwrap();
    for i in 4..12 {
        for j in 4..12 {
            let (src_i, src_j) = ((i as f64 + 0.5) / 2.0 - 0.5, (j as f64 + 0.5) / 2.0 - 0.5);
            let want = 0.1 * src_j + 0.05 * src_i;
            assert!((up.at(&[0, i, j]) - want).abs() < 1e-6);
        }
    }
    assert!(bicubic_resize(&Tensor::zeros(&[1, 5, 5]), (2, 1), ResizeDirection::Down).is_err());
}

#[test]
fn awgn_examples() {
    let x = Tensor::zeros(&[1_000_000]);
    assert_eq!(awgn(&x, 0.0, &mut RngHandle::new(1)).unwrap(), x);
    let n = awgn(&x, 0.05, &mut RngHandle::new(1)).unwrap();
    let std = (n.data().iter().map(|v| v * v).sum::<f64>() / n.numel() as f64).sqrt();
    assert!((std / 0.05 - 1.0).abs() < 0.01);
    assert_eq!(n, awgn(&x, 0.05, &mut RngHandle::new(1)).unwrap());
    assert!(awgn(&x, -0.1, &mut RngHandle::new(1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn degradation_adjoint(seed in any::<u64>(), s in prop::sample::select(vec![1usize, 2, 4]), big in any::<bool>(), aniso in any::<bool>()) {
        let mut rng = RngHandle::new(seed);
        let n = if big { 16 } else { 8 };
        let k = if aniso {
            make_anisotropic(7, rng.uniform(0.6, 3.0), rng.uniform(0.6, 3.0), rng.uniform(-3.0, 3.0), 0.25, &mut rng).unwrap()
        } else {
            make_isotropic(7, rng.uniform(0.2, 3.0)).unwrap()
        };
        let x = Tensor::randn(&[3, n, n], &mut rng);
        let u = Tensor::randn(&[3, n / s, n / s], &mut rng);
        let ax = blur_decimate(&x, &k, s, PaddingMode::Replicate).unwrap();
        let at_u = blur_decimate_adjoint(&u, &k, s, PaddingMode::Replicate).unwrap();
        let gap = (ax.dot(&u).unwrap() - x.dot(&at_u).unwrap()).abs() / (ax.norm() * u.norm());
        prop_assert!(gap < 1e-10, "gap {gap:e}");
    }

    #[test]
    fn noiseless_degradation_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = RngHandle::new(seed);
        let spec = DegradationSpec::new(make_isotropic(9, 1.7).unwrap(), 2, 0.0).unwrap();
        let (x1, x2) = (Tensor::randn(&[3, 8, 8], &mut rng), Tensor::randn(&[3, 8, 8], &mut rng));
        let mix = x1.zip_map(&x2, |p, q| a * p + b * q).unwrap();
        let lhs = apply(&spec, &mix, &mut rng).unwrap();
        let (y1, y2) = (apply(&spec, &x1, &mut rng).unwrap(), apply(&spec, &x2, &mut rng).unwrap());
        let rhs = y1.zip_map(&y2, |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}
