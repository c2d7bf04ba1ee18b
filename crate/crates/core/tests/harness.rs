use bdiff::data::synthetic_image;
use bdiff::degrade::blur_decimate;
use bdiff::harness::{fingerprint, parallel_map, ExperimentReport, ReportRow};
use bdiff::imageio::{quantize8, read_png, write_png};
use bdiff::kernels::{make_isotropic, BlurKernel, KernelMeta};
use bdiff::metrics::{kernel_l1, lr_consistency_psnr, psnr, PSNR_CAP};
use bdiff::{PaddingMode, RngHandle, Tensor};
use proptest::prelude::*;

#[test]
fn psnr_examples() {
    let a = Tensor::rand_uniform(&[3, 4, 4], 0.0, 1.0, &mut RngHandle::new(0));
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!(psnr(&a, &Tensor::zeros(&[3, 4, 5]), 1.0).is_err());
    assert!(psnr(&a, &b, 0.0).is_err());
}

fn shifted_delta(size: usize, di: usize, dj: usize) -> BlurKernel {
    let mut w = vec![0.0; size * size];
    w[(size / 2 + di) * size + size / 2 + dj] = 1.0;
    BlurKernel::from_weights(size, w, KernelMeta::estimated()).unwrap()
}

#[test]
fn kernel_l1_examples() {
    let d = shifted_delta(21, 0, 0);
    assert_eq!(kernel_l1(&d, &d).unwrap(), 0.0);
    let shifted = shifted_delta(21, 1, 0);
    assert!((kernel_l1(&d, &shifted).unwrap() - 2.0 / 441.0).abs() < 1e-15);
    let (a, b) = (make_isotropic(21, 1.0).unwrap(), make_isotropic(21, 2.5).unwrap());
    assert_eq!(kernel_l1(&a, &b).unwrap(), kernel_l1(&b, &a).unwrap());
    assert!(kernel_l1(&a, &make_isotropic(11, 1.0).unwrap()).is_err());
}

#[test]
fn lr_consistency_examples() {
    let x = synthetic_image(32, 32, &mut RngHandle::new(1));
    let gt = make_isotropic(21, 1.6).unwrap();
    let y = blur_decimate(&x, &gt, 2, PaddingMode::Replicate).unwrap();
    assert_eq!(lr_consistency_psnr(&gt, &x, &y, 2).unwrap(), PSNR_CAP);
    let mut prev = PSNR_CAP;
    for sigma in [2.0, 2.6, 3.4] {
        let score = lr_consistency_psnr(&make_isotropic(21, sigma).unwrap(), &x, &y, 2).unwrap();
        assert!(score < prev, "sigma {sigma}: {score} !< {prev}");
        prev = score;
    }

    let flat = Tensor::full(&[3, 16, 16], 0.37);
    let y_flat = blur_decimate(&flat, &gt, 4, PaddingMode::Replicate).unwrap();
    for k in [make_isotropic(21, 3.9).unwrap(), shifted_delta(21, 3, 2)] {
        let s = lr_consistency_psnr(&k, &flat, &y_flat, 4).unwrap();
        assert!(s > 90.0, "constant image scored {s}");
    }
}

fn rows() -> Vec<ReportRow> {
    (0..4)
        .map(|i| ReportRow {
            id: format!("img{i}"),
            psnr: 20.0 + i as f64 * 0.37,
            kernel_l1: 1e-3 * (i + 1) as f64,
            lr_psnr: 30.0 - i as f64,
        })
        .collect()
}

#[test]
fn report_aggregates_and_csv() {
    let fp = fingerprint("lambda = 1\n", &[0, 1]);
    assert_eq!(fp.len(), 64);
    assert_ne!(fp, fingerprint("lambda = 1\n", &[0, 2]));
    let report = ExperimentReport::new(fp.clone(), rows());
    assert!(report.is_consistent());
    let a = report.aggregates;
    assert_eq!(a.count, 4);
    assert!((a.mean_psnr - (20.0 + 0.37 * 1.5)).abs() < 1e-12);
    assert!((a.mean_lr_psnr - 28.5).abs() < 1e-12);
    let text = report.to_csv();
    assert!(text.starts_with(&format!("# fingerprint={fp}\n")));
    assert_eq!(ExperimentReport::from_csv(&text).unwrap(), report);

    let tampered = text.replace("\nmean,2", "\nmean,9");
    assert!(ExperimentReport::from_csv(&tampered).is_err());
    assert!(ExperimentReport::from_csv("id,psnr,kernel_l1,lr_psnr\n").is_err());
}

#[test]
fn parallel_map_keeps_order_and_propagates_errors() {
    let items: Vec<u64> = (0..57).collect();
    let out = parallel_map(&items, |i, &v| Ok(RngHandle::new(v).split_index(i as u64).seed())).unwrap();
    let serial: Vec<u64> = items.iter().map(|&v| RngHandle::new(v).split_index(v).seed()).collect();
    assert_eq!(out, serial);
    let failed = parallel_map(&items, |i, _| {
        if i == 30 {
            Err(bdiff::Error::InvalidArgument("boom".into()))
        } else {
            Ok(i)
        }
    });
    assert!(failed.is_err());
}

#[test]
fn png_round_trip_is_lossless_on_8bit_values() {
    let dir = tempfile::tempdir().unwrap();
    let img = quantize8(&synthetic_image(12, 20, &mut RngHandle::new(2)));
    let p = dir.path().join("a.png");
    write_png(&p, &img).unwrap();
    let back = read_png(&p).unwrap();
    assert_eq!(back, img);
    assert!(read_png(dir.path().join("missing.png")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psnr_matches_direct_formula(seed in any::<u64>(), peak in 0.5f64..2.0) {
        let mut rng = RngHandle::new(seed);
        let a = Tensor::rand_uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
        let mut mse = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            mse += (x - y) * (x - y);
        }
        mse /= 105.0;
        let want = 10.0 * (peak * peak / mse).log10();
        prop_assert!((psnr(&a, &b, peak).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn quantized_images_survive_png(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let dir = tempfile::tempdir().unwrap();
        let img = quantize8(&Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut RngHandle::new(seed)));
        let p = dir.path().join("x.png");
        write_png(&p, &img).unwrap();
        prop_assert_eq!(read_png(&p).unwrap(), img);
    }
}
