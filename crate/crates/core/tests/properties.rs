//! Invariants checked over random inputs.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vce::harness::make_folds;
use vce::imgcore::{GrayImage, LesionMask, ValueRange};
use vce::model::{build_bundle, translate, NetConfig};
use vce::nn::{NormKind, Tensor};
use vce::phantom::ManifestRecord;
use vce::preprocess::{
    augment_pair, contrast_stretch, pad_square, pad_square_mask, resize_mask, AugmentParams, AugmentPolicy,
};
use vce::quality::{mse, psnr, psnr_from_mse, roi_metrics};
use vce::trainer::ReplayBuffer;

fn image(h: usize, w: usize) -> impl Strategy<Value = GrayImage> {
    prop::collection::vec(0.0f32..=1.0, h * w).prop_map(move |px| GrayImage::new(h, w, px, ValueRange::UNIT).unwrap())
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = LesionMask> {
    prop::collection::vec(0u8..=1, h * w).prop_map(move |px| LesionMask::new(h, w, px).unwrap())
}

fn sized_image() -> impl Strategy<Value = GrayImage> {
    (2usize..20, 2usize..20).prop_flat_map(|(h, w)| image(h, w))
}

fn policy() -> impl Strategy<Value = AugmentPolicy> {
    (0.0..0.3f64, 0.0..0.3f64, any::<bool>(), 0.0..30.0f64).prop_map(|(shift, zoom, hflip, rot)| AugmentPolicy {
        shift_frac: shift,
        zoom_frac: zoom,
        hflip,
        max_rotation_deg: rot,
        rng_seed: 0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn padding_preserves_content(img in sized_image()) {
        let p = pad_square(&img);
        let (h, w) = img.shape();
        prop_assert_eq!(p.shape(), (h.max(w), h.max(w)));
        prop_assert!((p.sum() - img.sum()).abs() < 1e-6 * (1.0 + img.sum()));
    }

    #[test]
    fn padded_mask_keeps_its_count(h in 1usize..16, w in 1usize..16, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let px: Vec<u8> = (0..h * w).map(|_| rand::Rng::gen_range(&mut rng, 0..=1)).collect();
        let m = LesionMask::new(h, w, px).unwrap();
        prop_assert_eq!(pad_square_mask(&m).count(), m.count());
    }

    #[test]
    fn resized_masks_stay_binary(m in mask(12, 12), size in 1usize..40) {
        let r = resize_mask(&m, size).unwrap();
        prop_assert!(r.pixels().iter().all(|&v| v <= 1));
        if m.count() == 144 {
            prop_assert_eq!(r.count(), size * size);
        }
        if m.is_empty() {
            prop_assert!(r.is_empty());
        }
    }

    #[test]
    fn stretch_is_monotone(img in image(10, 10)) {
        let out = contrast_stretch(&img, 2.0, 98.0).unwrap();
        let (a, b) = (img.pixels(), out.pixels());
        prop_assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..a.len() {
            for j in 0..a.len() {
                if a[i] < a[j] {
                    prop_assert!(b[i] <= b[j]);
                }
            }
        }
    }

    #[test]
    fn paired_augmentation_is_one_transform(
        x in image(16, 16), y in image(16, 16), s in mask(16, 16), pol in policy(), seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ax, ay, as_, params) = augment_pair(&x, &y, &s, &pol, &mut rng).unwrap();
        prop_assert_eq!(ax, params.apply_image(&x));
        prop_assert_eq!(ay, params.apply_image(&y));
        prop_assert_eq!(&as_, &params.apply_mask(&s));
        prop_assert!(as_.pixels().iter().all(|&v| v <= 1));
        prop_assert!(params.dx.abs() <= pol.shift_frac * 16.0 + 1e-9);
        prop_assert!((params.zoom - 1.0).abs() <= pol.zoom_frac + 1e-9);
        prop_assert!(params.angle_deg.abs() <= pol.max_rotation_deg + 1e-9);
        prop_assert!(pol.hflip || !params.flip);
    }

    #[test]
    fn identity_transform_is_exact(x in image(9, 13), s in mask(9, 13)) {
        prop_assert_eq!(AugmentParams::IDENTITY.apply_image(&x), x);
        prop_assert_eq!(AugmentParams::IDENTITY.apply_mask(&s), s);
    }

    #[test]
    fn psnr_matches_its_mse(a in image(8, 8), b in image(8, 8)) {
        let m = mse(&a, &b).unwrap();
        prop_assume!(m > 0.0);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr_from_mse(m, 1.0));
        prop_assert!((psnr_from_mse(m, 1.0) - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    }

    #[test]
    fn full_mask_roi_equals_global(a in image(8, 8), b in image(8, 8)) {
        let (roi_mse, roi_mae) = roi_metrics(&a, &b, &LesionMask::ones(8, 8)).unwrap();
        prop_assert!((roi_mse - mse(&a, &b).unwrap()).abs() < 1e-12);
        prop_assert!(roi_mae * roi_mae <= roi_mse + 1e-12);
    }

    #[test]
    fn replay_buffer_is_bounded(capacity in 0usize..8, batches in 1usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = ReplayBuffer::new(capacity);
        let mut produced = Vec::new();
        for k in 0..batches {
            let fakes = Tensor::filled([2, 1, 2, 2], k as f32);
            produced.push(k as f32);
            let out = pool.query(&fakes, &mut rng);
            prop_assert_eq!(out.dims(), fakes.dims());
            prop_assert!(pool.len() <= capacity);
            // Every returned image is one that was produced at some point.
            prop_assert!(out.data().iter().all(|v| produced.contains(v)));
        }
    }

    #[test]
    fn folds_partition_grouped_patients(
        n_patients in 10usize..60, n_folds in 2usize..6, seed in any::<u64>(), lesion_every in 1usize..5
    ) {
        prop_assume!(n_patients >= n_folds);
        let manifest: Vec<ManifestRecord> = (0..n_patients * 2)
            .map(|i| ManifestRecord {
                path_x: format!("{i}x"),
                path_y: format!("{i}y"),
                path_s: format!("{i}s"),
                patient_id: format!("p{}", i / 2),
                has_lesion: (i / 2) % lesion_every == 0,
            })
            .collect();
        let plan = make_folds(&manifest, n_folds, seed).unwrap();
        let counts = plan.lesion_counts();
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let ids: Vec<&str> = manifest.iter().map(|m| m.patient_id.as_str()).collect();
        let mut seen = vec![0; manifest.len()];
        for r in 0..n_folds {
            let split = plan.split(&ids, r).unwrap();
            for &i in &split.test {
                seen[i] += 1;
            }
            for i in (0..manifest.len()).step_by(2) {
                prop_assert_eq!(split.test.contains(&i), split.test.contains(&(i + 1)));
                prop_assert_eq!(split.train.contains(&i), split.train.contains(&(i + 1)));
            }
            prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), manifest.len());
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn translation_commutes_with_batch_order(seed in any::<u64>()) {
        let cfg = NetConfig {
            image_size: 16,
            base_channels: 2,
            n_res_blocks: 1,
            disc_layers: 1,
            norm_kind: NormKind::Instance,
        };
        let bundle = build_bundle::<f32>(&cfg, seed).unwrap();
        let batch = common::random_batch(&mut common::rng(seed), 3, 16);
        let out = translate(&bundle.g, &cfg, &batch.x).unwrap();
        let perm = [2usize, 0, 1];
        let parts: Vec<Tensor<f32>> = perm.iter().map(|&b| batch.x.select(b)).collect();
        let permuted = Tensor::stack(&parts.iter().collect::<Vec<_>>()).unwrap();
        let out_p = translate(&bundle.g, &cfg, &permuted).unwrap();
        for (k, &b) in perm.iter().enumerate() {
            prop_assert_eq!(out_p.sample(k), out.sample(b));
        }
    }
}
