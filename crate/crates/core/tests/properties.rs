mod common;

use std::path::{Path, PathBuf};

use dmtnet::data::*;
use dmtnet::metrics::{mae, psnr, ssim};
use dmtnet::optim::{charbonnier_loss, cosine_lr};
use dmtnet::persist::{from_bytes, to_bytes, Checkpoint};
use dmtnet::tensor::{ops, window};
use dmtnet::{Dmtnet, ModelConfig, ParamStore, Tensor};
use proptest::prelude::*;

fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    common::rand_image(h, w, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shuffle_then_unshuffle_is_identity(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, r in 1usize..4, seed: u64) {
        let x = common::rand_tensor::<f32>(&[n, c * r * r, h, w], -1.0, 1.0, seed);
        let y = ops::pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), &[n, c, h * r, w * r]);
        prop_assert_eq!(ops::pixel_unshuffle(&y, r).unwrap(), x);
    }

    #[test]
    fn partition_then_reverse_is_identity(c in 1usize..4, h in 1usize..13, w in 1usize..13, win in 1usize..6, seed: u64) {
        let x = common::rand_tensor::<f32>(&[2, c, h, w], -1.0, 1.0, seed);
        let g = window::window_partition(&x, win).unwrap();
        prop_assert_eq!(g.num_windows(), 2 * h.div_ceil(win) * w.div_ceil(win));
        prop_assert_eq!(window::window_reverse(&g, h, w).unwrap(), x);
    }

    #[test]
    fn patches_cover_the_image(h in 8usize..120, w in 8usize..120, size in 1usize..40, overlap in 0.0f64..0.9) {
        let size = size.min(h).min(w);
        let Ok(spec) = PatchSpec::new(size, overlap) else { return Ok(()) };
        let origins = extract_patches(h, w, &spec).unwrap();
        let mut seen = vec![false; h * w];
        for &(r, c) in &origins {
            prop_assert!(r + size <= h && c + size <= w);
            for rr in r..r + size {
                seen[rr * w + c..rr * w + c + size].iter_mut().for_each(|s| *s = true);
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        let mut sorted = origins.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted, origins);
    }

    #[test]
    fn flips_compose(h in 1usize..9, w in 1usize..9, seed: u64) {
        let x = image(h, w, seed);
        for f in Flip::ALL {
            prop_assert_eq!(f.apply(&f.apply(&x).unwrap()).unwrap(), x.clone());
        }
        let hv = Flip::H.apply(&Flip::V.apply(&x).unwrap()).unwrap();
        prop_assert_eq!(Flip::HV.apply(&x).unwrap(), hv);
    }

    #[test]
    fn softmax_is_a_distribution(k in 1usize..8, scale in 0.1f64..50.0, seed: u64) {
        let logits = common::rand_tensor::<f64>(&[3, k], -scale, scale, seed);
        let p = ops::softmax(&logits, 1).unwrap();
        for row in p.data().chunks(k) {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_stays_between_its_endpoints(total in 1usize..5000, frac in 0.0f64..=1.0, lr_min in 0.0f64..1e-4) {
        let step = ((total as f64) * frac) as usize;
        let lr = cosine_lr(step, total, 1e-3, lr_min).unwrap();
        prop_assert!(lr >= lr_min - 1e-18 && lr <= 1e-3 + 1e-18);
    }

    #[test]
    fn metric_bounds_and_symmetry(h in 11usize..20, w in 11usize..20, a: u64, b: u64) {
        let (x, y) = (image(h, w, a), image(h, w, b));
        prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!(ssim(&x, &y).unwrap() <= 1.0 + 1e-12);
        let m = mae(&x, &y).unwrap();
        prop_assert!(m >= 0.0);
        let eps = 1e-3;
        let c = charbonnier_loss(&x, &y, eps).unwrap();
        prop_assert!(c >= m && c <= m + eps + 1e-12);
    }

    #[test]
    fn containers_roundtrip_random_stores(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 0..6), seed: u64) {
        let mut params = ParamStore::<f64>::new();
        for (i, s) in shapes.iter().enumerate() {
            params.insert(format!("p{i}"), common::rand_tensor(s, -1e3, 1e3, seed ^ i as u64)).unwrap();
        }
        let ckpt = Checkpoint { config: ModelConfig::micro(), params, optimizer: None };
        let bytes = to_bytes(&ckpt).unwrap();
        prop_assert_eq!(from_bytes::<f64>(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn manifests_roundtrip(ids in prop::collection::vec("[a-z0-9_]{1,8}", 0..6), outdoor in prop::collection::vec(any::<bool>(), 6)) {
        let base = Path::new("/data/set");
        let entries = ids.iter().zip(&outdoor).map(|(id, &o)| ManifestEntry {
            id: id.clone(),
            left: base.join(format!("{id}_l.png")),
            right: PathBuf::from(format!("/elsewhere/{id}_r.png")),
            target: base.join("t").join(format!("{id}.png")),
            category: if o { SceneCategory::Outdoor } else { SceneCategory::Indoor },
        }).collect();
        let m = Manifest { entries };
        prop_assert_eq!(Manifest::parse(&m.to_text(base), base).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn inference_keeps_the_input_size(h in 1usize..14, w in 1usize..14, seed: u64) {
        let mut cfg = ModelConfig::micro();
        cfg.patch_size = 2;
        let model = Dmtnet::<f32>::new(cfg, seed).unwrap();
        let out = model.infer(&common::rand_image(h, w, seed), &common::rand_image(h, w, seed + 1)).unwrap();
        prop_assert_eq!(out.shape(), &[1, 3, h, w]);
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
