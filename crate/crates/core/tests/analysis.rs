mod common;

use dmtnet::analysis::{closed_form, complexity, count_params, dump_scale_signals, model_flops, read_alpha_file};
use dmtnet::{Dmtnet, ModelConfig};

#[test]
fn complexity_at_64x64_with_96_channels_and_window_8() {
    let r = complexity(64, 64, 96, 8).unwrap();
    assert_eq!(r.omega_wmsa, 201_326_592);
    assert_eq!(r.omega_msa, 3_372_220_416);
    assert!((r.approx_ratio - 4096.0 / 192.0).abs() < 1e-12);
    assert!((r.ratio - 16.75).abs() < 1e-12);
}

#[test]
fn one_window_makes_both_counts_equal() {
    for (h, w, c) in [(8, 8, 96), (4, 4, 3), (1, 1, 1)] {
        let r = complexity(h, w, c, h).unwrap();
        assert_eq!(r.omega_msa, r.omega_wmsa);
    }
}

#[test]
fn ratio_reconstructs_the_global_count() {
    for (h, w, c, win) in [(64u64, 64u64, 96u64, 8u64), (17, 5, 3, 2), (128, 96, 32, 4)] {
        let r = complexity(h, w, c, win).unwrap();
        let hw = (h * w) as f64;
        let rebuilt = r.ratio * (2.0 * (win * win) as f64 * hw * c as f64 + 4.0 * hw * (c * c) as f64);
        assert!((rebuilt / r.omega_msa as f64 - 1.0).abs() < 1e-12);
    }
}

#[test]
fn complexity_grows_with_every_argument() {
    let base = complexity(16, 16, 8, 4).unwrap();
    for r in [complexity(17, 16, 8, 4), complexity(16, 17, 8, 4), complexity(16, 16, 9, 4)] {
        let r = r.unwrap();
        assert!(r.omega_msa > base.omega_msa && r.omega_wmsa > base.omega_wmsa);
    }
    assert!(complexity(16, 16, 8, 5).unwrap().omega_wmsa > base.omega_wmsa);
}

#[test]
fn closed_form_agrees_with_live_stores() {
    let mut cfgs: Vec<ModelConfig> = ["dmtnet-t", "dmtnet-s", "dmtnet-b", "micro", "toy"]
        .iter()
        .map(|n| ModelConfig::preset(n).unwrap())
        .collect();
    let mut cnn = ModelConfig::toy();
    cnn.use_transformer_stem = false;
    cnn.patch_size = 4;
    cfgs.push(cnn);
    for cfg in cfgs {
        let live = Dmtnet::<f32>::new(cfg.clone(), 0).unwrap().params.num_elements() as u64;
        let report = count_params(&cfg).unwrap();
        assert_eq!(report.total, live);
        assert_eq!(report.submodules.iter().map(|(_, n)| n).sum::<u64>(), live);
        assert_eq!(closed_form::total(&cfg), live);
    }
}

#[test]
fn single_residual_group_count() {
    let cfg = ModelConfig::full(1);
    assert_eq!(closed_form::rgm(&cfg), (3_692_800, 3_200));
    let store = Dmtnet::<f32>::new(cfg, 0).unwrap().params;
    let (mut convs, mut slopes) = (0, 0);
    for e in store.iter().filter(|e| e.name.starts_with("dmssrm.0.branch.0.rgm.")) {
        if e.name.ends_with(".slope") {
            slopes += e.value.len();
        } else {
            convs += e.value.len();
        }
    }
    assert_eq!(convs, 3_692_800);
    assert_eq!(slopes, 50 * 64);
}

#[test]
fn per_module_increment_is_near_the_published_delta() {
    let published = 11.89e6;
    for k in 0..4 {
        let a = count_params(&ModelConfig::full(k)).unwrap().total;
        let b = count_params(&ModelConfig::full(k + 1)).unwrap().total;
        let delta = (b - a) as f64;
        assert_eq!(b - a, count_params(&ModelConfig::full(k)).unwrap().per_dmssrm);
        assert!((delta / published - 1.0).abs() <= 0.15, "increment {delta}");
    }
}

#[test]
fn flops_scale_linearly_with_pixels() {
    let cfg = ModelConfig::full(1);
    // The selection conv acts on pooled features, independent of size.
    let select = 2 * (cfg.embed_dim * cfg.num_scales) as u128;
    let a = model_flops(&cfg, 64, 64).unwrap() - select;
    assert_eq!(model_flops(&cfg, 128, 64).unwrap() - select, 2 * a);
    let small = complexity(16, 16, 96, 8).unwrap();
    let tall = complexity(32, 16, 96, 8).unwrap();
    let quad = |r: &dmtnet::analysis::ComplexityReport| r.omega_msa - 4 * (r.h * r.w) as u128 * 96 * 96;
    assert_eq!(quad(&tall), 4 * quad(&small));
}

#[test]
fn stem_and_head_only_flops_match_hand_count() {
    let mut cfg = ModelConfig::full(0);
    cfg.num_blocks = 0;
    let (h, w) = (32u128, 48u128);
    let (fh, fw, p, c) = (h / 4, w / 4, 4u128, 96u128);
    let embed = fh * fw * c * 6 * p * p;
    let head = fh * fw * 3 * p * p * c * 9;
    assert_eq!(model_flops(&cfg, 32, 48).unwrap(), 2 * (embed + head));
    assert!(model_flops(&cfg, 30, 48).is_err());
}

#[test]
fn base_variant_flops_have_the_published_order_of_magnitude() {
    let f = model_flops(&ModelConfig::preset("dmtnet-b").unwrap(), 1120, 1680).unwrap() as f64;
    let published = 1294.41e9;
    assert!((f / published).log10().abs() < 0.5, "{f:e}");
}

#[test]
fn scale_dump_writes_weights_and_per_scale_images() {
    let mut cfg = ModelConfig::micro();
    cfg.num_scales = 3;
    cfg.num_dmssrm = 2;
    let mut model = Dmtnet::<f32>::new(cfg, 0).unwrap();
    common::zero_where(&mut model.params, |n| n.contains(".select."));
    let dir = tempfile::tempdir().unwrap();
    let (r, l) = (common::rand_image(16, 12, 1), common::rand_image(16, 12, 2));
    let dump = dump_scale_signals(&model, &r, &l, dir.path()).unwrap();
    let alphas = read_alpha_file(&dump.alpha_file).unwrap();
    assert_eq!(alphas.len(), 2);
    for rows in &alphas {
        for row in rows {
            assert_eq!(row.len(), 3);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for &a in row {
                assert!((a - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }
    assert_eq!(dump.feature_images.len(), 6);
    for (_, j, path, h, w) in &dump.feature_images {
        assert_eq!((*h, *w), (16 >> j, 12 >> j));
        let img = image::open(path).unwrap();
        assert_eq!((img.height() as usize, img.width() as usize), (*h, *w));
    }
}

#[test]
fn trained_like_weights_dump_arbitrary_positive_weights() {
    let mut model = Dmtnet::<f64>::new(ModelConfig::micro(), 0).unwrap();
    common::jitter(&mut model.params, 0.5, 3);
    let bias = model.params.value_mut("dmssrm.0.select.bias").unwrap();
    bias.data_mut()[1] = -18.0;
    let dir = tempfile::tempdir().unwrap();
    let dump =
        dump_scale_signals(&model, &common::rand_image(8, 8, 1), &common::rand_image(8, 8, 2), dir.path()).unwrap();
    let alphas = read_alpha_file(&dump.alpha_file).unwrap();
    let row = &alphas[0][0];
    assert!(row[1] > 0.0 && row[1] < 1e-6);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(dump.trace.modules[0].alpha.data()[1], row[1]);
}
