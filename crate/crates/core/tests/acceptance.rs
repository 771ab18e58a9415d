//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{jitter, rand_image, rand_tensor, zero_where};
use dmtnet::analysis::{closed_form, complexity, count_params};
use dmtnet::data::{augment_flip, extract_patches, synthetic_sample, Flip, PatchSpec};
use dmtnet::gradcheck::{grad_check, GradCheckOptions};
use dmtnet::metrics::{mae, psnr, ssim};
use dmtnet::model::*;
use dmtnet::persist::{from_bytes, load_checkpoint, load_weights, save_checkpoint, save_weights, to_bytes, Checkpoint};
use dmtnet::tensor::{ops, window};
use dmtnet::train::{toy_problem, train_loop, TrainCallbacks, TrainState};
use dmtnet::{Ctx, Dmtnet, Graph, ModelConfig, ParamStore, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn jittered(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut s = Dmtnet::<f64>::new(cfg.clone(), seed).unwrap().params;
    jitter(&mut s, 0.3, seed + 1);
    s
}

fn single_core<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn gradient_certification() -> Outcome {
    let start = Instant::now();
    let report = single_core(|| grad_check(&ModelConfig::micro(), 7, &GradCheckOptions::default())).unwrap();
    let elapsed = start.elapsed();
    ensure!(report.pass, "worst `{}` at {:.3e}", report.worst, report.worst_rel_err);
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    for family in [
        "patch_embed.proj", "patch_embed.norm", "attn.q", "attn.k", "attn.v", "attn.proj", "mlp.fc1", "mlp.fc2",
        "norm1", "norm2", "select", "rgm.rbm.0.rm.0.conv1", "rm.0.conv2", "act.slope", "fusion", "head.conv",
    ] {
        ensure!(
            report.params.iter().any(|p| p.name.contains(family) && p.max_abs_analytic > 0.0),
            "family {family} not exercised"
        );
    }
    Ok(format!(
        "{} coordinates, worst {:.2e} < 1e-4 in {:.1}s",
        report.coordinates_checked,
        report.worst_rel_err,
        elapsed.as_secs_f64()
    ))
}

fn dense_attention(store: &ParamStore<f64>, cfg: &ModelConfig, x: &Tensor<f64>) -> Tensor<f64> {
    let [_, c, h, w] = x.dims4().unwrap();
    let l = h * w;
    let p = |n: &str| store.value(&format!("blocks.0.{n}")).unwrap();
    let ln = ops::layer_norm(&ops::to_tokens(x).unwrap(), p("norm1.gamma"), p("norm1.beta"), LN_EPS).unwrap();
    let q = ops::linear(&ln, p("attn.q.weight"), Some(p("attn.q.bias"))).unwrap();
    let k = ops::linear(&ln, p("attn.k.weight"), None).unwrap();
    let v = ops::linear(&ln, p("attn.v.weight"), Some(p("attn.v.bias"))).unwrap();
    let d = c / cfg.num_heads;
    let mut cat = vec![0.0; l * c];
    for hd in 0..cfg.num_heads {
        for i in 0..l {
            let s: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|e| q.data()[i * c + hd * d + e] * k.data()[j * c + hd * d + e]).sum::<f64>())
                .map(|v| v / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            for e in 0..d {
                cat[i * c + hd * d + e] = (0..l).map(|j| ex[j] / z * v.data()[j * c + hd * d + e]).sum();
            }
        }
    }
    let cat = Tensor::from_vec([1, l, c], cat).unwrap();
    let proj = ops::linear(&cat, p("attn.proj.weight"), Some(p("attn.proj.bias"))).unwrap();
    x.add(&ops::from_tokens(&proj, h, w).unwrap()).unwrap()
}

fn window_locality() -> Outcome {
    let mut cfg = ModelConfig::micro();
    cfg.window_size = 4;
    let store = jittered(&cfg, 30);
    let (h, w, c) = (8, 12, cfg.embed_dim);
    let x = rand_tensor::<f64>(&[1, c, h, w], -1.0, 1.0, 31);
    let g = Graph::inference();
    let ctx = Ctx::new(&g, &store);
    let base = attention_residual(&ctx, &cfg, "blocks.0", &g.constant(x.clone())).unwrap().into_tensor();
    for r in 0..h {
        for col in 0..w {
            let mut xp = x.clone();
            for ch in 0..c {
                xp.data_mut()[(ch * h + r) * w + col] += 0.25 * (ch as f64 - 3.5);
            }
            let out = attention_residual(&ctx, &cfg, "blocks.0", &g.constant(xp)).unwrap().into_tensor();
            let mut inside = 0;
            for rr in 0..h {
                for cc in 0..w {
                    let same = rr / 4 == r / 4 && cc / 4 == col / 4;
                    for ch in 0..c {
                        let differs = out.at4(0, ch, rr, cc) != base.at4(0, ch, rr, cc);
                        ensure!(same || !differs, "token ({r},{col}) leaked into ({rr},{cc})");
                        inside += (same && differs) as usize;
                    }
                }
            }
            ensure!(inside > c, "token ({r},{col}) did not reach its window");
        }
    }

    let x = rand_tensor::<f64>(&[1, c, 4, 4], -1.0, 1.0, 41);
    let expect = dense_attention(&store, &cfg, &x);
    let s32 = store.cast::<f32>();
    let g32 = Graph::inference();
    let out = attention_residual(&Ctx::new(&g32, &s32), &cfg, "blocks.0", &g32.constant(x.cast())).unwrap();
    let err = common::max_diff(&out.value().cast::<f64>(), &expect);
    ensure!(err < 1e-5, "f32 dense mismatch {err:e}");
    Ok(format!("{} tokens local bit-exactly; dense f32 error {err:.1e}", h * w))
}

fn complexity_formulas() -> Outcome {
    let r = complexity(64, 64, 96, 8).map_err(|e| e.to_string())?;
    ensure!(r.omega_wmsa == 201_326_592, "WMSA {}", r.omega_wmsa);
    ensure!(r.omega_msa == 3_372_220_416, "MSA {}", r.omega_msa);
    ensure!((r.approx_ratio - 4096.0 / 192.0).abs() < 1e-12, "approx {}", r.approx_ratio);
    Ok(format!("{} / {}, ratio {:.2}, approx {:.2}", r.omega_wmsa, r.omega_msa, r.ratio, r.approx_ratio))
}

fn parameter_accounting() -> Outcome {
    let mut deltas = Vec::new();
    for k in 0..4 {
        let a = count_params(&ModelConfig::full(k)).unwrap().total;
        let b = count_params(&ModelConfig::full(k + 1)).unwrap().total;
        let d = (b - a) as f64;
        ensure!((d / 11.89e6 - 1.0).abs() <= 0.15, "increment {d} outside 11.89M +-15%");
        deltas.push(d);
    }
    let cfg = ModelConfig::full(1);
    ensure!(closed_form::rgm(&cfg) == (3_692_800, 3_200), "closed form {:?}", closed_form::rgm(&cfg));
    let store = Dmtnet::<f32>::new(cfg, 0).unwrap().params;
    let (mut convs, mut slopes) = (0, 0);
    for e in store.iter().filter(|e| e.name.starts_with("dmssrm.0.branch.0.rgm.")) {
        if e.name.ends_with(".slope") {
            slopes += e.value.len();
        } else {
            convs += e.value.len();
        }
    }
    ensure!((convs, slopes) == (3_692_800, 3_200), "live RGM {convs} + {slopes}");
    Ok(format!("increment {:.3}M per module; RGM 3,692,800 + 3,200 slopes", deltas[0] / 1e6))
}

fn residual_identities() -> Outcome {
    let cfg = ModelConfig::micro();
    let g = Graph::inference();
    let fresh = Dmtnet::<f64>::new(cfg.clone(), 1).unwrap().params;
    let x = rand_tensor::<f64>(&[2, 8, 8, 8], -2.0, 2.0, 1);
    let xv = g.constant(x.clone());
    let ctx = Ctx::new(&g, &fresh);
    ensure!(transformer_block(&ctx, &cfg, "blocks.0", &xv).unwrap().value() == &x, "transformer block");
    ensure!(dmssrm_forward(&ctx, &cfg, "dmssrm.0", &xv, None).unwrap().value() == &x, "DMSSRM");

    let mut store = jittered(&cfg, 2);
    zero_where(&mut store, |n| n.contains(".conv2."));
    let ctx = Ctx::new(&g, &store);
    let rgm = "dmssrm.0.branch.0.rgm";
    ensure!(residual_module(&ctx, &format!("{rgm}.rbm.0.rm.0"), &xv).unwrap().value() == &x, "RM");
    let twice = x.scale(2.0);
    ensure!(rbm_forward(&ctx, &cfg, &format!("{rgm}.rbm.0"), &xv).unwrap().value() == &twice, "RBM");
    ensure!(rgm_forward(&ctx, &cfg, rgm, &xv).unwrap().value() == &x.scale(3.0), "RGM");

    let mut none = cfg.clone();
    none.num_dmssrm = 0;
    let s0 = Dmtnet::<f64>::new(none.clone(), 0).unwrap().params;
    ensure!(reconstruction(&Ctx::new(&g, &s0), &none, &xv, None).unwrap().value() == &x, "cascade with no modules");
    let mut two = cfg.clone();
    two.num_dmssrm = 2;
    let s2 = Dmtnet::<f64>::new(two.clone(), 0).unwrap().params;
    ensure!(reconstruction(&Ctx::new(&g, &s2), &two, &xv, None).unwrap().value() == &twice, "fresh cascade");
    let s2 = jittered(&two, 3);
    let ctx = Ctx::new(&g, &s2);
    let d0 = dmssrm_forward(&ctx, &two, "dmssrm.0", &xv, None).unwrap();
    let d1 = dmssrm_forward(&ctx, &two, "dmssrm.1", &d0, None).unwrap();
    let full = reconstruction(&ctx, &two, &xv, None).unwrap();
    ensure!(full.value() == &d1.value().add(&x).unwrap(), "cascade composition");
    Ok("block, RM, RBM, RGM, DMSSRM exact; cascade N=0 and N=2 exact".into())
}

fn selection_invariants() -> Outcome {
    let mut cfg = ModelConfig::micro();
    cfg.num_scales = 3;
    let g = Graph::inference();
    let f = g.constant(rand_tensor::<f64>(&[4, 8, 6, 6], -1.0, 1.0, 5));
    let mut store = jittered(&cfg, 6);
    store.value_mut("dmssrm.0.select.bias").unwrap().data_mut().copy_from_slice(&[0.0, -15.0, 3.0]);
    let alpha = adaptive_scale_select(&Ctx::new(&g, &store), "dmssrm.0", &f).unwrap().into_tensor();
    let mut min_alpha = 1.0f64;
    for row in alpha.data().chunks(3) {
        ensure!(row.iter().all(|&a| a > 0.0), "non-positive weight in {row:?}");
        ensure!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6, "sum {}", row.iter().sum::<f64>());
        min_alpha = row.iter().cloned().fold(min_alpha, f64::min);
    }
    zero_where(&mut store, |n| n.contains(".select."));
    let uniform = adaptive_scale_select(&Ctx::new(&g, &store), "dmssrm.0", &f).unwrap().into_tensor();
    ensure!(uniform.data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15), "zero conv not uniform");

    let base = ModelConfig::preset("dmtnet-b").unwrap();
    for (stem, dynamic) in [(true, false), (false, true)] {
        let mut c = base.clone();
        c.use_transformer_stem = stem;
        c.use_dynamic_selection = dynamic;
        let mut model = Dmtnet::<f32>::new(c, 2).unwrap();
        jitter(&mut model.params, 0.05, 3);
        let (out, trace) = model.infer_traced(&rand_image(16, 24, 1), &rand_image(16, 24, 2)).unwrap();
        ensure!(out.shape() == [1, 3, 16, 24], "ablation shape {:?}", out.shape());
        if !dynamic {
            for m in &trace.modules {
                ensure!(m.alpha.data().iter().all(|&a| a == 1.0 / 3.0), "dynamic-off weights {:?}", m.alpha.data());
            }
        }
    }
    Ok(format!("min weight {min_alpha:.1e} > 0; zero conv uniform; both ablations run"))
}

fn metric_oracles() -> Outcome {
    let x = rand_tensor::<f64>(&[1, 3, 24, 20], 0.1, 0.9, 1);
    let y = rand_tensor::<f64>(&[1, 3, 24, 20], 0.0, 1.0, 2);
    let self_ssim = ssim(&x, &x).unwrap();
    ensure!((self_ssim - 1.0).abs() < 1e-9, "ssim(x,x) = {self_ssim}");
    let p = psnr(&x.map(|v| v + 0.1), &x, 1.0).unwrap();
    ensure!((p - 20.0).abs() < 1e-9, "psnr at mse 0.01 = {p}");
    let oracle = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
    ensure!((mae(&x, &y).unwrap() - oracle).abs() < 1e-12, "mae");
    for f in Flip::ALL {
        let (fx, fy) = (f.apply(&x).unwrap(), f.apply(&y).unwrap());
        ensure!((psnr(&fx, &fy, 1.0).unwrap() - psnr(&x, &y, 1.0).unwrap()).abs() < 1e-9, "psnr under {f:?}");
        ensure!((ssim(&fx, &fy).unwrap() - ssim(&x, &y).unwrap()).abs() < 1e-9, "ssim under {f:?}");
        ensure!((mae(&fx, &fy).unwrap() - oracle).abs() < 1e-12, "mae under {f:?}");
    }
    Ok(format!("ssim(x,x)-1 = {:.1e}; psnr {p:.6} dB", self_ssim - 1.0))
}

fn data_protocol() -> Outcome {
    let spec = PatchSpec::new(512, 0.6).unwrap();
    let origins = extract_patches(1120, 1680, &spec).unwrap();
    let axis = |dim: usize| {
        let mut v: Vec<usize> = (0..).map(|k| k * 204).take_while(|o| o + 512 <= dim).collect();
        if v.last().unwrap() + 512 != dim {
            v.push(dim - 512);
        }
        v
    };
    let oracle: Vec<(usize, usize)> = axis(1120).into_iter().flat_map(|r| axis(1680).into_iter().map(move |c| (r, c))).collect();
    ensure!(origins == oracle, "origins differ from enumerate-and-clamp");
    ensure!(origins.len() == 28, "{} origins", origins.len());
    let mut seen = vec![false; 1120 * 1680];
    for &(r, c) in &origins {
        for rr in r..r + 512 {
            seen[rr * 1680 + c..rr * 1680 + c + 512].iter_mut().for_each(|s| *s = true);
        }
    }
    ensure!(seen.iter().all(|&s| s), "uncovered pixels");
    let s = synthetic_sample::<f32>("s", 9, 14, 2, 1, 4).unwrap();
    for f in Flip::ALL {
        ensure!(augment_flip(&augment_flip(&s, f).unwrap(), f).unwrap() == s, "{f:?} is not an involution");
    }
    Ok("28 origins, full coverage; flips are involutions".into())
}

fn toy_training() -> Outcome {
    let run = || {
        single_core(|| {
            let (model, cfg, sample) = toy_problem::<f32>(1).unwrap();
            let start = Instant::now();
            let mut state = TrainState::<f32>::new(&model, cfg.seed).unwrap();
            let log = train_loop(&model, &cfg, std::slice::from_ref(&sample), &mut state, &mut ()).unwrap();
            let elapsed = start.elapsed();
            let net = Dmtnet::from_parts(model, state.params.clone()).unwrap();
            let out = net.infer(&sample.right, &sample.left).unwrap();
            (psnr(&out, &sample.target, 1.0).unwrap(), log, state, elapsed)
        })
    };
    let (p, log_a, state_a, elapsed) = run();
    let (_, log_b, state_b, _) = run();
    ensure!(log_a.len() == 2000, "{} steps", log_a.len());
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    ensure!(log_a == log_b && state_a == state_b, "seeded runs differ");
    ensure!(p >= 40.0, "PSNR {p:.2} dB after 2000 steps");
    Ok(format!(
        "PSNR {p:.2} dB, loss {:.4} -> {:.4}, {:.0}s per run, runs bit-identical",
        log_a[0].loss,
        log_a[1999].loss,
        elapsed.as_secs_f64()
    ))
}

struct Snapshot(Option<TrainState<f64>>, usize);

impl TrainCallbacks<f64> for Snapshot {
    fn on_checkpoint(&mut self, state: &TrainState<f64>) -> dmtnet::Result<()> {
        if state.step() == self.1 {
            self.0 = Some(state.clone());
        }
        Ok(())
    }
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = Dmtnet::<f32>::new(ModelConfig::micro(), 3).unwrap();
    let mut params = model.params.clone();
    jitter(&mut params, 0.4, 4);
    let path = dir.path().join("w.dmtw");
    save_weights(&params, &model.config, &path).unwrap();
    let (loaded, cfg) = load_weights::<f32>(&path).unwrap();
    ensure!(cfg == model.config, "config changed");
    for (a, b) in loaded.iter().zip(params.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(a.name == b.name && bits(&a.value) == bits(&b.value), "tensor `{}` changed", b.name);
    }
    let empty = Checkpoint::<f32> { config: ModelConfig::micro(), params: ParamStore::new(), optimizer: None };
    ensure!(from_bytes::<f32>(&to_bytes(&empty).unwrap()).unwrap() == empty, "empty store");

    let x = rand_tensor::<f32>(&[2, 8 * 9, 3, 5], -1.0, 1.0, 5);
    ensure!(ops::pixel_unshuffle(&ops::pixel_shuffle(&x, 3).unwrap(), 3).unwrap() == x, "pixel shuffle");
    let m = rand_tensor::<f32>(&[1, 4, 10, 6], -1.0, 1.0, 6);
    let grid = window::window_partition(&m, 4).unwrap();
    ensure!(window::window_reverse(&grid, 10, 6).unwrap() == m, "window partition");

    let (net, mut cfg, _) = toy_problem::<f64>(2).unwrap();
    cfg.total_steps = 12;
    cfg.crop = Some(16);
    cfg.augment = true;
    cfg.checkpoint_every = Some(5);
    let data = vec![synthetic_sample::<f64>("a", 24, 24, 1, 1, 1).unwrap(), synthetic_sample("b", 20, 28, 2, 2, 2).unwrap()];
    let mut full = TrainState::<f64>::new(&net, 2).unwrap();
    let mut snap = Snapshot(None, 5);
    let curve = train_loop(&net, &cfg, &data, &mut full, &mut snap).unwrap();
    let mid = snap.0.unwrap();
    let ckpt_path = dir.path().join("c.dmtw");
    save_checkpoint(&Checkpoint { config: net.clone(), params: mid.params, optimizer: Some(mid.optim) }, &ckpt_path)
        .unwrap();
    let ckpt = load_checkpoint::<f64>(&ckpt_path).unwrap();
    let mut resumed = TrainState { params: ckpt.params, optim: ckpt.optimizer.unwrap() };
    let tail = train_loop(&net, &cfg, &data, &mut resumed, &mut ()).unwrap();
    ensure!(tail == curve[5..], "resumed loss curve differs");
    ensure!(resumed.optim == full.optim, "resumed optimizer differs");
    Ok(format!("weights, shuffle, windows bit-exact; resumed {} steps bit-exactly", tail.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient certification", gradient_certification),
        ("window locality", window_locality),
        ("complexity formulas", complexity_formulas),
        ("parameter accounting", parameter_accounting),
        ("residual identities", residual_identities),
        ("selection invariants", selection_invariants),
        ("metric oracles", metric_oracles),
        ("data protocol", data_protocol),
        ("toy training", toy_training),
        ("round trips", round_trips),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
