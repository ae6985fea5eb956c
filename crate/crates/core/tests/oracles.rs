//! Independent reference implementations checked against the library.

use cgd_core::cgen::KernelStack;
use cgd_core::config::{ModelConfig, TrainConfig};
use cgd_core::dataset::{Dataset, DatasetSpec};
use cgd_core::imaging::{conv_same, pixel_unshuffle, psnr, ImagePatch};
use cgd_core::mkcr::{denoise_subtract, refine};
use cgd_core::model::Denoiser;
use cgd_core::nn::{InitMode, ParamStore};
use cgd_core::nrtc::{Conditioner, Nrtc};
use cgd_core::train::{bench_throughput, sample_batch, Trainer};
use cgd_core::{cgen::NoiseMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Zero-padded cross-correlation with bias, `pad = k/2`.
fn conv_zero_pad(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let (ho, wo) = ((h + 2 * (k / 2) - k) / stride + 1, (wd + 2 * (k / 2) - k) / stride + 1);
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for xx in 0..wo {
                let mut s = b.data()[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad;
                            let ix = (xx * stride + kx) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.data()[((o * ci + c) * k + ky) * k + kx] * x.at3(c, iy as usize, ix as usize);
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = s;
            }
        }
    }
    Tensor::new(&[co, ho, wo], out).unwrap()
}

/// Depthwise cross-correlation with replicate padding.
fn conv_replicate(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = k.shape()[1];
    let r = (s / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    Tensor::from_fn(&[c, h, w], |i| {
        let (ci, y, xx) = (i / (h * w), (i / w) % h, i % w);
        let mut acc = 0.0;
        for ky in 0..s {
            for kx in 0..s {
                let iy = clampi(y as isize + ky as isize - r, h);
                let ix = clampi(xx as isize + kx as isize - r, w);
                acc += k.data()[(ci * s + ky) * s + kx] * x.at3(ci, iy, ix);
            }
        }
        acc
    })
}

fn gelu(v: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (s * (v + 0.044715 * v * v * v)).tanh())
}

fn param(p: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    p.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).clone()
}

fn nrtc_of(m: &Denoiser<f64>) -> Nrtc {
    match m.conditioner() {
        Conditioner::Nrtc(n) => n.clone(),
        Conditioner::Plain(_) => panic!("expected the Transformer conditionalizer"),
    }
}

fn pixel_shuffle2(x: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = c / 4;
    Tensor::from_fn(&[co, 2 * h, 2 * w], |i| {
        let (o, y, xx) = (i / (4 * h * w), (i / (2 * w)) % (2 * h), i % (2 * w));
        x.at3(o * 4 + (y % 2) * 2 + xx % 2, y / 2, xx / 2)
    })
}

#[test]
fn conv_same_matches_loop_oracle() {
    for seed in 0..20 {
        let x = rand_t(&[3, 5, 5], 0.0, 1.0, seed);
        let s = [1, 3, 5][seed as usize % 3];
        let k = rand_t(&[3, s, s], -1.0, 1.0, 100 + seed);
        let got = conv_same(&x, &k).unwrap();
        assert!(got.max_abs_diff(&conv_replicate(&x, &k)) <= 1e-10);
    }
}

#[test]
fn refine_and_subtract_match_loop_oracles() {
    let d = rand_t(&[3, 6, 6], 0.0, 1.0, 1);
    let kernels = rand_t(&[4, 3, 3, 3], -0.1, 0.3, 2);
    let mut w = rand_t(&[4], 0.1, 1.0, 3);
    let total: f64 = w.data().iter().sum();
    w.data_mut().iter_mut().for_each(|v| *v /= total);
    let mut want = Tensor::<f64>::zeros(&[3, 6, 6]);
    for i in 0..4 {
        let ki = Tensor::new(&[3, 3, 3], kernels.data()[i * 27..(i + 1) * 27].to_vec()).unwrap();
        let ci = conv_replicate(&d, &ki);
        for (a, b) in want.data_mut().iter_mut().zip(ci.data()) {
            *a += w.data()[i] * b;
        }
    }
    let want = want.map(|v| v.clamp(0.0, 1.0));
    let ks = KernelStack::new(kernels.cast::<f32>(), w.cast::<f32>()).unwrap();
    let got = refine(&ImagePatch::new(d.cast()).unwrap(), &ks).unwrap();
    assert!(got.tensor().cast::<f64>().max_abs_diff(&want) <= 1e-6);

    let noisy = rand_t(&[3, 6, 6], 0.0, 1.0, 4).cast::<f32>();
    let noise = rand_t(&[3, 6, 6], -0.5, 0.5, 5).cast::<f32>();
    let got = denoise_subtract(&ImagePatch::new(noisy.clone()).unwrap(), &NoiseMap(noise.clone())).unwrap();
    for ((g, n), x) in got.data().iter().zip(noisy.data()).zip(noise.data()) {
        assert_eq!(*g, (n - x).clamp(0.0, 1.0));
    }
}

#[test]
fn psnr_matches_mse_loop() {
    let a = rand_t(&[3, 9, 7], 0.0, 1.0, 8).cast::<f32>();
    let b = rand_t(&[3, 9, 7], 0.0, 1.0, 9).cast::<f32>();
    let mut se = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        se += (*x as f64 - *y as f64).powi(2);
    }
    let want = 10.0 * (1.0 / (se / a.len() as f64)).log10();
    let got = psnr(&ImagePatch::new(a).unwrap(), &ImagePatch::new(b).unwrap(), 1.0).unwrap();
    assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
}

#[test]
fn nrtc_stages_match_direct_convolution() {
    let m = Denoiser::<f64>::new(ModelConfig::default(), InitMode::Random, 21).unwrap();
    let n = nrtc_of(&m);
    let p = m.params();
    let x = rand_t(&[3, 12, 12], 0.0, 1.0, 1);
    let want = conv_zero_pad(&x, &param(p, "nrtc.expand.weight"), &param(p, "nrtc.expand.bias"), 1);
    assert!(n.expand_tensor(p, &x).unwrap().max_abs_diff(&want) <= 1e-6);

    let c = rand_t(&[16, 12, 12], -1.0, 1.0, 2);
    let want = conv_zero_pad(&c, &param(p, "nrtc.down0.weight"), &param(p, "nrtc.down0.bias"), 2);
    let got = n.downsample_tensor(p, 0, &c).unwrap();
    assert_eq!(got.shape(), &[32, 6, 6]);
    assert!(got.max_abs_diff(&want) <= 1e-6);
}

#[test]
fn nrtc_forward_equals_step_by_step_composition() {
    let m = Denoiser::<f64>::new(ModelConfig::default(), InitMode::Random, 22).unwrap();
    let n = nrtc_of(&m);
    let p = m.params();
    let x = rand_t(&[3, 16, 16], 0.0, 1.0, 3);
    let proj = |t: &Tensor<f64>, name: &str| {
        conv_zero_pad(t, &param(p, &format!("nrtc.{name}.weight")), &param(p, &format!("nrtc.{name}.bias")), 1)
    };
    let add = |a: &Tensor<f64>, b: &Tensor<f64>| a.zip_map(b, |u, v| u + v).unwrap();

    let c0 = n.expand_tensor(p, &x).unwrap();
    let mut h = c0.clone();
    for level in 0..2 {
        let e = add(&n.extract_tensor(p, level, &h).unwrap(), &h);
        let d = n.downsample_tensor(p, level, &e).unwrap();
        let s = proj(&pixel_unshuffle(&h, 2).unwrap(), &format!("skip{level}"));
        h = add(&d, &s);
    }
    let want = add(&h, &proj(&pixel_unshuffle(&c0, 4).unwrap(), "skip4"));
    let got = n.forward_tensor(p, &x).unwrap();
    assert_eq!(got.tensor().shape(), &[64, 4, 4]);
    assert!(got.tensor().max_abs_diff(&want) <= 1e-6);
    assert!(got.tensor().all_finite());
}

#[test]
fn anchored_nrtc_reduces_to_skeleton() {
    let m = Denoiser::<f64>::new(ModelConfig::default(), InitMode::IdentityAnchored, 23).unwrap();
    let n = nrtc_of(&m);
    let p = m.params();
    let x = rand_t(&[3, 16, 16], 0.0, 1.0, 4);
    let proj = |t: &Tensor<f64>, name: &str| {
        conv_zero_pad(t, &param(p, &format!("nrtc.{name}.weight")), &param(p, &format!("nrtc.{name}.bias")), 1)
    };
    let add = |a: &Tensor<f64>, b: &Tensor<f64>| a.zip_map(b, |u, v| u + v).unwrap();
    let double = |t: &Tensor<f64>| t.map(|v| 2.0 * v);
    // extractors are the identity, so each level sees `2·h`
    let c0 = proj(&x, "expand");
    let mut h = c0.clone();
    for level in 0..2 {
        let d = conv_zero_pad(
            &double(&h),
            &param(p, &format!("nrtc.down{level}.weight")),
            &param(p, &format!("nrtc.down{level}.bias")),
            2,
        );
        h = add(&d, &proj(&pixel_unshuffle(&h, 2).unwrap(), &format!("skip{level}")));
    }
    let want = add(&h, &proj(&pixel_unshuffle(&c0, 4).unwrap(), "skip4"));
    assert!(n.forward_tensor(p, &x).unwrap().tensor().max_abs_diff(&want) <= 1e-6);
}

#[test]
fn decoder_matches_composition_oracle() {
    let cfg = ModelConfig::default();
    let m = Denoiser::<f64>::new(cfg.clone(), InitMode::Random, 24).unwrap();
    let p = m.params();
    let cond = m.condition(&rand_t(&[3, 16, 16], 0.0, 1.0, 5)).unwrap();
    let z = rand_t(&[cfg.c_z, 4, 4], -1.0, 1.0, 6);
    let conv = |t: &Tensor<f64>, name: &str| {
        conv_zero_pad(t, &param(p, &format!("cgen.decoder.{name}.weight")), &param(p, &format!("cgen.decoder.{name}.bias")), 1)
    };
    let h = Tensor::concat(&[&z, cond.tensor()]).unwrap();
    let h = pixel_shuffle2(&conv(&h, "conv0").map(gelu));
    let h = pixel_shuffle2(&conv(&h, "conv1").map(gelu));
    let want = conv(&h, "out");
    let got = m.generator().noise_map(p, &z, &cond).unwrap();
    assert_eq!(got.tensor().shape(), &[3, 16, 16]);
    assert!(got.tensor().max_abs_diff(&want) <= 1e-6);
}

#[test]
fn kernel_learner_matches_pooled_mlp_oracle() {
    let cfg = ModelConfig::default();
    let m = Denoiser::<f64>::new(cfg.clone(), InitMode::Random, 25).unwrap();
    let p = m.params();
    let cond = m.condition(&rand_t(&[3, 16, 16], 0.0, 1.0, 7)).unwrap();
    let z = rand_t(&[cfg.d_k], -1.0, 1.0, 8);
    let (c, hw) = (cond.tensor().shape()[0], cond.tensor().shape()[1] * cond.tensor().shape()[2]);
    let mut input: Vec<f64> = (0..c).map(|i| cond.tensor().data()[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    input.extend_from_slice(z.data());
    let dense = |x: &[f64], name: &str| -> Vec<f64> {
        let w = param(p, &format!("cgen.kernel.{name}.weight"));
        let b = param(p, &format!("cgen.kernel.{name}.bias"));
        (0..b.len())
            .map(|o| b.data()[o] + (0..x.len()).map(|i| w.data()[o * x.len() + i] * x[i]).sum::<f64>())
            .collect()
    };
    let hidden: Vec<f64> = dense(&input, "fc0").into_iter().map(gelu).collect();
    let out = dense(&hidden, "fc1");
    let (nk, s) = (cfg.num_k, cfg.size_k);
    let taps = nk * 3 * s * s;
    let ks = m.generator().kernels(p, &z, &cond).unwrap();
    for (i, &v) in ks.kernels().data().iter().enumerate() {
        let centre = (i % (s * s)) == s * s / 2;
        let want = out[i] + if centre { 1.0 } else { 0.0 };
        assert!((v - want).abs() <= 1e-6);
    }
    let logits = &out[taps..taps + nk];
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z_sum: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    for (i, &w) in ks.weights().data().iter().enumerate() {
        assert!((w - (logits[i] - mx).exp() / z_sum).abs() <= 1e-6);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let m = Denoiser::<f64>::new(ModelConfig::default(), InitMode::Random, 26).unwrap();
    let batch: Vec<_> = (0..2)
        .map(|i| {
            let c = rand_t(&[3, 16, 16], 0.1, 0.9, 30 + i);
            let n = c.zip_map(&rand_t(&[3, 16, 16], -0.1, 0.1, 40 + i), |a, b| a + b).unwrap();
            (c, n)
        })
        .collect();
    let (_, grads) = m.loss_and_grads(&batch, 1, 0.01, true).unwrap();
    for (name, g) in m.params().names().iter().zip(grads.unwrap()) {
        assert!(g.iter().any(|&v| v != 0.0), "{name} has an identically zero gradient");
    }
}

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        total_iters: 8,
        batch_size: 2,
        schedule: vec![(0, 8), (4, 12)],
        kl_warmup: 0.25,
        model: ModelConfig {
            c_base: 4,
            blocks_per_extractor: 1,
            attention_heads: 2,
            c_z: 2,
            d_k: 4,
            num_k: 3,
            dpe_width: 4,
            decoder_width: 4,
            kernel_hidden: 8,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = Dataset::generate(DatasetSpec::standard(6, 16, 3)).unwrap();
    let cfg = tiny_train_cfg();
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let full_trace = straight.run(&data.pairs, 8, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg.clone()).unwrap();
    let mut trace = first.run(&data.pairs, 3, None, None).unwrap();
    let path = dir.path().join("mid.ckpt");
    first.checkpoint().save(&path).unwrap();
    let ck = cgd_core::checkpoint::Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::resume(cfg, &ck).unwrap();
    assert_eq!(resumed.iter, 3);
    trace.extend(resumed.run(&data.pairs, 8, None, None).unwrap());

    assert_eq!(trace, full_trace);
    assert_eq!(resumed.model.params().tensors(), straight.model.params().tensors());
    assert_eq!(resumed.opt, straight.opt);
}

#[test]
fn batches_are_reproducible_from_seed() {
    let data = Dataset::generate(DatasetSpec::standard(5, 16, 4)).unwrap();
    let cfg = tiny_train_cfg();
    for iter in [0, 3, 7] {
        assert_eq!(sample_batch(&data.pairs, &cfg, iter).unwrap(), sample_batch(&data.pairs, &cfg, iter).unwrap());
    }
}

#[test]
fn dataset_regenerates_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dataset::generate(DatasetSpec::standard(4, 16, 42)).unwrap();
    d.write(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(cgd_core::dataset::MANIFEST)).unwrap();
    assert!(text.lines().any(|l| l.replace(' ', "") == "seed=42"), "{text}");
    let stored = Dataset::read(dir.path()).unwrap();
    let regenerated = Dataset::generate(stored.spec.clone()).unwrap();
    assert_eq!(regenerated.pairs, stored.pairs);
}

#[test]
fn empty_dataset_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dataset::generate(DatasetSpec::standard(0, 16, 1)).unwrap();
    d.write(dir.path()).unwrap();
    assert!(Dataset::read(dir.path()).unwrap().is_empty());
}

#[test]
fn throughput_is_steady() {
    let m = Denoiser::<f32>::new(ModelConfig::default(), InitMode::IdentityAnchored, 0).unwrap();
    // timing on a shared machine is noisy, so the best of three attempts counts
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let a = bench_throughput(&m, 64, 10).unwrap();
        let b = bench_throughput(&m, 64, 20).unwrap();
        assert_eq!((a.patch_size, b.frames), (64, 20));
        best = best.min((b.fps / a.fps - 1.0).abs());
        if best < 0.10 {
            break;
        }
    }
    assert!(best < 0.10, "fps changed by {:.1}%", 100.0 * best);
}
