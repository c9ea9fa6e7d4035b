//! Acceptance suite: one test per criterion, printing one pass/fail line
//! each (run with `cargo test --test acceptance -- --nocapture` to see the
//! lines as they complete). Training-based criteria share one fixture so the
//! expensive optimization runs happen once.

use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};

use eventdiff::diffusion::{
    forward_diffuse, forward_kernel_step, make_schedule, sample_noise, ConditionalUnet,
    DenoiserConfig, ScheduleSpec,
};
use eventdiff::event::{split_events, voxelize, Event, EventStream, SplitPolicy};
use eventdiff::hae::{DecoderHead, DeblurDecoder, Encoder, HAEConfig, HaeModel, VectorQuantizer};
use eventdiff::nn::gradcheck::check_gradients;
use eventdiff::nn::layers::{randn_array, Params};
use eventdiff::nn::Tensor;
use eventdiff::stca::{attention_cost, count_attention_scores, AttentionConfig, Sca, Tca};
use eventdiff::synth::dataset::{
    make_dataset, make_deblur_dataset, DatasetOptions, InteriorMode,
};
use eventdiff::synth::{SceneConfig, ShapeKind, ShapeSpec};
use eventdiff::train::data::{load_deblur_set, load_vfi_set, VfiSet};
use eventdiff::train::infer::deblur as deblur_infer;
use eventdiff::train::metrics::{psnr, ssim};
use eventdiff::train::stage1::mean;
use eventdiff::train::{
    eval_stage1, eval_stage2, eval_stage2_deblur, train_stage1, train_stage1_deblur, train_stage2,
    train_stage2_deblur, Stage2Model, TrainConfig, Variant,
};
use eventdiff::TrainRng;

fn report(criterion: u32, pass: bool, details: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} {status}: {details}");
    assert!(pass, "criterion {criterion} failed: {details}");
}

// ---------------------------------------------------------------------------
// 1. Event invariants
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_event_invariants() {
    let t0 = Instant::now();
    let mut rng = TrainRng::seed_from_u64(11);
    let mut total_events = 0usize;
    for round in 0..1000 {
        let n = if round % 25 == 0 {
            rng.random_range(50_000..=100_000)
        } else {
            rng.random_range(0..2_000)
        };
        total_events += n;
        let (w, h) = (64u16, 48u16);
        let mut ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let events: Vec<Event> = ts
            .iter()
            .map(|&t| Event {
                x: rng.random_range(0..w),
                y: rng.random_range(0..h),
                polarity: if rng.random_range(0..2) == 0 { -1 } else { 1 },
                t,
            })
            .collect();
        let stream = EventStream::new(events, 0.0, 1.0, w, h).unwrap();

        // voxel-sum conservation, exact
        let bins = rng.random_range(1..=16);
        let grid = voxelize(&stream, bins, h as usize, w as usize).unwrap();
        assert_eq!(grid.sum(), n as f64, "round {round}: voxel sum");

        // split partition + polarity negation (t chosen off every timestamp)
        let t_split = 0.5 + 1e-7;
        let (before, after) = split_events(&stream, t_split, SplitPolicy::Drop).unwrap();
        assert_eq!(before.len() + after.len(), n, "round {round}: partition");
        let originals: Vec<&Event> = stream.events().iter().filter(|e| e.t > t_split).collect();
        for (o, s) in originals.iter().zip(after.events()) {
            assert_eq!(s.polarity, -o.polarity, "round {round}: negation");
            assert_eq!((s.x, s.y, s.t), (o.x, o.y, o.t));
        }
        // double negation: re-splitting the second half at its start flips
        // polarities back for interior events
        let (_, again) = split_events(&after, after.t_start, SplitPolicy::Drop).unwrap();
        for (o, s) in originals.iter().zip(again.events()) {
            assert_eq!(s.polarity, o.polarity, "round {round}: double negation");
        }
    }
    let dt = t0.elapsed();
    report(
        1,
        dt.as_secs() < 60,
        &format!("1000 streams ({total_events} events), conservation/partition/negation exact in {dt:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 2. Forward-process equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_forward_process_equivalence() {
    // Per-element sample mean/variance of the iterated one-step kernel vs
    // the closed form, compared within 3 combined standard errors. With
    // 192 elements x 2 moments x 5 steps = 1920 three-sigma checks, a
    // handful of statistical outliers are expected even for a correct
    // implementation (coverage is 99.73% per check), so up to 3 of 384
    // per-t checks may land in (3, 5] SE; anything beyond 5 SE fails hard.
    let t0 = Instant::now();
    let sched = make_schedule(5, 1e-5, 0.1).unwrap();
    let mut rng = TrainRng::seed_from_u64(2);
    let shape = [3usize, 8, 8];
    let z = sample_noise::<f64>(&mut rng, &shape);
    let n = 10_000usize;
    let elems = 192usize;
    let mut worst: f64 = 0.0;
    for t in 1..=5 {
        let mut m_a = vec![0.0f64; elems];
        let mut s_a = vec![0.0f64; elems];
        let mut m_b = vec![0.0f64; elems];
        let mut s_b = vec![0.0f64; elems];
        for _ in 0..n {
            let mut zi = z.clone();
            for step in 1..=t {
                let eps = sample_noise::<f64>(&mut rng, &shape);
                zi = forward_kernel_step(&zi, step, &eps, &sched).unwrap();
            }
            let va = zi.to_array();
            let eps = sample_noise::<f64>(&mut rng, &shape);
            let zc = forward_diffuse(&z, t, &eps, &sched).unwrap();
            let vb = zc.to_array();
            for (i, (&a, &b)) in va.iter().zip(vb.iter()).enumerate() {
                m_a[i] += a;
                s_a[i] += a * a;
                m_b[i] += b;
                s_b[i] += b * b;
            }
        }
        let mut outliers = 0usize;
        for i in 0..elems {
            let (ma, mb) = (m_a[i] / n as f64, m_b[i] / n as f64);
            let va = s_a[i] / n as f64 - ma * ma;
            let vb = s_b[i] / n as f64 - mb * mb;
            // SE of a mean and of a variance estimate under normality
            let se_mean = ((va + vb) / n as f64).sqrt();
            let se_var = ((va * va + vb * vb) * 2.0 / (n as f64 - 1.0)).sqrt();
            let dev_mean = (ma - mb).abs() / se_mean;
            let dev_var = (va - vb).abs() / se_var;
            worst = worst.max(dev_mean).max(dev_var);
            if dev_mean > 3.0 {
                outliers += 1;
            }
            if dev_var > 3.0 {
                outliers += 1;
            }
            assert!(
                dev_mean <= 5.0 && dev_var <= 5.0,
                "t={t} element {i}: mean dev {dev_mean:.2} SE, var dev {dev_var:.2} SE"
            );
        }
        assert!(
            outliers <= 3,
            "t={t}: {outliers} of 384 checks beyond 3 SE (expected <= 3 statistically)"
        );
    }
    let dt = t0.elapsed();
    report(
        2,
        dt.as_secs() < 120,
        &format!("iterated kernel vs closed form agree (worst deviation {worst:.2} SE, 10^4 draws, t=1..5) in {dt:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 3. One-step inversion
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_one_step_inversion() {
    let sched = make_schedule(5, 1e-5, 0.1).unwrap();
    let mut rng = TrainRng::seed_from_u64(3);
    let z = sample_noise::<f64>(&mut rng, &[3, 8, 8]);
    let eps = sample_noise::<f64>(&mut rng, &[3, 8, 8]);
    let z1 = forward_diffuse(&z, 1, &eps, &sched).unwrap();
    let back = eventdiff::diffusion::denoise_step(&z1, 1, &eps, &sched).unwrap();
    let max_abs = back
        .to_array()
        .iter()
        .zip(z.to_array().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    report(
        3,
        max_abs <= 1e-6,
        &format!("forward t=1 then denoise with true noise recovers z_gt (max abs err {max_abs:.2e})"),
    );
}

// ---------------------------------------------------------------------------
// 4. Attention factorization
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_attention_factorization() {
    let mut rng = TrainRng::seed_from_u64(4);
    let cfg = AttentionConfig {
        pool_scale: 2,
        heads: 1,
        window: 0, // full spatial attention: the configuration the cost model counts
        mbconv_expansion: 2,
    };
    let mut checked = Vec::new();
    for _ in 0..10 {
        let bins = rng.random_range(1..=12usize);
        let h = 2 * rng.random_range(1..=6usize);
        let w = 2 * rng.random_range(1..=6usize);
        let ce = 2 * rng.random_range(1..=4usize);
        let ci = 2 * rng.random_range(2..=6usize);
        let tca = Tca::<f32>::new(&mut rng, ce, ci, cfg);
        let sca = Sca::<f32>::new(&mut rng, bins * ce, ci, cfg);
        let evt = Tensor::from_array(randn_array(&mut rng, &[1, bins, ce, h, w], 1.0));
        let img = Tensor::from_array(randn_array(&mut rng, &[1, ci, h, w], 1.0));
        let (_, counted) = count_attention_scores(|| {
            tca.forward(&evt, &img).unwrap();
            sca.forward(&evt, &img).unwrap();
        });
        let (full, fact) = attention_cost(bins, h, w, cfg.pool_scale).unwrap();
        assert_eq!(
            counted as u128, fact,
            "bins {bins} {h}x{w}: counted {counted} vs formula {fact}"
        );
        if bins > 1 && h * w > 1 {
            assert!(fact < full, "dominance violated at bins {bins} {h}x{w}");
        }
        checked.push(format!("T{bins}x{h}x{w}"));
    }
    report(
        4,
        true,
        &format!("instrumented TCA+SCA score counts equal the factorized formula exactly for {}", checked.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// 5. Gradient checks
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_gradient_checks() {
    let t0 = Instant::now();
    let mut rng = TrainRng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut parts: Vec<String> = Vec::new();

    // STCA pair at 4x4
    {
        let cfg = AttentionConfig {
            pool_scale: 2,
            heads: 1,
            window: 2,
            mbconv_expansion: 2,
        };
        let tca = Tca::<f64>::new(&mut rng, 2, 4, cfg);
        let sca = Sca::<f64>::new(&mut rng, 2 * 2, 4, cfg);
        for (_, p) in {
            let mut v = Vec::new();
            tca.collect("t", &mut v);
            sca.collect("s", &mut v);
            v
        } {
            if p.to_array().iter().all(|&x| x == 0.0) {
                p.set_value(randn_array(&mut rng, &p.shape(), 0.3));
            }
        }
        let evt = Tensor::param(randn_array(&mut rng, &[1, 2, 2, 4, 4], 0.5));
        let img = Tensor::param(randn_array(&mut rng, &[1, 4, 4, 4], 0.5));
        let mut params = vec![evt.clone(), img.clone()];
        params.extend(tca.params());
        params.extend(sca.params());
        let f = {
            let (img, evt) = (img.clone(), evt.clone());
            move || {
                let a = tca.forward(&evt, &img).unwrap();
                sca.forward(&a, &img).unwrap().powi(2).mean_all()
            }
        };
        let rep = check_gradients(&params, f, 1e-5, Some(20), 51);
        worst = worst.max(rep.max_rel_err);
        parts.push(format!("stca {:.1e}", rep.max_rel_err));
        assert!(rep.max_rel_err <= 1e-3, "stca gradcheck {}", rep.max_rel_err);
    }

    // quantizer: vq-loss gradients (codebook + commitment terms) plus the
    // straight-through identity (downstream gradients with and without the
    // quantizer coincide when z is exactly a codebook row)
    {
        let cfg = HAEConfig {
            codebook_size: 4,
            ..Default::default()
        };
        let vq = VectorQuantizer::<f64>::new(&cfg, &mut rng);
        let z = Tensor::param(randn_array(&mut rng, &[1, 3, 2, 2], 0.3));
        let mut params = vec![z.clone(), vq.codebook.clone()];
        let f = {
            let z = z.clone();
            move || vq.quantize(&z).unwrap().vq_loss
        };
        let rep = check_gradients(&params, f, 1e-6, None, 52);
        worst = worst.max(rep.max_rel_err);
        parts.push(format!("vq-loss {:.1e}", rep.max_rel_err));
        assert!(rep.max_rel_err <= 1e-3, "vq gradcheck {}", rep.max_rel_err);

        // straight-through identity
        let vq2 = VectorQuantizer::<f64>::new(&cfg, &mut rng);
        let row: Vec<f64> = vq2.codebook.to_array().as_slice().unwrap()[..3].to_vec();
        let mut zv = vec![0.0; 3 * 4];
        for pos in 0..4 {
            for ch in 0..3 {
                zv[ch * 4 + pos] = row[ch];
            }
        }
        let mk = || {
            Tensor::<f64>::param(
                ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 3, 2, 2]), zv.clone())
                    .unwrap(),
            )
        };
        let (za, zb) = (mk(), mk());
        let wgt = Tensor::from_array(randn_array(&mut rng, &[1, 3, 2, 2], 1.0));
        vq2.quantize(&za).unwrap().z_q.mul(&wgt).sum_all().backward();
        zb.mul(&wgt).sum_all().backward();
        params.clear();
        assert_eq!(za.grad().unwrap(), zb.grad().unwrap(), "straight-through identity");
        parts.push("straight-through exact".to_string());
    }

    // downsample block (via a 2-level encoder at 4x4) and the embedding head
    {
        let cfg = HAEConfig {
            n_down: 2,
            base_channels: 4,
            event_base_channels: 2,
            channel_mult: vec![1, 2],
            bins: 2,
            res_blocks: 1,
            attention: AttentionConfig {
                pool_scale: 2,
                heads: 1,
                window: 2,
                mbconv_expansion: 2,
            },
            ..Default::default()
        };
        let enc = Encoder::<f64>::new(&cfg, &mut rng);
        for (_, p) in {
            let mut v = Vec::new();
            enc.collect("e", &mut v);
            v
        } {
            if p.to_array().iter().all(|&x| x == 0.0) {
                p.set_value(randn_array(&mut rng, &p.shape(), 0.3));
            }
        }
        let img = Tensor::param(randn_array(&mut rng, &[1, 1, 4, 4], 0.5));
        let vox = Tensor::from_array(randn_array(&mut rng, &[1, 2, 2, 4, 4], 0.5));
        let mut params = vec![img.clone()];
        params.extend(enc.params());
        let f = {
            let (img, vox) = (img.clone(), vox.clone());
            move || {
                let out = enc.forward(&img, &vox).unwrap();
                out.embedding
                    .powi(2)
                    .mean_all()
                    .add(&out.pyramid[1].img.abs().mean_all())
            }
        };
        let rep = check_gradients(&params, f, 1e-5, Some(12), 53);
        worst = worst.max(rep.max_rel_err);
        parts.push(format!("downsample {:.1e}", rep.max_rel_err));
        assert!(rep.max_rel_err <= 1e-3, "encoder gradcheck {}", rep.max_rel_err);
    }

    // denoising U-Net at (3,4,4)
    {
        let cfg = DenoiserConfig {
            base_channels: 4,
            channel_mult: vec![1, 2],
            time_embed_dim: 4,
            res_blocks: 1,
            n_conditions: 2,
        };
        let unet = ConditionalUnet::<f64>::new(&cfg, &mut rng).unwrap();
        unet.out_conv
            .weight
            .set_value(randn_array(&mut rng, &unet.out_conv.weight.shape(), 0.3));
        let z = Tensor::param(randn_array(&mut rng, &[1, 3, 4, 4], 0.5));
        let c0 = Tensor::from_array(randn_array(&mut rng, &[1, 3, 4, 4], 0.5));
        let c1 = Tensor::from_array(randn_array(&mut rng, &[1, 3, 4, 4], 0.5));
        let mut params = vec![z.clone()];
        params.extend(unet.params());
        let f = {
            let z = z.clone();
            move || {
                unet.forward(&z, 2, &[c0.clone(), c1.clone()])
                    .unwrap()
                    .powi(2)
                    .mean_all()
            }
        };
        let rep = check_gradients(&params, f, 1e-5, Some(12), 54);
        worst = worst.max(rep.max_rel_err);
        parts.push(format!("unet {:.1e}", rep.max_rel_err));
        assert!(rep.max_rel_err <= 1e-3, "unet gradcheck {}", rep.max_rel_err);
    }

    // deblurring head at 4x4
    {
        let cfg = HAEConfig {
            n_down: 2,
            base_channels: 4,
            event_base_channels: 2,
            channel_mult: vec![1, 2],
            bins: 3,
            res_blocks: 1,
            decoder_head: DecoderHead::SimpleUnet,
            attention: AttentionConfig {
                pool_scale: 2,
                heads: 1,
                window: 2,
                mbconv_expansion: 2,
            },
            ..Default::default()
        };
        let enc = Encoder::<f64>::new(&cfg, &mut rng);
        let dec = DeblurDecoder::<f64>::new(&cfg, &mut rng);
        for (_, p) in {
            let mut v = Vec::new();
            dec.collect("d", &mut v);
            v
        } {
            if p.to_array().iter().all(|&x| x == 0.0) {
                p.set_value(randn_array(&mut rng, &p.shape(), 0.3));
            }
        }
        let blur = Tensor::from_array(
            randn_array::<f64>(&mut rng, &[1, 1, 4, 4], 0.2).mapv(|v: f64| v.clamp(0.2, 0.8)),
        );
        let vox = Tensor::from_array(randn_array(&mut rng, &[1, 3, 2, 4, 4], 0.5));
        let pyr = eventdiff::nn::no_grad(|| enc.forward(&blur, &vox).unwrap());
        let z = Tensor::param(randn_array(&mut rng, &[1, 3, 1, 1], 0.4));
        let mut params = vec![z.clone()];
        params.extend(dec.params());
        let f = {
            let (z, blur) = (z.clone(), blur.clone());
            move || {
                dec.forward(&z, &pyr.pyramid, &blur)
                    .unwrap()
                    .powi(2)
                    .mean_all()
            }
        };
        let rep = check_gradients(&params, f, 1e-5, Some(12), 55);
        worst = worst.max(rep.max_rel_err);
        parts.push(format!("deblur-head {:.1e}", rep.max_rel_err));
        assert!(rep.max_rel_err <= 1e-3, "deblur gradcheck {}", rep.max_rel_err);
    }

    report(
        5,
        worst <= 1e-3,
        &format!(
            "central finite differences at f64: {} (worst rel err {:.2e}) in {:.1?}",
            parts.join(", "),
            worst,
            t0.elapsed()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Metric oracles
// ---------------------------------------------------------------------------

fn psnr_reference(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
        count += 1;
    }
    let mse = acc / count as f64;
    10.0 * (1.0 / mse).log10()
}

/// Direct sliding-window SSIM, no separable filtering: an independent route.
fn ssim_reference(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    const K: usize = 11;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut win = [[0.0f64; K]; K];
    let mut norm = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            *v = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            norm += *v;
        }
    }
    for row in win.iter_mut() {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        let mut windows = 0usize;
        for y0 in 0..=(h - K) {
            for x0 in 0..=(w - K) {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..K {
                    for dx in 0..K {
                        let wgt = win[dy][dx];
                        let va = a[(ch, y0 + dy, x0 + dx)] as f64;
                        let vb = b[(ch, y0 + dy, x0 + dx)] as f64;
                        ma += wgt * va;
                        mb += wgt * vb;
                        maa += wgt * va * va;
                        mbb += wgt * vb * vb;
                        mab += wgt * va * vb;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                windows += 1;
            }
        }
        total += acc / windows as f64;
    }
    total / c as f64
}

#[test]
fn criterion_06_metric_oracles() {
    let t0 = Instant::now();
    let mut rng = TrainRng::seed_from_u64(6);
    let mut worst_psnr: f64 = 0.0;
    let mut worst_ssim: f64 = 0.0;
    for _ in 0..100 {
        let a = Array3::<f32>::from_shape_fn((1, 32, 32), |_| rng.random_range(0.0..1.0));
        let b = Array3::<f32>::from_shape_fn((1, 32, 32), |_| rng.random_range(0.0..1.0));
        worst_psnr = worst_psnr.max((psnr(&a, &b).unwrap() - psnr_reference(&a, &b)).abs());
        worst_ssim = worst_ssim.max((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs());
    }
    let a = Array3::<f32>::from_elem((1, 32, 32), 0.5);
    let b = a.mapv(|v| v + 1.0 / 255.0);
    let uniform = psnr(&a, &b).unwrap();
    let pass = worst_psnr <= 1e-9 && worst_ssim <= 1e-6 && (uniform - 48.13).abs() <= 0.01;
    report(
        6,
        pass,
        &format!(
            "psnr within {worst_psnr:.1e} dB, ssim within {worst_ssim:.1e} of brute force (100 pairs); uniform 1/255 -> {uniform:.4} dB; {:.2?}",
            t0.elapsed()
        ),
    );
}

// ---------------------------------------------------------------------------
// Shared training fixture (criteria 7-10)
// ---------------------------------------------------------------------------

fn accept_scenes(n: usize) -> Vec<SceneConfig> {
    let kinds = [ShapeKind::Square, ShapeKind::Disk, ShapeKind::Bar];
    (0..n)
        .map(|i| SceneConfig {
            height: 64,
            width: 64,
            channels: 1,
            shapes: vec![
                ShapeSpec {
                    kind: kinds[i % 3],
                    size: 12.0 + (i % 4) as f64 * 2.0,
                    velocity: (8.0 + (i % 5) as f64 * 1.5, -5.0 + (i % 3) as f64 * 3.0),
                    intensity: 0.85,
                },
                ShapeSpec {
                    kind: kinds[(i + 1) % 3],
                    size: 9.0,
                    velocity: (-7.0, 6.0 + (i % 4) as f64 * 1.5),
                    intensity: 0.5,
                },
            ],
            background: 0.15,
            duration: 0.375,
            frame_rate: 8.0,
            seed: 100 + i as u64,
        })
        .collect()
}

/// Desk-scale model for the overfit criteria: f3 as required; widths are
/// trimmed for the single-core CPU budget (the criterion pins resolution,
/// depth, step budget and the 30 dB bar, not channel widths).
fn accept_hae() -> HAEConfig {
    HAEConfig {
        n_down: 3,
        in_channels: 1,
        base_channels: 24,
        channel_mult: vec![1, 2, 2],
        event_base_channels: 8,
        bins: 2,
        res_blocks: 1,
        ..Default::default()
    }
}

fn accept_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 64,
        channel_mult: vec![1, 2],
        time_embed_dim: 64,
        res_blocks: 2,
        n_conditions: 2,
    }
}

struct Fixture {
    train: VfiSet,
    #[allow(dead_code)]
    stage1: HaeModel<f32>,
    stage1_psnr: f64,
    stage1_seconds: f64,
    stage1_steps: usize,
    v5: Stage2Model,
    v5_psnr: f64,
    v1_psnr: f64,
    v2_psnr: f64,
    v3_psnr: f64,
    gt_frozen_identical: bool,
}

fn build_fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let opts = DatasetOptions {
        skips: 1,
        interior: InteriorMode::Midpoint,
        val_fraction: 0.0,
        ..Default::default()
    };
    // 8 scenes, two sliding windows each -> 16 triplets
    let manifest = make_dataset(&accept_scenes(8), dir.path(), &opts).unwrap();
    let hae = accept_hae();
    let train = load_vfi_set(&manifest, Some("train"), hae.bins, 64, 1).unwrap();
    assert_eq!(train.items.len(), 16);

    let s1_cfg = TrainConfig {
        steps: 1100,
        batch_size: 2,
        lr_main: 2e-3,
        lr_decay_step: 700,
        log_every: 200,
        seed: 42,
        ..Default::default()
    };
    let t0 = Instant::now();
    let (stage1, _) = train_stage1(&hae, &s1_cfg, &train, None).unwrap();
    let stage1_seconds = t0.elapsed().as_secs_f64();
    let stage1_psnr = mean(&eval_stage1(&stage1, &train).unwrap());

    let sched = ScheduleSpec::default();
    let dn = accept_denoiser();
    let s2 = |variant: Variant, steps: usize| TrainConfig {
        steps,
        batch_size: 2,
        lr_main: 1e-3,
        lr_finetune: 2e-4,
        lr_decay_step: steps * 7 / 10,
        log_every: 100,
        seed: 42,
        variant,
        v2_steps: 100,
        ..Default::default()
    };

    let (v5, _) = train_stage2(&stage1, &dn, &sched, &s2(Variant::V5, 400), &train, None).unwrap();
    let gt_frozen_identical = {
        let a = v5.gt_encoder.named_params();
        let b = stage1.encoder.named_params();
        a.len() == b.len()
            && a.iter()
                .zip(b.iter())
                .all(|((_, x), (_, y))| x.to_array() == y.to_array())
    };
    let built = sched.build().unwrap();
    let v5_psnr = mean(&eval_stage2(&v5, &train, &built, 777, false).unwrap());

    let (v1, _) = train_stage2(&stage1, &dn, &sched, &s2(Variant::V1, 0), &train, None).unwrap();
    let v1_psnr = mean(&eval_stage2(&v1, &train, &built, 777, true).unwrap());

    let (v2, _) = train_stage2(&stage1, &dn, &sched, &s2(Variant::V2, 400), &train, None).unwrap();
    let v2_sched = sched.with_steps(100).build().unwrap();
    let v2_psnr = mean(&eval_stage2(&v2, &train, &v2_sched, 777, false).unwrap());

    let (v3, _) = train_stage2(&stage1, &dn, &sched, &s2(Variant::V3, 400), &train, None).unwrap();
    let v3_psnr = mean(&eval_stage2(&v3, &train, &built, 777, false).unwrap());

    Fixture {
        train,
        stage1,
        stage1_psnr,
        stage1_seconds,
        stage1_steps: s1_cfg.steps,
        v5,
        v5_psnr,
        v1_psnr,
        v2_psnr,
        v3_psnr,
        gt_frozen_identical,
    }
}

fn check(failures: &mut Vec<String>, criterion: u32, pass: bool, details: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} {status}: {details}");
    if !pass {
        failures.push(format!("criterion {criterion}: {details}"));
    }
}

/// Criteria 7-10 share one trained pipeline (the graph tensors are not
/// Send, so the fixture lives inside a single sequential test); each
/// criterion still prints its own pass/fail line.
#[test]
fn criteria_07_to_10_trained_pipeline() {
    let f = build_fixture();
    let mut failures = Vec::new();

    // 7: stage-1 overfit
    check(
        &mut failures,
        7,
        f.stage1_psnr >= 30.0 && f.stage1_steps <= 2000 && f.stage1_seconds <= 3600.0,
        &format!(
            "16 triplets 64x64 f3, {} steps -> train PSNR {:.2} dB in {:.0}s CPU",
            f.stage1_steps, f.stage1_psnr, f.stage1_seconds
        ),
    );

    // 8: stage-2 bounded drop + freeze contract
    let drop = f.stage1_psnr - f.v5_psnr;
    check(
        &mut failures,
        8,
        drop <= 2.0 && f.gt_frozen_identical,
        &format!(
            "V5 validation-on-train {:.2} dB vs V0 {:.2} dB (drop {:.2} dB <= 2); frozen gt-encoder bit-identical: {}",
            f.v5_psnr, f.stage1_psnr, drop, f.gt_frozen_identical
        ),
    );

    // 9: scheme ordering
    let gap = f.v5_psnr - f.v1_psnr;
    check(
        &mut failures,
        9,
        gap >= 2.0 && f.v3_psnr >= f.v2_psnr,
        &format!(
            "V5 {:.2} dB >= V1 {:.2} dB + 2 (gap {:.2}); V3 {:.2} dB >= V2 {:.2} dB",
            f.v5_psnr, f.v1_psnr, gap, f.v3_psnr, f.v2_psnr
        ),
    );

    // 10: step sweep on the V5 checkpoint
    {
        use eventdiff::train::data::{stack_images, stack_voxels};
        use eventdiff::train::{infer_vfi_batch, LatentSource};
        let eval_at = |steps: usize| -> (f64, f64) {
            let sched = f.v5.sched_spec.with_steps(steps).build().unwrap();
            let mut rng = TrainRng::seed_from_u64(314);
            let mut psnrs = Vec::new();
            let t0 = Instant::now();
            for item in &f.train.items {
                let i0 = stack_images::<f32>(&[&item.i0]);
                let i1 = stack_images::<f32>(&[&item.i1]);
                let v0 = stack_voxels::<f32>(&[&item.vox0]);
                let v1 = stack_voxels::<f32>(&[&item.vox1]);
                let rec = infer_vfi_batch(
                    &f.v5,
                    &i0,
                    &i1,
                    &v0,
                    &v1,
                    LatentSource::Diffusion(&sched),
                    &mut rng,
                )
                .unwrap();
                let img = &eventdiff::train::data::unstack_images(&rec)[0];
                psnrs.push(psnr(img, &item.igt).unwrap());
            }
            let rt = t0.elapsed().as_secs_f64() / f.train.items.len() as f64;
            (mean(&psnrs), rt)
        };
        let (p1, _) = eval_at(1);
        let (p5, rt5) = eval_at(5);
        let (_p100, rt100) = eval_at(100);
        let ratio = rt100 / rt5;
        check(
            &mut failures,
            10,
            p5 >= p1 && ratio >= 5.0,
            &format!(
                "PSNR(5 steps) {:.2} dB >= PSNR(1 step) {:.2} dB; runtime ratio 100/5 = {:.1}x ({:.0} ms vs {:.0} ms per frame; >=10x preferred, >=5x accepted with ratio reported)",
                p5, p1, ratio, rt100 * 1e3, rt5 * 1e3
            ),
        );
    }

    assert!(failures.is_empty(), "{}", failures.join("; "));
}

// ---------------------------------------------------------------------------
// 11. Deblurring extension
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_deblur_extension() {
    let dir = tempfile::tempdir().unwrap();
    let opts = DatasetOptions {
        skips: 1,
        val_fraction: 0.0,
        ..Default::default()
    };
    // 8 scenes, one 8-frame blur window each at a 4x high-rate render
    let scenes = accept_scenes(8);
    let opts = DatasetOptions {
        highrate_factor: 4,
        ..opts
    };
    let manifest = make_deblur_dataset(&scenes, dir.path(), &opts, 8).unwrap();
    let hae = HAEConfig {
        bins: 3,
        decoder_head: DecoderHead::SimpleUnet,
        ..accept_hae()
    };
    let train = load_deblur_set(&manifest, Some("train"), hae.bins).unwrap();
    assert_eq!(train.items.len(), 8, "expected 8 blurry/sharp pairs");

    let s1_cfg = TrainConfig {
        steps: 450,
        batch_size: 2,
        lr_main: 2e-3,
        lr_decay_step: 300,
        log_every: 150,
        seed: 42,
        ..Default::default()
    };
    let (stage1, _) = train_stage1_deblur(&hae, &s1_cfg, &train, None).unwrap();

    let dn = DenoiserConfig {
        n_conditions: 1,
        ..accept_denoiser()
    };
    let sched = ScheduleSpec::default();
    let s2_cfg = TrainConfig {
        steps: 250,
        batch_size: 2,
        lr_main: 1e-3,
        lr_finetune: 2e-4,
        lr_decay_step: 180,
        log_every: 100,
        seed: 42,
        variant: Variant::V5,
        ..Default::default()
    };
    let (model, _) = train_stage2_deblur(&stage1, &dn, &sched, &s2_cfg, &train, None).unwrap();
    let built = sched.build().unwrap();
    let deblur_psnr = mean(&eval_stage2_deblur(&model, &train, &built, 99).unwrap());

    // plumbing from raw inputs: end-to-end shape + determinism
    let blur = &train.items[0].blur;
    let (h, w) = (blur.shape()[1] as u16, blur.shape()[2] as u16);
    let events = EventStream::new(
        vec![
            Event { x: 1, y: 1, polarity: 1, t: 0.25 },
            Event { x: 2, y: 2, polarity: -1, t: 0.75 },
        ],
        0.0,
        1.0,
        w,
        h,
    )
    .unwrap();
    let a = deblur_infer(&model, blur, &events, None, 7).unwrap();
    let b = deblur_infer(&model, blur, &events, None, 7).unwrap();
    assert_eq!(a.shape(), blur.shape(), "deblur output shape");
    assert_eq!(a, b, "deblur inference determinism");

    report(
        11,
        deblur_psnr >= 25.0,
        &format!(
            "8 SCER deblur pairs, simple_unet head, overfit -> PSNR {:.2} dB (>= 25); inference shape and determinism hold",
            deblur_psnr
        ),
    );
}
