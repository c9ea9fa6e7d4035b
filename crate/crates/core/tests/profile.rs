//! Coarse phase timing for one training step (ignored; run manually).

use eventdiff::hae::{stage1_loss, HAEConfig, HaeModel};
use eventdiff::nn::layers::Params;
use eventdiff::nn::{Adam, Tensor};
use eventdiff::stca::AttentionConfig;
use eventdiff::TrainRng;
use rand::SeedableRng;

#[test]
#[ignore]
fn profile_step_phases() {
    let cfg = HAEConfig {
        n_down: 3,
        in_channels: 1,
        base_channels: 32,
        channel_mult: vec![1, 2, 2],
        event_base_channels: 16,
        bins: 2,
        res_blocks: 1,
        attention: AttentionConfig::default(),
        ..Default::default()
    };
    let mut rng = TrainRng::seed_from_u64(0);
    let model = HaeModel::<f32>::new(&cfg, &mut rng).unwrap();
    let mut opt = Adam::new(model.params(), 1e-3);
    let n = 4;
    let img = Tensor::from_array(eventdiff::nn::layers::randn_array(
        &mut rng,
        &[n, 1, 64, 64],
        0.3,
    ));
    let vox = Tensor::from_array(eventdiff::nn::layers::randn_array(
        &mut rng,
        &[n, 2, 2, 64, 64],
        0.5,
    ));

    for round in 0..3 {
        let t0 = std::time::Instant::now();
        let e0 = model.encoder.forward(&img, &vox).unwrap();
        let enc1 = t0.elapsed();

        let t1 = std::time::Instant::now();
        let e1 = model.encoder.forward(&img, &vox).unwrap();
        let eg = model.encoder.forward(&img, &vox).unwrap();
        let enc23 = t1.elapsed();

        let t2 = std::time::Instant::now();
        let q = model.quantizer.quantize(&eg.embedding).unwrap();
        let rec = model
            .kernel_decoder()
            .unwrap()
            .forward(&q.z_q, &e0.pyramid, &e1.pyramid, &img, &img)
            .unwrap();
        let dec = t2.elapsed();

        let t3 = std::time::Instant::now();
        let loss = stage1_loss(&rec, &img, &q.vq_loss).unwrap();
        loss.backward();
        let bwd = t3.elapsed();

        let t4 = std::time::Instant::now();
        opt.step();
        let step = t4.elapsed();
        println!(
            "round {round}: enc1 {enc1:?} enc2+3 {enc23:?} dec {dec:?} bwd {bwd:?} opt {step:?}"
        );
    }
}
