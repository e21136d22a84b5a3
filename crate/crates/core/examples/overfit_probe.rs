use hcseg_core::data::{synth_generate, SynthSpec};
use hcseg_core::net::{build_network, NetworkConfig, Variant};
use hcseg_core::train::{train, TrainConfig};
use std::time::Instant;

fn run(lr: f64, batch: usize, seed: u64, speckle: f64, label: &str) {
    let mut spec = SynthSpec::desk_default(8, 32, 123);
    spec.speckle_level = speckle;
    let records = synth_generate(&spec).unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        batch_size: batch,
        lr,
        seed,
        input_size: (32, 32),
        variant: Variant::MsMiniLinknet,
        base_channels: 4,
        ..TrainConfig::default()
    };
    let net_cfg = NetworkConfig::new(cfg.variant, cfg.input_size, cfg.base_channels);
    let net = build_network::<f32>(&net_cfg, cfg.seed).unwrap();
    let t0 = Instant::now();
    let history = train(&net, &records, &records, &cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let final_dice = history.epochs.last().unwrap().val_soft_dice;
    let hit = history.epochs.iter().position(|e| e.val_soft_dice > 0.95);
    println!("{label}: {secs:.1}s, final {final_dice:.4}, first>0.95 {hit:?}");
}

fn main() {
    run(0.01, 2, 7, 0.15, "lr.01 b2 s7");
    run(0.02, 2, 7, 0.15, "lr.02 b2 s7");
    run(0.01, 4, 11, 0.15, "lr.01 b4 s11");
    run(0.01, 4, 23, 0.15, "lr.01 b4 s23");
    run(0.03, 4, 7, 0.15, "lr.03 b4 s7");
    run(0.01, 4, 7, 0.05, "lr.01 b4 s7 speckle.05");
}
