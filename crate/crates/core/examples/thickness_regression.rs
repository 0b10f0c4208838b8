//! Tube-thickness regression from two fan-beam projections.
//!
//! Trains the equivariant network and a fully-connected baseline of similar
//! size on the same data and compares test MSE with the mean predictor.
//!
//! ```text
//! cargo run --release --example thickness_regression -- [epochs] [train size] [lift points]
//! ```

use sinonet::data::{build_dataset, default_geometry, RingParams};
use sinonet::layers::{build_model, ArchConfig, ModelKind};
use sinonet::train::{evaluate, mean_predictor_mse, Samples, TrainConfig, Trainer};

fn main() -> sinonet::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let epochs = args.first().copied().unwrap_or(10);
    let n_train = args.get(1).copied().unwrap_or(1000);
    let lift_points = args.get(2).copied().unwrap_or(128);

    let geom = default_geometry();
    let rings = RingParams::default();
    let train = Samples::from_dataset(&build_dataset(n_train, &geom, 0.05, &rings, 1)?);
    let test = Samples::from_dataset(&build_dataset(200, &geom, 0.05, &rings, 2)?);
    let (mean, _) = train.target_stats()?;
    println!(
        "mean predictor test MSE {:.3e}",
        mean_predictor_mse(&mean, &test)?
    );

    for kind in [ModelKind::Mlp, ModelKind::Equivariant] {
        let cfg = TrainConfig {
            epochs,
            arch: ArchConfig {
                kind,
                lift_points,
                ..ArchConfig::default()
            },
            ..TrainConfig::default()
        };
        let model = build_model(&cfg.arch, &train.sensors, cfg.seed)?;
        println!("{kind:?}: {} parameters", model.store().trainable_count());
        let mut trainer = Trainer::new(cfg.clone(), model)?;
        trainer.fit_targets(&train)?;
        let start = std::time::Instant::now();
        for row in trainer.run(&train, Some(&test), None)? {
            println!(
                "  {:>4} {:<5} {:<9} {:.4e}",
                row.epoch, row.split, row.metric, row.value
            );
        }
        let m = evaluate(&*trainer.model, &test, cfg.batch_size, cfg.seed)?;
        println!("{kind:?} final {m:?} in {:.0?}", start.elapsed());
    }
    Ok(())
}
