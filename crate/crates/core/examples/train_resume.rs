//! Training is resumable: two epochs, a checkpoint written to disk and read
//! into a fresh trainer, then the rest of the run. The metric log matches an
//! uninterrupted run bit for bit.

use sinonet::data::{build_dataset, default_geometry, RingParams};
use sinonet::layers::{build_model, ArchConfig};
use sinonet::train::{write_metrics_csv, Samples, TrainConfig, Trainer};

fn trainer(cfg: &TrainConfig, data: &Samples) -> sinonet::Result<Trainer> {
    let model = build_model(&cfg.arch, &data.sensors, cfg.seed)?;
    let mut t = Trainer::new(cfg.clone(), model)?;
    t.fit_targets(data)?;
    Ok(t)
}

fn main() -> sinonet::Result<()> {
    let geom = default_geometry();
    let train = Samples::from_dataset(&build_dataset(48, &geom, 0.05, &RingParams::default(), 1)?);
    let cfg = TrainConfig {
        epochs: 4,
        arch: ArchConfig {
            channels: 4,
            k: 9,
            lift_k: 9,
            lift_points: 64,
            ..ArchConfig::default()
        },
        ..TrainConfig::default()
    };
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;

    let mut straight = trainer(&cfg, &train)?;
    let full = straight.run(&train, None, None)?;

    let dir = std::env::temp_dir().join(format!("sinonet-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join("checkpoint.bin");
    let mut first = trainer(&cfg, &train)?;
    let mut rows = first.run(&train, None, Some(2 * steps_per_epoch))?;
    first.save_file(&ckpt)?;
    let mut second = trainer(&cfg, &train)?;
    second.load_file(&ckpt)?;
    println!("resumed at epoch {}", second.progress.epoch);
    rows.extend(second.run(&train, None, None)?);
    std::fs::remove_dir_all(&dir)?;

    let (mut a, mut b) = (Vec::new(), Vec::new());
    write_metrics_csv(&mut a, &full)?;
    write_metrics_csv(&mut b, &rows)?;
    print!("{}", String::from_utf8_lossy(&a));
    println!("interrupted run identical: {}", a == b);
    Ok(())
}
