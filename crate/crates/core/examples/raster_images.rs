//! Raster images as network inputs: synthetic digits-style images are written
//! as IDX bytes, read back, projected with a fan-beam geometry and pushed
//! through an untrained classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinonet::data::{encode_idx_images, read_idx_images};
use sinonet::layers::{build_model, ArchConfig, Ctx, HeadKind};
use sinonet::tomo::{build_sensors, Geometry};
use sinonet::train::Samples;

fn main() -> sinonet::Result<()> {
    let (h, w) = (28, 28);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut labels = Vec::new();
    let images: Vec<Vec<u8>> = (0..6)
        .map(|i| {
            let label = (i % 2) as u8;
            labels.push(label);
            let (cx, cy) = (rng.random_range(10.0..18.0), rng.random_range(10.0..18.0));
            (0..h * w)
                .map(|p| {
                    let (x, y) = ((p % w) as f64 - cx, (p / w) as f64 - cy);
                    // label 0 draws a blob, label 1 a bar
                    let on = if label == 0 {
                        x * x + y * y < 25.0
                    } else {
                        x.abs() < 2.0 && y.abs() < 8.0
                    };
                    if on {
                        255
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let bytes = encode_idx_images(&images, h, w);
    let rasters = read_idx_images(bytes.as_slice())?;
    println!(
        "{} images of {}x{} read back from {} IDX bytes",
        rasters.len(),
        h,
        w,
        bytes.len()
    );

    let angles = (0..12)
        .map(|k| std::f64::consts::TAU * k as f64 / 12.0)
        .collect();
    let geom = Geometry::fan_covering(angles, 25, 1.2, 3.0)?;
    let sensors = build_sensors(&geom);
    let data = Samples::from_rasters(&rasters, &labels, 2, &sensors)?;
    let arch = ArchConfig {
        head: HeadKind::Classification,
        outputs: 2,
        lift_points: 64,
        k: 9,
        lift_k: 9,
        ..ArchConfig::default()
    };
    let model = build_model(&arch, &sensors, 0)?;
    let mut ctx = Ctx::new(model.store(), false);
    let x = data.batch_inputs(&(0..data.len()).collect::<Vec<_>>())?;
    let logits = model.forward(&mut ctx, &x, &mut ChaCha8Rng::seed_from_u64(1))?;
    for (i, row) in ctx.tape.value(logits).data().chunks(2).enumerate() {
        println!(
            "image {i} (label {}): logits {:+.4} {:+.4}",
            labels[i], row[0], row[1]
        );
    }
    Ok(())
}
