//! Projections of a ring phantom: closed-form line integrals against the
//! rasterised image, and the sinogram of a two-angle geometry as CSV.
//!
//! ```text
//! cargo run --release --example radon_phantoms > sinogram.csv
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sinonet::data::{default_geometry, gen_ring, thickness, RingParams};
use sinonet::tomo::{
    build_sensors, measure, measure_raster, write_sinogram_csv, GridLayout, RasterImage,
};

fn main() -> sinonet::Result<()> {
    let sample = gen_ring(&mut ChaCha8Rng::seed_from_u64(3), &RingParams::default())?;
    let phantom = sample.phantom();
    let (d_min, d_max) = thickness(&phantom)?;
    eprintln!("ring thickness min {d_min:.4}, max {d_max:.4}");

    let sensors = build_sensors(&default_geometry());
    let exact = measure(&phantom, &sensors);
    for n in [64, 128, 256] {
        let img = RasterImage::from_phantom(GridLayout::square(n, 1.0)?, 4, &phantom);
        let approx = measure_raster(&img, &sensors);
        let err = exact
            .iter()
            .zip(&approx)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        eprintln!("raster {n:>3}²: max deviation from the closed form {err:.3e}");
    }
    write_sinogram_csv(std::io::stdout().lock(), &sensors, &exact)
}
