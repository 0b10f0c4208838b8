//! Invariance of untrained networks to rotations of the phantom, for parallel
//! geometries with more and more angles. Writes the chart to the given path.
//!
//! ```text
//! cargo run --release --example equivariance_trend -- trend.svg
//! ```

use sinonet::audit::{equivariance_audit, EquivarianceAuditConfig};
use sinonet::svg::{line_chart, Chart, Series};

fn main() -> sinonet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "equivariance_trend.svg".into());
    let cfg = EquivarianceAuditConfig::default();
    let (_, medians) = equivariance_audit(&cfg, 0, 1)?;
    for m in &medians {
        println!("{:>3} angles: median residual {:.3e}", m.angles, m.median);
    }
    let chart = Chart {
        title: "Invariance residual".into(),
        x_label: "angles".into(),
        y_label: "median relative change".into(),
        log_x: true,
        log_y: true,
    };
    let series = Series {
        name: "untrained".into(),
        points: medians
            .iter()
            .map(|m| (m.angles as f64, m.median))
            .collect(),
    };
    std::fs::write(&out, line_chart(&chart, &[series]))?;
    println!("wrote {out}");
    Ok(())
}
