//! Does a discretized Radon operator see rotated images the same way it sees
//! the originals? Compares `Ker(A)` with `Ker(A·P)` for a dense and a
//! two-angle parallel geometry.

use sinonet::audit::{visibility_audit, VisibilityAuditConfig};

fn main() -> sinonet::Result<()> {
    let cfg = VisibilityAuditConfig {
        rotations_deg: vec![90.0, 45.0],
        random_elements: 2,
        ..VisibilityAuditConfig::default()
    };
    println!(
        "{:<6} {:>6} {:>8} {:>8} {:>6} {:>12} {:>10}",
        "set", "angles", "rot°", "shift", "holds", "angle", "kernels"
    );
    for r in visibility_audit(&cfg, 1)? {
        println!(
            "{:<6} {:>6} {:>8.2} {:>8.3} {:>6} {:>12.3e} {:>5}/{:<5}",
            r.geometry,
            r.angles,
            r.angle_deg,
            r.shift_x.hypot(r.shift_y),
            r.holds,
            r.mismatch_angle,
            r.kernel_dim,
            r.transformed_kernel_dim
        );
    }
    Ok(())
}
