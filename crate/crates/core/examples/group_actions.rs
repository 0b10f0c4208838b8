//! Roto-translations and affine maps acting on the image plane and on
//! sinogram coordinates, with the log chart and the left-invariant distance.

use sinonet::actions::{act_x, act_y, act_y_inv, jacobian_det_y, multiplier_y, PointX, PointY};
use sinonet::group::{
    dist_g, from_log, log_coords, DistanceWeights, GroupElement, GroupId, Mat2, Vec2,
};

fn main() -> sinonet::Result<()> {
    let g = GroupElement::se2(Vec2::new(0.2, -0.1), 0.6);
    let a = GroupElement::aff(Vec2::new(-0.1, 0.3), Mat2::new(1.2, 0.3, -0.1, 0.8))?;

    let u = PointX::new(0.5, 0.25);
    let v = PointY::new(0.4, 1.1);
    for (name, h) in [("rotation+shift", &g), ("affine", &a)] {
        let moved = act_y(h, v);
        println!("{name}");
        println!(
            "  point  {:?} -> {:?}",
            u.0.as_slice(),
            act_x(h, u).0.as_slice()
        );
        println!(
            "  ray    (r {:.3}, φ {:.3}) -> (r {:.3}, φ {:.3})",
            v.r, v.phi, moved.r, moved.phi
        );
        println!(
            "  multiplier {:.4}  Jacobian {:.4}  round trip error {:.1e}",
            multiplier_y(h, v),
            jacobian_det_y(h, v),
            (act_y_inv(h, moved).r - v.r).abs()
        );
        let log = log_coords(h);
        let back = from_log(&log, h.id())?;
        println!(
            "  log coords {:?}  chart round trip error {:.1e}",
            log.as_slice()
                .iter()
                .map(|x| (x * 1e4).round() / 1e4)
                .collect::<Vec<_>>(),
            (back.linear() - h.linear()).norm() + (back.translation() - h.translation()).norm()
        );
    }

    let w = DistanceWeights::default();
    let h = GroupElement::se2(Vec2::new(-0.3, 0.05), -1.2);
    let k = GroupElement::se2(Vec2::new(0.7, 0.1), 2.0);
    let d = dist_g(&g, &h, &w)?;
    let d_moved = dist_g(&k.compose(&g)?, &k.compose(&h)?, &w)?;
    println!("distance {d:.6}, after a common left shift {d_moved:.6}");
    println!("identity is {:?}", GroupElement::identity(GroupId::SE2));
    Ok(())
}
