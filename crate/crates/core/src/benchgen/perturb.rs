use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    Scale,
    ScaleShift,
}

impl std::fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PerturbMode::Scale => "scale",
            PerturbMode::ScaleShift => "scale+shift",
        })
    }
}

fn in_bounds(b: &BBox) -> bool {
    b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 1.0 && b.y1 <= 1.0 && b.x0 < b.x1 && b.y0 < b.y1
}

fn scaled(b: &BBox, s: f64, dx: f64, dy: f64) -> BBox {
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() * s / 2.0, b.height() * s / 2.0);
    BBox {
        x0: cx + dx - hw,
        y0: cy + dy - hh,
        x1: cx + dx + hw,
        y1: cy + dy + hh,
    }
}

const ATTEMPTS: usize = 200;

/// Perturbs a box to a requested IoU with the original.
///
/// Scale mode shrinks or enlarges about the center (nested boxes have IoU
/// equal to the area ratio). Scale+shift draws a scale with slack above the
/// target and moves the center along a random direction, solving for the
/// distance by bisection.
pub fn perturb_bbox(bbox: &BBox, mode: PerturbMode, target_iou: f64, seed: u64) -> Result<BBox> {
    bbox.validate()?;
    if !(target_iou > 0.0 && target_iou <= 1.0) {
        return Err(Error::Perturbation(format!("target IoU {target_iou} outside (0, 1]")));
    }
    if target_iou == 1.0 {
        return Ok(*bbox);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        PerturbMode::Scale => {
            let shrink = scaled(bbox, target_iou.sqrt(), 0.0, 0.0);
            let grow = scaled(bbox, 1.0 / target_iou.sqrt(), 0.0, 0.0);
            if rng.random_bool(0.5) && in_bounds(&grow) {
                Ok(grow)
            } else {
                Ok(shrink)
            }
        }
        PerturbMode::ScaleShift => {
            let (lo, hi) = (target_iou.sqrt(), 1.0 / target_iou.sqrt());
            for _ in 0..ATTEMPTS {
                let s = lo + (hi - lo) * rng.random_range(0.05..0.95);
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let (ux, uy) = (theta.cos(), theta.sin());
                let iou_at = |t: f64| bbox.iou(&scaled(bbox, s, t * ux, t * uy));
                // IoU falls from above the target at t = 0 to zero once disjoint.
                let (mut a, mut b) = (0.0, 2.0 * (bbox.width() + bbox.height()));
                for _ in 0..100 {
                    let m = (a + b) / 2.0;
                    if iou_at(m) > target_iou {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                let t = (a + b) / 2.0;
                let out = scaled(bbox, s, t * ux, t * uy);
                if in_bounds(&out) {
                    return Ok(out);
                }
            }
            Err(Error::Perturbation(format!(
                "no in-bounds box with IoU {target_iou} around {:?}",
                bbox.to_array()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_iou_is_identity() {
        let b = BBox::new(0.1, 0.2, 0.6, 0.9).unwrap();
        for mode in [PerturbMode::Scale, PerturbMode::ScaleShift] {
            assert_eq!(perturb_bbox(&b, mode, 1.0, 4).unwrap(), b);
        }
    }

    #[test]
    fn centered_scale_hits_closed_form() {
        let b = BBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        for seed in 0..10 {
            let p = perturb_bbox(&b, PerturbMode::Scale, 0.8, seed).unwrap();
            assert!((p.center().0 - 0.5).abs() < 1e-12 && (p.center().1 - 0.5).abs() < 1e-12);
            let ratio = p.area() / b.area();
            assert!((ratio - 0.8).abs() < 1e-12 || (ratio - 1.25).abs() < 1e-12, "{ratio}");
            assert!((b.iou(&p) - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_target_is_an_error() {
        let b = BBox::full();
        assert!(perturb_bbox(&b, PerturbMode::Scale, 0.0, 0).is_err());
        assert!(perturb_bbox(&b, PerturbMode::Scale, 1.2, 0).is_err());
    }
}
