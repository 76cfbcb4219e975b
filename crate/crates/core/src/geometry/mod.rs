//! Unification of detector text regions into binary instance masks.

mod components;
mod mask;
mod regions;
mod shapes;

pub use components::{extract_instances, trace_outer_contour};
pub use mask::Mask;
pub use regions::{
    binarize_semantic, downsample_mask, unify_regions, InstanceMaskSet, RegionSet, UnifyReport,
};
pub use shapes::{
    bezier_to_polygon, cubic_point, rasterize_polygon, BezierRegion, Point, Polygon,
    DEFAULT_BEZIER_SAMPLES,
};

/// Random convex polygon whose sides are all at least `min_side` long and
/// whose interior angles are at least `min_angle_deg`, sampled on an ellipse
/// inside a `size × size` canvas. Returns `None` if no admissible polygon
/// was drawn within a bounded number of attempts.
pub fn random_convex_polygon(
    rng: &mut impl rand::Rng,
    size: f64,
    min_side: f64,
    min_angle_deg: f64,
) -> Option<Polygon> {
    use std::f64::consts::TAU;
    for _ in 0..1000 {
        let n = rng.random_range(3..=8);
        let rx = rng.random_range(0.2..0.45) * size;
        let ry = rng.random_range(0.2..0.45) * size;
        let (cx, cy) = (size / 2.0, size / 2.0);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let poly = Polygon::new(
            angles
                .iter()
                .map(|a| Point::new(cx + rx * a.cos(), cy + ry * a.sin()))
                .collect(),
        );
        let ok = poly
            .edges()
            .all(|(a, b)| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt() >= min_side);
        if ok && min_interior_angle(&poly) >= min_angle_deg.to_radians() {
            return Some(poly);
        }
    }
    None
}

fn min_interior_angle(poly: &Polygon) -> f64 {
    let v = poly.vertices();
    let n = v.len();
    (0..n)
        .map(|i| {
            let (p, q, r) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
            let (ax, ay) = (p.x - q.x, p.y - q.y);
            let (bx, by) = (r.x - q.x, r.y - q.y);
            let cos =
                (ax * bx + ay * by) / ((ax * ax + ay * ay).sqrt() * (bx * bx + by * by).sqrt());
            cos.clamp(-1.0, 1.0).acos()
        })
        .fold(f64::INFINITY, f64::min)
}

/// |a ∩ b| / |a ∪ b|, with two empty masks scoring 0.
pub fn mask_iou(a: &Mask, b: &Mask) -> crate::Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}
