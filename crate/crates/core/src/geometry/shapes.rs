use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Closed polygon in pixel coordinates; the last vertex connects back to the
/// first. Serialized as a JSON array of `[x, y]` pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon(pub Vec<Point>);

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Self(vertices)
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Shoelace area (absolute).
    pub fn area(&self) -> f64 {
        let n = self.0.len();
        (0..n)
            .map(|i| {
                let (a, b) = (self.0[i], self.0[(i + 1) % n]);
                a.x * b.y - b.x * a.y
            })
            .sum::<f64>()
            .abs()
            * 0.5
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.0.len();
        (0..n).map(move |i| (self.0[i], self.0[(i + 1) % n]))
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        self.0.iter().fold(None, |acc, p| {
            Some(match acc {
                None => (p.x, p.y, p.x, p.y),
                Some((a, b, c, d)) => (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
            })
        })
    }
}

/// Text region bounded by two cubic Bezier sides, each given by 4 control
/// points. The polygon walks the top side forward and the bottom side in
/// reverse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BezierRegion {
    pub top: [Point; 4],
    pub bottom: [Point; 4],
}

pub const DEFAULT_BEZIER_SAMPLES: usize = 10;

/// Point on a cubic Bezier curve via the Bernstein form.
pub fn cubic_point(ctrl: &[Point; 4], t: f64) -> Point {
    let u = 1.0 - t;
    let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
    let mut p = Point::new(0.0, 0.0);
    for (wi, c) in w.iter().zip(ctrl) {
        p.x += wi * c.x;
        p.y += wi * c.y;
    }
    p
}

pub fn bezier_to_polygon(region: &BezierRegion, samples: usize) -> Result<Polygon> {
    if samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "bezier sampling needs at least 2 samples per side, got {samples}"
        )));
    }
    let ts: Vec<f64> = (0..samples)
        .map(|i| i as f64 / (samples - 1) as f64)
        .collect();
    let mut verts: Vec<Point> = ts.iter().map(|&t| cubic_point(&region.top, t)).collect();
    verts.extend(ts.iter().rev().map(|&t| cubic_point(&region.bottom, t)));
    Ok(Polygon(verts))
}

/// Fills pixels whose centre `(c + 0.5, r + 0.5)` lies inside `poly` by the
/// even-odd rule. Polygons with fewer than 3 vertices give an empty mask.
pub fn rasterize_polygon(poly: &Polygon, height: usize, width: usize) -> Mask {
    let mut mask = Mask::empty(height, width);
    if poly.len() < 3 {
        return mask;
    }
    let mut xs: Vec<f64> = Vec::new();
    for r in 0..height {
        let y = r as f64 + 0.5;
        xs.clear();
        for (a, b) in poly.edges() {
            // half-open crossing rule: vertices on the scanline count once
            if (a.y <= y) != (b.y <= y) {
                xs.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // centre cx inside iff pair[0] <= cx < pair[1]
            let lo = (pair[0] - 0.5).ceil().max(0.0);
            let hi = (pair[1] - 0.5).ceil().min(width as f64);
            let (lo, hi) = (lo as isize, hi as isize);
            for c in lo.max(0)..hi {
                mask.set(r, c as usize, true);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bezier_midpoint_matches_de_casteljau() {
        let ctrl = [
            Point::new(0.0, 0.0),
            Point::new(0.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
        ];
        // 0.125·P0 + 0.375·P1 + 0.375·P2 + 0.125·P3
        let p = cubic_point(&ctrl, 0.5);
        assert!((p.x - 0.5).abs() < 1e-15 && (p.y - 0.75).abs() < 1e-15);
    }

    #[test]
    fn collinear_controls_stay_on_segment() {
        let side = [
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(3.0, 0.0),
        ];
        let region = BezierRegion {
            top: side,
            bottom: side,
        };
        let poly = bezier_to_polygon(&region, 7).unwrap();
        assert_eq!(poly.len(), 14);
        assert!(poly
            .vertices()
            .iter()
            .all(|p| p.y == 0.0 && (0.0..=3.0).contains(&p.x)));
    }

    #[test]
    fn two_samples_give_the_four_endpoints() {
        let region = BezierRegion {
            top: [
                Point::new(0.0, 0.0),
                Point::new(3.0, -2.0),
                Point::new(6.0, -2.0),
                Point::new(9.0, 0.0),
            ],
            bottom: [
                Point::new(0.0, 4.0),
                Point::new(3.0, 2.0),
                Point::new(6.0, 2.0),
                Point::new(9.0, 4.0),
            ],
        };
        let poly = bezier_to_polygon(&region, 2).unwrap();
        assert_eq!(
            poly.vertices(),
            &[
                Point::new(0.0, 0.0),
                Point::new(9.0, 0.0),
                Point::new(9.0, 4.0),
                Point::new(0.0, 4.0)
            ]
        );
        assert!(bezier_to_polygon(&region, 1).is_err());
    }

    /// Direct even-odd crossing test at one point.
    fn contains(poly: &Polygon, x: f64, y: f64) -> bool {
        poly.edges()
            .filter(|(a, b)| (a.y <= y) != (b.y <= y))
            .filter(|(a, b)| a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y) > x)
            .count()
            % 2
            == 1
    }

    #[test]
    fn rectangle_fills_expected_pixels() {
        let poly = Polygon::rect(0.0, 0.0, 4.0, 3.0);
        let m = rasterize_polygon(&poly, 8, 8);
        assert_eq!(m.area(), 12);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m.get(r, c), r < 3 && c < 4, "({r},{c})");
                assert_eq!(m.get(r, c), contains(&poly, c as f64 + 0.5, r as f64 + 0.5));
            }
        }
    }

    #[test]
    fn scanline_agrees_with_point_test_on_concave_shape() {
        let poly = Polygon::new(vec![
            Point::new(1.2, 0.7),
            Point::new(14.3, 2.1),
            Point::new(6.0, 6.5),
            Point::new(13.9, 13.2),
            Point::new(-3.0, 11.0),
        ]);
        let m = rasterize_polygon(&poly, 12, 12);
        for r in 0..12 {
            for c in 0..12 {
                assert_eq!(m.get(r, c), contains(&poly, c as f64 + 0.5, r as f64 + 0.5));
            }
        }
    }

    #[test]
    fn degenerate_polygons_are_empty() {
        let flat = Polygon::new(vec![
            Point::new(0.0, 2.0),
            Point::new(5.0, 2.0),
            Point::new(9.0, 2.0),
        ]);
        assert!(rasterize_polygon(&flat, 6, 10).is_empty());
        let two = Polygon::new(vec![Point::new(0.0, 0.0), Point::new(4.0, 4.0)]);
        assert!(rasterize_polygon(&two, 6, 6).is_empty());
    }

    #[test]
    fn covering_polygon_sets_everything() {
        let m = rasterize_polygon(&Polygon::rect(-5.0, -5.0, 20.0, 20.0), 7, 9);
        assert_eq!(m.area(), 63);
    }
}
