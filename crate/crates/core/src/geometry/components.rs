use std::collections::VecDeque;

use super::{Mask, Point, Polygon};

/// Splits a binary map into 8-connected components, ordered by their first
/// pixel in row-major scan order.
pub fn extract_instances(binary: &Mask) -> Vec<Mask> {
    let (h, w) = binary.dims();
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !binary.bits()[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = Mask::empty(h, w);
        label[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            comp.set(r, c, true);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if binary.get_signed(nr, nc) {
                        let j = nr as usize * w + nc as usize;
                        if label[j] == usize::MAX {
                            label[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Traces the outer boundary of the component containing the first set
/// pixel of `mask`, walking along pixel edges.
///
/// Vertices sit on pixel corners, so rasterizing the returned polygon with
/// centre sampling reproduces the component with its holes filled.
/// Diagonal contacts are followed (8-connectivity). Returns an empty polygon
/// for an empty mask.
pub fn trace_outer_contour(mask: &Mask) -> Polygon {
    let Some((r0, c0)) = mask.pixels().next() else {
        return Polygon::default();
    };
    let inside = |x: f64, y: f64| mask.get_signed(y.floor() as isize, x.floor() as isize);
    let start = (c0 as i64, r0 as i64);
    // interior kept on the right-hand side (y grows downwards)
    let start_dir = (1i64, 0i64);
    let (mut pos, mut dir) = (start, start_dir);
    let mut verts = vec![Point::new(start.0 as f64, start.1 as f64)];
    loop {
        let (x, y) = (pos.0 as f64, pos.1 as f64);
        let (dx, dy) = (dir.0 as f64, dir.1 as f64);
        let ahead_left = inside(x + 0.5 * dx + 0.5 * dy, y + 0.5 * dy - 0.5 * dx);
        let ahead_right = inside(x + 0.5 * dx - 0.5 * dy, y + 0.5 * dy + 0.5 * dx);
        let next_dir = if ahead_left {
            (dir.1, -dir.0)
        } else if ahead_right {
            dir
        } else {
            (-dir.1, dir.0)
        };
        if next_dir != dir && pos != start {
            verts.push(Point::new(x, y));
        }
        dir = next_dir;
        // turning right at a corner pivots in place; only straight/left moves
        if ahead_left || ahead_right {
            pos = (pos.0 + dir.0, pos.1 + dir.1);
        }
        if pos == start && dir == start_dir {
            break;
        }
    }
    Polygon::new(verts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize_polygon;

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask::from_fn(h, w, |r, c| rows[r].as_bytes()[c] == b'#')
    }

    #[test]
    fn empty_map_has_no_components() {
        assert!(extract_instances(&Mask::empty(4, 4)).is_empty());
    }

    #[test]
    fn two_blobs_are_separate() {
        let m = mask_from(&["##...", "##...", ".....", "...##", "...##"]);
        let comps = extract_instances(&m);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].area(), 4);
        assert!(comps[0].get(0, 0));
        assert!(comps[1].get(4, 4));
    }

    /// Reference flood fill that only steps across a diagonal.
    #[test]
    fn diagonal_contact_joins_components() {
        let m = mask_from(&["#.", ".#"]);
        let comps = extract_instances(&m);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].area(), 2);
    }

    #[test]
    fn components_partition_the_input() {
        let m = mask_from(&["#..#..#", ".#...#.", "...#...", "##....#"]);
        let comps = extract_instances(&m);
        let mut union = Mask::empty(4, 7);
        let mut total = 0;
        for c in &comps {
            assert_eq!(union.intersection_area(c).unwrap(), 0);
            union.union_with(c).unwrap();
            total += c.area();
        }
        assert_eq!(union, m);
        assert_eq!(total, m.area());
        // ordered by first pixel in scan order
        let firsts: Vec<_> = comps.iter().map(|c| c.pixels().next().unwrap()).collect();
        let mut sorted = firsts.clone();
        sorted.sort();
        assert_eq!(firsts, sorted);
    }

    #[test]
    fn contour_reproduces_component() {
        for rows in [
            &["###", "###"][..],
            &["#"][..],
            &[".##.", "####", ".#..", ".###"][..],
            &["#..", ".#.", "..#"][..],
            &["##.##", "#####", "#...#", "#####"][..],
            &["..#", "##.", "#.."][..],
        ] {
            let m = mask_from(rows);
            let poly = trace_outer_contour(&m);
            let back = rasterize_polygon(&poly, m.height(), m.width());
            let mut filled = m.clone();
            // holes are filled by an outer contour
            if rows.len() == 4 && rows[2] == "#...#" {
                for c in 1..4 {
                    filled.set(2, c, true);
                }
            }
            assert_eq!(back, filled, "{rows:?} -> {poly:?}");
        }
    }
}
