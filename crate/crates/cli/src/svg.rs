use std::fmt::Write as _;

use tga_core::geometry::Polygon;

/// Golden-angle hue steps keep neighbouring group ids far apart in color.
fn group_color(group: usize) -> String {
    let hue = (group as f64 * 137.507_764) % 360.0;
    format!("hsl({hue:.1},70%,50%)")
}

/// Instance outlines filled with one color per group, on a white canvas of
/// the image's size.
pub fn group_overlay(
    width: usize,
    height: usize,
    polygons: &[&Polygon],
    groups: &[Vec<usize>],
) -> String {
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .expect("write to string");
    writeln!(
        out,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    )
    .expect("write to string");
    for (g, members) in groups.iter().enumerate() {
        let color = group_color(g);
        writeln!(
            out,
            r#"<g id="group-{g}" fill="{color}" fill-opacity="0.6" stroke="{color}">"#
        )
        .expect("write to string");
        for &i in members {
            let points: Vec<String> = polygons[i]
                .vertices()
                .iter()
                .map(|p| format!("{},{}", p.x, p.y))
                .collect();
            writeln!(
                out,
                r#"<polygon data-instance="{i}" points="{}"/>"#,
                points.join(" ")
            )
            .expect("write to string");
        }
        writeln!(out, "</g>").expect("write to string");
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_color_per_group() {
        let a = Polygon::rect(0.0, 0.0, 2.0, 2.0);
        let b = Polygon::rect(4.0, 0.0, 6.0, 2.0);
        let c = Polygon::rect(0.0, 4.0, 2.0, 6.0);
        let svg = group_overlay(8, 8, &[&a, &b, &c], &[vec![0, 2], vec![1]]);
        assert_eq!(svg.matches("<polygon").count(), 3);
        assert_eq!(svg.matches("<g id=").count(), 2);
        assert!(svg.contains(&format!(r#"fill="{}""#, group_color(0))));
        assert_ne!(group_color(0), group_color(1));
        let first = svg.find("group-0").unwrap();
        let second = svg.find("group-1").unwrap();
        let inst2 = svg.find(r#"data-instance="2""#).unwrap();
        assert!(first < inst2 && inst2 < second);
    }
}
