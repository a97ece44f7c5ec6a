//! SVG rendering of a window: observed tracks, ground-truth futures,
//! sampled futures colored by group, and convex hulls around groups.
//! Hand-rolled SVG keeps the output diffable and dependency-free.

use crate::grouping::GroupPartition;
use crate::numerics::Array;
use crate::trajectories::TrajectoryWindow;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#e377c2", "#8c564b",
    "#bcbd22", "#7f7f7f",
];

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 540.0;
const MARGIN: f64 = 40.0;

struct Mapper {
    min_x: f64,
    min_y: f64,
    scale: f64,
}

impl Mapper {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Mapper {
        let mut min_x = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for (x, y) in points {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
        if !min_x.is_finite() {
            (min_x, max_x, min_y, max_y) = (0.0, 1.0, 0.0, 1.0);
        }
        let span_x = (max_x - min_x).max(1e-6);
        let span_y = (max_y - min_y).max(1e-6);
        let scale = ((WIDTH - 2.0 * MARGIN) / span_x).min((HEIGHT - 2.0 * MARGIN) / span_y);
        Mapper { min_x, min_y, scale }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (
            MARGIN + (x - self.min_x) * self.scale,
            // world y grows upward, svg y grows downward
            HEIGHT - MARGIN - (y - self.min_y) * self.scale,
        )
    }
}

fn polyline(m: &Mapper, pts: &[(f64, f64)], style: &str) -> String {
    let coords: Vec<String> = pts
        .iter()
        .map(|&(x, y)| {
            let (px, py) = m.map(x, y);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    format!("  <polyline points=\"{}\" {} />\n", coords.join(" "), style)
}

fn track_points(a: &Array, i: usize) -> Vec<(f64, f64)> {
    (0..a.shape()[1])
        .map(|t| (a.at3(i, t, 0), a.at3(i, t, 1)))
        .collect()
}

/// Andrew monotone chain; returns hull vertices in order.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().chain(pts.iter().rev().skip(1)) {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Render one window with its grouping and sampled futures.
pub fn render_window_svg(
    window: &TrajectoryWindow,
    partition: &GroupPartition,
    samples: &Array,
) -> String {
    let n = window.n();
    let (count, t_pred) = (samples.shape()[0], samples.shape()[2]);
    let sample_at = |s: usize, i: usize, t: usize, c: usize| -> f64 {
        samples.data()[(((s * n) + i) * t_pred + t) * 2 + c]
    };

    let all_points = (0..n)
        .flat_map(|i| track_points(&window.obs, i).into_iter())
        .chain((0..n).flat_map(|i| track_points(&window.fut, i).into_iter()))
        .chain((0..count).flat_map(|s| {
            (0..n).flat_map(move |i| (0..t_pred).map(move |t| (s, i, t)))
        })
        .map(|(s, i, t)| (sample_at(s, i, t, 0), sample_at(s, i, t, 1))));
    let m = Mapper::fit(all_points);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // group hulls around last observed member positions
    for (k, group) in partition.groups().iter().enumerate() {
        if group.len() < 2 {
            continue;
        }
        let color = PALETTE[k % PALETTE.len()];
        let t_last = window.t_obs() - 1;
        let pts: Vec<(f64, f64)> = group
            .iter()
            .map(|&i| (window.obs.at3(i, t_last, 0), window.obs.at3(i, t_last, 1)))
            .collect();
        let hull = convex_hull(pts);
        let coords: Vec<String> = hull
            .iter()
            .map(|&(x, y)| {
                let (px, py) = m.map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        if hull.len() >= 3 {
            svg.push_str(&format!(
                "  <polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.12\" stroke=\"{color}\" stroke-opacity=\"0.5\" stroke-width=\"1\"/>\n",
                coords.join(" ")
            ));
        } else if hull.len() == 2 {
            svg.push_str(&format!(
                "  <polyline points=\"{}\" stroke=\"{color}\" stroke-opacity=\"0.4\" stroke-width=\"10\" stroke-linecap=\"round\" fill=\"none\"/>\n",
                coords.join(" ")
            ));
        }
    }

    // sampled futures, faint, colored by group
    for s in 0..count {
        for i in 0..n {
            let color = PALETTE[partition.member_of(i) % PALETTE.len()];
            let mut pts = vec![(
                window.obs.at3(i, window.t_obs() - 1, 0),
                window.obs.at3(i, window.t_obs() - 1, 1),
            )];
            pts.extend((0..t_pred).map(|t| (sample_at(s, i, t, 0), sample_at(s, i, t, 1))));
            svg.push_str(&polyline(
                &m,
                &pts,
                &format!("stroke=\"{color}\" stroke-width=\"0.8\" stroke-opacity=\"0.25\" fill=\"none\""),
            ));
        }
    }

    // observed tracks (solid) and ground truth futures (dashed)
    for i in 0..n {
        let color = PALETTE[partition.member_of(i) % PALETTE.len()];
        svg.push_str(&polyline(
            &m,
            &track_points(&window.obs, i),
            &format!("stroke=\"{color}\" stroke-width=\"2\" fill=\"none\""),
        ));
        let mut gt = vec![(
            window.obs.at3(i, window.t_obs() - 1, 0),
            window.obs.at3(i, window.t_obs() - 1, 1),
        )];
        gt.extend(track_points(&window.fut, i));
        svg.push_str(&polyline(
            &m,
            &gt,
            "stroke=\"#333333\" stroke-width=\"1.5\" stroke-dasharray=\"5,4\" fill=\"none\"",
        ));
        let (px, py) = m.map(
            window.obs.at3(i, window.t_obs() - 1, 0),
            window.obs.at3(i, window.t_obs() - 1, 1),
        );
        svg.push_str(&format!(
            "  <circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3.5\" fill=\"{color}\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"#333\">{}</text>\n",
            px + 5.0,
            py - 5.0,
            window.ped_ids[i]
        ));
    }

    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{sample, GaussianField, SamplingMode};
    use crate::trajectories::{make_windows, RawRecord, Scene};

    #[test]
    fn renders_valid_svg_with_group_hulls() {
        let mut records = Vec::new();
        for f in 0..20i64 {
            for p in 0..4i64 {
                records.push(RawRecord {
                    frame: f,
                    ped: p + 1,
                    x: f as f64 * 0.4 + (p % 2) as f64 * 0.4,
                    y: (p / 2) as f64 * 4.0 + (p % 2) as f64 * 0.5,
                });
            }
        }
        let scene = Scene::from_records(&records).unwrap();
        let w = &make_windows(&scene, 8, 12, 1).unwrap()[0];
        let part = GroupPartition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let mut raw = Array::zeros(&[4, 12, 5]);
        for i in 0..4 {
            for t in 0..12 {
                raw.set3(i, t, 0, 0.4);
                raw.set3(i, t, 2, -2.0);
                raw.set3(i, t, 3, -2.0);
            }
        }
        let field = GaussianField::new(raw).unwrap();
        let samples = sample(
            &field,
            SamplingMode::GroupLevel,
            &part,
            &w.last_positions(),
            1,
            5,
        )
        .unwrap();
        let svg = render_window_svg(w, &part, &samples);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("<polyline"));
        // two 2-member groups render as thick hull segments
        assert!(svg.matches("stroke-linecap=\"round\"").count() == 2);
        // deterministic output
        let svg2 = render_window_svg(w, &part, &samples);
        assert_eq!(svg, svg2);
    }

    #[test]
    fn hull_of_triangle_has_three_vertices() {
        let hull = convex_hull(vec![(0.0, 0.0), (2.0, 0.0), (1.0, 1.5), (1.0, 0.5)]);
        assert_eq!(hull.len(), 3);
    }
}
