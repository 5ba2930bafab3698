//! Standalone SVG figures: heatmap, sampled vectors, stream (green) and
//! potential (red) isolines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{read_results, RunInfo, RUN_INFO_FILE};
use crate::error::{Error, Result};
use crate::flowfield::extract_isolines;
use crate::io::{read_field, read_frame, FieldGrids, Manifest};

/// Pixels of output per grid cell.
const CELL: f64 = 8.0;

fn ramp(t: f64) -> (u8, u8, u8) {
    // dark blue to pale yellow
    let stops = [(0.0, (20.0, 24.0, 82.0)), (0.5, (64.0, 140.0, 160.0)), (1.0, (250.0, 240.0, 170.0))];
    let t = t.clamp(0.0, 1.0);
    let (a, b) = if t <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let s = (t - a.0) / (b.0 - a.0);
    let mix = |x: f64, y: f64| (x + (y - x) * s).round() as u8;
    (mix(a.1 .0, b.1 .0), mix(a.1 .1, b.1 .1), mix(a.1 .2, b.1 .2))
}

/// A sampled vector in pixel coordinates, (column, row) and (u, v).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrow {
    pub at: [f64; 2],
    pub vel: [f64; 2],
}

/// Renders one layer's figure. `background` defaults to the speed of the field.
pub fn render_svg(background: Option<&Array2<f64>>, field: &FieldGrids, arrows: &[Arrow], n_iso: usize) -> String {
    let (rows, cols) = field.u.dim();
    let speed;
    let bg = match background {
        Some(b) => b,
        None => {
            speed = Array2::from_shape_fn((rows, cols), |(i, j)| field.u[[i, j]].hypot(field.v[[i, j]]));
            &speed
        }
    };
    let (w, h) = (cols as f64 * CELL, rows as f64 * CELL);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let lo = bg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = bg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let _ = writeln!(s, r#"<g class="heatmap" shape-rendering="crispEdges">"#);
    for ((i, j), v) in bg.indexed_iter() {
        let (r, g, b) = ramp(if v.is_finite() { (v - lo) / span } else { 0.0 });
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb({r},{g},{b})"/>"#,
            j as f64 * CELL,
            i as f64 * CELL
        );
    }
    let _ = writeln!(s, "</g>");

    let px = |p: &[f64; 2]| ((p[0] + 0.5) * CELL, (p[1] + 0.5) * CELL);
    for (class, grid, colour) in [("stream", &field.phi, "#1a9e3a"), ("potential", &field.psi, "#d62020")] {
        let _ = writeln!(s, r#"<g class="{class}" fill="none" stroke="{colour}" stroke-width="1.2">"#);
        for set in extract_isolines(grid, n_iso) {
            for line in &set.polylines {
                let pts: Vec<String> = line
                    .iter()
                    .map(|p| {
                        let (x, y) = px(p);
                        format!("{x:.2},{y:.2}")
                    })
                    .collect();
                let _ = writeln!(s, r#"<polyline points="{}"/>"#, pts.join(" "));
            }
        }
        let _ = writeln!(s, "</g>");
    }

    let vmax = arrows.iter().map(|a| a.vel[0].hypot(a.vel[1])).fold(0.0, f64::max);
    let _ = writeln!(s, r#"<g class="quiver" stroke="white" stroke-width="1">"#);
    if vmax > 0.0 {
        let scale = 3.0 * CELL / vmax;
        for a in arrows {
            let len = a.vel[0].hypot(a.vel[1]);
            if len == 0.0 || !len.is_finite() {
                continue;
            }
            let (x0, y0) = px(&a.at);
            let (dx, dy) = (a.vel[0] * scale, a.vel[1] * scale);
            let (x1, y1) = (x0 + dx, y0 + dy);
            let (ux, uy) = (dx / (len * scale), dy / (len * scale));
            let head = 0.4 * CELL;
            let _ = writeln!(
                s,
                r#"<path d="M{x0:.2},{y0:.2} L{x1:.2},{y1:.2} M{:.2},{:.2} L{x1:.2},{y1:.2} L{:.2},{:.2}"/>"#,
                x1 - head * (ux - 0.5 * uy),
                y1 - head * (uy + 0.5 * ux),
                x1 - head * (ux + 0.5 * uy),
                y1 - head * (uy - 0.5 * ux),
            );
        }
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

fn read_arrows(path: &Path, layer: usize) -> Result<Vec<Arrow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format {
                kind: "samples",
                path: path.to_path_buf(),
                reason: format!("bad column {k}"),
            })
        };
        if num(4)? as usize == layer {
            out.push(Arrow {
                at: [num(0)?, num(1)?],
                vel: [num(2)?, num(3)?],
            });
        }
    }
    Ok(out)
}

/// One SVG per row of a `results.csv`; returns the written paths.
pub fn plot_results(results: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let base = results.parent().unwrap_or(Path::new("."));
    let rows = read_results(results)?;
    let info: Option<RunInfo> = fs::read_to_string(base.join(RUN_INFO_FILE))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let manifest_dir = info.as_ref().and_then(|i| i.manifest.parent().map(Path::to_path_buf));
    let n_iso = info.as_ref().map_or(12, |i| i.isolines);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for r in rows {
        let field = read_field(&base.join(&r.field_path))?;
        let arrows = read_arrows(&base.join(&r.samples_path), r.layer).unwrap_or_else(|e| {
            log::warn!("frame {}: no sample vectors: {e}", r.frame);
            Vec::new()
        });
        let temps = manifest_dir.as_ref().and_then(|d| {
            let m = Manifest {
                base_dir: d.clone(),
                records: Vec::new(),
            };
            read_frame(&m.resolve(Path::new(&r.frame_path))).ok()
        });
        let bg = temps.filter(|t| t.dim() == field.u.dim());
        let svg = render_svg(bg.as_ref(), &field, &arrows, n_iso);
        let path = out.join(format!("frame_{:04}_layer{}.svg", r.frame, r.layer));
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grids(u: f64, v: f64, rows: usize, cols: usize) -> FieldGrids {
        FieldGrids {
            u: Array2::from_elem((rows, cols), u),
            v: Array2::from_elem((rows, cols), v),
            phi: Array2::from_shape_fn((rows, cols), |(i, j)| u * i as f64 - v * j as f64),
            psi: Array2::from_shape_fn((rows, cols), |(i, j)| u * j as f64 + v * i as f64),
        }
    }

    #[test]
    fn uniform_field_has_parallel_stream_lines() {
        let g = grids(1.0, 0.0, 10, 12);
        let svg = render_svg(None, &g, &[], 4);
        assert!(svg.starts_with("<svg"));
        let stream = svg.split(r#"class="stream""#).nth(1).unwrap().split("</g>").next().unwrap();
        assert_eq!(stream.matches("<polyline").count(), 4);
        for line in stream.lines().filter(|l| l.contains("points")) {
            let ys: Vec<f64> = line
                .split('"')
                .nth(1)
                .unwrap()
                .split(' ')
                .map(|p| p.split(',').nth(1).unwrap().parse().unwrap())
                .collect();
            assert!(ys.iter().all(|y| (y - ys[0]).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_field_is_heatmap_only() {
        let g = grids(0.0, 0.0, 5, 6);
        let arrows = [Arrow {
            at: [1.0, 1.0],
            vel: [0.0, 0.0],
        }];
        let svg = render_svg(None, &g, &arrows, 4);
        assert_eq!(svg.matches("<rect").count(), 30);
        assert_eq!(svg.matches("<polyline").count(), 0);
        assert_eq!(svg.matches("<path").count(), 0);
    }

    #[test]
    fn arrows_are_drawn() {
        let g = grids(1.0, 1.0, 5, 6);
        let arrows = [
            Arrow {
                at: [1.0, 1.0],
                vel: [1.0, 0.0],
            },
            Arrow {
                at: [2.0, 3.0],
                vel: [0.0, -2.0],
            },
        ];
        assert_eq!(render_svg(None, &g, &arrows, 2).matches("<path").count(), 2);
    }

    #[test]
    fn missing_results_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(plot_results(&dir.path().join("results.csv"), dir.path()).is_err());
    }
}
