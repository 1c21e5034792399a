//! Static figures: Hinton-style prediction grids and vote grids as SVG, and
//! prediction grids as PPM rasters.
//!
//! In a prediction grid each cell holds a square colored by its most likely
//! class whose area is proportional to that class's confidence.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::PredictionGrid;
use crate::occlusion::Position;
use crate::vote::VoteGrid;

/// Ten well-separated class colors.
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub const ABSTAIN_COLOR: &str = "#e8e8e8";
const HATCH_COLOR: &str = "#00a000";
const LEGEND_WIDTH: usize = 130;
const LEGEND_ROW: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    /// Side of one grid cell in SVG user units (pixels in rasters).
    pub cell: usize,
    pub palette: Vec<String>,
    pub abstain_color: String,
    /// Patch position whose fully covering windows are hatched.
    pub highlight: Option<Position>,
    pub legend: bool,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            cell: 16,
            palette: PALETTE.iter().map(|s| s.to_string()).collect(),
            abstain_color: ABSTAIN_COLOR.into(),
            highlight: None,
            legend: true,
        }
    }
}

impl RenderSpec {
    fn color(&self, class: usize) -> Result<&str> {
        self.palette
            .get(class)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidConfig(format!("palette has no color for class {class}")))
    }

    fn check(&self, classes: usize) -> Result<()> {
        if self.cell == 0 {
            return Err(Error::InvalidConfig("cell size must be positive".into()));
        }
        if self.palette.len() < classes {
            return Err(Error::InvalidConfig(format!(
                "palette has {} colors for {classes} classes",
                self.palette.len()
            )));
        }
        Ok(())
    }
}

fn svg_open(out: &mut String, width: usize, height: usize) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
}

fn legend(out: &mut String, x0: usize, entries: &[(String, &str, usize)]) {
    let _ = writeln!(out, r#"<g class="legend" font-family="monospace" font-size="11">"#);
    for (i, (label, color, count)) in entries.iter().enumerate() {
        let y = 4 + i * LEGEND_ROW;
        let _ = writeln!(
            out,
            r##"<rect x="{}" y="{y}" width="10" height="10" fill="{color}" stroke="#404040" stroke-width="0.5"/>"##,
            x0 + 8
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}">{label}: {count}</text>"#, x0 + 24, y + 9);
    }
    let _ = writeln!(out, "</g>");
}

/// Hinton diagram of a prediction grid.
pub fn render_prediction_grid(grid: &PredictionGrid, spec: &RenderSpec) -> Result<String> {
    spec.check(grid.classes)?;
    let (rows, cols, cell) = (grid.rows(), grid.cols(), spec.cell);
    let body_w = cols * cell;
    let legend_rows = grid.classes;
    let width = body_w + if spec.legend { LEGEND_WIDTH } else { 0 };
    let height = (rows * cell).max(if spec.legend { 8 + legend_rows * LEGEND_ROW } else { 0 });
    let mut out = String::new();
    svg_open(&mut out, width, height);
    let _ = writeln!(
        out,
        r##"<defs><pattern id="hatch" width="4" height="4" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><line x1="0" y1="0" x2="0" y2="4" stroke="{HATCH_COLOR}" stroke-width="1.5"/></pattern></defs>"##
    );
    let mut counts = vec![0usize; grid.classes];
    let _ = writeln!(out, r#"<g class="cells">"#);
    for r in 0..rows {
        for c in 0..cols {
            let k = grid.argmax(r, c);
            counts[k] += 1;
            let conf = f64::from(grid.cell(r, c)[k]).clamp(0.0, 1.0);
            let side = cell as f64 * conf.sqrt();
            let off = (cell as f64 - side) / 2.0;
            let (x, y) = ((c * cell) as f64 + off, (r * cell) as f64 + off);
            let _ = writeln!(
                out,
                r#"<rect class="conf" x="{x:.3}" y="{y:.3}" width="{side:.3}" height="{side:.3}" fill="{}"/>"#,
                spec.color(k)?
            );
        }
    }
    let _ = writeln!(out, "</g>");
    if let Some(p) = spec.highlight {
        let _ = writeln!(out, r#"<g class="hatch">"#);
        for r in grid.geometry.containing_rows(p.y) {
            for c in grid.geometry.containing_cols(p.x) {
                let _ = writeln!(
                    out,
                    r##"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="url(#hatch)" stroke="{HATCH_COLOR}" stroke-width="1"/>"##,
                    c * cell,
                    r * cell
                );
            }
        }
        let _ = writeln!(out, "</g>");
    }
    let _ = writeln!(
        out,
        r##"<rect x="0" y="0" width="{body_w}" height="{}" fill="none" stroke="#404040" stroke-width="1"/>"##,
        rows * cell
    );
    if spec.legend {
        let entries: Vec<(String, &str, usize)> = (0..grid.classes)
            .map(|k| Ok((format!("class {k}"), spec.color(k)?, counts[k])))
            .collect::<Result<_>>()?;
        legend(&mut out, body_w, &entries);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Vote grid: a full colored cell per vote, a neutral cell per abstention.
pub fn render_vote_grid(votes: &VoteGrid, classes: usize, spec: &RenderSpec) -> Result<String> {
    spec.check(classes)?;
    let cell = spec.cell;
    let body_w = votes.cols * cell;
    let width = body_w + if spec.legend { LEGEND_WIDTH } else { 0 };
    let height = (votes.rows * cell).max(if spec.legend { 8 + (classes + 1) * LEGEND_ROW } else { 0 });
    let mut out = String::new();
    svg_open(&mut out, width, height);
    let mut counts = vec![0usize; classes];
    let mut abstain = 0;
    let _ = writeln!(out, r##"<g class="votes" stroke="#ffffff" stroke-width="0.5">"##);
    for r in 0..votes.rows {
        for c in 0..votes.cols {
            let color = match votes.get(r, c) {
                Some(k) if k < classes => {
                    counts[k] += 1;
                    spec.color(k)?
                }
                Some(k) => return Err(Error::LabelOutOfRange { label: k, classes }),
                None => {
                    abstain += 1;
                    spec.abstain_color.as_str()
                }
            };
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="{color}"/>"#,
                c * cell,
                r * cell
            );
        }
    }
    let _ = writeln!(out, "</g>");
    if spec.legend {
        let mut entries: Vec<(String, &str, usize)> = (0..classes)
            .map(|k| Ok((format!("class {k}"), spec.color(k)?, counts[k])))
            .collect::<Result<_>>()?;
        entries.push(("abstain".into(), spec.abstain_color.as_str(), abstain));
        legend(&mut out, body_w, &entries);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn parse_hex(color: &str) -> Result<[u8; 3]> {
    let hex = color.strip_prefix('#').unwrap_or(color);
    let bad = || Error::InvalidConfig(format!("color {color:?} is not #rrggbb"));
    if hex.len() != 6 {
        return Err(bad());
    }
    let byte = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| bad());
    Ok([byte(0)?, byte(2)?, byte(4)?])
}

/// Binary PPM (P6) raster of the Hinton diagram, without legend or hatching.
pub fn render_prediction_grid_ppm(grid: &PredictionGrid, spec: &RenderSpec) -> Result<Vec<u8>> {
    spec.check(grid.classes)?;
    let cell = spec.cell;
    let (w, h) = (grid.cols() * cell, grid.rows() * cell);
    let mut px = vec![255u8; w * h * 3];
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            let k = grid.argmax(r, c);
            let rgb = parse_hex(spec.color(k)?)?;
            let conf = f64::from(grid.cell(r, c)[k]).clamp(0.0, 1.0);
            let side = (cell as f64 * conf.sqrt()).round() as usize;
            let off = (cell - side) / 2;
            for y in r * cell + off..r * cell + off + side {
                for x in c * cell + off..c * cell + off + side {
                    px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(px);
    Ok(out)
}
