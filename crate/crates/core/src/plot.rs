//! SVG rendering of 2-D transport plans.
//!
//! Points are drawn as discs coloured by class (filled for source, hollow for
//! target); each plan entry becomes a segment whose opacity is the entry
//! divided by the largest entry of its panel. Entries below
//! [`SEGMENT_FLOOR`] are not drawn.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};

use crate::{Error, Result};

pub const SEGMENT_FLOOR: f64 = 1e-8;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
const PANEL: f64 = 320.0;
const MARGIN: f64 = 16.0;
const TITLE: f64 = 20.0;

pub fn class_colour(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

/// One panel: source and target points with a plan between them.
#[derive(Debug, Clone, Copy)]
pub struct PlanPanel<'a> {
    pub title: &'a str,
    pub source: ArrayView2<'a, f64>,
    pub source_labels: &'a [usize],
    pub target: ArrayView2<'a, f64>,
    pub target_labels: Option<&'a [usize]>,
    pub plan: ArrayView2<'a, f64>,
}

impl PlanPanel<'_> {
    fn validate(&self) -> Result<()> {
        if self.source.ncols() != 2 || self.target.ncols() != 2 {
            return Err(Error::DimensionMismatch("plots need 2-D points".into()));
        }
        if self.plan.dim() != (self.source.nrows(), self.target.nrows()) {
            return Err(Error::DimensionMismatch(format!(
                "plan {:?} vs {} source and {} target points",
                self.plan.dim(),
                self.source.nrows(),
                self.target.nrows()
            )));
        }
        if self.source_labels.len() != self.source.nrows() {
            return Err(Error::DimensionMismatch("source labels".into()));
        }
        if let Some(t) = self.target_labels {
            if t.len() != self.target.nrows() {
                return Err(Error::DimensionMismatch("target labels".into()));
            }
        }
        Ok(())
    }
}

/// Per-entry segment opacity: `entry / max`, or `None` below the floor.
pub fn segment_opacities(plan: ArrayView2<f64>) -> Array2<Option<f64>> {
    let max = plan.iter().cloned().fold(0.0, f64::max);
    plan.mapv(|v| if v < SEGMENT_FLOOR || max <= 0.0 { None } else { Some(v / max) })
}

struct Frame {
    min: [f64; 2],
    scale: f64,
}

impl Frame {
    fn new(panels: &[PlanPanel<'_>]) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in panels {
            for pts in [p.source, p.target] {
                for row in pts.rows() {
                    for k in 0..2 {
                        min[k] = min[k].min(row[k]);
                        max[k] = max[k].max(row[k]);
                    }
                }
            }
        }
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-12);
        Self { min, scale: (PANEL - 2.0 * MARGIN) / span }
    }

    fn map(&self, x: f64, y: f64, offset: f64) -> (f64, f64) {
        let px = offset + MARGIN + (x - self.min[0]) * self.scale;
        let py = TITLE + PANEL - MARGIN - (y - self.min[1]) * self.scale;
        (px, py)
    }
}

/// Render panels side by side with a shared coordinate frame.
pub fn render_plans_svg(panels: &[PlanPanel<'_>]) -> Result<String> {
    if panels.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    for p in panels {
        p.validate()?;
    }
    let frame = Frame::new(panels);
    let width = PANEL * panels.len() as f64;
    let height = PANEL + TITLE;
    let mut s = String::new();
    // Writing into a String cannot fail.
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (k, panel) in panels.iter().enumerate() {
        let offset = PANEL * k as f64;
        let _ = writeln!(s, r#"<g id="panel-{k}">"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="14" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            offset + PANEL / 2.0,
            escape(panel.title)
        );
        let opacities = segment_opacities(panel.plan);
        for ((i, j), o) in opacities.indexed_iter() {
            if let Some(o) = o {
                let (x1, y1) = frame.map(panel.source[[i, 0]], panel.source[[i, 1]], offset);
                let (x2, y2) = frame.map(panel.target[[j, 0]], panel.target[[j, 1]], offset);
                let _ = writeln!(
                    s,
                    r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="black" stroke-width="1" stroke-opacity="{o:.4}"/>"#
                );
            }
        }
        for (i, row) in panel.source.rows().into_iter().enumerate() {
            let (x, y) = frame.map(row[0], row[1], offset);
            let c = class_colour(panel.source_labels[i]);
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{c}"/>"#);
        }
        for (j, row) in panel.target.rows().into_iter().enumerate() {
            let (x, y) = frame.map(row[0], row[1], offset);
            let c = panel.target_labels.map_or("#555555", |t| class_colour(t[j]));
            let _ =
                writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="white" stroke="{c}" stroke-width="2"/>"#);
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
