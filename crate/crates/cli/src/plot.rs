//! SVG segmentation timelines: ground truth above, prediction below, one
//! colored rect per segment.

use anyhow::{bail, Result};
use skelseg::metrics::{hungarian_match, segments};

const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
    "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac", "#2f4b7c", "#a05195",
];

const WIDTH: f64 = 1000.0;
const BAR_HEIGHT: f64 = 40.0;

fn color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

fn bar_rects(out: &mut String, labels: &[usize], y: f64, total: usize) {
    for run in segments(labels) {
        let x = run.start as f64 / total as f64 * WIDTH;
        let w = (run.end - run.start) as f64 / total as f64 * WIDTH;
        out.push_str(&format!(
            "  <rect x=\"{x:.2}\" y=\"{y}\" width=\"{w:.2}\" height=\"{BAR_HEIGHT}\" fill=\"{}\"/>\n",
            color(run.label)
        ));
    }
}

/// Render the two timelines. Prediction clusters are recolored through a
/// per-sequence Hungarian match so corresponding actions share a color.
pub fn render(pred: &[usize], gt: &[usize]) -> Result<String> {
    if pred.len() != gt.len() {
        bail!(
            "label arrays differ in length: {} vs {}",
            pred.len(),
            gt.len()
        );
    }
    if pred.is_empty() {
        bail!("empty label arrays");
    }
    let k_pred = pred.iter().copied().max().unwrap() + 1;
    let k_gt = gt.iter().copied().max().unwrap() + 1;
    let mapping = hungarian_match(
        std::slice::from_ref(&pred.to_vec()),
        std::slice::from_ref(&gt.to_vec()),
        k_pred,
        k_gt,
    )
    .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    let mapped = mapping.apply(pred, k_gt);

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"120\" viewBox=\"0 0 {WIDTH} 120\">\n"
    ));
    svg.push_str("  <!-- ground truth (top), prediction (bottom) -->\n");
    bar_rects(&mut svg, gt, 10.0, gt.len());
    bar_rects(&mut svg, &mapped, 65.0, mapped.len());
    svg.push_str("</svg>\n");
    Ok(svg)
}
