//! Precision-recall curves rendered as a standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::PrCurve;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 24.0;
const MARGIN_BOTTOM: f64 = 56.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Legend text for one curve.
pub fn legend_label(label: &str, ap: f64) -> String {
    format!("{label} (AP={ap:.4})")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn px(recall: f64, precision: f64) -> (f64, f64) {
    let w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    (
        MARGIN_LEFT + recall.clamp(0.0, 1.0) * w,
        MARGIN_TOP + (1.0 - precision.clamp(0.0, 1.0)) * h,
    )
}

/// Overlays the curves on recall/precision axes spanning [0,1]², one
/// `<polyline>` per curve, with AP in the legend.
pub fn render_pr_svg(curves: &[(String, PrCurve)]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::InvalidArgument("at least one PR curve is required".into()));
    }
    let mut s = String::new();
    let w = |s: &mut String, text: std::fmt::Arguments<'_>| s.write_fmt(text).expect("writing to a String");
    w(
        &mut s,
        format_args!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        ),
    );
    w(
        &mut s,
        format_args!("<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"),
    );

    let (x0, y0) = px(0.0, 0.0);
    let (x1, y1) = px(1.0, 1.0);
    w(
        &mut s,
        format_args!("<g class=\"axes\" stroke=\"#444\" fill=\"none\">\n"),
    );
    w(
        &mut s,
        format_args!(
            "<rect x=\"{x0}\" y=\"{y1}\" width=\"{}\" height=\"{}\"/>\n",
            x1 - x0,
            y0 - y1
        ),
    );
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        let (gx, _) = px(t, 0.0);
        let (_, gy) = px(0.0, t);
        w(
            &mut s,
            format_args!("<line x1=\"{gx}\" y1=\"{y0}\" x2=\"{gx}\" y2=\"{}\"/>\n", y0 + 5.0),
        );
        w(
            &mut s,
            format_args!("<line x1=\"{}\" y1=\"{gy}\" x2=\"{x0}\" y2=\"{gy}\"/>\n", x0 - 5.0),
        );
    }
    w(&mut s, format_args!("</g>\n<g class=\"ticks\" fill=\"#222\">\n"));
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let (gx, _) = px(t, 0.0);
        let (_, gy) = px(0.0, t);
        w(
            &mut s,
            format_args!(
                "<text x=\"{gx}\" y=\"{}\" text-anchor=\"middle\">{t:.1}</text>\n",
                y0 + 20.0
            ),
        );
        w(
            &mut s,
            format_args!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t:.1}</text>\n",
                x0 - 8.0,
                gy + 4.0
            ),
        );
    }
    w(
        &mut s,
        format_args!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">Recall</text>\n",
            (x0 + x1) / 2.0,
            HEIGHT - 12.0
        ),
    );
    w(
        &mut s,
        format_args!(
            "<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">Precision</text>\n",
            (y0 + y1) / 2.0
        ),
    );
    w(&mut s, format_args!("</g>\n"));

    for (i, (label, curve)) in curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.recall, p.precision)).collect();
        // Points are stored by descending threshold, i.e. ascending recall;
        // anchor the curve at recall 0 with its first precision.
        if let Some(&(_, p)) = pts.first() {
            pts.insert(0, (0.0, p));
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|&(r, p)| {
                let (x, y) = px(r, p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        w(
            &mut s,
            format_args!(
                "<polyline class=\"curve\" data-label=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\n",
                escape(label),
                coords.join(" ")
            ),
        );
    }

    w(&mut s, format_args!("<g class=\"legend\">\n"));
    for (i, (label, curve)) in curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let ly = y0 - 12.0 - 18.0 * (curves.len() - 1 - i) as f64;
        let lx = x1 - 220.0;
        w(
            &mut s,
            format_args!(
                "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{colour}\" stroke-width=\"2\"/>\n",
                lx + 20.0
            ),
        );
        w(
            &mut s,
            format_args!(
                "<text x=\"{}\" y=\"{}\">{}</text>\n",
                lx + 26.0,
                ly + 4.0,
                escape(&legend_label(label, curve.ap))
            ),
        );
    }
    w(&mut s, format_args!("</g>\n</svg>\n"));
    Ok(s)
}

pub fn write_pr_svg(curves: &[(String, PrCurve)], path: &Path) -> Result<()> {
    let svg = render_pr_svg(curves)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::pr_curve;

    #[test]
    fn perfect_curve_legend() {
        let c = pr_curve(&[0.9f64, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        let svg = render_pr_svg(&[("ResUNet".into(), c)]).unwrap();
        assert!(svg.contains("ResUNet (AP=1.0000)"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn empty_list_rejected() {
        assert!(render_pr_svg(&[]).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let c = pr_curve(&[0.9f64, 0.1], &[1, 0]).unwrap();
        let svg = render_pr_svg(&[("a<b & c".into(), c)]).unwrap();
        assert!(svg.contains("a&lt;b &amp; c (AP=1.0000)"));
    }
}
