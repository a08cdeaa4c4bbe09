//! Minimal standalone SVG line plots for metric trajectories.

/// One polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 48.0;
const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render series as a self-contained SVG document. Non-finite points are
/// dropped; with no drawable points the axes are still emitted.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &finite {
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if finite.is_empty() {
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let pad = (y_max - y_min) * 0.05;
    y_min -= pad;
    y_max += pad;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| MARGIN_TOP + plot_h - (y - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{l:.2}\" y1=\"{b:.2}\" x2=\"{r:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>\n",
        l = MARGIN_LEFT,
        r = WIDTH - MARGIN_RIGHT,
        b = MARGIN_TOP + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{l:.2}\" y1=\"{t:.2}\" x2=\"{l:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>\n",
        l = MARGIN_LEFT,
        t = MARGIN_TOP,
        b = MARGIN_TOP + plot_h
    ));

    // Ticks and labels.
    for i in 0..=4 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let px = sx(fx);
        svg.push_str(&format!(
            "<line x1=\"{px:.2}\" y1=\"{b:.2}\" x2=\"{px:.2}\" y2=\"{b2:.2}\" stroke=\"black\"/>\n",
            b = MARGIN_TOP + plot_h,
            b2 = MARGIN_TOP + plot_h + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{px:.2}\" y=\"{ty:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{v}</text>\n",
            ty = MARGIN_TOP + plot_h + 18.0,
            v = format_tick(fx)
        ));
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let py = sy(fy);
        svg.push_str(&format!(
            "<line x1=\"{x1:.2}\" y1=\"{py:.2}\" x2=\"{x2:.2}\" y2=\"{py:.2}\" stroke=\"black\"/>\n",
            x1 = MARGIN_LEFT - 5.0,
            x2 = MARGIN_LEFT
        ));
        svg.push_str(&format!(
            "<text x=\"{tx:.2}\" y=\"{typ:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v}</text>\n",
            tx = MARGIN_LEFT - 8.0,
            typ = py + 4.0,
            v = format_tick(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    ));

    // Series.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !pts.is_empty() {
            let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"{dash} points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        // Legend entry.
        let ly = MARGIN_TOP + 14.0 * i as f64;
        let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        svg.push_str(&format!(
            "<line x1=\"{x1:.2}\" y1=\"{ly:.2}\" x2=\"{x2:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"1.6\"{dash}/>\n",
            x1 = WIDTH - MARGIN_RIGHT - 150.0,
            x2 = WIDTH - MARGIN_RIGHT - 126.0,
        ));
        svg.push_str(&format!(
            "<text x=\"{tx:.2}\" y=\"{typ:.2}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>\n",
            tx = WIDTH - MARGIN_RIGHT - 120.0,
            typ = ly + 4.0,
            name = escape(&s.name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Tiny well-formedness check: every opened tag is closed or self-closed,
    /// in LIFO order.
    pub fn assert_well_formed_xml(text: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = text;
        while let Some(start) = rest.find('<') {
            let end = rest[start..].find('>').expect("unclosed angle bracket") + start;
            let tag = &rest[start + 1..end];
            rest = &rest[end + 1..];
            if let Some(name) = tag.strip_prefix('/') {
                let open = stack.pop().expect("closing tag with empty stack");
                assert_eq!(open, name.trim(), "mismatched closing tag");
            } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
                let name = tag.split_whitespace().next().unwrap().to_string();
                stack.push(name);
            }
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    #[test]
    fn empty_plot_still_draws_axes() {
        let svg = line_plot("empty", "x", "y", &[]);
        assert!(svg.contains("<line"));
        assert!(!svg.contains("polyline"));
        assert_well_formed_xml(&svg);
    }

    #[test]
    fn series_render_with_legend_and_nan_filtering() {
        let series = vec![
            Series {
                name: "run-a".into(),
                points: vec![(0.0, 0.5), (1.0, 0.6), (2.0, f64::NAN), (3.0, 0.7)],
                dashed: false,
            },
            Series {
                name: "run-b".into(),
                points: vec![(0.0, 0.1), (3.0, 0.2)],
                dashed: true,
            },
        ];
        let svg = line_plot("two runs", "step", "value", &series);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("run-a"));
        assert!(svg.contains("stroke-dasharray"));
        assert_well_formed_xml(&svg);
    }
}
