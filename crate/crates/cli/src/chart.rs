//! Minimal grouped-bar SVG rendering for run comparisons. Output is plain
//! static markup with deterministic bytes — suitable for committing next
//! to the CSVs it summarizes.

const PALETTE: [&str; 6] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
];

pub struct BarChart {
    pub title: String,
    pub y_label: String,
    /// X-axis group labels (one cluster of bars per group).
    pub groups: Vec<String>,
    /// (series label, one value per group).
    pub series: Vec<(String, Vec<f64>)>,
}

impl BarChart {
    pub fn render_svg(&self) -> String {
        let bar_w = 18.0;
        let bar_gap = 4.0;
        let group_gap = 26.0;
        let margin_left = 64.0;
        let margin_right = 24.0;
        let margin_top = 48.0;
        let margin_bottom = 56.0;
        let plot_h = 240.0;

        let n_series = self.series.len().max(1) as f64;
        let group_w = n_series * (bar_w + bar_gap) + group_gap;
        let plot_w = group_w * self.groups.len().max(1) as f64;
        let width = margin_left + plot_w + margin_right;
        let height = margin_top + plot_h + margin_bottom;

        let mut y_max = self
            .series
            .iter()
            .flat_map(|(_, vs)| vs.iter())
            .fold(0.0_f64, |m, &v| m.max(v));
        if y_max <= 0.0 {
            y_max = 1.0;
        }
        y_max *= 1.05;
        let scale = plot_h / y_max;

        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" \
             height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" \
             font-family=\"sans-serif\" font-size=\"11\">\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
            width / 2.0,
            escape(&self.title)
        ));
        svg.push_str(&format!(
            "  <text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" \
             transform=\"rotate(-90 14 {:.1})\">{}</text>\n",
            margin_top + plot_h / 2.0,
            margin_top + plot_h / 2.0,
            escape(&self.y_label)
        ));

        // Horizontal grid lines and y tick labels.
        for tick in 0..=4 {
            let v = y_max * tick as f64 / 4.0;
            let y = margin_top + plot_h - v * scale;
            svg.push_str(&format!(
                "  <line x1=\"{margin_left:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
                 stroke=\"#ddd\"/>\n",
                margin_left + plot_w
            ));
            svg.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
                margin_left - 6.0,
                y + 4.0
            ));
        }

        for (g, group) in self.groups.iter().enumerate() {
            let gx = margin_left + g as f64 * group_w + group_gap / 2.0;
            for (s, (_, values)) in self.series.iter().enumerate() {
                let v = values.get(g).copied().unwrap_or(0.0).max(0.0);
                let h = v * scale;
                let x = gx + s as f64 * (bar_w + bar_gap);
                let y = margin_top + plot_h - h;
                svg.push_str(&format!(
                    "  <rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" \
                     height=\"{h:.1}\" fill=\"{}\"/>\n",
                    PALETTE[s % PALETTE.len()]
                ));
            }
            let cx = gx + (n_series * (bar_w + bar_gap) - bar_gap) / 2.0;
            svg.push_str(&format!(
                "  <text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                margin_top + plot_h + 16.0,
                escape(group)
            ));
        }

        // Axis line and legend.
        svg.push_str(&format!(
            "  <line x1=\"{margin_left:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
             stroke=\"#333\"/>\n",
            margin_top + plot_h,
            margin_left + plot_w,
            margin_top + plot_h
        ));
        for (s, (label, _)) in self.series.iter().enumerate() {
            let y = margin_top + plot_h + 34.0 + 0.0;
            let x = margin_left + s as f64 * 140.0;
            svg.push_str(&format!(
                "  <rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
                y - 9.0,
                PALETTE[s % PALETTE.len()]
            ));
            svg.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{y:.1}\">{}</text>\n",
                x + 14.0,
                escape(label)
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
