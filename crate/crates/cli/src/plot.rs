//! Minimal log-log line charts rendered as standalone SVG.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct LogLogChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    /// Log10 range padded out to whole decades when the data span is narrow.
    fn fit(values: impl Iterator<Item = f64>) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v.log10());
            hi = hi.max(v.log10());
        }
        if !lo.is_finite() {
            return Axis { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1.0 {
            let mid = 0.5 * (lo + hi);
            lo = mid - 0.5;
            hi = mid + 0.5;
        }
        Axis { lo: lo - 0.05 * (hi - lo), hi: hi + 0.05 * (hi - lo) }
    }

    fn scale(&self, v: f64, from: f64, to: f64) -> f64 {
        from + (v.log10() - self.lo) / (self.hi - self.lo) * (to - from)
    }

    /// 1-2-5 ticks inside the range.
    fn ticks(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for e in self.lo.floor() as i32..=self.hi.ceil() as i32 {
            for m in [1.0, 2.0, 5.0] {
                let v = m * 10f64.powi(e);
                let l = v.log10();
                if l >= self.lo && l <= self.hi {
                    out.push(v);
                }
            }
        }
        out
    }
}

fn tick_label(v: f64) -> String {
    if (1e-3..1e5).contains(&v) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.0e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LogLogChart {
    /// Points with a nonpositive coordinate cannot be drawn on log axes and
    /// are skipped.
    pub fn to_svg(&self) -> String {
        let visible: Vec<Vec<(f64, f64)>> = self
            .series
            .iter()
            .map(|s| s.points.iter().copied().filter(|&(x, y)| x > 0.0 && y > 0.0).collect())
            .collect();
        let x_axis = Axis::fit(visible.iter().flatten().map(|p| p.0));
        let y_axis = Axis::fit(visible.iter().flatten().map(|p| p.1));
        let (x0, x1) = (LEFT, WIDTH - RIGHT);
        let (y0, y1) = (HEIGHT - BOTTOM, TOP);

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            (x0 + x1) / 2.0,
            escape(&self.title)
        );
        for v in x_axis.ticks() {
            let x = x_axis.scale(v, x0, x1);
            let _ = writeln!(svg, r##"<line x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{y0}" stroke="#e0e0e0"/>"##);
            let _ = writeln!(
                svg,
                r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
                y0 + 16.0,
                tick_label(v)
            );
        }
        for v in y_axis.ticks() {
            let y = y_axis.scale(v, y0, y1);
            let _ = writeln!(svg, r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#e0e0e0"/>"##);
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                y + 4.0,
                tick_label(v)
            );
        }
        let _ = writeln!(
            svg,
            r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y0 - y1
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 18.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="20" y="{0}" text-anchor="middle" transform="rotate(-90 20 {0})">{1}</text>"#,
            (y0 + y1) / 2.0,
            escape(&self.y_label)
        );

        for (i, (series, pts)) in self.series.iter().zip(&visible).enumerate() {
            let color = COLORS[i % COLORS.len()];
            let coords: Vec<String> = pts
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", x_axis.scale(x, x0, x1), y_axis.scale(y, y0, y1)))
                .collect();
            if coords.len() > 1 {
                let _ = writeln!(
                    svg,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    coords.join(" ")
                );
            }
            for c in &coords {
                let (cx, cy) = c.split_once(',').expect("formatted pair");
                let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
            let ly = y1 + 16.0 + 20.0 * i as f64;
            let _ = writeln!(
                svg,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
                x1 + 12.0,
                x1 + 36.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}">{}</text>"#,
                x1 + 42.0,
                ly + 4.0,
                escape(&series.label)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_series_and_skips_nonpositive_points() {
        let chart = LogLogChart {
            title: "risk <n>".into(),
            x_label: "n".into(),
            y_label: "excess risk".into(),
            series: vec![
                Series { label: "a".into(), points: vec![(500.0, 1.0), (1000.0, 0.5), (2000.0, 0.25)] },
                Series { label: "b".into(), points: vec![(500.0, -1.0), (1000.0, 2.0)] },
            ],
        };
        let svg = chart.to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.contains("risk &lt;n&gt;"));
    }

    #[test]
    fn ticks_stay_in_range() {
        let axis = Axis::fit([0.03, 40.0].into_iter());
        let ticks = axis.ticks();
        assert!(ticks.contains(&0.1) && ticks.contains(&10.0));
        for t in ticks {
            let x = axis.scale(t, 0.0, 1.0);
            assert!((0.0..=1.0).contains(&x));
        }
    }
}
