//! Precision-recall line plots as standalone SVG.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(recall, precision)` pairs.
    pub points: Vec<(f64, f64)>,
}

/// One curve of an ablation CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvCurve {
    pub mode: String,
    pub seed: String,
    pub annotator: String,
    pub subset: String,
    pub points: Vec<(f64, f64)>,
}

/// Groups `mode,seed,annotator,subset,threshold,precision,recall` rows into
/// curves, keeping first-appearance order.
pub fn parse_pr_csv(text: &str) -> Result<Vec<CsvCurve>> {
    let bad = |line: usize, why: &str| Error::Format {
        kind: "pr csv",
        reason: format!("line {line}: {why}"),
    };
    let mut curves: Vec<CsvCurve> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(i + 1, "expected 7 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        let (precision, recall) = (num(f[5])?, num(f[6])?);
        let same = |c: &CsvCurve| {
            c.mode == f[0] && c.seed == f[1] && c.annotator == f[2] && c.subset == f[3]
        };
        match curves.iter_mut().find(|c| same(c)) {
            Some(c) => c.points.push((recall, precision)),
            None => curves.push(CsvCurve {
                mode: f[0].to_string(),
                seed: f[1].to_string(),
                annotator: f[2].to_string(),
                subset: f[3].to_string(),
                points: vec![(recall, precision)],
            }),
        }
    }
    Ok(curves)
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

pub fn render_pr(title: &str, series: &[Series]) -> String {
    let (w, h, m) = (480.0, 400.0, 50.0);
    let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
    let x = |r: f64| m + r.clamp(0.0, 1.0) * pw;
    let y = |p: f64| h - m - p.clamp(0.0, 1.0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="25" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for i in 0..=10 {
        let v = f64::from(i) / 10.0;
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#eee"/>"##,
            x(0.0),
            y(v),
            x(1.0),
            y(v)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#eee"/>"##,
            x(v),
            y(0.0),
            x(v),
            y(1.0)
        );
        if i % 2 == 0 {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.1}</text>"#,
                m - 5.0,
                y(v) + 3.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{v:.1}</text>"#,
                x(v),
                h - m + 15.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">recall</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">precision</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = ser.points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        let d: Vec<String> = pts
            .iter()
            .map(|&(r, p)| format!("{:.2},{:.2}", x(r), y(p)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            d.join(" ")
        );
        let ly = m + 15.0 + 15.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            w - m - 110.0,
            w - m - 90.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            w - m - 85.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_rows_into_curves() {
        let csv = "mode,seed,annotator,subset,threshold,precision,recall\nA,0,main,all_frames,0.1,0.5,1\nA,0,main,all_frames,0.9,1,0.5\nC,0,main,all_frames,0.2,0.6,1\n";
        let c = parse_pr_csv(csv).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].points, vec![(1.0, 0.5), (0.5, 1.0)]);
        assert!(parse_pr_csv("h\nA,0,main\n").is_err());
    }

    #[test]
    fn renders_one_polyline_per_series() {
        let s = render_pr(
            "a<b",
            &[
                Series {
                    label: "x".into(),
                    points: vec![(0.0, 1.0), (1.0, 0.5)],
                },
                Series {
                    label: "y".into(),
                    points: vec![(0.5, 0.5)],
                },
            ],
        );
        assert!(s.starts_with("<svg"));
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains("a&lt;b"));
    }
}
