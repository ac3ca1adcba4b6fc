use std::fmt::Write as _;

use asrtts::harness::CSV_HEADER;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLOURS: [&str; 2] = ["#1f77b4", "#d62728"];

/// One named curve of (step, value) points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: &'static str,
    pub points: Vec<(f64, f64)>,
}

/// Extracts the train loss and dev TER curves. Errors carry 1-based line numbers.
pub fn parse_metrics(text: &str) -> Result<Vec<Series>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CSV_HEADER => {}
        _ => return Err("line 1: expected the metrics header".into()),
    }
    let mut loss = Vec::new();
    let mut ter = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(format!("line {n}: expected 7 fields, found {}", fields.len()));
        }
        let step: u64 = fields[0].parse().map_err(|_| format!("line {n}: bad step {:?}", fields[0]))?;
        let num = |k: usize| -> Result<Option<f64>, String> {
            let f = fields[k].trim();
            if f.is_empty() {
                Ok(None)
            } else {
                f.parse().map(Some).map_err(|_| format!("line {n}: bad number {f:?}"))
            }
        };
        match fields[1] {
            "train" => {
                if let Some(v) = num(2)? {
                    loss.push((step as f64, v));
                }
            }
            "eval" => {
                if let Some(v) = num(5)? {
                    ter.push((step as f64, v));
                }
                num(6)?;
            }
            other => return Err(format!("line {n}: unknown phase {other:?}")),
        }
    }
    Ok(vec![
        Series { name: "loss", points: loss },
        Series {
            name: "dev_ter",
            points: ter,
        },
    ])
}

/// Keeps every k-th point so at most `max_points` remain, always including the last.
pub fn downsample(series: Vec<Series>, max_points: usize) -> Vec<Series> {
    series
        .into_iter()
        .map(|s| {
            let n = s.points.len();
            if n <= max_points {
                return s;
            }
            let stride = n.div_ceil(max_points - 1);
            let mut points: Vec<_> = s.points.iter().copied().step_by(stride).collect();
            if points.last() != s.points.last() {
                points.push(s.points[n - 1]);
            }
            Series { name: s.name, points }
        })
        .collect()
}

pub fn render_csv(series: &[Series]) -> String {
    let mut out = String::from("series,step,value\n");
    for s in series {
        for (x, y) in &s.points {
            writeln!(out, "{},{x},{y}", s.name).expect("writing to a String");
        }
    }
    out
}

/// Each series is scaled to its own range; the legend gives the range.
pub fn render_svg(series: &[Series]) -> String {
    let mut out = String::new();
    let w = |out: &mut String, s: String| out.push_str(&s);
    w(
        &mut out,
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"),
    );
    w(&mut out, format!("<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"));
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    w(&mut out, format!("<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"));
    w(&mut out, format!("<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"));

    let steps = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (smin, smax) = bounds(steps);
    w(&mut out, format!("<text x=\"{x0}\" y=\"{}\" font-size=\"12\">{smin}</text>\n", y0 + 20.0));
    w(
        &mut out,
        format!("<text x=\"{x1}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{smax}</text>\n", y0 + 20.0),
    );
    w(
        &mut out,
        format!("<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">step</text>\n", (x0 + x1) / 2.0, y0 + 35.0),
    );

    for (i, s) in series.iter().filter(|s| !s.points.is_empty()).enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let (vmin, vmax) = bounds(s.points.iter().map(|p| p.1));
        let sx = |x: f64| x0 + (x - smin) / span(smin, smax) * (x1 - x0);
        let sy = |y: f64| y0 - (y - vmin) / span(vmin, vmax) * (y0 - y1);
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        w(
            &mut out,
            format!("<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n", pts.join(" ")),
        );
        w(
            &mut out,
            format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{colour}\">{} [{vmin:.4}, {vmax:.4}]</text>\n",
                x0 + 10.0,
                y1 - 20.0 + 14.0 * i as f64,
                s.name
            ),
        );
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold(None, |acc: Option<(f64, f64)>, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
    .unwrap_or((0.0, 1.0))
}

fn span(lo: f64, hi: f64) -> f64 {
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_number_reports_line() {
        let text = format!("{CSV_HEADER}\n1,train,0.5,0,1,,\n2,train,abc,0,1,,\n");
        let err = parse_metrics(&text).unwrap_err();
        assert!(err.starts_with("line 3"), "{err}");
    }

    #[test]
    fn downsample_keeps_ends() {
        let s = Series {
            name: "loss",
            points: (0..1000).map(|i| (i as f64, 1.0)).collect(),
        };
        let d = downsample(vec![s], 10);
        assert!(d[0].points.len() <= 11);
        assert_eq!(d[0].points[0].0, 0.0);
        assert_eq!(d[0].points.last().unwrap().0, 999.0);
    }
}
