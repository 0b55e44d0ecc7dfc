//! Record serialization: the CSV stream of per-iteration, per-agent rows,
//! and simple SVG line charts for eyeballing a run.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! a value back yields the identical bits and reruns diff byte-for-byte.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use crate::engine::IterationRecord;

pub const CSV_HEADER: &str = "k,agent_id,kind,power,base_load,price,P_G,P_D,\
social_welfare,imbalance,box_violation,rate_violation";

/// One row per agent per iteration, ordered by (k, agent id). Iteration
/// quantities (price, totals, welfare, imbalance) repeat on each row of
/// their iteration. Empty input yields just the header.
pub fn records_to_csv(records: &[IterationRecord]) -> String {
    let mut out = String::with_capacity(64 + records.len() * 96);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        for (id, a) in &r.agents {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.k,
                id,
                a.kind,
                a.power,
                a.base_load,
                r.price,
                r.p_g,
                r.p_d,
                r.social_welfare,
                r.imbalance(),
                a.box_violation,
                a.rate_violation
            )
            .expect("string write");
        }
    }
    out
}

pub fn write_csv(path: &Path, records: &[IterationRecord]) -> io::Result<()> {
    std::fs::write(path, records_to_csv(records))
}

/// A polyline broken wherever the iteration index jumps (an agent that left
/// and rejoined plots as separate strokes).
type Segments = Vec<Vec<(f64, f64)>>;

fn series_segments(points: impl Iterator<Item = (u64, f64)>) -> Segments {
    let mut segments: Segments = Vec::new();
    let mut prev_k: Option<u64> = None;
    for (k, y) in points {
        let contiguous = prev_k.is_some_and(|p| k == p + 1);
        if !contiguous || segments.is_empty() {
            segments.push(Vec::new());
        }
        segments.last_mut().expect("just pushed").push((k as f64, y));
        prev_k = Some(k);
    }
    segments
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const WIDTH: f64 = 840.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 78.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 46.0;

fn line_chart(title: &str, y_label: &str, series: &[(String, Segments)]) -> String {
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for (_, segs) in series {
        for seg in segs {
            for &(x, y) in seg {
                x_max = x_max.max(x);
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
        }
    }
    if y_min > y_max {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-12 {
        // Flat series: open a band around it so the line sits mid-chart.
        let pad = y_max.abs().max(1.0) * 0.05;
        y_min -= pad;
        y_max += pad;
    } else {
        let pad = (y_max - y_min) * 0.05;
        y_min -= pad;
        y_max += pad;
    }
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = move |x: f64| MARGIN_L + x / x_max * plot_w;
    let sy = move |y: f64| MARGIN_T + (y_max - y) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        MARGIN_L + plot_w / 2.0
    );
    // Axes and gridlines with value labels.
    for i in 0..=4 {
        let y = y_min + (y_max - y_min) * f64::from(i) / 4.0;
        let py = sy(y);
        let _ = write!(
            svg,
            "<line x1=\"{MARGIN_L}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" \
             stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{:.6}</text>\n",
            MARGIN_L + plot_w,
            MARGIN_L - 6.0,
            py + 4.0,
            y
        );
    }
    for i in 0..=4 {
        let x = x_max * f64::from(i) / 4.0;
        let px = sx(x);
        let _ = write!(
            svg,
            "<text x=\"{px:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{:.0}</text>\n",
            MARGIN_T + plot_h + 18.0,
            x
        );
    }
    let _ = write!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">iteration</text>\n\
         <text x=\"18\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.1})\">{y_label}</text>\n",
        MARGIN_T + plot_h,
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 10.0,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
    );
    for (i, (name, segs)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for seg in segs {
            if seg.is_empty() {
                continue;
            }
            let mut d = String::new();
            for (j, &(x, y)) in seg.iter().enumerate() {
                let _ = write!(
                    d,
                    "{}{:.2},{:.2}",
                    if j == 0 { "M" } else { " L" },
                    sx(x),
                    sy(y)
                );
            }
            let _ = write!(
                svg,
                "<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.4\"/>\n"
            );
        }
        let ly = MARGIN_T + 14.0 * i as f64;
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{name}</text>\n",
            MARGIN_L + plot_w + 10.0,
            MARGIN_L + plot_w + 30.0,
            MARGIN_L + plot_w + 36.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes generation.svg (per-generator power), demand.svg (per-consumer
/// demand including base load), and price.svg into `dir`.
pub fn write_plots(dir: &Path, records: &[IterationRecord]) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut ids = std::collections::BTreeSet::new();
    for r in records {
        ids.extend(r.agents.keys().copied());
    }
    let mut generation = Vec::new();
    let mut demand = Vec::new();
    for id in ids {
        let gen_pts = records.iter().filter_map(|r| {
            r.agents
                .get(&id)
                .filter(|a| a.kind == crate::agents::AgentKind::Generator)
                .map(|a| (r.k, a.power))
        });
        let segs = series_segments(gen_pts);
        if !segs.is_empty() {
            generation.push((format!("agent {id}"), segs));
        }
        let dem_pts = records.iter().filter_map(|r| {
            r.agents
                .get(&id)
                .filter(|a| a.kind == crate::agents::AgentKind::Consumer)
                .map(|a| (r.k, a.power + a.base_load))
        });
        let segs = series_segments(dem_pts);
        if !segs.is_empty() {
            demand.push((format!("agent {id}"), segs));
        }
    }
    let price = vec![(
        "price".to_string(),
        series_segments(records.iter().map(|r| (r.k, r.price))),
    )];
    std::fs::write(
        dir.join("generation.svg"),
        line_chart("Generated power", "W", &generation),
    )?;
    std::fs::write(
        dir.join("demand.svg"),
        line_chart("Demanded power", "W", &demand),
    )?;
    std::fs::write(dir.join("price.svg"), line_chart("Price", "$/W", &price))
}
