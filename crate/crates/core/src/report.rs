//! Report tables (CSV with a JSON mirror) and hand-emitted SVG line plots.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::io::write_file;

/// Marker written when a rank correlation is undefined.
pub const UNDEFINED: &str = "undefined";

/// One cross-dataset row: a metric summarised over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossRow {
    pub measure: String,
    pub iod: String,
    pub ood: String,
    pub metric: String,
    pub mean: f64,
    pub std: Option<f64>,
}

/// Mean confidence at one perturbation magnitude for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub measure: String,
    pub perturbation: String,
    pub seed: u64,
    pub magnitude: f64,
    pub gamma: f64,
}

/// Spearman correlation between perturbation strength and `Γ` for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub measure: String,
    pub perturbation: String,
    pub seed: u64,
    #[serde(serialize_with = "ser_rank", deserialize_with = "de_rank")]
    pub r_s: Option<f64>,
}

fn ser_rank<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str(UNDEFINED),
    }
}

fn de_rank<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(x) => Ok(Some(x)),
        Raw::Text(t) if t == UNDEFINED => Ok(None),
        // CSV hands every field over as text
        Raw::Text(t) => t.parse().map(Some).map_err(serde::de::Error::custom),
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Artifact(format!("csv: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::Artifact(format!("csv: {e}")))
}

pub fn from_csv<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Artifact(format!("csv: {e}")))
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("reports serialize");
    out.push(b'\n');
    out
}

/// Writes `<stem>.csv` and `<stem>.json` holding the same rows.
pub fn write_table<T: Serialize>(dir: &Path, stem: &str, rows: &[T]) -> Result<()> {
    write_file(&dir.join(format!("{stem}.csv")), &to_csv(rows)?)?;
    write_file(&dir.join(format!("{stem}.json")), &to_json(&rows))
}

pub struct Series {
    pub label: String,
    pub ys: Vec<f64>,
}

const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];
const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

/// Line plot of several series over shared x values. Coordinates are printed
/// with two decimals, so output depends only on the data.
pub fn line_plot(title: &str, x_label: &str, xs: &[f64], series: &[Series]) -> Result<String> {
    if xs.len() < 2 || series.iter().any(|s| s.ys.len() != xs.len()) {
        return Err(Error::dim("plot needs >= 2 points and equal-length series"));
    }
    let finite = |v: &&f64| v.is_finite();
    let (x0, x1) = bounds(xs.iter().filter(finite));
    let (mut y0, mut y1) = bounds(series.iter().flat_map(|s| s.ys.iter()).filter(finite));
    y0 = y0.min(0.0);
    y1 = y1.max(1.0);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0).max(f64::MIN_POSITIVE) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| {
        HEIGHT - MARGIN - (y - y0) / (y1 - y0).max(f64::MIN_POSITIVE) * (HEIGHT - 2.0 * MARGIN)
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    // axes
    let (ax, ay) = (MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<polyline points="{ax:.2},{:.2} {ax:.2},{ay:.2} {:.2},{ay:.2}" fill="none" stroke="black"/>"#,
        MARGIN,
        WIDTH - MARGIN
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}" font-family="sans-serif" font-size="10">{v:.2}</text>"#,
            px(v),
            ay + 14.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.2}</text>"#,
            ax - 4.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(&ser.ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}" fill="{color}" font-family="sans-serif" font-size="11">{}</text>"#,
            WIDTH - MARGIN + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn bounds<'a>(vals: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
