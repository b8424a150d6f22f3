//! Run artifacts: CSV tables, small hand-written SVG figures and the JSON
//! run report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schemes::{tableau_json, Tableau};
use crate::training::EpochRecord;

pub const SCHEMA_VERSION: u32 = 1;

/// A rectangular table destined for a CSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Contract(format!(
                "row has {} fields, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Shortest round-trip formatting; `inf`/`NaN` spelled the way CSV readers
/// in most tools accept.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub fn epoch_table(records: &[EpochRecord]) -> Table {
    let mut t = Table::new([
        "epoch",
        "lr",
        "train_loss",
        "train_accuracy",
        "test_loss",
        "test_accuracy",
        "diverged",
    ]);
    for r in records {
        t.rows.push(vec![
            r.epoch.to_string(),
            num(r.lr),
            num(r.train_loss),
            num(r.train_accuracy),
            num(r.test_loss),
            num(r.test_accuracy),
            r.diverged.to_string(),
        ]);
    }
    t
}

// SVG primitives. Everything is laid out on a fixed canvas so the output is
// byte-for-byte reproducible.

const W: f64 = 640.0;
const H: f64 = 400.0;
const M_LEFT: f64 = 70.0;
const M_RIGHT: f64 = 20.0;
const M_TOP: f64 = 40.0;
const M_BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

#[derive(Clone, Copy, Debug)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        Axis { lo: lo - pad, hi: hi + pad, log }
    }

    /// Position in `[0, 1]`; non-finite values are pinned to the top.
    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.max(f64::MIN_POSITIVE).log10() } else { v };
        if !v.is_finite() {
            return 1.0;
        }
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn label(&self, f: f64) -> String {
        let v = self.lo + f * (self.hi - self.lo);
        if self.log {
            format!("1e{v:.1}")
        } else {
            format!("{v:.3}")
        }
    }
}

fn y_px(f: f64) -> f64 {
    H - M_BOTTOM - f * (H - M_TOP - M_BOTTOM)
}

fn x_px(f: f64) -> f64 {
    M_LEFT + f * (W - M_LEFT - M_RIGHT)
}

fn frame(s: &mut String, y: &Axis, x_label: &str, y_label: &str) {
    let _ = writeln!(
        s,
        r#"<rect x="{M_LEFT}" y="{M_TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - M_LEFT - M_RIGHT,
        H - M_TOP - M_BOTTOM
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            M_LEFT - 6.0,
            y_px(f) + 4.0,
            y.label(f)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

/// One vertical bar per label spanning `[lo, hi]`. Log axis when any value
/// is large.
pub fn range_bars(title: &str, labels: &[String], ranges: &[(f64, f64)], y_label: &str) -> Result<String> {
    if labels.len() != ranges.len() || labels.is_empty() {
        return Err(Error::Contract("range_bars needs one range per label".into()));
    }
    let log = ranges.iter().any(|r| r.1 > crate::diagnostics::LOG_SPREAD_THRESHOLD) && ranges.iter().all(|r| r.0 > 0.0);
    let y = Axis::fit(ranges.iter().flat_map(|r| [r.0, r.1]), log);
    let mut s = open(title);
    frame(&mut s, &y, "", y_label);
    let slot = 1.0 / labels.len() as f64;
    for (i, (label, &(lo, hi))) in labels.iter().zip(ranges).enumerate() {
        let (x0, x1) = (x_px((i as f64 + 0.25) * slot), x_px((i as f64 + 0.75) * slot));
        let (top, bottom) = (y_px(y.frac(hi)), y_px(y.frac(lo)));
        let _ = writeln!(
            s,
            r#"<rect x="{x0:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            x1 - x0,
            (bottom - top).max(1.0),
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            0.5 * (x0 + x1),
            H - M_BOTTOM + 16.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Named polylines over a shared x axis.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)], x_label: &str, y_label: &str) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Contract("line_chart needs at least one series".into()));
    }
    let x = Axis::fit(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)), false);
    let y = Axis::fit(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)), false);
    let mut s = open(title);
    frame(&mut s, &y, x_label, y_label);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x_px(f),
            H - M_BOTTOM + 16.0,
            x.label(f)
        );
    }
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = points
            .iter()
            .map(|&(px, py)| format!("{:.1},{:.1}", x_px(x.frac(px)), y_px(y.frac(py))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            M_LEFT + 8.0,
            M_TOP + 16.0 + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// One row of cells per label; `None` cells (diverged) are drawn dark red,
/// the rest shaded by value in `[0, 1]`.
pub fn heat_strip(title: &str, rows: &[(String, Vec<Option<f64>>)], columns: &[String]) -> Result<String> {
    if rows.is_empty() || rows.iter().any(|r| r.1.len() != columns.len()) || columns.is_empty() {
        return Err(Error::Contract("heat_strip needs one value per column in every row".into()));
    }
    let mut s = open(title);
    let cw = (W - M_LEFT - M_RIGHT) / columns.len() as f64;
    let rh = ((H - M_TOP - M_BOTTOM) / rows.len() as f64).min(40.0);
    for (j, c) in columns.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            M_LEFT + (j as f64 + 0.5) * cw,
            M_TOP + rh * rows.len() as f64 + 16.0,
            escape(c)
        );
    }
    for (i, (label, cells)) in rows.iter().enumerate() {
        let y = M_TOP + i as f64 * rh;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            M_LEFT - 6.0,
            y + 0.5 * rh + 4.0,
            escape(label)
        );
        for (j, cell) in cells.iter().enumerate() {
            let fill = match cell {
                None => "#7f0000".to_string(),
                Some(v) => {
                    let g = (255.0 - 155.0 * v.clamp(0.0, 1.0)).round() as u8;
                    format!("#{g:02x}{:02x}{g:02x}", 255 - (255 - g) / 3)
                }
            };
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{y:.1}" width="{cw:.1}" height="{rh:.1}" fill="{fill}" stroke="white"/>"#,
                M_LEFT + j as f64 * cw
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableauDigest {
    pub name: String,
    pub stages: usize,
    pub weight_sum: f64,
    /// CRC32 of the canonical JSON dump, hex.
    pub crc32: String,
}

impl TableauDigest {
    pub fn of(tableau: &Tableau) -> Result<Self> {
        let json = tableau_json(tableau)?;
        Ok(TableauDigest {
            name: tableau.name.clone(),
            stages: tableau.stage_count(),
            weight_sum: tableau.weight_sum(),
            crc32: format!("{:08x}", crc32fast::hash(json.as_bytes())),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub records: Vec<EpochRecord>,
    #[serde(default)]
    pub diagnostics: serde_json::Value,
    #[serde(default)]
    pub tableaux: Vec<TableauDigest>,
    pub wall_clock_seconds: f64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunReport {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            config,
            records: Vec::new(),
            diagnostics: serde_json::Value::Null,
            tableaux: Vec::new(),
            wall_clock_seconds: 0.0,
            artifacts: Vec::new(),
        }
    }

    /// Checks that every listed artifact exists under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "report schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for a in &self.artifacts {
            if !dir.join(a).is_file() {
                return Err(Error::Format(format!("report lists missing artifact `{a}`")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Single writer for an output directory. Records every file it writes so
/// the report can list them.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    written: Vec<String>,
}

impl ArtifactWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.record(name);
        Ok(path)
    }

    /// Marks a file written by someone else (checkpoints) as an artifact.
    pub fn record(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    /// Writes `report.json` listing everything written so far, then verifies
    /// it.
    pub fn finish(mut self, mut report: RunReport) -> Result<RunReport> {
        report.artifacts = self.written.clone();
        report.artifacts.push("report.json".into());
        let json = serde_json::to_vec_pretty(&report)?;
        self.write("report.json", &json)?;
        report.verify(&self.dir)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schemes::Tableau;

    #[test]
    fn csv_quotes_and_rejects_ragged_rows() {
        let mut t = Table::new(["a", "b"]);
        t.push(vec!["1".into(), "x,y".into()]).unwrap();
        assert!(t.push(vec!["1".into()]).is_err());
        assert_eq!(t.to_csv().unwrap(), "a,b\n1,\"x,y\"\n");
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 123456.789] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(f64::INFINITY), "inf");
    }

    #[test]
    fn svg_is_deterministic_and_well_formed() {
        let labels = vec!["euler".to_string(), "rk4".to_string()];
        let a = range_bars("spread", &labels, &[(1.0, 1e6), (2.0, 3.0)], "loss").unwrap();
        let b = range_bars("spread", &labels, &[(1.0, 1e6), (2.0, 3.0)], "loss").unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<rect").count(), 4);

        let line = line_chart("acc", &[("euler".into(), vec![(10.0, 0.9), (18.0, 0.95)])], "depth", "acc").unwrap();
        assert_eq!(line.matches("<circle").count(), 2);

        let heat = heat_strip("lr", &[("euler".into(), vec![Some(0.9), None])], &["0.1".into(), "0.2".into()]).unwrap();
        assert!(heat.contains("#7f0000"));
        assert!(heat_strip("lr", &[("e".into(), vec![None])], &["a".into(), "b".into()]).is_err());
    }

    #[test]
    fn escapes_markup_in_labels() {
        let s = line_chart("a<b", &[("x&y".into(), vec![(0.0, 0.0)])], "", "").unwrap();
        assert!(s.contains("a&lt;b") && s.contains("x&amp;y"));
    }

    #[test]
    fn report_lists_only_existing_files() {
        let dir = std::env::temp_dir().join(format!("rkstack-report-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let mut w = ArtifactWriter::create(&dir).unwrap();
        w.write("a.csv", b"x\n").unwrap();
        let mut report = RunReport::new("test", serde_json::json!({}));
        report.tableaux.push(TableauDigest::of(&Tableau::rk4()).unwrap());
        let report = w.finish(report).unwrap();
        assert_eq!(report.artifacts, vec!["a.csv", "report.json"]);
        let back = RunReport::load(&dir.join("report.json")).unwrap();
        assert_eq!(back, report);

        let mut broken = back.clone();
        broken.artifacts.push("missing.svg".into());
        assert!(broken.verify(&dir).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
