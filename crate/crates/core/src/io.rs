//! Artifact persistence and CSV report emission.
//!
//! Floats are written with 17 significant digits so every saved value reads
//! back bit-identically. Datasets are CSV, everything else JSON. CSV files
//! use commas, a header row and LF line endings.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::anchors::TrainingTrace;
use crate::error::{Error, Result};
use crate::graph_layer::{GraphLayer, Network};
use crate::regions::{LabeledDataset, RegionSpec};
use crate::separators::{MarginReport, PatchSpec};
use crate::sufficiency::{CollisionReport, GapReport, SeparationReport};

/// Shortest fixed-width form that round-trips: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct RoundTripFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for RoundTripFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_array(writer)
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object(writer)
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object_value(writer)
    }
}

/// Pretty-printed JSON with round-trip float formatting and a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, RoundTripFormatter(PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .map_err(|e| Error::InvalidParameter(format!("cannot serialize: {e}")))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn from_json_str<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: match e.classify() {
            serde_json::error::Category::Eof => format!("file truncated: {e}"),
            _ => e.to_string(),
        },
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_string(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json_str(path, &read_text(path)?)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Dataset as CSV with columns `x_0..x_{p−1}, y, region, q_0..q_{K−1}`.
pub fn dataset_to_csv(data: &LabeledDataset) -> String {
    let p = data.dim();
    let k = data.num_classes();
    let mut header: Vec<String> = (0..p).map(|j| format!("x_{j}")).collect();
    header.push("y".into());
    header.push("region".into());
    header.extend((0..k).map(|c| format!("q_{c}")));
    let mut out = header.join(",");
    out.push('\n');
    let inputs = data.inputs();
    let q = data.true_conditionals();
    for i in 0..data.len() {
        let mut fields: Vec<String> = inputs.row(i).iter().map(|&v| fmt_f64(v)).collect();
        fields.push(data.labels()[i].to_string());
        fields.push(data.region_ids()[i].to_string());
        fields.extend(q.row(i).iter().map(|&v| fmt_f64(v)));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn dataset_from_csv(path: &Path, text: &str) -> Result<LabeledDataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header row".into()))?
        .split(',')
        .collect();
    let y_col = header
        .iter()
        .position(|&h| h == "y")
        .ok_or_else(|| parse_err(1, "missing field y".into()))?;
    if header.get(y_col + 1) != Some(&"region") {
        return Err(parse_err(1, "missing field region after y".into()));
    }
    let p = y_col;
    let k = header.len() - y_col - 2;
    for (j, h) in header[..p].iter().enumerate() {
        if *h != format!("x_{j}") {
            return Err(parse_err(1, format!("expected field x_{j}, found {h}")));
        }
    }
    for (c, h) in header[y_col + 2..].iter().enumerate() {
        if *h != format!("q_{c}") {
            return Err(parse_err(1, format!("expected field q_{c}, found {h}")));
        }
    }
    if k == 0 {
        return Err(parse_err(1, "missing field q_0".into()));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut region_ids = Vec::new();
    let mut conditionals = Vec::new();
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < header.len() {
            return Err(parse_err(line_no, format!("missing field {}", header[fields.len()])));
        }
        if fields.len() > header.len() {
            return Err(parse_err(line_no, format!("{} fields, expected {}", fields.len(), header.len())));
        }
        let float = |col: usize| -> Result<f64> {
            fields[col]
                .parse::<f64>()
                .map_err(|e| parse_err(line_no, format!("field {}: {e}", header[col])))
        };
        let int = |col: usize| -> Result<usize> {
            fields[col]
                .parse::<usize>()
                .map_err(|e| parse_err(line_no, format!("field {}: {e}", header[col])))
        };
        for col in 0..p {
            inputs.push(float(col)?);
        }
        labels.push(int(y_col)?);
        region_ids.push(int(y_col + 1)?);
        for col in y_col + 2..header.len() {
            conditionals.push(float(col)?);
        }
    }
    let n = labels.len();
    let inputs = Array2::from_shape_vec((n, p), inputs).expect("row lengths checked");
    let conditionals = Array2::from_shape_vec((n, k), conditionals).expect("row lengths checked");
    LabeledDataset::new(inputs, labels, region_ids, conditionals).map_err(|e| parse_err(0, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Dataset,
    Layer,
    Network,
    PatchSpec,
    RegionSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Dataset(LabeledDataset),
    Layer(GraphLayer),
    Network(Network),
    PatchSpec(PatchSpec),
    RegionSpec(RegionSpec),
}

impl Artifact {
    pub fn kind(&self) -> ArtifactKind {
        match self {
            Artifact::Dataset(_) => ArtifactKind::Dataset,
            Artifact::Layer(_) => ArtifactKind::Layer,
            Artifact::Network(_) => ArtifactKind::Network,
            Artifact::PatchSpec(_) => ArtifactKind::PatchSpec,
            Artifact::RegionSpec(_) => ArtifactKind::RegionSpec,
        }
    }

    pub fn to_text(&self) -> Result<String> {
        match self {
            Artifact::Dataset(d) => Ok(dataset_to_csv(d)),
            Artifact::Layer(l) => to_json_string(l),
            Artifact::Network(n) => to_json_string(n),
            Artifact::PatchSpec(s) => to_json_string(s),
            Artifact::RegionSpec(s) => to_json_string(s),
        }
    }
}

pub fn save_artifact(path: &Path, artifact: &Artifact) -> Result<()> {
    write_text(path, &artifact.to_text()?)
}

pub fn load_artifact(path: &Path, kind: ArtifactKind) -> Result<Artifact> {
    let text = read_text(path)?;
    Ok(match kind {
        ArtifactKind::Dataset => Artifact::Dataset(dataset_from_csv(path, &text)?),
        ArtifactKind::Layer => Artifact::Layer(from_json_str(path, &text)?),
        ArtifactKind::Network => Artifact::Network(from_json_str(path, &text)?),
        ArtifactKind::PatchSpec => Artifact::PatchSpec(from_json_str(path, &text)?),
        ArtifactKind::RegionSpec => Artifact::RegionSpec(from_json_str(path, &text)?),
    })
}

/// A named CSV table; written as `<name>.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(name: impl Into<String>, header: &[&str]) -> Self {
        CsvTable {
            name: name.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.header.join(","));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn gap_table(report: &GapReport) -> CsvTable {
    let mut t = CsvTable::new(
        "gap",
        &["l2_gap", "max_tv_gap", "noise_floor", "k", "n", "noise_floor_max_tv"],
    );
    t.push(vec![
        fmt_f64(report.l2_gap),
        fmt_f64(report.max_tv_gap),
        fmt_f64(report.noise_floor),
        report.k.to_string(),
        report.n.to_string(),
        fmt_f64(report.noise_floor_max_tv),
    ]);
    t
}

pub fn collision_table(report: &CollisionReport) -> CsvTable {
    let mut t = CsvTable::new(
        "collisions",
        &["tolerance", "colliding_pairs", "min_nonzero_distance"],
    );
    t.push(vec![
        fmt_f64(report.tolerance),
        report.pair_count.to_string(),
        opt_f64(report.min_nonzero_distance),
    ]);
    t
}

pub fn collision_pairs_table(report: &CollisionReport) -> CsvTable {
    let mut t = CsvTable::new("collision_pairs", &["i", "j"]);
    for &(i, j) in &report.pairs {
        t.push(vec![i.to_string(), j.to_string()]);
    }
    t
}

pub fn separation_table(report: &SeparationReport) -> CsvTable {
    let mut t = CsvTable::new(
        "separation",
        &["cross_region_collisions", "cross_region_pairs", "fraction"],
    );
    t.push(vec![
        report.cross_region_collisions.to_string(),
        report.cross_region_pairs.to_string(),
        fmt_f64(report.fraction),
    ]);
    t
}

pub fn margin_table(report: &MarginReport, name: impl Into<String>) -> CsvTable {
    let mut t = CsvTable::new(
        name,
        &["delta", "i", "j", "gap", "gamma", "empirical", "guaranteed", "relu_clipped"],
    );
    for p in &report.pairs {
        t.push(vec![
            fmt_f64(report.delta),
            p.i.to_string(),
            p.j.to_string(),
            fmt_f64(p.gap),
            fmt_f64(p.gamma),
            opt_f64(p.empirical),
            p.guaranteed.to_string(),
            p.relu_clipped.to_string(),
        ]);
    }
    t
}

/// One row per recorded epoch, starting with the initial state; flags are
/// `;`-separated names.
pub fn trace_table(trace: &TrainingTrace) -> CsvTable {
    let p = trace.bbox_min.first().map_or(0, Vec::len);
    let mut header: Vec<String> = vec!["epoch".into(), "loss".into(), "covering_radius".into()];
    header.extend((0..p).map(|j| format!("bbox_min_{j}")));
    header.extend((0..p).map(|j| format!("bbox_max_{j}")));
    header.push("max_step_displacement".into());
    header.push("flags".into());
    let mut t = CsvTable {
        name: "trace".into(),
        header,
        rows: Vec::new(),
    };
    for epoch in 0..trace.loss.len() {
        let mut row = vec![
            epoch.to_string(),
            fmt_f64(trace.loss[epoch]),
            fmt_f64(trace.covering_radius[epoch]),
        ];
        row.extend(trace.bbox_min[epoch].iter().map(|&v| fmt_f64(v)));
        row.extend(trace.bbox_max[epoch].iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(trace.max_step_displacement[epoch]));
        let flags: Vec<&str> = trace.flags_at(epoch).map(|f| f.kind.name()).collect();
        row.push(flags.join(";"));
        t.push(row);
    }
    t
}

/// Writes each table to `<dir>/<name>.csv`. An empty list writes nothing.
pub fn emit_reports(dir: &Path, tables: &[CsvTable]) -> Result<Vec<PathBuf>> {
    tables
        .iter()
        .map(|t| {
            let path = dir.join(format!("{}.csv", t.name));
            write_text(&path, &t.to_csv())?;
            Ok(path)
        })
        .collect()
}
