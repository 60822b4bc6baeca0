//! Tabular output as CSV or JSON lines.
//!
//! Every file starts with a provenance header: a `#` comment line for CSV,
//! a `{"header": ...}` object for JSON lines.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    JsonLines,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::JsonLines => "jsonl",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json-lines" | "jsonl" => Ok(Format::JsonLines),
            other => Err(format!("unknown format {other:?} (csv or json-lines)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Provenance { config_hash: config_hash.into(), seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Empty,
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

/// Shortest round-trip float text; non-finite values as `inf`, `-inf`, `nan`.
fn float_text(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:?}")
    }
}

impl Cell {
    fn text(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => float_text(*v),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => Value::from(*v),
            Cell::Float(v) if v.is_finite() => Value::from(*v),
            Cell::Float(v) => Value::from(float_text(*v)),
            Cell::Text(s) => Value::from(s.clone()),
            Cell::Empty => Value::Null,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn render(&self, format: Format, prov: &Provenance) -> String {
        match format {
            Format::Csv => self.render_csv(prov),
            Format::JsonLines => self.render_json_lines(prov),
        }
    }

    fn render_csv(&self, prov: &Provenance) -> String {
        let mut out = format!(
            "# selenc {} config={} seed={}\n",
            env!("CARGO_PKG_VERSION"),
            prov.config_hash,
            prov.seed
        )
        .into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.columns).expect("write to memory");
            for row in &self.rows {
                w.write_record(row.iter().map(Cell::text)).expect("write to memory");
            }
            w.flush().expect("write to memory");
        }
        String::from_utf8(out).expect("utf-8")
    }

    fn render_json_lines(&self, prov: &Provenance) -> String {
        let header = serde_json::json!({
            "header": {
                "tool": "selenc",
                "version": env!("CARGO_PKG_VERSION"),
                "config": prov.config_hash,
                "seed": prov.seed,
            }
        });
        let mut out = header.to_string();
        out.push('\n');
        for row in &self.rows {
            let obj: Map<String, Value> =
                self.columns.iter().zip(row).map(|(c, v)| (c.clone(), v.json())).collect();
            out.push_str(&Value::Object(obj).to_string());
            out.push('\n');
        }
        out
    }

    /// Write to `dir/<stem>.<ext>` and return the path.
    pub fn write(&self, dir: &Path, stem: &str, format: Format, prov: &Provenance) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{stem}.{}", format.extension()));
        let mut f = std::fs::File::create(&path)?;
        f.write_all(self.render(format, prov).as_bytes())?;
        Ok(path)
    }
}
