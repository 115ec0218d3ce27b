//! Output confinement, tabular formats and the run manifest.

use std::fs;
use std::path::{Component, Path, PathBuf};

use clap::ValueEnum;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use hyperdistill::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    JsonLines,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::JsonLines => "jsonl",
        }
    }
}

/// A table whose cells are already rendered; empty cells become `null` in
/// JSON lines and numeric-looking cells become numbers.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// Splits a CSV rendering with a header line.
    pub fn from_csv(csv: &str) -> Self {
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
        let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        Self { header, rows }
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => {
                let mut out = self.header.join(",");
                out.push('\n');
                for r in &self.rows {
                    out.push_str(&r.join(","));
                    out.push('\n');
                }
                out
            }
            Format::JsonLines => {
                let mut out = String::new();
                for r in &self.rows {
                    let mut obj = Map::new();
                    for (k, v) in self.header.iter().zip(r) {
                        obj.insert(k.clone(), cell(v));
                    }
                    out.push_str(&Value::Object(obj).to_string());
                    out.push('\n');
                }
                out
            }
        }
    }
}

fn cell(v: &str) -> Value {
    if v.is_empty() {
        return Value::Null;
    }
    if let Ok(i) = v.parse::<i64>() {
        return json!(i);
    }
    match v.parse::<f64>() {
        Ok(f) if f.is_finite() => json!(f),
        _ => json!(v),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files below one directory and records their digests.
pub struct OutDir {
    root: PathBuf,
    outputs: Vec<(String, String)>,
    inputs: Vec<(String, String)>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            outputs: Vec::new(),
            inputs: Vec::new(),
        })
    }

    /// `rel` must stay inside the output directory.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = Path::new(rel);
        let confined = !rel.is_empty()
            && path.components().all(|c| matches!(c, Component::Normal(_)));
        if !confined {
            return Err(Error::Config(format!("output path `{rel}` must be relative to --out-dir")));
        }
        let full = self.root.join(path);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&full, bytes)?;
        self.outputs.retain(|(p, _)| p != rel);
        self.outputs.push((rel.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn record_input(&mut self, label: &str, bytes: &[u8]) {
        self.inputs.push((label.to_string(), sha256_hex(bytes)));
    }

    /// Writes `run_manifest.json`, which lists every other output.
    pub fn finish(mut self, command: &str, seed: u64, config: &str) -> Result<()> {
        let files = |v: &[(String, String)]| -> Vec<Value> {
            v.iter().map(|(p, d)| json!({ "path": p, "sha256": d })).collect()
        };
        let mut outputs = self.outputs.clone();
        outputs.sort();
        let manifest = json!({
            "tool": "hyperdistill",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": seed,
            "config_sha256": sha256_hex(config.as_bytes()),
            "inputs": files(&self.inputs),
            "outputs": files(&outputs),
        });
        let text = serde_json::to_string_pretty(&manifest).expect("json values serialize") + "\n";
        self.write("run_manifest.json", text.as_bytes())
    }
}

/// Reads an input file, naming the flag that pointed at it on failure.
pub fn read_input(flag: &str, path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Config(format!("input `{flag}` ({}): {e}", path.display())))
}
