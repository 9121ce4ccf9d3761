//! CSV emission: every file carries a metadata comment line with the config
//! hash, then a header row. Formatting is deterministic (shortest
//! round-trip float rendering), so identical runs produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub struct CsvWriter {
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, config_hash: &str, header: &str) -> std::io::Result<CsvWriter> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "# config_hash={config_hash}")?;
        writeln!(out, "{header}")?;
        Ok(CsvWriter { out })
    }

    pub fn row(&mut self, fields: &[Field]) -> std::io::Result<()> {
        let rendered: Vec<String> = fields.iter().map(Field::render).collect();
        writeln!(self.out, "{}", rendered.join(","))
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

pub enum Field {
    Int(i64),
    UInt(u64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl Field {
    fn render(&self) -> String {
        match self {
            Field::Int(v) => v.to_string(),
            Field::UInt(v) => v.to_string(),
            Field::Float(v) => format!("{v}"),
            Field::Bool(v) => v.to_string(),
            Field::Str(v) => v.clone(),
        }
    }
}
