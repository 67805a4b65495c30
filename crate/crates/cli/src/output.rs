use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use maskforest::Scalar;
use serde::Serialize;
use serde_json::Value;

use crate::args::Format;

pub struct Sink {
    pub path: Option<PathBuf>,
    pub format: Option<Format>,
}

impl Sink {
    fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.path {
            Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    /// A single JSON document; CSV is refused.
    pub fn json(&self, value: &Value) -> Result<()> {
        if self.format == Some(Format::Csv) {
            bail!("this subcommand only writes JSON");
        }
        let mut w = self.writer()?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Rows as CSV with a header (default) or as a JSON array.
    pub fn rows<T: Serialize>(&self, rows: &[T]) -> Result<()> {
        if self.format == Some(Format::Json) {
            return self.json(&serde_json::to_value(rows)?);
        }
        let mut w = csv::Writer::from_writer(self.writer()?);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact scalars as `"p/q"` strings, reals as numbers.
pub fn scalar<S: Scalar>(v: &S) -> Value {
    if S::EXACT {
        Value::String(v.render())
    } else {
        serde_json::json!(v.to_real())
    }
}

/// Zero-based coordinates to the one-based convention of every output.
pub fn coords(v: &[usize]) -> Vec<usize> {
    v.iter().map(|j| j + 1).collect()
}

pub fn joined(v: &[usize]) -> String {
    v.iter().map(|j| (j + 1).to_string()).collect::<Vec<_>>().join(";")
}
