use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Result};
use serde_json::{Map, Value};

/// JSON-lines writer for flat metric records with a strictly increasing `step`.
pub struct JsonLinesSink<W: Write> {
    out: W,
    last_step: Option<u64>,
}

impl JsonLinesSink<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> JsonLinesSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, last_step: None }
    }

    /// Writes one record and flushes it.
    pub fn emit(&mut self, record: &Map<String, Value>) -> Result<()> {
        if record.is_empty() {
            bail!("empty metrics record");
        }
        if let Some((k, _)) = record.iter().find(|(_, v)| v.is_array() || v.is_object()) {
            bail!("metrics field `{k}` is not a scalar");
        }
        let Some(step) = record.get("step").and_then(Value::as_u64) else {
            bail!("metrics record needs a non-negative integer `step`");
        };
        if self.last_step.is_some_and(|last| step <= last) {
            bail!("metrics step {step} does not follow step {}", self.last_step.unwrap_or_default());
        }
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.last_step = Some(step);
        Ok(())
    }

    /// Serialises any flat struct and emits it.
    pub fn emit_value<T: serde::Serialize>(&mut self, record: &T) -> Result<()> {
        match serde_json::to_value(record)? {
            Value::Object(map) => self.emit(&map),
            _ => bail!("metrics record must serialise to an object"),
        }
    }

    #[cfg(test)]
    pub fn into_inner(self) -> W {
        self.out
    }
}
