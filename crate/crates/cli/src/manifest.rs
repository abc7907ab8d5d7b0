use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use crate::args::DimArgs;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written next to every set of artifacts. Contains nothing time- or
/// host-dependent, so identical invocations give identical bytes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub version: &'static str,
    pub params: BTreeMap<&'static str, Value>,
    pub artifacts: Vec<String>,
    pub summary: BTreeMap<&'static str, Value>,
}

impl RunManifest {
    pub fn new(command: &'static str, dims: &DimArgs) -> Self {
        let mut params = BTreeMap::new();
        params.insert("seed", Value::from(dims.seed));
        params.insert("layers", Value::from(dims.layers));
        params.insert("steps", Value::from(dims.steps));
        params.insert("heads", Value::from(dims.heads));
        params.insert("dim", Value::from(dims.dim));
        params.insert("txt_tokens", Value::from(dims.txt_tokens));
        params.insert("img_tokens", Value::from(dims.img_tokens));
        RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            params,
            artifacts: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, key: &'static str, v: impl Into<Value>) -> &mut Self {
        self.params.insert(key, v.into());
        self
    }

    pub fn summary(&mut self, key: &'static str, v: impl Into<Value>) -> &mut Self {
        self.summary.insert(key, v.into());
        self
    }

    /// Writes `bytes` to `dir/name` and records the artifact.
    pub fn write_artifact(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    pub fn finish(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Floats go into the manifest as 17-digit strings, matching the CSVs.
pub fn num(v: f64) -> Value {
    Value::String(dcag_core::report::fmt_f64(v))
}
