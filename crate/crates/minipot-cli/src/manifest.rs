//! Run manifest: a small plain-text record of what a subcommand did and
//! which files it produced, written alongside the outputs so a results
//! directory stays self-describing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct RunManifest {
    subcommand: String,
    settings: Vec<(String, String)>,
    outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(subcommand: &str) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            settings: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) {
        self.settings.push((key.to_string(), value.to_string()));
    }

    /// Record an output file (stored relative to the manifest's directory
    /// when possible, so the directory can be moved wholesale).
    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(&self, out_dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(out_dir)?;
        let mut buf = String::new();
        buf.push_str(&format!("subcommand {}\n", self.subcommand));
        for (k, v) in &self.settings {
            buf.push_str(&format!("{k} {v}\n"));
        }
        for p in &self.outputs {
            let shown = p.strip_prefix(out_dir).unwrap_or(p);
            buf.push_str(&format!("output {}\n", shown.display()));
        }
        let mut f = fs::File::create(out_dir.join("manifest.txt"))?;
        f.write_all(buf.as_bytes())?;
        Ok(())
    }
}
