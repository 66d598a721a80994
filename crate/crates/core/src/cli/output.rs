use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `<root>/<config hash>/<subcommand>/`, with provenance stamped into every
/// file written through it.
pub struct OutputDir {
    dir: PathBuf,
    hash: String,
}

impl OutputDir {
    pub fn create(root: &Path, hash: &str, subcommand: &str) -> io::Result<Self> {
        let dir = root.join(hash).join(subcommand);
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            hash: hash.to_string(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Writes `# hsis <version> config_hash=<hash>` and then whatever `body`
    /// produces.
    pub fn csv(
        &self,
        name: &str,
        body: impl FnOnce(&mut dyn Write) -> io::Result<()>,
    ) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        writeln!(w, "# hsis {VERSION} config_hash={}", self.hash)?;
        body(&mut w)?;
        w.flush()
    }

    /// Pretty JSON object with `version` and `config_hash` added.
    pub fn json(&self, name: &str, value: &impl Serialize) -> io::Result<()> {
        let mut obj = match serde_json::to_value(value)? {
            Value::Object(m) => m,
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        obj.insert("version".into(), VERSION.into());
        obj.insert("config_hash".into(), self.hash.clone().into());
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        serde_json::to_writer_pretty(&mut w, &Value::Object(obj))?;
        writeln!(w)?;
        w.flush()
    }
}

/// Reads a uniform-grid forcing path from CSV: `#` lines are skipped, the
/// header must name a `t` column and a `mean` or `m` column.
pub fn read_forcing_csv(path: &Path) -> Result<(f64, f64, Vec<f64>), String> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut lines = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or("forcing file is empty")?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |names: &[&str]| header.iter().position(|h| names.contains(h));
    let t_col = col(&["t"]).ok_or("forcing file needs a `t` column")?;
    let m_col = col(&["mean", "m"]).ok_or("forcing file needs a `mean` or `m` column")?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |c: usize| -> Result<f64, String> {
            fields
                .get(c)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| format!("forcing file row {}: bad number", i + 1))
        };
        times.push(get(t_col)?);
        values.push(get(m_col)?);
    }
    if times.len() < 2 {
        return Err("forcing file needs at least two rows".into());
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    let uniform = times
        .iter()
        .enumerate()
        .all(|(i, &t)| (t - (times[0] + i as f64 * dt)).abs() <= 1e-9 * dt.max(1.0));
    if !(dt > 0.0 && uniform) {
        return Err("forcing file times must be increasing and uniformly spaced".into());
    }
    Ok((times[0], dt, values))
}
