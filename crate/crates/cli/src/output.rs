use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::{CliError, RunConfig};

fn header(config: &RunConfig) -> String {
    format!(
        "# root_seed={}\n# config={}\n",
        config.seed,
        config.audit_json()
    )
}

/// Writes a CSV with the audit header; returns the path written.
pub fn write_csv<T: Serialize>(
    config: &RunConfig,
    name: &str,
    rows: &[T],
) -> Result<PathBuf, CliError> {
    let mut buf = header(config).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    write_file(&config.out, name, &buf)
}

pub fn write_json<T: Serialize>(
    config: &RunConfig,
    name: &str,
    body: &T,
) -> Result<PathBuf, CliError> {
    #[derive(Serialize)]
    struct Wrapped<'a, T> {
        root_seed: u64,
        config: &'a RunConfig,
        report: &'a T,
    }
    let doc = Wrapped {
        root_seed: config.seed,
        config,
        report: body,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
    text.push('\n');
    write_file(&config.out, name, text.as_bytes())
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path)?;
    f.write_all(bytes)?;
    Ok(path)
}
