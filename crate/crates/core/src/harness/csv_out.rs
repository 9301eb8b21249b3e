//! CSV writing with a schema header comment.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Version of every CSV schema written by the harness.
pub const SCHEMA_VERSION: u32 = 1;

/// Write `rows` to `path`, preceded by `# residual-insert <kind> v<N>`.
pub fn write_csv<T: Serialize>(path: &Path, kind: &str, rows: &[T]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "# residual-insert {kind} v{SCHEMA_VERSION}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reader that skips the schema comment.
pub fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}
