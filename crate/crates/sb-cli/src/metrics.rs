//! Per-epoch training metrics as a small CSV with a format tag line.
//!
//! Loss and error-rate columns print with shortest-round-trip formatting so
//! the numbers reparse to the same bits; wall-clock seconds are measurement
//! noise and print to fixed milliseconds.

use std::fmt::Write as _;
use std::path::Path;

use sb_core::train::EpochRecord;

use crate::error::{CliError, CliResult};

pub const TAG_LINE: &str = "# sb-metrics v1";
pub const HEADER_LINE: &str = "epoch,train_loss,test_error,seconds";

pub fn render(log: &[EpochRecord]) -> String {
    let mut out = String::new();
    out.push_str(TAG_LINE);
    out.push('\n');
    out.push_str(HEADER_LINE);
    out.push('\n');
    for r in log {
        writeln!(&mut out, "{},{},{},{:.3}", r.epoch, r.train_loss, r.test_error, r.seconds)
            .expect("writing to a String cannot fail");
    }
    out
}

pub fn write(path: &Path, log: &[EpochRecord]) -> CliResult<()> {
    let text = render(log);
    let tmp = path.with_extension("csv.tmp");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        }
    }
    std::fs::write(&tmp, text.as_bytes())
        .map_err(|e| CliError::Data(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn parse(text: &str) -> CliResult<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(TAG_LINE) {
        return Err(CliError::Data(format!("metrics file does not start with {TAG_LINE:?}")));
    }
    if lines.next() != Some(HEADER_LINE) {
        return Err(CliError::Data(format!("metrics file missing header {HEADER_LINE:?}")));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(CliError::Data(format!("metrics line {}: expected 4 columns", ln + 3)));
        }
        let field = |i: usize| -> CliResult<f64> {
            cols[i]
                .parse()
                .map_err(|_| CliError::Data(format!("metrics line {}: bad number {:?}", ln + 3, cols[i])))
        };
        out.push(EpochRecord {
            epoch: cols[0]
                .parse()
                .map_err(|_| CliError::Data(format!("metrics line {}: bad epoch", ln + 3)))?,
            train_loss: field(1)?,
            test_error: field(2)?,
            seconds: field(3)?,
        });
    }
    Ok(out)
}
