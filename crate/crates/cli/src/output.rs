//! CSV artifacts. Every file opens with a `# config_hash=<sha256> seed=<u64>`
//! line ahead of the column header.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::CliError;

pub struct CsvOut {
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(path: &Path, hash: &str, seed: u64, columns: &[&str]) -> Result<Self, CliError> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "# config_hash={hash} seed={seed}")?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(columns)?;
        Ok(Self { writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Shortest round-trip representation.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}
