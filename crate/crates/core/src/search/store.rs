//! Append-only newline-delimited JSON trial log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{SearchError, TrialRecord};

/// Records recovered from a store, plus any tolerated damage.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedStore {
    pub records: Vec<TrialRecord>,
    pub warnings: Vec<String>,
    /// Byte length of the well-formed prefix.
    pub valid_len: u64,
}

#[derive(Debug)]
pub struct TrialStore {
    path: PathBuf,
    file: File,
}

impl TrialStore {
    /// Start a fresh store, replacing any existing file.
    pub fn create(path: impl AsRef<Path>) -> Result<Self, SearchError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path)?;
        Ok(Self { path, file })
    }

    /// Open an existing store for continued appends. A partial trailing
    /// record is cut off so new records start on a clean line.
    pub fn resume(path: impl AsRef<Path>) -> Result<(Self, LoadedStore), SearchError> {
        let path = path.as_ref().to_path_buf();
        let loaded = if path.exists() {
            Self::load(&path)?
        } else {
            LoadedStore { records: Vec::new(), warnings: Vec::new(), valid_len: 0 }
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        file.set_len(loaded.valid_len)?;
        Ok((Self { path, file }, loaded))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Write one record and flush it to disk.
    pub fn append(&mut self, record: &TrialRecord) -> Result<(), SearchError> {
        let mut line = serde_json::to_vec(record).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut w = BufWriter::new(&self.file);
        w.write_all(&line)?;
        w.flush()?;
        drop(w);
        self.file.sync_data()?;
        Ok(())
    }

    /// Parse a store. Only the final line may be damaged; it is dropped
    /// with a warning. Damage anywhere else is an error.
    pub fn load(path: impl AsRef<Path>) -> Result<LoadedStore, SearchError> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::parse(&bytes)
    }

    pub fn parse(bytes: &[u8]) -> Result<LoadedStore, SearchError> {
        let mut records = Vec::new();
        let mut warnings = Vec::new();
        let mut offset = 0usize;
        let mut valid_len = 0usize;
        let mut line_no = 0usize;
        while offset < bytes.len() {
            line_no += 1;
            let end = bytes[offset..].iter().position(|b| *b == b'\n').map(|i| offset + i);
            let (line, next) = match end {
                Some(e) => (&bytes[offset..e], e + 1),
                None => (&bytes[offset..], bytes.len()),
            };
            let is_last = next >= bytes.len();
            let parsed = std::str::from_utf8(line)
                .map_err(|e| e.to_string())
                .and_then(|s| serde_json::from_str::<TrialRecord>(s).map_err(|e| e.to_string()));
            match parsed {
                Ok(rec) if end.is_some() => {
                    records.push(rec);
                    valid_len = next;
                }
                // Appends write the newline with the record, so a missing
                // newline means the write was cut short.
                Ok(_) => warnings.push(format!("line {line_no}: dropped record without trailing newline")),
                Err(message) if is_last => {
                    warnings.push(format!("line {line_no}: dropped partial record ({message})"));
                }
                Err(message) => return Err(SearchError::CorruptStore { line: line_no, message }),
            }
            offset = next;
        }
        Ok(LoadedStore { records, warnings, valid_len: valid_len as u64 })
    }
}
