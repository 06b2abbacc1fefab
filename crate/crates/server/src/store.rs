//! Append-only ratings file. Each accepted submission is written as one line
//! and synced before the request is acknowledged.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use contextcrop_core::assessment::{parse_ratings, AssessmentError, RatingRecord, RatingSet};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("ratings store {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("ratings store {path}: {source}")]
    Corrupt {
        path: String,
        #[source]
        source: AssessmentError,
    },
}

pub struct RatingStore {
    path: PathBuf,
    file: File,
    records: Vec<RatingRecord>,
}

impl RatingStore {
    /// Opens (creating if needed) the store and loads what it already holds.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(path)
            .map_err(io)?;
        let existing =
            parse_ratings(BufReader::new(File::open(path).map_err(io)?)).map_err(|source| StoreError::Corrupt {
                path: path.display().to_string(),
                source,
            })?;
        Ok(RatingStore {
            path: path.to_path_buf(),
            file,
            records: existing.records().to_vec(),
        })
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn rating_set(&self) -> Result<RatingSet, AssessmentError> {
        RatingSet::new(self.records.clone())
    }

    pub fn append(&mut self, record: RatingRecord) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(&record).expect("rating records always serialize");
        line.push(b'\n');
        let io = |source| StoreError::Io {
            path: self.path.display().to_string(),
            source,
        };
        self.file.write_all(&line).map_err(io)?;
        self.file.flush().map_err(io)?;
        self.file.sync_data().map_err(io)?;
        self.records.push(record);
        Ok(())
    }
}
