use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

/// Files written by one command. Unless [`Outputs::commit`] is called, every
/// registered file (and the directory, if this run created it) is removed
/// on drop, so a failed command leaves nothing half-written behind.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    /// Registers `name` for cleanup and returns its full path.
    pub fn file(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        self.files.push(path.clone());
        path
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.file(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn csv(&mut self, name: &str, header: &[&str]) -> Result<CsvOut> {
        let path = self.file(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut out = CsvOut {
            writer: csv::Writer::from_writer(Box::new(file)),
            path,
        };
        out.row(header.iter().copied())?;
        Ok(out)
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.files)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        if self.created_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

/// A CSV table with a header row.
pub struct CsvOut {
    writer: csv::Writer<Box<dyn std::io::Write>>,
    path: PathBuf,
}

impl CsvOut {
    pub fn stdout(header: &[&str]) -> Result<Self> {
        let mut out = CsvOut {
            writer: csv::Writer::from_writer(Box::new(std::io::stdout())),
            path: PathBuf::from("<stdout>"),
        };
        out.row(header.iter().copied())?;
        Ok(out)
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(|source| CliError::Csv {
            path: self.path.clone(),
            source,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| CliError::io(&self.path, e))
    }
}
