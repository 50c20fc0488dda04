//! Output directory handling. Every file is written to a temporary file in
//! the destination directory and renamed into place.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;
use vpp_core::{Error, Result};

pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Relative paths of the files written so far, in write order.
    pub fn written(&self) -> &[String] {
        &self.written
    }

    pub fn write<F>(&mut self, rel: &str, fill: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut dyn Write) -> Result<()>,
    {
        let path = self.root.join(rel);
        let dir = path.parent().unwrap_or(&self.root).to_path_buf();
        fs::create_dir_all(&dir)?;
        let tmp = NamedTempFile::new_in(&dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            fill(&mut w)?;
            w.flush()?;
        }
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
        self.written.push(rel.to_string());
        Ok(path)
    }

    pub fn write_str(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        self.write(rel, |w| Ok(w.write_all(text.as_bytes())?))
    }
}

/// File-name-safe form of a class name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_replace_whole_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutDir::create(&dir.path().join("a/b")).unwrap();
        out.write_str("x.txt", "first version").unwrap();
        out.write_str("x.txt", "second").unwrap();
        out.write_str("sub/y.txt", "y").unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("a/b/x.txt")).unwrap(),
            "second"
        );
        assert_eq!(out.written(), ["x.txt", "x.txt", "sub/y.txt"]);
        let leftovers = fs::read_dir(dir.path().join("a/b")).unwrap().count();
        assert_eq!(leftovers, 2);
    }

    #[test]
    fn stems() {
        assert_eq!(file_stem("ev residential/1"), "ev_residential_1");
        assert_eq!(file_stem("water-heater_2"), "water-heater_2");
    }
}
