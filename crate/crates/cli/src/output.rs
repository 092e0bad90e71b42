use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// Files a command is about to write. Unless [`Outputs::commit`] is called,
/// dropping the guard removes them, along with a directory it created.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    created_dir: Option<PathBuf>,
    committed: bool,
}

impl Outputs {
    /// A single output file.
    pub fn file(path: &Path, force: bool) -> Result<Self> {
        refuse_existing(path, force)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            if !parent.is_dir() {
                bail!("output directory {} does not exist", parent.display());
            }
        }
        let mut out = Self::default();
        out.files.push(path.to_path_buf());
        Ok(out)
    }

    /// Named files inside `dir`, which is created if missing.
    pub fn dir(dir: &Path, names: &[&str], force: bool) -> Result<Self> {
        let mut out = Self::default();
        if dir.exists() {
            if !dir.is_dir() {
                bail!("{} is not a directory", dir.display());
            }
        } else {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            out.created_dir = Some(dir.to_path_buf());
        }
        for name in names {
            let path = dir.join(name);
            refuse_existing(&path, force)?;
            out.files.push(path);
        }
        Ok(out)
    }

    pub fn path(&self, i: usize) -> &Path {
        &self.files[i]
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(d) = &self.created_dir {
            let _ = fs::remove_dir(d);
        }
    }
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists (pass --force to overwrite)", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        {
            let out = Outputs::dir(&dir, &["a.txt"], false).unwrap();
            fs::write(out.path(0), "x").unwrap();
        }
        assert!(!dir.exists());
        {
            let out = Outputs::dir(&dir, &["a.txt"], false).unwrap();
            fs::write(out.path(0), "x").unwrap();
            out.commit();
        }
        assert!(dir.join("a.txt").exists());
        assert!(Outputs::dir(&dir, &["a.txt"], false).is_err());
        assert!(Outputs::dir(&dir, &["a.txt"], true).is_ok());
    }
}
