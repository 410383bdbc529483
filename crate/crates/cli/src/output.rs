//! Staged output directories and error classification.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use pcsl_core::Error;

#[derive(Debug)]
pub enum CliError {
    MissingFile(PathBuf),
    OutputExists(PathBuf),
    Config(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::MissingFile(p) => write!(f, "no such file: {}", p.display()),
            CliError::OutputExists(p) => write!(f, "output path already exists: {}", p.display()),
            CliError::Config(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

/// Failure classes, each with its own message tag and exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    MissingFile,
    Parse,
    Dimension,
    Training,
    Evaluation,
    Output,
    Io,
}

impl Kind {
    pub fn tag(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::MissingFile => "missing-file",
            Kind::Parse => "parse",
            Kind::Dimension => "dimension",
            Kind::Training => "training",
            Kind::Evaluation => "evaluation",
            Kind::Output => "output",
            Kind::Io => "io",
        }
    }

    /// Exit code; 2 stays reserved for command-line usage errors.
    pub fn code(self) -> u8 {
        match self {
            Kind::Config => 3,
            Kind::MissingFile => 4,
            Kind::Parse => 5,
            Kind::Dimension => 6,
            Kind::Training => 7,
            Kind::Evaluation => 8,
            Kind::Output => 9,
            Kind::Io => 10,
        }
    }
}

pub fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::MissingFile(_) => Kind::MissingFile,
                CliError::OutputExists(_) => Kind::Output,
                CliError::Config(_) => Kind::Config,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => Kind::Config,
                Error::Parse { .. } | Error::Version { .. } | Error::Json(_) => Kind::Parse,
                Error::Dimension { .. } => Kind::Dimension,
                Error::AllQueriesSkipped(_) | Error::NoTrueMatches => Kind::Evaluation,
                Error::Io(_) => Kind::Io,
                Error::Contract(_)
                | Error::NonFiniteGradient(_)
                | Error::Uninitialized(_)
                | Error::NoCrossCamera(_)
                | Error::DegenerateRow(_)
                | Error::Diverged { .. } => Kind::Training,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return Kind::Parse;
        }
    }
    Kind::Io
}

/// Collects a command's files in a hidden sibling directory and renames it
/// into place on success; dropped uncommitted, it removes itself.
pub struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(dest: &Path) -> Result<Self> {
        if dest.exists() {
            return Err(CliError::OutputExists(dest.to_path_buf()).into());
        }
        let name = dest
            .file_name()
            .ok_or_else(|| CliError::Config(format!("output path {} has no final component", dest.display())))?;
        let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp)?;
        Ok(Self {
            tmp,
            dest: dest.to_path_buf(),
            committed: false,
        })
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.tmp.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, contents)?;
        Ok(())
    }

    pub fn commit(mut self) -> Result<()> {
        if self.dest.exists() {
            return Err(CliError::OutputExists(self.dest.clone()).into());
        }
        fs::rename(&self.tmp, &self.dest)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}
