//! Timestamped output directories, logging, and failure markers.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ddpmcd::Error;
use tracing_subscriber::filter::LevelFilter;
use tracing_subscriber::layer::SubscriberExt;
use tracing_subscriber::util::SubscriberInitExt;
use tracing_subscriber::Layer;

pub const OUTPUT_ROOT_ENV: &str = "DDPMCD_OUTPUT_ROOT";

#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `exact` wins; otherwise `<root>/<command>-<YYYYmmdd-HHMMSS>[-n]` with
    /// root from the flag, the environment, or `runs`.
    pub fn create(command: &str, root: Option<&Path>, exact: Option<&Path>) -> Result<Self, Error> {
        let path = match exact {
            Some(p) => p.to_path_buf(),
            None => {
                let root = root
                    .map(Path::to_path_buf)
                    .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("runs"));
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = root.join(format!("{command}-{stamp}"));
                let mut path = base.clone();
                let mut n = 1;
                while path.exists() {
                    path = PathBuf::from(format!("{}-{n}", base.display()));
                    n += 1;
                }
                path
            }
        };
        fs::create_dir_all(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        Ok(Self { path })
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, Error> {
        let path = self.join(name);
        fs::write(&path, contents).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        Ok(path)
    }

    pub fn mark_failed(&self, err: &anyhow::Error) {
        let _ = fs::write(self.join("FAILED"), format!("{err:#}\n"));
    }
}

/// Console plus `run.log` in the run directory.
pub fn init_logging(dir: &RunDir, verbose: bool) -> Result<(), Error> {
    let level = if verbose { LevelFilter::DEBUG } else { LevelFilter::INFO };
    let path = dir.join("run.log");
    let file = File::create(&path).map_err(|e| Error::Io { path, source: e })?;
    let _ = tracing_subscriber::registry()
        .with(tracing_subscriber::fmt::layer().with_writer(std::io::stderr).with_filter(level))
        .with(
            tracing_subscriber::fmt::layer()
                .with_ansi(false)
                .with_writer(Arc::new(file))
                .with_filter(level),
        )
        .try_init();
    Ok(())
}

/// 2 for data and I/O errors, 3 for numeric failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(1, |e| match e {
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numeric { .. } => 3,
            _ => 1,
        })
}
