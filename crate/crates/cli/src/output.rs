//! Output bundle: every file carries the resolved configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fbsde_core::control::PolicyField;
use fbsde_core::FieldSequence;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Time steps actually used, after the contraction probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepInfo {
    pub requested: f64,
    pub delta: f64,
    /// Admissible step found by the probe, when one was run.
    pub delta0: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<StepInfo>,
}

#[derive(Serialize)]
struct Bundle<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

pub struct OutputDir {
    dir: PathBuf,
    pub provenance: Provenance,
    written: Vec<PathBuf>,
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl OutputDir {
    pub fn create(dir: PathBuf, command: &str, config: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(io_error(&dir))?;
        Ok(Self {
            dir,
            provenance: Provenance {
                tool: "fbsde",
                version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                config: config.clone(),
                step: None,
            },
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn open(&mut self, name: &str) -> Result<(PathBuf, BufWriter<File>), CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(io_error(&path))?;
        self.written.push(path.clone());
        Ok((path, BufWriter::new(file)))
    }

    fn header(&self) -> Vec<String> {
        let config = serde_json::to_string(&self.provenance).expect("provenance serializes");
        vec![
            format!(
                "{} {} {}",
                self.provenance.tool, self.provenance.version, self.provenance.command
            ),
            format!("provenance: {config}"),
        ]
    }

    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(&Bundle {
            provenance: &self.provenance,
            body,
        })
        .expect("report serializes");
        let (path, mut out) = self.open(name)?;
        writeln!(out, "{text}")
            .and_then(|_| out.flush())
            .map_err(io_error(&path))?;
        Ok(path)
    }

    pub fn fields(&mut self, name: &str, fields: &FieldSequence) -> Result<PathBuf, CliError> {
        let header = self.header();
        let (path, mut out) = self.open(name)?;
        fields
            .write_csv(&mut out, &header)
            .and_then(|_| out.flush())
            .map_err(io_error(&path))?;
        Ok(path)
    }

    pub fn plot(&mut self, name: &str, fields: &FieldSequence) -> Result<PathBuf, CliError> {
        let header = self.header();
        let (path, mut out) = self.open(name)?;
        let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
            for line in &header {
                writeln!(out, "# {line}")?;
            }
            fields.write_plot_csv(&mut *out)?;
            out.flush()
        };
        write(&mut out).map_err(io_error(&path))?;
        Ok(path)
    }

    pub fn policy(&mut self, name: &str, policy: &PolicyField) -> Result<PathBuf, CliError> {
        let header = self.header();
        let (path, mut out) = self.open(name)?;
        let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
            for line in &header {
                writeln!(out, "# {line}")?;
            }
            writeln!(out, "t,x,u")?;
            for (t, x, u) in policy.triples() {
                writeln!(out, "{t},{x},{u}")?;
            }
            out.flush()
        };
        write(&mut out).map_err(io_error(&path))?;
        Ok(path)
    }
}
