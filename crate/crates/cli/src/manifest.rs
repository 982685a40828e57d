use std::fs;
use std::path::{Path, PathBuf};

use acshadow_core::trimmer::TraceTupleSpec;
use acshadow_core::{AcConfig, DataChange, DataState, IrProgram, TraceTuple};
use anyhow::{bail, Context, Result};
use serde::Deserialize;

/// Inputs of a `run` invocation. Relative paths are resolved against the
/// manifest's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub program: PathBuf,
    pub config_old: PathBuf,
    pub config_new: PathBuf,
    pub data: PathBuf,
    #[serde(default)]
    pub data_delta: Option<PathBuf>,
    pub requests: RequestSource,
    #[serde(default)]
    pub rules: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Trace tuples; when present the corpus runs on the advanced-trimmed
    /// program and impacts are confirmed on the full one.
    #[serde(default)]
    pub tuples: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RequestSource {
    Logs(PathBuf),
    Synthesize(PathBuf),
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: RunManifest = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let join = |p: &mut PathBuf| *p = base.join(&*p);
        join(&mut m.program);
        join(&mut m.config_old);
        join(&mut m.config_new);
        join(&mut m.data);
        m.data_delta.as_mut().map(join);
        m.rules.as_mut().map(join);
        m.output.as_mut().map(join);
        m.tuples.as_mut().map(join);
        match &mut m.requests {
            RequestSource::Logs(p) | RequestSource::Synthesize(p) => join(p),
        }
        m.check_inputs()?;
        Ok(m)
    }

    fn check_inputs(&self) -> Result<()> {
        let source = match &self.requests {
            RequestSource::Logs(p) | RequestSource::Synthesize(p) => p,
        };
        let inputs = [&self.program, &self.config_old, &self.config_new, &self.data, source]
            .into_iter()
            .chain(&self.data_delta)
            .chain(&self.rules)
            .chain(&self.tuples);
        for p in inputs {
            if !p.is_file() {
                bail!("{}: no such file", p.display());
            }
        }
        Ok(())
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("{}: cannot read", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))
}

pub fn load_program(path: &Path) -> Result<(IrProgram, String)> {
    let text = read_text(path)?;
    let prog = IrProgram::parse(&text).with_context(|| path.display().to_string())?;
    Ok((prog, text))
}

pub fn load_config(path: &Path) -> Result<AcConfig> {
    AcConfig::parse(&read_text(path)?).with_context(|| path.display().to_string())
}

pub fn load_data(path: &Path) -> Result<DataState> {
    Ok(DataState::load_manifest(path)?)
}

pub fn load_delta(path: Option<&Path>) -> Result<Vec<DataChange>> {
    path.map_or(Ok(Vec::new()), read_json)
}

/// Reads a JSON list of tuples whose config paths are relative to the
/// tuples file.
pub fn load_tuples(path: &Path) -> Result<Vec<TraceTuple>> {
    let specs: Vec<TraceTupleSpec> = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    specs
        .into_iter()
        .map(|s| {
            Ok(TraceTuple {
                request: s.request,
                cfg_allow: load_config(&base.join(s.cfg_allow_path))?,
                cfg_deny: load_config(&base.join(s.cfg_deny_path))?,
            })
        })
        .collect()
}
