//! Run configuration shared by the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::pipeline::{PipelineConfig, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: Option<PathBuf>,
    pub device: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Pretrained teacher checkpoint; when absent the pipeline pretrains one.
    pub teacher: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub pretrain: PretrainConfig,
    pub pipeline: PipelineConfig,
    pub workers: Option<usize>,
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            architecture: None,
            device: None,
            dataset: None,
            teacher: None,
            output_dir: PathBuf::from("lightkd-out"),
            pretrain: PretrainConfig::default(),
            pipeline: PipelineConfig::default(),
            workers: None,
            execution: Execution::Parallel,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file. Relative paths inside it, including the output
    /// directory, are resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.architecture, &mut cfg.device, &mut cfg.dataset, &mut cfg.teacher]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if cfg.output_dir.is_relative() {
                cfg.output_dir = base.join(&cfg.output_dir);
            }
        }
        Ok(cfg)
    }

    /// Checks value ranges and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        self.pipeline.check()?;
        if self.pretrain.split_seed != self.pipeline.split_seed
            || self.pretrain.validation_fraction != self.pipeline.validation_fraction
        {
            return Err(Error::InvalidArgument(
                "pretrain and pipeline must use the same split seed and validation fraction".into(),
            ));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidArgument("workers must be >= 1".into()));
        }
        for (what, p) in [
            ("architecture", &self.architecture),
            ("device", &self.device),
            ("dataset", &self.dataset),
            ("teacher", &self.teacher),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::InvalidArgument(format!("{what} file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn require<'a>(&self, what: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("no {what} path configured")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
