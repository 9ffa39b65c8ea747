use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::hex_digest;
use crate::error::{Error, Result};

/// An output file and the SHA-256 of its bytes at the time it was written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    /// Hashes `root/path`; `path` is stored as given.
    pub fn hash(root: &Path, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let full = root.join(&path);
        let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
        Ok(Artifact { path, sha256: hex_digest(&bytes) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<Artifact>,
    /// Wall-clock seconds; 0 in deterministic mode.
    pub seconds: f64,
}

impl StageRecord {
    pub fn to_text(&self) -> String {
        let mut s = format!("[{}]\nconfig_hash={}\nseed={}\nseconds={:.3}\n", self.stage, self.config_hash, self.seed, self.seconds);
        for i in &self.inputs {
            let _ = writeln!(s, "input={}", i.display());
        }
        for o in &self.outputs {
            let _ = writeln!(s, "output={} {}", o.sha256, o.path.display());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentManifest {
    pub experiment: String,
    pub seed: u64,
    pub deterministic: bool,
    pub stages: Vec<StageRecord>,
}

impl ExperimentManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("experiment={}\nseed={}\ndeterministic={}\n", self.experiment, self.seed, self.deterministic);
        for st in &self.stages {
            s.push('\n');
            s.push_str(&st.to_text());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = ExperimentManifest { experiment: String::new(), seed: 0, deterministic: false, stages: Vec::new() };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse { what: "manifest", line: i + 1, msg: msg.to_string() };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                m.stages.push(StageRecord {
                    stage: name.to_string(),
                    config_hash: String::new(),
                    seed: 0,
                    inputs: Vec::new(),
                    outputs: Vec::new(),
                    seconds: 0.0,
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value"))?;
            match (m.stages.last_mut(), k) {
                (None, "experiment") => m.experiment = v.to_string(),
                (None, "seed") => m.seed = v.parse().map_err(|_| err("bad seed"))?,
                (None, "deterministic") => m.deterministic = v.parse().map_err(|_| err("bad flag"))?,
                (Some(st), "config_hash") => st.config_hash = v.to_string(),
                (Some(st), "seed") => st.seed = v.parse().map_err(|_| err("bad seed"))?,
                (Some(st), "seconds") => st.seconds = v.parse().map_err(|_| err("bad seconds"))?,
                (Some(st), "input") => st.inputs.push(PathBuf::from(v)),
                (Some(st), "output") => {
                    let (h, p) = v.split_once(' ').ok_or_else(|| err("expected hash and path"))?;
                    st.outputs.push(Artifact { path: PathBuf::from(p), sha256: h.to_string() });
                }
                _ => return Err(err(&format!("unexpected key {k:?}"))),
            }
        }
        Ok(m)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// Checks that every output exists under `root` with its recorded hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for st in &self.stages {
            for o in &st.outputs {
                let now = Artifact::hash(root, o.path.clone())?;
                if now.sha256 != o.sha256 {
                    return Err(Error::CorruptArtifact {
                        path: root.join(&o.path),
                        msg: format!("hash changed since stage {}", st.stage),
                    });
                }
            }
        }
        Ok(())
    }
}
