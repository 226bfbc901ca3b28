//! Experiment manifests. Each command writes `manifests/<command>.json`
//! listing the artifacts it read and wrote with their hashes, and the
//! manifests of the stages that produced its inputs. Validation walks these
//! links and re-hashes every file on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use clbd_core::text::sha256_hex;

use crate::error::{Result, ServiceError};

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the workdir, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentRef {
    pub command: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_digest: String,
    pub versions: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub parents: Vec<ParentRef>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    /// Command-specific settings worth keeping, such as training configs.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("clbd-core".to_string(), clbd_core::VERSION.to_string()),
        ("clbd-service".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ])
}

pub fn manifest_path(workdir: &Path, command: &str) -> PathBuf {
    workdir.join(MANIFEST_DIR).join(format!("{command}.json"))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn relative(workdir: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(workdir).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

pub fn artifact(workdir: &Path, path: &Path) -> Result<Artifact> {
    Ok(Artifact { path: relative(workdir, path), sha256: hash_file(path)? })
}

pub fn read_manifest(workdir: &Path, command: &str) -> Result<Manifest> {
    let p = manifest_path(workdir, command);
    let bytes = std::fs::read(&p).map_err(|_| ServiceError::Chain(format!("no manifest for `{command}`")))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Accumulates a manifest while a command runs.
pub struct ManifestBuilder {
    workdir: PathBuf,
    manifest: Manifest,
}

impl ManifestBuilder {
    pub fn new(workdir: &Path, command: &str, config_digest: &str, seed: u64) -> Self {
        Self {
            workdir: workdir.to_path_buf(),
            manifest: Manifest {
                command: command.into(),
                config_digest: config_digest.into(),
                versions: versions(),
                seeds: BTreeMap::from([("seed".to_string(), seed)]),
                parents: Vec::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                details: serde_json::Value::Null,
            },
        }
    }

    /// Records an input produced by `stage`, failing when that stage has no
    /// manifest or its recorded hash differs from the file on disk.
    pub fn input_from(&mut self, stage: &str, path: &Path) -> Result<()> {
        let a = artifact(&self.workdir, path)?;
        let parent = read_manifest(&self.workdir, stage)?;
        match parent.outputs.iter().find(|o| o.path == a.path) {
            Some(o) if o.sha256 == a.sha256 => {}
            Some(_) => {
                return Err(ServiceError::Chain(format!("`{}` changed since `{stage}` wrote it", a.path)));
            }
            None => return Err(ServiceError::Chain(format!("`{}` is not an output of `{stage}`", a.path))),
        }
        let sha = hash_file(&manifest_path(&self.workdir, stage))?;
        if !self.manifest.parents.iter().any(|p| p.command == stage) {
            self.manifest.parents.push(ParentRef { command: stage.into(), sha256: sha });
        }
        self.manifest.inputs.push(a);
        Ok(())
    }

    /// An input from outside the workdir chain, such as the raw corpus.
    pub fn external_input(&mut self, path: &Path) -> Result<()> {
        let a = Artifact { path: path.display().to_string(), sha256: hash_file(path)? };
        self.manifest.inputs.push(a);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let a = artifact(&self.workdir, path)?;
        self.manifest.outputs.retain(|o| o.path != a.path);
        self.manifest.outputs.push(a);
        Ok(())
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.into(), value);
    }

    pub fn details(&mut self, value: serde_json::Value) {
        self.manifest.details = value;
    }

    pub fn write(self) -> Result<Manifest> {
        let p = manifest_path(&self.workdir, &self.manifest.command);
        std::fs::create_dir_all(p.parent().expect("manifest dir"))?;
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&p, text)?;
        Ok(self.manifest)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub manifests: Vec<String>,
    pub artifacts_checked: usize,
}

/// Validates every manifest under `workdir/manifests`: outputs match the
/// files on disk, parent hashes match the parent manifests, inputs match
/// their producer's outputs, and all manifests share one config digest.
pub fn validate_chain(workdir: &Path) -> Result<ChainReport> {
    let dir = workdir.join(MANIFEST_DIR);
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|_| ServiceError::Chain(format!("no manifests under `{}`", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_string))
        .collect();
    names.sort();
    let mut manifests = BTreeMap::new();
    for n in &names {
        manifests.insert(n.clone(), read_manifest(workdir, n)?);
    }
    let mut checked = 0;
    let mut digest: Option<&str> = None;
    for (name, m) in &manifests {
        if m.command != *name {
            return Err(ServiceError::Chain(format!("`{name}.json` describes `{}`", m.command)));
        }
        match digest {
            None => digest = Some(&m.config_digest),
            Some(d) if d != m.config_digest => {
                return Err(ServiceError::Chain(format!("`{name}` ran under a different config digest")));
            }
            _ => {}
        }
        for o in &m.outputs {
            let actual = hash_file(&workdir.join(&o.path))
                .map_err(|_| ServiceError::Chain(format!("`{}` from `{name}` is missing", o.path)))?;
            if actual != o.sha256 {
                return Err(ServiceError::Chain(format!("`{}` from `{name}` was modified", o.path)));
            }
            checked += 1;
        }
        for p in &m.parents {
            if !manifests.contains_key(&p.command) {
                return Err(ServiceError::Chain(format!("`{name}` depends on missing `{}`", p.command)));
            }
            if hash_file(&manifest_path(workdir, &p.command))? != p.sha256 {
                return Err(ServiceError::Chain(format!("`{}` was rerun after `{name}`", p.command)));
            }
        }
        for i in m.inputs.iter().filter(|i| !Path::new(&i.path).is_absolute()) {
            let producer = m
                .parents
                .iter()
                .filter_map(|p| manifests.get(&p.command))
                .find(|pm| pm.outputs.iter().any(|o| o.path == i.path));
            match producer {
                Some(pm) if pm.outputs.iter().any(|o| o.path == i.path && o.sha256 == i.sha256) => checked += 1,
                Some(pm) => {
                    return Err(ServiceError::Chain(format!(
                        "`{name}` read a different `{}` than `{}` wrote",
                        i.path, pm.command
                    )))
                }
                None => return Err(ServiceError::Chain(format!("no parent of `{name}` produced `{}`", i.path))),
            }
        }
    }
    Ok(ChainReport { manifests: names, artifacts_checked: checked })
}
