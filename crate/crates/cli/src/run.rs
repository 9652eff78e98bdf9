//! Run directories: every artifact of one invocation lands in
//! `<runs-dir>/<command>-<hash>-s<seed>/` next to a `manifest.kv` that
//! records the effective config, input fingerprints and output files.

use std::path::{Path, PathBuf};

use ebcn_core::{fnv1a64, Error, KvMap, Result};

pub struct Input {
    pub name: String,
    pub path: PathBuf,
    pub fnv: u64,
}

impl Input {
    pub fn read(name: &str, path: &Path) -> Result<(Input, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let abs = std::fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
        let input = Input {
            name: name.to_string(),
            path: abs,
            fnv: fnv1a64(&bytes),
        };
        Ok((input, bytes))
    }
}

pub struct Run {
    pub dir: PathBuf,
    manifest: KvMap,
}

impl Run {
    /// Creates (or reuses) the directory for this command, config, input
    /// set and seed, and writes the effective config as `config.kv`.
    pub fn create(root: &Path, command: &str, config: &KvMap, inputs: &[Input], seed: u64) -> Result<Run> {
        let mut key = KvMap::new();
        key.set("command", command);
        for (k, v) in config.iter() {
            key.set(format!("config.{k}"), v);
        }
        for i in inputs {
            key.set(format!("input.{}.fnv", i.name), format!("{:016x}", i.fnv));
        }
        let hash = key.hash_hex();
        let dir = root.join(format!("{command}-{hash}-s{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let mut manifest = key;
        manifest.set("version", env!("CARGO_PKG_VERSION"));
        manifest.set("seed", seed);
        manifest.set("config_hash", &hash);
        for i in inputs {
            manifest.set(format!("input.{}", i.name), i.path.display());
        }
        let mut run = Run { dir, manifest };
        run.write("config", "config.kv", config.to_text().as_bytes())?;
        Ok(run)
    }

    /// Writes `file` atomically and records it as output `name`.
    pub fn write(&mut self, name: &str, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(file);
        let tmp = self.dir.join(format!(".{file}.tmp"));
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        self.manifest.set(format!("output.{name}"), file);
        Ok(path)
    }

    pub fn result(&mut self, key: &str, value: impl std::fmt::Display) {
        self.manifest.set(format!("result.{key}"), value);
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let text = self.manifest.to_text();
        self.write("manifest", "manifest.kv", text.as_bytes())?;
        Ok(self.dir)
    }
}
