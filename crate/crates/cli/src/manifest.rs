use std::fs::{File, OpenOptions};
use std::io::{ErrorKind, Read};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{parse_config, Settings};
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.txt";
const LOCK_FILE: &str = ".lock";

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    lock: PathBuf,
    command: String,
    hash: String,
}

impl OutputDir {
    /// Creates `root` if needed and locks it. A manifest from an earlier run
    /// with a different configuration is refused.
    pub fn open(root: &Path, command: &str, settings: &Settings) -> CliResult<Self> {
        std::fs::create_dir_all(root)?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                return Err(CliError::Config(format!("{} is locked by another run", root.display())));
            }
            Err(e) => return Err(e.into()),
        }
        let out = Self { root: root.to_path_buf(), lock, command: command.to_string(), hash: settings.hash(command) };
        let previous = root.join(MANIFEST_FILE);
        if previous.exists() {
            let text = std::fs::read_to_string(&previous)?;
            let old = parse_config(&text)?;
            let old_hash = old.get("config_hash").map(String::as_str).unwrap_or("");
            let old_command = old.get("command").map(String::as_str).unwrap_or("");
            if old_hash != out.hash || old_command != command {
                return Err(CliError::HashMismatch(format!(
                    "{} holds a {old_command} run with config hash {old_hash}, this run has {}",
                    root.display(),
                    out.hash
                )));
            }
        }
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes the manifest: resolved settings (without `out`) followed by a
    /// digest of every other file in the directory.
    pub fn finish(self, settings: &Settings) -> CliResult<()> {
        let mut text = String::from("# difftrack run manifest\n");
        text.push_str(&format!("command = {}\n", self.command));
        text.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
        text.push_str(&format!("config_hash = {}\n", self.hash));
        for (k, v) in settings.entries() {
            text.push_str(&format!("{k} = {v}\n"));
        }
        for rel in list_outputs(&self.root)? {
            let digest = sha256_file(&self.root.join(&rel))?;
            text.push_str(&format!("output.{rel} = {digest}\n"));
        }
        std::fs::write(self.root.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

/// Relative paths of all output files, sorted, excluding the manifest and lock.
pub fn list_outputs(root: &Path) -> CliResult<Vec<String>> {
    fn walk(dir: &Path, prefix: &str, out: &mut Vec<String>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let rel = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
            if entry.file_type()?.is_dir() {
                walk(&entry.path(), &rel, out)?;
            } else if rel != MANIFEST_FILE && rel != LOCK_FILE {
                out.push(rel);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, "", &mut out)?;
    out.sort();
    Ok(out)
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
    }
    Ok(hex::encode(h.finalize()))
}
