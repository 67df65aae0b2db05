//! Run manifests: a checksummed listing of every artifact a command wrote,
//! so reruns can be verified file by file.
//!
//! The manifest itself is plain `key = value` text. All lines except the
//! trailing `wall_time_ms` are deterministic for fixed inputs; comparing two
//! manifests minus that line verifies a rerun without hashing the artifacts
//! again.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct ManifestBuilder {
    command: String,
    config_hash: String,
    seed: u64,
    artifacts: Vec<(String, String)>,
    started: Instant,
}

impl ManifestBuilder {
    /// Starts a manifest for `command`. `config_text` is the fully resolved
    /// configuration the command ran with; its hash ties the artifacts to the
    /// exact settings.
    pub fn new(command: &str, config_text: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash: sha256_hex(config_text.as_bytes()),
            seed,
            artifacts: Vec::new(),
            started: Instant::now(),
        }
    }

    /// Records `root/rel` by reading it back from disk, so the checksum
    /// certifies what actually landed there.
    pub fn add_file(&mut self, root: &Path, rel: &str) -> io::Result<()> {
        let bytes = fs::read(root.join(rel))?;
        self.artifacts.push((rel.to_string(), sha256_hex(&bytes)));
        Ok(())
    }

    /// Writes `manifest.txt` under `root` and returns its path.
    pub fn write(self, root: &Path) -> io::Result<PathBuf> {
        let mut out = String::new();
        out.push_str(&format!("command = {}\n", self.command));
        out.push_str(&format!("config_hash = {}\n", self.config_hash));
        out.push_str(&format!("seed = {}\n", self.seed));
        for (rel, hash) in &self.artifacts {
            out.push_str(&format!("artifact = {rel} {hash}\n"));
        }
        out.push_str(&format!("wall_time_ms = {}\n", self.started.elapsed().as_millis()));
        let path = root.join("manifest.txt");
        fs::write(&path, out)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn manifest_lists_artifacts_with_their_checksums() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), b"hello").unwrap();
        let mut m = ManifestBuilder::new("simulate", "n_frames = 4\n", 7);
        m.add_file(dir.path(), "a.txt").unwrap();
        let path = m.write(dir.path()).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert!(text.contains("command = simulate"), "{text}");
        assert!(text.contains("seed = 7"), "{text}");
        assert!(
            text.contains(&format!("artifact = a.txt {}", sha256_hex(b"hello"))),
            "{text}"
        );
        assert!(text.contains("wall_time_ms = "), "{text}");
    }

    #[test]
    fn missing_artifacts_fail_at_record_time() {
        let dir = tempdir().unwrap();
        let mut m = ManifestBuilder::new("run", "", 0);
        assert!(m.add_file(dir.path(), "absent.bin").is_err());
    }
}
