//! Checksum-keyed stage execution. A stage owns one output directory;
//! its key is a SHA-256 over the stage name, its config fragment and the
//! hashes of its input files. A matching stage.json with intact outputs
//! means the stage is up to date and is skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hex = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes =
        fs::read(path).with_context(|| format!("cannot read {} for hashing", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Relative path -> hash for every file under `dir`, sorted, skipping
/// the given top-level names.
pub fn dir_hashes(dir: &Path, skip: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in
            fs::read_dir(&d).with_context(|| format!("cannot list {}", d.display()))?
        {
            let path = entry?.path();
            let rel = path
                .strip_prefix(dir)
                .expect("walk stays under dir")
                .to_string_lossy()
                .into_owned();
            if skip.contains(&rel.as_str()) {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(rel, file_sha256(&path)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifest {
    pub stage: String,
    /// SHA-256 over stage name, config fragment and input hashes.
    pub key: String,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub seed: u64,
    /// Input path (relative to the run root) -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file (relative to the stage directory) -> content hash.
    pub outputs: BTreeMap<String, String>,
}

pub struct Stage {
    pub name: &'static str,
    /// Output directory, wiped and rebuilt when the stage runs.
    pub dir: PathBuf,
    /// The config subsection this stage depends on, seed included.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Input files or directories, hashed into the key.
    pub inputs: Vec<PathBuf>,
}

const MARKER: &str = "stage.json";

fn input_hashes(stage: &Stage) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for input in &stage.inputs {
        if !input.exists() {
            bail!(
                "stage {}: missing input at {}",
                stage.name,
                input.display()
            );
        }
        let label = input.to_string_lossy().into_owned();
        if input.is_dir() {
            for (rel, hash) in dir_hashes(input, &[MARKER])? {
                out.insert(format!("{label}/{rel}"), hash);
            }
        } else {
            out.insert(label, file_sha256(input)?);
        }
    }
    Ok(out)
}

fn stage_key(stage: &Stage, config_bytes: &[u8], inputs: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(stage.name.as_bytes());
    hasher.update([0]);
    hasher.update(config_bytes);
    for (path, hash) in inputs {
        hasher.update([0]);
        hasher.update(path.as_bytes());
        hasher.update([0]);
        hasher.update(hash.as_bytes());
    }
    let mut hex = String::with_capacity(64);
    for b in hasher.finalize() {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

fn outputs_intact(dir: &Path, recorded: &BTreeMap<String, String>) -> bool {
    match dir_hashes(dir, &[MARKER]) {
        Ok(current) => current == *recorded,
        Err(_) => false,
    }
}

/// Runs the stage unless its marker proves it is already up to date.
/// Returns true when the body executed.
pub fn run_stage(stage: &Stage, body: impl FnOnce() -> Result<()>) -> Result<bool> {
    let inputs = input_hashes(stage)?;
    let config_bytes = serde_json::to_vec(&stage.config)?;
    let key = stage_key(stage, &config_bytes, &inputs);
    let marker = stage.dir.join(MARKER);
    if marker.exists() {
        let stored: Option<StageManifest> = fs::read(&marker)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        if let Some(m) = stored {
            if m.key == key && outputs_intact(&stage.dir, &m.outputs) {
                return Ok(false);
            }
        }
    }
    if stage.dir.exists() {
        fs::remove_dir_all(&stage.dir)
            .with_context(|| format!("cannot clear stale stage dir {}", stage.dir.display()))?;
    }
    fs::create_dir_all(&stage.dir)?;
    body().with_context(|| format!("stage {} failed", stage.name))?;
    let manifest = StageManifest {
        stage: stage.name.into(),
        key,
        config: stage.config.clone(),
        config_sha256: sha256_hex(&config_bytes),
        seed: stage.seed,
        inputs,
        outputs: dir_hashes(&stage.dir, &[MARKER])?,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(marker, json + "\n")?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_reference_vectors() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    fn stage(dir: &Path, config: serde_json::Value, inputs: Vec<PathBuf>) -> Stage {
        Stage { name: "demo", dir: dir.to_path_buf(), config, seed: 7, inputs }
    }

    #[test]
    fn second_run_is_skipped_and_marker_records_provenance() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("out");
        let mut runs = 0;
        for _ in 0..2 {
            let ran = run_stage(&stage(&dir, serde_json::json!({"seed": 7}), vec![]), || {
                runs += 1;
                fs::write(dir.join("artifact.txt"), b"payload")?;
                Ok(())
            })
            .unwrap();
            assert_eq!(ran, runs == 1);
        }
        assert_eq!(runs, 1);
        let m: StageManifest =
            serde_json::from_slice(&fs::read(dir.join("stage.json")).unwrap()).unwrap();
        assert_eq!(m.stage, "demo");
        assert_eq!(m.seed, 7);
        assert_eq!(m.config["seed"], 7);
        assert_eq!(m.config_sha256.len(), 64);
        assert_eq!(m.outputs.len(), 1);
        assert!(m.outputs.contains_key("artifact.txt"));
    }

    #[test]
    fn config_change_input_change_and_damage_each_rerun() {
        let root = tempfile::tempdir().unwrap();
        let input = root.path().join("input.bin");
        fs::write(&input, b"v1").unwrap();
        let dir = root.path().join("out");
        let run = |config: serde_json::Value, counter: &mut usize| {
            run_stage(&stage(&dir, config, vec![input.clone()]), || {
                *counter += 1;
                fs::write(dir.join("artifact.txt"), b"payload")?;
                Ok(())
            })
            .unwrap()
        };
        let mut runs = 0;
        assert!(run(serde_json::json!({"a": 1}), &mut runs));
        assert!(!run(serde_json::json!({"a": 1}), &mut runs));
        assert!(run(serde_json::json!({"a": 2}), &mut runs), "config change reruns");
        fs::write(&input, b"v2").unwrap();
        assert!(run(serde_json::json!({"a": 2}), &mut runs), "input change reruns");
        fs::write(dir.join("artifact.txt"), b"tampered").unwrap();
        assert!(run(serde_json::json!({"a": 2}), &mut runs), "damaged output reruns");
        fs::remove_file(dir.join("artifact.txt")).unwrap();
        assert!(run(serde_json::json!({"a": 2}), &mut runs), "missing output reruns");
        assert_eq!(runs, 5);
    }

    #[test]
    fn rerun_clears_stale_files() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("out");
        run_stage(&stage(&dir, serde_json::json!(1), vec![]), || {
            fs::write(dir.join("old.txt"), b"old")?;
            Ok(())
        })
        .unwrap();
        run_stage(&stage(&dir, serde_json::json!(2), vec![]), || {
            fs::write(dir.join("new.txt"), b"new")?;
            Ok(())
        })
        .unwrap();
        assert!(!dir.join("old.txt").exists());
        assert!(dir.join("new.txt").exists());
    }

    #[test]
    fn missing_input_names_the_path() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("out");
        let missing = root.path().join("not-there");
        let err = run_stage(&stage(&dir, serde_json::json!(1), vec![missing.clone()]), || Ok(()))
            .unwrap_err();
        assert!(format!("{err:#}").contains("not-there"));
    }

    #[test]
    fn failed_stage_leaves_no_marker() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("out");
        let err = run_stage(&stage(&dir, serde_json::json!(1), vec![]), || {
            anyhow::bail!("boom")
        });
        assert!(err.is_err());
        assert!(!dir.join("stage.json").exists());
        let mut runs = 0;
        run_stage(&stage(&dir, serde_json::json!(1), vec![]), || {
            runs += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(runs, 1, "failed attempt does not poison the next run");
    }
}
