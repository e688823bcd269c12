//! Model checkpoints: a directory holding manifest.json (architecture +
//! tensor manifest) and weights.bin (the concatenated tensors).
//! Save then load reproduces every weight bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use acat_core::attention::{AcatConfig, AcatModel};
use acat_core::nets::{load_named_params, Autoencoder, ClassifierConfig, ModelGraph};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::tensors::{decode_tensors, encode_tensors, TensorEntry};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classifier: Option<ClassifierConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    autoencoder_input: Option<(usize, usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attention: Option<AcatConfig>,
    tensors: Vec<TensorEntry>,
}

fn write_checkpoint(dir: &Path, manifest: &CheckpointManifest, blob: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create checkpoint directory {}", dir.display()))?;
    fs::write(dir.join("weights.bin"), blob)?;
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

fn read_checkpoint(
    dir: &Path,
    hint: &str,
) -> Result<(CheckpointManifest, BTreeMap<String, Vec<f32>>)> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        bail!("missing checkpoint manifest at {}; {hint}", mpath.display());
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&mpath)?)
        .with_context(|| format!("invalid checkpoint manifest {}", mpath.display()))?;
    let wpath = dir.join("weights.bin");
    let blob = fs::read(&wpath)
        .with_context(|| format!("missing checkpoint weights at {}", wpath.display()))?;
    let stored = decode_tensors(&manifest.tensors, &blob)?;
    Ok((manifest, stored))
}

pub fn save_classifier(dir: &Path, model: &ModelGraph) -> Result<()> {
    let (tensors, blob) = encode_tensors(&model.named_params());
    let manifest = CheckpointManifest {
        kind: "classifier".into(),
        classifier: Some(model.config().clone()),
        autoencoder_input: None,
        attention: None,
        tensors,
    };
    write_checkpoint(dir, &manifest, &blob)
}

/// Loads a trained classifier; the result reports itself as fitted.
pub fn load_classifier(dir: &Path, hint: &str) -> Result<ModelGraph> {
    let (manifest, stored) = read_checkpoint(dir, hint)?;
    if manifest.kind != "classifier" {
        bail!("{} holds a {} checkpoint, not a classifier", dir.display(), manifest.kind);
    }
    let config = manifest
        .classifier
        .with_context(|| format!("{}: classifier checkpoint without architecture", dir.display()))?;
    let model = ModelGraph::build(&config, 0)?;
    load_named_params(&model.named_params(), &stored)?;
    model.mark_fitted();
    Ok(model)
}

pub fn save_autoencoder(dir: &Path, ae: &Autoencoder) -> Result<()> {
    let (tensors, blob) = encode_tensors(&ae.named_params());
    let manifest = CheckpointManifest {
        kind: "autoencoder".into(),
        classifier: None,
        autoencoder_input: Some(ae.input_shape()),
        attention: None,
        tensors,
    };
    write_checkpoint(dir, &manifest, &blob)
}

pub fn load_autoencoder(dir: &Path, hint: &str) -> Result<Autoencoder> {
    let (manifest, stored) = read_checkpoint(dir, hint)?;
    if manifest.kind != "autoencoder" {
        bail!("{} holds a {} checkpoint, not an autoencoder", dir.display(), manifest.kind);
    }
    let input = manifest
        .autoencoder_input
        .with_context(|| format!("{}: autoencoder checkpoint without input shape", dir.display()))?;
    let ae = Autoencoder::build(input, 0)?;
    load_named_params(&ae.named_params(), &stored)?;
    ae.mark_fitted();
    Ok(ae)
}

pub fn save_acat(dir: &Path, model: &AcatModel, config: &AcatConfig) -> Result<()> {
    let (tensors, blob) = encode_tensors(&model.named_params());
    let manifest = CheckpointManifest {
        kind: "acat".into(),
        classifier: Some(model.image().config().clone()),
        autoencoder_input: None,
        attention: Some(*config),
        tensors,
    };
    write_checkpoint(dir, &manifest, &blob)
}

pub fn load_acat(dir: &Path, hint: &str) -> Result<AcatModel> {
    let (manifest, stored) = read_checkpoint(dir, hint)?;
    if manifest.kind != "acat" {
        bail!("{} holds a {} checkpoint, not an attention model", dir.display(), manifest.kind);
    }
    let classifier = manifest
        .classifier
        .with_context(|| format!("{}: attention checkpoint without image architecture", dir.display()))?;
    let attention = manifest
        .attention
        .with_context(|| format!("{}: attention checkpoint without attention config", dir.display()))?;
    let image = ModelGraph::build(&classifier, 0)?;
    let model = AcatModel::build(image, &attention, 0)?;
    load_named_params(&model.named_params(), &stored)?;
    model.image().mark_fitted();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use acat_core::nets::Record;
    use acat_core::rng;
    use acat_core::saliency::{SaliencyMap, SaliencyMethod};
    use acat_core::Tensor;

    fn small_classifier(seed: u64) -> ModelGraph {
        ModelGraph::build(&ClassifierConfig::standard(4), seed).unwrap()
    }

    fn volume(seed: u64) -> Tensor {
        let mut r = rng::substream(seed, "ckpt-test", 0);
        Tensor::new(&[3, 1, 64, 64], rng::uniform_vec(3 * 64 * 64, 0.0, 1.0, &mut r)).unwrap()
    }

    #[test]
    fn classifier_roundtrip_is_bitwise_stable() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_classifier(3);
        let x = volume(4);
        let before = model.forward_volume(&x, None, Record::default()).unwrap().probs.to_vec();
        save_classifier(dir.path(), &model).unwrap();
        let loaded = load_classifier(dir.path(), "train first").unwrap();
        assert!(loaded.is_fitted());
        for ((_, a), (_, b)) in model.named_params().iter().zip(loaded.named_params().iter()) {
            let ab: Vec<u32> = a.to_vec().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.to_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let after = loaded.forward_volume(&x, None, Record::default()).unwrap().probs.to_vec();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(&after));
    }

    #[test]
    fn autoencoder_roundtrip_is_bitwise_stable() {
        let dir = tempfile::tempdir().unwrap();
        let ae = Autoencoder::build((1, 64, 64), 9).unwrap();
        let x = volume(10);
        let before = ae.decode(&ae.encode(&x).unwrap()).unwrap().to_vec();
        save_autoencoder(dir.path(), &ae).unwrap();
        let loaded = load_autoencoder(dir.path(), "train first").unwrap();
        assert!(loaded.is_fitted());
        let after = loaded.decode(&loaded.encode(&x).unwrap()).unwrap().to_vec();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(&after));
    }

    #[test]
    fn acat_roundtrip_keeps_attention_parameters_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let config = AcatConfig {
            ablation: acat_core::attention::AblationFlags {
                use_middle: true,
                use_late: false,
                use_fusion: false,
            },
            slice_hidden: 16,
            slice_dropout: 0.2,
        };
        let model = AcatModel::build(small_classifier(11), &config, 12).unwrap();
        let x = volume(13);
        let mut r = rng::substream(14, "ckpt-map", 0);
        let maps = SaliencyMap::new(
            SaliencyMethod::Gradient,
            Tensor::new(&[3, 1, 64, 64], rng::uniform_vec(3 * 64 * 64, 0.0, 1.0, &mut r)).unwrap(),
        )
        .unwrap();
        let before = model
            .forward_volume(&x, &maps, None, Record::default())
            .unwrap()
            .probs
            .to_vec();
        save_acat(dir.path(), &model, &config).unwrap();
        let loaded = load_acat(dir.path(), "train first").unwrap();
        assert_eq!(loaded.ablation(), config.ablation);
        assert!(loaded.image().is_fitted());
        let after = loaded
            .forward_volume(&x, &maps, None, Record::default())
            .unwrap()
            .probs
            .to_vec();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(&after));
    }

    #[test]
    fn kind_mismatch_and_missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let err = load_classifier(&missing, "run train-baseline first").unwrap_err();
        let text = format!("{err:#}");
        assert!(text.contains("manifest.json"), "{text}");
        assert!(text.contains("run train-baseline first"), "{text}");
        save_classifier(dir.path(), &small_classifier(1)).unwrap();
        assert!(load_autoencoder(dir.path(), "x").is_err());
    }
}
