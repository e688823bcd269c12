//! Dataset archive: manifest.json plus per-sample raw f32 volumes and
//! 8-bit masks. Volumes are little-endian f32 in [S,1,H,W] row-major
//! order; masks are one byte per voxel (0 or 1) in [S,H,W] order.

use std::fs;
use std::path::Path;

use acat_core::synth::{ClassLabel, DatasetSpec, Mask, RegionLabel, SizeTier, Split, SynthSample};
use acat_core::Tensor;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::tensors::{decode_f32, encode_f32};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    label: ClassLabel,
    regions: Vec<RegionLabel>,
    tier: Option<SizeTier>,
    /// [S,1,H,W]
    shape: Vec<usize>,
    volume: String,
    mask: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchiveManifest {
    spec: DatasetSpec,
    split: Split,
    samples: Vec<SampleEntry>,
}

pub fn write_dataset(
    dir: &Path,
    samples: &[SynthSample],
    split: &Split,
    spec: &DatasetSpec,
) -> Result<()> {
    if samples.is_empty() {
        bail!("refusing to write an empty dataset archive");
    }
    fs::create_dir_all(dir.join("volumes"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let volume = format!("volumes/sample_{i:04}.f32");
        let mask = format!("masks/sample_{i:04}.u8");
        fs::write(dir.join(&volume), encode_f32(&s.volume.to_vec()))?;
        fs::write(dir.join(&mask), &s.mask.data)?;
        entries.push(SampleEntry {
            label: s.label,
            regions: s.regions.clone(),
            tier: s.tier,
            shape: s.volume.shape(),
            volume,
            mask,
        });
    }
    let manifest = ArchiveManifest {
        spec: spec.clone(),
        split: split.clone(),
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path, hint: &str) -> Result<(Vec<SynthSample>, Split, DatasetSpec)> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        bail!("missing dataset manifest at {}; {hint}", mpath.display());
    }
    let manifest: ArchiveManifest = serde_json::from_slice(&fs::read(&mpath)?)
        .with_context(|| format!("invalid dataset manifest {}", mpath.display()))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        if entry.shape.len() != 4 || entry.shape[1] != 1 {
            bail!("sample {}: bad volume shape {:?}", entry.volume, entry.shape);
        }
        let vpath = dir.join(&entry.volume);
        let bytes = fs::read(&vpath)
            .with_context(|| format!("missing sample volume at {}", vpath.display()))?;
        let numel: usize = entry.shape.iter().product();
        if bytes.len() != numel * 4 {
            bail!(
                "{}: {} bytes do not match shape {:?}",
                vpath.display(),
                bytes.len(),
                entry.shape
            );
        }
        let volume = Tensor::new(&entry.shape, decode_f32(&bytes))?;
        let (s, h, w) = (entry.shape[0], entry.shape[2], entry.shape[3]);
        let mpath = dir.join(&entry.mask);
        let mask_bytes = fs::read(&mpath)
            .with_context(|| format!("missing sample mask at {}", mpath.display()))?;
        if mask_bytes.len() != s * h * w {
            bail!(
                "{}: {} bytes for a {s}x{h}x{w} mask",
                mpath.display(),
                mask_bytes.len()
            );
        }
        if let Some(&bad) = mask_bytes.iter().find(|&&b| b > 1) {
            bail!("{}: mask bytes must be 0 or 1, found {bad}", mpath.display());
        }
        let mut mask = Mask::empty(s, h, w);
        mask.data = mask_bytes;
        samples.push(SynthSample {
            volume,
            label: entry.label,
            regions: entry.regions.clone(),
            mask,
            tier: entry.tier,
        });
    }
    Ok((samples, manifest.split, manifest.spec))
}
