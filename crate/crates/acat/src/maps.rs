//! Saliency map stores and counterfactual trace export. Each map volume
//! is written as a raw f32 sidecar (the authoritative data) plus one
//! max-scaled 8-bit PGM per slice for quick inspection; traces go to
//! JSON lines with one record per optimization step.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use acat_core::counterfactual::CounterfactualTrace;
use acat_core::saliency::SaliencyMap;
use acat_core::Tensor;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::parse_method;
use crate::tensors::{decode_f32, encode_f32};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapStoreMeta {
    pub method: String,
    pub count: usize,
    /// [S,1,H,W]
    pub shape: Vec<usize>,
    pub seed: u64,
    pub config_sha256: String,
}

/// 8-bit binary PGM of one plane, scaled so the plane maximum maps to 255.
pub fn pgm_bytes(plane: &[f32], height: usize, width: usize) -> Vec<u8> {
    debug_assert_eq!(plane.len(), height * width);
    let max = plane.iter().fold(0.0f32, |m, &v| m.max(v));
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in plane {
        let byte = if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        out.push(byte);
    }
    out
}

pub fn write_maps(
    dir: &Path,
    maps: &[SaliencyMap],
    seed: u64,
    config_sha256: &str,
) -> Result<()> {
    if maps.is_empty() {
        bail!("refusing to write an empty map store");
    }
    let shape = maps[0].maps.shape();
    let method = maps[0].method;
    for m in maps {
        if m.maps.shape() != shape || m.method != method {
            bail!("map store requires uniform shape and method");
        }
    }
    fs::create_dir_all(dir.join("maps"))?;
    let (slices, h, w) = (shape[0], shape[2], shape[3]);
    for (i, m) in maps.iter().enumerate() {
        let data = m.maps.to_vec();
        fs::write(
            dir.join(format!("maps/sample_{i:04}.f32")),
            encode_f32(&data),
        )?;
        for s in 0..slices {
            let plane = &data[s * h * w..(s + 1) * h * w];
            fs::write(
                dir.join(format!("maps/sample_{i:04}_s{s}.pgm")),
                pgm_bytes(plane, h, w),
            )?;
        }
    }
    let meta = MapStoreMeta {
        method: method.name().into(),
        count: maps.len(),
        shape,
        seed,
        config_sha256: config_sha256.into(),
    };
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(dir.join("metadata.json"), json + "\n")?;
    Ok(())
}

pub fn read_maps(dir: &Path, hint: &str) -> Result<(MapStoreMeta, Vec<SaliencyMap>)> {
    let mpath = dir.join("metadata.json");
    if !mpath.exists() {
        bail!("missing saliency metadata at {}; {hint}", mpath.display());
    }
    let meta: MapStoreMeta = serde_json::from_slice(&fs::read(&mpath)?)
        .with_context(|| format!("invalid saliency metadata {}", mpath.display()))?;
    if meta.count == 0 {
        bail!("empty map store at {}", dir.display());
    }
    let method = parse_method(&meta.method)?;
    let numel: usize = meta.shape.iter().product();
    let mut maps = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let path = dir.join(format!("maps/sample_{i:04}.f32"));
        let bytes = fs::read(&path)
            .with_context(|| format!("missing saliency map at {}", path.display()))?;
        if bytes.len() != numel * 4 {
            bail!(
                "{}: {} bytes do not match shape {:?}",
                path.display(),
                bytes.len(),
                meta.shape
            );
        }
        maps.push(SaliencyMap::new(
            method,
            Tensor::new(&meta.shape, decode_f32(&bytes))?,
        )?);
    }
    Ok((meta, maps))
}

#[derive(Serialize)]
struct TraceRow<'a> {
    step: usize,
    objective: f32,
    ce: f32,
    l1: f32,
    probs: &'a [f32],
}

/// One JSON object per line, one line per step including step 0.
pub fn write_trace_jsonl(path: &Path, trace: &CounterfactualTrace) -> Result<()> {
    let mut out = Vec::new();
    for (i, step) in trace.steps.iter().enumerate() {
        let probs = step.probs.to_vec();
        let row = TraceRow {
            step: i,
            objective: step.objective,
            ce: step.ce,
            l1: step.l1,
            probs: &probs,
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Exports a decoded volume or difference map as PGM slices + sidecar.
pub fn write_volume_images(dir: &Path, stem: &str, volume: &Tensor) -> Result<()> {
    let shape = volume.shape();
    if shape.len() != 4 || shape[1] != 1 {
        bail!("expected an [S,1,H,W] volume, got {shape:?}");
    }
    fs::create_dir_all(dir)?;
    let data = volume.to_vec();
    let (slices, h, w) = (shape[0], shape[2], shape[3]);
    fs::write(dir.join(format!("{stem}.f32")), encode_f32(&data))?;
    for s in 0..slices {
        let plane = &data[s * h * w..(s + 1) * h * w];
        fs::write(dir.join(format!("{stem}_s{s}.pgm")), pgm_bytes(plane, h, w))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use acat_core::counterfactual::{optimize_counterfactual, CounterfactualConfig};
    use acat_core::nets::{Autoencoder, ClassifierConfig, ModelGraph};
    use acat_core::rng;
    use acat_core::saliency::SaliencyMethod;

    fn random_map(seed: u64, method: SaliencyMethod) -> SaliencyMap {
        let mut r = rng::substream(seed, "maps-test", 0);
        SaliencyMap::new(
            method,
            Tensor::new(&[2, 1, 8, 8], rng::uniform_vec(128, 0.0, 1.0, &mut r)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn pgm_header_and_scaling() {
        let bytes = pgm_bytes(&[0.0, 0.25, 0.5, 1.0], 2, 2);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        let pixels = &bytes[bytes.len() - 4..];
        assert_eq!(pixels, &[0, 64, 128, 255]);
        let flat = pgm_bytes(&[0.0; 4], 2, 2);
        assert_eq!(&flat[flat.len() - 4..], &[0, 0, 0, 0]);
        let half = pgm_bytes(&[0.1, 0.2], 1, 2);
        assert_eq!(&half[half.len() - 2..], &[128, 255], "max-scaled, not absolute");
    }

    #[test]
    fn map_store_roundtrip_and_method_tag() {
        let dir = tempfile::tempdir().unwrap();
        let maps: Vec<SaliencyMap> =
            (0..3).map(|i| random_map(i, SaliencyMethod::Gradient)).collect();
        write_maps(dir.path(), &maps, 11, "abc").unwrap();
        let (meta, back) = read_maps(dir.path(), "generate first").unwrap();
        assert_eq!(meta.method, "gradient");
        assert_eq!(meta.seed, 11);
        assert_eq!(back.len(), 3);
        for (a, b) in maps.iter().zip(back.iter()) {
            assert_eq!(b.method, SaliencyMethod::Gradient);
            let ab: Vec<u32> = a.maps.to_vec().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.maps.to_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let pgms = fs::read_dir(dir.path().join("maps"))
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().map(|x| x == "pgm").unwrap_or(false)
            })
            .count();
        assert_eq!(pgms, 6);
    }

    #[test]
    fn distinct_methods_produce_distinct_tags() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_maps(d1.path(), &[random_map(1, SaliencyMethod::Gradient)], 0, "h").unwrap();
        write_maps(d2.path(), &[random_map(1, SaliencyMethod::Counterfactual)], 0, "h").unwrap();
        let (m1, _) = read_maps(d1.path(), "x").unwrap();
        let (m2, _) = read_maps(d2.path(), "x").unwrap();
        assert_eq!(m1.method, "gradient");
        assert_eq!(m2.method, "counterfactual");
    }

    #[test]
    fn empty_and_missing_stores_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_maps(dir.path(), &[], 0, "h").is_err());
        let err = read_maps(dir.path(), "run gen-saliency first").unwrap_err();
        assert!(format!("{err:#}").contains("run gen-saliency first"));
        let meta = MapStoreMeta {
            method: "gradient".into(),
            count: 0,
            shape: vec![1, 1, 4, 4],
            seed: 0,
            config_sha256: String::new(),
        };
        fs::write(
            dir.path().join("metadata.json"),
            serde_json::to_string(&meta).unwrap(),
        )
        .unwrap();
        let err = read_maps(dir.path(), "x").unwrap_err();
        assert!(format!("{err:#}").contains("empty map store"));
    }

    #[test]
    fn trace_jsonl_has_one_parseable_row_per_step() {
        let config = ClassifierConfig {
            layers: vec![],
            input: (1, 8, 8),
            num_classes: 3,
            input_shift: 0.0,
            input_scale: 1.0,
        };
        let f = ModelGraph::build(&config, 1).unwrap();
        let ae = Autoencoder::build((1, 8, 8), 2).unwrap();
        let mut r = rng::substream(3, "trace-test", 0);
        let x = Tensor::new(&[1, 1, 8, 8], rng::uniform_vec(64, 0.0, 1.0, &mut r)).unwrap();
        let cfg = CounterfactualConfig { steps: 4, ..CounterfactualConfig::toward(1) };
        let trace = optimize_counterfactual(&f, &ae, &x, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        write_trace_jsonl(&path, &trace).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        for (i, line) in lines.iter().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["step"], i);
            assert_eq!(v["probs"].as_array().unwrap().len(), 3);
            assert!(v["objective"].is_number());
            assert!(v["ce"].is_number());
            assert!(v["l1"].is_number());
        }
    }
}
