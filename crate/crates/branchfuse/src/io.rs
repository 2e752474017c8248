//! Block spec files and weight manifests.
//!
//! A block spec is a small TOML document mirroring `BlockSpec`. Weights are
//! stored as a TOML manifest listing tensor names, shapes and byte offsets,
//! plus a sidecar file holding the raw little-endian payload. The format is
//! deliberately self-contained so other implementations can interoperate on
//! the same files; tensor names follow the canonical
//! `branch<i>.stage<j>.{kernel,bias,bn.*}` scheme.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::{build_block, BlockParams, BlockSpec, BnMode, BranchSet, Variant};
use crate::error::{Error, Result};
use crate::tensor::ElementType;
use crate::transforms::PadMode;

pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Block spec files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SpecFile {
    format_version: u32,
    block: SpecBody,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpecBody {
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
    stride: usize,
    groups: usize,
    variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    duplicates: Option<usize>,
    branches: Vec<String>,
    bn_mode: String,
    pad_mode: String,
}

fn branches_to_names(set: &BranchSet) -> Vec<String> {
    let mut out = Vec::new();
    if set.kxk {
        out.push("kxk".into());
    }
    if set.one_by_one {
        out.push("1x1".into());
    }
    if set.one_by_one_kxk {
        out.push("1x1_kxk".into());
    }
    if set.one_by_one_avg {
        out.push("1x1_avg".into());
    }
    out
}

fn branches_from_names(names: &[String]) -> Result<BranchSet> {
    let mut set = BranchSet {
        kxk: false,
        one_by_one: false,
        one_by_one_kxk: false,
        one_by_one_avg: false,
    };
    for name in names {
        match name.as_str() {
            "kxk" => set.kxk = true,
            "1x1" => set.one_by_one = true,
            "1x1_kxk" => set.one_by_one_kxk = true,
            "1x1_avg" => set.one_by_one_avg = true,
            other => {
                return Err(Error::SpecFile(format!(
                    "unknown branch {other:?}, expected kxk, 1x1, 1x1_kxk or 1x1_avg"
                )))
            }
        }
    }
    Ok(set)
}

/// Renders a spec as TOML. `spec_from_toml` parses it back losslessly.
pub fn spec_to_toml(spec: &BlockSpec) -> String {
    let (variant, duplicates) = match spec.variant {
        Variant::Dbb => ("dbb", None),
        Variant::Acb => ("acb", None),
        Variant::Duplicate(n) => ("duplicate", Some(n)),
        Variant::Baseline => ("baseline", None),
    };
    let file = SpecFile {
        format_version: FORMAT_VERSION,
        block: SpecBody {
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel_size: spec.kernel_size,
            stride: spec.stride,
            groups: spec.groups,
            variant: variant.into(),
            duplicates,
            branches: branches_to_names(&spec.branches),
            bn_mode: match spec.bn_mode {
                BnMode::PerBranch => "per_branch".into(),
                BnMode::PostAddOnly => "post_add_only".into(),
            },
            pad_mode: match spec.pad_mode {
                PadMode::PadFirst => "pad_first".into(),
                PadMode::BiasPad => "bias_pad".into(),
            },
        },
    };
    toml::to_string(&file).expect("spec bodies serialize")
}

pub fn spec_from_toml(text: &str) -> Result<BlockSpec> {
    let file: SpecFile =
        toml::from_str(text).map_err(|e| Error::SpecFile(format!("parse error: {e}")))?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::SpecFile(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    let b = &file.block;
    let variant = match (b.variant.as_str(), b.duplicates) {
        ("dbb", _) => Variant::Dbb,
        ("acb", _) => Variant::Acb,
        ("baseline", _) => Variant::Baseline,
        ("duplicate", Some(n)) => Variant::Duplicate(n),
        ("duplicate", None) => {
            return Err(Error::SpecFile(
                "duplicate variant needs a duplicates count".into(),
            ))
        }
        (other, _) => {
            return Err(Error::SpecFile(format!(
                "unknown variant {other:?}, expected dbb, acb, duplicate or baseline"
            )))
        }
    };
    let spec = BlockSpec {
        in_channels: b.in_channels,
        out_channels: b.out_channels,
        kernel_size: b.kernel_size,
        stride: b.stride,
        groups: b.groups,
        branches: branches_from_names(&b.branches)?,
        bn_mode: match b.bn_mode.as_str() {
            "per_branch" => BnMode::PerBranch,
            "post_add_only" => BnMode::PostAddOnly,
            other => {
                return Err(Error::SpecFile(format!(
                    "unknown bn_mode {other:?}, expected per_branch or post_add_only"
                )))
            }
        },
        pad_mode: match b.pad_mode.as_str() {
            "pad_first" => PadMode::PadFirst,
            "bias_pad" => PadMode::BiasPad,
            other => {
                return Err(Error::SpecFile(format!(
                    "unknown pad_mode {other:?}, expected pad_first or bias_pad"
                )))
            }
        },
        variant,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn save_spec(spec: &BlockSpec, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, spec_to_toml(spec))?;
    Ok(())
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<BlockSpec> {
    let text = std::fs::read_to_string(&path)?;
    spec_from_toml(&text)
}

// ---------------------------------------------------------------------------
// Weight manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    element_type: String,
    /// Payload file name, resolved relative to the manifest's directory.
    payload: String,
    payload_bytes: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn payload_name(manifest_path: &Path) -> String {
    let file = manifest_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "weights".into());
    format!("{file}.bin")
}

fn write_values(out: &mut Vec<u8>, values: &[f64], element_type: ElementType) {
    match element_type {
        ElementType::F64 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        ElementType::F32 => {
            for v in values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
}

fn read_values(bytes: &[u8], element_type: ElementType) -> Vec<f64> {
    match element_type {
        ElementType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        ElementType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
    }
}

/// Writes a block's parameters: a TOML manifest at `path` and the raw
/// little-endian payload in a `<path>.bin` sidecar. Saving as f32 narrows
/// values; a save/load round trip is bit-exact whenever the in-memory values
/// are representable in the chosen element type.
pub fn save_weights(
    block: &BlockParams,
    path: impl AsRef<Path>,
    element_type: ElementType,
) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for t in block.named_tensors() {
        let offset = payload.len() as u64;
        write_values(&mut payload, t.data, element_type);
        tensors.push(TensorEntry {
            name: t.name,
            shape: t.shape,
            offset,
        });
    }
    let manifest = ManifestFile {
        format_version: FORMAT_VERSION,
        element_type: element_type.name().into(),
        payload: payload_name(path),
        payload_bytes: payload.len() as u64,
        tensors,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::manifest(format!("serialize error: {e}")))?;
    std::fs::write(path, text)?;
    std::fs::write(payload_path(path, &manifest.payload), payload)?;
    Ok(())
}

fn payload_path(manifest_path: &Path, payload: &str) -> PathBuf {
    match manifest_path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(payload),
        _ => PathBuf::from(payload),
    }
}

/// Expected shapes per canonical name for a spec. Bias entries are optional
/// and validated against the owning kernel's output channels.
fn expected_shapes(spec: &BlockSpec) -> Result<HashMap<String, Vec<usize>>> {
    let skeleton = build_block(spec, 0)?;
    Ok(skeleton
        .named_tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect())
}

/// Loads a block saved by `save_weights`, validating the manifest against the
/// spec's expected parameter set. Failures name the offending entry.
pub fn load_weights(path: impl AsRef<Path>, spec: &BlockSpec) -> Result<BlockParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let manifest: ManifestFile =
        toml::from_str(&text).map_err(|e| Error::manifest(format!("parse error: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::manifest(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let element_type = ElementType::parse(&manifest.element_type)?;
    let payload = std::fs::read(payload_path(path, &manifest.payload))?;
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::manifest(format!(
            "payload {} holds {} bytes, manifest declares {}",
            manifest.payload,
            payload.len(),
            manifest.payload_bytes
        )));
    }

    let expected = expected_shapes(spec)?;
    let width = element_type.byte_width() as u64;
    let mut data = HashMap::new();
    let mut cursor = 0u64;
    for entry in &manifest.tensors {
        // Shape check against the spec; biases are optional entries whose
        // shape follows the owning kernel.
        match expected.get(&entry.name) {
            Some(shape) if *shape != entry.shape => {
                return Err(Error::manifest(format!(
                    "entry {}: expected shape {:?}, got {:?}",
                    entry.name, shape, entry.shape
                )));
            }
            Some(_) => {}
            None if entry.name.ends_with(".bias") => {
                let kernel = format!(
                    "{}.kernel",
                    entry.name.trim_end_matches(".bias")
                );
                match expected.get(&kernel) {
                    Some(kshape) if entry.shape == vec![kshape[0]] => {}
                    _ => {
                        return Err(Error::manifest(format!(
                            "entry {}: no matching conv stage in the spec",
                            entry.name
                        )))
                    }
                }
            }
            None => {
                return Err(Error::manifest(format!("unexpected entry {}", entry.name)));
            }
        }

        if entry.offset < cursor {
            return Err(Error::manifest(format!(
                "entry {}: offset {} overlaps the previous entry",
                entry.name, entry.offset
            )));
        }
        let len: usize = entry.shape.iter().product();
        let end = entry.offset + len as u64 * width;
        if end > payload.len() as u64 {
            return Err(Error::manifest(format!(
                "entry {}: bytes {}..{} exceed payload of {} bytes",
                entry.name,
                entry.offset,
                end,
                payload.len()
            )));
        }
        cursor = end;
        let bytes = &payload[entry.offset as usize..end as usize];
        data.insert(entry.name.clone(), read_values(bytes, element_type));
    }

    BlockParams::from_named_data(spec, &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{fuse_block, forward_block, randomize_block};
    use crate::tensor::{conv2d, Tensor4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn sample_specs() -> Vec<BlockSpec> {
        vec![
            BlockSpec::dbb(4, 6, 3, 1, 1),
            BlockSpec::dbb(4, 4, 3, 2, 4),
            BlockSpec::dbb(4, 6, 5, 1, 2).with_pad_mode(PadMode::PadFirst),
            BlockSpec::dbb(3, 5, 3, 1, 1).with_bn_mode(BnMode::PostAddOnly),
            BlockSpec::new(3, 4, 3, 1, 1, Variant::Acb),
            BlockSpec::new(3, 4, 3, 2, 1, Variant::Duplicate(3)),
            BlockSpec::baseline(2, 2, 3, 1, 1),
        ]
    }

    #[test]
    fn spec_files_roundtrip() {
        for spec in sample_specs() {
            let text = spec_to_toml(&spec);
            let parsed = spec_from_toml(&text).unwrap();
            assert_eq!(parsed, spec, "spec text:\n{text}");
        }
    }

    #[test]
    fn spec_file_rejects_bad_fields() {
        let spec = BlockSpec::dbb(4, 4, 3, 1, 1);
        let text = spec_to_toml(&spec);
        assert!(spec_from_toml(&text.replace("\"dbb\"", "\"dbbx\"")).is_err());
        assert!(spec_from_toml(&text.replace("\"bias_pad\"", "\"zeros\"")).is_err());
        assert!(spec_from_toml(&text.replace("format_version = 1", "format_version = 9")).is_err());
    }

    #[test]
    fn weights_roundtrip_bitwise_f64() {
        let dir = tempdir().unwrap();
        for (i, spec) in sample_specs().into_iter().enumerate() {
            let mut block = build_block(&spec, 50 + i as u64).unwrap();
            randomize_block(&mut block, 60 + i as u64);
            let path = dir.path().join(format!("block{i}.weights"));
            save_weights(&block, &path, ElementType::F64).unwrap();
            let loaded = load_weights(&path, &spec).unwrap();
            assert_eq!(loaded, block);
        }
    }

    #[test]
    fn weights_roundtrip_bitwise_f32() {
        let dir = tempdir().unwrap();
        let spec = BlockSpec::dbb(4, 6, 3, 1, 1);
        let mut block = build_block(&spec, 70).unwrap();
        randomize_block(&mut block, 71);
        let block = block.round_to_f32();
        let path = dir.path().join("block.weights");
        save_weights(&block, &path, ElementType::F32).unwrap();
        let loaded = load_weights(&path, &spec).unwrap();
        assert_eq!(loaded, block);
    }

    #[test]
    fn edited_shape_fails_naming_the_entry() {
        let dir = tempdir().unwrap();
        let spec = BlockSpec::dbb(4, 6, 3, 1, 1);
        let block = build_block(&spec, 72).unwrap();
        let path = dir.path().join("block.weights");
        save_weights(&block, &path, ElementType::F64).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let edited = text.replacen("shape = [6, 4, 3, 3]", "shape = [4, 6, 3, 3]", 1);
        assert_ne!(text, edited);
        std::fs::write(&path, edited).unwrap();

        let err = load_weights(&path, &spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("branch0.stage0.kernel"), "message: {msg}");
    }

    #[test]
    fn truncated_payload_fails() {
        let dir = tempdir().unwrap();
        let spec = BlockSpec::baseline(2, 2, 3, 1, 1);
        let block = build_block(&spec, 73).unwrap();
        let path = dir.path().join("block.weights");
        save_weights(&block, &path, ElementType::F64).unwrap();

        let bin = dir.path().join("block.weights.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 9]).unwrap();

        let err = load_weights(&path, &spec).unwrap_err();
        assert!(err.to_string().contains("bytes"), "message: {err}");
    }

    #[test]
    fn version_mismatch_fails() {
        let dir = tempdir().unwrap();
        let spec = BlockSpec::baseline(2, 2, 3, 1, 1);
        let block = build_block(&spec, 74).unwrap();
        let path = dir.path().join("block.weights");
        save_weights(&block, &path, ElementType::F64).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("format_version = 1", "format_version = 2", 1))
            .unwrap();
        let err = load_weights(&path, &spec).unwrap_err();
        assert!(err.to_string().contains("version"), "message: {err}");
    }

    #[test]
    fn fused_conv_saved_as_baseline_block_roundtrips() {
        let dir = tempdir().unwrap();
        let spec = BlockSpec::dbb(4, 8, 3, 1, 1);
        let mut block = build_block(&spec, 75).unwrap();
        randomize_block(&mut block, 76);
        let fused = fuse_block(&block).unwrap();

        let wrapped = BlockParams::from_single_conv(fused.clone()).unwrap();
        let path = dir.path().join("fused.weights");
        save_weights(&wrapped, &path, ElementType::F64).unwrap();
        let loaded = load_weights(&path, wrapped.spec()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = Tensor4::from_fn(1, 4, 6, 6, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let direct = conv2d(&x, &fused).unwrap();
        let via_block = forward_block(&loaded, &x).unwrap();
        assert_eq!(direct, via_block);
    }
}
