//! Guard bundle files (`WGGB`): a JSON manifest followed by a binary section
//! of little-endian `f32` blobs.
//!
//! ```text
//! 0   magic "WGGB"
//! 4   format_version  u32
//! 8   manifest_len    u64
//! 16  manifest_crc32  u32
//! 20  manifest        UTF-8 JSON, manifest_len bytes
//! ..  binary section  binary_len bytes (declared in the manifest)
//! ```
//!
//! Blob offsets are relative to the start of the binary section. Each profile
//! owns a mean blob (`d` floats) and a whitening blob (`k x d` floats,
//! row-major), each with its own CRC32.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationConfig;
use crate::error::{Error, Result, StorageError};
use crate::guard::{GuardBundle, GuardProfile, BUNDLE_FORMAT_VERSION};
use crate::stats::WhiteningTransform;

pub const BUNDLE_MAGIC: [u8; 4] = *b"WGGB";
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub category: String,
    pub operational_layer: usize,
    pub k: usize,
    pub threshold: f64,
    pub calibration_auc: f64,
    pub eigenvalue_floor: f64,
    pub mean: BlobRef,
    pub whitening: BlobRef,
}

/// Bundle metadata; everything except the float blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub format_version: u32,
    pub model_id: String,
    pub created_at: String,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub config: CalibrationConfig,
    pub binary_len: u64,
    pub profiles: Vec<ProfileEntry>,
}

fn push_blob(binary: &mut Vec<u8>, values: impl Iterator<Item = f64>) -> BlobRef {
    let start = binary.len();
    for v in values {
        binary.extend_from_slice(&(v as f32).to_le_bytes());
    }
    BlobRef {
        offset: start as u64,
        length: (binary.len() - start) as u64,
        crc32: crc32fast::hash(&binary[start..]),
    }
}

/// Builds the manifest and binary section for `bundle`.
pub fn manifest_for(bundle: &GuardBundle) -> Result<(BundleManifest, Vec<u8>)> {
    bundle.validate()?;
    let mut binary = Vec::new();
    let mut profiles = Vec::with_capacity(bundle.profiles.len());
    for p in bundle.profiles.values() {
        let mean = push_blob(&mut binary, p.transform.mean.iter().copied());
        let m = &p.transform.matrix;
        let whitening = push_blob(
            &mut binary,
            (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])),
        );
        profiles.push(ProfileEntry {
            category: p.category.clone(),
            operational_layer: p.operational_layer,
            k: p.k(),
            threshold: p.threshold,
            calibration_auc: p.calibration_auc,
            eigenvalue_floor: p.transform.eigenvalue_floor,
            mean,
            whitening,
        });
    }
    let manifest = BundleManifest {
        format_version: bundle.format_version,
        model_id: bundle.model_id.clone(),
        created_at: bundle.created_at.to_rfc3339_opts(SecondsFormat::AutoSi, true),
        layer_count: bundle.layer_count,
        hidden_dim: bundle.hidden_dim,
        config: bundle.config.clone(),
        binary_len: binary.len() as u64,
        profiles,
    };
    Ok((manifest, binary))
}

pub fn encode_bundle(bundle: &GuardBundle) -> Result<Vec<u8>> {
    if bundle.format_version != BUNDLE_FORMAT_VERSION {
        return Err(StorageError::UnsupportedVersion(bundle.format_version).into());
    }
    let (manifest, binary) = manifest_for(bundle)?;
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| StorageError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + binary.len());
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&binary);
    Ok(out)
}

pub fn save_bundle(bundle: &GuardBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bundle(bundle)?;
    std::fs::write(path, bytes).map_err(|e| StorageError::io(path, e).into())
}

/// Parses and checks the header and manifest, returning the manifest and
/// the binary section.
pub fn read_manifest(bytes: &[u8]) -> Result<(BundleManifest, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(StorageError::Truncated(format!(
            "bundle header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        ))
        .into());
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("length checked");
    if magic != BUNDLE_MAGIC {
        return Err(StorageError::BadMagic {
            expected: BUNDLE_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("length checked"));
    if version != BUNDLE_FORMAT_VERSION {
        return Err(StorageError::UnsupportedVersion(version).into());
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("length checked"));
    let crc = u32::from_le_bytes(bytes[16..20].try_into().expect("length checked"));
    let available = (bytes.len() - HEADER_LEN) as u64;
    if manifest_len > available {
        return Err(StorageError::Truncated(format!(
            "manifest claims {manifest_len} bytes, only {available} follow the header"
        ))
        .into());
    }
    let manifest_end = HEADER_LEN + manifest_len as usize;
    let json = &bytes[HEADER_LEN..manifest_end];
    if crc32fast::hash(json) != crc {
        return Err(StorageError::Checksum("manifest".into()).into());
    }
    let manifest: BundleManifest =
        serde_json::from_slice(json).map_err(|e| StorageError::Manifest(e.to_string()))?;
    if manifest.format_version != version {
        return Err(StorageError::Manifest(format!(
            "manifest version {} disagrees with header version {version}",
            manifest.format_version
        ))
        .into());
    }
    let binary = &bytes[manifest_end..];
    let actual = binary.len() as u64;
    if actual < manifest.binary_len {
        return Err(StorageError::Truncated(format!(
            "binary section has {actual} of {} bytes",
            manifest.binary_len
        ))
        .into());
    }
    if actual > manifest.binary_len {
        return Err(StorageError::TrailingBytes(format!(
            "{} bytes after the binary section",
            actual - manifest.binary_len
        ))
        .into());
    }
    Ok((manifest, binary))
}

fn blob<'a>(
    binary: &'a [u8],
    r: &BlobRef,
    expected_floats: usize,
    profile: &str,
    what: &str,
) -> Result<Vec<f64>> {
    let end = r.offset.checked_add(r.length);
    if end.is_none_or(|e| e > binary.len() as u64) {
        return Err(StorageError::Offset {
            profile: profile.to_string(),
            detail: format!(
                "{what} blob [{}, +{}) exceeds binary section of {} bytes",
                r.offset,
                r.length,
                binary.len()
            ),
        }
        .into());
    }
    if r.length != 4 * expected_floats as u64 {
        return Err(StorageError::Manifest(format!(
            "profile {profile:?}: {what} blob has {} bytes, expected {}",
            r.length,
            4 * expected_floats
        ))
        .into());
    }
    let data: &'a [u8] = &binary[r.offset as usize..(r.offset + r.length) as usize];
    if crc32fast::hash(data) != r.crc32 {
        return Err(StorageError::Checksum(format!("{what} blob of profile {profile:?}")).into());
    }
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StorageError::Malformed(format!(
            "non-finite value in {what} blob of profile {profile:?}"
        ))
        .into());
    }
    Ok(values)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<GuardBundle> {
    let (manifest, binary) = read_manifest(bytes)?;
    let d = manifest.hidden_dim;
    let mut profiles = BTreeMap::new();
    for entry in &manifest.profiles {
        let name = entry.category.as_str();
        let floats = entry.k.checked_mul(d).ok_or_else(|| {
            StorageError::Manifest(format!("profile {name:?}: k x d overflows"))
        })?;
        let mean = blob(binary, &entry.mean, d, name, "mean")?;
        let matrix = blob(binary, &entry.whitening, floats, name, "whitening")?;
        let profile = GuardProfile {
            category: entry.category.clone(),
            operational_layer: entry.operational_layer,
            transform: WhiteningTransform {
                mean: DVector::from_vec(mean),
                matrix: DMatrix::from_row_slice(entry.k, d, &matrix),
                eigenvalue_floor: entry.eigenvalue_floor,
            },
            threshold: entry.threshold,
            calibration_auc: entry.calibration_auc,
        };
        if profiles.insert(entry.category.clone(), profile).is_some() {
            return Err(StorageError::Manifest(format!("duplicate profile {name:?}")).into());
        }
    }
    let created_at = DateTime::parse_from_rfc3339(&manifest.created_at)
        .map_err(|e| StorageError::Manifest(format!("created_at: {e}")))?
        .with_timezone(&Utc);
    let bundle = GuardBundle {
        format_version: manifest.format_version,
        model_id: manifest.model_id,
        created_at,
        config: manifest.config,
        layer_count: manifest.layer_count,
        hidden_dim: d,
        profiles,
    };
    bundle.validate().map_err(|e| match e {
        Error::Configuration(msg) => StorageError::Manifest(msg).into(),
        other => other,
    })?;
    Ok(bundle)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<GuardBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| StorageError::io(path, e))?;
    decode_bundle(&bytes)
}
