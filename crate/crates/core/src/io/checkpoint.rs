//! Tensor container: `[u64 LE manifest length][manifest JSON][f32 LE payload]`.
//!
//! The manifest lists `{name, shape, dtype}` in payload order. An optional
//! metadata block carries free-form strings and is ignored when comparing
//! payloads.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterRegistry, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const DTYPE_F32: &str = "f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<BTreeMap<String, String>>,
}

/// Decoded container contents, in manifest order.
#[derive(Clone, Debug, Default)]
pub struct Container {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: Option<BTreeMap<String, String>>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Serializes named tensors, converting every value to `f32`.
pub fn encode_container<'a, T: Scalar>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    metadata: Option<&BTreeMap<String, String>>,
) -> Result<Vec<u8>> {
    let mut manifest = Manifest {
        tensors: Vec::new(),
        metadata: metadata.cloned(),
    };
    let mut payload = Vec::new();
    for (name, t) in tensors {
        if !t.is_finite() {
            return Err(Error::Checkpoint(format!("tensor `{name}` has non-finite values")));
        }
        manifest.tensors.push(ManifestEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            dtype: DTYPE_F32.into(),
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[..8]);
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::Checkpoint("manifest length overflows".into()))?;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..header_len]).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let payload = &body[header_len..];
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest describes {expected}",
            payload.len()
        )));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        if entry.dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has unsupported dtype `{}`",
                entry.name, entry.dtype
            )));
        }
        let count: usize = entry.shape.iter().product();
        let data: Vec<f32> = payload[offset..offset + count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += count * 4;
        let t = Tensor::new(entry.shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", entry.name)))?;
        tensors.push((entry.name, t));
    }
    Ok(Container {
        tensors,
        metadata: manifest.metadata,
    })
}

pub fn write_container_file<'a, T: Scalar>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    metadata: Option<&BTreeMap<String, String>>,
) -> Result<()> {
    let bytes = encode_container(tensors, metadata)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_container_file(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_container(&bytes)
}

/// Writes every registry tensor in lexicographic order.
pub fn save_checkpoint<T: Scalar>(registry: &ParameterRegistry<T>, path: &Path) -> Result<()> {
    write_container_file(path, registry.iter(), None)
}

pub fn save_checkpoint_with_metadata<T: Scalar>(
    registry: &ParameterRegistry<T>,
    path: &Path,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    write_container_file(path, registry.iter(), Some(metadata))
}

pub fn registry_from_container<T: Scalar>(c: &Container) -> ParameterRegistry<T> {
    let mut r = ParameterRegistry::new();
    for (name, t) in &c.tensors {
        r.insert(name.clone(), t.cast());
    }
    r
}

/// Loads all tensors without a layout check.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParameterRegistry<T>> {
    Ok(registry_from_container(&read_container_file(path)?))
}

/// Loads a checkpoint whose names and shapes must match `expected`
/// exactly.
pub fn load_checkpoint_into<T: Scalar>(path: &Path, expected: &ParameterRegistry<T>) -> Result<ParameterRegistry<T>> {
    let loaded: ParameterRegistry<T> = load_checkpoint(path)?;
    check_layout(&loaded, expected)?;
    Ok(loaded)
}

/// Errors with the first (lexicographic) name that is missing, unexpected
/// or differently shaped.
pub fn check_layout<T: Scalar>(found: &ParameterRegistry<T>, expected: &ParameterRegistry<T>) -> Result<()> {
    let mut names: Vec<&str> = found.names().chain(expected.names()).collect();
    names.sort_unstable();
    names.dedup();
    for name in names {
        match (found.get(name), expected.get(name)) {
            (Some(a), Some(b)) if a.shape() == b.shape() => {}
            (Some(a), Some(b)) => {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )))
            }
            (Some(_), None) => return Err(Error::Checkpoint(format!("unexpected tensor `{name}`"))),
            (None, _) => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_registry_is_a_valid_container() {
        let r = ParameterRegistry::<f64>::new();
        let bytes = encode_container(r.iter(), None).unwrap();
        let c = decode_container(&bytes).unwrap();
        assert!(c.tensors.is_empty());
    }

    #[test]
    fn two_by_two_payload_is_sixteen_bytes() {
        let t = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_container([("w", &t)], None).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 8 - header_len, 16);
        assert_eq!(&bytes[8 + header_len..8 + header_len + 4], &1.0f32.to_le_bytes());
        assert_eq!(
            std::str::from_utf8(&bytes[8..8 + header_len]).unwrap(),
            r#"{"tensors":[{"name":"w","shape":[2,2],"dtype":"f32"}]}"#
        );
    }

    #[test]
    fn round_trip_within_f32_precision() {
        let mut r = ParameterRegistry::<f64>::new();
        r.insert("a", Tensor::new(vec![3], vec![0.1, -1.0 / 3.0, 12345.678]).unwrap());
        r.insert("b.c", Tensor::new(vec![1, 2], vec![1e-7, -2.5]).unwrap());
        let bytes = encode_container(r.iter(), None).unwrap();
        let back: ParameterRegistry<f64> = registry_from_container(&decode_container(&bytes).unwrap());
        check_layout(&back, &r).unwrap();
        for (name, t) in r.iter() {
            for (x, y) in t.data().iter().zip(back.get(name).unwrap().data()) {
                assert!((x - y).abs() <= x.abs() * 2f64.powi(-24));
            }
        }
    }

    #[test]
    fn layout_mismatch_names_first_offender() {
        let mut a = ParameterRegistry::<f64>::new();
        a.insert("x", Tensor::zeros(&[2]));
        a.insert("y", Tensor::zeros(&[2]));
        let mut b = a.clone();
        b.insert("x", Tensor::zeros(&[3]));
        let err = check_layout(&b, &a).unwrap_err().to_string();
        assert!(err.contains("`x`"), "{err}");
        let mut c = a.clone();
        c.insert("w", Tensor::zeros(&[1]));
        assert!(check_layout(&c, &a).unwrap_err().to_string().contains("unexpected tensor `w`"));
        assert!(check_layout(&a, &c).unwrap_err().to_string().contains("missing tensor `w`"));
    }

    #[test]
    fn corrupt_payload_rejected() {
        let t = Tensor::<f64>::zeros(&[2, 2]);
        let mut bytes = encode_container([("w", &t)], None).unwrap();
        bytes.pop();
        assert!(matches!(decode_container(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode_container(&[1, 2, 3]).is_err());
    }

    #[test]
    fn metadata_round_trips() {
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), "pretrain".to_string());
        let t = Tensor::<f32>::zeros(&[1]);
        let c = decode_container(&encode_container([("w", &t)], Some(&meta)).unwrap()).unwrap();
        assert_eq!(c.metadata, Some(meta));
    }
}
