//! On-disk checkpoints: one safetensors file per parameter group (parameters,
//! batch-norm buffers and optimizer moments) plus a JSON manifest carrying the
//! spec hash, progress counters and random-source states.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use infogan_nn::{Adam, AdamState, Scalar, Sequential};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::latent::LatentSpec;
use crate::nets::{ArchConfig, ImageShape, Networks};
use crate::objectives::ParamGroup;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: invalid manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Payload { path: PathBuf, reason: String },
    #[error("checkpoint was written for spec {found}, current configuration hashes to {expected}")]
    SpecMismatch { expected: String, found: String },
}

/// Hex SHA-256 of the latent spec, architecture and image geometry: the
/// settings that fix every parameter shape.
pub fn spec_hash(spec: &LatentSpec, arch: &ArchConfig, shape: &ImageShape) -> String {
    let canonical = serde_json::to_string(&(spec, arch, shape)).expect("serializable spec");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Random sources whose state is saved for resumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStates {
    pub data: ChaCha8Rng,
    pub latent: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub spec_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: RngStates,
    /// Optimizer step counters of the groups that have an optimizer.
    pub optimizer_steps: BTreeMap<String, u64>,
}

/// Element types that can be stored.
pub trait Storable: Scalar {
    const DTYPE: Dtype;
    fn write_le(values: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Vec<Self>;
}

impl Storable for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
    }
}

impl Storable for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
    }
}

fn encode<T: Storable>(t: &ArrayD<T>) -> (Vec<usize>, Vec<u8>) {
    let std = t.as_standard_layout();
    let mut bytes = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
    T::write_le(std.as_slice().expect("standard layout"), &mut bytes);
    (t.shape().to_vec(), bytes)
}

fn group_tensors<T: Storable>(net: &Sequential<T>, adam: Option<&Adam<T>>) -> Vec<(String, (Vec<usize>, Vec<u8>))> {
    let mut out = Vec::new();
    for (name, p) in net.param_names().into_iter().zip(net.params()) {
        out.push((format!("param.{name}"), encode(p)));
    }
    for (name, b) in net.buffer_names().into_iter().zip(net.buffers()) {
        out.push((format!("buffer.{name}"), encode(b)));
    }
    if let Some(adam) = adam {
        for (name, (m, v)) in net.param_names().into_iter().zip(adam.state.m.iter().zip(&adam.state.v)) {
            out.push((format!("adam_m.{name}"), encode(m)));
            out.push((format!("adam_v.{name}"), encode(v)));
        }
    }
    out
}

/// Serialized safetensors payload of one group.
pub fn group_payload<T: Storable>(net: &Sequential<T>, adam: Option<&Adam<T>>) -> Vec<u8> {
    let tensors = group_tensors(net, adam);
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(name, (shape, bytes))| {
            (name.clone(), TensorView::new(T::DTYPE, shape.clone(), bytes).expect("consistent tensor view"))
        })
        .collect();
    safetensors::tensor::serialize(views, None).expect("serializable tensors")
}

fn group_file(dir: &Path, group: ParamGroup) -> PathBuf {
    dir.join(format!("{}.safetensors", group.name()))
}

/// Writes a checkpoint directory, replacing any previous contents.
pub fn save<T: Storable>(
    dir: &Path,
    nets: &Networks<T>,
    optimizers: &[Option<Adam<T>>; 5],
    manifest: &Manifest,
) -> Result<(), CheckpointError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| CheckpointError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for group in ParamGroup::ALL {
        let path = group_file(dir, group);
        fs::write(&path, group_payload(nets.group(group), optimizers[group.index()].as_ref())).map_err(io(&path))?;
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(manifest).expect("serializable manifest");
    fs::write(&path, json).map_err(io(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|source| CheckpointError::Io { path: path.clone(), source })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest { path: path.clone(), reason: e.to_string() })?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Manifest { path, reason: format!("unsupported format {}", manifest.format) });
    }
    Ok(manifest)
}

fn restore_into<T: Storable>(
    path: &Path,
    bytes: &[u8],
    net: &mut Sequential<T>,
    adam: Option<&mut Adam<T>>,
) -> Result<(), CheckpointError> {
    let bad = |reason: String| CheckpointError::Payload { path: path.to_owned(), reason };
    let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
    let fetch = |name: &str, like: &ArrayD<T>| -> Result<ArrayD<T>, CheckpointError> {
        let view = st.tensor(name).map_err(|e| bad(format!("{name}: {e}")))?;
        if view.dtype() != T::DTYPE || view.shape() != like.shape() {
            return Err(bad(format!("{name}: expected {:?} {:?}, found {:?} {:?}", T::DTYPE, like.shape(), view.dtype(), view.shape())));
        }
        Ok(ArrayD::from_shape_vec(IxDyn(view.shape()), T::read_le(view.data())).expect("checked shape"))
    };
    let names = net.param_names();
    let params: Vec<ArrayD<T>> = names
        .iter()
        .zip(net.params())
        .map(|(n, p)| fetch(&format!("param.{n}"), p))
        .collect::<Result<_, _>>()?;
    let buffers: Vec<ArrayD<T>> = net
        .buffer_names()
        .iter()
        .zip(net.buffers())
        .map(|(n, b)| fetch(&format!("buffer.{n}"), b))
        .collect::<Result<_, _>>()?;
    let moments = match &adam {
        Some(_) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (n, p) in names.iter().zip(net.params()) {
                m.push(fetch(&format!("adam_m.{n}"), p)?);
                v.push(fetch(&format!("adam_v.{n}"), p)?);
            }
            Some((m, v))
        }
        None => None,
    };
    for (dst, src) in net.params_mut().into_iter().zip(params) {
        *dst = src;
    }
    for (dst, src) in net.buffers_mut().into_iter().zip(buffers) {
        *dst = src;
    }
    if let (Some(adam), Some((m, v))) = (adam, moments) {
        adam.state.m = m;
        adam.state.v = v;
    }
    Ok(())
}

/// Restores networks and optimizer moments in place. Optimizers present in
/// the manifest are created with `make_adam` before their moments are read.
pub fn load<T: Storable>(
    dir: &Path,
    expected_hash: &str,
    nets: &mut Networks<T>,
    optimizers: &mut [Option<Adam<T>>; 5],
    make_adam: impl Fn(ParamGroup, &Sequential<T>) -> Adam<T>,
) -> Result<Manifest, CheckpointError> {
    let manifest = read_manifest(dir)?;
    if manifest.spec_hash != expected_hash {
        return Err(CheckpointError::SpecMismatch { expected: expected_hash.to_owned(), found: manifest.spec_hash });
    }
    for group in ParamGroup::ALL {
        let path = group_file(dir, group);
        let bytes = fs::read(&path).map_err(|source| CheckpointError::Io { path: path.clone(), source })?;
        let slot = &mut optimizers[group.index()];
        *slot = manifest.optimizer_steps.get(group.name()).map(|&step| {
            let mut adam = make_adam(group, nets.group(group));
            adam.state = AdamState { step, ..adam.state };
            adam
        });
        restore_into(&path, &bytes, nets.group_mut(group), slot.as_mut())?;
    }
    Ok(manifest)
}

/// Loads only the networks (no optimizer state), e.g. for evaluation.
pub fn load_networks<T: Storable>(dir: &Path, expected_hash: &str, nets: &mut Networks<T>) -> Result<Manifest, CheckpointError> {
    let mut optimizers: [Option<Adam<T>>; 5] = Default::default();
    let manifest = read_manifest(dir)?;
    if manifest.spec_hash != expected_hash {
        return Err(CheckpointError::SpecMismatch { expected: expected_hash.to_owned(), found: manifest.spec_hash });
    }
    for group in ParamGroup::ALL {
        let path = group_file(dir, group);
        let bytes = fs::read(&path).map_err(|source| CheckpointError::Io { path: path.clone(), source })?;
        restore_into(&path, &bytes, nets.group_mut(group), optimizers[group.index()].as_mut())?;
    }
    Ok(manifest)
}
