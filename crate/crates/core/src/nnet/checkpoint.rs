//! Checkpoint files: one line of JSON header, then a little-endian `f32`
//! blob holding every learnable tensor in spec order followed by each
//! batch-norm layer's running mean and variance.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::NetworkSpec;
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const CHECKPOINT_FORMAT: &str = "hipline-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: BlobKind,
}

/// Provenance of the weights in a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub stage: Option<String>,
    pub epoch: usize,
    pub seed: u64,
    /// Snapshot of the configuration that produced the weights.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub dataset_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub spec: NetworkSpec,
    pub tensors: Vec<BlobEntry>,
    pub blob_bytes: u64,
    pub metadata: TrainingMetadata,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blob: Vec<f32>,
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &Network<T>, metadata: TrainingMetadata) -> Self {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        let f = |v: &T| v.to_f32().unwrap_or(f32::NAN);
        for (i, t) in net.params().iter().enumerate() {
            tensors.push(BlobEntry {
                name: net.params().name(crate::tensor::ParamId(i)).to_string(),
                shape: t.shape().to_vec(),
                kind: BlobKind::Param,
            });
            blob.extend(t.data().iter().map(f));
        }
        for (i, s) in net.bn_stats().iter().enumerate() {
            tensors.push(BlobEntry {
                name: format!("bn{i}.mean"),
                shape: vec![s.mean.len()],
                kind: BlobKind::RunningMean,
            });
            blob.extend(s.mean.iter().map(f));
            tensors.push(BlobEntry {
                name: format!("bn{i}.var"),
                shape: vec![s.var.len()],
                kind: BlobKind::RunningVar,
            });
            blob.extend(s.var.iter().map(f));
        }
        Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                fingerprint: net.spec().fingerprint(),
                spec: net.spec().clone(),
                tensors,
                blob_bytes: (blob.len() * 4) as u64,
                metadata,
            },
            blob,
        }
    }

    /// Rebuild a network, refusing weights produced for a different spec.
    pub fn to_network<T: Scalar>(&self, expected: &NetworkSpec) -> Result<Network<T>> {
        let want = expected.fingerprint();
        if want != self.header.fingerprint {
            return Err(Error::Checkpoint(format!(
                "spec fingerprint mismatch: checkpoint {} vs expected {}",
                short(&self.header.fingerprint),
                short(&want)
            )));
        }
        self.network()
    }

    /// Rebuild the network described by the checkpoint's own header.
    pub fn network<T: Scalar>(&self) -> Result<Network<T>> {
        let mut net = Network::<T>::init(self.header.spec.clone(), 0);
        let mut params = Vec::new();
        let mut bn_mean = Vec::new();
        let mut bn_var = Vec::new();
        let mut offset = 0usize;
        for entry in &self.header.tensors {
            let n: usize = entry.shape.iter().product();
            let chunk: Vec<T> = self.blob[offset..offset + n]
                .iter()
                .map(|&v| T::from_f64_lossy(v as f64))
                .collect();
            offset += n;
            match entry.kind {
                BlobKind::Param => params.push(chunk),
                BlobKind::RunningMean => bn_mean.push(chunk),
                BlobKind::RunningVar => bn_var.push(chunk),
            }
        }
        let bn: Vec<_> = bn_mean.into_iter().zip(bn_var).collect();
        net.load_blobs(&params, &bn)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.reserve(self.blob.len() * 4);
        for v in &self.blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        if header.spec.fingerprint() != header.fingerprint {
            return Err(Error::Checkpoint(
                "header spec does not match its fingerprint".into(),
            ));
        }
        let body = &bytes[split + 1..];
        if body.len() as u64 != header.blob_bytes {
            return Err(Error::Checkpoint(format!(
                "parameter blob is {} bytes, header expects {} bytes",
                body.len(),
                header.blob_bytes
            )));
        }
        let declared: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if declared * 4 != body.len() {
            return Err(Error::Checkpoint(format!(
                "tensor table describes {} bytes, blob holds {}",
                declared * 4,
                body.len()
            )));
        }
        let blob = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Checkpoint { header, blob })
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::arch::{build_network, ArchConfig, HeadKind};

    fn net() -> Network<f32> {
        let spec = build_network(&ArchConfig::plain(2, 3, 2, HeadKind::Binary, 8)).unwrap();
        Network::init(spec, 11)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let n = net();
        let ck = Checkpoint::from_network(&n, TrainingMetadata::default());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let m: Network<f32> = back.to_network(n.spec()).unwrap();
        for (a, b) in n.params().iter().zip(m.params().iter()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn altered_spec_is_rejected() {
        let n = net();
        let ck = Checkpoint::from_network(&n, TrainingMetadata::default());
        let other = build_network(&ArchConfig::plain(2, 4, 2, HeadKind::Binary, 8)).unwrap();
        let err = ck.to_network::<f32>(&other).unwrap_err();
        assert!(err.to_string().contains("fingerprint"));
    }

    #[test]
    fn truncated_blob_names_both_sizes() {
        let n = net();
        let bytes = Checkpoint::from_network(&n, TrainingMetadata::default())
            .to_bytes()
            .unwrap();
        let expected = n.params().scalar_count() * 4
            + n.bn_stats().iter().map(|s| s.mean.len() * 8).sum::<usize>();
        let cut = &bytes[..bytes.len() - 7];
        let msg = Checkpoint::from_bytes(cut).unwrap_err().to_string();
        assert!(msg.contains(&format!("{} bytes", expected - 7)), "{msg}");
        assert!(msg.contains(&format!("expects {expected} bytes")), "{msg}");
    }
}
