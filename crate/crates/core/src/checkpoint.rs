//! Checkpoint documents: every network's layers with parameters stored as
//! base64 of little-endian `f64` arrays, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ncm::{BundleConfig, NcmBundle, Net};
use crate::nn::{Dense, HiddenLayer, MlpConfig};
use crate::posterior::{PosteriorConfig, PosteriorNet};
use crate::{Mlp, Tensor};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub d: usize,
    pub d_eta: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    kind: String,
    rows: usize,
    cols: usize,
    weight: String,
    bias: String,
    prelu: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    name: String,
    config: MlpConfig,
    layers: Vec<LayerDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosteriorDoc {
    config: PosteriorConfig,
    network: NetworkDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    schema_version: u32,
    dims: Dims,
    step: u64,
    bundle_config: BundleConfig,
    networks: Vec<NetworkDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    posterior: Option<PosteriorDoc>,
    #[serde(default)]
    config: serde_json::Value,
    rng_note: String,
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub bundle: NcmBundle,
    pub posterior: Option<PosteriorNet>,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    /// Echo of the training configuration, if any.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn dims(&self) -> Dims {
        Dims {
            d: self.bundle.d(),
            d_eta: self
                .posterior
                .as_ref()
                .map_or(self.bundle.d(), |p| p.config().eta_dim()),
        }
    }

    /// Fails with a dimension error unless the checkpoint was built for `d`.
    pub fn check_dims(&self, d: usize) -> Result<()> {
        if self.bundle.d() != d {
            return Err(Error::Dimension(format!(
                "checkpoint was trained for d={}, configuration expects d={d}",
                self.bundle.d()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = CheckpointDoc {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            dims: self.dims(),
            step: self.step,
            bundle_config: self.bundle.config().clone(),
            networks: Net::ALL
                .iter()
                .map(|&n| network_doc(n.name(), self.bundle.net(n)))
                .collect(),
            posterior: self.posterior.as_ref().map(|p| PosteriorDoc {
                config: p.config().clone(),
                network: network_doc("posterior", p.mlp()),
            }),
            config: self.config.clone(),
            rng_note: "random streams are re-derived from the configured seed; no generator state is stored"
                .into(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::parse("checkpoint", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse("checkpoint", e))?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::parse("checkpoint", "missing schema_version"))?;
        if found != CHECKPOINT_SCHEMA_VERSION as u64 {
            return Err(Error::SchemaVersion {
                expected: CHECKPOINT_SCHEMA_VERSION,
                found: found as u32,
            });
        }
        let doc: CheckpointDoc = serde_json::from_value(value).map_err(|e| Error::parse("checkpoint", e))?;
        doc.bundle_config.validate()?;
        if doc.networks.len() != Net::ALL.len() {
            return Err(Error::parse(
                "checkpoint",
                format!("expected {} networks, found {}", Net::ALL.len(), doc.networks.len()),
            ));
        }
        let mut nets = Vec::with_capacity(Net::ALL.len());
        for (&net, nd) in Net::ALL.iter().zip(&doc.networks) {
            if nd.name != net.name() {
                return Err(Error::parse(
                    "checkpoint",
                    format!("network `{}` where `{}` was expected", nd.name, net.name()),
                ));
            }
            let expected = doc.bundle_config.net_config(net);
            if nd.config != expected {
                return Err(Error::Dimension(format!(
                    "network `{}` has configuration {:?}, bundle implies {expected:?}",
                    nd.name, nd.config
                )));
            }
            nets.push(decode_network(nd)?);
        }
        let nets: [Mlp; 6] = nets.try_into().expect("six networks");
        let bundle = NcmBundle::from_nets(doc.bundle_config, nets)?;
        let posterior = match doc.posterior {
            Some(p) => {
                if p.config.d != bundle.d() {
                    return Err(Error::Dimension(format!(
                        "posterior for d={} stored with bundle for d={}",
                        p.config.d,
                        bundle.d()
                    )));
                }
                Some(PosteriorNet::from_mlp(p.config, decode_network(&p.network)?)?)
            }
            None => None,
        };
        let ckpt = Checkpoint {
            bundle,
            posterior,
            step: doc.step,
            config: doc.config,
        };
        if ckpt.dims() != doc.dims {
            return Err(Error::Dimension(format!(
                "declared dims {:?} disagree with the stored networks {:?}",
                doc.dims,
                ckpt.dims()
            )));
        }
        Ok(ckpt)
    }
}

/// Writes through a temporary file and a rename, so an existing checkpoint
/// is either fully replaced or left untouched.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let text = checkpoint.to_json()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(text: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::parse("checkpoint", format!("{what}: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::parse(
            "checkpoint",
            format!("{what}: {} bytes for {expected} values", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn layer_doc(kind: &str, dense: &Dense<f64>, prelu: Option<&Tensor>) -> LayerDoc {
    let shape = dense.weight.shape();
    LayerDoc {
        kind: kind.into(),
        rows: shape[0],
        cols: shape[1],
        weight: encode(dense.weight.data()),
        bias: encode(dense.bias.data()),
        prelu: prelu.map(|p| encode(p.data())),
    }
}

fn network_doc(name: &str, net: &Mlp) -> NetworkDoc {
    let mut layers = Vec::new();
    if let Some(p) = net.projection() {
        layers.push(layer_doc("projection", p, None));
    }
    for h in net.hidden_layers() {
        layers.push(layer_doc("hidden", &h.dense, Some(&h.slope)));
    }
    layers.push(layer_doc("output", net.output_layer(), None));
    NetworkDoc {
        name: name.into(),
        config: net.config().clone(),
        layers,
    }
}

fn decode_dense(l: &LayerDoc, name: &str) -> Result<Dense<f64>> {
    let what = format!("{name}/{}", l.kind);
    let weight = decode(&l.weight, l.rows * l.cols, &what)?;
    let bias = decode(&l.bias, l.cols, &what)?;
    Ok(Dense {
        weight: Tensor::matrix(l.rows, l.cols, weight)?,
        bias: Tensor::matrix(1, l.cols, bias)?,
    })
}

fn decode_network(nd: &NetworkDoc) -> Result<Mlp> {
    let mut projection = None;
    let mut hidden = Vec::new();
    let mut output = None;
    for l in &nd.layers {
        let dense = decode_dense(l, &nd.name)?;
        match (l.kind.as_str(), &l.prelu) {
            ("projection", None) if projection.is_none() && hidden.is_empty() => projection = Some(dense),
            ("hidden", Some(p)) if output.is_none() => {
                let slope = decode(p, 1, &format!("{}/prelu", nd.name))?;
                hidden.push(HiddenLayer {
                    dense,
                    slope: Tensor::scalar(slope[0]),
                });
            }
            ("output", None) if output.is_none() => output = Some(dense),
            (kind, _) => {
                return Err(Error::parse(
                    "checkpoint",
                    format!("unexpected `{kind}` layer in network `{}`", nd.name),
                ))
            }
        }
    }
    let output = output.ok_or_else(|| Error::parse("checkpoint", format!("network `{}` has no output layer", nd.name)))?;
    Mlp::from_parts(nd.config.clone(), projection, hidden, output)
}
