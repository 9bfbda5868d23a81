//! Parameter storage and the typed weights of the encoder and decoder.
//!
//! A [`ParameterSet`] is a flat, ordered list of named arrays. The typed
//! [`Network`] is assembled by walking a fixed manifest derived from the
//! [`Config`]; the same walk is used to initialize, zero, or validate a
//! loaded set, so names and shapes cannot drift apart.
//!
//! File format (JSON):
//! `{"seed": u64|null, "manifest": [{"name": str, "shape": [usize]}], "data": [f64, ...]}`
//! with `data` holding the arrays back to back in manifest order.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deformable::DeformableSampler;
use crate::error::{Error, Result};
use crate::model::Config;
use crate::nn::{
    CrossAttentionBlock, FeedForward, LayerNorm, Linear, Mat, Mlp, MultiHeadAttention,
    SelfAttentionBlock,
};
use crate::scene_io::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub seed: Option<u64>,
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct ManifestItem {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    seed: Option<u64>,
    manifest: Vec<ManifestItem>,
    data: Vec<f64>,
}

impl ParameterSet {
    pub fn from_entries(seed: Option<u64>, entries: Vec<ParamEntry>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            let expected: usize = e.shape.iter().product();
            if e.data.len() != expected {
                return Err(Error::Parameter {
                    name: e.name.clone(),
                    reason: format!("{} values for shape {:?}", e.data.len(), e.shape),
                });
            }
            if e.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter {
                    name: e.name.clone(),
                    reason: "non-finite value".into(),
                });
            }
            if index.insert(e.name.clone(), i).is_some() {
                return Err(Error::Parameter {
                    name: e.name.clone(),
                    reason: "duplicate name".into(),
                });
            }
        }
        Ok(ParameterSet {
            seed,
            entries,
            index,
        })
    }

    /// Seeded initialization: Xavier-uniform weights, zero biases, unit
    /// norm gains. Each array draws from its own stream keyed by its name.
    pub fn init(cfg: &Config, seed: u64) -> Result<Self> {
        let mut src = InitSource {
            seed,
            zero: false,
            entries: Vec::new(),
        };
        walk(cfg, &mut src)?;
        ParameterSet::from_entries(Some(seed), src.entries)
    }

    /// Every learned array set to zero, norm gains included.
    pub fn zeros(cfg: &Config) -> Result<Self> {
        let mut src = InitSource {
            seed: 0,
            zero: true,
            entries: Vec::new(),
        };
        walk(cfg, &mut src)?;
        ParameterSet::from_entries(None, src.entries)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ParamFile {
            seed: self.seed,
            manifest: self
                .entries
                .iter()
                .map(|e| ManifestItem {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                })
                .collect(),
            data: self.entries.iter().flat_map(|e| e.data.iter().copied()).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParamFile = serde_json::from_str(text)?;
        let total: usize = file.manifest.iter().map(|m| m.shape.iter().product::<usize>()).sum();
        if total != file.data.len() {
            return Err(Error::Schema(format!(
                "parameter manifest declares {total} values, store holds {}",
                file.data.len()
            )));
        }
        let mut offset = 0;
        let entries = file
            .manifest
            .into_iter()
            .map(|m| {
                let n: usize = m.shape.iter().product();
                let data = file.data[offset..offset + n].to_vec();
                offset += n;
                ParamEntry {
                    name: m.name,
                    shape: m.shape,
                    data,
                }
            })
            .collect();
        ParameterSet::from_entries(file.seed, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ParameterSet::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy)]
enum InitKind {
    /// Xavier-uniform scaled by a gain.
    Weight { fan_in: usize, fan_out: usize, gain: f64 },
    Zero,
    One,
}

trait Source {
    fn take(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<Vec<f64>>;
}

struct InitSource {
    seed: u64,
    zero: bool,
    entries: Vec<ParamEntry>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

impl Source for InitSource {
    fn take(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<Vec<f64>> {
        let n: usize = shape.iter().product();
        let data = match (self.zero, kind) {
            (true, _) | (false, InitKind::Zero) => vec![0.0; n],
            (false, InitKind::One) => vec![1.0; n],
            (false, InitKind::Weight { fan_in, fan_out, gain }) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(fnv1a(name));
                let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.clone(),
        });
        Ok(data)
    }
}

struct StoreSource<'a> {
    set: &'a ParameterSet,
    used: HashSet<String>,
}

impl Source for StoreSource<'_> {
    fn take(&mut self, name: &str, shape: &[usize], _kind: InitKind) -> Result<Vec<f64>> {
        let e = self.set.get(name).ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            reason: "missing".into(),
        })?;
        if e.shape != shape {
            return Err(Error::Parameter {
                name: name.to_string(),
                reason: format!("shape {:?}, expected {:?}", e.shape, shape),
            });
        }
        self.used.insert(name.to_string());
        Ok(e.data.clone())
    }
}

/// Gain applied to heads that emit coordinate offsets, so that a freshly
/// initialized network moves reference points by small amounts.
const OFFSET_GAIN: f64 = 0.1;

fn linear(s: &mut dyn Source, name: &str, out: usize, inp: usize, gain: f64) -> Result<Linear> {
    let w = s.take(
        &format!("{name}.weight"),
        &[out, inp],
        InitKind::Weight {
            fan_in: inp,
            fan_out: out,
            gain,
        },
    )?;
    let b = s.take(&format!("{name}.bias"), &[out], InitKind::Zero)?;
    Ok(Linear {
        weight: Mat::from_vec(out, inp, w),
        bias: b,
    })
}

fn layer_norm(s: &mut dyn Source, name: &str, c: usize) -> Result<LayerNorm> {
    Ok(LayerNorm {
        gamma: s.take(&format!("{name}.gamma"), &[c], InitKind::One)?,
        beta: s.take(&format!("{name}.beta"), &[c], InitKind::Zero)?,
    })
}

fn mlp(s: &mut dyn Source, name: &str, inp: usize, hidden: usize, out: usize, gain: f64) -> Result<Mlp> {
    Ok(Mlp {
        fc1: linear(s, &format!("{name}.fc1"), hidden, inp, 1.0)?,
        fc2: linear(s, &format!("{name}.fc2"), out, hidden, gain)?,
    })
}

fn attention(s: &mut dyn Source, name: &str, c: usize, heads: usize) -> Result<MultiHeadAttention> {
    Ok(MultiHeadAttention {
        heads,
        q: linear(s, &format!("{name}.q"), c, c, 1.0)?,
        k: linear(s, &format!("{name}.k"), c, c, 1.0)?,
        v: linear(s, &format!("{name}.v"), c, c, 1.0)?,
        out: linear(s, &format!("{name}.out"), c, c, 1.0)?,
    })
}

fn self_attention(s: &mut dyn Source, name: &str, cfg: &Config) -> Result<SelfAttentionBlock> {
    Ok(SelfAttentionBlock {
        norm: layer_norm(s, &format!("{name}.norm"), cfg.channels)?,
        attn: attention(s, &format!("{name}.attn"), cfg.channels, cfg.heads)?,
    })
}

fn cross_attention(s: &mut dyn Source, name: &str, cfg: &Config) -> Result<CrossAttentionBlock> {
    Ok(CrossAttentionBlock {
        norm_q: layer_norm(s, &format!("{name}.norm_q"), cfg.channels)?,
        norm_kv: layer_norm(s, &format!("{name}.norm_kv"), cfg.channels)?,
        attn: attention(s, &format!("{name}.attn"), cfg.channels, cfg.heads)?,
    })
}

fn feed_forward(s: &mut dyn Source, name: &str, cfg: &Config) -> Result<FeedForward> {
    Ok(FeedForward {
        norm: layer_norm(s, &format!("{name}.norm"), cfg.channels)?,
        mlp: mlp(s, &format!("{name}.mlp"), cfg.channels, cfg.ffn_width(), cfg.channels, 1.0)?,
    })
}

fn sampler(s: &mut dyn Source, name: &str, cfg: &Config) -> Result<DeformableSampler> {
    Ok(DeformableSampler {
        norm: layer_norm(s, &format!("{name}.norm"), cfg.channels)?,
        offsets: linear(s, &format!("{name}.offsets"), 2 * cfg.e_samples, cfg.channels, OFFSET_GAIN)?,
        weights: linear(s, &format!("{name}.weights"), cfg.e_samples, cfg.channels, 1.0)?,
    })
}

/// One layer of the two-layer instance refinement decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineLayer {
    pub self_attn: SelfAttentionBlock,
    pub sampler: DeformableSampler,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    /// Linear token scorer for coarse selection.
    pub token_scorer: Linear,
    pub refine: Vec<RefineLayer>,
    /// Re-scores refined queries to keep the top N.
    pub refine_scorer: Linear,
    /// Box logits offset (cx, cy, w, h) added to the token's box.
    pub box_init: Linear,
    /// Learnable point embedding, `M × C`.
    pub point_embedding: Mat,
    pub shape_attn: SelfAttentionBlock,
    pub shape_ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHeads {
    pub class: Linear,
    pub bbox: Mlp,
    pub point: Mlp,
    pub keypoint: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub geo_ref: Mlp,
    pub sampler: DeformableSampler,
    pub instance_attn: SelfAttentionBlock,
    pub instance_ffn: FeedForward,
    pub point_attn: SelfAttentionBlock,
    pub point_ffn: FeedForward,
    pub instance_cross: CrossAttentionBlock,
    pub instance_cross_ffn: FeedForward,
    pub point_cross: CrossAttentionBlock,
    pub point_cross_ffn: FeedForward,
    pub heads: PredictionHeads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: EncoderWeights,
    pub layers: Vec<DecoderLayer>,
}

pub const REFINE_LAYERS: usize = 2;

fn walk(cfg: &Config, s: &mut dyn Source) -> Result<Network> {
    cfg.validate()?;
    let c = cfg.channels;
    let encoder = EncoderWeights {
        token_scorer: linear(s, "encoder.token_scorer", 1, c, 1.0)?,
        refine: (0..REFINE_LAYERS)
            .map(|i| {
                let p = format!("encoder.refine.{i}");
                Ok(RefineLayer {
                    self_attn: self_attention(s, &format!("{p}.self_attn"), cfg)?,
                    sampler: sampler(s, &format!("{p}.sampler"), cfg)?,
                    ffn: feed_forward(s, &format!("{p}.ffn"), cfg)?,
                })
            })
            .collect::<Result<_>>()?,
        refine_scorer: linear(s, "encoder.refine_scorer", 1, c, 1.0)?,
        box_init: linear(s, "encoder.box_init", 4, c, OFFSET_GAIN)?,
        point_embedding: Mat::from_vec(
            cfg.m_points,
            c,
            s.take(
                "encoder.point_embedding",
                &[cfg.m_points, c],
                InitKind::Weight {
                    fan_in: cfg.m_points,
                    fan_out: c,
                    gain: 1.0,
                },
            )?,
        ),
        shape_attn: self_attention(s, "encoder.shape_attn", cfg)?,
        shape_ffn: feed_forward(s, "encoder.shape_ffn", cfg)?,
    };
    let layers = (0..cfg.layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            Ok(DecoderLayer {
                geo_ref: mlp(s, &format!("{p}.geo_ref"), c, c, 2, OFFSET_GAIN)?,
                sampler: sampler(s, &format!("{p}.sampler"), cfg)?,
                instance_attn: self_attention(s, &format!("{p}.instance_attn"), cfg)?,
                instance_ffn: feed_forward(s, &format!("{p}.instance_ffn"), cfg)?,
                point_attn: self_attention(s, &format!("{p}.point_attn"), cfg)?,
                point_ffn: feed_forward(s, &format!("{p}.point_ffn"), cfg)?,
                instance_cross: cross_attention(s, &format!("{p}.instance_cross"), cfg)?,
                instance_cross_ffn: feed_forward(s, &format!("{p}.instance_cross_ffn"), cfg)?,
                point_cross: cross_attention(s, &format!("{p}.point_cross"), cfg)?,
                point_cross_ffn: feed_forward(s, &format!("{p}.point_cross_ffn"), cfg)?,
                heads: PredictionHeads {
                    class: linear(s, &format!("{p}.heads.class"), cfg.num_classes() + 1, c, 1.0)?,
                    bbox: mlp(s, &format!("{p}.heads.bbox"), c, c, 4, OFFSET_GAIN)?,
                    point: mlp(s, &format!("{p}.heads.point"), c, c, 2, OFFSET_GAIN)?,
                    keypoint: linear(s, &format!("{p}.heads.keypoint"), 1, c, 1.0)?,
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok(Network { encoder, layers })
}

impl Network {
    /// Builds typed weights from a set, checking every name and shape
    /// against the manifest implied by `cfg`.
    pub fn from_params(cfg: &Config, set: &ParameterSet) -> Result<Self> {
        let mut src = StoreSource {
            set,
            used: HashSet::new(),
        };
        let net = walk(cfg, &mut src)?;
        if let Some(extra) = set.entries().iter().find(|e| !src.used.contains(&e.name)) {
            return Err(Error::Parameter {
                name: extra.name.clone(),
                reason: "not part of the model manifest".into(),
            });
        }
        Ok(net)
    }

    pub fn seeded(cfg: &Config, seed: u64) -> Result<Self> {
        Network::from_params(cfg, &ParameterSet::init(cfg, seed)?)
    }

    pub fn zeros(cfg: &Config) -> Result<Self> {
        Network::from_params(cfg, &ParameterSet::zeros(cfg)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        Config {
            n_instances: 4,
            m_points: 5,
            channels: 8,
            e_samples: 4,
            layers: 2,
            k_coarse: 6,
            scales: vec![8, 16],
            heads: 2,
            ..Config::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = ParameterSet::init(&small(), 3).unwrap();
        let b = ParameterSet::init(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = ParameterSet::init(&small(), 4).unwrap();
        assert_ne!(a, c);
        assert!(a.entries().iter().all(|e| e.data.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn json_round_trip() {
        let a = ParameterSet::init(&small(), 1).unwrap();
        let back = ParameterSet::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
        Network::from_params(&small(), &back).unwrap();
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = ParameterSet::init(&small(), 1).unwrap();
        let bigger = Config {
            channels: 12,
            ..small()
        };
        let err = Network::from_params(&bigger, &a).unwrap_err();
        assert!(matches!(err, Error::Parameter { .. }), "{err}");
    }

    #[test]
    fn truncated_store_is_rejected() {
        let a = ParameterSet::init(&small(), 1).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        v["data"].as_array_mut().unwrap().pop();
        assert!(ParameterSet::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn unknown_entry_is_rejected() {
        let a = ParameterSet::init(&small(), 1).unwrap();
        let mut entries = a.entries().to_vec();
        entries.push(ParamEntry {
            name: "stray".into(),
            shape: vec![1],
            data: vec![0.0],
        });
        let set = ParameterSet::from_entries(None, entries).unwrap();
        assert!(Network::from_params(&small(), &set).is_err());
    }
}
