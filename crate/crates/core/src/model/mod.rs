//! The matcher: a transformer-encoder backbone plus optional private patches.
//!
//! Parameter names are stable and ordered so that every party enumerates
//! the same manifest for the same [`ModelConfig`]:
//!
//! ```text
//! embed.token  embed.position  embed.segment
//! layer.{i}.attn.head.{h}.{query,key,value}  layer.{i}.attn.output
//! layer.{i}.attn.norm.{gain,bias}
//! layer.{i}.ffn.{in,out}.{weight,bias}  layer.{i}.ffn.norm.{gain,bias}
//! head.weight  head.bias
//! patch.<site>.{down,up}  patch.<site>.pal.head.{h}.{query,key,value}  patch.<site>.pal.output
//! ```
//!
//! where `<site>` is `layer.{i}.attn` / `layer.{i}.ffn` (inner, outer),
//! `layer.{i}` (horizontal) or `top` (vertical).

pub mod backbone;
pub mod config;
pub mod patch;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use config::{InsertionMode, ModelConfig, PatchKind};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterSet};
use crate::tensor::Tensor;

/// Reserved vocabulary ids.
pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Deviation of the zero-mean normal used for every weight matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// One entry of the parameter manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub private: bool,
    pub patch: bool,
}

fn spec(name: String, shape: Vec<usize>, init: Init, private: bool, patch: bool) -> ParamSpec {
    ParamSpec {
        name,
        shape,
        init,
        private,
        patch,
    }
}

fn patch_specs(config: &ModelConfig, site: &str, out: &mut Vec<ParamSpec>) {
    let (d, ds) = (config.d_model, config.d_patch);
    out.push(spec(
        format!("patch.{site}.down"),
        vec![ds, d],
        Init::Normal,
        true,
        true,
    ));
    if config.patch_kind == PatchKind::Pal {
        let dh = ds / config.pal_heads;
        for h in 0..config.pal_heads {
            for role in ["query", "key", "value"] {
                out.push(spec(
                    format!("patch.{site}.pal.head.{h}.{role}"),
                    vec![dh, ds],
                    Init::Normal,
                    true,
                    true,
                ));
            }
        }
        out.push(spec(
            format!("patch.{site}.pal.output"),
            vec![ds, ds],
            Init::Normal,
            true,
            true,
        ));
    }
    out.push(spec(
        format!("patch.{site}.up"),
        vec![d, ds],
        Init::Zeros,
        true,
        true,
    ));
}

/// The full ordered parameter manifest implied by `config`.
pub fn manifest(config: &ModelConfig) -> Vec<ParamSpec> {
    let (d, dh) = (config.d_model, config.head_dim());
    let mut out = vec![
        spec(
            "embed.token".into(),
            vec![config.vocab_size, d],
            Init::Normal,
            false,
            false,
        ),
        spec(
            "embed.position".into(),
            vec![config.max_seq_len, d],
            Init::Normal,
            false,
            false,
        ),
        spec(
            "embed.segment".into(),
            vec![2, d],
            Init::Normal,
            false,
            false,
        ),
    ];
    for i in 0..config.n_layers {
        let private = i >= config.n_shared_layers;
        let p = |name: String, shape: Vec<usize>, init| spec(name, shape, init, private, false);
        for h in 0..config.n_heads {
            for role in ["query", "key", "value"] {
                out.push(p(
                    format!("layer.{i}.attn.head.{h}.{role}"),
                    vec![dh, d],
                    Init::Normal,
                ));
            }
        }
        out.push(p(
            format!("layer.{i}.attn.output"),
            vec![d, d],
            Init::Normal,
        ));
        out.push(p(format!("layer.{i}.attn.norm.gain"), vec![d], Init::Ones));
        out.push(p(format!("layer.{i}.attn.norm.bias"), vec![d], Init::Zeros));
        out.push(p(
            format!("layer.{i}.ffn.in.weight"),
            vec![config.d_ff, d],
            Init::Normal,
        ));
        out.push(p(
            format!("layer.{i}.ffn.in.bias"),
            vec![config.d_ff],
            Init::Zeros,
        ));
        out.push(p(
            format!("layer.{i}.ffn.out.weight"),
            vec![d, config.d_ff],
            Init::Normal,
        ));
        out.push(p(format!("layer.{i}.ffn.out.bias"), vec![d], Init::Zeros));
        out.push(p(format!("layer.{i}.ffn.norm.gain"), vec![d], Init::Ones));
        out.push(p(format!("layer.{i}.ffn.norm.bias"), vec![d], Init::Zeros));
    }
    out.push(spec(
        "head.weight".into(),
        vec![1, d],
        Init::Normal,
        false,
        false,
    ));
    out.push(spec("head.bias".into(), vec![1], Init::Zeros, false, false));

    match config.insertion_mode {
        InsertionMode::None => {}
        InsertionMode::Inner | InsertionMode::Outer => {
            for i in 0..config.n_layers {
                patch_specs(config, &format!("layer.{i}.attn"), &mut out);
                patch_specs(config, &format!("layer.{i}.ffn"), &mut out);
            }
        }
        InsertionMode::Horizontal => {
            for i in 0..config.n_layers {
                patch_specs(config, &format!("layer.{i}"), &mut out);
            }
        }
        InsertionMode::Vertical => patch_specs(config, "top", &mut out),
    }
    out
}

/// Shared and private parameter names, in manifest order.
pub fn partition_parameters(config: &ModelConfig) -> (Vec<String>, Vec<String>) {
    let (private, shared): (Vec<_>, Vec<_>) = manifest(config).into_iter().partition(|s| s.private);
    (
        shared.into_iter().map(|s| s.name).collect(),
        private.into_iter().map(|s| s.name).collect(),
    )
}

pub fn parameter_count(config: &ModelConfig) -> usize {
    manifest(config)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

pub fn patch_parameter_count(config: &ModelConfig) -> usize {
    manifest(config)
        .iter()
        .filter(|s| s.patch)
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

fn init_tensor<R: Rng>(spec: &ParamSpec, rng: &mut R) -> Tensor {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::filled(&spec.shape, 1.0),
        Init::Normal => {
            let normal = Normal::new(0.0, INIT_STD).expect("valid deviation");
            let n = spec.shape.iter().product();
            let data = (0..n).map(|_| normal.sample(rng)).collect();
            Tensor::new(spec.shape.clone(), data).expect("shape matches")
        }
    }
}

/// Initializes the full parameter set. Backbone tensors draw from
/// `backbone_rng` and patch tensors from `patch_rng`, so clients can share a
/// backbone template while keeping their own patch initialization.
pub fn init_parameters<R1: Rng, R2: Rng>(
    config: &ModelConfig,
    backbone_rng: &mut R1,
    patch_rng: &mut R2,
) -> ParameterSet {
    let mut params = ParameterSet::new();
    for s in manifest(config) {
        let t = if s.patch {
            init_tensor(&s, patch_rng)
        } else {
            init_tensor(&s, backbone_rng)
        };
        params
            .push(s.name, t, s.private)
            .expect("manifest names are unique");
    }
    params
}

#[derive(Debug, Clone)]
pub struct EmbedIds {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
}

/// Parameter ids of one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerIds {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub attn_output: ParamId,
    pub attn_gain: ParamId,
    pub attn_bias: ParamId,
    pub ffn_in_weight: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out_weight: ParamId,
    pub ffn_out_bias: ParamId,
    pub ffn_gain: ParamId,
    pub ffn_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct PalIds {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
}

/// Parameter ids of one patch instance; `pal` is present for PAL patches.
#[derive(Debug, Clone)]
pub struct PatchIds {
    pub down: ParamId,
    pub up: ParamId,
    pub pal: Option<PalIds>,
}

#[derive(Debug, Clone)]
pub enum LayerPatches {
    None,
    Inner { attn: PatchIds, ffn: PatchIds },
    Outer { attn: PatchIds, ffn: PatchIds },
    Horizontal(PatchIds),
}

/// Patch instances implied by an insertion mode.
#[derive(Debug, Clone)]
pub struct PatchStack {
    pub layers: Vec<LayerPatches>,
    pub vertical: Option<PatchIds>,
}

impl PatchStack {
    pub fn instance_count(&self) -> usize {
        let per_layer: usize = self
            .layers
            .iter()
            .map(|l| match l {
                LayerPatches::None => 0,
                LayerPatches::Inner { .. } | LayerPatches::Outer { .. } => 2,
                LayerPatches::Horizontal(_) => 1,
            })
            .sum();
        per_layer + usize::from(self.vertical.is_some())
    }
}

/// A configuration bound to the parameter ids of its manifest.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: EmbedIds,
    pub layers: Vec<LayerIds>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub patches: PatchStack,
}

fn lookup(params: &ParameterSet, name: &str) -> Result<ParamId> {
    params
        .id(name)
        .ok_or_else(|| Error::Lookup(format!("missing parameter `{name}`")))
}

fn patch_ids(config: &ModelConfig, params: &ParameterSet, site: &str) -> Result<PatchIds> {
    let pal = if config.patch_kind == PatchKind::Pal {
        let mut ids = PalIds {
            query: vec![],
            key: vec![],
            value: vec![],
            output: lookup(params, &format!("patch.{site}.pal.output"))?,
        };
        for h in 0..config.pal_heads {
            ids.query
                .push(lookup(params, &format!("patch.{site}.pal.head.{h}.query"))?);
            ids.key
                .push(lookup(params, &format!("patch.{site}.pal.head.{h}.key"))?);
            ids.value
                .push(lookup(params, &format!("patch.{site}.pal.head.{h}.value"))?);
        }
        Some(ids)
    } else {
        None
    };
    Ok(PatchIds {
        down: lookup(params, &format!("patch.{site}.down"))?,
        up: lookup(params, &format!("patch.{site}.up"))?,
        pal,
    })
}

impl Model {
    /// Binds `config` to `params`, which must follow its manifest.
    pub fn new(config: &ModelConfig, params: &ParameterSet) -> Result<Self> {
        let embed = EmbedIds {
            token: lookup(params, "embed.token")?,
            position: lookup(params, "embed.position")?,
            segment: lookup(params, "embed.segment")?,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let l = |suffix: &str| lookup(params, &format!("layer.{i}.{suffix}"));
            let mut ids = LayerIds {
                query: vec![],
                key: vec![],
                value: vec![],
                attn_output: l("attn.output")?,
                attn_gain: l("attn.norm.gain")?,
                attn_bias: l("attn.norm.bias")?,
                ffn_in_weight: l("ffn.in.weight")?,
                ffn_in_bias: l("ffn.in.bias")?,
                ffn_out_weight: l("ffn.out.weight")?,
                ffn_out_bias: l("ffn.out.bias")?,
                ffn_gain: l("ffn.norm.gain")?,
                ffn_bias: l("ffn.norm.bias")?,
            };
            for h in 0..config.n_heads {
                ids.query.push(l(&format!("attn.head.{h}.query"))?);
                ids.key.push(l(&format!("attn.head.{h}.key"))?);
                ids.value.push(l(&format!("attn.head.{h}.value"))?);
            }
            layers.push(ids);
        }
        let mut stack = PatchStack {
            layers: Vec::with_capacity(config.n_layers),
            vertical: None,
        };
        for i in 0..config.n_layers {
            stack.layers.push(match config.insertion_mode {
                InsertionMode::Inner => LayerPatches::Inner {
                    attn: patch_ids(config, params, &format!("layer.{i}.attn"))?,
                    ffn: patch_ids(config, params, &format!("layer.{i}.ffn"))?,
                },
                InsertionMode::Outer => LayerPatches::Outer {
                    attn: patch_ids(config, params, &format!("layer.{i}.attn"))?,
                    ffn: patch_ids(config, params, &format!("layer.{i}.ffn"))?,
                },
                InsertionMode::Horizontal => {
                    LayerPatches::Horizontal(patch_ids(config, params, &format!("layer.{i}"))?)
                }
                InsertionMode::None | InsertionMode::Vertical => LayerPatches::None,
            });
        }
        if config.insertion_mode == InsertionMode::Vertical {
            stack.vertical = Some(patch_ids(config, params, "top")?);
        }
        Ok(Self {
            config: config.clone(),
            embed,
            layers,
            head_weight: lookup(params, "head.weight")?,
            head_bias: lookup(params, "head.bias")?,
            patches: stack,
        })
    }

    /// The same backbone with every patch detached.
    pub fn without_patches(&self) -> Self {
        let mut m = self.clone();
        m.patches
            .layers
            .iter_mut()
            .for_each(|l| *l = LayerPatches::None);
        m.patches.vertical = None;
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_configs() -> Vec<ModelConfig> {
        let mut out = vec![ModelConfig::toy(30)];
        for mode in InsertionMode::PATCHED {
            for kind in [PatchKind::Pal, PatchKind::LowRank] {
                out.push(ModelConfig::toy(30).with_patches(mode, kind));
            }
        }
        out
    }

    #[test]
    fn manifest_is_deterministic_and_matches_init() {
        for c in all_configs() {
            let a = manifest(&c);
            assert_eq!(a, manifest(&c));
            let mut r1 = ChaCha8Rng::seed_from_u64(1);
            let mut r2 = ChaCha8Rng::seed_from_u64(2);
            let p = init_parameters(&c, &mut r1, &mut r2);
            assert_eq!(
                p.names().collect::<Vec<_>>(),
                a.iter().map(|s| s.name.as_str()).collect::<Vec<_>>()
            );
            assert_eq!(p.num_values(), parameter_count(&c));
            let m = Model::new(&c, &p).unwrap();
            assert_eq!(
                m.patches.instance_count(),
                c.insertion_mode.instance_count(c.n_layers)
            );
        }
    }

    #[test]
    fn patch_parameter_counts_are_exact() {
        let (d, ds) = (8, 4);
        for mode in InsertionMode::PATCHED {
            let n = mode.instance_count(2);
            let lr = ModelConfig::toy(30).with_patches(mode, PatchKind::LowRank);
            assert_eq!(patch_parameter_count(&lr), n * 2 * d * ds);
            let pal = ModelConfig::toy(30).with_patches(mode, PatchKind::Pal);
            assert_eq!(patch_parameter_count(&pal), n * (2 * d * ds + 4 * ds * ds));
        }
        assert_eq!(patch_parameter_count(&ModelConfig::toy(30)), 0);
    }

    #[test]
    fn init_follows_the_recipe() {
        let c = ModelConfig::toy(30).with_patches(InsertionMode::Outer, PatchKind::Pal);
        let p = init_parameters(
            &c,
            &mut ChaCha8Rng::seed_from_u64(1),
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        assert!(p
            .get("layer.0.attn.norm.gain")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(p
            .get("layer.0.ffn.in.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(p
            .get("patch.layer.1.ffn.up")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let down = p.get("patch.layer.1.ffn.down").unwrap();
        assert!(down.data().iter().any(|&v| v != 0.0));
        let tok = p.get("embed.token").unwrap().data();
        let std = (tok.iter().map(|v| v * v).sum::<f64>() / tok.len() as f64).sqrt();
        assert!((std - INIT_STD).abs() < 0.005, "{std}");
    }

    #[test]
    fn partition_follows_shared_layer_count() {
        let mut c =
            ModelConfig::toy(30).with_patches(InsertionMode::Horizontal, PatchKind::LowRank);
        let (shared, private) = partition_parameters(&c);
        assert!(private.iter().all(|n| n.starts_with("patch.")));
        assert!(shared.iter().any(|n| n.starts_with("layer.1.")));

        c.n_shared_layers = 0;
        let (shared, _) = partition_parameters(&c);
        assert_eq!(
            shared,
            vec![
                "embed.token",
                "embed.position",
                "embed.segment",
                "head.weight",
                "head.bias"
            ]
        );
    }
}
