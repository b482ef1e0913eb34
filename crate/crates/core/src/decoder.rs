//! The Gaussian decoder: anchor tokens `[feature ‖ position]` are embedded,
//! passed through pre-norm attention blocks and mapped by a linear head to
//! `k` raw parameter sets per anchor (anchor-major).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::autodiff::{Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::scene::{self, ActivationConfig, GaussianScene, RawGaussian, RAW_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub width: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub gaussians_per_anchor: usize,
    /// Scale (normalized units) the head bias starts from.
    pub init_scale: f64,
    /// Std of the initial head weights; zero starts every anchor alike.
    pub head_init_std: f64,
    /// Largest token count accepted for training.
    pub max_tokens: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { width: 64, blocks: 2, ffn_mult: 2, gaussians_per_anchor: 4, init_scale: 0.02, head_init_std: 0.0, max_tokens: 4096 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.ffn_mult == 0 || self.gaussians_per_anchor == 0 {
            return Err(Error::Config("decoder width, ffn multiplier and gaussians per anchor must be positive".into()));
        }
        if !(self.init_scale > 0.0) || !(self.head_init_std >= 0.0) {
            return Err(Error::Config("decoder init scale must be positive and head std non-negative".into()));
        }
        Ok(())
    }
}

fn block_name(i: usize) -> String {
    format!("dec.block{i}")
}

pub fn init_decoder(p: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: &DecoderConfig, feature_dim: usize) {
    nn::init_linear(p, rng, "dec.embed", feature_dim + 3, cfg.width, 1.0);
    for i in 0..cfg.blocks {
        nn::init_block(p, rng, &block_name(i), cfg.width, cfg.ffn_mult, false);
    }
    let k = cfg.gaussians_per_anchor;
    p.insert("dec.head.w", nn::normal_tensor(rng, cfg.width, k * RAW_DIM, cfg.head_init_std));
    let bias: Vec<f64> = scene::seed_pattern(k, cfg.init_scale).iter().flat_map(|r| r.to_array()).collect();
    p.insert("dec.head.b", Tensor { rows: 1, cols: k * RAW_DIM, data: bias });
}

/// `feats` is `N×C`, `positions` the normalized anchor positions; returns
/// the `kN×14` raw parameter node.
pub fn decode_graph(g: &mut Graph, feats: Var, positions: &[[f64; 3]], cfg: &DecoderConfig) -> Result<Var> {
    let n = g.value(feats).rows;
    if n != positions.len() {
        return Err(Error::Shape(format!("{n} feature rows for {} anchors", positions.len())));
    }
    let pos = g.input(Tensor { rows: n, cols: 3, data: positions.iter().flatten().copied().collect() });
    let tokens = g.concat_cols(&[feats, pos])?;
    let mut x = nn::linear(g, tokens, "dec.embed")?;
    for i in 0..cfg.blocks {
        x = nn::block(g, x, &block_name(i), None)?;
    }
    let head = nn::linear(g, x, "dec.head")?;
    let k = cfg.gaussians_per_anchor;
    if g.value(head).cols != k * RAW_DIM {
        return Err(Error::Shape(format!("head emits {} values, expected {}", g.value(head).cols, k * RAW_DIM)));
    }
    g.reshape(head, k * n, RAW_DIM)
}

pub fn raw_from_tensor(t: &Tensor) -> Vec<RawGaussian> {
    t.data.chunks(RAW_DIM).map(RawGaussian::from_slice).collect()
}

pub fn raw_to_tensor(raw: &[RawGaussian]) -> Tensor {
    Tensor { rows: raw.len(), cols: RAW_DIM, data: raw.iter().flat_map(|r| r.to_array()).collect() }
}

/// Runs the decoder on an anchor set with populated features.
pub fn decode(anchors: &AnchorSet, params: &ParamSet, cfg: &DecoderConfig) -> Result<Vec<RawGaussian>> {
    if !anchors.has_features() {
        return Err(Error::Precondition("anchor features have not been populated".into()));
    }
    let mut g = Graph::new(params);
    let f = g.input(Tensor::from_vec(anchors.len(), anchors.feature_dim, anchors.features.clone())?);
    let out = decode_graph(&mut g, f, &anchors.positions, cfg)?;
    Ok(raw_from_tensor(g.value(out)))
}

pub fn forward_scene(anchors: &AnchorSet, params: &ParamSet, cfg: &DecoderConfig, act: &ActivationConfig) -> Result<GaussianScene> {
    let raw = decode(anchors, params, cfg)?;
    GaussianScene::from_anchor_set(anchors, raw, cfg.gaussians_per_anchor, *act)
}
