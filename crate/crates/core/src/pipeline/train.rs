//! Two-stage training: encoder and decoder on the full objective, then the
//! refiner alone on the rendering loss with the decoder frozen.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorSet};
use crate::autodiff::{Graph, ParamSet, Tensor};
use crate::cameras::CameraView;
use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::config::RunConfig;
use crate::decoder::{self, raw_from_tensor};
use crate::error::{Error, Result};
use crate::features;
use crate::linalg::Vec3;
use crate::manifest::LoadedScene;
use crate::objectives::LossTerms;
use crate::optim::Adam;
use crate::refiner;
use crate::scene::GaussianScene;

use super::{timed, trace_csv, SceneFrame, StageTimings, TraceRow};

pub const STAGE1_SECTION: &str = "stage1";
pub const STAGE2_SECTION: &str = "stage2";
pub const STAGE1_FILE: &str = "stage1.aspl";
pub const STAGE2_FILE: &str = "stage2.aspl";
const STAGE1_STATE: &str = "stage1.state.aspl";
const STAGE2_STATE: &str = "stage2.state.aspl";
pub const RECORD_FILE: &str = "record.json";

/// Input views of one scene with their (featureless) anchors.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub name: String,
    pub views: Vec<CameraView>,
    pub anchors: AnchorSet,
    pub world: Vec<Vec3>,
}

pub fn prepare(views: Vec<CameraView>, name: &str, cfg: &RunConfig) -> Result<Prepared> {
    let anchors = anchors::build_anchors(&views, &cfg.anchors)?;
    if anchors.len() > cfg.decoder.max_tokens {
        return Err(Error::Config(format!("{} anchors exceed the decoder token cap {}", anchors.len(), cfg.decoder.max_tokens)));
    }
    let world = (0..anchors.len()).map(|i| anchors.world_position(i)).collect();
    Ok(Prepared { name: name.to_string(), views, anchors, world })
}

pub fn prepare_scene(loaded: &LoadedScene, cfg: &RunConfig) -> Result<Prepared> {
    prepare(loaded.input_views(), &loaded.manifest.name, cfg)
}

/// Fresh encoder and decoder weights.
pub fn init_stage1(cfg: &RunConfig) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ParamSet::new();
    features::init_encoder(&mut p, &mut rng, &cfg.features);
    decoder::init_decoder(&mut p, &mut rng, &cfg.decoder, cfg.features.feature_dim);
    p
}

/// Fresh refiner weights (identity update head).
pub fn init_stage2(cfg: &RunConfig) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2e_f1_4e_00);
    let mut p = ParamSet::new();
    refiner::init_refiner(&mut p, &mut rng, &cfg.refiner, cfg.features.feature_dim);
    p
}

/// Pooled anchor features under the given encoder weights.
pub fn anchor_features(params: &ParamSet, prep: &Prepared, cfg: &RunConfig) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let f = features::lift_to_anchors(&mut g, &prep.views, &prep.world, prep.anchors.normalization.half_extent, &cfg.features)?;
    Ok(g.value(f).clone())
}

/// Stage-1 objective and its gradient for every encoder/decoder weight.
/// `masks` optionally freezes the depth supervision masks.
pub fn stage1_loss(params: &ParamSet, prep: &Prepared, cfg: &RunConfig, masks: Option<&[Vec<bool>]>) -> Result<(LossTerms, Vec<Tensor>)> {
    let mut g = Graph::new(params);
    let feats = features::lift_to_anchors(&mut g, &prep.views, &prep.world, prep.anchors.normalization.half_extent, &cfg.features)?;
    let raw_var = decoder::decode_graph(&mut g, feats, &prep.anchors.positions, &cfg.decoder)?;
    let raw = raw_from_tensor(g.value(raw_var));
    let settings = cfg.raster.settings();
    let frame = SceneFrame {
        anchors: &prep.anchors.positions,
        per_anchor: cfg.decoder.gaussians_per_anchor,
        activation: &cfg.activation,
        normalization: &prep.anchors.normalization,
        settings: &settings,
    };
    let (terms, grad) = frame.total_loss(&raw, &prep.views, &cfg.loss, masks)?;
    let grads = g.backward(&[(raw_var, grad)])?;
    Ok((terms, grads.params))
}

/// Decoded scene and its anchor features.
pub fn decode_scene(params: &ParamSet, prep: &Prepared, cfg: &RunConfig) -> Result<(GaussianScene, Tensor)> {
    let feats = anchor_features(params, prep, cfg)?;
    let mut anchors = prep.anchors.clone();
    anchors.features = feats.data.clone();
    anchors.feature_dim = feats.cols;
    let scene = decoder::forward_scene(&anchors, params, &cfg.decoder, &cfg.activation)?;
    Ok((scene, feats))
}

/// Frozen inputs of the refiner for one scene.
#[derive(Debug, Clone)]
pub struct RefineInputs {
    pub base: GaussianScene,
    pub features: Tensor,
    pub errors: Tensor,
}

pub fn refine_inputs(stage1: &ParamSet, prep: &Prepared, cfg: &RunConfig) -> Result<RefineInputs> {
    let (base, features) = decode_scene(stage1, prep, cfg)?;
    let errors = refiner::scene_error_tokens(&base, &prep.views, &cfg.raster.settings(), &cfg.refiner, cfg.features.tau)?;
    Ok(RefineInputs { base, features, errors })
}

/// Rendering loss of one refinement pass and its gradient for every refiner
/// weight.
pub fn stage2_loss(params: &ParamSet, inputs: &RefineInputs, views: &[CameraView], cfg: &RunConfig) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new(params);
    let f = g.input(inputs.features.clone());
    let out = refiner::refine_graph(&mut g, &inputs.base, f, &inputs.errors, &cfg.refiner)?;
    let raw = raw_from_tensor(g.value(out));
    let settings = cfg.raster.settings();
    let frame = SceneFrame::of(&inputs.base, &settings);
    let (loss, grad) = frame.render_loss(&raw, views, &cfg.loss)?;
    let grads = g.backward(&[(out, grad)])?;
    Ok((loss, grads.params))
}

/// Feed-forward reconstruction: anchors → features → decode → refine.
/// `stage2 = None` or `passes = 0` skips refinement.
pub fn reconstruct(
    views: &[CameraView],
    stage1: &ParamSet,
    stage2: Option<&ParamSet>,
    passes: usize,
    cfg: &RunConfig,
) -> Result<(GaussianScene, Option<GaussianScene>, StageTimings)> {
    let mut t = StageTimings::default();
    let prep = timed(&mut t.anchoring, || prepare(views.to_vec(), "", cfg))?;
    let (base, feats) = timed(&mut t.decoding, || decode_scene(stage1, &prep, cfg))?;
    let refined = match stage2 {
        Some(p) if passes > 0 => Some(timed(&mut t.refining, || {
            refiner::refine(&base, &feats, views, p, &cfg.refiner, &cfg.raster.settings(), cfg.features.tau, passes)
        })?),
        _ => None,
    };
    Ok((base, refined, t))
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out: PathBuf,
    /// Continue from the last saved state in `out` when present.
    pub resume: bool,
    /// Stop after this many optimizer steps in this invocation (both stages
    /// together), leaving the last periodic state on disk. Used to exercise
    /// interruption and resume.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub stage1_trace: Vec<TraceRow>,
    pub stage2_trace: Vec<TraceRow>,
    pub completed: bool,
}

/// Reproducibility record written next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub scenes: Vec<String>,
    pub stage1_sha256: String,
    pub stage2_sha256: String,
}

struct State {
    params: ParamSet,
    opt: Adam,
    trace: Vec<TraceRow>,
}

fn save_state(path: &Path, section: &str, cfg: &RunConfig, s: &State) -> Result<()> {
    let extra = serde_json::json!({ "step": s.opt.step, "trace": s.trace });
    let mut ck = Checkpoint::new(section, cfg.to_json(), extra);
    ck.push_params("", &s.params);
    ck.push_adam(&s.params, &s.opt);
    ck.save(path)
}

fn load_state(path: &Path, section: &str, adam: crate::optim::AdamConfig) -> Result<State> {
    let ck = Checkpoint::load(path)?;
    ck.expect_section(section)?;
    let params = ck.params("");
    let mut opt = Adam::new(adam, &params);
    ck.restore_adam(&params, &mut opt)?;
    opt.step = ck.header.extra["step"].as_u64().ok_or_else(|| Error::Checkpoint("state without step".into()))?;
    let trace: Vec<TraceRow> = serde_json::from_value(ck.header.extra["trace"].clone())?;
    Ok(State { params, opt, trace })
}

/// Writes final weights for a stage.
fn save_weights(path: &Path, section: &str, cfg: &RunConfig, params: &ParamSet) -> Result<()> {
    let mut ck = Checkpoint::new(section, cfg.to_json(), serde_json::json!({}));
    ck.push_params("", params);
    ck.save(path)
}

/// Loads stage weights, checking the section tag.
pub fn load_weights(path: &Path, section: &str) -> Result<ParamSet> {
    let ck = Checkpoint::load(path)?;
    ck.expect_section(section)?;
    Ok(ck.params(""))
}

/// Runs stage 1 then stage 2 over `scenes` (round-robin, one scene per
/// step) and writes checkpoints, CSV traces and a run record to `opts.out`.
pub fn train(scenes: &[LoadedScene], cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Precondition("training needs at least one scene".into()));
    }
    std::fs::create_dir_all(&opts.out)?;
    let prepared: Vec<Prepared> = scenes.iter().map(|s| prepare_scene(s, cfg)).collect::<Result<_>>()?;
    let mut budget = opts.stop_after.unwrap_or(usize::MAX);
    let every = cfg.train.checkpoint_every;

    // stage 1
    let s1_path = opts.out.join(STAGE1_FILE);
    let s1_state = opts.out.join(STAGE1_STATE);
    let mut outcome = TrainOutcome::default();
    if opts.resume && s1_path.exists() {
        let ck = Checkpoint::load(&s1_state)?;
        outcome.stage1_trace = serde_json::from_value(ck.header.extra["trace"].clone())?;
    } else {
        let mut st = if opts.resume && s1_state.exists() {
            load_state(&s1_state, STAGE1_SECTION, cfg.train.stage1)?
        } else {
            let params = init_stage1(cfg);
            let opt = Adam::new(cfg.train.stage1, &params);
            State { params, opt, trace: Vec::new() }
        };
        while (st.opt.step as usize) < cfg.train.stage1_steps {
            if budget == 0 {
                outcome.stage1_trace = st.trace;
                return Ok(outcome);
            }
            let step = st.opt.step as usize;
            let si = step % prepared.len();
            let (terms, grads) = stage1_loss(&st.params, &prepared[si], cfg, None)?;
            if !terms.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                std::fs::write(opts.out.join("stage1_trace.csv"), trace_csv(&st.trace))?;
                return Err(Error::Divergence { step, detail: format!("stage-1 loss {}", terms.total) });
            }
            st.trace.push(TraceRow::new(step, si, &terms));
            st.opt.update(&mut st.params, &grads)?;
            budget -= 1;
            let done = st.opt.step as usize;
            if done.is_multiple_of(every) || done == cfg.train.stage1_steps {
                save_state(&s1_state, STAGE1_SECTION, cfg, &st)?;
            }
        }
        std::fs::write(opts.out.join("stage1_trace.csv"), trace_csv(&st.trace))?;
        save_weights(&s1_path, STAGE1_SECTION, cfg, &st.params)?;
        outcome.stage1_trace = st.trace;
    }

    // stage 2: the decoder is read back from disk and never written again
    let stage1 = load_weights(&s1_path, STAGE1_SECTION)?;
    let inputs: Vec<RefineInputs> = prepared.iter().map(|p| refine_inputs(&stage1, p, cfg)).collect::<Result<_>>()?;
    let s2_path = opts.out.join(STAGE2_FILE);
    let s2_state = opts.out.join(STAGE2_STATE);
    let mut st = if opts.resume && s2_state.exists() {
        load_state(&s2_state, STAGE2_SECTION, cfg.train.stage2)?
    } else {
        let params = init_stage2(cfg);
        let opt = Adam::new(cfg.train.stage2, &params);
        State { params, opt, trace: Vec::new() }
    };
    while (st.opt.step as usize) < cfg.train.stage2_steps {
        if budget == 0 {
            outcome.stage2_trace = st.trace;
            return Ok(outcome);
        }
        let step = st.opt.step as usize;
        let si = step % prepared.len();
        let (loss, grads) = stage2_loss(&st.params, &inputs[si], &prepared[si].views, cfg)?;
        let terms = LossTerms { render: loss, total: loss, ..Default::default() };
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            std::fs::write(opts.out.join("stage2_trace.csv"), trace_csv(&st.trace))?;
            return Err(Error::Divergence { step, detail: format!("stage-2 loss {loss}") });
        }
        st.trace.push(TraceRow::new(step, si, &terms));
        st.opt.update(&mut st.params, &grads)?;
        budget -= 1;
        let done = st.opt.step as usize;
        if done.is_multiple_of(every) || done == cfg.train.stage2_steps {
            save_state(&s2_state, STAGE2_SECTION, cfg, &st)?;
        }
    }
    std::fs::write(opts.out.join("stage2_trace.csv"), trace_csv(&st.trace))?;
    save_weights(&s2_path, STAGE2_SECTION, cfg, &st.params)?;
    outcome.stage2_trace = st.trace;
    outcome.completed = true;

    let record = RunRecord {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        scenes: prepared.iter().map(|p| p.name.clone()).collect(),
        stage1_sha256: sha256_hex(&std::fs::read(&s1_path)?),
        stage2_sha256: sha256_hex(&std::fs::read(&s2_path)?),
    };
    std::fs::write(opts.out.join(RECORD_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(outcome)
}
