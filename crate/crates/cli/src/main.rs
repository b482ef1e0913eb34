use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use asplat::anchors;
use asplat::autodiff::PoolingMode;
use asplat::config::RunConfig;
use asplat::manifest::{self, Split};
use asplat::parallel;
use asplat::pipeline::ablate::{self, Axis};
use asplat::pipeline::render::{self, RenderRequest, Source};
use asplat::pipeline::{eval, fit, trace_csv, train};
use asplat::scene::ply;
use asplat::synth::{self, GenSpec, Preset};

#[derive(Parser)]
#[command(name = "asplat", version, about = "Anchor-aligned Gaussian splatting on synthetic RGB-D scenes")]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "ASPLAT_THREADS", default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Input,
    Novel,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Avg,
    Max,
    Fifo,
}

impl From<PoolingArg> for PoolingMode {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Avg => PoolingMode::Avg,
            PoolingArg::Max => PoolingMode::Max,
            PoolingArg::Fifo => PoolingMode::Fifo,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ray-trace a synthetic scene with exact depth into `--out`.
    GenScene {
        #[arg(long, default_value = "box-room")]
        preset: String,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[arg(long, default_value_t = 8)]
        inputs: usize,
        #[arg(long, default_value_t = 2)]
        novel: usize,
    },
    /// Build the anchor set of a scene's input views.
    Anchors { scene: PathBuf },
    /// Optimize Gaussians directly on the input views and score novel views.
    Fit {
        scene: PathBuf,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the decoder (stage 1) and the refiner (stage 2).
    Train {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long, value_enum)]
        pooling: Option<PoolingArg>,
        /// Continue from the last saved state in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Render a scene's views from a PLY or through a trained model.
    Render {
        scene: PathBuf,
        #[arg(long, conflicts_with = "checkpoint")]
        ply: Option<PathBuf>,
        /// Stage-1 checkpoint for feed-forward reconstruction.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stage-2 checkpoint; enables refinement.
        #[arg(long, requires = "checkpoint")]
        refiner: Option<PathBuf>,
        #[arg(long)]
        refine_passes: Option<usize>,
        #[arg(long, value_enum, default_value = "novel")]
        split: SplitArg,
        #[arg(long, value_enum)]
        pooling: Option<PoolingArg>,
        /// Also write per-tile splat counts.
        #[arg(long)]
        dump_tiles: bool,
    },
    /// Score rendered novel views; exits nonzero if any metric is NaN.
    Eval { scene: PathBuf, rendered: PathBuf },
    /// Sweep pooling mode, Gaussians per anchor or input-view count.
    Ablate {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long)]
        axis: String,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let mut cfg = load_config(cli)?;
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::GenScene { preset, width, height, inputs, novel } => {
            let preset: Preset = preset.parse()?;
            let spec = GenSpec {
                preset,
                width: *width,
                height: *height,
                input_views: *inputs,
                novel_views: *novel,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let m = synth::write_scene(out, &spec)?;
            println!("wrote {} ({} input, {} novel views) to {}", m.name, m.count(Split::Input), m.count(Split::Novel), out.display());
        }
        Command::Anchors { scene } => {
            let loaded = manifest::load_scene(scene)?;
            let set = anchors::build_anchors(&loaded.input_views(), &cfg.anchors)?;
            let (bytes, sidecar) = anchors::write_anchor_ply(&set);
            std::fs::write(out.join("anchors.ply"), bytes)?;
            write_json(&out.join("anchors.json"), &sidecar)?;
            println!("{} anchors from {} points", set.len(), set.source_count);
        }
        Command::Fit { scene, steps } => {
            if let Some(s) = steps {
                cfg.fit.steps = *s;
            }
            let loaded = manifest::load_scene(scene)?;
            let result = fit::fit(&loaded, &cfg, |_| {})?;
            ply::save(&result.scene, &out.join("scene.ply"))?;
            std::fs::write(out.join("trace.csv"), trace_csv(&result.trace))?;
            let views = if loaded.novel.is_empty() { &loaded.inputs } else { &loaded.novel };
            render::write_views(&result.scene, views, &cfg, out, false)?;
            write_json(&out.join("metrics.json"), &result.report)?;
            println!(
                "NumGS {}  PSNR {:.2} dB (mean-color baseline {:.2})  SSIM {:.3}  AbsRel {:.4}  δ1 {:.3}",
                result.report.num_gs, result.report.psnr, result.baseline_psnr, result.report.ssim, result.report.absrel, result.report.delta1
            );
            if result.report.has_nan() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Train { scenes, pooling, resume } => {
            if let Some(p) = pooling {
                cfg.features.pooling = (*p).into();
            }
            let loaded = scenes.iter().map(|s| manifest::load_scene(s)).collect::<asplat::Result<Vec<_>>>()?;
            let opts = train::TrainOptions { out: out.clone(), resume: *resume, stop_after: None };
            let o = train::train(&loaded, &cfg, &opts)?;
            let last = |t: &[asplat::pipeline::TraceRow]| t.last().map_or(f64::NAN, |r| r.total);
            println!("stage 1 final loss {:.4}, stage 2 final loss {:.4}", last(&o.stage1_trace), last(&o.stage2_trace));
        }
        Command::Render { scene, ply, checkpoint, refiner, refine_passes, split, pooling, dump_tiles } => {
            if let Some(p) = pooling {
                cfg.features.pooling = (*p).into();
            }
            let source = match (ply, checkpoint) {
                (Some(p), _) => Source::Ply(p.clone()),
                (None, Some(c)) => Source::Model { stage1: c.clone(), stage2: refiner.clone() },
                (None, None) => bail!("render needs --ply or --checkpoint"),
            };
            let req = RenderRequest {
                scene_dir: scene.clone(),
                source,
                split: match split {
                    SplitArg::Input => Split::Input,
                    SplitArg::Novel => Split::Novel,
                },
                passes: *refine_passes,
                dump_tiles: *dump_tiles,
                out: out.clone(),
            };
            let r = render::render_cmd(&req, &cfg)?;
            let t = r.timings;
            println!(
                "{} views, NumGS {}; anchoring {:.3}s decoding {:.3}s refining {:.3}s rendering {:.3}s",
                r.views.len(),
                r.num_gs,
                t.anchoring,
                t.decoding,
                t.refining,
                t.rendering
            );
        }
        Command::Eval { scene, rendered } => {
            let report = eval::eval_cmd(scene, rendered)?;
            write_json(&out.join("metrics.json"), &report)?;
            println!("PSNR {:.3}  SSIM {:.4}  AbsRel {:.4}  δ1 {:.4}", report.psnr, report.ssim, report.absrel, report.delta1);
            if report.has_nan() {
                eprintln!("error: a metric is NaN");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate { scenes, axis } => {
            let axis: Axis = axis.parse()?;
            let loaded = scenes.iter().map(|s| manifest::load_scene(s)).collect::<asplat::Result<Vec<_>>>()?;
            let rows = ablate::ablate(&loaded, axis, &cfg)?;
            write_json(&out.join("ablation.json"), &rows)?;
            std::fs::write(out.join("ablation.csv"), ablate::rows_csv(&rows))?;
            print!("{}", ablate::rows_csv(&rows));
            if rows.iter().any(|r| !r.is_finite()) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match parallel::with_threads(cli.threads, || run(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
