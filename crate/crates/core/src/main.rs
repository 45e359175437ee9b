use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gsmvs::config::{FeatureMode, PipelineConfig};
use gsmvs::error::{Error, Result};
use gsmvs::geometry::DepthMap;
use gsmvs::gradcheck::{rasterizer_gradcheck, GRADCHECK_TOLERANCE};
use gsmvs::imageio::{read_pfm, write_pfm, write_ppm};
use gsmvs::metrics::depth_metrics;
use gsmvs::pipeline::{init_model_weights, run_pipeline, threads_from_env, with_threads, ModelWeights};
use gsmvs::scene::SceneBundle;
use gsmvs::selftest;
use gsmvs::synth::{generate_synthetic_scene, SceneKind, SynthSpec};
use gsmvs::weights::WeightStore;

#[derive(Parser)]
#[command(name = "gsmvs", version, about = "Feed-forward multi-view Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-stage pipeline on a scene directory.
    Render {
        #[arg(long)]
        scene: PathBuf,
        /// Pipeline config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// NTW1 weights, required in learned mode.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of source views to use (nearest first); all when omitted.
        #[arg(long)]
        views: Option<usize>,
    },
    /// Compare a predicted depth map with ground truth.
    DepthEval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Single-channel PFM; nonzero pixels are evaluated.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 100.0)]
        mm_per_unit: f64,
    },
    /// Check rasterizer gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every module's built-in oracle checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic scene directory with ground truth.
    Synth {
        /// plane, two-plane or sphere.
        #[arg(long)]
        spec: SceneKind,
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 160)]
        width: usize,
    },
    /// Write seeded random weights for the given config.
    InitWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    path.map_or_else(|| Ok(PipelineConfig::default()), PipelineConfig::load)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn render(scene: &Path, config: Option<&Path>, weights: Option<&Path>, out: &Path, views: Option<usize>) -> Result<bool> {
    let config = load_config(config)?;
    let bundle = SceneBundle::load(scene, views)?;
    let model = match (config.mode, weights) {
        (FeatureMode::Learned, None) => {
            return Err(Error::invalid("render", "learned mode needs --weights (or set mode = photometric)"))
        }
        (FeatureMode::Learned, Some(p)) => Some(ModelWeights::load(&WeightStore::load(p)?, &config)?),
        (FeatureMode::Photometric, _) => None,
    };
    let result = run_pipeline(&bundle, &config, model.as_ref())?;
    create_dir(out)?;
    write_ppm(&out.join("render.ppm"), &result.render.color)?;
    write_pfm(&out.join("depth.pfm"), &result.fine.depth.values)?;
    write_pfm(&out.join("depth_coarse.pfm"), &result.coarse.depth.values)?;
    result.fine.cloud.save_gc01(&out.join("cloud.gc01"))?;
    if let Some(m) = &result.metrics {
        write_text(&out.join("metrics.txt"), &m.to_report())?;
        let line = m.to_json_line("0000");
        write_text(&out.join("metrics.jsonl"), &format!("{line}\n"))?;
        println!("{line}");
    }
    println!("wrote {} Gaussians to {}", result.fine.cloud.len(), out.display());
    Ok(true)
}

fn depth_eval(pred: &Path, gt: &Path, mask: Option<&Path>, mm_per_unit: f64) -> Result<bool> {
    let as_depth = |path: &Path| -> Result<DepthMap> {
        let t = read_pfm(path)?;
        if t.rank() != 2 {
            return Err(Error::format(path, "channels", "depth must be single-channel"));
        }
        let valid = t.data().iter().map(|&v| v > 0.0 && v.is_finite()).collect();
        DepthMap::new(t, valid)
    };
    let (p, g) = (as_depth(pred)?, as_depth(gt)?);
    let mask = mask
        .map(|path| {
            let m = read_pfm(path)?;
            if m.shape() != g.values.shape() {
                return Err(Error::format(path, "dimensions", format!("expected {:?}, found {:?}", g.values.shape(), m.shape())));
            }
            Ok(m.data().iter().map(|&v| v != 0.0).collect::<Vec<bool>>())
        })
        .transpose()?;
    if p.values.shape() != g.values.shape() {
        return Err(Error::format(
            pred,
            "dimensions",
            format!("expected {:?} to match ground truth, found {:?}", g.values.shape(), p.values.shape()),
        ));
    }
    let m = depth_metrics(&p, &g, mask.as_deref(), mm_per_unit)?;
    print!("{}", m.to_report());
    Ok(true)
}

fn gradcheck(seed: u64) -> bool {
    let cases = rasterizer_gradcheck(seed);
    for c in &cases {
        println!(
            "{} gaussians={} color_rel_err={:.3e} opacity_rel_err={:.3e}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.gaussians,
            c.color_error,
            c.opacity_error
        );
    }
    let ok = cases.iter().all(|c| c.passed());
    println!("gradcheck {} (tolerance {GRADCHECK_TOLERANCE:e})", if ok { "passed" } else { "failed" });
    ok
}

fn run_selftest(seed: u64) -> bool {
    let checks = selftest::run_all(seed);
    for c in &checks {
        println!("{} [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.module, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    failed == 0
}

fn synth(spec: SynthSpec, out: &Path) -> Result<bool> {
    let scene = generate_synthetic_scene(&spec)?;
    scene.save(out)?;
    println!("wrote {} source views to {}", scene.sources.len(), out.display());
    Ok(true)
}

fn init_weights(config: Option<&Path>, out: &Path) -> Result<bool> {
    let config = load_config(config)?;
    let store = init_model_weights(&config);
    store.save(out)?;
    println!("wrote {} tensors to {}", store.len(), out.display());
    Ok(true)
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Render { scene, config, weights, out, views } => {
            render(&scene, config.as_deref(), weights.as_deref(), &out, views)
        }
        Command::DepthEval { pred, gt, mask, mm_per_unit } => depth_eval(&pred, &gt, mask.as_deref(), mm_per_unit),
        Command::Gradcheck { seed } => Ok(gradcheck(seed)),
        Command::Selftest { seed } => Ok(run_selftest(seed)),
        Command::Synth { spec, views, out, seed, height, width } => synth(
            SynthSpec {
                height,
                width,
                ..SynthSpec::new(spec, views, seed)
            },
            &out,
        ),
        Command::InitWeights { config, out } => init_weights(config.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = threads_from_env().and_then(|threads| with_threads(threads, || dispatch(cli.command))).and_then(|r| r);
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
