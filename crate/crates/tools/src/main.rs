use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use ssc_core::gradcheck::GradCheckConfig;
use ssc_core::metrics::evaluate;
use ssc_core::model::prepare;
use ssc_core::scene::{synthesize, UNKNOWN};
use ssc_core::suite::run_suite;
use ssc_core::train::{init_model, scene_class_weights, train_toy, StepLog};
use ssc_core::Graph;
use ssc_tools::ablate::{format_table, run_grid, thread_count};
use ssc_tools::config_io::{load_or_default, to_text};
use ssc_tools::formats::{
    encode_checkpoint, labels_tensor, load_sample, restore_checkpoint, save_sample, save_tensor, write_atomic,
    decode_checkpoint,
};
use ssc_tools::report::{gradcheck_lines, metrics_json, train_json};

#[derive(Parser)]
#[command(name = "ssc", about = "Desk-scale camera semantic scene completion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize one scene with its encoder priors and write it as a sample file.
    GenScene {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid extents as X,Y,Z.
        #[arg(long, default_value = "32,32,8")]
        dims: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional configuration supplying camera and noise settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// One forward pass over a sample; writes the prediction and metrics.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        sample: PathBuf,
        /// Output directory (must not exist yet).
        #[arg(long)]
        out: PathBuf,
        /// Parameters to load instead of the seeded initialisation.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every differentiable module.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Train on generated scenes and evaluate on held-out ones.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory (must not exist yet).
        #[arg(long, default_value = "train-toy-out")]
        out: PathBuf,
    },
    /// Train and evaluate the 3 × 3 depth/fusion strategy grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad --dims {s:?}"))?;
    parts
        .try_into()
        .map_err(|_| anyhow::anyhow!("--dims {s:?} must list exactly three extents"))
}

/// Fills a fresh sibling directory through `fill`, then renames it to `out`.
fn write_dir_atomic(out: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() {
        bail!("output directory {} already exists", out.display());
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::Builder::new().prefix(".ssc-out").tempdir_in(parent)?;
    fill(tmp.path())?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(tmp.path(), fs::Permissions::from_mode(0o755))?;
    }
    let staged = tmp.keep();
    fs::rename(&staged, out).with_context(|| format!("renaming into {}", out.display()))?;
    Ok(())
}

fn gen_scene(seed: u64, dims: &str, out: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let mut cfg = load_or_default(config)?;
    cfg.dims = parse_dims(dims)?;
    cfg.validate()?;
    let sample = synthesize(seed, &cfg.synth_config()?)?;
    save_sample(out, &sample)?;
    let g = &sample.grid;
    let unknown = g.count_label(UNKNOWN);
    println!(
        "grid {}x{}x{}  occupancy {:.6}  unknown {} / {}",
        g.dims[0],
        g.dims[1],
        g.dims[2],
        g.occupancy_fraction(),
        unknown,
        g.num_voxels()
    );
    for c in 0..cfg.num_classes {
        println!("  class {c}: {} voxels", g.count_label(c as u8));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(config: Option<&Path>, sample: &Path, out: &Path, checkpoint: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_or_default(config)?;
    let sample = load_sample(sample).with_context(|| format!("reading {}", sample.display()))?;
    let scene = prepare(&cfg, sample)?;
    let (model, mut store) = init_model(&cfg)?;
    if let Some(p) = checkpoint {
        restore_checkpoint(&mut store, &decode_checkpoint(&fs::read(p)?)?)?;
    }
    let weights = scene_class_weights(&cfg, std::slice::from_ref(&scene));
    let mut g = Graph::new();
    let outputs = model.forward(&mut g, &store, &scene)?;
    let comps = model.losses(&mut g, &outputs, &scene, &weights)?;
    let losses = ssc_core::losses::LossValues::read(&g, &comps);
    let pred = model.predict(&g, &outputs, &scene)?;
    let metrics = evaluate(&pred, &scene.sample.grid, cfg.num_classes)?;
    let report = json!({
        "metrics": metrics_json(&metrics),
        "losses": {
            "depth": losses.depth,
            "seg": losses.seg,
            "ce": losses.ce,
            "scal_geo": losses.scal_geo,
            "scal_sem": losses.scal_sem,
            "total": losses.total(&cfg.loss),
        },
        "queries": scene.proposals.len(),
        "frustum_cells_dropped": scene.frustum.dropped,
    });
    write_dir_atomic(out, |dir| {
        save_tensor(&dir.join("prediction.tnsr"), &labels_tensor(&pred))?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        fs::write(dir.join("config.txt"), to_text(&cfg))?;
        Ok(())
    })?;
    println!("iou {:.4}  miou {:.4}", metrics.iou, metrics.miou);
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(module: Option<&str>, flip: bool) -> Result<ExitCode> {
    let cfg = GradCheckConfig {
        flip_sign: flip,
        ..GradCheckConfig::default()
    };
    let report = run_suite(module, &cfg)?;
    for line in gradcheck_lines(&report) {
        println!("{line}");
    }
    if report.iter().all(|m| m.passed()) {
        println!("all modules passed");
        Ok(ExitCode::SUCCESS)
    } else {
        let failed: Vec<&str> = report.iter().filter(|m| !m.passed()).map(|m| m.module).collect();
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn log_step(s: &StepLog) {
    let l = &s.losses;
    println!(
        "step {:>4} scene {:>2} total {:.6} depth {:.6} seg {:.6} ce {:.6} scal_geo {:.6} scal_sem {:.6}",
        s.step, s.scene, s.total, l.depth, l.seg, l.ce, l.scal_geo, l.scal_sem
    );
}

fn train_cmd(config: Option<&Path>, scenes: Option<usize>, steps: Option<usize>, out: &Path) -> Result<ExitCode> {
    let mut cfg = load_or_default(config)?;
    if let Some(n) = scenes {
        cfg.train_scenes = n;
    }
    if let Some(k) = steps {
        cfg.steps = k;
    }
    cfg.validate()?;
    if out.exists() {
        bail!("output directory {} already exists", out.display());
    }
    println!("== config ==");
    print!("{}", to_text(&cfg));
    println!("== training ==");
    let outcome = train_toy(&cfg, log_step)?;
    let summary = train_json(&outcome);
    write_dir_atomic(out, |dir| {
        write_atomic(&dir.join("checkpoint.ssck"), &encode_checkpoint(&outcome.store))?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        fs::write(dir.join("config.txt"), to_text(&cfg))?;
        Ok(())
    })?;
    println!("== result ==");
    println!(
        "mean train loss {:.6} -> {:.6}",
        outcome.initial_loss, outcome.final_loss
    );
    if let Some(m) = &outcome.eval {
        println!(
            "held-out iou {:.4}  miou {:.4}  (random baseline miou {:.4})",
            m.iou, m.miou, outcome.random_miou
        );
    }
    if let Some(why) = outcome.diverged {
        eprintln!("training diverged ({why}); last finite parameters written to {}", out.display());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(config: Option<&Path>, out: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_or_default(config)?;
    let threads = thread_count();
    eprintln!("running 9 cells on {threads} thread(s)");
    let cells = run_grid(&cfg, threads, |c| {
        let status = match &c.result {
            Ok(m) => format!("iou {:.4} miou {:.4}", m.iou, m.miou),
            Err(e) => format!("FAILED: {e}"),
        };
        eprintln!("  {} + {}: {status}", c.depth.name(), c.fusion.name());
    });
    let table = format_table(&cells);
    print!("{table}");
    if let Some(p) = out {
        write_atomic(p, table.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenScene { seed, dims, out, config } => gen_scene(*seed, dims, out, config.as_deref()),
        Cmd::Run {
            config,
            sample,
            out,
            checkpoint,
        } => run(config.as_deref(), sample, out, checkpoint.as_deref()),
        Cmd::Gradcheck {
            module,
            inject_sign_flip,
        } => gradcheck(module.as_deref(), *inject_sign_flip),
        Cmd::TrainToy {
            config,
            scenes,
            steps,
            out,
        } => train_cmd(config.as_deref(), *scenes, *steps, out),
        Cmd::Ablate { config, out } => ablate(config.as_deref(), out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
