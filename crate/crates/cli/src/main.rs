use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use flowsplat::checkpoint::Checkpoint;
use flowsplat::config::{Paradigm, TrainConfig};
use flowsplat::gaussian::GaussianCloud;
use flowsplat::io::{atomic_write, load_cloud, read_flo, read_png, save_cloud, write_depth, write_flo, write_png};
use flowsplat::metrics::{flow_epe, flow_to_color, MetricReport};
use flowsplat::raster::render;
use flowsplat::synth::{self, Dataset, SceneSpec};
use flowsplat::train::{self, TrainReport};

#[derive(Parser)]
#[command(name = "flowsplat", version, about = "Motion-aware dynamic Gaussian splatting with flow supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        /// Scene spec file; defaults to the named preset.
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        /// rigid-translation | occluder | static-arc | moving-blob
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the iterative paradigm.
    TrainIter(TrainArgs),
    /// Train the deformation paradigm.
    TrainDeform(TrainArgs),
    /// Render a checkpoint at every camera of a dataset.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare rendered frames (and flows, when present) with a dataset.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Colour-code a `.flo` file.
    Flowviz {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_mag: Option<f64>,
    },
    /// Finite-difference check of every training objective.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        max_per_segment: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config file (sections and key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.lambda_max=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed cloud; defaults to the dataset's frame-0 ground-truth centers.
    #[arg(long)]
    init: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { spec, preset, seed, out } => generate(spec, preset, seed, &out),
        Command::TrainIter(a) => train_cmd(a, Paradigm::Iterative),
        Command::TrainDeform(a) => train_cmd(a, Paradigm::Deform),
        Command::Render { checkpoint, data, out } => render_cmd(&checkpoint, &data, &out),
        Command::Eval { pred, gt, out } => eval_cmd(&pred, &gt, out.as_deref()),
        Command::Flowviz { flow, out, max_mag } => {
            let f = read_flo(&flow).with_context(|| format!("flowviz: reading {}", flow.display()))?;
            if let Some(m) = max_mag {
                if !(m > 0.0) {
                    bail!("flowviz: --max-mag must be positive");
                }
            }
            write_png(&out, &flow_to_color(&f, max_mag)).context("flowviz: writing image")
        }
        Command::GradCheck { seed, max_per_segment } => {
            let reports = flowsplat::gradsuite::run(seed, max_per_segment).context("grad-check")?;
            let mut ok = true;
            for (name, r) in &reports {
                println!("== {name}\n{r}");
                ok &= r.passed();
            }
            if !ok {
                bail!("grad-check: at least one objective exceeds the tolerance");
            }
            Ok(())
        }
    }
}

fn preset(name: &str) -> Result<SceneSpec> {
    Ok(match name {
        "rigid-translation" => synth::rigid_translation_scene([0.05, 0.02]),
        "occluder" => synth::occluder_scene(),
        "static-arc" => synth::static_arc_scene(),
        "moving-blob" => synth::moving_blob_scene(),
        other => bail!("generate: unknown preset {other:?}"),
    })
}

fn generate(spec: Option<PathBuf>, preset_name: Option<String>, seed: u64, out: &Path) -> Result<()> {
    let spec = match (spec, preset_name) {
        (Some(p), _) => {
            let text = fs::read_to_string(&p).with_context(|| format!("generate: reading {}", p.display()))?;
            SceneSpec::from_toml(&text).context("generate: parsing scene spec")?
        }
        (None, Some(n)) => preset(&n)?,
        (None, None) => bail!("generate: pass --spec or --preset"),
    };
    let gt = synth::generate(&spec, seed).context("generate: synthesizing scene")?;
    synth::write_dataset(&gt, out).context("generate: writing dataset")?;
    println!("wrote {} frames x {} views to {}", gt.frames(), gt.views(), out.display());
    Ok(())
}

fn load_config(a: &TrainArgs, paradigm: Paradigm) -> Result<TrainConfig> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("config: reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::with_overrides(&text, &a.set).context("config")?;
    cfg.paradigm = paradigm;
    Ok(cfg)
}

fn seed_cloud(a: &TrainArgs, ds: &Dataset, cfg: &TrainConfig) -> Result<GaussianCloud> {
    let points = match &a.init {
        Some(p) => load_cloud(p).with_context(|| format!("init: reading {}", p.display()))?.centers(),
        None => {
            let p = a.data.join("gt/trajectories.csv");
            let tr = synth::read_trajectories(&p)
                .with_context(|| format!("init: no --init cloud and no seed points at {}", p.display()))?;
            tr.into_iter().next().unwrap_or_default()
        }
    };
    train::init_cloud(&points, ds, cfg).context("init")
}

fn train_cmd(a: TrainArgs, paradigm: Paradigm) -> Result<()> {
    let cfg = load_config(&a, paradigm)?;
    let ds = Dataset::load(&a.data).with_context(|| format!("load: dataset {}", a.data.display()))?;
    let init = seed_cloud(&a, &ds, &cfg)?;
    let gt_traj = synth::read_trajectories(&a.data.join("gt/trajectories.csv")).ok();
    fs::create_dir_all(&a.out).with_context(|| format!("output: creating {}", a.out.display()))?;
    let (ck, mut report, trajectories, opacity) = match paradigm {
        Paradigm::Iterative => {
            let r = train::train_iterative(&ds, init, &cfg).context("train-iter")?;
            for (t, s) in r.states.iter().enumerate() {
                save_cloud(&a.out.join(format!("states/{t}.ply")), s).context("output: writing states")?;
            }
            let tr = r.states.iter().map(|s| s.centers()).collect::<Vec<_>>();
            let op = r.states[0].gaussians.iter().map(|g| g.opacity()).collect::<Vec<_>>();
            let ck = Checkpoint {
                config: cfg.clone(),
                clouds: r.states,
                model: None,
                params: None,
            };
            (ck, r.report, tr, op)
        }
        Paradigm::Deform => {
            let r = train::train_deform(&ds, init, &cfg).context("train-deform")?;
            save_cloud(&a.out.join("canonical.ply"), &r.state.canonical).context("output: writing canonical cloud")?;
            let tr = r.state.trajectories(ds.frames()).context("train-deform: trajectories")?;
            let op = r.state.canonical.gaussians.iter().map(|g| g.opacity()).collect::<Vec<_>>();
            (Checkpoint::deform(cfg.clone(), &r.state), r.report, tr, op)
        }
    };
    if let Some(gt) = gt_traj {
        report.epe = train::trajectory_epe(&trajectories, &opacity, &gt).ok();
    }
    ck.save(&a.out.join("checkpoint.ckpt")).context("output: writing checkpoint")?;
    atomic_write(&a.out.join("config.cfg"), cfg.to_toml()?.as_bytes()).context("output: writing config")?;
    let mut log = Vec::new();
    report.write_log_csv(&mut log)?;
    atomic_write(&a.out.join("log.csv"), &log).context("output: writing log")?;
    write_summary(&a.out, &report)?;
    println!(
        "trained {} Gaussians, mean PSNR {:.3} dB{}",
        report.final_count(),
        report.mean_psnr(),
        report.epe.map_or(String::new(), |e| format!(", trajectory EPE {e:.5}"))
    );
    Ok(())
}

fn write_summary(out: &Path, r: &TrainReport) -> Result<()> {
    let mut text = String::from("frame,view,psnr,ssim\n");
    for (t, (p, s)) in r.psnr.iter().zip(&r.ssim).enumerate() {
        for (v, (p, s)) in p.iter().zip(s).enumerate() {
            text.push_str(&format!("{t},{v},{p:.6},{s:.6}\n"));
        }
    }
    atomic_write(&out.join("train_metrics.csv"), text.as_bytes()).context("output: writing train metrics")
}

fn frame_states(ck: &Checkpoint, frames: usize) -> Result<Vec<GaussianCloud>> {
    if ck.model.is_some() {
        let st = ck.deform_state()?;
        (0..frames).map(|t| Ok(st.deformed(t)?)).collect()
    } else if ck.clouds.len() == frames {
        Ok(ck.clouds.clone())
    } else if ck.clouds.len() == 1 {
        Ok(vec![ck.clouds[0].clone(); frames])
    } else {
        bail!("checkpoint holds {} states, dataset has {frames} frames", ck.clouds.len())
    }
}

fn render_cmd(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("load: checkpoint {}", checkpoint.display()))?;
    let ds = Dataset::load(data).with_context(|| format!("load: dataset {}", data.display()))?;
    let states = frame_states(&ck, ds.frames()).context("render")?;
    let raster = ck.config.raster.config();
    for t in 0..ds.frames() {
        for v in 0..ds.views() {
            let cam = &ds.cameras[t][v];
            let o = render(&states[t], cam, ds.background, &raster).context("render")?;
            write_png(&out.join(format!("frames/{t}/{v}.png")), &o.color).context("output: writing frame")?;
            write_depth(&out.join(format!("depth/{t}/{v}.dpt")), &o.depth).context("output: writing depth")?;
            if t + 1 < ds.frames() {
                let f = train::model_flow(&states[t], &states[t + 1], cam, &ds.cameras[t + 1][v], ds.background, &ck.config)
                    .context("render: model flow")?;
                write_flo(&out.join(format!("flow/{t}/{v}.flo")), &f).context("output: writing flow")?;
            }
        }
    }
    println!("rendered {} frames x {} views to {}", ds.frames(), ds.views(), out.display());
    Ok(())
}

fn eval_cmd(pred: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    let ds = Dataset::load(gt).with_context(|| format!("load: dataset {}", gt.display()))?;
    let mut frames = Vec::with_capacity(ds.frames());
    for t in 0..ds.frames() {
        let mut row = Vec::with_capacity(ds.views());
        for v in 0..ds.views() {
            let p = pred.join(format!("frames/{t}/{v}.png"));
            row.push(read_png(&p).with_context(|| format!("eval: reading {}", p.display()))?);
        }
        frames.push(row);
    }
    let mut report = MetricReport::compare(&frames, &ds.images).context("eval")?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (t, fl) in ds.flows.iter().enumerate() {
        for (v, g) in fl.iter().enumerate() {
            let p = pred.join(format!("flow/{t}/{v}.flo"));
            if let (Some(g), true) = (g, p.exists()) {
                sum += flow_epe(&read_flo(&p).context("eval: reading flow")?, g)?;
                n += 1;
            }
        }
    }
    if n > 0 {
        report.flow_epe = Some(sum / n as f64);
    }
    let csv = report.to_csv()?;
    match out {
        Some(p) => atomic_write(p, &csv).context("output: writing metrics")?,
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    Ok(())
}
