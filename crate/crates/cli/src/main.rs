use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alignfield_cli::commands::{self, FramePlan};
use alignfield_cli::request::{CameraSpec, LatentSpec, MapKind, Model};
use alignfield_cli::service::{self, AppState};
use alignfield_core::config::SessionConfig;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "alignfield", version, about = "Aligned multi-object generation on a latent simplex")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one field for all prompts jointly.
    Generate(TrainArgs),
    /// Fit a source model, then transform it toward the target prompt.
    Transform(TrainArgs),
    /// Render a checkpoint with spatially varying latent codes from an anchor file.
    Hybridize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        smoothing: f64,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Turntable frames at a fixed latent, or a sweep between two vertices.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated latent code, e.g. `0.5,0.5`.
        #[arg(long, conflicts_with = "sweep")]
        latent: Option<String>,
        /// Sweep range `from..to` of `t` in `u(t) = (1 − t)·e_i + t·e_j`.
        #[arg(long)]
        sweep: Option<String>,
        /// Vertex pair `i,j` for the sweep.
        #[arg(long, default_value = "0,1")]
        pair: String,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[command(flatten)]
        view: ViewArgs,
    },
    /// Multiview alignment distance between two vertex objects.
    EvalAlign {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint; defaults to the first.
        #[arg(long)]
        checkpoint_b: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        a: usize,
        #[arg(long, default_value_t = 1)]
        b: usize,
        #[arg(long, default_value_t = 120)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 15.0)]
        elevation: f64,
        #[arg(long, default_value_t = 4)]
        stride: usize,
        /// Append the report as one JSON line to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare reverse-mode and finite-difference gradients on a tiny field.
    CheckGrad {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        resolution: usize,
        #[arg(long, default_value_t = 5e-3)]
        threshold: f64,
    },
    /// Serve renders of a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapArg {
    Rgb,
    Normal,
    Depth,
    Opacity,
}

impl From<MapArg> for MapKind {
    fn from(m: MapArg) -> Self {
        match m {
            MapArg::Rgb => MapKind::Rgb,
            MapArg::Normal => MapKind::Normal,
            MapArg::Depth => MapKind::Depth,
            MapArg::Opacity => MapKind::Opacity,
        }
    }
}

#[derive(Args)]
struct ViewArgs {
    #[arg(long, default_value_t = 0.0)]
    azimuth: f64,
    #[arg(long, default_value_t = 15.0)]
    elevation: f64,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 40.0)]
    fov: f64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, value_delimiter = ',', default_value = "rgb")]
    maps: Vec<MapArg>,
    #[arg(long, default_value = "frames")]
    output: PathBuf,
}

impl ViewArgs {
    fn camera(&self) -> CameraSpec {
        CameraSpec {
            azimuth_deg: self.azimuth,
            elevation_deg: self.elevation,
            radius: self.radius,
            fov_deg: self.fov,
            width: self.width,
            height: self.height,
        }
    }

    fn maps(&self) -> Vec<MapKind> {
        self.maps.iter().map(|&m| m.into()).collect()
    }
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("not a number: {t:?}")))
        .collect()
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s.split_once("..").context("sweep range must look like `0..1`")?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn load_config(args: &TrainArgs) -> Result<SessionConfig> {
    let mut config = SessionConfig::load(&args.config).with_context(|| format!("invalid config {}", args.config.display()))?;
    if let Some(n) = args.iterations {
        config.generation.iterations = n;
    }
    if let Some(out) = &args.output {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let path = commands::generate(&load_config(&args)?)?;
            println!("{}", path.display());
        }
        Command::Transform(args) => {
            let path = commands::transform(&load_config(&args)?)?;
            println!("{}", path.display());
        }
        Command::Hybridize { checkpoint, anchors, smoothing, view } => {
            let model = load_model(&checkpoint)?;
            let written = commands::hybridize(&model, &anchors, smoothing, &view.camera(), &view.maps(), view.samples, &view.output)?;
            print_written(&written);
        }
        Command::Render {
            checkpoint,
            latent,
            sweep,
            pair,
            frames,
            view,
        } => {
            if frames == 0 {
                bail!("--frames must be at least 1");
            }
            let model = load_model(&checkpoint)?;
            let plan = match (latent, sweep) {
                (_, Some(range)) => {
                    let (from, to) = parse_range(&range)?;
                    let p: Vec<usize> = pair.split(',').map(|t| t.trim().parse()).collect::<Result<_, _>>().context("--pair must look like `0,1`")?;
                    let [i, j] = p[..] else { bail!("--pair needs exactly two vertices") };
                    FramePlan::Sweep { from, to, pair: [i, j], frames }
                }
                (Some(u), None) => FramePlan::Turntable {
                    latent: LatentSpec::fixed(parse_floats(&u)?),
                    frames,
                },
                (None, None) => bail!("give --latent or --sweep"),
            };
            let requests = plan.requests(&view.camera(), &view.maps(), view.samples);
            print_written(&commands::write_frames(&model, &requests, &view.output)?);
        }
        Command::EvalAlign {
            checkpoint,
            checkpoint_b,
            a,
            b,
            views,
            resolution,
            elevation,
            stride,
            json,
        } => {
            let model_a = load_model(&checkpoint)?;
            let model_b = match &checkpoint_b {
                Some(p) => Some(load_model(p)?),
                None => None,
            };
            let config = commands::multiview_for(&model_a, views, resolution, elevation, stride);
            let report = commands::eval_align(&model_a, a, model_b.as_ref().unwrap_or(&model_a), b, &config)?;
            println!("{}", report.to_json_line());
            println!("{}", alignfield_core::metrics::summary_table(std::slice::from_ref(&report)));
            if let Some(path) = json {
                use std::io::Write;
                let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
                writeln!(f, "{}", report.to_json_line())?;
            }
        }
        Command::CheckGrad {
            samples,
            seed,
            resolution,
            threshold,
        } => {
            let report = commands::check_grad(samples, seed, resolution)?;
            println!("{}", serde_json::to_string(&report)?);
            println!("checked {} parameters, max relative error {:.3e}", report.entries.len(), report.max_rel_error);
            if !(report.max_rel_error < threshold) {
                bail!("max relative error {:.3e} exceeds {threshold:e}", report.max_rel_error);
            }
        }
        Command::Serve { checkpoint, bind } => {
            let model = load_model(&checkpoint)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("binding {bind}"))?;
                tracing::info!(addr = %listener.local_addr()?, "serving");
                eprintln!("listening on {}", listener.local_addr()?);
                service::serve(listener, AppState::new(model)).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("ALIGNFIELD_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": format!("{e:#}") });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
