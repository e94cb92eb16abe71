//! `nnk`: simulate sequences, train the network, track, evaluate.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use nnk_core::beamformer::Beamformer;
use nnk_core::eval::{
    error_matrix, read_results, run_method, write_results, ErrorMatrixConfig, Method, MetricsReport,
};
use nnk_core::geometry::{ArrayGeometry, ImageGrid};
use nnk_core::io::{read_sequence, read_training_set, write_sequence, write_training_set, SequenceFile};
use nnk_core::kalman::ProcessNoise;
use nnk_core::mlp::{generate_training_data, load_model, save_model, train_lm, LMConfig, TrainedModel, TrainingGrid};
use nnk_core::simulator::{simulate_sequence, NoiseSpec, TrajectoryKind, TrajectorySpec, DEFAULT_SNR_DB};
use nnk_core::tracker::TrackerConfig;

#[derive(Parser)]
#[command(name = "nnk", version, about = "Out-of-plane point tracking for linear-array ultrasound")]
struct Cli {
    /// Array geometry as an inline JSON object or a path to a JSON file.
    #[arg(long, global = true)]
    geometry: Option<String>,
    /// Image grid as an inline JSON object or a path to a JSON file.
    #[arg(long, global = true)]
    grid: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; standard output where a subcommand allows it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an RF sequence (.rfseq).
    Simulate(SimulateArgs),
    /// Generate training data and fit the network (.nnk.json).
    Train(TrainArgs),
    /// Track a sequence and write per-frame results as CSV.
    Track(TrackArgs),
    /// Summarise one or more results CSVs.
    Eval(EvalArgs),
    /// Mean 3D error by depth and out-of-plane offset.
    ErrorMatrix(ErrorMatrixArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment preset: 1 curved, 2 curved with noise bursts, 3 in-plane,
    /// 4 stationary with elevation 0 to 5 mm.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4), conflicts_with = "trajectory")]
    exp: Option<u8>,
    /// Trajectory as JSON, e.g. {"kind":"axial_line",...}.
    #[arg(long)]
    trajectory: Option<String>,
    #[arg(long, default_value_t = 101)]
    frames: usize,
    /// SNR of an in-plane target at 7.5 mm depth, against the clean peak.
    #[arg(long, default_value_t = DEFAULT_SNR_DB)]
    snr_db: f64,
    /// Boost noise on every n-th frame; defaults to 10 for experiment 2 and
    /// 0 (off) otherwise.
    #[arg(long)]
    burst_every: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    burst_factor: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training-set CSV; loaded if present, otherwise generated and saved.
    #[arg(long)]
    data_cache: Option<PathBuf>,
    /// Grid points along lateral, axial and elevational axes.
    #[arg(long, value_delimiter = ',', default_values_t = [20usize, 20, 20])]
    counts: Vec<usize>,
    /// Extra in-plane points per (lateral, axial) pair.
    #[arg(long, default_value_t = 2)]
    in_plane: usize,
    /// Noise on the training frames' marker, matching tracked sequences.
    #[arg(long, default_value_t = DEFAULT_SNR_DB, conflicts_with = "noiseless")]
    snr_db: f64,
    /// Train on noiseless frames.
    #[arg(long)]
    noiseless: bool,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
}

#[derive(Args)]
struct TrackArgs {
    /// Input sequence (.rfseq).
    input: PathBuf,
    /// Trained model (.nnk.json); not needed for `--method mi`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "nnk")]
    method: String,
    #[arg(long, default_value_t = 15)]
    n_pixels: usize,
    /// Process noise variance for all four driven coordinates, mm².
    #[arg(long, default_value_t = 0.005 * 0.005)]
    process_noise: f64,
    /// Leave the timing columns empty so repeated runs are byte-identical.
    #[arg(long)]
    no_timing: bool,
    /// Also stream per-frame results as JSON lines to this file.
    #[arg(long)]
    jsonl: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Results CSVs, one per method.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Method labels; defaults to the file stems.
    #[arg(long, value_delimiter = ',')]
    names: Vec<String>,
}

#[derive(Args)]
struct ErrorMatrixArgs {
    #[arg(long)]
    model: PathBuf,
    /// Depths as start:stop:step or a comma list, mm.
    #[arg(long, default_value = "2:14:2")]
    depths: String,
    /// Offsets as start:stop:step or a comma list, mm.
    #[arg(long, default_value = "0:6:0.5")]
    offsets: String,
    /// Axial travel per frame along each line, mm.
    #[arg(long, default_value_t = 0.05)]
    frame_step: f64,
    #[arg(long, default_value_t = DEFAULT_SNR_DB)]
    snr_db: f64,
    /// Also write an SVG heatmap.
    #[arg(long)]
    svg: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Core(nnk_core::Error),
}

impl From<nnk_core::Error> for Failure {
    fn from(e: nnk_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let geometry: Option<ArrayGeometry> = cli.geometry.as_deref().map(load_json).transpose()?;
    let grid: Option<ImageGrid> = cli.grid.as_deref().map(load_json).transpose()?;
    let ctx = Context {
        geometry,
        grid,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Track(a) => track(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::ErrorMatrix(a) => matrix(&ctx, a),
    }
}

struct Context {
    geometry: Option<ArrayGeometry>,
    grid: Option<ImageGrid>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Context {
    fn geometry(&self) -> ArrayGeometry {
        self.geometry.clone().unwrap_or_default()
    }

    fn grid(&self) -> ImageGrid {
        self.grid.unwrap_or_default()
    }

    /// Output writer: the `--out` file or standard output.
    fn writer(&self) -> CliResult<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }
}

fn load_json<T: DeserializeOwned>(arg: &str) -> CliResult<T> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| Failure::Usage(format!("cannot read {arg}: {e}")))?
    };
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid JSON in {arg}: {e}")))
}

fn simulate(ctx: &Context, a: SimulateArgs) -> CliResult<()> {
    let Some(seed) = ctx.seed else {
        return usage("simulate requires an explicit --seed");
    };
    let Some(out) = &ctx.out else {
        return usage("simulate requires --out <file.rfseq>");
    };
    let kind = match (a.exp, &a.trajectory) {
        (Some(1), _) => TrajectoryKind::exp1(),
        (Some(2), _) => TrajectoryKind::exp2(),
        (Some(3), _) => TrajectoryKind::exp3(),
        (Some(_), _) => TrajectoryKind::exp4(7.5),
        (None, Some(t)) => load_json(t)?,
        (None, None) => return usage("give --exp or --trajectory"),
    };
    let geometry = ctx.geometry();
    let spec = TrajectorySpec::new(kind, a.frames);
    let noise = NoiseSpec {
        target_snr_db: a.snr_db,
        burst_factor: a.burst_factor,
        burst_every: a.burst_every.unwrap_or(if a.exp == Some(2) { 10 } else { 0 }),
        seed,
    };
    let seq = simulate_sequence(&geometry, &spec, &noise)?;
    let sigma = seq.noise_sigma;
    let file = SequenceFile::from_sequence(&geometry, &ctx.grid(), seq, Some(spec), Some(noise));
    write_sequence(out, &file)?;
    println!(
        "wrote {} frames to {} (snr {} dB, noise sigma {:.4e}, bursts every {}, seed {})",
        file.frames.len(),
        out.display(),
        noise.target_snr_db,
        sigma,
        noise.burst_every,
        seed
    );
    Ok(())
}

fn train(ctx: &Context, a: TrainArgs) -> CliResult<()> {
    if a.counts.len() != 3 {
        return usage("--counts takes three comma-separated values, e.g. 20,20,20");
    }
    let seed = ctx.seed.unwrap_or(0);
    let out = ctx.out.clone().unwrap_or_else(|| PathBuf::from("model.nnk.json"));
    let geometry = ctx.geometry();
    let grid = TrainingGrid {
        n_lateral: a.counts[0],
        n_axial: a.counts[1],
        n_elevation: a.counts[2],
        n_in_plane: a.in_plane,
        snr_db: (!a.noiseless).then_some(a.snr_db),
        seed,
        ..TrainingGrid::default()
    };
    let data = match &a.data_cache {
        Some(p) if p.exists() => read_training_set(File::open(p)?)?,
        cache => {
            let d = generate_training_data(&geometry, &ctx.grid(), &grid)?;
            if let Some(p) = cache {
                write_training_set(BufWriter::new(File::create(p)?), &d)?;
            }
            d
        }
    };
    let config = LMConfig {
        max_epochs: a.max_epochs,
        seed,
        ..LMConfig::default()
    };
    match train_lm(&data, &config) {
        Ok((params, report)) => {
            println!("{}", serde_json::to_string_pretty(&summary(&report)).unwrap_or_default());
            let model = TrainedModel {
                params,
                report: Some(report),
                geometry: Some(geometry),
            };
            save_model(&model, &out)?;
            Ok(())
        }
        Err(e) => {
            let partial = serde_json::json!({
                "rows": data.len(),
                "error": e.to_string(),
            });
            let path = out.with_extension("report.json");
            fs::write(&path, serde_json::to_string_pretty(&partial).unwrap_or_default())?;
            eprintln!("partial report written to {}", path.display());
            Err(e.into())
        }
    }
}

/// Training report without the per-step loss history.
fn summary(r: &nnk_core::mlp::TrainingReport) -> serde_json::Value {
    let mut v = serde_json::to_value(r).unwrap_or_default();
    if let Some(o) = v.as_object_mut() {
        o.remove("loss_history");
    }
    v
}

fn track(ctx: &Context, a: TrackArgs) -> CliResult<()> {
    let method: Method = a.method.parse()?;
    let seq = read_sequence(&a.input)?;
    let geometry = &seq.header.geometry;
    if let Some(g) = &ctx.geometry {
        if g != geometry {
            return usage("--geometry differs from the geometry recorded in the sequence");
        }
    }
    let grid = ctx.grid.unwrap_or(seq.header.grid);
    let config = match (&a.model, method) {
        (_, Method::Mi) => None,
        (None, _) => return usage(format!("--method {} needs --model", method.name())),
        (Some(p), _) => {
            let model = load_model(p)?;
            if let Some(g) = &model.geometry {
                if g != geometry {
                    return usage(format!(
                        "model {} was trained for a different array geometry than {}",
                        p.display(),
                        a.input.display()
                    ));
                }
            }
            let mut cfg = TrackerConfig::new(model.params);
            cfg.grid = grid;
            cfg.n_pixels = a.n_pixels;
            cfg.noise = ProcessNoise::uniform(a.process_noise);
            Some(cfg)
        }
    };
    let bf = Arc::new(Beamformer::new(geometry, &grid)?);
    let rows = run_method(&seq.frames, &seq.truth(), method, config.as_ref(), bf, !a.no_timing)?;
    write_results(ctx.writer()?, &rows)?;
    if let Some(p) = &a.jsonl {
        let mut w = BufWriter::new(File::create(p)?);
        for r in &rows {
            serde_json::to_writer(&mut w, r).map_err(nnk_core::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let mean = rows.iter().map(|r| r.err2d).sum::<f64>() / rows.len().max(1) as f64;
    eprintln!("{}: {} frames, mean 2D error {mean:.3} mm", method.name(), rows.len());
    Ok(())
}

fn eval(ctx: &Context, a: EvalArgs) -> CliResult<()> {
    if !a.names.is_empty() && a.names.len() != a.inputs.len() {
        return usage("--names must list one label per input");
    }
    let runs = a
        .inputs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let name = a.names.get(i).cloned().unwrap_or_else(|| stem(p));
            Ok((name, read_results(File::open(p)?)?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = MetricsReport::new(&runs)?;
    print!("{}", report.table());
    if let Some(p) = &ctx.out {
        fs::write(p, serde_json::to_string_pretty(&report).map_err(nnk_core::Error::from)?)?;
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("run");
    name.split('.').next().unwrap_or(name).to_string()
}

fn matrix(ctx: &Context, a: ErrorMatrixArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let geometry = ctx.geometry();
    if let Some(g) = &model.geometry {
        if *g != geometry {
            return usage("model was trained for a different array geometry");
        }
    }
    let mut cfg = ErrorMatrixConfig::new(ctx.seed.unwrap_or(0));
    cfg.depths = parse_axis(&a.depths)?;
    cfg.offsets = parse_axis(&a.offsets)?;
    cfg.frame_step = a.frame_step;
    cfg.noise.target_snr_db = a.snr_db;
    let mut tracker = TrackerConfig::new(model.params);
    tracker.grid = ctx.grid();
    let bf = Arc::new(Beamformer::new(&geometry, &tracker.grid)?);
    let m = error_matrix(&geometry, &cfg, &tracker, bf)?;
    m.write_csv(ctx.writer()?)?;
    if let Some(p) = &a.svg {
        fs::write(p, m.to_svg())?;
    }
    let (d, o, e) = m.worst();
    eprintln!("worst cell: depth {d} mm, offset {o} mm, mean 3D error {e:.3} mm");
    Ok(())
}

/// `start:stop:step` (inclusive) or a comma-separated list.
fn parse_axis(s: &str) -> CliResult<Vec<f64>> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Failure::Usage(format!("invalid number '{t}' in '{s}'")))
    };
    let v = if s.contains(':') {
        let parts = s.split(':').map(num).collect::<CliResult<Vec<f64>>>()?;
        let [start, stop, step] = parts[..] else {
            return usage(format!("range '{s}' must be start:stop:step"));
        };
        if !(step > 0.0) || stop < start {
            return usage(format!("range '{s}' is empty"));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|k| start + step * k as f64).collect()
    } else {
        s.split(',').map(num).collect::<CliResult<Vec<f64>>>()?
    };
    if v.is_empty() {
        return usage(format!("axis '{s}' is empty"));
    }
    Ok(v)
}
