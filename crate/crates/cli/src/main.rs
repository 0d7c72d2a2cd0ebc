use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rangegan_core::dataio::{self, DatasetSpec, Split};
use rangegan_core::metrics::{self, MetricConfig, MetricReport, RandomConvFeatures};
use rangegan_core::autodiff::Scalar;
use rangegan_core::netcore::read_checkpoint;
use rangegan_core::rangeview::{self, AngleSource, ChannelRole, SensorConfig};
use rangegan_core::trainer::{self, FitOptions, GeneratorTranslator, RunConfig, TrainState, Translator};
use rangegan_core::{toy, Error};

const EXIT_INPUT: u8 = 2;
const EXIT_STATE: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "rangegan", version, about = "Lidar range-image translation toolkit")]
struct Cli {
    /// Seed for training, sampling and metrics (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch file operations and metric kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// TOML file with `seed`, `threads`, `[run]` and `[metrics]` tables.
    #[arg(long, global = true, env = "RANGEGAN_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SensorArgs {
    /// Range-image rows (overrides the config file).
    #[arg(long)]
    height: Option<usize>,
    /// Range-image columns (overrides the config file).
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Angles {
    Stored,
    PixelCenter,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
            SplitArg::All => Split::All,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Channel {
    Depth,
    Reflectance,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project every `.bin` scan under a directory to `.rimg` range images.
    Project {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        sensor: SensorArgs,
    },
    /// Rebuild `.bin` point clouds from every `.rimg` under a directory.
    Reconstruct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "stored")]
        angles: Angles,
        #[command(flatten)]
        sensor: SensorArgs,
    },
    /// Train a translator from a simulated to a real dataset.
    Train {
        #[arg(long, env = "RANGEGAN_SIM")]
        sim: PathBuf,
        #[arg(long, env = "RANGEGAN_REAL")]
        real: PathBuf,
        #[arg(long, env = "RANGEGAN_RUN_DIR")]
        run_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Translate a dataset split with a trained checkpoint.
    Translate {
        #[arg(long, env = "RANGEGAN_DATASET")]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Realness metrics of generated scans against real scans, plus
    /// faithfulness metrics when a pairing manifest is given.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory for `report.json` and the resolved config.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        sample_count: Option<usize>,
        #[command(flatten)]
        sensor: SensorArgs,
    },
    /// Class proportions of a labeled dataset.
    Stats {
        #[arg(long, env = "RANGEGAN_DATASET")]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Grayscale PNG renders of `.rimg` or `.bin` files.
    Render {
        /// A file or a directory searched recursively.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "depth")]
        channel: Channel,
        #[command(flatten)]
        sensor: SensorArgs,
    },
    /// Write the procedural toy dataset (simulated and real-style domains).
    Toy {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    run: RunConfig,
    metrics: MetricConfig,
}

enum Failure {
    Input(String),
    State(String),
    Usage(String),
}

type CliResult<T> = std::result::Result<T, Failure>;

fn input<T>(r: rangegan_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure::Input(e.to_string()))
}

fn state<T>(r: rangegan_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure::State(e.to_string()))
}

fn io_err(path: &Path, e: impl Display) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

struct Resolved {
    seed: u64,
    file: FileConfig,
}

impl Resolved {
    fn new(cli: &Cli) -> CliResult<Self> {
        let mut file = match &cli.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                toml::from_str::<FileConfig>(&text).map_err(|e| io_err(p, e))?
            }
            None => FileConfig::default(),
        };
        let seed = cli.seed.or(file.seed).unwrap_or(file.run.train.seed);
        file.seed = Some(seed);
        file.threads = cli.threads.or(file.threads);
        file.run.train.seed = seed;
        file.metrics.seed = seed;
        Ok(Self { seed, file })
    }

    fn sensor(&self, args: &SensorArgs) -> CliResult<SensorConfig> {
        let mut s = self.file.run.sensor;
        if let Some(h) = args.height {
            s.height = h;
        }
        if let Some(w) = args.width {
            s.width = w;
        }
        s.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(s)
    }

    fn to_toml(&self) -> String {
        toml::to_string(&self.file).expect("config serializes")
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Files under `dir` with extension `ext`, sorted. A file path is returned as is.
fn files_with_ext(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    if !dir.exists() {
        return Err(Failure::Input(format!("{}: no such file or directory", dir.display())));
    }
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    fn walk(d: &Path, ext: &str, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(d)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, ext, out)?;
            } else if p.extension().is_some_and(|x| x == ext) {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, ext, &mut out).map_err(|e| io_err(dir, e))?;
    out.sort();
    Ok(out)
}

/// `out/<path relative to base>` with the extension replaced.
fn mirror(base: &Path, file: &Path, out: &Path, ext: &str) -> PathBuf {
    let rel = if base.is_file() {
        Path::new(file.file_name().expect("file name"))
    } else {
        file.strip_prefix(base).unwrap_or(file)
    };
    out.join(rel).with_extension(ext)
}

fn cmd_project(cfg: &Resolved, input_dir: &Path, out: &Path, sensor: &SensorConfig) -> CliResult<()> {
    let files = files_with_ext(input_dir, "bin")?;
    let reports = files
        .par_iter()
        .map(|f| -> rangegan_core::Result<(usize, usize)> {
            let cloud = dataio::read_scan(f)?.cloud;
            let (img, rep) = rangeview::project(&cloud, sensor)?;
            rangeview::write_rimg(&img, &mirror(input_dir, f, out, "rimg"))?;
            Ok((cloud.len(), rep.collisions + rep.out_of_fov))
        })
        .collect::<rangegan_core::Result<Vec<_>>>();
    let reports = input(reports)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let points: usize = reports.iter().map(|r| r.0).sum();
    let dropped: usize = reports.iter().map(|r| r.1).sum();
    println!("projected {} scans: {points} points, {dropped} not retained", files.len());
    Ok(())
}

fn cmd_reconstruct(cfg: &Resolved, input_dir: &Path, out: &Path, angles: Angles, sensor: &SensorConfig) -> CliResult<()> {
    let files = files_with_ext(input_dir, "rimg")?;
    let source = match angles {
        Angles::Stored => AngleSource::Stored,
        Angles::PixelCenter => AngleSource::PixelCenter,
    };
    let counts = files
        .par_iter()
        .map(|f| -> rangegan_core::Result<usize> {
            let img = rangeview::read_rimg(f)?;
            let cloud = rangeview::reconstruct(&img, sensor, source)?;
            dataio::write_scan(&mirror(input_dir, f, out, "bin"), &cloud)?;
            Ok(cloud.len())
        })
        .collect::<rangegan_core::Result<Vec<_>>>();
    let counts = input(counts)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    println!("reconstructed {} scans: {} points", files.len(), counts.iter().sum::<usize>());
    Ok(())
}

struct TrainArgs<'a> {
    sim: &'a Path,
    real: &'a Path,
    run_dir: &'a Path,
    epochs: Option<usize>,
    max_steps: Option<u64>,
    resume: Option<&'a Path>,
}

fn cmd_train<T: Scalar>(cfg: &Resolved, a: TrainArgs<'_>) -> CliResult<()> {
    let mut st = match a.resume {
        Some(p) => state(TrainState::<T>::load(p))?,
        None => TrainState::<T>::new(cfg.file.run.clone()).map_err(|e| Failure::Input(e.to_string()))?,
    };
    if let Some(e) = a.epochs {
        st.config.train.epochs = e;
    }
    if let Some(m) = a.max_steps {
        st.config.train.max_steps = Some(m);
    }
    let run = st.config.clone();
    let sim = input(DatasetSpec::load(a.sim))?;
    let real = input(DatasetSpec::load(a.real))?;
    let x = input(trainer::load_domain(&sim, Split::Train, &run.sensor, run.norm))?;
    let y = input(trainer::load_domain(&real, Split::Train, &run.sensor, run.norm))?;
    let resolved = FileConfig {
        run: run.clone(),
        ..cfg.file.clone()
    };
    write_text(&a.run_dir.join("config.toml"), &toml::to_string(&resolved).expect("config serializes"))?;
    let log_path = a.run_dir.join("train.log");
    let mut log = if a.resume.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        fs::File::create(&log_path)
    }
    .map(BufWriter::new)
    .map_err(|e| io_err(&log_path, e))?;
    let opts = FitOptions {
        checkpoint_dir: Some(a.run_dir.join("checkpoints")),
        log: Some(&mut log),
    };
    let written = trainer::fit(&mut st, &x, &y, opts).map_err(|e| match e {
        Error::NonFiniteLoss { .. } => Failure::State(e.to_string()),
        e => Failure::Input(e.to_string()),
    })?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    println!("trained to step {} (epoch {}); wrote {} checkpoints", st.step, st.epoch, written.len());
    Ok(())
}

fn load_translator(path: &Path) -> CliResult<Box<dyn Translator>> {
    let ck = state(read_checkpoint(path))?;
    match ck.meta.get("precision").and_then(|v| v.as_str()) {
        Some("f32") => Ok(Box::new(GeneratorTranslator::from_state(&state(TrainState::<f32>::from_checkpoint(&ck))?))),
        Some("f64") => Ok(Box::new(GeneratorTranslator::from_state(&state(TrainState::<f64>::from_checkpoint(&ck))?))),
        _ => Err(Failure::State(format!("{}: checkpoint has no known precision", path.display()))),
    }
}

fn cmd_translate(cfg: &Resolved, dataset: &Path, checkpoint: &Path, out: &Path, split: Split) -> CliResult<()> {
    let spec = input(DatasetSpec::load(dataset))?;
    let tr = load_translator(checkpoint)?;
    let summary = trainer::translate(&spec, split, tr.as_ref(), out).map_err(|e| match e {
        Error::Incompatible(_) => Failure::State(e.to_string()),
        e => Failure::Input(e.to_string()),
    })?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    println!(
        "translated {} scans: {} points in, {} points out",
        summary.scans, summary.input_points, summary.output_points
    );
    Ok(())
}

fn cmd_evaluate(cfg: &Resolved, real: &Path, generated: &Path, manifest: Option<&Path>, out: Option<&Path>, sensor: &SensorConfig) -> CliResult<()> {
    for d in [real, generated] {
        if !d.is_dir() {
            return Err(Failure::Input(format!("{}: not a directory", d.display())));
        }
    }
    let extractor = RandomConvFeatures::new();
    let report: MetricReport = input(metrics::evaluate(real, generated, manifest, sensor, &cfg.file.metrics, &extractor))?;
    if let Some(dir) = out {
        write_text(&dir.join("report.json"), &report.to_json())?;
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    }
    println!("{}", MetricReport::table_header());
    println!("{}", report.table_row());
    Ok(())
}

fn cmd_stats(dataset: &Path, split: Split) -> CliResult<()> {
    let spec = input(DatasetSpec::load(dataset))?;
    let counts = input(dataio::class_proportions(&spec, split))?;
    let props = counts.proportions();
    println!("id\tclass\tpoints\tproportion");
    for (i, (id, name)) in spec.classes.iter().enumerate() {
        println!("{id}\t{name}\t{}\t{:.6}", counts.counts[i], props[i]);
    }
    println!("total\t\t{}\t", counts.total());
    Ok(())
}

fn cmd_render(cfg: &Resolved, input_path: &Path, out: &Path, channel: Channel, sensor: &SensorConfig) -> CliResult<()> {
    let mut files = files_with_ext(input_path, "rimg")?;
    files.extend(files_with_ext(input_path, "bin")?.into_iter().filter(|f| f.extension().is_some_and(|x| x == "bin")));
    files.sort();
    files.dedup();
    let role = match channel {
        Channel::Depth => ChannelRole::Depth,
        Channel::Reflectance => ChannelRole::Reflectance,
    };
    let done = files
        .par_iter()
        .map(|f| -> rangegan_core::Result<()> {
            let img = if f.extension().is_some_and(|x| x == "rimg") {
                rangeview::read_rimg(f)?
            } else {
                rangeview::project(&dataio::read_scan(f)?.cloud, sensor)?.0
            };
            rangeview::render_png(&img, role, &mirror(input_path, f, out, "png"))
        })
        .collect::<rangegan_core::Result<Vec<_>>>();
    input(done)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    println!("rendered {} images", files.len());
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = Resolved::new(cli)?;
    if let Some(n) = cfg.file.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    log::debug!("resolved config:\n{}", cfg.to_toml());
    match &cli.command {
        Command::Project { input, output, sensor } => cmd_project(&cfg, input, output, &cfg.sensor(sensor)?),
        Command::Reconstruct {
            input,
            output,
            angles,
            sensor,
        } => cmd_reconstruct(&cfg, input, output, *angles, &cfg.sensor(sensor)?),
        Command::Train {
            sim,
            real,
            run_dir,
            epochs,
            max_steps,
            resume,
            precision,
        } => {
            let a = TrainArgs {
                sim,
                real,
                run_dir,
                epochs: *epochs,
                max_steps: *max_steps,
                resume: resume.as_deref(),
            };
            match precision {
                Precision::F32 => cmd_train::<f32>(&cfg, a),
                Precision::F64 => cmd_train::<f64>(&cfg, a),
            }
        }
        Command::Translate {
            dataset,
            checkpoint,
            output,
            split,
        } => cmd_translate(&cfg, dataset, checkpoint, output, (*split).into()),
        Command::Evaluate {
            real,
            generated,
            manifest,
            output,
            sample_count,
            sensor,
        } => {
            let mut cfg = cfg;
            if let Some(n) = sample_count {
                cfg.file.metrics.sample_count = *n;
            }
            cfg.file.metrics.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let s = cfg.sensor(sensor)?;
            cmd_evaluate(&cfg, real, generated, manifest.as_deref(), output.as_deref(), &s)
        }
        Command::Stats { dataset, split } => cmd_stats(dataset, (*split).into()),
        Command::Render {
            input,
            output,
            channel,
            sensor,
        } => cmd_render(&cfg, input, output, *channel, &cfg.sensor(sensor)?),
        Command::Toy { output, count } => {
            let (sim, real) = input(toy::write_toy_dataset(output, cfg.seed, *count))?;
            println!("wrote {} and {}", sim.display(), real.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::State(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_STATE)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
