use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use contmem_core::io::{
    read_profile_file, read_weights_file, write_density_csv, write_profile_file, write_stream_file,
    write_tokens, StreamHeader, StreamReader,
};
use contmem_core::pipeline::ChunkDiagnostics;
use contmem_core::selftest::{run_selftest, Check};
use contmem_core::{generate_stream, Error, Pipeline, PipelineConfig, SyntheticStreamSpec};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "contmem",
    version,
    about = "Continuous long-term memory over embedding streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a stream file into query tokens.
    Run {
        #[arg(long)]
        input: PathBuf,
        /// Pipeline configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Projection weights replacing the seeded defaults.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Print one chunk's density profile from a run directory.
    ExportDensity {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        chunk: usize,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in property suite and needle scenario.
    Selftest {
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Write a synthetic needle stream and its ground truth.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

/// A failed command: message plus exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_numerical() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::input(e.to_string())
    }
}

fn context(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            input,
            config,
            out,
            weights,
        } => run(&input, config.as_deref(), &out, weights.as_deref()),
        Command::ExportDensity {
            input,
            chunk,
            format,
            out,
        } => export_density(&input, chunk, format, out.as_deref()),
        Command::Selftest { weights } => selftest(weights.as_deref()),
        Command::Gen { spec, out } => gen(&spec, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("contmem: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[derive(Serialize)]
struct RunReport<'a> {
    input: &'a StreamHeader,
    config: &'a PipelineConfig,
    alpha: f64,
    weights: Option<String>,
    chunks: Vec<ChunkDiagnostics>,
    total_seconds: f64,
    footprint_reals: usize,
    tokens: [usize; 2],
}

fn run(
    input: &Path,
    config: Option<&Path>,
    out: &Path,
    weights: Option<&Path>,
) -> Result<u8, Failure> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::from_json(&fs::read_to_string(p)?).map_err(context(p))?,
        None => PipelineConfig::default(),
    };
    let reader = StreamReader::open(input).map_err(context(input))?;
    let header = reader.header().clone();
    for (name, slot, value) in [
        (
            "frames_per_chunk",
            &mut cfg.frames_per_chunk,
            header.chunk_frames,
        ),
        ("patches", &mut cfg.patches, header.patches),
        ("dim", &mut cfg.dim, header.dim),
    ] {
        if *slot != value {
            eprintln!(
                "contmem: {name} {} -> {value} (taken from the stream header)",
                *slot
            );
            *slot = value;
        }
    }
    let pipeline = match weights {
        Some(p) => {
            let layers = read_weights_file(p).map_err(context(p))?;
            let queries = cfg.seeded_queries()?;
            Pipeline::with_parts(cfg, layers, queries).map_err(context(p))?
        }
        None => Pipeline::new(cfg)?,
    };
    fs::create_dir_all(out)?;

    let start = Instant::now();
    let mut state = pipeline.initial_state()?;
    let mut chunks = Vec::new();
    let mut footprint = 0;
    for chunk in reader {
        let chunk = chunk.map_err(context(input))?;
        let mut output = pipeline.process_chunk(&state, &chunk)?;
        let c = output.diagnostics.chunk_index;
        if let Some(profile) = output.diagnostics.profile.take() {
            write_profile_file(out.join(format!("density_chunk_{c}.bin")), &profile)?;
            let mut csv = BufWriter::new(File::create(out.join(format!("density_chunk_{c}.csv")))?);
            write_density_csv(&mut csv, &profile)?;
        }
        chunks.push(output.diagnostics);
        state = output.state;
        footprint = footprint.max(pipeline.state_footprint(&state));
    }
    let tokens = state
        .running
        .ok_or_else(|| Failure::input("stream has no frames"))?;
    write_tokens(out.join("tokens.bin"), out.join("tokens.json"), &tokens)?;

    let report = RunReport {
        input: &header,
        config: pipeline.config(),
        alpha: pipeline.config().alpha,
        weights: weights.map(|p| p.display().to_string()),
        chunks,
        total_seconds: start.elapsed().as_secs_f64(),
        footprint_reals: footprint,
        tokens: [tokens.nrows(), tokens.ncols()],
    };
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    fs::write(out.join("report.json"), text + "\n")?;
    Ok(0)
}

fn export_density(
    dir: &Path,
    chunk: usize,
    format: Format,
    out: Option<&Path>,
) -> Result<u8, Failure> {
    let path = dir.join(format!("density_chunk_{chunk}.bin"));
    if !path.is_file() {
        return Err(Failure::input(format!(
            "no density for chunk {chunk} in {}",
            dir.display()
        )));
    }
    let profile = read_profile_file(&path).map_err(context(&path))?;
    match format {
        Format::Csv => match out {
            Some(p) => write_density_csv(BufWriter::new(File::create(p)?), &profile)?,
            None => match write_density_csv(io::stdout().lock(), &profile) {
                Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => {}
                other => other?,
            },
        },
    }
    Ok(0)
}

fn selftest(weights: Option<&Path>) -> Result<u8, Failure> {
    let mut load = None;
    let layers = match weights {
        Some(p) => match read_weights_file(p) {
            Ok(layers) => Some(layers),
            Err(e) => {
                load = Some(Check {
                    name: "weights.load".into(),
                    passed: false,
                    detail: format!("{}: {e}", p.display()),
                    seconds: 0.0,
                });
                None
            }
        },
        None => None,
    };
    let mut report = run_selftest(layers.as_deref());
    report.checks.extend(load);
    print!("{}", report.table());
    Ok(if report.all_passed() { 0 } else { 3 })
}

fn gen(spec_path: &Path, out: &Path) -> Result<u8, Failure> {
    let spec: SyntheticStreamSpec = serde_json::from_str(&fs::read_to_string(spec_path)?)
        .map_err(|e| context(spec_path)(Error::from(e)))?;
    let (stream, truth) = generate_stream(&spec).map_err(context(spec_path))?;
    let header = StreamHeader::new(
        spec.chunks * spec.frames_per_chunk,
        spec.patches,
        spec.dim,
        spec.frames_per_chunk,
    );
    write_stream_file(out, &header, stream)?;
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".truth.json");
    let mut w = BufWriter::new(File::create(PathBuf::from(sidecar))?);
    serde_json::to_writer_pretty(&mut w, &truth).map_err(Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(0)
}
