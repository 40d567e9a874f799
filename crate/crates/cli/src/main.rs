//! `vignette`: command-line front-end over the library API.
//!
//! Results go to stdout as `key=value` lines, or as one JSON object with the
//! same keys under `--json`. Exit status is 0 on success, 1 when the operation
//! fails, 2 on a usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use vignette_core::config::Config;
use vignette_core::container::{extract_from_container, read_sidecar, SIDECAR_EXTENSION};
use vignette_core::cost::{self, CostParams};
use vignette_core::metadata::decode_metadata;
use vignette_core::metrics::{ewpsnr, psnr, FramePair};
use vignette_core::search::{CandidateScore, SearchMode, SearchResult};
use vignette_core::storage::{
    Library, MotionSource, PolicyAction, SaliencySource, VideoRecord, VignetteOptions,
};
use vignette_core::video::read_frames_any;
use vignette_core::{Error, SaliencyMap};

#[derive(Parser)]
#[command(name = "vignette", version, about = "Saliency-driven tiled video compression")]
struct Cli {
    /// Library root holding manifest.json and vignette.toml.
    #[arg(long, global = true, default_value = ".")]
    library: PathBuf,
    /// Worker threads (default: logical CPU count).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Emit one JSON object instead of key=value lines.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Heuristic,
    Exhaustive,
}

impl From<Mode> for SearchMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Heuristic => SearchMode::Heuristic,
            Mode::Exhaustive => SearchMode::Exhaustive,
        }
    }
}

#[derive(Args)]
struct PerceptualArgs {
    /// Target bitrate for the most salient tiles (default: the segment's current target).
    #[arg(long)]
    target_kbps: Option<u32>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// `builtin`, a PGM map used for every segment, or a directory with one PGM per frame.
    #[arg(long, default_value = "builtin")]
    saliency: String,
    /// Motion-vector CSV for the whole video (default: configured extractor or block matching).
    #[arg(long)]
    motion: Option<PathBuf>,
}

impl PerceptualArgs {
    fn options(&self) -> VignetteOptions {
        VignetteOptions {
            target_kbps: self.target_kbps,
            mode: self.mode.map(Into::into),
            saliency: SaliencySource::parse(&self.saliency),
            motion: self.motion.clone().map(MotionSource::Dump),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Register a y4m video and split it into segments.
    Ingest {
        path: PathBuf,
        #[arg(long)]
        id: Option<String>,
        /// Segment length in seconds (default from vignette.toml, else 12).
        #[arg(long)]
        segment_len: Option<f64>,
    },
    /// Conventional single-quality transcode.
    Transcode {
        id: String,
        #[arg(long)]
        target_kbps: u32,
    },
    /// Saliency-driven tiled transcode.
    Vtranscode {
        id: String,
        #[command(flatten)]
        args: PerceptualArgs,
    },
    /// Re-encode at a lower target keeping grid and weights.
    Squeeze {
        id: String,
        #[arg(long)]
        target_kbps: u32,
    },
    /// Blend a fixation map into the saliency maps and re-encode.
    Update {
        id: String,
        #[arg(long)]
        fixation: PathBuf,
        /// Weight of the current map in the blend (default from vignette.toml, else 0.5).
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Print the saliency metadata carried by an MP4 or a .vgnt sidecar.
    Inspect { path: PathBuf },
    /// Report the tile-configuration search for each segment without encoding.
    Search {
        id: String,
        #[command(flatten)]
        args: PerceptualArgs,
    },
    /// PSNR, and EWPSNR when a saliency map is given, between two videos or frames.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "out")]
        processed: PathBuf,
        #[arg(long)]
        saliency: Option<PathBuf>,
    },
    /// Data-center cost model.
    Cost {
        #[command(subcommand)]
        command: CostCommand,
    },
    /// Compression policies from vignette.toml.
    Policy {
        #[command(subcommand)]
        command: PolicyCommand,
    },
    /// Show or set a video's popularity counter.
    Popularity {
        id: String,
        #[arg(long)]
        set: Option<u64>,
    },
}

#[derive(Subcommand)]
enum CostCommand {
    /// Views at which perceptual compression pays for its extra compute.
    Breakeven {
        /// Parameter override, `key=value`; repeatable.
        #[arg(long = "param")]
        params: Vec<String>,
        /// Vary one parameter linearly: `key=start:end:n`.
        #[arg(long)]
        sweep: Option<String>,
        /// Cost of both pipelines at `n` geometric view counts: `lo:hi:n`.
        #[arg(long)]
        curve: Option<String>,
        /// Where to write sweep or curve CSV (`-` for stdout).
        #[arg(long, default_value = "-")]
        csv: PathBuf,
    },
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// List the actions the configured policies call for.
    Apply {
        /// Run the scheduled actions.
        #[arg(long)]
        execute: bool,
    },
}

/// Ordered key/value output.
#[derive(Default)]
struct Report(Vec<(String, Value)>);

impl Report {
    fn put(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.0.push((key.into(), value.into()));
    }

    fn render(&self, json: bool) -> String {
        if json {
            let map: serde_json::Map<String, Value> = self.0.iter().cloned().collect();
            let mut s = serde_json::to_string_pretty(&Value::Object(map)).expect("plain values serialize");
            s.push('\n');
            return s;
        }
        self.0
            .iter()
            .map(|(k, v)| format!("{k}={}\n", text(v)))
            .collect()
    }
}

fn text(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(text).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn put_video(r: &mut Report, v: &VideoRecord) {
    r.put("id", v.id.as_str());
    r.put("state", serde_json::to_value(v.state).unwrap());
    r.put("width", v.width);
    r.put("height", v.height);
    r.put("frame_rate", format!("{}/{}", v.frame_rate.num, v.frame_rate.den));
    r.put("frames", v.frame_count);
    r.put("duration_s", v.duration_s());
    r.put("source_kbps", v.source_kbps);
    r.put("popularity", v.popularity);
    r.put("segments", v.segments.len());
    r.put("size_bytes", v.size_bytes());
    for s in &v.segments {
        let k = |f: &str| format!("segment.{}.{f}", s.index);
        r.put(k("start_frame"), s.start_frame);
        r.put(k("duration_s"), s.duration_s);
        r.put(k("target_kbps"), s.target_kbps);
        r.put(k("grid"), s.grid.as_ref().map(|g| g.label()));
        r.put(k("weights"), s.weights.clone());
        r.put(k("bitrates_kbps"), s.bitrates_kbps.clone());
        r.put(k("size_bytes"), s.size_bytes);
    }
}

fn put_search(r: &mut Report, segment: usize, s: &SearchResult) {
    let k = |f: String| format!("segment.{segment}.{f}");
    r.put(k("mode".into()), s.mode.to_string());
    r.put(k("chosen".into()), s.chosen.label());
    r.put(k("candidates".into()), s.per_config.len());
    for c in &s.per_config {
        let g = c.grid.label();
        match c.score {
            CandidateScore::Heuristic { deviation } => r.put(k(format!("config.{g}.deviation")), deviation),
            CandidateScore::Exhaustive { size_bytes, psnr_db, ewpsnr_db } => {
                r.put(k(format!("config.{g}.size_bytes")), size_bytes);
                r.put(k(format!("config.{g}.psnr_db")), psnr_db);
                r.put(k(format!("config.{g}.ewpsnr_db")), ewpsnr_db);
            }
        }
    }
}

fn open_library(cli: &Cli) -> Result<Library, Error> {
    let mut config = Config::load(&cli.library)?;
    if let Some(w) = cli.workers {
        config.encoder.worker_limit = w;
    }
    Library::with_config(&cli.library, config)
}

/// `a:b:n` with `n >= 2`.
fn parse_range(s: &str) -> Result<(f64, f64, usize), Error> {
    let bad = || Error::InvalidArgument(format!("range `{s}` is not of the form start:end:n"));
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts[..] else { return Err(bad()) };
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n < 2 {
        return Err(bad());
    }
    Ok((a, b, n))
}

fn csv_sink(path: &Path) -> Result<Box<dyn Write>, Error> {
    if path == Path::new("-") {
        return Ok(Box::new(std::io::stdout()));
    }
    let f = std::fs::File::create(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    Ok(Box::new(f))
}

fn run(cli: &Cli) -> Result<Report, Error> {
    let mut r = Report::default();
    match &cli.command {
        Command::Ingest { path, id, segment_len } => {
            let lib = open_library(cli)?;
            let v = lib.ingest(path, id.as_deref(), *segment_len)?;
            put_video(&mut r, &v);
        }
        Command::Transcode { id, target_kbps } => {
            let v = open_library(cli)?.transcode(id, *target_kbps)?;
            put_video(&mut r, &v);
        }
        Command::Vtranscode { id, args } => {
            let report = open_library(cli)?.vignette_transcode(id, &args.options())?;
            put_video(&mut r, &report.video);
            for (i, s) in report.searches.iter().enumerate() {
                r.put(format!("segment.{i}.search_mode"), s.mode.to_string());
            }
        }
        Command::Squeeze { id, target_kbps } => {
            let v = open_library(cli)?.vignette_squeeze(id, *target_kbps)?;
            put_video(&mut r, &v);
        }
        Command::Update { id, fixation, alpha } => {
            let report = open_library(cli)?.vignette_update(id, fixation, *alpha)?;
            put_video(&mut r, &report.video);
        }
        Command::Inspect { path } => {
            r.put("file", path.display().to_string());
            let payload = if path.extension().is_some_and(|e| e == SIDECAR_EXTENSION) {
                Some(read_sidecar(path)?)
            } else {
                extract_from_container(path)?
            };
            match payload {
                None => r.put("saliency", "absent"),
                Some(bytes) => {
                    let m = decode_metadata(&bytes)?;
                    r.put("saliency", "present");
                    r.put("metadata_bytes", bytes.len());
                    r.put("version", m.version);
                    r.put("rows", m.rows);
                    r.put("cols", m.cols);
                    r.put("weights", m.weights);
                }
            }
        }
        Command::Search { id, args } => {
            let results = open_library(cli)?.search(id, &args.options())?;
            r.put("id", id.as_str());
            r.put("segments", results.len());
            for (i, s) in results.iter().enumerate() {
                put_search(&mut r, i, s);
            }
        }
        Command::Metrics { reference, processed, saliency } => {
            let a = read_frames_any(reference)?;
            let b = read_frames_any(processed)?;
            if a.len() != b.len() {
                return Err(Error::InvalidArgument(format!(
                    "reference has {} frames, output has {}",
                    a.len(),
                    b.len()
                )));
            }
            let pairs = a
                .iter()
                .zip(&b)
                .map(|(x, y)| FramePair::new(x, y))
                .collect::<Result<Vec<_>, _>>()?;
            r.put("frames", pairs.len());
            r.put("psnr_db", psnr(&pairs)?);
            if let Some(s) = saliency {
                r.put("ewpsnr_db", ewpsnr(&pairs, &SaliencyMap::read_pgm(s)?)?);
            }
        }
        Command::Cost { command: CostCommand::Breakeven { params, sweep, curve, csv } } => {
            let p = CostParams::default().with_overrides(params)?;
            for (k, v) in p.table() {
                r.put(k, v);
            }
            let v = cost::breakeven_views(&p)?;
            r.put("breakeven_views", v.ceil() as u64);
            r.put("breakeven_views_sci", format!("{v:.3e}"));
            if let Some(spec) = sweep {
                let (key, range) = spec.split_once('=').ok_or_else(|| {
                    Error::InvalidArgument(format!("sweep `{spec}` is not of the form key=start:end:n"))
                })?;
                let (a, b, n) = parse_range(range)?;
                let values: Vec<f64> = (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect();
                let rows = cost::sweep(&p, key.trim(), &values)?;
                cost::write_csv(csv_sink(csv)?, &rows)?;
                r.put("sweep_rows", rows.len());
            }
            if let Some(spec) = curve {
                let (lo, hi, n) = parse_range(spec)?;
                let rows = cost::cost_curve(&p, &cost::geometric_views(lo, hi, n)?)?;
                cost::write_csv(csv_sink(csv)?, &rows)?;
                r.put("curve_rows", rows.len());
            }
        }
        Command::Policy { command: PolicyCommand::Apply { execute } } => {
            let lib = open_library(cli)?;
            let plan = lib.plan();
            r.put("actions", plan.len());
            let results = if *execute { lib.execute_all(&plan) } else { Vec::new() };
            let mut failures = 0;
            for (i, a) in plan.iter().enumerate() {
                let action = match a.action {
                    PolicyAction::VignetteTranscode => "vignette_transcode".to_string(),
                    PolicyAction::VignetteSqueeze => {
                        format!("vignette_squeeze:{}", a.squeeze_target_kbps.unwrap_or_default())
                    }
                };
                r.put(format!("action.{i}"), format!("{}:{action}", a.video_id));
                if let Some(res) = results.get(i) {
                    let status = match res {
                        Ok(_) => "ok".to_string(),
                        Err(e) => {
                            failures += 1;
                            format!("error: {}", one_line(e))
                        }
                    };
                    r.put(format!("action.{i}.result"), status);
                }
            }
            if failures > 0 {
                print!("{}", r.render(cli.json));
                return Err(Error::State(format!("{failures} of {} scheduled actions failed", plan.len())));
            }
        }
        Command::Popularity { id, set } => {
            let lib = open_library(cli)?;
            let v = match set {
                Some(n) => lib.set_popularity(id, *n)?,
                None => lib.video(id)?,
            };
            r.put("id", v.id.as_str());
            r.put("popularity", v.popularity);
        }
    }
    Ok(r)
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("vignette: --workers must be at least 1");
            return ExitCode::from(2);
        }
        // read by the thread pool on first use
        std::env::set_var("RAYON_NUM_THREADS", w.to_string());
    }
    match run(&cli) {
        Ok(report) => {
            print!("{}", report.render(cli.json));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("vignette: {}", one_line(&e));
            ExitCode::from(1)
        }
    }
}
