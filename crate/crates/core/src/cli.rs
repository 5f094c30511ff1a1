//! Command-line front end: `gen`, `search`, `apply`, `verify`, `bench`, `cost`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::container::{generate, ModelContainer, ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::exec::{bench, cost_model, same_output_dims, CostReport};
use crate::rearrange::apply;
use crate::search::{edo_model, ModelSearch};
use crate::verify::{verify, VerifyOptions};

#[derive(Parser, Debug)]
#[command(
    name = "icdilate",
    version,
    about = "Dilation pattern search and inception convolution tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded supernet container from a layer spec file.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select a dilation pattern for every output channel.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dmax: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rearrange filters and write an inception model.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        assign: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an inception model against its supernet.
    Verify {
        #[arg(long)]
        supernet: PathBuf,
        #[arg(long)]
        ic: PathBuf,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the 64-bit naive path and require exact equality.
        #[arg(long)]
        exact: bool,
    },
    /// Time standard vs inception convolution per layer.
    Bench {
        #[arg(long)]
        ic: PathBuf,
        /// N,C,H,W
        #[arg(long, value_parser = parse_dims::<4>)]
        input: [usize; 4],
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Report MAC counts per layer.
    Cost {
        #[arg(long)]
        spec: PathBuf,
        /// H,W
        #[arg(long, value_parser = parse_dims::<2>)]
        input: [usize; 2],
    },
}

fn parse_dims<const N: usize>(s: &str) -> std::result::Result<[usize; N], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected {N} comma-separated values, got {}", v.len()))
}

/// Caps the global worker pool from `ICDILATE_THREADS` (0 or unset = auto).
pub fn init_threads_from_env() {
    let threads = std::env::var("ICDILATE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        // Fails only if the pool already exists, in which case it stays as is.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn read_text(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_model(path: &PathBuf) -> Result<ModelContainer> {
    ModelContainer::read(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

#[derive(Serialize)]
struct CostLine<'a> {
    layer: &'a str,
    #[serde(flatten)]
    report: CostReport,
}

enum Outcome {
    Ok,
    VerifyFailed,
}

fn execute(command: Command, out: &mut dyn Write) -> Result<Outcome> {
    match command {
        Command::Gen { seed, spec, out: path } => {
            let spec = ModelSpec::from_json(&read_text(&spec)?)?;
            let model = generate(seed, &spec.layers, spec.distribution)?;
            model.write(&path)?;
            writeln!(out, "wrote {} layers to {}", model.layers.len(), path.display())?;
        }
        Command::Search { model, dmax, out: path } => {
            let model = read_model(&model)?;
            if model.kind != ModelKind::Supernet {
                return Err(Error::InvalidContainer("search expects a supernet model".into()));
            }
            let result = edo_model(&model, dmax)?;
            fs::write(&path, result.to_json())?;
            for a in &result.assignments {
                let mut unique = a.patterns.clone();
                unique.sort();
                unique.dedup();
                writeln!(
                    out,
                    "layer {}: {} channels, {} distinct patterns",
                    a.layer,
                    a.patterns.len(),
                    unique.len()
                )?;
            }
            for name in &result.skipped {
                writeln!(out, "layer {name}: skipped (pointwise)")?;
            }
        }
        Command::Apply {
            model,
            assign,
            out: path,
        } => {
            let model = read_model(&model)?;
            let search = ModelSearch::from_json(&read_text(&assign)?)?;
            let ic = apply(&model, &search)?;
            ic.write(&path)?;
            for l in ic.layers.iter().filter(|l| l.plan.is_some()) {
                let groups = l.plan.as_ref().map_or(0, |p| p.groups.len());
                writeln!(out, "layer {}: {} pattern groups", l.spec.name, groups)?;
            }
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Verify {
            supernet,
            ic,
            trials,
            seed,
            exact,
        } => {
            let supernet = read_model(&supernet)?;
            let ic = read_model(&ic)?;
            let opts = VerifyOptions {
                trials,
                seed,
                exact,
                ..VerifyOptions::default()
            };
            let outcome = verify(&supernet, &ic, &opts)?;
            for line in &outcome.passed {
                writeln!(out, "ok   {line}")?;
            }
            if let Some(f) = &outcome.failure {
                writeln!(out, "FAIL {f}")?;
                return Ok(Outcome::VerifyFailed);
            }
            writeln!(out, "verify: all checks passed")?;
        }
        Command::Bench { ic, input, reps } => {
            let model = read_model(&ic)?;
            if model.kind != ModelKind::Inception {
                return Err(Error::InvalidContainer("bench expects an inception model".into()));
            }
            let [n, c, mut h, mut w] = input;
            if c != model.layers[0].spec.c_in {
                return Err(Error::Dimension(format!(
                    "--input has {c} channels, layer `{}` expects {}",
                    model.layers[0].spec.name, model.layers[0].spec.c_in
                )));
            }
            for layer in &model.layers {
                let spec = &layer.spec;
                if spec.is_searchable() {
                    let report = bench(&layer.grouped_plan()?, spec, [n, spec.c_in, h, w], reps)?;
                    writeln!(out, "{}", serde_json::to_string(&report)?)?;
                }
                (h, w) = same_output_dims(spec, h, w);
            }
        }
        Command::Cost { spec, input } => {
            let spec = ModelSpec::from_json(&read_text(&spec)?)?;
            let [mut h, mut w] = input;
            for decl in &spec.layers {
                let line = CostLine {
                    layer: &decl.spec.name,
                    report: cost_model(&decl.spec, h, w)?,
                };
                writeln!(out, "{}", serde_json::to_string(&line)?)?;
                (h, w) = same_output_dims(&decl.spec, h, w);
            }
        }
    }
    Ok(Outcome::Ok)
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    init_threads_from_env();
    match execute(cli.command, out) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::VerifyFailed) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}
