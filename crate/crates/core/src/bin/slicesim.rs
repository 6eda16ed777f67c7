//! Command-line front end: run built-in presets or scenario files, list
//! presets, and compare metric exports against golden files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slicesim::config::{compare_csv, load_scenario, to_toml};
use slicesim::engine::{run, Scenario};
use slicesim::metrics::ExportFormat;
use slicesim::model::NANOS_PER_SEC;
use slicesim::presets;

#[derive(Parser)]
#[command(name = "slicesim", about = "Transport-network slicing simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and export its metrics.
    Run {
        /// Built-in scenario name (see list-presets).
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Scenario file (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the metric files.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// csv or json.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Override the scenario duration, in seconds.
        #[arg(long)]
        duration: Option<u64>,
    },
    /// Print the built-in scenario names.
    ListPresets,
    /// Print a built-in scenario as a TOML document.
    DumpPreset { name: String },
    /// Compare a run directory against golden metric files.
    Compare {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        golden: PathBuf,
        /// Allowed relative deviation in percent.
        #[arg(long, default_value_t = 1.0)]
        tolerance: f64,
    },
}

fn fail(code: u8, msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn cmd_run(
    preset: Option<String>,
    config: Option<PathBuf>,
    out: PathBuf,
    format: String,
    duration: Option<u64>,
) -> ExitCode {
    let format = match format.as_str() {
        "csv" => ExportFormat::Csv,
        "json" => ExportFormat::Json,
        other => return fail(1, &format!("unknown format {other}")),
    };
    let mut sc: Scenario = match (preset, config) {
        (Some(name), None) => match presets::preset(&name) {
            Some(sc) => sc,
            None => return fail(1, &format!("unknown preset {name}")),
        },
        (None, Some(path)) => match load_scenario(&path) {
            Ok(sc) => sc,
            Err(e) => return fail(1, &e.to_string()),
        },
        _ => return fail(1, "exactly one of --preset or --config is required"),
    };
    if let Some(secs) = duration {
        sc.duration = secs * NANOS_PER_SEC;
        if let Err(e) = sc.validate() {
            return fail(1, &e.to_string());
        }
    }
    let output = match run(&sc) {
        Ok(o) => o,
        Err(e) => return fail(1, &e.to_string()),
    };
    if !output.stats.conservation_ok {
        return fail(2, "packet conservation check failed");
    }
    if let Err(e) = output.metrics.export(format, &out, &sc.name) {
        return fail(2, &format!("export failed: {e}"));
    }
    println!(
        "{}: {} packets generated, {} delivered, metrics in {}",
        sc.name,
        output.stats.generated,
        output.stats.delivered,
        out.display()
    );
    ExitCode::SUCCESS
}

fn cmd_compare(out: PathBuf, golden: PathBuf, tolerance: f64) -> ExitCode {
    let entries = match std::fs::read_dir(&golden) {
        Ok(e) => e,
        Err(e) => return fail(2, &format!("cannot read {}: {e}", golden.display())),
    };
    let mut failed = false;
    let mut checked = 0;
    let mut names: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    names.sort();
    for gpath in names {
        let fname = gpath.file_name().unwrap().to_string_lossy().to_string();
        let opath = out.join(&fname);
        let gbody = match std::fs::read_to_string(&gpath) {
            Ok(b) => b,
            Err(e) => return fail(2, &format!("cannot read {}: {e}", gpath.display())),
        };
        let obody = match std::fs::read_to_string(&opath) {
            Ok(b) => b,
            Err(_) => {
                println!("{fname}: MISSING");
                failed = true;
                continue;
            }
        };
        match compare_csv(&obody, &gbody, tolerance) {
            Ok(issues) if issues.is_empty() => println!("{fname}: OK"),
            Ok(issues) => {
                println!("{fname}: {} deviations", issues.len());
                for i in issues.iter().take(5) {
                    println!("  {i}");
                }
                failed = true;
            }
            Err(e) => {
                println!("{fname}: unreadable ({e})");
                failed = true;
            }
        }
        checked += 1;
    }
    if checked == 0 {
        return fail(2, "no golden csv files found");
    }
    if failed {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { preset, config, out, format, duration } => {
            cmd_run(preset, config, out, format, duration)
        }
        Cmd::ListPresets => {
            for name in presets::PRESET_NAMES {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Cmd::DumpPreset { name } => match presets::preset(&name) {
            Some(sc) => {
                print!("{}", to_toml(&sc));
                ExitCode::SUCCESS
            }
            None => fail(1, &format!("unknown preset {name}")),
        },
        Cmd::Compare { out, golden, tolerance } => cmd_compare(out, golden, tolerance),
    }
}
