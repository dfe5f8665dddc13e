use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use profile_decomposition::cli::{emit_report, load_scenario, output_dir, run_decomposition, Overrides};
use profile_decomposition::infinity::{validate_gluing_data, GluedDocument};
use profile_decomposition::Error;

const PASS: u8 = 0;
const FAILURE: u8 = 1;
const CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "decompose", version, about = "Profile decompositions of bounded H^{1,2} sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write report.json, traces.csv and glued manifold documents.
    Run {
        config: PathBuf,
        /// Output directory (overrides DECOMPOSE_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "grid-res")]
        grid_res: Option<usize>,
        #[arg(long)]
        kmax: Option<usize>,
    },
    /// Check a scenario config and print it with defaults filled.
    Validate { config: PathBuf },
    /// Re-validate a serialized glued manifold.
    GluingCheck { glued: PathBuf },
}

fn config_or_failure(e: &Error) -> u8 {
    match e {
        Error::Config(_) => CONFIG,
        _ => FAILURE,
    }
}

fn run(cli: Cli) -> u8 {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            grid_res,
            kmax,
        } => {
            let mut cfg = match load_scenario(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return CONFIG;
                }
            };
            let overrides = Overrides { seed, grid_res, k_max: kmax };
            if let Err(e) = overrides.apply(&mut cfg) {
                eprintln!("{e}");
                return CONFIG;
            }
            let dir = output_dir(out.as_deref(), &cfg);
            let result = match run_decomposition(&cfg) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("{e}");
                    return config_or_failure(&e);
                }
            };
            match emit_report(&result, &dir) {
                Ok(files) => {
                    for f in files {
                        println!("wrote {}", f.display());
                    }
                }
                Err(e) => {
                    eprintln!("{e}");
                    return FAILURE;
                }
            }
            for v in &result.file.verdicts {
                println!("{} {}: {:e} (limit {:e}) {}", if v.passed { "PASS" } else { "FAIL" }, v.name, v.value, v.threshold, v.detail);
            }
            for e in &result.file.errors {
                eprintln!("error: {e}");
            }
            if let Some(r) = &result.file.report {
                println!("{} bubble(s); {}", r.bubbles.len(), r.stop_reason);
                for d in &r.diagnostics {
                    println!("warning: {d}");
                }
            }
            if result.file.passed {
                PASS
            } else {
                FAILURE
            }
        }
        Command::Validate { config } => match load_scenario(&config) {
            Ok(c) => {
                println!("{}", serde_json::to_string_pretty(&c).expect("config serializes"));
                PASS
            }
            Err(e) => {
                eprintln!("{e}");
                CONFIG
            }
        },
        Command::GluingCheck { glued } => {
            let text = match std::fs::read_to_string(&glued) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("{}: {e}", glued.display());
                    return FAILURE;
                }
            };
            let doc: GluedDocument = match serde_json::from_str(&text) {
                Ok(d) => d,
                Err(e) => {
                    eprintln!("{}: line {}, column {}: {e}", glued.display(), e.line(), e.column());
                    return CONFIG;
                }
            };
            let report = validate_gluing_data(&doc.gluing, doc.tolerance);
            for c in &report.checks {
                println!("{} {}: {:e}", if c.passed { "PASS" } else { "FAIL" }, c.condition, c.residual);
            }
            if report.passed {
                PASS
            } else {
                FAILURE
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG } else { PASS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ExitCode::from(run(cli))
}
