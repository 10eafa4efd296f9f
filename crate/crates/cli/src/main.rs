use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vishape_cli::{configure_threads, demos, run_config, CliError, Output};

#[derive(Parser)]
#[command(name = "vishape", version, about = "Shape sensitivity of obstacle problems and a damage model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a (transported) semilinear obstacle problem.
    SolveVi(RunArgs),
    /// Convergence rate of transported solutions.
    RateSweep(RunArgs),
    /// Material derivative against difference quotients.
    MaterialDerivative(RunArgs),
    /// State shape derivative under mesh refinement.
    ShapeDerivative(RunArgs),
    /// Damage trajectory with invariants and catalog derivatives.
    DamageRun(RunArgs),
    /// Eulerian semi-derivative against difference quotients.
    DerivativeCheck(RunArgs),
    /// Catalog shape descent on the damage cost.
    ShapeDescent(RunArgs),
    /// List the shipped demo configurations.
    ListDemos,
    /// Run a shipped demo configuration.
    RunDemo {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn finish(out: Output, dir: PathBuf) -> Result<(), CliError> {
    out.write(&dir)?;
    for w in out.get("warnings").and_then(|w| w.as_array()).into_iter().flatten() {
        eprintln!("warning: {}", w.as_str().unwrap_or_default());
    }
    println!("{}", out.line);
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let (name, args) = match cli.command {
        Command::ListDemos => {
            for d in demos::DEMOS {
                println!("{}\t{}", d.name, d.description());
            }
            return Ok(());
        }
        Command::RunDemo { name, out } => {
            let demo = demos::find(&name).ok_or_else(|| CliError::config("demo", format!("unknown demo `{name}`")))?;
            let (output, dir) = run_config(None, demo.config)?;
            let dir = out.or(dir).unwrap_or_else(|| PathBuf::from(format!("vishape-out/{name}")));
            return finish(output, dir);
        }
        Command::SolveVi(a) => ("solve-vi", a),
        Command::RateSweep(a) => ("rate-sweep", a),
        Command::MaterialDerivative(a) => ("material-derivative", a),
        Command::ShapeDerivative(a) => ("shape-derivative", a),
        Command::DamageRun(a) => ("damage-run", a),
        Command::DerivativeCheck(a) => ("derivative-check", a),
        Command::ShapeDescent(a) => ("shape-descent", a),
    };
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Io { path: args.config.display().to_string(), message: e.to_string() })?;
    let (output, dir) = run_config(Some(name), &text)?;
    finish(output, args.out.or(dir).unwrap_or_else(|| PathBuf::from("vishape-out")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Config { key: None, message: first }.json_line());
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
