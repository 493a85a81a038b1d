use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vpflip::mission::{
    compare, compute_metrics, emit_outputs, plot_script, run_missions, solve_offline, write_comparison, ControllerSelection,
    LoadError, ScheduleBundle, Summary,
};
use vpflip::{Error, MissionConfig};

#[derive(Parser)]
#[command(name = "vpflip", version, about = "Variable-pitch quadcopter flip simulator (theta-D and SDRE attitude control)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the offline Riccati schedules and write them to a file.
    SolveOffline {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run missions and write trajectory, timing, summary and plot files.
    Run {
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Selection::Both)]
        controller: Selection,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Precomputed schedule file from `solve-offline`.
        #[arg(long)]
        schedules: Option<PathBuf>,
    },
    /// Compare two runs given their summary files or output directories.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the comparison JSON here.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write the plot script for a trajectory CSV or output directory.
    Plot { log: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Selection {
    #[value(name = "theta_d")]
    ThetaD,
    Sdre,
    Both,
}

impl From<Selection> for ControllerSelection {
    fn from(s: Selection) -> Self {
        match s {
            Selection::ThetaD => ControllerSelection::ThetaD,
            Selection::Sdre => ControllerSelection::Sdre,
            Selection::Both => ControllerSelection::Both,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numerical(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => Failure::Io(e.to_string()),
            Error::InvalidParameter(_) | Error::Dimension(_) => Failure::Config(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<LoadError> for Failure {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Io(e) => Failure::Io(e.to_string()),
            LoadError::Config(e) => Failure::Config(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn load_config(path: &Path) -> Result<MissionConfig, Failure> {
    let cfg = MissionConfig::load(path)?;
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn solve_command(config: &Path, output: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let bundle = solve_offline(&cfg)?;
    std::fs::write(output, bundle.to_json()).map_err(|e| io_failure(output, e))?;
    println!("wrote {}", output.display());
    Ok(())
}

fn run_command(config: &Path, selection: Selection, out: Option<PathBuf>, schedules: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    cfg.controller = selection.into();
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let bundle = match schedules {
        Some(path) => {
            let bundle = ScheduleBundle::from_json(&read(&path)?).map_err(|e| Failure::Config(e.to_string()))?;
            bundle.check_against(&cfg).map_err(|e| Failure::Config(e.to_string()))?;
            bundle
        }
        None => solve_offline(&cfg)?,
    };

    let mut summaries = Vec::new();
    for log in run_missions(&cfg, &cfg.controller.kinds(), &bundle) {
        let log = log?;
        let paths = emit_outputs(&log, &out)?;
        let summary = compute_metrics(&log)?;
        println!(
            "{}: energy {:.4}, final position error {:.4} m, flip completed {}, mean step time {:.3e} s -> {}",
            summary.controller,
            summary.control_energy,
            summary.final_position_error,
            summary.flip_completed,
            summary.step_time_mean_s,
            paths.trajectory.parent().unwrap_or(&out).display()
        );
        summaries.push(summary);
    }
    if let [a, b] = summaries.as_slice() {
        let path = out.join("comparison.json");
        let cmp = compare(a, b);
        write_comparison(&cmp, &path)?;
        println!(
            "energy difference {:.3}%, step time ratio {:.3} -> {}",
            100.0 * cmp.energy_relative_difference,
            cmp.step_time_ratio,
            path.display()
        );
    }
    Ok(())
}

fn load_summary(path: &Path) -> Result<Summary, Failure> {
    let file = if path.is_dir() { path.join("summary.json") } else { path.to_path_buf() };
    let text = read(&file)?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", file.display())))
}

fn compare_command(a: &Path, b: &Path, output: Option<PathBuf>) -> Result<(), Failure> {
    let cmp = compare(&load_summary(a)?, &load_summary(b)?);
    println!("{}", serde_json::to_string_pretty(&cmp).expect("comparison serialises"));
    if let Some(path) = output {
        write_comparison(&cmp, &path)?;
    }
    Ok(())
}

fn plot_command(log: &Path) -> Result<(), Failure> {
    let csv = if log.is_dir() { log.join("trajectory.csv") } else { log.to_path_buf() };
    if !csv.is_file() {
        return Err(Failure::Io(format!("{}: no trajectory file", csv.display())));
    }
    let dir = csv.parent().unwrap_or(Path::new("."));
    let name = csv.file_name().and_then(|n| n.to_str()).unwrap_or("trajectory.csv");
    let script = dir.join("plot.py");
    std::fs::write(&script, plot_script(name)).map_err(|e| io_failure(&script, e))?;
    println!("wrote {}; render with `python3 {}`", script.display(), script.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().command {
        Command::SolveOffline { config, output } => solve_command(&config, &output),
        Command::Run { config, controller, out, schedules } => run_command(&config, controller, out, schedules),
        Command::Compare { a, b, output } => compare_command(&a, &b, output),
        Command::Plot { log } => plot_command(&log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::debug!("exit code {}", f.code());
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
