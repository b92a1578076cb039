use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "pgmres", version, about = "Deflated GMRES(m) benchmarks on the 3-D Bratu problem")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// key=value file with defaults for any option below; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub options: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Nonzero count and CSR memory of the Jacobian per mesh size.
    Sparsity,
    /// Explicit residual per restart, with and without deflation.
    Convergence,
    /// Wall time and speedup of one benchmark solve per size and thread count.
    Speedup,
    /// Full Newton solve; writes the solution and the iteration trace.
    Solve,
}

/// Options shared by every subcommand. Unset options fall back to the
/// config file, then to per-command defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Options {
    /// Elements per axis, comma separated.
    #[arg(long = "ne", global = true, value_delimiter = ',')]
    pub ne: Option<Vec<usize>>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Krylov dimension per cycle.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Maximum (or, with fixed iterations, exact) number of restart cycles.
    #[arg(long, global = true)]
    pub restarts: Option<usize>,
    /// Largest deflation basis.
    #[arg(long, global = true)]
    pub rmax: Option<usize>,
    /// Worker counts, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub threads: Option<Vec<usize>>,
    /// Fixed-order reductions, bit-identical across worker counts.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub deterministic: Option<bool>,
    /// Output file; standard output when absent (solve writes `solution.bin`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Timed repetitions per configuration.
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    /// Run every restart regardless of the residual.
    #[arg(long = "fixed-iterations", global = true, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub fixed_iterations: Option<bool>,
    /// Approach λ from 1 in four steps.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub continuation: Option<bool>,
    /// Also write the records as JSON.
    #[arg(long, global = true, value_name = "FILE")]
    pub json: Option<PathBuf>,
}

impl Options {
    /// Fills every unset option from `other`.
    fn or(self, other: Options) -> Options {
        Options {
            ne: self.ne.or(other.ne),
            lambda: self.lambda.or(other.lambda),
            m: self.m.or(other.m),
            restarts: self.restarts.or(other.restarts),
            rmax: self.rmax.or(other.rmax),
            threads: self.threads.or(other.threads),
            deterministic: self.deterministic.or(other.deterministic),
            out: self.out.or(other.out),
            reps: self.reps.or(other.reps),
            fixed_iterations: self.fixed_iterations.or(other.fixed_iterations),
            continuation: self.continuation.or(other.continuation),
            json: self.json.or(other.json),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "config", no_binary_name = true)]
struct FileArgs {
    #[command(flatten)]
    options: Options,
}

/// Parses `key = value` lines; `#` starts a comment. Keys are the long
/// flag names.
pub fn parse_config(text: &str) -> Result<Options, String> {
    let mut argv = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected key=value, got `{line}`", no + 1));
        };
        argv.push(format!("--{}", key.trim()));
        argv.push(value.trim().to_string());
    }
    FileArgs::try_parse_from(argv).map(|a| a.options).map_err(|e| e.to_string())
}

/// Fully resolved run configuration, echoed into every JSON record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkSpec {
    pub subcommand: Command,
    pub ne: Vec<usize>,
    pub lambda: f64,
    pub m: usize,
    pub restarts: usize,
    pub rmax: usize,
    pub threads: Vec<usize>,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
    pub reps: usize,
    pub fixed_iterations: bool,
    pub continuation: bool,
    pub json: Option<PathBuf>,
}

pub const DEFAULT_SIZES: [usize; 9] = [15, 25, 30, 35, 40, 45, 50, 55, 60];

impl BenchmarkSpec {
    pub fn resolve(command: Command, flags: Options, file: Option<Options>) -> Result<Self, String> {
        let o = match file {
            Some(f) => flags.or(f),
            None => flags,
        };
        let (ne, threads, fixed) = match command {
            Command::Sparsity => (DEFAULT_SIZES.to_vec(), vec![1], true),
            Command::Convergence => (vec![25], vec![1], true),
            Command::Speedup => (DEFAULT_SIZES.to_vec(), vec![1, 2, 4], true),
            Command::Solve => (vec![8], vec![1], false),
        };
        let spec = BenchmarkSpec {
            subcommand: command,
            ne: o.ne.unwrap_or(ne),
            lambda: o.lambda.unwrap_or(pgmres::nonlinear::DEFAULT_LAMBDA),
            m: o.m.unwrap_or(50),
            restarts: o.restarts.unwrap_or(100),
            rmax: o.rmax.unwrap_or(20),
            threads: o.threads.unwrap_or(threads),
            deterministic: o.deterministic.unwrap_or(true),
            out: o.out,
            reps: o.reps.unwrap_or(3),
            fixed_iterations: o.fixed_iterations.unwrap_or(fixed),
            continuation: o.continuation.unwrap_or(false),
            json: o.json,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), String> {
        if self.ne.is_empty() || self.ne.contains(&0) {
            return Err("--ne needs positive sizes".into());
        }
        if self.threads.is_empty() || self.threads.contains(&0) {
            return Err("--threads needs positive worker counts".into());
        }
        if self.m == 0 || self.restarts == 0 || self.reps == 0 || self.rmax == 0 {
            return Err("--m, --restarts, --reps and --rmax must be positive".into());
        }
        if !self.lambda.is_finite() {
            return Err("--lambda must be finite".into());
        }
        let single = matches!(self.subcommand, Command::Convergence | Command::Solve);
        if single && (self.ne.len() != 1 || self.threads.len() != 1) {
            return Err(format!("{:?} takes a single --ne and a single --threads value", self.subcommand).to_lowercase());
        }
        Ok(())
    }

    pub fn mode(&self) -> pgmres::ReductionMode {
        if self.deterministic {
            pgmres::ReductionMode::Deterministic
        } else {
            pgmres::ReductionMode::FreeOrder
        }
    }
}

pub fn read_config(path: &Path) -> Result<Options, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file = parse_config("# sizes\nne = 3,4\nlambda=2.5\ndeterministic = false\n").unwrap();
        let flags = Options { lambda: Some(1.0), ..Default::default() };
        let spec = BenchmarkSpec::resolve(Command::Sparsity, flags, Some(file)).unwrap();
        assert_eq!(spec.ne, vec![3, 4]);
        assert_eq!(spec.lambda, 1.0);
        assert!(!spec.deterministic);
        assert_eq!(spec.m, 50);
    }

    #[test]
    fn config_errors() {
        assert!(parse_config("ne").is_err());
        assert!(parse_config("bogus = 1").is_err());
        assert!(parse_config("m = many").is_err());
    }

    #[test]
    fn single_size_commands() {
        let flags = Options { ne: Some(vec![2, 3]), ..Default::default() };
        assert!(BenchmarkSpec::resolve(Command::Solve, flags, None).is_err());
    }
}
