//! `afree`: command-line front end for the afree-core toolkit.
//!
//! Exit codes: 0 on success, 2 when an audit, check or certificate fails,
//! 1 on errors (bad input, I/O).

mod commands;
mod report;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use report::Format;

#[derive(Debug, Parser)]
#[command(
    name = "afree",
    version,
    about = "Constant-rank operators, A-free fields and Young measures"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Operator file (TOML) or gallery name such as `gallery/divergence2d`.
    #[arg(long, global = true)]
    pub op: Option<String>,
    /// Grid points per axis (power of two).
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    /// Main tolerance of the subcommand.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Report file (CSV table for `approx`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "text")]
    pub format: Format,
    /// Run the subcommand's built-in examples instead.
    #[arg(long, global = true)]
    pub selftest: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Constant-rank audit and wave-cone span.
    Audit {
        #[arg(long, default_value_t = 512)]
        samples: usize,
    },
    /// Wave-cone (or image-cone) membership of a vector.
    Cone {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        vector: Vec<f64>,
        /// Test the image cone instead.
        #[arg(long)]
        image: bool,
    },
    /// Checks that `--potential` is an exact potential for `--op`.
    Exactness {
        #[arg(long)]
        potential: Option<String>,
        #[arg(long, default_value_t = 512)]
        samples: usize,
    },
    /// Helmholtz-type split of a field into mean, representative and A-free part.
    Project {
        /// Field file (binary, or CSV by extension); random band-limited when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Where to write the A-free part.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Upper bound on the A-quasiconvex envelope at a point.
    Envelope {
        #[arg(long)]
        integrand: Option<String>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        point: Vec<f64>,
        /// Fourier truncation of the cell problem.
        #[arg(long = "K", default_value_t = 8)]
        k_max: usize,
        #[arg(long, default_value_t = 8)]
        restarts: usize,
        #[arg(long, default_value_t = 500)]
        iters: u64,
    },
    /// Certificate of conditions (i)-(iii) for a Young-measure file.
    Certify {
        #[arg(long)]
        ym: Option<PathBuf>,
        /// Add numerically enveloped members to the test family.
        #[arg(long)]
        numeric: bool,
        /// Finite-difference barycenter check on interior cells.
        #[arg(long)]
        interior: bool,
    },
    /// Oscillation and concentration sequence generating `(delta_A, lambda, p)`.
    Generate {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        a: Vec<f64>,
        /// Atoms of `p` separated by `;`, e.g. `1,0;-1,0`.
        #[arg(long, allow_hyphen_values = true)]
        p_points: Option<String>,
        /// Weights of the atoms of `p`; uniform when absent.
        #[arg(long, value_delimiter = ',')]
        p_weights: Vec<f64>,
        /// `lebesgue` or point masses `x1,x2@mass;...`.
        #[arg(long, default_value = "lebesgue")]
        lambda: String,
        #[arg(long, default_value_t = 5)]
        stages: usize,
        /// Writes the target triple as a Young-measure file.
        #[arg(long)]
        ym_out: Option<PathBuf>,
        /// Writes the last field of the sequence.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Area-strict approximation by mollification and A-free correction.
    Approx {
        /// `circle` (unit circle on [-2,2]^2), `zero`, or `file` with `--input`.
        #[arg(long, default_value = "circle")]
        target: String,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Mollifier radii in grid spacings.
        #[arg(long, value_delimiter = ',', default_values_t = vec![16.0, 8.0, 4.0])]
        eps: Vec<f64>,
        /// Where to write the final field; defaults to the CSV path with `.bin`.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Duality pairing of an integrand with a Young measure.
    Pair {
        #[arg(long)]
        ym: Option<PathBuf>,
        #[arg(long)]
        integrand: Option<String>,
    },
    /// Lists the bundled operators or exports them as TOML files.
    Gallery {
        #[arg(long)]
        export: Option<PathBuf>,
    },
}

/// Result of a subcommand: the report and whether its checks passed.
pub struct Outcome {
    pub report: report::Report,
    pub passed: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    if cli.selftest {
        return selftest::run(&cli.command);
    }
    match commands::run(&cli) {
        Ok(outcome) => {
            let text = outcome.report.render(cli.format);
            print!("{text}");
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
