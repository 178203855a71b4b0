use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sislink_cli::{
    cmd_calibrate, cmd_evaluate, cmd_gradcheck, cmd_heatmap, cmd_sweep, cmd_train, default_config_text,
    CalibrateOptions, CliError,
};
use sislink_core::ActivationKind;

/// Train and evaluate stacked-intelligent-surface MIMO links.
#[derive(Parser)]
#[command(name = "sislink", version, arg_required_else_help = true)]
struct Cli {
    /// Print a config file holding every default and exit.
    #[arg(long)]
    print_default_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct OutArg {
    /// Artifact directory (default: config output.directory, then $SISLINK_OUTPUT_DIR, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train surfaces; writes params.txt, learning_curve.csv, run.json, resolved_config.toml.
    Train {
        config: PathBuf,
        /// Override training.threads (0 = all cores).
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Estimate SER of saved parameters; appends to eval.csv.
    Evaluate {
        params: PathBuf,
        config: PathBuf,
        /// Symbol decisions (default: evaluation.trials).
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Retrain over element counts, Rician factors and kinds; writes sweep.csv.
    Sweep {
        config: PathBuf,
        #[arg(long = "N", num_args = 1.., value_delimiter = ',', required = true)]
        n: Vec<usize>,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        kappa: Vec<f64>,
        #[arg(long, num_args = 1.., value_delimiter = ',', default_value = "linear,nl_unit")]
        kinds: Vec<ActivationKind>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Export amplitude grids for one transmission; writes heatmap.csv.
    Heatmap {
        params: PathBuf,
        config: PathBuf,
        /// Channel draw to use.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One constellation index (0..=3) per transmit antenna.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        symbols: Vec<u8>,
        /// Export every layer's input and output instead of the four end stages.
        #[arg(long)]
        verbose: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Find the noise power putting a short linear run in the target SER band.
    Calibrate {
        config: PathBuf,
        #[arg(long, default_value_t = -90.0, allow_hyphen_values = true)]
        min_dbm: f64,
        #[arg(long, default_value_t = -20.0, allow_hyphen_values = true)]
        max_dbm: f64,
        #[arg(long, default_value_t = 0.10)]
        band_low: f64,
        #[arg(long, default_value_t = 0.15)]
        band_high: f64,
        #[arg(long, default_value_t = 50)]
        probe_iterations: usize,
        #[arg(long, default_value_t = 20_000)]
        probe_trials: usize,
        #[arg(long, default_value_t = 10)]
        max_probes: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Compare analytic gradients with finite differences at N=16, L=2; writes gradcheck.csv.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        params_sampled: usize,
        /// Relative finite-difference step.
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[command(flatten)]
        out: OutArg,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, threads, out } => {
            let m = cmd_train(&config, out.out.as_deref(), threads)?;
            println!(
                "SER {:.6} ± {:.6} over {} decisions ({:.1} s); artifacts in {}",
                m.final_ser.ser,
                m.final_ser.ci95_halfwidth,
                m.final_ser.trials,
                m.wall_seconds,
                m.artifacts.run_json.parent().map(|p| p.display().to_string()).unwrap_or_default()
            );
        }
        Command::Evaluate { params, config, trials, out } => {
            let e = cmd_evaluate(&params, &config, trials, out.out.as_deref())?;
            println!("SER {:.6} ± {:.6} ({} errors / {} decisions)", e.ser, e.ci95_halfwidth, e.errors, e.trials);
        }
        Command::Sweep { config, n, kappa, kinds, out } => {
            let r = cmd_sweep(&config, &n, &kappa, &kinds, out.out.as_deref(), |row| {
                eprintln!("N={} kappa={} {}: SER {:.5} ± {:.5} [{}]", row.n, row.kappa, row.kind, row.ser, row.ci95, row.status);
            })?;
            print!("{}", r.to_csv());
        }
        Command::Heatmap { params, config, seed, symbols, verbose, out } => {
            let recs = cmd_heatmap(&params, &config, seed, &symbols, verbose, out.out.as_deref())?;
            println!("wrote {} cells", recs.len());
        }
        Command::Calibrate {
            config,
            min_dbm,
            max_dbm,
            band_low,
            band_high,
            probe_iterations,
            probe_trials,
            max_probes,
            out,
        } => {
            let opts = CalibrateOptions {
                min_dbm,
                max_dbm,
                band: (band_low, band_high),
                probe_iterations,
                probe_trials,
                max_probes,
            };
            let r = cmd_calibrate(&config, &opts, out.out.as_deref(), |p| {
                eprintln!("noise {:.3} dBm: SER {:.4} ± {:.4}", p.noise_dbm, p.ser, p.ci95);
            })?;
            print!("{}", r.table());
            println!("chosen noise power: {:.3} dBm", r.chosen_dbm.unwrap_or(f64::NAN));
        }
        Command::Gradcheck { config, params_sampled, step, out } => {
            let r = cmd_gradcheck(&config, params_sampled, step, out.out.as_deref())?;
            println!("max relative error {:.3e} over {} parameters", r.max_rel_err, r.entries.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.print_default_config {
        print!("{}", default_config_text());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        return ExitCode::SUCCESS;
    };
    match run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
