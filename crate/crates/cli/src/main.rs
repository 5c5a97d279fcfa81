//! `repeat`: partial liver volume change from paired inspiration/expiration CT.
//!
//! Exit codes: 0 success, 1 could not write outputs, 2 input or validation
//! error, 3 folding above `max_folding`, 4 registration diverged. Failures
//! print one JSON object to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use repeat_core::phantom::{calibrate_respiratory, generate_phantom, AnalyticWarp, PhantomSpec};
use repeat_core::pipeline::{jacobian_file, overlay_file, run_pipeline, write_phantom_case, PipelineConfig, PipelineInputs};
use repeat_core::Error;

#[derive(Parser)]
#[command(name = "repeat", version, about = "Registration-based partial liver volume change measurement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register fixed (inspiration) to moving (expiration) and measure the liver volume change.
    #[command(after_long_help = config_help())]
    Run {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// Liver mask on the fixed grid (resampled if it is not).
        #[arg(long)]
        mask: PathBuf,
        /// TOML config; every key is optional (defaults below).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// The fixed scan is the expiration phase (report labels only).
        #[arg(long)]
        swap_phases: bool,
        /// Omit the timestamp so identical runs give identical reports.
        #[arg(long)]
        deterministic: bool,
    },
    /// Write a synthetic pair with known volume change: fixed, moving, liver mask and truth.json.
    Phantom {
        #[arg(long, value_enum)]
        kind: PhantomKind,
        #[arg(long)]
        out_dir: PathBuf,
        /// Voxels per axis.
        #[arg(long, default_value_t = 96)]
        size: usize,
        /// Isotropic spacing, mm.
        #[arg(long, default_value_t = 2.0)]
        spacing: f64,
        /// Gaussian noise sigma, HU.
        #[arg(long, default_value_t = 10.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// translate: offset in mm, as x,y,z.
        #[arg(long, value_parser = parse_offset, default_value = "5,0,0", allow_hyphen_values = true)]
        offset: [f64; 3],
        /// scale: factor about the volume centre.
        #[arg(long, default_value_t = 1.05)]
        factor: f64,
        /// poly: u = k (z^2, x^2, y^2) about the volume centre, mm^-1.
        #[arg(long, default_value_t = 0.0018)]
        poly_k: f64,
        /// respiratory: cranio-caudal amplitude, mm.
        #[arg(long, default_value_t = 30.0)]
        amplitude_z: f64,
        /// respiratory: liver volume change the compression is solved for, percent.
        #[arg(long, default_value_t = 8.0, allow_negative_numbers = true)]
        target_percent: f64,
    },
    /// Jacobian determinant of a vector-field NIfTI, written as a scalar NIfTI.
    Jacobian {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PNG of one slice, windowed to grey, with the mask outline in red.
    Overlay {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Slice index along the axis.
        #[arg(long)]
        slice: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = -100.0, allow_negative_numbers = true)]
        window_lo: f64,
        #[arg(long, default_value_t = 400.0, allow_negative_numbers = true)]
        window_hi: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PhantomKind {
    Identity,
    Translate,
    Scale,
    Poly,
    Respiratory,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    #[value(alias = "x", alias = "0")]
    Sagittal,
    #[value(alias = "y", alias = "1")]
    Coronal,
    #[value(alias = "z", alias = "2")]
    Axial,
}

fn parse_offset(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected x,y,z, got {} values", v.len()))
}

fn config_help() -> String {
    format!(
        "Config file keys and their defaults:\n\n{}\n\
         Optional, unset by default (metric sampled over the whole overlap):\n\
         [registration] metric_mask_dilation_mm = <mm>  restrict the metric to the liver mask dilated by this much\n",
        PipelineConfig::default().to_toml_string()
    )
}

/// A failure plus where outputs were headed, to tell read from write errors.
struct Failure {
    error: Error,
    output: Option<PathBuf>,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure { error, output: None }
    }
}

fn exit_code(f: &Failure) -> u8 {
    match &f.error {
        Error::FoldingExceeded { .. } => 3,
        Error::NonFiniteCost { .. } => 4,
        Error::IoFailure { path, .. } if f.output.as_deref().is_some_and(|o| path.starts_with(o)) => 1,
        _ => 2,
    }
}

fn print_error(kind: &str, message: &str, code: u8) {
    let body = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
    eprintln!("{body}");
}

fn with_output<T>(r: Result<T, Error>, out: &Path) -> Result<T, Failure> {
    r.map_err(|error| Failure {
        error,
        output: Some(out.to_path_buf()),
    })
}

fn warp_for(kind: PhantomKind, spec: &PhantomSpec, args: &PhantomArgs) -> Result<AnalyticWarp, Error> {
    Ok(match kind {
        PhantomKind::Identity => AnalyticWarp::identity(),
        PhantomKind::Translate => AnalyticWarp::Translation {
            offset: args.offset,
        },
        PhantomKind::Scale => AnalyticWarp::UniformScale {
            factor: args.factor,
            center: [0.0; 3],
        },
        PhantomKind::Poly => {
            let k = args.poly_k;
            AnalyticWarp::Polynomial {
                center: [0.0; 3],
                coefficients: [[0.0, 0.0, k], [k, 0.0, 0.0], [0.0, k, 0.0]],
            }
        }
        PhantomKind::Respiratory => {
            let stock = AnalyticWarp::respiratory_default();
            let same_fixture =
                spec == &PhantomSpec::default() && args.amplitude_z == 30.0 && args.target_percent == 8.0;
            if same_fixture {
                stock
            } else {
                let AnalyticWarp::Respiratory {
                    sharpness,
                    boundary_z,
                    center_y,
                    ..
                } = stock
                else {
                    unreachable!("respiratory_default is a respiratory warp")
                };
                let (_, mask) = generate_phantom(spec)?;
                calibrate_respiratory(&mask, args.amplitude_z, sharpness, boundary_z, center_y, args.target_percent)?
            }
        }
    })
}

struct PhantomArgs {
    offset: [f64; 3],
    factor: f64,
    poly_k: f64,
    amplitude_z: f64,
    target_percent: f64,
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            fixed,
            moving,
            mask,
            config,
            out_dir,
            swap_phases,
            deterministic,
        } => {
            let mut cfg = match &config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            cfg.swap_phases |= swap_phases;
            let inputs = PipelineInputs {
                fixed: &fixed,
                moving: &moving,
                mask: &mask,
            };
            let out = with_output(run_pipeline(&inputs, &cfg, &out_dir, deterministic), &out_dir)?;
            print!("{}", out.report.to_json());
        }
        Command::Phantom {
            kind,
            out_dir,
            size,
            spacing,
            noise,
            seed,
            offset,
            factor,
            poly_k,
            amplitude_z,
            target_percent,
        } => {
            let spec = PhantomSpec {
                dims: [size; 3],
                spacing: [spacing; 3],
                noise_sigma: noise,
                seed,
                ..PhantomSpec::default()
            };
            let args = PhantomArgs {
                offset,
                factor,
                poly_k,
                amplitude_z,
                target_percent,
            };
            let warp = warp_for(kind, &spec, &args)?;
            let truth = with_output(write_phantom_case(&spec, &warp, &out_dir), &out_dir)?;
            println!("{}", serde_json::to_string_pretty(&truth).expect("truth serializes"));
        }
        Command::Jacobian { field, out } => {
            with_output(jacobian_file(&field, &out), &out)?;
        }
        Command::Overlay {
            volume,
            mask,
            axis,
            slice,
            out,
            window_lo,
            window_hi,
        } => {
            let axis = axis as usize;
            with_output(overlay_file(&volume, &mask, axis, slice, (window_lo, window_hi), &out), &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            print_error("InvalidArguments", e.to_string().trim(), 2);
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = exit_code(&f);
            log::debug!("{:?}", f.error);
            print_error(f.error.kind(), &f.error.to_string(), code);
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(error: Error, output: Option<&str>) -> u8 {
        exit_code(&Failure {
            error,
            output: output.map(PathBuf::from),
        })
    }

    #[test]
    fn exit_codes() {
        assert_eq!(code(Error::FoldingExceeded { fraction: 0.2, max: 0.01 }, None), 3);
        assert_eq!(code(Error::NonFiniteCost { level: 1, iteration: 3 }, None), 4);
        assert_eq!(code(Error::EmptyMask, Some("out")), 2);
        let io = |p: &str| Error::IoFailure {
            path: PathBuf::from(p),
            source: std::io::Error::other("x"),
        };
        assert_eq!(code(io("in/fixed.nii.gz"), Some("out")), 2);
        assert_eq!(code(io("out/report.json"), Some("out")), 1);
    }

    #[test]
    fn offsets_parse() {
        assert_eq!(parse_offset("3,-2,5"), Ok([3.0, -2.0, 5.0]));
        assert!(parse_offset("1,2").is_err());
        assert!(parse_offset("1,x,2").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
