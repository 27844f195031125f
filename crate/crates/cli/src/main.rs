use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rigrefine::commands::{self, EvaluateArgs};
use rigrefine::config::RunConfig;
use rigrefine::report;
use rigrefine::Result;

/// Refine multi-camera rig poses and intrinsics from feature matches.
///
/// Exit status: 0 success, 2 input or configuration error, 3 numerical
/// divergence.
#[derive(Debug, Parser)]
#[command(name = "rigrefine", version)]
struct Cli {
    /// Worker threads for loss evaluation. Results are reproducible
    /// bit-for-bit only at 1.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset: rig.json (perturbed rig),
    /// trajectory_gt.txt, trajectory_noisy.txt, matches.csv and scene.json
    /// (ground-truth rig, landmarks and generation settings).
    Simulate {
        /// TOML or JSON run config; reads `seed`, [scene], [noise], [matches].
        #[arg(long)]
        config: PathBuf,
        /// Overrides `paths.output_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Refine a dataset and write refined_trajectory.txt, refined_rig.json,
    /// history.csv and report.json.
    Refine {
        /// TOML or JSON run config; reads `seed`, [paths], [weights],
        /// [bounds], [schedule], [toggles].
        #[arg(long)]
        config: PathBuf,
        /// Overrides `paths.output_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare a rig and trajectory against ground truth.
    Evaluate {
        /// Rig file to evaluate.
        #[arg(long)]
        rig: PathBuf,
        /// Trajectory file to evaluate.
        #[arg(long)]
        trajectory: PathBuf,
        /// Ground-truth rig file, or a scene.json written by `simulate`.
        #[arg(long)]
        gt_rig: PathBuf,
        /// Ground-truth trajectory file.
        #[arg(long)]
        gt_trajectory: PathBuf,
        /// Match file; adds Ep-e and RP-e to the report.
        #[arg(long)]
        matches: Option<PathBuf>,
        /// Where to write the JSON report; printed to stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a smooth luminance gain/bias offset mapping SOURCE toward TARGET
    /// and write offset.json and compensated.png.
    Expose {
        /// PNG or PPM image to compensate.
        #[arg(long)]
        source: PathBuf,
        /// PNG or PPM image with the reference exposure, same size.
        #[arg(long)]
        target: PathBuf,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads as usize;
    match cli.command {
        Command::Simulate { config, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let s = commands::simulate(&cfg, out_dir.as_deref())?;
            println!(
                "{} frames, {} cameras, {} landmarks, {} matches in {} sets",
                s.frames, s.cameras, s.landmarks, s.matches, s.match_sets
            );
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Refine { config, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let r = commands::refine(&cfg, out_dir.as_deref(), threads)?;
            println!("{} iterations in {:.1} s", r.iterations, r.wall_time_s);
            let factor = r.ep_e_reduction_factor.map_or("n/a".into(), |f| format!("{f:.2}x"));
            let percent = r.rp_e_reduction_percent.map_or("n/a".into(), |p| format!("{p:.1}%"));
            println!("Ep-e {:.4} -> {:.4} px ({factor})", r.initial.ep_e, r.final_.ep_e);
            println!("RP-e {:.4} -> {:.4} px ({percent})", r.initial.rp_e, r.final_.rp_e);
            if let (Some(a), Some(b)) = (&r.initial.pose, &r.final_.pose) {
                println!("rotation error {:.4} -> {:.4} deg", a.rot_mean_deg, b.rot_mean_deg);
            }
        }
        Command::Evaluate { rig, trajectory, gt_rig, gt_trajectory, matches, out } => {
            let args = EvaluateArgs { rig, trajectory, gt_rig, gt_trajectory, matches, out };
            let r = commands::evaluate(&args)?;
            if args.out.is_none() {
                print!("{}", report::to_json(&r));
            } else {
                println!("rotation error {:.6} deg mean, {:.6} max", r.pose.rot_mean_deg, r.pose.rot_max_deg);
                println!("translation error {:.6} m mean, {:.6} max", r.pose.trans_mean, r.pose.trans_max);
            }
        }
        Command::Expose { source, target, out_dir } => {
            let s = commands::expose(&source, &target, &out_dir)?;
            println!("initial residual {:.6}", s.initial_residual);
            println!("final residual {:.6}", s.final_residual);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
