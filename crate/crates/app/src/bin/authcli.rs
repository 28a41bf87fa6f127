//! Password-space evaluation and attacker simulations.

use std::process::ExitCode;

use ccpauth::cli::{render_attack, render_space};
use ccpauth_core::analysis::{simulate, AnalysisError, AttackerKind, AttackerModel};
use ccpauth_core::{password_space, SpaceParams};
use clap::{Parser, Subcommand};

/// Usage errors exit with 2, matching clap.
const USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "authcli", about = "Security analysis for the click-point login", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact theoretical password space.
    Space {
        /// Image width in pixels.
        #[arg(long, default_value_t = 450)]
        w: u64,
        /// Image height in pixels.
        #[arg(long, default_value_t = 450)]
        h: u64,
        /// Grid square side in pixels.
        #[arg(long, default_value_t = 150)]
        t: u64,
        /// Images shown per level.
        #[arg(long, default_value_t = 4)]
        m: u64,
        /// Click points per image.
        #[arg(long, default_value_t = 4)]
        n: u32,
        /// Levels.
        #[arg(long, default_value_t = 3)]
        c: u32,
        #[arg(long)]
        csv: bool,
    },
    /// Monte Carlo success rate of an attacker against the real verifier.
    Attack {
        #[arg(long, value_parser = parse_model)]
        model: AttackerKind,
        #[arg(long, default_value_t = 1_000_000)]
        trials: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        csv: bool,
    },
}

fn parse_model(s: &str) -> Result<AttackerKind, AnalysisError> {
    s.parse()
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Space { w, h, t, m, n, c, csv } => {
            let p = SpaceParams { w, h, t, m, n, c };
            match password_space(&p) {
                Ok(space) => {
                    print!("{}", render_space(&p, &space, csv));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("authcli space: {e}");
                    ExitCode::from(USAGE)
                }
            }
        }
        Cmd::Attack { model, trials, seed, csv } => {
            let model = AttackerModel { kind: model, trials, seed };
            if let Err(e) = model.validate() {
                eprintln!("authcli attack: {e}");
                return ExitCode::from(USAGE);
            }
            match simulate(&model) {
                Ok(report) => {
                    print!("{}", render_attack(&report, csv));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("authcli attack: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
