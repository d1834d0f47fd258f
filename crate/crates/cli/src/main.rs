use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use vaxgame_core::harness::{self, output, Experiment, XvVerdict};
use vaxgame_core::{classify_regime, derive_ratios, params::DEFAULT_MARGINAL_TOL};

#[derive(Parser)]
#[command(name = "vaxgame", version, about = "Vaccination game on an SIS population")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every enabled layer over the sweep and write the summary CSV.
    Run(Common),
    /// Dump the closed-form attractor table for every sweep point.
    Atlas(Common),
    /// Classify evolutionary stability at every sweep point.
    Ess(Common),
    /// Check a config and print the derived ratios.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    /// Master seed for the Monte Carlo layer (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<Experiment> {
        let mut exp = Experiment::from_path(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(s) = self.seed {
            exp.mc.seed = s;
        }
        if let Some(t) = self.threads {
            anyhow::ensure!(t > 0, "--threads must be at least 1");
            exp.threads = Some(t);
        }
        if let Some(o) = &self.out {
            exp.output_dir = o.clone();
        }
        Ok(exp)
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run(c) => {
            let exp = c.load()?;
            let res = harness::run(&exp)?;
            let count = |f: fn(&XvVerdict) -> bool, ode: bool| {
                res.records.iter().filter(|r| f(if ode { &r.cross.ode } else { &r.cross.mc })).count()
            };
            let agree = |v: &XvVerdict| matches!(v, XvVerdict::Agree { .. });
            let disagree = |v: &XvVerdict| matches!(v, XvVerdict::Disagree { .. });
            println!("{} points, {:.1}s", res.records.len(), res.wall_seconds);
            println!("ode vs closed form: {} agree, {} disagree", count(agree, true), count(disagree, true));
            println!("mc vs reference:    {} agree, {} disagree", count(agree, false), count(disagree, false));
            println!("summary:  {}", res.summary_path.display());
            println!("manifest: {}", res.manifest_path.display());
        }
        Cmd::Atlas(c) => {
            let exp = c.load()?;
            println!("{}", output::write_atlas(&exp)?.display());
        }
        Cmd::Ess(c) => {
            let exp = c.load()?;
            for p in output::write_ess(&exp)? {
                println!("{}", p.display());
            }
        }
        Cmd::Validate(c) => {
            let exp = c.load()?;
            println!("id = {}", exp.id);
            println!("config_sha256 = {}", exp.config_sha256);
            println!("layers = {:?}", exp.layers);
            println!("points = {}", exp.points().len());
            let p = &exp.params;
            for pol in &exp.policies {
                let ratios = derive_ratios(p, pol.beta().unwrap_or(0.0));
                println!(
                    "{}: rho = {:.6}, mu = {:.6}, rho_e = {:.6}, mu_e = {:.6}, regime = {:?}",
                    pol.family(),
                    ratios.rho,
                    ratios.mu,
                    ratios.rho_e,
                    ratios.mu_e,
                    classify_regime(&ratios, DEFAULT_MARGINAL_TOL)
                );
            }
            println!("ok");
        }
    }
    Ok(())
}
