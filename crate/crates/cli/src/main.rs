//! `tracefem <study> [flags]`: runs a study and writes its report files.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use tracefem::study::{load_config, run_study, StudyConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Study {
    Convergence,
    Conditioning,
    Supg,
    Adapt,
    Geometry,
}

impl Study {
    fn key(self) -> &'static str {
        match self {
            Study::Convergence => "convergence",
            Study::Conditioning => "conditioning",
            Study::Supg => "supg",
            Study::Adapt => "adapt",
            Study::Geometry => "geometry",
        }
    }
}

/// Trace finite element studies on implicitly defined surfaces.
#[derive(Debug, Parser)]
#[command(name = "tracefem", version)]
struct Cli {
    #[arg(value_enum)]
    study: Study,
    /// key=value configuration file; flags override its values
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// sphere, torus, ellipsoid or plane
    #[arg(long, value_name = "NAME")]
    surface: Option<String>,
    /// Element degree
    #[arg(long, value_name = "D")]
    m: Option<usize>,
    /// Geometry degree
    #[arg(long, value_name = "D")]
    k: Option<usize>,
    /// none, ghost, full_grad_surface, full_grad_volume or normal_volume
    #[arg(long, value_name = "KIND")]
    stab: Option<String>,
    #[arg(long, value_name = "X")]
    rho: Option<f64>,
    #[arg(long, value_name = "N")]
    levels: Option<usize>,
    /// Dörfler marking fraction
    #[arg(long, value_name = "X")]
    theta: Option<f64>,
    /// Diffusion coefficient of the convection problem
    #[arg(long, value_name = "X")]
    eps: Option<f64>,
    /// Extra key=value settings, applied last
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Cli {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = vec![("study".to_string(), self.study.key().to_string())];
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("surface", self.surface.clone());
        push("m", self.m.map(|v| v.to_string()));
        push("k", self.k.map(|v| v.to_string()));
        push("stab", self.stab.clone());
        push("rho", self.rho.map(|v| v.to_string()));
        push("levels", self.levels.map(|v| v.to_string()));
        push("theta", self.theta.map(|v| v.to_string()));
        push("eps", self.eps.map(|v| v.to_string()));
        out
    }

    fn config(&self) -> Result<StudyConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => StudyConfig::default(),
        };
        for (k, v) in self.overrides() {
            cfg.set(&k, &v).with_context(|| format!("--{k}"))?;
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got '{pair}'"))?;
            cfg.set(k, v).with_context(|| format!("--set {pair}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = cli.config()?;
    let report = run_study(&cfg).with_context(|| format!("{} study failed", cfg.study))?;
    print!("{}", report.summary());
    println!("outputs written to {}", cfg.out.display());
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
