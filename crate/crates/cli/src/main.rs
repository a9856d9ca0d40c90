use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use domspec_core::fixture::{write_toy_world, ToyConfig};
use domspec_core::pipeline::{run_repeated, summary_table, Pipeline, PipelineConfig, Selection, StageRecord};

#[derive(Parser)]
#[command(name = "domspec", version, about = "Cross-lingual, domain-aware word vector specialisation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the projection and translate the selected source constraint groups.
    Project(Common),
    /// Filter projected constraints with relation classifiers.
    Refine(Common),
    /// Merge refined constraints and specialise the target space.
    Specialise(Common),
    /// Learn the global mapping and apply it to the whole vocabulary.
    Postspec(Common),
    /// Word similarity evaluation.
    EvalSim(EvalArgs),
    /// Proxy text classification evaluation.
    EvalClf(EvalArgs),
    /// Seed-word cluster distances and 2-D projections.
    Clusters(EvalArgs),
    /// Every stage in order, then the manifest.
    Run {
        #[command(flatten)]
        common: Common,
        /// Repeat with consecutive seeds and aggregate the metrics.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Write the bundled toy fixture (vectors, constraints, config) to a directory.
    Fixture {
        dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    skip_refinement: bool,
    #[arg(long)]
    skip_postspec: bool,
    #[arg(long)]
    no_phrase: bool,
    #[arg(long)]
    no_external: bool,
    /// Which source constraint groups to use.
    #[arg(long, value_parser = ["general", "domain", "both"])]
    constraints: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Evaluate only this vector file instead of the pipeline spaces.
    #[arg(long)]
    space: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        let ab = &mut cfg.ablation;
        ab.refinement &= !self.skip_refinement;
        ab.postspec &= !self.skip_postspec;
        ab.phrase_level &= !self.no_phrase;
        ab.use_external_target &= !self.no_external;
        if let Some(c) = &self.constraints {
            ab.constraint_selection = c.parse::<Selection>()?;
        }
        Ok(cfg)
    }

    fn pipeline(&self) -> anyhow::Result<Pipeline> {
        Ok(Pipeline::new(self.config()?)?)
    }
}

fn report(rec: &StageRecord) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(rec)?);
    Ok(())
}

fn stage(
    name: &str,
    common: &Common,
    f: impl FnOnce(&mut Pipeline) -> domspec_core::Result<StageRecord>,
) -> anyhow::Result<()> {
    let mut p = common.pipeline()?;
    let rec = f(&mut p).map_err(|e| e.in_stage(name))?;
    report(&rec)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Project(c) => stage("project", &c, Pipeline::stage_project),
        Command::Refine(c) => stage("refine", &c, Pipeline::stage_refine),
        Command::Specialise(c) => stage("specialise", &c, Pipeline::stage_specialise),
        Command::Postspec(c) => stage("postspec", &c, Pipeline::stage_postspec),
        Command::EvalSim(a) => stage("eval-sim", &a.common, |p| p.stage_eval_sim(a.space.as_deref())),
        Command::EvalClf(a) => stage("eval-clf", &a.common, |p| p.stage_eval_clf(a.space.as_deref())),
        Command::Clusters(a) => stage("clusters", &a.common, |p| p.stage_clusters(a.space.as_deref())),
        Command::Run { common, runs } => {
            let cfg = common.config()?;
            if runs > 1 {
                let agg = run_repeated(&cfg, runs)?;
                println!("{:<40} {:>10} {:>10}", "metric", "mean", "std");
                for (k, m) in &agg.metrics {
                    println!("{k:<40} {:>10.4} {:>10.4}", m.mean, m.std);
                }
            } else {
                let out = cfg.output_dir.clone();
                let manifest = Pipeline::new(cfg)?.run()?;
                for s in &manifest.stages {
                    println!("{:<12} {:?} {:.2}s", s.name, s.status, s.seconds);
                }
                print!("{}", summary_table(&manifest.metrics));
                println!("manifest: {}", out.join("manifest.json").display());
            }
            Ok(())
        }
        Command::Fixture { dir, seed } => {
            let mut cfg = ToyConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let world = write_toy_world(&dir, &cfg).with_context(|| format!("writing fixture to {}", dir.display()))?;
            println!("{}", world.config_path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
