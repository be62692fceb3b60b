use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moeq::experiment::{
    build_policy, grad_check_config, make_dataset, rollout, run_ablation_suite, select_data, summarize, write_csv,
    write_report, ExperimentConfig, ExperimentError, Greedy, ResultRow, RunSeeds, Variant,
};
use moeq::model::checkpoint::{self, CheckpointMeta};
use moeq::store::{read_trajectories, write_trajectories};
use moeq::train::{Objective, Trainer};

#[derive(Parser)]
#[command(name = "moeq", about = "Offline conservative Q-learning with a mixture-of-LoRA token policy")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the mixed-quality training dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one policy with the flags from the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a checkpoint greedily and print per-task success as CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Use the shifted evaluation goal range.
        #[arg(long)]
        ood: bool,
    },
    /// Run all four variants over every seed and write results.csv / summary.txt.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the full objective.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode, ExperimentError> {
    match cmd {
        Cmd::GenData { config, out } => {
            let cfg = ExperimentConfig::load(config)?;
            let data = make_dataset(&cfg, &RunSeeds::new(cfg.seed, 0))?;
            write_trajectories(&out, &data)?;
            let c = data.composition();
            eprintln!(
                "{} trajectories, {} expert + {} sub-optimal transitions ({:.1}% sub-optimal)",
                data.len(),
                c.expert_transitions,
                c.suboptimal_transitions,
                100.0 * c.suboptimal_fraction()
            );
        }
        Cmd::Train { config, data, out } => {
            let cfg = ExperimentConfig::load(config)?;
            let seeds = RunSeeds::new(cfg.seed, 0);
            let set = read_trajectories(&data)?;
            let flags = cfg.flags;
            let policy = build_policy(&cfg, flags, &seeds)?;
            let mut tc = cfg.train.clone();
            tc.seed = seeds.train;
            tc.objective = if flags.use_rl { Objective::Conservative } else { Objective::BehaviorCloning };
            let mut trainer = Trainer::new(policy, tc)?;
            trainer.fit(&select_data(&set, flags))?;
            checkpoint::save(
                &out,
                &trainer.online,
                &CheckpointMeta {
                    step: trainer.step,
                    rng: Some(trainer.rng().clone()),
                },
            )?;
            let metrics = out.with_extension("metrics.csv");
            trainer.save_metrics(&metrics)?;
            if let Some(m) = trainer.metrics.last() {
                eprintln!("step {} total {:.6} td {:.6} conservative {:.6} moe {:.6}", m.step, m.total, m.td, m.conservative, m.moe);
            }
            eprintln!("wrote {} and {}", out.display(), metrics.display());
        }
        Cmd::Eval { ckpt, config, episodes, ood } => {
            let cfg = ExperimentConfig::load(config)?;
            let seeds = RunSeeds::new(cfg.seed, 0);
            let mut policy = build_policy(&cfg, cfg.flags, &seeds)?;
            checkpoint::load(&ckpt, &mut policy)?;
            let n = episodes.unwrap_or(cfg.eval.episodes);
            let stats = rollout(&mut Greedy(&policy), &cfg.env.family(ood), &cfg.bins, n, seeds.eval)?;
            let rows: Vec<ResultRow> = stats
                .tasks
                .iter()
                .map(|t| ResultRow {
                    variant: "checkpoint".into(),
                    task: t.kind.name().into(),
                    n_episodes: t.n_episodes,
                    success_rate: t.success_rate(),
                    mean_len: t.mean_len,
                    seed: cfg.seed,
                })
                .collect();
            write_csv(&mut std::io::stdout().lock(), &rows)?;
        }
        Cmd::Ablate { config, out } => {
            let cfg = ExperimentConfig::load(config)?;
            let suite = run_ablation_suite(&cfg, &Variant::ALL, |r| {
                let rates: Vec<String> = r.stats.tasks.iter().map(|t| format!("{}={:.2}", t.kind.name(), t.success_rate())).collect();
                eprintln!("seed {} {:<15} {}", r.seeds.index, r.variant.name(), rates.join(" "));
            })?;
            write_report(&out, &suite.rows)?;
            print!("{}", summarize(&suite.rows));
        }
        Cmd::GradCheck { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let r = grad_check_config(&cfg, 6, 16)?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst: {}[{}])",
                r.max_rel_error, r.n_coords, r.worst.0, r.worst.1
            );
            if r.max_rel_error >= 1e-5 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
