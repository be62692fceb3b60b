//! Train one policy, write a checkpoint, restore it into a fresh model and
//! evaluate both copies on the shifted goal range.

use moeq::experiment::{build_policy, evaluate, make_dataset, train_policy, ExperimentConfig, Flags, RunSeeds};
use moeq::model::checkpoint::{self, CheckpointMeta};

const CFG: &str = "
env.length = 16
env.horizon = 40
env.tasks = go_to
bins.fields = v_x, h_z, T
bins.v_x.n = 3
bins.h_z.n = 3
data.n_expert = 20
data.n_subopt = 10
model.layers = 1
model.hidden = 16
model.heads = 2
model.rank = 2
train.steps = 300
train.batch_size = 16
train.lr = 0.003
eval.episodes = 10
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::parse(CFG)?;
    let seeds = RunSeeds::new(cfg.seed, 0);
    let data = make_dataset(&cfg, &seeds)?;
    let trainer = train_policy(&cfg, Flags::FULL, &data, &seeds)?;
    let last = trainer.metrics.last().expect("trained");
    println!("step {} td {:.5} conservative {:.5} balance {:.5}", last.step, last.td, last.conservative, last.moe);

    let path = std::env::temp_dir().join("moeq-example.ckpt");
    checkpoint::save(&path, &trainer.online, &CheckpointMeta { step: trainer.step, rng: Some(trainer.rng().clone()) })?;
    let mut restored = build_policy(&cfg, Flags::FULL, &seeds)?;
    let meta = checkpoint::load(&path, &mut restored)?;
    println!("restored step {} from {}", meta.step, path.display());

    let a = evaluate(&cfg, &trainer.online, &seeds, true)?;
    let b = evaluate(&cfg, &restored, &seeds, true)?;
    for (x, y) in a.tasks.iter().zip(&b.tasks) {
        println!("{:<9} trained {:.2}  restored {:.2}", x.kind.name(), x.success_rate(), y.success_rate());
    }
    Ok(())
}
