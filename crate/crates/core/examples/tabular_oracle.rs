//! Fit the Q-network on a five-cell corridor with every (state, action)
//! pair in the dataset and compare against exact value iteration.

use std::collections::HashMap;

use moeq::codec::{detokenize, ActionTokens, BinSpec, CommandField, DimSpec};
use moeq::env::{reset, step, CriticalCells, EnvState, TaskKind, TaskSpec};
use moeq::model::{ModelConfig, MoePolicy};
use moeq::store::Transition;
use moeq::train::{TrainConfig, Trainer};

const L: usize = 5;
const GAMMA: f64 = 0.98;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = TaskSpec::new(TaskKind::GoTo, L, 10_000)
        .with_goal_range(3, 4)
        .with_critical(CriticalCells::none())
        .with_distractors(0);
    let bins = BinSpec::new(
        spec.vocab().size() as u32,
        vec![DimSpec::new(CommandField::VX, -1.0, 1.0, 3), DimSpec::new(CommandField::Terminate, 0.0, 1.0, 2)],
    )?;
    let (s0, _) = reset(&spec, 0)?;
    let states: Vec<EnvState> = (0..L).map(|p| EnvState { position: p, ..s0.clone() }).collect();
    let actions: Vec<ActionTokens> = (0..3)
        .flat_map(|a| (0..2).map(move |t| (a, t)))
        .map(|(a, t)| ActionTokens(vec![bins.token(0, a), bins.token(1, t)]))
        .collect();

    // (state, action) -> (reward, done, next state)
    let mut table = Vec::new();
    let mut data = Vec::new();
    for (si, s) in states.iter().enumerate() {
        let o = s.observe();
        for a in &actions {
            let out = step(s, &detokenize(a, &bins)?)?;
            table.push((si, a.clone(), out.reward, out.done, out.state.position));
            data.push(Transition {
                obs: o.obs.clone(),
                instr: o.instr.clone(),
                act: a.0.clone(),
                next_obs: if out.done { o.obs.clone() } else { out.obs.obs.clone() },
                reward: out.reward as u8,
                done: out.done,
            });
        }
    }

    let mut v = vec![0.0; L];
    let q_star = |v: &[f64], r: f64, done: bool, next: usize| if done { r } else { r + GAMMA * v[next] };
    for _ in 0..2000 {
        let mut nv = vec![0.0f64; L];
        for (si, _, r, done, next) in &table {
            nv[*si] = nv[*si].max(q_star(&v, *r, *done, *next));
        }
        v = nv;
    }
    let oracle: HashMap<(usize, Vec<u32>), f64> =
        table.iter().map(|(si, a, r, d, n)| ((*si, a.0.clone()), q_star(&v, *r, *d, *n))).collect();
    println!("V* = {:.4?}", v);

    let cfg = ModelConfig { n_layers: 2, hidden: 32, heads: 2, ffn: 64, rank: 4, max_len: 16, ..ModelConfig::default() };
    let tc = TrainConfig {
        gamma: GAMMA,
        lr: 3e-3,
        target_sync: 50,
        batch_size: data.len(),
        total_steps: 3000,
        alpha_anneal: Some(1500),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(MoePolicy::new(cfg, bins.clone())?, tc)?;
    for chunk in 1..=6 {
        trainer.config.total_steps = chunk * 500;
        trainer.fit(&data)?;
        let mut worst: f64 = 0.0;
        for (t, (si, _, _, _, _)) in data.iter().zip(&table) {
            let q = trainer.online.forward_q(&t.obs, &t.instr, &t.act[..1])?.q[t.act[1] as usize];
            worst = worst.max((q - oracle[&(*si, t.act.clone())]).abs());
        }
        println!("step {:>5}: max |Q - Q*| = {worst:.4}", trainer.step);
    }
    Ok(())
}
