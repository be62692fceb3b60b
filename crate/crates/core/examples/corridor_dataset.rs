//! Roll the scripted expert and a random controller through the corridor,
//! build a mixed-quality dataset and round-trip it through the store.

use moeq::codec::{BinSpec, CommandField};
use moeq::env::{generate_dataset, run_episode, RandomController, SpecFamily, TaskKind, TaskSpec, ExpertController};
use moeq::seed;
use moeq::store::{read_trajectories, write_trajectories, Quality};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = TaskSpec::new(TaskKind::Crawl, 16, 48);
    let bins = BinSpec::with_fields(spec.vocab().size() as u32, &[CommandField::VX, CommandField::BodyHeight, CommandField::Terminate])?;

    let mut expert = ExpertController { bins: bins.clone(), epsilon: 0.0, rng: seed::rng(1, "expert") };
    let t = run_episode(&spec, 7, &mut expert, &bins, Quality::Expert, "crawl")?;
    println!("expert: {} steps, return {}", t.steps.len(), t.ret());

    let mut random = RandomController { bins: bins.clone(), rng: seed::rng(1, "random") };
    let wins = (0..200)
        .map(|s| run_episode(&spec, s, &mut random, &bins, Quality::Suboptimal, "crawl").map(|t| t.ret()))
        .sum::<Result<u32, _>>()?;
    println!("random: {wins}/200 successes");

    let family = SpecFamily::train(&TaskKind::ALL, 16, 48);
    let data = generate_dataset(&family, &bins, 30, 15, 0.5, 3)?;
    let c = data.composition();
    println!(
        "dataset: {} trajectories, {} transitions, {:.1}% sub-optimal",
        data.len(),
        data.n_transitions(),
        100.0 * c.suboptimal_fraction()
    );

    let dir = std::env::temp_dir().join("moeq-corridor-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("data.jsonl");
    write_trajectories(&path, &data)?;
    assert_eq!(read_trajectories(&path)?, data);
    println!("round trip through {} ok", path.display());
    Ok(())
}
