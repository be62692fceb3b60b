//! Run the four-variant ablation suite from a config file.
//!
//! `cargo run --release --example ablation -- configs/desk.cfg [seeds]`

use moeq::experiment::{run_ablation_suite, summarize, ExperimentConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let path = args.get(1).map_or("configs/desk.cfg", String::as_str);
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(n) = args.get(2) {
        cfg.eval.seeds = n.parse()?;
    }
    let start = std::time::Instant::now();
    let suite = run_ablation_suite(&cfg, &Variant::ALL, |r| {
        let rates: Vec<String> = r.stats.tasks.iter().map(|t| format!("{}={:.2}", t.kind.name(), t.success_rate())).collect();
        println!("[{:>6.1}s] seed {} {:<15} {}", start.elapsed().as_secs_f64(), r.seeds.index, r.variant.name(), rates.join(" "));
    })?;
    println!("sub-optimal transition share per seed: {:.3?}", suite.subopt_fraction);
    print!("{}", summarize(&suite.rows));
    Ok(())
}
