//! Finite-difference check of the full objective on a toy configuration.

use moeq::experiment::{grad_check_config, ExperimentConfig};

const TOY: &str = "
env.length = 12
env.horizon = 36
bins.fields = v_x, h_z, T
bins.v_x.n = 3
bins.h_z.n = 3
model.layers = 1
model.hidden = 8
model.heads = 2
model.ffn = 16
model.experts = 3
model.top_k = 2
model.rank = 2
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::parse(TOY)?;
    let r = grad_check_config(&cfg, 4, 24)?;
    println!("checked {} coordinates; max relative error {:.3e} at {}[{}]", r.n_coords, r.max_rel_error, r.worst.0, r.worst.1);
    Ok(())
}
