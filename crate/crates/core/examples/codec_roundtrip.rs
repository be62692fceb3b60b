//! Discretize a command vector into per-dimension tokens and back.

use moeq::codec::{detokenize, discretize, valid_token_mask, BinSpec, CommandField, CommandVector};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // 40 reserved observation tokens come first, then one block per field.
    let bins = BinSpec::full(40);
    println!("{} action dims, vocabulary {}", bins.n_dims(), bins.vocab_size());
    for (d, spec) in bins.dims.iter().enumerate() {
        let block = bins.block(d);
        println!("  {:<8} [{:>6.2}, {:>5.2}] {:>3} bins -> tokens {}..{}", spec.field.name(), spec.lo, spec.hi, spec.n_bins, block.start, block.end);
    }

    let cmd = CommandVector::default()
        .with(CommandField::VX, 0.6)
        .with(CommandField::BodyHeight, -0.2)
        .with(CommandField::Terminate, 0.0);
    let tokens = discretize(&cmd, &bins)?;
    let back = detokenize(&tokens, &bins)?;
    println!("tokens {:?}", tokens.0);
    println!("v_x {:.3} -> {:.3}, h_z {:.3} -> {:.3}", cmd.get(CommandField::VX), back.get(CommandField::VX), cmd.get(CommandField::BodyHeight), back.get(CommandField::BodyHeight));
    assert_eq!(discretize(&back, &bins)?, tokens);

    let mask = valid_token_mask(0, bins.vocab_size(), &bins);
    println!("dim 0 has {} valid tokens out of {}", mask.iter().filter(|&&m| m).count(), mask.len());

    // A reduced layout with only the fields the corridor dynamics read.
    let small = BinSpec::with_fields(40, &[CommandField::VX, CommandField::BodyHeight, CommandField::Terminate])?;
    println!("reduced layout: {} dims, {} action tokens", small.n_dims(), small.action_vocab());
    Ok(())
}
