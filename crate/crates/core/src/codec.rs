//! Mapping between continuous robot commands and per-dimension action tokens.
//!
//! Every tokenized command field owns a contiguous block of the token
//! vocabulary. Blocks are laid out back to back starting at
//! [`BinSpec::offset`]; tokens below the offset belong to the observation and
//! instruction region and are never valid actions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("command field {field} = {value} outside [{lo}, {hi}] (dimension {dim})")]
    OutOfRange {
        dim: usize,
        field: CommandField,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("token {token} is not a valid action token for dimension {dim}")]
    InvalidToken { dim: usize, token: u32 },
    #[error("expected {expected} action tokens, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("invalid bin spec: {0}")]
    InvalidSpec(String),
}

/// The twelve fields of a quadruped command, in decoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandField {
    VX,
    VY,
    OmegaZ,
    Theta1,
    Theta2,
    Theta3,
    Frequency,
    BodyHeight,
    Pitch,
    FootWidth,
    FootHeight,
    Terminate,
}

impl CommandField {
    pub const ALL: [CommandField; 12] = [
        CommandField::VX,
        CommandField::VY,
        CommandField::OmegaZ,
        CommandField::Theta1,
        CommandField::Theta2,
        CommandField::Theta3,
        CommandField::Frequency,
        CommandField::BodyHeight,
        CommandField::Pitch,
        CommandField::FootWidth,
        CommandField::FootHeight,
        CommandField::Terminate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CommandField::VX => "v_x",
            CommandField::VY => "v_y",
            CommandField::OmegaZ => "omega_z",
            CommandField::Theta1 => "theta_1",
            CommandField::Theta2 => "theta_2",
            CommandField::Theta3 => "theta_3",
            CommandField::Frequency => "f",
            CommandField::BodyHeight => "h_z",
            CommandField::Pitch => "phi",
            CommandField::FootWidth => "s_y",
            CommandField::FootHeight => "h_z_f",
            CommandField::Terminate => "T",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Default physical range and bin count.
    pub fn default_range(self) -> (f64, f64, usize) {
        match self {
            CommandField::VX => (-1.0, 1.0, 21),
            CommandField::VY => (-0.6, 0.6, 21),
            CommandField::OmegaZ => (-1.0, 1.0, 21),
            CommandField::Theta1 | CommandField::Theta2 | CommandField::Theta3 => (0.0, 1.0, 21),
            CommandField::Frequency => (1.5, 4.0, 21),
            CommandField::BodyHeight => (-0.25, 0.15, 21),
            CommandField::Pitch => (-0.4, 0.4, 21),
            CommandField::FootWidth => (0.10, 0.45, 21),
            CommandField::FootHeight => (0.03, 0.25, 21),
            CommandField::Terminate => (0.0, 1.0, 2),
        }
    }

    /// Value a field takes when it is not part of the tokenized action.
    pub fn default_value(self) -> f64 {
        match self {
            CommandField::Terminate => 0.0,
            _ => {
                let (lo, hi, _) = self.default_range();
                0.5 * (lo + hi)
            }
        }
    }
}

impl std::fmt::Display for CommandField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Continuous 12-field robot command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandVector(pub [f64; 12]);

impl Default for CommandVector {
    fn default() -> Self {
        let mut v = [0.0; 12];
        for f in CommandField::ALL {
            v[f.index()] = f.default_value();
        }
        CommandVector(v)
    }
}

impl CommandVector {
    pub fn get(&self, field: CommandField) -> f64 {
        self.0[field.index()]
    }

    pub fn set(&mut self, field: CommandField, value: f64) {
        self.0[field.index()] = value;
    }

    pub fn with(mut self, field: CommandField, value: f64) -> Self {
        self.set(field, value);
        self
    }

    pub fn terminate(&self) -> bool {
        self.get(CommandField::Terminate) >= 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimSpec {
    pub field: CommandField,
    pub lo: f64,
    pub hi: f64,
    pub n_bins: usize,
}

impl DimSpec {
    pub fn new(field: CommandField, lo: f64, hi: f64, n_bins: usize) -> Self {
        DimSpec { field, lo, hi, n_bins }
    }

    pub fn default_for(field: CommandField) -> Self {
        let (lo, hi, n) = field.default_range();
        DimSpec::new(field, lo, hi, n)
    }

    /// Binary flags decode to the bin index itself rather than a bin center.
    pub fn is_flag(&self) -> bool {
        self.field == CommandField::Terminate
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n_bins as f64
    }

    pub fn bin_of(&self, value: f64) -> usize {
        let raw = ((value - self.lo) / (self.hi - self.lo) * self.n_bins as f64).floor();
        (raw.max(0.0) as usize).min(self.n_bins - 1)
    }

    pub fn value_of(&self, bin: usize) -> f64 {
        if self.is_flag() {
            bin as f64
        } else {
            self.lo + (bin as f64 + 0.5) * self.width()
        }
    }
}

/// Per-dimension binning plus placement of the action blocks in the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    /// First token id of the action region.
    pub offset: u32,
    pub dims: Vec<DimSpec>,
}

impl BinSpec {
    pub fn new(offset: u32, dims: Vec<DimSpec>) -> Result<Self, CodecError> {
        let spec = BinSpec { offset, dims };
        spec.validate()?;
        Ok(spec)
    }

    /// All twelve command fields with default ranges.
    pub fn full(offset: u32) -> Self {
        BinSpec {
            offset,
            dims: CommandField::ALL.into_iter().map(DimSpec::default_for).collect(),
        }
    }

    /// A subset of fields with default ranges, in decoding order.
    pub fn with_fields(offset: u32, fields: &[CommandField]) -> Result<Self, CodecError> {
        Self::new(offset, fields.iter().copied().map(DimSpec::default_for).collect())
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.dims.is_empty() {
            return Err(CodecError::InvalidSpec("no action dimensions".into()));
        }
        for (i, d) in self.dims.iter().enumerate() {
            if !(d.lo < d.hi) {
                return Err(CodecError::InvalidSpec(format!("dimension {i}: lo must be < hi")));
            }
            if d.n_bins < 2 {
                return Err(CodecError::InvalidSpec(format!("dimension {i}: n_bins must be >= 2")));
            }
            if d.is_flag() && (d.n_bins != 2 || d.lo != 0.0 || d.hi != 1.0) {
                return Err(CodecError::InvalidSpec(format!(
                    "dimension {i}: the termination flag must use lo=0, hi=1, n=2"
                )));
            }
            if self.dims[..i].iter().any(|p| p.field == d.field) {
                return Err(CodecError::InvalidSpec(format!("dimension {i}: duplicate field {}", d.field)));
            }
        }
        Ok(())
    }

    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn action_vocab(&self) -> usize {
        self.dims.iter().map(|d| d.n_bins).sum()
    }

    /// Total vocabulary size: reserved region followed by every action block.
    pub fn vocab_size(&self) -> usize {
        self.offset as usize + self.action_vocab()
    }

    /// Token range `[start, end)` owned by `dim`.
    pub fn block(&self, dim: usize) -> std::ops::Range<u32> {
        let start = self.offset + self.dims[..dim].iter().map(|d| d.n_bins as u32).sum::<u32>();
        start..start + self.dims[dim].n_bins as u32
    }

    pub fn dim_of_field(&self, field: CommandField) -> Option<usize> {
        self.dims.iter().position(|d| d.field == field)
    }

    pub fn token(&self, dim: usize, bin: usize) -> u32 {
        self.block(dim).start + bin as u32
    }

    pub fn bin(&self, dim: usize, token: u32) -> Result<usize, CodecError> {
        let block = self.block(dim);
        if block.contains(&token) {
            Ok((token - block.start) as usize)
        } else {
            Err(CodecError::InvalidToken { dim, token })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionTokens(pub Vec<u32>);

impl ActionTokens {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn discretize(cmd: &CommandVector, bins: &BinSpec) -> Result<ActionTokens, CodecError> {
    let mut tokens = Vec::with_capacity(bins.n_dims());
    for (dim, spec) in bins.dims.iter().enumerate() {
        let value = cmd.get(spec.field);
        if !(value >= spec.lo && value <= spec.hi) {
            return Err(CodecError::OutOfRange {
                dim,
                field: spec.field,
                value,
                lo: spec.lo,
                hi: spec.hi,
            });
        }
        if spec.is_flag() && value != 0.0 && value != 1.0 {
            return Err(CodecError::OutOfRange {
                dim,
                field: spec.field,
                value,
                lo: spec.lo,
                hi: spec.hi,
            });
        }
        tokens.push(bins.token(dim, spec.bin_of(value)));
    }
    Ok(ActionTokens(tokens))
}

/// Decode tokens to bin centers. Fields that are not tokenized keep their defaults.
pub fn detokenize(tokens: &ActionTokens, bins: &BinSpec) -> Result<CommandVector, CodecError> {
    if tokens.len() != bins.n_dims() {
        return Err(CodecError::WrongLength {
            expected: bins.n_dims(),
            got: tokens.len(),
        });
    }
    let mut cmd = CommandVector::default();
    for (dim, (&tok, spec)) in tokens.0.iter().zip(&bins.dims).enumerate() {
        let bin = bins.bin(dim, tok)?;
        cmd.set(spec.field, spec.value_of(bin));
    }
    Ok(cmd)
}

pub fn valid_token_mask(dim: usize, vocab_size: usize, bins: &BinSpec) -> Vec<bool> {
    let mut mask = vec![false; vocab_size];
    for t in bins.block(dim) {
        if let Some(m) = mask.get_mut(t as usize) {
            *m = true;
        }
    }
    mask
}
