//! Behavior policies that produce the offline data.

use rand::Rng as _;

use super::{motion_of, step, EnvError, EnvState, Height, Observation};
use crate::codec::{detokenize, ActionTokens, BinSpec, CommandField, CommandVector};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Motion {
    Back,
    Stay,
    Forward,
}

impl Motion {
    const ALL: [Motion; 3] = [Motion::Back, Motion::Stay, Motion::Forward];

    fn of(v_x: f64) -> Motion {
        match motion_of(v_x) {
            -1 => Motion::Back,
            0 => Motion::Stay,
            _ => Motion::Forward,
        }
    }
}

/// The part of a command the dynamics can see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CommandClass {
    pub motion: Motion,
    pub height: Height,
    pub terminate: bool,
}

/// Bins of each effective field grouped by the class value they decode to.
struct ClassBins {
    motion: [Vec<usize>; 3],
    height: [Vec<usize>; 3],
    terminate: [Vec<usize>; 2],
    vx_dim: Option<usize>,
    hz_dim: Option<usize>,
    t_dim: Option<usize>,
}

impl ClassBins {
    fn new(bins: &BinSpec) -> Self {
        let mut cb = ClassBins {
            motion: Default::default(),
            height: Default::default(),
            terminate: Default::default(),
            vx_dim: bins.dim_of_field(CommandField::VX),
            hz_dim: bins.dim_of_field(CommandField::BodyHeight),
            t_dim: bins.dim_of_field(CommandField::Terminate),
        };
        if let Some(d) = cb.vx_dim {
            let spec = &bins.dims[d];
            for b in 0..spec.n_bins {
                cb.motion[Motion::of(spec.value_of(b)) as usize].push(b);
            }
        }
        if let Some(d) = cb.hz_dim {
            let spec = &bins.dims[d];
            for b in 0..spec.n_bins {
                cb.height[Height::from_command(spec.value_of(b)).index()].push(b);
            }
        }
        if cb.t_dim.is_some() {
            cb.terminate = [vec![0], vec![1]];
        }
        cb
    }

    fn motions(&self) -> Vec<(Motion, u64)> {
        match self.vx_dim {
            Some(_) => Motion::ALL
                .into_iter()
                .map(|m| (m, self.motion[m as usize].len() as u64))
                .filter(|&(_, n)| n > 0)
                .collect(),
            None => vec![(Motion::of(CommandField::VX.default_value()), 1)],
        }
    }

    fn heights(&self) -> Vec<(Height, u64)> {
        match self.hz_dim {
            Some(_) => Height::ALL
                .into_iter()
                .map(|h| (h, self.height[h.index()].len() as u64))
                .filter(|&(_, n)| n > 0)
                .collect(),
            None => vec![(Height::from_command(CommandField::BodyHeight.default_value()), 1)],
        }
    }

    fn terminates(&self) -> Vec<(bool, u64)> {
        match self.t_dim {
            Some(_) => vec![(false, 1), (true, 1)],
            None => vec![(false, 1)],
        }
    }

    fn representative(&self, bins: &BinSpec, class: CommandClass) -> CommandVector {
        let mut cmd = CommandVector::default();
        if let Some(d) = self.vx_dim {
            cmd.set(CommandField::VX, bins.dims[d].value_of(self.motion[class.motion as usize][0]));
        }
        if let Some(d) = self.hz_dim {
            cmd.set(CommandField::BodyHeight, bins.dims[d].value_of(self.height[class.height.index()][0]));
        }
        if self.t_dim.is_some() {
            cmd.set(CommandField::Terminate, if class.terminate { 1.0 } else { 0.0 });
        }
        cmd
    }
}

/// True when, after `cmd`, the episode has succeeded or can still succeed
/// within the remaining horizon.
pub fn preserves_success(state: &EnvState, cmd: &CommandVector) -> bool {
    match step(state, cmd) {
        Ok(o) if o.state.succeeded => true,
        Ok(o) if o.done => false,
        Ok(o) => o.state.layout.min_steps_to_success(o.state.position) <= o.state.remaining(),
        Err(_) => false,
    }
}

/// Every success-preserving command class with the number of concrete token
/// combinations of the effective fields that fall into it.
pub fn success_preserving_classes(state: &EnvState, bins: &BinSpec) -> Vec<(CommandClass, u64)> {
    let cb = ClassBins::new(bins);
    let mut out = Vec::new();
    for (motion, nm) in cb.motions() {
        for (height, nh) in cb.heights() {
            for (terminate, nt) in cb.terminates() {
                let class = CommandClass {
                    motion,
                    height,
                    terminate,
                };
                if preserves_success(state, &cb.representative(bins, class)) {
                    out.push((class, nm * nh * nt));
                }
            }
        }
    }
    out
}

/// Uniform draw over all success-preserving token sequences.
pub fn expert_tokens(state: &EnvState, bins: &BinSpec, rng: &mut Rng) -> Result<ActionTokens, EnvError> {
    let classes = success_preserving_classes(state, bins);
    let total: u64 = classes.iter().map(|(_, w)| w).sum();
    if total == 0 {
        return Err(EnvError::Unsolvable {
            position: state.position,
            step: state.step_count,
        });
    }
    let mut pick = rng.gen_range(0..total);
    let mut class = classes[0].0;
    for (c, w) in &classes {
        if pick < *w {
            class = *c;
            break;
        }
        pick -= w;
    }
    let cb = ClassBins::new(bins);
    let tokens = bins
        .dims
        .iter()
        .enumerate()
        .map(|(d, spec)| {
            let bin = match spec.field {
                CommandField::VX => choose(&cb.motion[class.motion as usize], rng),
                CommandField::BodyHeight => choose(&cb.height[class.height.index()], rng),
                CommandField::Terminate => usize::from(class.terminate),
                _ => rng.gen_range(0..spec.n_bins),
            };
            bins.token(d, bin)
        })
        .collect();
    Ok(ActionTokens(tokens))
}

fn choose(options: &[usize], rng: &mut Rng) -> usize {
    options[rng.gen_range(0..options.len())]
}

pub fn random_tokens(bins: &BinSpec, rng: &mut Rng) -> ActionTokens {
    ActionTokens(
        bins.dims
            .iter()
            .enumerate()
            .map(|(d, s)| bins.token(d, rng.gen_range(0..s.n_bins)))
            .collect(),
    )
}

/// With probability `epsilon` a uniformly random command, otherwise the
/// expert's. Once earlier random commands have made success unreachable the
/// expert has nothing to offer and a random command is emitted instead.
pub fn suboptimal_tokens(
    state: &EnvState,
    bins: &BinSpec,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<ActionTokens, EnvError> {
    if rng.gen::<f64>() < epsilon {
        return Ok(random_tokens(bins, rng));
    }
    match expert_tokens(state, bins, rng) {
        Err(EnvError::Unsolvable { .. }) if epsilon > 0.0 => Ok(random_tokens(bins, rng)),
        other => other,
    }
}

pub fn expert_policy(state: &EnvState, bins: &BinSpec, rng: &mut Rng) -> Result<CommandVector, EnvError> {
    Ok(detokenize(&expert_tokens(state, bins, rng)?, bins)?)
}

pub fn suboptimal_policy(
    state: &EnvState,
    bins: &BinSpec,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<CommandVector, EnvError> {
    Ok(detokenize(&suboptimal_tokens(state, bins, epsilon, rng)?, bins)?)
}

/// Anything that can pick action tokens for a running episode.
pub trait Controller {
    fn act(&mut self, state: &EnvState, obs: &Observation) -> Result<ActionTokens, EnvError>;
}

/// Expert with optional epsilon-random corruption.
pub struct ExpertController {
    pub bins: BinSpec,
    pub epsilon: f64,
    pub rng: Rng,
}

impl Controller for ExpertController {
    fn act(&mut self, state: &EnvState, _obs: &Observation) -> Result<ActionTokens, EnvError> {
        suboptimal_tokens(state, &self.bins, self.epsilon, &mut self.rng)
    }
}

pub struct RandomController {
    pub bins: BinSpec,
    pub rng: Rng,
}

impl Controller for RandomController {
    fn act(&mut self, _state: &EnvState, _obs: &Observation) -> Result<ActionTokens, EnvError> {
        Ok(random_tokens(&self.bins, &mut self.rng))
    }
}
