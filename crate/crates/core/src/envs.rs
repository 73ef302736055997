//! Small episodic MDPs with one-hot observations and exact tabular models.
//!
//! Four families are available:
//!
//! * `chain(N)`: cells `0..N`, start at 0, actions left/right, reward 1 on
//!   entering cell `N-1` (terminal).
//! * `stoch_chain(N,p)`: like `chain(N)` but entering the goal pays +1 with
//!   probability `p` and -1 otherwise.
//! * `cliff_grid(W,H)`: cliff walking. Start bottom-left, goal bottom-right,
//!   the bottom row between them is cliff. Every move costs -0.01, entering
//!   the goal pays +1, stepping into the cliff pays -100 and ends the episode.
//! * `deep_corridor(N)`: reward only after `N` consecutive "right" actions
//!   from cell 0; "left" sends the agent back to cell 0.
//!
//! Every environment hits a step cap and reports the cap as a terminal step.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng, RngState};

pub const CLIFF_STEP_REWARD: f64 = -0.01;
pub const CLIFF_GOAL_REWARD: f64 = 1.0;
pub const CLIFF_FALL_REWARD: f64 = -100.0;

/// Environment family and size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvKind {
    Chain { n: usize },
    CliffGrid { width: usize, height: usize },
    StochChain { n: usize, p: f64 },
    DeepCorridor { n: usize },
}

impl EnvKind {
    pub fn observation_dim(&self) -> usize {
        match *self {
            EnvKind::Chain { n } | EnvKind::StochChain { n, .. } | EnvKind::DeepCorridor { n } => n,
            EnvKind::CliffGrid { width, height } => width * height,
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            EnvKind::CliffGrid { .. } => 4,
            _ => 2,
        }
    }

    pub fn max_episode_steps(&self) -> usize {
        match *self {
            EnvKind::Chain { n } | EnvKind::StochChain { n, .. } => 10 * n,
            EnvKind::CliffGrid { width, height } => 2 * width * height,
            EnvKind::DeepCorridor { n } => 4 * n,
        }
    }

    fn start_cell(&self) -> usize {
        match *self {
            EnvKind::CliffGrid { width, height } => (height - 1) * width,
            _ => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            EnvKind::Chain { n } | EnvKind::StochChain { n, .. } => n >= 2,
            EnvKind::CliffGrid { width, height } => width >= 3 && height >= 2,
            EnvKind::DeepCorridor { n } => n >= 1,
        };
        if let EnvKind::StochChain { p, .. } = *self {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{self}: probability must lie in [0, 1]")));
            }
        }
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{self}: environment too small")))
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvKind::Chain { n } => write!(f, "chain({n})"),
            EnvKind::CliffGrid { width, height } => write!(f, "cliff_grid({width},{height})"),
            EnvKind::StochChain { n, p } => write!(f, "stoch_chain({n},{p})"),
            EnvKind::DeepCorridor { n } => write!(f, "deep_corridor({n})"),
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown environment `{s}` (expected chain(N), cliff_grid(W,H), stoch_chain(N,p) or deep_corridor(N))"
            ))
        };
        let s = s.trim();
        let open = s.find('(').ok_or_else(bad)?;
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let args: Vec<&str> = inner.split(',').map(str::trim).collect();
        let int = |i: usize| -> Result<usize> { args[i].parse().map_err(|_| bad()) };
        let kind = match (&s[..open], args.len()) {
            ("chain", 1) => EnvKind::Chain { n: int(0)? },
            ("cliff_grid", 2) => EnvKind::CliffGrid { width: int(0)?, height: int(1)? },
            ("stoch_chain", 2) => EnvKind::StochChain { n: int(0)?, p: args[1].parse().map_err(|_| bad())? },
            ("deep_corridor", 1) => EnvKind::DeepCorridor { n: int(0)? },
            _ => return Err(bad()),
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// An environment family together with its normalization baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub observation_dim: usize,
    pub action_count: usize,
    pub max_episode_steps: usize,
    /// Expected return of the uniform-random policy.
    pub random_score: f64,
    /// Expected return of the value-iteration greedy policy.
    pub reference_score: f64,
}

impl EnvSpec {
    /// Builds the spec, computing both baselines from the exact model with
    /// discount `gamma` for the optimal policy.
    pub fn new(kind: EnvKind, gamma: f64) -> Result<Self> {
        kind.validate()?;
        let model = TabularModel::from_kind(kind, gamma, None);
        let start = kind.start_cell();
        let horizon = kind.max_episode_steps();
        let q = value_iteration(&model, 1e-10)?;
        let greedy = q.greedy_policy();
        let reference_score = model.horizon_return(start, horizon, |s, a| (greedy[s] == a) as u8 as f64);
        let uniform = 1.0 / kind.action_count() as f64;
        let random_score = model.horizon_return(start, horizon, |_, _| uniform);
        Ok(Self {
            kind,
            observation_dim: kind.observation_dim(),
            action_count: kind.action_count(),
            max_episode_steps: horizon,
            random_score,
            reference_score,
        })
    }

    pub fn parse(name: &str, gamma: f64) -> Result<Self> {
        Self::new(name.parse()?, gamma)
    }

    pub fn name(&self) -> String {
        self.kind.to_string()
    }

    /// `100 · (score − random) / (reference − random)`.
    pub fn normalize(&self, score: f64) -> Result<f64> {
        let span = self.reference_score - self.random_score;
        if !(span > 0.0) {
            return Err(Error::Config(format!(
                "{}: reference score {} does not exceed random score {}",
                self.name(),
                self.reference_score,
                self.random_score
            )));
        }
        Ok(100.0 * (score - self.random_score) / span)
    }

    /// Monte Carlo mean of undiscounted episode returns under `policy`.
    pub fn policy_return<P>(&self, gamma: f64, episodes: usize, seed: u64, mut policy: P) -> Result<MonteCarlo>
    where
        P: FnMut(&[f64], &mut Rng) -> usize,
    {
        if episodes == 0 {
            return Err(Error::Usage("policy_return needs at least one episode".into()));
        }
        let mut env = Environment::new(self.clone(), gamma)?;
        let mut policy_rng = rng::stream(seed, rng::Stream::Action);
        let mut obs = env.reset(seed);
        let mut returns = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let mut total = 0.0;
            loop {
                let action = policy(&obs, &mut policy_rng);
                let step = env.step(action)?;
                total += step.reward;
                if step.terminal {
                    break;
                }
                obs = step.observation;
            }
            returns.push(total);
            obs = env.restart();
        }
        Ok(MonteCarlo::from_samples(&returns))
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarlo {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl MonteCarlo {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, stderr: (var / n).sqrt(), samples: xs.len() }
    }
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// γ on ordinary steps, 0 on terminal steps.
    pub discount: f64,
    pub terminal: bool,
}

pub fn clip_reward(r: f64, lo: f64, hi: f64) -> f64 {
    r.max(lo).min(hi)
}

/// Mutable episode state of an environment, exposed for checkpointing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub cell: usize,
    pub steps: usize,
    pub done: bool,
    pub rng: RngState,
}

/// A running environment instance.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvSpec,
    gamma: f64,
    rng: Rng,
    cell: usize,
    steps: usize,
    done: bool,
}

impl Environment {
    pub fn new(spec: EnvSpec, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("discount {gamma} outside [0, 1]")));
        }
        let cell = spec.kind.start_cell();
        Ok(Self { spec, gamma, rng: rng::stream(0, rng::Stream::Env), cell, steps: 0, done: false })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Reseeds the environment stream and starts a fresh episode.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = rng::stream(seed, rng::Stream::Env);
        self.restart()
    }

    /// Starts a new episode, continuing the current random stream.
    pub fn restart(&mut self) -> Vec<f64> {
        self.cell = self.spec.kind.start_cell();
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    pub fn state_index(&self) -> usize {
        self.cell
    }

    pub fn observation(&self) -> Vec<f64> {
        one_hot(self.spec.observation_dim, self.cell)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Usage("step called on a terminated episode".into()));
        }
        if action >= self.spec.action_count {
            return Err(Error::Usage(format!("action {action} out of range for {} actions", self.spec.action_count)));
        }
        let outcome = transition(self.spec.kind, self.cell, action);
        let reward = match outcome.reward {
            Reward::Fixed(r) => r,
            Reward::Coin { p } => {
                if self.rng.random::<f64>() < p {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        self.cell = outcome.next;
        self.steps += 1;
        let terminal = outcome.terminal || self.steps >= self.spec.max_episode_steps;
        self.done = terminal;
        Ok(EnvStep {
            observation: self.observation(),
            reward,
            discount: if terminal { 0.0 } else { self.gamma },
            terminal,
        })
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot { cell: self.cell, steps: self.steps, done: self.done, rng: RngState::capture(&self.rng) }
    }

    pub fn restore(&mut self, snap: &EnvSnapshot) -> Result<()> {
        if snap.cell >= self.spec.observation_dim {
            return Err(Error::Checkpoint(format!("environment cell {} out of range", snap.cell)));
        }
        self.cell = snap.cell;
        self.steps = snap.steps;
        self.done = snap.done;
        self.rng = snap.rng.restore()?;
        Ok(())
    }
}

pub fn one_hot(len: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

#[derive(Debug, Clone, Copy)]
enum Reward {
    Fixed(f64),
    Coin { p: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    next: usize,
    reward: Reward,
    terminal: bool,
}

/// Dynamics shared by [`Environment`] and [`TabularModel`]. For
/// `deep_corridor` the terminal step keeps the agent on the last cell.
fn transition(kind: EnvKind, cell: usize, action: usize) -> Outcome {
    match kind {
        EnvKind::Chain { n } | EnvKind::StochChain { n, .. } => {
            let next = if action == 0 { cell.saturating_sub(1) } else { cell + 1 };
            let goal = next == n - 1;
            let reward = match (goal, kind) {
                (false, _) => Reward::Fixed(0.0),
                (true, EnvKind::StochChain { p, .. }) => Reward::Coin { p },
                (true, _) => Reward::Fixed(1.0),
            };
            Outcome { next, reward, terminal: goal }
        }
        EnvKind::DeepCorridor { n } => {
            if action == 0 {
                Outcome { next: 0, reward: Reward::Fixed(0.0), terminal: false }
            } else if cell + 1 == n {
                Outcome { next: cell, reward: Reward::Fixed(1.0), terminal: true }
            } else {
                Outcome { next: cell + 1, reward: Reward::Fixed(0.0), terminal: false }
            }
        }
        EnvKind::CliffGrid { width, height } => {
            let (x, y) = (cell % width, cell / width);
            let (nx, ny) = match action {
                0 => (x, y.saturating_sub(1)),
                1 => ((x + 1).min(width - 1), y),
                2 => (x, (y + 1).min(height - 1)),
                _ => (x.saturating_sub(1), y),
            };
            let next = ny * width + nx;
            let bottom = ny == height - 1;
            if bottom && nx == width - 1 {
                Outcome { next, reward: Reward::Fixed(CLIFF_GOAL_REWARD), terminal: true }
            } else if bottom && nx > 0 {
                Outcome { next, reward: Reward::Fixed(CLIFF_FALL_REWARD), terminal: true }
            } else {
                Outcome { next, reward: Reward::Fixed(CLIFF_STEP_REWARD), terminal: false }
            }
        }
    }
}

/// Exact model `⟨S, A, T, r, γ⟩` of an environment, ignoring the step cap.
///
/// Terminal transitions lead to a zero-reward absorbing state.
#[derive(Debug, Clone)]
pub struct TabularModel {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a]` lists `(s', probability)`.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    /// Expected immediate reward `r(s, a)`.
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl TabularModel {
    /// Model of `kind`; `clip` applies reward clipping to the expected
    /// rewards of each outcome.
    pub fn from_kind(kind: EnvKind, gamma: f64, clip: Option<(f64, f64)>) -> Self {
        let cells = kind.observation_dim();
        let absorbing = cells;
        let n_states = cells + 1;
        let n_actions = kind.action_count();
        let clip = |r: f64| clip.map_or(r, |(lo, hi)| clip_reward(r, lo, hi));
        let mut transitions = vec![vec![Vec::new(); n_actions]; n_states];
        let mut rewards = vec![vec![0.0; n_actions]; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                if s == absorbing || is_terminal_cell(kind, s) {
                    transitions[s][a].push((absorbing, 1.0));
                    continue;
                }
                let out = transition(kind, s, a);
                let next = if out.terminal { absorbing } else { out.next };
                transitions[s][a].push((next, 1.0));
                rewards[s][a] = match out.reward {
                    Reward::Fixed(r) => clip(r),
                    Reward::Coin { p } => p * clip(1.0) + (1.0 - p) * clip(-1.0),
                };
            }
        }
        Self { n_states, n_actions, transitions, rewards, gamma }
    }

    /// Checks that every transition row is a probability vector.
    pub fn validate(&self) -> Result<()> {
        for (s, row) in self.transitions.iter().enumerate() {
            for (a, outs) in row.iter().enumerate() {
                let total: f64 = outs.iter().map(|(_, p)| p).sum();
                if (total - 1.0).abs() > 1e-9 || outs.iter().any(|&(t, p)| t >= self.n_states || p < 0.0) {
                    return Err(Error::Config(format!("transition row ({s}, {a}) is not a distribution")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("discount {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }

    /// Exact expected undiscounted return over `horizon` steps from `start`
    /// under a stochastic policy `pi(s, a)`.
    pub fn horizon_return(&self, start: usize, horizon: usize, pi: impl Fn(usize, usize) -> f64) -> f64 {
        let mut value = vec![0.0; self.n_states];
        for _ in 0..horizon {
            let next: Vec<f64> = (0..self.n_states)
                .map(|s| {
                    (0..self.n_actions)
                        .map(|a| {
                            let w = pi(s, a);
                            if w == 0.0 {
                                return 0.0;
                            }
                            let cont: f64 = self.transitions[s][a].iter().map(|&(t, p)| p * value[t]).sum();
                            w * (self.rewards[s][a] + cont)
                        })
                        .sum()
                })
                .collect();
            value = next;
        }
        value[start]
    }
}

fn is_terminal_cell(kind: EnvKind, cell: usize) -> bool {
    match kind {
        EnvKind::Chain { n } | EnvKind::StochChain { n, .. } => cell == n - 1,
        EnvKind::CliffGrid { width, height } => cell / width == height - 1 && cell % width > 0,
        EnvKind::DeepCorridor { .. } => false,
    }
}

/// Action values per `(state, action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Greedy action per state, ties broken toward the lowest index.
    pub fn greedy_policy(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| argmax(self.row(s))).collect()
    }
}

/// Index of the largest element, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

const VALUE_ITERATION_CAP: usize = 100_000;

/// Iterates the Bellman optimality operator until the sup-norm residual
/// drops below `tol`.
pub fn value_iteration(model: &TabularModel, tol: f64) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(Error::Usage(format!("tolerance must be positive, got {tol}")));
    }
    model.validate()?;
    let (ns, na) = (model.n_states, model.n_actions);
    let mut q = vec![0.0; ns * na];
    let mut residual = f64::INFINITY;
    for _ in 0..VALUE_ITERATION_CAP {
        let v: Vec<f64> =
            (0..ns).map(|s| q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        residual = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let cont: f64 = model.transitions[s][a].iter().map(|&(t, p)| p * v[t]).sum();
                let new = model.rewards[s][a] + model.gamma * cont;
                residual = f64::max(residual, (new - q[s * na + a]).abs());
                q[s * na + a] = new;
            }
        }
        if residual < tol {
            return Ok(QTable { n_states: ns, n_actions: na, values: q });
        }
    }
    Err(Error::NonConvergence { iterations: VALUE_ITERATION_CAP, residual })
}
