//! The integrated agent: acting, the multi-step distributional double-Q
//! update with prioritized replay, and the training loop, with switches to
//! remove any one component.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::distributional::{kl_loss, softmax, Support};
use crate::envs::{argmax, clip_reward, EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::network::{AdamState, Architecture, NetworkParams};
use crate::replay::{NStepAccumulator, PrioritizedBuffer, SampledBatch};
use crate::rng::{self, Rng, Stream};

/// A component that can be removed from the full agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoDouble,
    NoPriority,
    NoDueling,
    NoMultistep,
    NoDistributional,
    NoNoisy,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoDouble,
        Ablation::NoPriority,
        Ablation::NoDueling,
        Ablation::NoMultistep,
        Ablation::NoDistributional,
        Ablation::NoNoisy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoDouble => "no_double",
            Ablation::NoPriority => "no_priority",
            Ablation::NoDueling => "no_dueling",
            Ablation::NoMultistep => "no_multistep",
            Ablation::NoDistributional => "no_distributional",
            Ablation::NoNoisy => "no_noisy",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown component `{s}`; valid names: {}", valid.join(", ")))
        })
    }
}

/// `[agent]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub n_step: usize,
    pub gamma: f64,
    pub batch_size: usize,
    /// Environment steps between learning updates.
    pub replay_period: u64,
    /// Environment steps before the first update.
    pub min_history: u64,
    /// Environment steps between target-network copies.
    pub target_period: u64,
    pub training_budget: u64,
    /// ε-greedy schedule, used only without noisy layers.
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    pub clip_rewards: bool,
    pub reward_clip_min: f64,
    pub reward_clip_max: f64,
    pub ablation: BTreeSet<Ablation>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            n_step: 3,
            gamma: 0.99,
            batch_size: 32,
            replay_period: 4,
            min_history: 500,
            target_period: 200,
            training_budget: 50_000,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_anneal_steps: 5_000,
            clip_rewards: true,
            reward_clip_min: -1.0,
            reward_clip_max: 1.0,
            ablation: BTreeSet::new(),
        }
    }
}

/// `[replay]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub capacity: usize,
    /// Priority exponent ω.
    pub omega: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub priority_floor: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 50_000,
            omega: 0.5,
            beta_start: 0.4,
            beta_end: 1.0,
            priority_floor: crate::replay::DEFAULT_PRIORITY_FLOOR,
        }
    }
}

/// `[network]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub stream_hidden: usize,
    pub sigma0: f64,
    pub learning_rate: f64,
    pub adam_epsilon: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], stream_hidden: 0, sigma0: 0.5, learning_rate: 1e-3, adam_epsilon: 1.5e-4 }
    }
}

/// `[distributional]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributionalConfig {
    pub n_atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for DistributionalConfig {
    fn default() -> Self {
        Self { n_atoms: 51, v_min: -10.0, v_max: 10.0 }
    }
}

/// Complete agent hyper-parameter set. `Default` is the desk-scale preset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RainbowConfig {
    pub agent: AgentConfig,
    pub replay: ReplayConfig,
    pub network: NetworkConfig,
    pub distributional: DistributionalConfig,
}

impl RainbowConfig {
    /// Table values at Atari scale, with frame counts divided by the action
    /// repeat of 4.
    pub fn atari() -> Self {
        Self {
            agent: AgentConfig {
                min_history: 20_000,
                target_period: 8_000,
                training_budget: 50_000_000,
                epsilon_anneal_steps: 62_500,
                ..AgentConfig::default()
            },
            replay: ReplayConfig { capacity: 1_000_000, ..ReplayConfig::default() },
            network: NetworkConfig {
                hidden: vec![512],
                stream_hidden: 512,
                learning_rate: 0.0000625,
                ..NetworkConfig::default()
            },
            distributional: DistributionalConfig::default(),
        }
    }

    pub fn has(&self, ablation: Ablation) -> bool {
        self.agent.ablation.contains(&ablation)
    }

    pub fn with_ablations(mut self, ablations: impl IntoIterator<Item = Ablation>) -> Self {
        self.agent.ablation.extend(ablations);
        self
    }

    pub fn effective_n_step(&self) -> usize {
        if self.has(Ablation::NoMultistep) {
            1
        } else {
            self.agent.n_step
        }
    }

    /// Checks every constraint, naming the offending key.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let a = &self.agent;
        let r = &self.replay;
        let n = &self.network;
        let d = &self.distributional;
        let fail = |k: &str, m: String| Err((k.to_string(), m));
        if a.n_step < 1 {
            return fail("agent.n_step", "must be at least 1".into());
        }
        if !(a.gamma > 0.0 && a.gamma <= 1.0) {
            return fail("agent.gamma", format!("must lie in (0, 1], got {}", a.gamma));
        }
        if a.batch_size < 1 {
            return fail("agent.batch_size", "must be at least 1".into());
        }
        if a.replay_period < 1 {
            return fail("agent.replay_period", "must be at least 1".into());
        }
        if a.target_period < 1 {
            return fail("agent.target_period", "must be at least 1".into());
        }
        if a.training_budget < 1 {
            return fail("agent.training_budget", "must be at least 1".into());
        }
        for (k, v) in [("agent.epsilon_start", a.epsilon_start), ("agent.epsilon_end", a.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(k, format!("must lie in [0, 1], got {v}"));
            }
        }
        if !(a.reward_clip_min <= a.reward_clip_max) {
            return fail("agent.reward_clip_min", "must not exceed agent.reward_clip_max".into());
        }
        if r.capacity < a.batch_size {
            return fail("replay.capacity", format!("must hold at least one batch ({})", a.batch_size));
        }
        if !(r.omega >= 0.0) {
            return fail("replay.omega", format!("must be non-negative, got {}", r.omega));
        }
        if !(0.0 <= r.beta_start && r.beta_start <= r.beta_end && r.beta_end <= 1.0) {
            return fail(
                "replay.beta_start",
                format!("need 0 ≤ beta_start ≤ beta_end ≤ 1, got {} → {}", r.beta_start, r.beta_end),
            );
        }
        if !(r.priority_floor > 0.0) {
            return fail("replay.priority_floor", "must be positive".into());
        }
        if n.hidden.iter().any(|&w| w == 0) {
            return fail("network.hidden", "layer widths must be positive".into());
        }
        if !(n.sigma0 > 0.0) {
            return fail("network.sigma0", format!("must be positive, got {}", n.sigma0));
        }
        if !(n.learning_rate > 0.0) {
            return fail("network.learning_rate", "must be positive".into());
        }
        if !(n.adam_epsilon > 0.0) {
            return fail("network.adam_epsilon", "must be positive".into());
        }
        if d.n_atoms < 2 {
            return fail("distributional.n_atoms", "need at least 2 atoms".into());
        }
        if !(d.v_min < d.v_max) {
            return fail("distributional.v_min", "must be below distributional.v_max".into());
        }
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        self.validate().map_err(|(k, m)| Error::Config(format!("{k}: {m}")))
    }

    pub fn architecture(&self, env: &EnvSpec) -> Architecture {
        Architecture {
            observation_dim: env.observation_dim,
            n_actions: env.action_count,
            hidden: self.network.hidden.clone(),
            stream_hidden: self.network.stream_hidden,
            n_atoms: if self.has(Ablation::NoDistributional) { 1 } else { self.distributional.n_atoms },
            dueling: !self.has(Ablation::NoDueling),
            noisy: !self.has(Ablation::NoNoisy),
            sigma0: self.network.sigma0,
        }
    }

    /// The support, or `None` for the scalar head.
    pub fn support(&self) -> Result<Option<Support>> {
        if self.has(Ablation::NoDistributional) {
            return Ok(None);
        }
        let d = &self.distributional;
        Support::new(d.n_atoms, d.v_min, d.v_max).map(Some)
    }

    /// Importance-sampling exponent after `env_steps` steps.
    pub fn beta(&self, env_steps: u64) -> f64 {
        let frac = (env_steps as f64 / self.agent.training_budget as f64).min(1.0);
        self.replay.beta_start + (self.replay.beta_end - self.replay.beta_start) * frac
    }

    /// Exploration rate after `env_steps` steps.
    pub fn epsilon(&self, env_steps: u64) -> f64 {
        let a = &self.agent;
        let frac =
            if a.epsilon_anneal_steps == 0 { 1.0 } else { (env_steps as f64 / a.epsilon_anneal_steps as f64).min(1.0) };
        a.epsilon_start + (a.epsilon_end - a.epsilon_start) * frac
    }
}

/// Turns network outputs into action values: means over the support for the
/// distributional head, raw outputs for the scalar head.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueHead {
    pub support: Option<Support>,
}

impl ValueHead {
    pub fn action_values(&self, logits: &Array2<f64>) -> Vec<f64> {
        logits.rows().into_iter().map(|row| self.value_of(row)).collect()
    }

    fn value_of(&self, row: ArrayView1<f64>) -> f64 {
        match &self.support {
            Some(support) => {
                let p = softmax(row.as_slice().expect("contiguous row"));
                support.mean(&p)
            }
            None => row[0],
        }
    }

    pub fn q_values(&self, params: &NetworkParams, obs: &[f64], noise_on: bool) -> Result<Vec<f64>> {
        Ok(self.action_values(&params.logits(obs, noise_on)?))
    }

    pub fn greedy(&self, params: &NetworkParams, obs: &[f64], noise_on: bool) -> Result<usize> {
        Ok(argmax(&self.q_values(params, obs, noise_on)?))
    }
}

/// Chooses the bootstrap action at `s_next`: selected by the online network
/// when `double`, by the target network otherwise.
pub fn bootstrap_action(
    head: &ValueHead,
    online_logits: Option<&Array2<f64>>,
    target_logits: &Array2<f64>,
    double: bool,
) -> usize {
    match (double, online_logits) {
        (true, Some(online)) => argmax(&head.action_values(online)),
        _ => argmax(&head.action_values(target_logits)),
    }
}

/// Outcome of one learning update.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnReport {
    /// Importance-weighted batch mean of the per-sample losses.
    pub loss: f64,
    pub indices: Vec<usize>,
    pub is_weights: Vec<f64>,
    /// Per-sample KL (or squared TD) losses before weighting.
    pub sample_losses: Vec<f64>,
}

/// Agent state: networks, optimizer, replay and random streams.
#[derive(Debug, Clone)]
pub struct Agent {
    pub(crate) config: RainbowConfig,
    pub(crate) head: ValueHead,
    pub online: NetworkParams,
    pub target: NetworkParams,
    pub optimizer: AdamState,
    pub buffer: PrioritizedBuffer,
    pub nstep: NStepAccumulator,
    pub env_steps: u64,
    pub learn_steps: u64,
    pub(crate) action_rng: Rng,
    pub(crate) noise_rng: Rng,
    pub(crate) replay_rng: Rng,
}

impl Agent {
    pub fn new(config: &RainbowConfig, env: &EnvSpec, seed: u64) -> Result<Self> {
        config.check()?;
        let head = ValueHead { support: config.support()? };
        let mut online = NetworkParams::init(config.architecture(env), &mut rng::stream(seed, Stream::Params))?;
        let target = online.clone();
        let optimizer = AdamState::new(&mut online, config.network.learning_rate, config.network.adam_epsilon);
        let r = &config.replay;
        Ok(Self {
            config: config.clone(),
            head,
            online,
            target,
            optimizer,
            buffer: PrioritizedBuffer::new(r.capacity, r.omega, r.priority_floor)?,
            nstep: NStepAccumulator::new(config.effective_n_step())?,
            env_steps: 0,
            learn_steps: 0,
            action_rng: rng::stream(seed, Stream::Action),
            noise_rng: rng::stream(seed, Stream::Noise),
            replay_rng: rng::stream(seed, Stream::Replay),
        })
    }

    pub fn config(&self) -> &RainbowConfig {
        &self.config
    }

    pub fn head(&self) -> &ValueHead {
        &self.head
    }

    fn noisy(&self) -> bool {
        !self.config.has(Ablation::NoNoisy)
    }

    /// Acting policy: greedy on resampled noisy values, or ε-greedy on
    /// deterministic values when noisy layers are ablated.
    pub fn select_action(&mut self, obs: &[f64]) -> Result<usize> {
        if self.noisy() {
            self.online.resample_noise(&mut self.noise_rng);
            return self.head.greedy(&self.online, obs, true);
        }
        let eps = self.config.epsilon(self.env_steps);
        self.epsilon_greedy(obs, eps)
    }

    pub fn epsilon_greedy(&mut self, obs: &[f64], epsilon: f64) -> Result<usize> {
        if epsilon > 0.0 && self.action_rng.random::<f64>() < epsilon {
            let n = self.online.arch.n_actions;
            return Ok(self.action_rng.random_range(0..n));
        }
        self.head.greedy(&self.online, obs, false)
    }

    /// Feeds one raw step through the n-step window into replay; flushes the
    /// window on terminal steps.
    pub fn observe(
        &mut self,
        obs: Vec<f64>,
        action: usize,
        reward: f64,
        discount: f64,
        next_obs: Vec<f64>,
    ) -> Result<()> {
        let terminal = discount == 0.0;
        if let Some(t) = self.nstep.push(obs, action, reward, discount, next_obs)? {
            self.buffer.insert(t);
        }
        if terminal {
            for t in self.nstep.flush_terminal()? {
                self.buffer.insert(t);
            }
        }
        Ok(())
    }

    pub fn ready_to_learn(&self) -> bool {
        self.env_steps >= self.config.agent.min_history && self.buffer.len() >= self.config.agent.batch_size
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.sync_from(&self.online)
    }

    fn sample(&mut self) -> Result<SampledBatch> {
        let b = self.config.agent.batch_size;
        if self.config.has(Ablation::NoPriority) {
            self.buffer.sample_uniform(b, &mut self.replay_rng)
        } else {
            let beta = self.config.beta(self.env_steps);
            self.buffer.sample(b, beta, &mut self.replay_rng)
        }
    }

    /// One prioritized minibatch update of the online network.
    pub fn learn_step(&mut self) -> Result<LearnReport> {
        let batch = self.sample()?;
        self.learn_on(batch)
    }

    /// Update on an explicit batch of buffer slots.
    pub fn learn_on(&mut self, batch: SampledBatch) -> Result<LearnReport> {
        let noisy = self.noisy();
        if noisy {
            self.online.resample_noise(&mut self.noise_rng);
            self.target.resample_noise(&mut self.noise_rng);
        }
        let double = !self.config.has(Ablation::NoDouble);
        let b = batch.indices.len();
        let obs_dim = self.online.arch.observation_dim;
        let mut states = Array2::zeros((b, obs_dim));
        let mut next_states = Array2::zeros((b, obs_dim));
        for (j, &i) in batch.indices.iter().enumerate() {
            let t = self.buffer.get(i);
            states.row_mut(j).assign(&ArrayView1::from(&t.state[..]));
            next_states.row_mut(j).assign(&ArrayView1::from(&t.bootstrap_state[..]));
        }
        let tape = self.online.forward_tape(&states, noisy)?;
        let next_target = self.target.forward_tape(&next_states, noisy)?.logits;
        let next_online = if double { Some(self.online.forward_tape(&next_states, noisy)?.logits) } else { None };

        let mut dlogits = Array3::zeros(tape.logits.dim());
        let mut sample_losses = Vec::with_capacity(b);
        let mut priority_signal = Vec::with_capacity(b);
        let mut weighted = 0.0;
        for (j, &i) in batch.indices.iter().enumerate() {
            let t = self.buffer.get(i);
            let target_j = next_target.index_axis(ndarray::Axis(0), j).to_owned();
            let online_j = next_online.as_ref().map(|l| l.index_axis(ndarray::Axis(0), j).to_owned());
            let a_star = bootstrap_action(&self.head, online_j.as_ref(), &target_j, double);
            let scale = batch.is_weights[j] / b as f64;
            let logits = tape.logits.slice(ndarray::s![j, t.action, ..]).to_vec();
            let loss = match &self.head.support {
                Some(support) => {
                    let next_probs = softmax(target_j.row(a_star).as_slice().expect("contiguous row"));
                    let m = support.build_target(t.n_step_return, t.n_step_discount, &next_probs)?;
                    let (loss, grad) = kl_loss(&m.probs, &logits)?;
                    for (k, g) in grad.into_iter().enumerate() {
                        dlogits[[j, t.action, k]] = g * scale;
                    }
                    priority_signal.push(loss);
                    loss
                }
                None => {
                    let bootstrap = if t.n_step_discount == 0.0 { 0.0 } else { target_j[[a_star, 0]] };
                    let td = t.n_step_return + t.n_step_discount * bootstrap - logits[0];
                    dlogits[[j, t.action, 0]] = -2.0 * td * scale;
                    priority_signal.push(td.abs());
                    td * td
                }
            };
            weighted += batch.is_weights[j] * loss;
            sample_losses.push(loss);
        }
        let grads = self.online.backward(&tape, &dlogits)?;
        self.optimizer.step(&mut self.online, &grads)?;
        if !self.config.has(Ablation::NoPriority) {
            self.buffer.update_priorities(&batch.indices, &priority_signal)?;
        }
        self.learn_steps += 1;
        Ok(LearnReport {
            loss: weighted / b as f64,
            indices: batch.indices,
            is_weights: batch.is_weights,
            sample_losses,
        })
    }
}

/// Greedy evaluation of one environment with noise off and ε = 0.
pub fn evaluate_env(
    head: &ValueHead,
    params: &NetworkParams,
    env: &EnvSpec,
    gamma: f64,
    episodes: usize,
    seed: u64,
) -> Result<EnvScore> {
    if params.arch.observation_dim != env.observation_dim || params.arch.n_actions != env.action_count {
        return Err(Error::Dimension(format!(
            "network with {} inputs and {} actions does not fit {}",
            params.arch.observation_dim,
            params.arch.n_actions,
            env.name()
        )));
    }
    let mc = env.policy_return(gamma, episodes, seed, |obs, _| {
        head.greedy(params, obs, false).expect("shapes checked above")
    })?;
    Ok(EnvScore { env: env.name(), mean_return: mc.mean, normalized: env.normalize(mc.mean)? })
}

/// Score on one environment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvScore {
    pub env: String,
    pub mean_return: f64,
    pub normalized: f64,
}

/// Scores over a suite, with the median normalized score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteScore {
    pub per_env: Vec<EnvScore>,
    pub median_normalized: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Evaluates each `(env, params)` pair greedily and aggregates the median
/// normalized score.
pub fn evaluate(
    head: &ValueHead,
    suite: &[(&EnvSpec, &NetworkParams)],
    gamma: f64,
    episodes_per_env: usize,
    seed: u64,
) -> Result<SuiteScore> {
    if episodes_per_env == 0 {
        return Err(Error::Usage("evaluation needs at least one episode per environment".into()));
    }
    let per_env = suite
        .iter()
        .map(|(env, params)| evaluate_env(head, params, env, gamma, episodes_per_env, seed))
        .collect::<Result<Vec<_>>>()?;
    let normalized: Vec<f64> = per_env.iter().map(|s| s.normalized).collect();
    Ok(SuiteScore { median_normalized: median(&normalized), per_env })
}

/// Evaluation cadence inside [`Trainer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSchedule {
    pub period: u64,
    pub episodes: usize,
}

/// One evaluation of a single-environment run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub env_step: u64,
    pub mean_return: f64,
    pub normalized: f64,
    /// Mean learning loss since the previous point; NaN when no update ran.
    pub batch_mean_loss: f64,
    pub learn_steps: u64,
}

/// Training loop for one agent on one environment.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub agent: Agent,
    pub env: Environment,
    pub(crate) spec: EnvSpec,
    pub(crate) seed: u64,
    pub(crate) schedule: EvalSchedule,
    pub(crate) obs: Vec<f64>,
    pub(crate) loss_sum: f64,
    pub(crate) loss_count: u64,
    pub log: Vec<EvalPoint>,
}

impl Trainer {
    pub fn new(config: &RainbowConfig, spec: &EnvSpec, schedule: EvalSchedule, seed: u64) -> Result<Self> {
        let mut trainer = Self::unevaluated(config, spec, schedule, seed)?;
        trainer.record()?;
        Ok(trainer)
    }

    /// Fresh state without the step-0 evaluation, for checkpoint restore.
    pub(crate) fn unevaluated(
        config: &RainbowConfig,
        spec: &EnvSpec,
        schedule: EvalSchedule,
        seed: u64,
    ) -> Result<Self> {
        if schedule.period == 0 || schedule.episodes == 0 {
            return Err(Error::Config("evaluation period and episode count must be positive".into()));
        }
        let agent = Agent::new(config, spec, seed)?;
        let mut env = Environment::new(spec.clone(), config.agent.gamma)?;
        let obs = env.reset(seed);
        Ok(Self { agent, env, spec: spec.clone(), seed, schedule, obs, loss_sum: 0.0, loss_count: 0, log: Vec::new() })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn budget(&self) -> u64 {
        self.agent.config.agent.training_budget
    }

    pub fn done(&self) -> bool {
        self.agent.env_steps >= self.budget()
    }

    fn record(&mut self) -> Result<()> {
        let a = &self.agent;
        let eval_seed = self.seed ^ a.env_steps.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let score =
            evaluate_env(&a.head, &a.online, &self.spec, a.config.agent.gamma, self.schedule.episodes, eval_seed)?;
        let loss = if self.loss_count == 0 { f64::NAN } else { self.loss_sum / self.loss_count as f64 };
        self.log.push(EvalPoint {
            env_step: a.env_steps,
            mean_return: score.mean_return,
            normalized: score.normalized,
            batch_mean_loss: loss,
            learn_steps: a.learn_steps,
        });
        self.loss_sum = 0.0;
        self.loss_count = 0;
        Ok(())
    }

    /// Advances one environment step, learning, syncing and evaluating on
    /// schedule.
    pub fn step(&mut self) -> Result<()> {
        if self.done() {
            return Err(Error::Usage("training budget exhausted".into()));
        }
        let action = self.agent.select_action(&self.obs)?;
        let step = self.env.step(action)?;
        let cfg = &self.agent.config.agent;
        let reward = if cfg.clip_rewards {
            clip_reward(step.reward, cfg.reward_clip_min, cfg.reward_clip_max)
        } else {
            step.reward
        };
        let obs = std::mem::take(&mut self.obs);
        self.agent.observe(obs, action, reward, step.discount, step.observation.clone())?;
        self.obs = if step.terminal { self.env.restart() } else { step.observation };
        self.agent.env_steps += 1;

        let t = self.agent.env_steps;
        let cfg = &self.agent.config.agent;
        if t % cfg.replay_period == 0 && self.agent.ready_to_learn() {
            let report = self.agent.learn_step()?;
            self.loss_sum += report.loss;
            self.loss_count += 1;
        }
        if t % self.agent.config.agent.target_period == 0 {
            self.agent.sync_target()?;
        }
        if t % self.schedule.period == 0 || t == self.budget() {
            self.record()?;
        }
        Ok(())
    }

    pub fn run_until(&mut self, env_step: u64) -> Result<()> {
        let stop = env_step.min(self.budget());
        while self.agent.env_steps < stop {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.budget())
    }

    /// Greedy action per environment cell with noise off.
    pub fn greedy_policy(&self) -> Result<Vec<usize>> {
        (0..self.spec.observation_dim)
            .map(|s| {
                let obs = crate::envs::one_hot(self.spec.observation_dim, s);
                self.agent.head.greedy(&self.agent.online, &obs, false)
            })
            .collect()
    }
}

/// Trains one agent on one environment for the configured budget.
pub fn train(config: &RainbowConfig, env: &EnvSpec, schedule: EvalSchedule, seed: u64) -> Result<Trainer> {
    let mut trainer = Trainer::new(config, env, schedule, seed)?;
    trainer.run()?;
    Ok(trainer)
}
