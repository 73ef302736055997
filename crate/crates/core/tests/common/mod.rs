#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rainbow_lab::agent::{Ablation, Agent, RainbowConfig};
use rainbow_lab::distributional::kl_loss;
use rainbow_lab::envs::one_hot;
use rainbow_lab::envs::{value_iteration, EnvSpec, Environment, TabularModel};
use rainbow_lab::network::{NetworkParams, ADAM_BETA1, ADAM_BETA2};
use rainbow_lab::replay::NStepAccumulator;

/// `KL(target || softmax(logits[action]))` for a single state.
pub fn kl_at(net: &NetworkParams, state: &[f64], action: usize, target: &[f64], noise_on: bool) -> (f64, Vec<bool>) {
    let states = Array2::from_shape_vec((1, state.len()), state.to_vec()).unwrap();
    let tape = net.forward_tape(&states, noise_on).unwrap();
    let loss = kl_loss(target, tape.logits.slice(ndarray::s![0, action, ..]).as_slice().unwrap()).unwrap().0;
    (loss, tape.active_units())
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters whose stencil crossed a ReLU kink, where the loss is not
    /// differentiable along the probe.
    pub skipped: usize,
}

/// Largest relative error between backprop and central differences over
/// every learnable parameter. Gradients below 1e-7 on both sides are
/// compared absolutely.
pub fn gradient_check(
    net: &NetworkParams,
    state: &[f64],
    action: usize,
    target: &[f64],
    noise_on: bool,
) -> GradientCheck {
    let states = Array2::from_shape_vec((1, state.len()), state.to_vec()).unwrap();
    let tape = net.forward_tape(&states, noise_on).unwrap();
    let (_, grad) = kl_loss(target, tape.logits.slice(ndarray::s![0, action, ..]).as_slice().unwrap()).unwrap();
    let mut dlogits = Array3::zeros(tape.logits.dim());
    for (k, g) in grad.into_iter().enumerate() {
        dlogits[[0, action, k]] = g;
    }
    let pattern = tape.active_units();
    let analytic: Vec<Vec<f64>> =
        net.backward(&tape, &dlogits).unwrap().tensors().into_iter().map(<[f64]>::to_vec).collect();

    let h = 1e-4;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for (k, tensor) in analytic.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let orig = probe.learnable_mut()[k][i];
            let mut smooth = true;
            let mut at = |dx: f64| {
                probe.learnable_mut()[k][i] = orig + dx;
                let (loss, units) = kl_at(&probe, state, action, target, noise_on);
                smooth &= units == pattern;
                loss
            };
            // Fourth-order central stencil keeps roundoff well below the tolerance.
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            probe.learnable_mut()[k][i] = orig;
            if !smooth {
                skipped += 1;
                continue;
            }
            checked += 1;
            let scale = a.abs().max(numeric.abs());
            let err = if scale > 1e-7 {
                (a - numeric).abs() / scale
            } else if (a - numeric).abs() < 1e-9 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(err);
        }
    }
    GradientCheck { max_relative_error: worst, checked, skipped }
}

/// `Σ_{k<n} γ^(k) R_{t+k+1}` with `γ^(k)` the product of the first `k`
/// discounts, stopping at a terminal step.
pub fn nstep_oracle(rewards: &[f64], discounts: &[f64], t: usize, n: usize) -> (f64, f64, usize) {
    let mut ret = 0.0;
    let mut disc = 1.0;
    let mut steps = 0;
    for k in t..(t + n).min(rewards.len()) {
        ret += disc * rewards[k];
        disc *= discounts[k];
        steps += 1;
        if discounts[k] == 0.0 {
            break;
        }
    }
    (ret, disc, steps)
}

/// Follows the value-iteration greedy policy from the start cell and checks
/// that `policy` agrees in every visited cell.
pub fn matches_optimal_rollout(spec: &EnvSpec, gamma: f64, policy: &[usize]) -> bool {
    let model = TabularModel::from_kind(spec.kind, gamma, None);
    let optimal = value_iteration(&model, 1e-10).unwrap().greedy_policy();
    let mut env = Environment::new(spec.clone(), gamma).unwrap();
    env.reset(0);
    loop {
        let s = env.state_index();
        if policy[s] != optimal[s] {
            return false;
        }
        if env.step(optimal[s]).unwrap().terminal {
            return true;
        }
    }
}

/// Feeds `rewards`/`discounts` through an accumulator, flushing after each
/// terminal, and describes the first transition that disagrees with
/// [`nstep_oracle`].
pub fn nstep_mismatch(rewards: &[f64], discounts: &[f64], n: usize) -> Option<String> {
    let len = rewards.len();
    let state = |t: usize| vec![t as f64];
    let mut acc = NStepAccumulator::new(n).unwrap();
    let mut emitted = Vec::new();
    for t in 0..len {
        if let Some(tr) = acc.push(state(t), t % 2, rewards[t], discounts[t], state(t + 1)).unwrap() {
            emitted.push(tr);
        }
        if discounts[t] == 0.0 {
            emitted.extend(acc.flush_terminal().unwrap());
        }
    }
    let expected: Vec<usize> =
        (0..len).filter(|&t| t + n <= len || (t..len.min(t + n)).any(|k| discounts[k] == 0.0)).collect();
    if emitted.len() != expected.len() {
        return Some(format!(
            "n={n}, discounts {discounts:?}: {} transitions, expected {}",
            emitted.len(),
            expected.len()
        ));
    }
    for (tr, &t) in emitted.iter().zip(&expected) {
        let (ret, disc, steps) = nstep_oracle(rewards, discounts, t, n);
        let ok = tr.state == state(t)
            && tr.action == t % 2
            && tr.steps == steps
            && (tr.n_step_return - ret).abs() <= 1e-12
            && (tr.n_step_discount - disc).abs() <= 1e-12
            && tr.bootstrap_state == state(t + steps);
        if !ok {
            return Some(format!(
                "n={n}, discounts {discounts:?}, t={t}: got {tr:?}, expected ({ret}, {disc}, {steps})"
            ));
        }
    }
    None
}

/// Runs one learn step of the fully ablated agent (scalar head, no noise,
/// no dueling, uniform replay, one-step targets bootstrapped with the
/// target network's max) on the two transitions of chain(2), and returns
/// the largest difference from the same step written out by hand:
/// `L = mean (r + γ max_a' Q̄(s', a') − Q(s, a))²` through a ReLU layer,
/// then one bias-corrected Adam step.
pub fn q_learning_update_error(seed: u64, hidden: usize) -> f64 {
    let gamma = 0.9;
    let mut config = RainbowConfig::default().with_ablations(Ablation::ALL);
    config.network.hidden = vec![hidden];
    config.agent.batch_size = 2;
    config.agent.gamma = gamma;
    config.agent.n_step = 1;
    config.replay.capacity = 8;
    config.network.learning_rate = 0.01;
    let spec = EnvSpec::parse("chain(2)", gamma).unwrap();
    let mut agent = Agent::new(&config, &spec, seed).unwrap();
    agent.observe(one_hot(2, 0), 0, 0.0, gamma, one_hot(2, 0)).unwrap();
    agent.observe(one_hot(2, 0), 1, 1.0, 0.0, one_hot(2, 1)).unwrap();

    let before = agent.online.clone();
    let (w1, b1) = (&before.encoder[0].weight, &before.encoder[0].bias);
    let (w2, b2) = (&before.advantage[0].weight, &before.advantage[0].bias);
    let q = |s: &[f64]| {
        let h: Vec<f64> = (0..hidden).map(|i| (w1.row(i).dot(&ndarray::aview1(s)) + b1[i]).max(0.0)).collect();
        let q: Vec<f64> = (0..2).map(|a| w2.row(a).dot(&ndarray::aview1(&h)) + b2[a]).collect();
        (h, q)
    };

    let report = agent.learn_step().unwrap();
    let bsz = report.indices.len() as f64;
    let mut gw1 = Array2::<f64>::zeros(w1.dim());
    let mut gb1 = vec![0.0; hidden];
    let mut gw2 = Array2::<f64>::zeros(w2.dim());
    let mut gb2 = vec![0.0; 2];
    let mut loss = 0.0;
    for (&i, &w) in report.indices.iter().zip(&report.is_weights) {
        assert_eq!(w, 1.0, "uniform replay has unit weights");
        let t = agent.buffer.get(i).clone();
        let (h, qs) = q(&t.state);
        let bootstrap = if t.n_step_discount == 0.0 {
            0.0
        } else {
            q(&t.bootstrap_state).1.into_iter().fold(f64::NEG_INFINITY, f64::max)
        };
        let td = t.n_step_return + t.n_step_discount * bootstrap - qs[t.action];
        loss += td * td / bsz;
        let g = -2.0 * td / bsz;
        for k in 0..hidden {
            gw2[[t.action, k]] += g * h[k];
            if h[k] > 0.0 {
                let dz = g * w2[[t.action, k]];
                for j in 0..2 {
                    gw1[[k, j]] += dz * t.state[j];
                }
                gb1[k] += dz;
            }
        }
        gb2[t.action] += g;
    }

    let (lr, eps) = (config.network.learning_rate, config.network.adam_epsilon);
    let adam = |theta: f64, g: f64| {
        let m_hat = (1.0 - ADAM_BETA1) * g / (1.0 - ADAM_BETA1);
        let v_hat = (1.0 - ADAM_BETA2) * g * g / (1.0 - ADAM_BETA2);
        theta - lr * m_hat / (v_hat.sqrt() + eps)
    };
    let after = &agent.online;
    let mut worst = (report.loss - loss).abs();
    let mut compare = |old: &[f64], grad: &[f64], new: &[f64]| {
        for ((t, g), n) in old.iter().zip(grad).zip(new) {
            worst = worst.max((adam(*t, *g) - n).abs());
        }
    };
    compare(w1.as_slice().unwrap(), gw1.as_slice().unwrap(), after.encoder[0].weight.as_slice().unwrap());
    compare(b1.as_slice().unwrap(), &gb1, after.encoder[0].bias.as_slice().unwrap());
    compare(w2.as_slice().unwrap(), gw2.as_slice().unwrap(), after.advantage[0].weight.as_slice().unwrap());
    compare(b2.as_slice().unwrap(), &gb2, after.advantage[0].bias.as_slice().unwrap());
    // Uniform replay leaves priorities untouched.
    if agent.buffer.priority(0) != 1.0 || agent.buffer.priority(1) != 1.0 {
        worst = f64::INFINITY;
    }
    worst
}
