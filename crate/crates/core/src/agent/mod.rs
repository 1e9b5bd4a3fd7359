//! Constrained dueling double Q-learning and its penalty baselines.

pub mod optim;
pub mod replay;
pub mod rollout;
pub mod train;

use rand::Rng;

use crate::neural::{HeadKind, NetworkConfig};

pub use train::{evaluate, run_training, Checkpoint, CurveRow, Learner, TrainConfig, TrainOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentKind {
    /// Safe-set masking, dueling head, double-Q target.
    PfCd3q,
    /// Safe-set masking, plain head, vanilla target.
    PfDqn,
    /// Unmasked with a fatigue penalty, plain head, vanilla target.
    Dqn,
    /// Unmasked with a fatigue penalty, dueling head, double-Q target.
    D3qn,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::PfCd3q, AgentKind::PfDqn, AgentKind::Dqn, AgentKind::D3qn];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::PfCd3q => "pf-cd3q",
            AgentKind::PfDqn => "pf-dqn",
            AgentKind::Dqn => "dqn",
            AgentKind::D3qn => "d3qn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }

    pub fn masked(self) -> bool {
        matches!(self, AgentKind::PfCd3q | AgentKind::PfDqn)
    }

    pub fn double(self) -> bool {
        matches!(self, AgentKind::PfCd3q | AgentKind::D3qn)
    }

    pub fn head(self) -> HeadKind {
        if self.double() {
            HeadKind::Dueling
        } else {
            HeadKind::Plain
        }
    }

    /// Network configuration with this kind's head.
    pub fn network(self, base: &NetworkConfig) -> NetworkConfig {
        NetworkConfig { head: self.head(), ..base.clone() }
    }
}

/// Uniform choice among the allowed actions.
pub fn random_masked_action<R: Rng>(mask: &[bool], rng: &mut R) -> usize {
    let allowed: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    allowed[rng.gen_range(0..allowed.len())]
}

/// Argmax of `q` over allowed actions; ties go to the lowest index.
pub fn select_action(q: &[f64], mask: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in q.iter().zip(mask).enumerate() {
        if m && best.map_or(true, |b| v > q[b]) {
            best = Some(i);
        }
    }
    best.expect("mask allows at least one action")
}

/// Bootstrapped target `r + discount * Q_target(s', a*)` where `a*` is the
/// masked argmax of the online values (double) or of the target values
/// (vanilla). A zero discount marks a terminal transition.
pub fn td_target(reward: f64, discount: f64, online_next: &[f64], target_next: &[f64], next_mask: &[bool], double: bool) -> f64 {
    if discount == 0.0 {
        return reward;
    }
    let a = select_action(if double { online_next } else { target_next }, next_mask);
    reward + discount * target_next[a]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn masked_argmax_examples() {
        assert_eq!(select_action(&[5.0, 9.0, 1.0], &[false, false, true]), 2);
        assert_eq!(select_action(&[5.0, 9.0, 1.0], &[true, false, true]), 0);
        assert_eq!(select_action(&[2.0, 2.0, 2.0], &[false, true, true]), 1);
    }

    #[test]
    fn td_target_examples() {
        assert_eq!(td_target(2.0, 0.0, &[1.0], &[1.0], &[true], true), 2.0);
        let y = td_target(1.0, 0.99, &[0.2, 0.5], &[0.3, 7.0], &[true, false], true);
        assert!((y - 1.297).abs() < 1e-12);
        // Double-Q picks by the online values, vanilla by the target values.
        assert_eq!(td_target(0.0, 1.0, &[1.0, 0.0], &[0.0, 1.0], &[true, true], true), 0.0);
        assert_eq!(td_target(0.0, 1.0, &[1.0, 0.0], &[0.0, 1.0], &[true, true], false), 1.0);
    }

    proptest! {
        #[test]
        fn selection_is_safe_and_shift_invariant(q in proptest::collection::vec(-10.0f64..10.0, 2..9), bits in proptest::collection::vec(any::<bool>(), 9), c in -100.0f64..100.0) {
            let mut mask: Vec<bool> = bits[..q.len()].to_vec();
            *mask.last_mut().unwrap() = true;
            let a = select_action(&q, &mask);
            prop_assert!(mask[a]);
            let shifted: Vec<f64> = q.iter().map(|v| v + c).collect();
            let b = select_action(&shifted, &mask);
            prop_assert!(q[a] == q[b]);
        }

        #[test]
        fn equal_networks_reduce_to_masked_max(q in proptest::collection::vec(-10.0f64..10.0, 2..9), bits in proptest::collection::vec(any::<bool>(), 9), r in -1.0f64..1.0) {
            let mut mask: Vec<bool> = bits[..q.len()].to_vec();
            mask[0] = true;
            let y = td_target(r, 0.9, &q, &q, &mask, true);
            let m = q.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((y - (r + 0.9 * m)).abs() < 1e-12);
        }

        #[test]
        fn target_ignores_unsafe_actions(q in proptest::collection::vec(-10.0f64..10.0, 3..9), big in 100.0f64..1000.0) {
            let mut mask = vec![true; q.len()];
            mask[1] = false;
            let mut on = q.clone();
            on[1] = big;
            let mut tg = q.clone();
            tg[1] = big;
            let y = td_target(0.0, 1.0, &on, &tg, &mask, true);
            prop_assert!(y < big);
        }
    }
}
