//! Continuous trajectories and reward-to-go augmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One recorded episode: per-timestep states, actions and rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminal: bool,
}

impl RawTrajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    /// Checks the shared-length and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let t = self.rewards.len();
        if t == 0 {
            return Err(Error::InvalidInput("trajectory must have at least one timestep".into()));
        }
        if self.states.len() != t || self.actions.len() != t {
            return Err(Error::ShapeMismatch(format!(
                "states ({}), actions ({}) and rewards ({}) must share one length",
                self.states.len(),
                self.actions.len(),
                t
            )));
        }
        let ds = self.state_dim();
        let da = self.action_dim();
        for (i, s) in self.states.iter().enumerate() {
            if s.len() != ds {
                return Err(Error::ShapeMismatch(format!("state {i} has {} dims, expected {ds}", s.len())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite state at timestep {i}")));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            if a.len() != da {
                return Err(Error::ShapeMismatch(format!("action {i} has {} dims, expected {da}", a.len())));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite action at timestep {i}")));
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidInput("non-finite reward".into()));
        }
        Ok(())
    }
}

/// A trajectory carrying the discounted future-reward sum at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedTrajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub reward_to_go: Vec<f64>,
    pub terminal: bool,
    pub discount: f64,
}

impl AugmentedTrajectory {
    /// Augment a raw trajectory with its reward-to-go column.
    pub fn from_raw(raw: &RawTrajectory, discount: f64) -> Result<Self> {
        raw.validate()?;
        let reward_to_go = compute_reward_to_go(&raw.rewards, discount)?;
        Ok(Self {
            states: raw.states.clone(),
            actions: raw.actions.clone(),
            rewards: raw.rewards.clone(),
            reward_to_go,
            terminal: raw.terminal,
            discount,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    /// Contiguous slice of timesteps `[start, start + len)` as its own trajectory.
    /// Reward-to-go values are carried over unchanged, so inside a window they
    /// still reflect the tail of the full episode.
    pub fn window(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.len());
        Self {
            states: self.states[start..start + len].to_vec(),
            actions: self.actions[start..start + len].to_vec(),
            rewards: self.rewards[start..start + len].to_vec(),
            reward_to_go: self.reward_to_go[start..start + len].to_vec(),
            terminal: self.terminal && start + len == self.len(),
            discount: self.discount,
        }
    }

    /// All finite check, used to validate reconstructed trajectories.
    pub fn all_finite(&self) -> bool {
        self.states.iter().flatten().all(|v| v.is_finite())
            && self.actions.iter().flatten().all(|v| v.is_finite())
            && self.rewards.iter().all(|v| v.is_finite())
            && self.reward_to_go.iter().all(|v| v.is_finite())
    }
}

/// Discounted suffix sums of `rewards`, in one backward pass:
/// `out[t] = rewards[t] + discount * out[t+1]`.
pub fn compute_reward_to_go(rewards: &[f64], discount: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidInput("rewards must be non-empty".into()));
    }
    if !(discount > 0.0 && discount <= 1.0) {
        return Err(Error::InvalidInput(format!("discount must be in (0, 1], got {discount}")));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite reward {bad}")));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + discount * acc;
        out[t] = acc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undiscounted_suffix_sums() {
        assert_eq!(compute_reward_to_go(&[1.0, 2.0, 3.0], 1.0).unwrap(), vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn zero_rewards_stay_zero() {
        assert_eq!(compute_reward_to_go(&[0.0, 0.0, 0.0], 0.5).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn ten_ones_discounted_matches_direct_sum() {
        // independent oracle: direct summation of 0.99^i
        let oracle: f64 = (0..10).map(|i| 0.99f64.powi(i)).sum();
        let rtg = compute_reward_to_go(&vec![1.0; 10], 0.99).unwrap();
        assert!((rtg[0] - oracle).abs() < 1e-12, "{} vs {}", rtg[0], oracle);
        assert!((oracle - 9.561792499119552).abs() < 1e-9);
    }

    #[test]
    fn recursion_holds_everywhere() {
        let rewards: Vec<f64> = (0..37).map(|i| ((i * 7919) % 23) as f64 - 11.0).collect();
        let gamma = 0.93;
        let rtg = compute_reward_to_go(&rewards, gamma).unwrap();
        for t in 0..rewards.len() - 1 {
            assert!((rtg[t] - (rewards[t] + gamma * rtg[t + 1])).abs() < 1e-9);
        }
        assert_eq!(rtg[rewards.len() - 1], rewards[rewards.len() - 1]);
    }

    #[test]
    fn non_finite_reward_rejected() {
        assert!(compute_reward_to_go(&[1.0, f64::NAN], 0.9).is_err());
        assert!(compute_reward_to_go(&[], 0.9).is_err());
        assert!(compute_reward_to_go(&[1.0], 0.0).is_err());
    }

    #[test]
    fn window_keeps_episode_tail_rtg() {
        let raw = RawTrajectory {
            states: vec![vec![0.0]; 5],
            actions: vec![vec![0.0]; 5],
            rewards: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            terminal: true,
        };
        let aug = AugmentedTrajectory::from_raw(&raw, 1.0).unwrap();
        let w = aug.window(1, 3);
        assert_eq!(w.rewards, vec![2.0, 3.0, 4.0]);
        // rtg copied from the episode, not recomputed on the slice
        assert_eq!(w.reward_to_go, vec![14.0, 12.0, 9.0]);
        assert!(!w.terminal);
        assert!(aug.window(2, 3).terminal);
    }
}
