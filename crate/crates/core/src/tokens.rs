//! Discrete token view of trajectories: per-step layout, uniform binning,
//! and the round trip between continuous values and tokens.
//!
//! Each timestep contributes `state_dim + action_dim + 2` tokens in the
//! order: state dims, action dims, reward, reward-to-go. Every scalar field
//! shares one vocabulary of `V` uniform bins over its own fitted bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{AugmentedTrajectory, RawTrajectory};

/// What a single token position encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    State(usize),
    Action(usize),
    Reward,
    RewardToGo,
}

/// Token bookkeeping for a fixed (state_dim, action_dim) trajectory shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub state_dim: usize,
    pub action_dim: usize,
}

impl VocabLayout {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self { state_dim, action_dim }
    }

    /// Tokens emitted per timestep.
    pub fn tokens_per_step(&self) -> usize {
        self.state_dim + self.action_dim + 2
    }

    /// Number of distinct scalar fields (state dims + action dims + reward + rtg).
    pub fn field_count(&self) -> usize {
        self.tokens_per_step()
    }

    /// Field slot of a within-step offset.
    pub fn kind_of_offset(&self, offset: usize) -> FieldKind {
        assert!(offset < self.tokens_per_step());
        if offset < self.state_dim {
            FieldKind::State(offset)
        } else if offset < self.state_dim + self.action_dim {
            FieldKind::Action(offset - self.state_dim)
        } else if offset == self.state_dim + self.action_dim {
            FieldKind::Reward
        } else {
            FieldKind::RewardToGo
        }
    }

    /// Flat token index -> (timestep, field kind).
    pub fn split_index(&self, index: usize) -> (usize, FieldKind) {
        let tps = self.tokens_per_step();
        (index / tps, self.kind_of_offset(index % tps))
    }

    /// (timestep, field kind) -> flat token index.
    pub fn flat_index(&self, step: usize, kind: FieldKind) -> usize {
        let offset = match kind {
            FieldKind::State(d) => {
                assert!(d < self.state_dim);
                d
            }
            FieldKind::Action(d) => {
                assert!(d < self.action_dim);
                self.state_dim + d
            }
            FieldKind::Reward => self.state_dim + self.action_dim,
            FieldKind::RewardToGo => self.state_dim + self.action_dim + 1,
        };
        step * self.tokens_per_step() + offset
    }

    /// Index of the field's per-scalar bounds slot inside a `Discretizer`.
    pub fn field_slot(&self, kind: FieldKind) -> usize {
        match kind {
            FieldKind::State(d) => d,
            FieldKind::Action(d) => self.state_dim + d,
            FieldKind::Reward => self.state_dim + self.action_dim,
            FieldKind::RewardToGo => self.state_dim + self.action_dim + 1,
        }
    }
}

/// Per-field uniform binning over fitted bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub layout: VocabLayout,
    /// `(lo, hi)` per field slot, `field_count` entries, lo < hi.
    pub bounds: Vec<(f64, f64)>,
    /// Bins per scalar field.
    pub vocab: usize,
}

/// Widen a degenerate `[v, v]` interval so bins stay well-defined.
fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if lo < hi {
        (lo, hi)
    } else {
        let eps = 1e-6f64.max(1e-6 * lo.abs());
        (lo - eps, hi + eps)
    }
}

/// Fit per-field bounds as the dataset min/max over all timesteps, including
/// the reward and reward-to-go columns derived at the given discount.
pub fn fit_discretizer(dataset: &[RawTrajectory], vocab: usize, discount: f64) -> Result<Discretizer> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot fit a discretizer on an empty dataset".into()));
    }
    if vocab < 2 {
        return Err(Error::InvalidInput(format!("vocab must be >= 2, got {vocab}")));
    }
    let layout = VocabLayout::new(dataset[0].state_dim(), dataset[0].action_dim());
    let fields = layout.field_count();
    let mut lo = vec![f64::INFINITY; fields];
    let mut hi = vec![f64::NEG_INFINITY; fields];
    for raw in dataset {
        let aug = AugmentedTrajectory::from_raw(raw, discount)?;
        if aug.state_dim() != layout.state_dim || aug.action_dim() != layout.action_dim {
            return Err(Error::ShapeMismatch(
                "all trajectories in a dataset must share state/action dimensions".into(),
            ));
        }
        for t in 0..aug.len() {
            for (d, &v) in aug.states[t].iter().enumerate() {
                let s = layout.field_slot(FieldKind::State(d));
                lo[s] = lo[s].min(v);
                hi[s] = hi[s].max(v);
            }
            for (d, &v) in aug.actions[t].iter().enumerate() {
                let s = layout.field_slot(FieldKind::Action(d));
                lo[s] = lo[s].min(v);
                hi[s] = hi[s].max(v);
            }
            let s = layout.field_slot(FieldKind::Reward);
            lo[s] = lo[s].min(aug.rewards[t]);
            hi[s] = hi[s].max(aug.rewards[t]);
            let s = layout.field_slot(FieldKind::RewardToGo);
            lo[s] = lo[s].min(aug.reward_to_go[t]);
            hi[s] = hi[s].max(aug.reward_to_go[t]);
        }
    }
    let bounds = lo.into_iter().zip(hi).map(|(l, h)| widen(l, h)).collect();
    Ok(Discretizer { layout, bounds, vocab })
}

impl Discretizer {
    /// Map one scalar of the given field to its bin, clamped to `[0, V)`.
    pub fn encode_scalar(&self, kind: FieldKind, x: f64) -> u16 {
        let (lo, hi) = self.bounds[self.layout.field_slot(kind)];
        let v = self.vocab as f64;
        let bin = (v * (x - lo) / (hi - lo)).floor();
        bin.clamp(0.0, v - 1.0) as u16
    }

    /// Bin center of a token for the given field.
    pub fn decode_scalar(&self, kind: FieldKind, token: u16) -> Result<f64> {
        if (token as usize) >= self.vocab {
            return Err(Error::TokenOutOfRange { token, vocab: self.vocab });
        }
        let (lo, hi) = self.bounds[self.layout.field_slot(kind)];
        Ok(lo + (token as f64 + 0.5) * (hi - lo) / self.vocab as f64)
    }

    /// Tokenize a whole trajectory, `(N+M+2) * T` tokens.
    pub fn discretize(&self, traj: &AugmentedTrajectory) -> Result<TokenSequence> {
        if traj.state_dim() != self.layout.state_dim || traj.action_dim() != self.layout.action_dim {
            return Err(Error::ShapeMismatch(format!(
                "trajectory dims ({}, {}) do not match layout ({}, {})",
                traj.state_dim(),
                traj.action_dim(),
                self.layout.state_dim,
                self.layout.action_dim
            )));
        }
        if !traj.all_finite() {
            return Err(Error::InvalidInput("trajectory has non-finite entries".into()));
        }
        let mut tokens = Vec::with_capacity(self.layout.tokens_per_step() * traj.len());
        for t in 0..traj.len() {
            for (d, &v) in traj.states[t].iter().enumerate() {
                tokens.push(self.encode_scalar(FieldKind::State(d), v));
            }
            for (d, &v) in traj.actions[t].iter().enumerate() {
                tokens.push(self.encode_scalar(FieldKind::Action(d), v));
            }
            tokens.push(self.encode_scalar(FieldKind::Reward, traj.rewards[t]));
            tokens.push(self.encode_scalar(FieldKind::RewardToGo, traj.reward_to_go[t]));
        }
        Ok(TokenSequence { tokens, layout: self.layout })
    }

    /// Decode a token sequence back to bin-center continuous values.
    /// The result carries the discount used at fit time and no terminal flag.
    pub fn reconstruct(&self, seq: &TokenSequence, discount: f64) -> Result<AugmentedTrajectory> {
        if seq.layout != self.layout {
            return Err(Error::ShapeMismatch("token sequence layout does not match discretizer".into()));
        }
        let tps = self.layout.tokens_per_step();
        if seq.tokens.len() % tps != 0 {
            return Err(Error::ShapeMismatch(format!(
                "token count {} is not a multiple of tokens-per-step {tps}",
                seq.tokens.len()
            )));
        }
        let steps = seq.tokens.len() / tps;
        let mut out = AugmentedTrajectory {
            states: Vec::with_capacity(steps),
            actions: Vec::with_capacity(steps),
            rewards: Vec::with_capacity(steps),
            reward_to_go: Vec::with_capacity(steps),
            terminal: false,
            discount,
        };
        for t in 0..steps {
            let base = t * tps;
            let mut state = Vec::with_capacity(self.layout.state_dim);
            for d in 0..self.layout.state_dim {
                state.push(self.decode_scalar(FieldKind::State(d), seq.tokens[base + d])?);
            }
            let mut action = Vec::with_capacity(self.layout.action_dim);
            for d in 0..self.layout.action_dim {
                action.push(self.decode_scalar(FieldKind::Action(d), seq.tokens[base + self.layout.state_dim + d])?);
            }
            out.states.push(state);
            out.actions.push(action);
            out.rewards
                .push(self.decode_scalar(FieldKind::Reward, seq.tokens[base + tps - 2])?);
            out.reward_to_go
                .push(self.decode_scalar(FieldKind::RewardToGo, seq.tokens[base + tps - 1])?);
        }
        Ok(out)
    }

    /// Half bin width of a field: the round-trip error bound for in-range scalars.
    pub fn half_bin_width(&self, kind: FieldKind) -> f64 {
        let (lo, hi) = self.bounds[self.layout.field_slot(kind)];
        (hi - lo) / (2.0 * self.vocab as f64)
    }
}

/// A discretized trajectory: `(N+M+2) * T` tokens, each in `[0, V)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u16>,
    pub layout: VocabLayout,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.tokens.len() / self.layout.tokens_per_step()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.tokens.len() % self.layout.tokens_per_step() != 0 {
            return Err(Error::ShapeMismatch("token count not a multiple of tokens-per-step".into()));
        }
        for &t in &self.tokens {
            if (t as usize) >= vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, rewards: Vec<f64>) -> RawTrajectory {
        RawTrajectory { states, actions, rewards, terminal: false }
    }

    fn single_field_disc(lo: f64, hi: f64, vocab: usize) -> Discretizer {
        Discretizer {
            layout: VocabLayout::new(1, 1),
            bounds: vec![(lo, hi); 4],
            vocab,
        }
    }

    #[test]
    fn fit_takes_min_max() {
        let d = fit_discretizer(
            &[traj(
                vec![vec![-1.0], vec![0.0], vec![1.0]],
                vec![vec![0.0]; 3],
                vec![0.0; 3],
            )],
            2,
            1.0,
        )
        .unwrap();
        assert_eq!(d.bounds[0], (-1.0, 1.0));
        // bin edge at 0 with V=2
        assert_eq!(d.encode_scalar(FieldKind::State(0), -0.1), 0);
        assert_eq!(d.encode_scalar(FieldKind::State(0), 0.3), 1);
    }

    #[test]
    fn constant_field_widened() {
        let d = fit_discretizer(
            &[traj(vec![vec![5.0]; 3], vec![vec![0.0]; 3], vec![0.0; 3])],
            10,
            1.0,
        )
        .unwrap();
        let (lo, hi) = d.bounds[0];
        assert!(lo < 5.0 && hi > 5.0);
        assert!((5.0 - lo) <= 1e-5 && (hi - 5.0) <= 1e-5);
    }

    #[test]
    fn fit_scans_all_trajectories() {
        // independent oracle: scan every entry of every trajectory
        let t1 = traj(vec![vec![0.3], vec![-2.0]], vec![vec![1.0]; 2], vec![1.0, -1.0]);
        let t2 = traj(vec![vec![4.5], vec![0.1]], vec![vec![-3.0]; 2], vec![0.5, 2.0]);
        let d = fit_discretizer(&[t1.clone(), t2.clone()], 100, 1.0).unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in [&t1, &t2] {
            for s in &t.states {
                lo = lo.min(s[0]);
                hi = hi.max(s[0]);
            }
        }
        assert_eq!(d.bounds[0], (lo, hi));
    }

    #[test]
    fn first_bin_and_boundary_clamp() {
        let d = single_field_disc(0.0, 1.0, 100);
        assert_eq!(d.encode_scalar(FieldKind::Reward, 0.005), 0);
        assert_eq!(d.encode_scalar(FieldKind::Reward, 1.0), 99);
        assert_eq!(d.encode_scalar(FieldKind::Reward, 250.0), 99);
        assert_eq!(d.encode_scalar(FieldKind::Reward, -250.0), 0);
        let d2 = single_field_disc(-1.0, 1.0, 2);
        assert_eq!(d2.encode_scalar(FieldKind::Reward, 0.3), 1);
    }

    #[test]
    fn bin_center_decode() {
        let d = single_field_disc(0.0, 1.0, 100);
        assert!((d.decode_scalar(FieldKind::Reward, 0).unwrap() - 0.005).abs() < 1e-15);
        let tok = d.encode_scalar(FieldKind::Reward, 0.5);
        assert_eq!(tok, 50);
        assert!((d.decode_scalar(FieldKind::Reward, tok).unwrap() - 0.505).abs() < 1e-15);
        assert!(d.decode_scalar(FieldKind::Reward, 100).is_err());
    }

    #[test]
    fn round_trip_bound_on_uniform_samples() {
        let d = single_field_disc(-2.0, 3.0, 100);
        let half = d.half_bin_width(FieldKind::State(0));
        let mut x = -2.0;
        for i in 0..1000 {
            x = -2.0 + 5.0 * (i as f64 / 999.0);
            let tok = d.encode_scalar(FieldKind::State(0), x);
            let back = d.decode_scalar(FieldKind::State(0), tok).unwrap();
            assert!((x - back).abs() <= half + 1e-12, "x={x} back={back}");
        }
        let _ = x;
    }

    #[test]
    fn index_bijection() {
        let layout = VocabLayout::new(3, 2);
        let steps = 7;
        for idx in 0..steps * layout.tokens_per_step() {
            let (t, kind) = layout.split_index(idx);
            assert_eq!(layout.flat_index(t, kind), idx);
        }
    }

    #[test]
    fn discretize_emits_layout_order() {
        let raw = traj(
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![vec![0.5], vec![-0.5]],
            vec![1.0, 0.0],
        );
        let d = fit_discretizer(&[raw.clone()], 10, 1.0).unwrap();
        let aug = AugmentedTrajectory::from_raw(&raw, 1.0).unwrap();
        let seq = d.discretize(&aug).unwrap();
        assert_eq!(seq.len(), (2 + 1 + 2) * 2);
        assert_eq!(seq.steps(), 2);
        // first step: state0=0 (min) -> bin 0, state1=1 (max) -> last bin
        assert_eq!(seq.tokens[0], 0);
        assert_eq!(seq.tokens[1], 9);
        seq.validate(10).unwrap();
        assert!(seq.validate(5).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let d = single_field_disc(0.0, 1.0, 10);
        let raw = traj(vec![vec![0.0, 0.0]], vec![vec![0.0]], vec![0.0]);
        let aug = AugmentedTrajectory::from_raw(&raw, 1.0).unwrap();
        assert!(d.discretize(&aug).is_err());
    }

    proptest! {
        #[test]
        fn prop_round_trip_within_half_bin(x in -1.0f64..1.0, v in 2usize..200) {
            let d = single_field_disc(-1.0, 1.0, v);
            let tok = d.encode_scalar(FieldKind::Reward, x);
            let back = d.decode_scalar(FieldKind::Reward, tok).unwrap();
            prop_assert!((x - back).abs() <= d.half_bin_width(FieldKind::Reward) + 1e-12);
        }

        #[test]
        fn prop_encode_monotone(a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let d = single_field_disc(-2.0, 2.0, 57);
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(d.encode_scalar(FieldKind::Reward, x) <= d.encode_scalar(FieldKind::Reward, y));
        }

        #[test]
        fn prop_index_bijection(ds in 1usize..5, da in 1usize..4, steps in 1usize..6) {
            let layout = VocabLayout::new(ds, da);
            for idx in 0..steps * layout.tokens_per_step() {
                let (t, kind) = layout.split_index(idx);
                prop_assert_eq!(layout.flat_index(t, kind), idx);
            }
        }
    }
}
