//! Two-state, four-action tabular Q-learning over rotation actions.
//!
//! State 0 means the rotated image's nearest-neighbour distance did not
//! improve on the unrotated one; state 1 means it did. Every episode starts
//! from a zero table, draws actions uniformly at random, and finally picks
//! the action holding the table's largest value.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::featstore::{FeatureStore, NnResult};
use crate::imgops::{rotate, AngleDeg};
use crate::nn::CnnModel;
use crate::{Error, Result, Tensor};

pub const NUM_STATES: usize = 2;
pub const NUM_ACTIONS: usize = 4;
pub const STATE_NOT_IMPROVED: usize = 0;
pub const STATE_IMPROVED: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    pub actions: Vec<AngleDeg>,
    pub n_states: usize,
    /// Iterations per action; an episode runs `n_actions × m` updates.
    pub m: usize,
    pub alpha: f64,
    pub gamma: f64,
    /// Reward dead band on the distance change.
    pub delta: f64,
    pub rng_seed: u64,
    pub initial_state: usize,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            actions: [-15.0, -10.0, 10.0, 15.0].map(AngleDeg).to_vec(),
            n_states: NUM_STATES,
            m: 30,
            alpha: 0.3,
            gamma: 0.6,
            delta: 0.05,
            rng_seed: 1,
            initial_state: STATE_NOT_IMPROVED,
        }
    }
}

impl QConfig {
    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn iterations(&self) -> usize {
        self.n_actions() * self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states != NUM_STATES {
            return Err(Error::invalid(format!(
                "the learner has {NUM_STATES} states, config asks for {}",
                self.n_states
            )));
        }
        if self.actions.len() != NUM_ACTIONS {
            return Err(Error::invalid(format!(
                "the learner has {NUM_ACTIONS} actions, config lists {}",
                self.actions.len()
            )));
        }
        if self.actions.iter().any(|a| !a.0.is_finite()) {
            return Err(Error::invalid("action angles must be finite"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!(
                "delta {} must be positive",
                self.delta
            )));
        }
        if self.m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if self.initial_state >= NUM_STATES {
            return Err(Error::invalid(format!(
                "initial state {} out of range",
                self.initial_state
            )));
        }
        Ok(())
    }
}

/// `−1` when the distance grew by more than `delta`, `+1` when it shrank by
/// more than `delta`, `0` otherwise (including exactly `±delta`).
pub fn reward(delta_d: f64, delta: f64) -> i8 {
    if delta_d > delta {
        -1
    } else if delta_d < -delta {
        1
    } else {
        0
    }
}

/// State after comparing the unrotated distance `d` with the rotated `d1`.
pub fn observe_state(d: f64, d1: f64) -> usize {
    if d > d1 {
        STATE_IMPROVED
    } else {
        STATE_NOT_IMPROVED
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QTable {
    pub values: [[f64; NUM_ACTIONS]; NUM_STATES],
}

impl QTable {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state][action]
    }

    pub fn max_for(&self, state: usize) -> f64 {
        self.values[state]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|&v| v == 0.0)
    }

    /// `Q(s,a) ← Q(s,a) + α·[r + γ·max_b Q(s',b) − Q(s,a)]`.
    pub fn update(
        &mut self,
        state: usize,
        action: usize,
        reward: i8,
        next_state: usize,
        alpha: f64,
        gamma: f64,
    ) -> Result<()> {
        if state >= NUM_STATES || next_state >= NUM_STATES {
            return Err(Error::invalid(format!(
                "state {state}/{next_state} out of range"
            )));
        }
        if action >= NUM_ACTIONS {
            return Err(Error::invalid(format!("action {action} out of range")));
        }
        let target = reward as f64 + gamma * self.max_for(next_state);
        let q = &mut self.values[state][action];
        *q += alpha * (target - *q);
        Ok(())
    }
}

/// Functional form of [`QTable::update`].
pub fn q_update(
    table: &QTable,
    state: usize,
    action: usize,
    reward: i8,
    next_state: usize,
    alpha: f64,
    gamma: f64,
) -> Result<QTable> {
    let mut t = *table;
    t.update(state, action, reward, next_state, alpha, gamma)?;
    Ok(t)
}

/// Index of the action owning the table's maximum.
///
/// Ties go to the smaller `|angle|`, then the negative angle, then the lower
/// column.
pub fn select_optimal(table: &QTable, actions: &[AngleDeg]) -> (usize, AngleDeg) {
    let best = table
        .values
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut candidates: Vec<usize> = (0..NUM_ACTIONS.min(actions.len()))
        .filter(|&a| (0..NUM_STATES).any(|s| table.values[s][a] == best))
        .collect();
    candidates.sort_by(|&a, &b| {
        let (x, y) = (actions[a].0, actions[b].0);
        x.abs()
            .total_cmp(&y.abs())
            .then((x > 0.0).cmp(&(y > 0.0)))
            .then(a.cmp(&b))
    });
    let a = candidates[0];
    (a, actions[a])
}

/// Nearest-neighbour distance after applying an action.
pub trait DistanceProbe {
    fn probe(&mut self, action: usize) -> Result<f64>;
}

impl<F: FnMut(usize) -> Result<f64>> DistanceProbe for F {
    fn probe(&mut self, action: usize) -> Result<f64> {
        self(action)
    }
}

/// Memoizes another probe per action.
pub struct CachedProbe<P> {
    inner: P,
    cache: HashMap<usize, f64>,
    misses: usize,
}

impl<P: DistanceProbe> CachedProbe<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            cache: HashMap::new(),
            misses: 0,
        }
    }

    /// Calls that reached the wrapped probe.
    pub fn misses(&self) -> usize {
        self.misses
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: DistanceProbe> DistanceProbe for CachedProbe<P> {
    fn probe(&mut self, action: usize) -> Result<f64> {
        if let Some(&d) = self.cache.get(&action) {
            return Ok(d);
        }
        let d = self.inner.probe(action)?;
        self.misses += 1;
        self.cache.insert(action, d);
        Ok(d)
    }
}

/// Rotates the original image, extracts its emission and searches the store.
pub struct ImageProbe<'a> {
    image: &'a Tensor,
    model: &'a CnnModel,
    store: &'a FeatureStore,
    actions: &'a [AngleDeg],
    seen: Vec<Option<NnResult>>,
}

impl<'a> ImageProbe<'a> {
    pub fn new(
        image: &'a Tensor,
        model: &'a CnnModel,
        store: &'a FeatureStore,
        actions: &'a [AngleDeg],
    ) -> Self {
        Self {
            image,
            model,
            store,
            actions,
            seen: vec![None; actions.len()],
        }
    }

    /// Nearest neighbour of the image rotated by `angle`.
    pub fn neighbour(&self, angle: AngleDeg) -> Result<NnResult> {
        let rotated = rotate(self.image, angle)?;
        nearest(self.model, self.store, &rotated)
    }

    /// Nearest neighbour after `action`, computed on first use.
    pub fn result_for(&mut self, action: usize) -> Result<NnResult> {
        let angle = *self
            .actions
            .get(action)
            .ok_or_else(|| Error::invalid(format!("action {action} out of range")))?;
        if let Some(nn) = self.seen[action] {
            return Ok(nn);
        }
        let nn = self.neighbour(angle)?;
        self.seen[action] = Some(nn);
        Ok(nn)
    }
}

impl DistanceProbe for ImageProbe<'_> {
    fn probe(&mut self, action: usize) -> Result<f64> {
        self.result_for(action).map(|nn| nn.distance)
    }
}

/// Emission of a `[1, H, W]` image, normalized like the store, then searched.
pub fn nearest(model: &CnnModel, store: &FeatureStore, image: &Tensor) -> Result<NnResult> {
    let s = image.shape();
    let batch = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let mut emission = model.forward(&batch)?.emission.into_data();
    if !store.norm_mode().apply(&mut emission) {
        return Err(Error::DegenerateFeature { index: 0 });
    }
    store.nn_query(&emission)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub state: usize,
    pub action: usize,
    pub d1: f64,
    pub delta_d: f64,
    pub reward: i8,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub base_distance: f64,
    pub iterations: Vec<IterationRecord>,
    pub table: QTable,
    pub chosen_action: usize,
    pub chosen_angle: AngleDeg,
}

impl EpisodeTrace {
    /// One JSON line for the audit log.
    pub fn to_json_line(&self, sample: usize) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            sample: usize,
            #[serde(flatten)]
            trace: &'a EpisodeTrace,
        }
        serde_json::to_string(&Line {
            sample,
            trace: self,
        })
        .expect("trace serializes")
    }
}

/// RNG for one sample's episode, independent of scheduling order.
pub fn episode_rng(seed: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample);
    rng
}

/// Run `n_actions × m` random-policy Q-learning steps against `probe`.
pub fn run_episode<P: DistanceProbe>(
    base_distance: f64,
    probe: &mut P,
    cfg: &QConfig,
    sample: u64,
) -> Result<EpisodeTrace> {
    cfg.validate()?;
    if !(base_distance >= 0.0 && base_distance.is_finite()) {
        return Err(Error::invalid(format!(
            "base distance {base_distance} is not a finite non-negative value"
        )));
    }
    let mut rng = episode_rng(cfg.rng_seed, sample);
    let mut table = QTable::zeros();
    let mut state = cfg.initial_state;
    let mut iterations = Vec::with_capacity(cfg.iterations());
    for _ in 0..cfg.iterations() {
        let action = rng.gen_range(0..cfg.n_actions());
        let d1 = probe.probe(action)?;
        let delta_d = d1 - base_distance;
        let r = reward(delta_d, cfg.delta);
        let next_state = observe_state(base_distance, d1);
        table.update(state, action, r, next_state, cfg.alpha, cfg.gamma)?;
        iterations.push(IterationRecord {
            state,
            action,
            d1,
            delta_d,
            reward: r,
            next_state,
        });
        state = next_state;
    }
    let (chosen_action, chosen_angle) = select_optimal(&table, &cfg.actions);
    Ok(EpisodeTrace {
        base_distance,
        iterations,
        table,
        chosen_action,
        chosen_angle,
    })
}

/// Episode for a real image, plus the neighbour of the image rotated by the
/// chosen angle. At most one extraction happens per action.
pub fn run_image_episode(
    image: &Tensor,
    base: &NnResult,
    model: &CnnModel,
    store: &FeatureStore,
    cfg: &QConfig,
    sample: u64,
) -> Result<(EpisodeTrace, NnResult)> {
    let mut probe = CachedProbe::new(ImageProbe::new(image, model, store, &cfg.actions));
    let trace = run_episode(base.distance, &mut probe, cfg, sample)?;
    let nn = probe.into_inner().result_for(trace.chosen_action)?;
    Ok((trace, nn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn rigged(good: usize) -> impl FnMut(usize) -> Result<f64> {
        move |a| Ok(if a == good { 1.0 - 0.2 } else { 1.0 + 0.2 })
    }

    #[test]
    fn reward_cases() {
        assert_eq!(reward(0.10, 0.05), -1);
        assert_eq!(reward(0.00, 0.05), 0);
        assert_eq!(reward(-0.06, 0.05), 1);
        assert_eq!(reward(0.05, 0.05), 0);
        assert_eq!(reward(-0.05, 0.05), 0);
    }

    #[test]
    fn state_cases() {
        assert_eq!(observe_state(1.0, 1.2), STATE_NOT_IMPROVED);
        assert_eq!(observe_state(1.0, 0.7), STATE_IMPROVED);
        assert_eq!(observe_state(1.0, 1.0), STATE_NOT_IMPROVED);
    }

    #[test]
    fn update_from_zero() {
        let t = q_update(&QTable::zeros(), 0, 2, 1, 1, 0.3, 0.6).unwrap();
        let mut want = QTable::zeros();
        want.values[0][2] = 0.3;
        assert_eq!(t, want);
    }

    #[test]
    fn update_hand_evaluated() {
        let mut t = QTable::zeros();
        t.values[0][1] = 0.2;
        t.values[1] = [0.5, 0.1, -0.3, 0.0];
        let u = q_update(&t, 0, 1, -1, 1, 0.3, 0.6).unwrap();
        // 0.2 + 0.3·(−1 + 0.6·0.5 − 0.2)
        assert!((u.values[0][1] - -0.07).abs() < 1e-15);
        assert_eq!(u.values[1], t.values[1]);
    }

    #[test]
    fn neutral_update_decays() {
        let mut t = QTable::zeros();
        t.values[1][3] = 0.8;
        let u = q_update(&t, 1, 3, 0, 0, 0.3, 0.6).unwrap();
        assert!((u.values[1][3] - 0.7 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn update_rejects_bad_indices() {
        let mut t = QTable::zeros();
        assert!(t.update(2, 0, 0, 0, 0.3, 0.6).is_err());
        assert!(t.update(0, 4, 0, 0, 0.3, 0.6).is_err());
        assert!(t.update(0, 0, 0, 5, 0.3, 0.6).is_err());
    }

    #[test]
    fn select_optimal_rules() {
        let actions = QConfig::default().actions;
        assert_eq!(
            select_optimal(&QTable::zeros(), &actions).1,
            AngleDeg(-10.0)
        );
        let mut t = QTable::zeros();
        t.values[1][3] = 0.4;
        assert_eq!(select_optimal(&t, &actions).0, 3);
        let mut t = QTable::zeros();
        t.values[0][0] = 0.7;
        t.values[1][0] = 0.7;
        t.values[1][2] = 0.1;
        assert_eq!(select_optimal(&t, &actions).0, 0);
        // Equal maxima at +10 and -15: smaller magnitude wins.
        let mut t = QTable::zeros();
        t.values[0][0] = 0.5;
        t.values[1][2] = 0.5;
        assert_eq!(select_optimal(&t, &actions).1, AngleDeg(10.0));
    }

    #[test]
    fn rigged_action_wins_across_seeds() {
        for good in 0..NUM_ACTIONS {
            let mut wins = 0;
            for seed in 0..100 {
                let cfg = QConfig {
                    rng_seed: seed,
                    ..QConfig::default()
                };
                let trace = run_episode(1.0, &mut rigged(good), &cfg, 0).unwrap();
                assert_eq!(trace.iterations.len(), 120);
                if trace.chosen_action == good {
                    wins += 1;
                }
            }
            assert!(wins >= 99, "action {good}: {wins}/100");
        }
    }

    #[test]
    fn neutral_probe_leaves_table_zero() {
        let mut probe = |a: usize| Ok(1.0 + 0.01 * a as f64 - 0.015);
        let trace = run_episode(1.0, &mut probe, &QConfig::default(), 3).unwrap();
        assert!(trace.table.is_zero());
        assert!(trace.iterations.iter().all(|r| r.reward == 0));
        assert_eq!(trace.chosen_angle, AngleDeg(-10.0));
    }

    #[test]
    fn episodes_are_reproducible_and_cover_actions() {
        let cfg = QConfig::default();
        let a = run_episode(1.0, &mut rigged(1), &cfg, 42).unwrap();
        let b = run_episode(1.0, &mut rigged(1), &cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = run_episode(1.0, &mut rigged(1), &cfg, 43).unwrap();
        assert_ne!(a.iterations, c.iterations);
        for action in 0..NUM_ACTIONS {
            assert!(a.iterations.iter().any(|r| r.action == action));
        }
        for w in a.iterations.windows(2) {
            assert_eq!(w[0].next_state, w[1].state);
        }
        assert_eq!(a.iterations[0].state, STATE_NOT_IMPROVED);
    }

    #[test]
    fn cache_does_not_change_the_episode() {
        let cfg = QConfig::default();
        let mut calls = 0;
        let mut raw = |a: usize| {
            calls += 1;
            Ok(0.9 + 0.07 * a as f64)
        };
        let plain = run_episode(1.0, &mut raw, &cfg, 5).unwrap();
        assert_eq!(calls, 120);
        let mut cached = CachedProbe::new(|a: usize| Ok(0.9 + 0.07 * a as f64));
        let fast = run_episode(1.0, &mut cached, &cfg, 5).unwrap();
        assert_eq!(plain, fast);
        assert!(cached.misses() <= NUM_ACTIONS);
    }

    #[test]
    fn trace_json_line() {
        let trace = run_episode(1.0, &mut rigged(2), &QConfig::default(), 0).unwrap();
        let line = trace.to_json_line(17);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["sample"], 17);
        assert_eq!(v["iterations"].as_array().unwrap().len(), 120);
        assert_eq!(v["table"].as_array().unwrap().len(), 2);
        assert!(!line.contains('\n'));
    }

    #[test]
    fn config_validation() {
        assert!(QConfig::default().validate().is_ok());
        assert_eq!(QConfig::default().iterations(), 120);
        let bad = QConfig {
            gamma: 1.0,
            ..QConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = QConfig {
            actions: vec![AngleDeg(5.0)],
            ..QConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn million_random_updates_stay_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = QTable::zeros();
        for _ in 0..1_000_000 {
            let (s, a, s2) = (
                rng.gen_range(0..2),
                rng.gen_range(0..4),
                rng.gen_range(0..2),
            );
            let r = rng.gen_range(-1i8..=1);
            t.update(s, a, r, s2, 0.3, 0.6).unwrap();
        }
        assert!(t.values.iter().flatten().all(|v| v.abs() <= 2.5));
    }

    proptest! {
        #[test]
        fn reward_is_a_symmetric_step(x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let r = reward(x, 0.05);
            prop_assert!([-1, 0, 1].contains(&r));
            prop_assert_eq!(r == 0, x.abs() <= 0.05);
            if x <= y {
                prop_assert!(reward(x, 0.05) >= reward(y, 0.05));
            }
            prop_assert_eq!(reward(-x, 0.05), -r);
        }

        #[test]
        fn updates_stay_bounded(steps in proptest::collection::vec((0usize..2, 0usize..4, -1i8..=1, 0usize..2), 1..400)) {
            let mut t = QTable::zeros();
            for (s, a, r, s2) in steps {
                t.update(s, a, r, s2, 0.3, 0.6).unwrap();
            }
            prop_assert!(t.values.iter().flatten().all(|v| v.abs() <= 2.5));
        }
    }
}
