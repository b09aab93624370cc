//! Toy generation MDPs for the claim that the optimal KL-regularized
//! Q-function equals the per-step reward under vanishing redundancy.
//!
//! The state is augmented with the registry of explored regions, so the
//! reward is Markov and backward induction is exact. Reference policies are
//! dyadic, so `Σ π_ref = 1` holds exactly and a zero continuation value is
//! computed as exactly `0`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, VerifyError};

pub const MAX_REGIONS: usize = 8;
pub const MAX_HORIZON: usize = 10;
pub const MAX_ACTIONS: usize = 4;
/// Augmented states explored before the checker gives up.
pub const STATE_BUDGET: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardRule {
    /// Entering a region pays its reward once; an explored prefix only
    /// continues into explored regions.
    VanishingRedundancy,
    /// Every move to a different region pays, explored or not.
    Rearming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MdpState {
    pub t: usize,
    /// `None` while the prefix has not committed to a region.
    pub region: Option<u8>,
    /// Bit `i` set once region `i` is explored.
    pub visited: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMdp {
    pub regions: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub alpha: f64,
    /// Dyadic reference policy over actions.
    pub pi_ref: Vec<f64>,
    /// Reward of entering each region, dyadic and non-negative.
    pub region_reward: Vec<f64>,
    pub start: MdpState,
    pub rule: RewardRule,
    /// Seeds the fixed transition table.
    pub salt: u64,
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl ToyMdp {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VerifyError::Contract(m));
        if !(1..=MAX_REGIONS).contains(&self.regions) {
            return bad(format!(
                "regions must be in 1..={MAX_REGIONS}, got {}",
                self.regions
            ));
        }
        if self.horizon > MAX_HORIZON {
            return bad(format!(
                "horizon must be <= {MAX_HORIZON}, got {}",
                self.horizon
            ));
        }
        if !(1..=MAX_ACTIONS).contains(&self.pi_ref.len()) {
            return bad(format!(
                "actions must be in 1..={MAX_ACTIONS}, got {}",
                self.pi_ref.len()
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("γ must be in (0, 1], got {}", self.gamma));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("α must be positive, got {}", self.alpha));
        }
        if self.pi_ref.iter().any(|&p| p.is_nan() || p <= 0.0)
            || self.pi_ref.iter().sum::<f64>() != 1.0
        {
            return bad("reference policy must be positive and sum to exactly 1".into());
        }
        if self.region_reward.len() != self.regions
            || self.region_reward.iter().any(|&r| r.is_nan() || r < 0.0)
        {
            return bad("one non-negative reward per region".into());
        }
        if let Some(r) = self.start.region {
            if usize::from(r) >= self.regions || self.start.visited & (1 << r) == 0 {
                return bad("a committed start region must be in range and explored".into());
            }
        }
        if u16::from(self.start.visited) >> self.regions != 0 || self.start.t > self.horizon {
            return bad("start state out of range".into());
        }
        Ok(())
    }

    pub fn actions(&self) -> usize {
        self.pi_ref.len()
    }

    /// Region the prefix moves to after action `z`.
    pub fn next_region(&self, s: MdpState, z: usize) -> u8 {
        let h = mix(self.salt
            ^ mix((s.t as u64) << 32 | u64::from(s.region.map_or(0xFF, |r| r)) << 8 | z as u64));
        match (self.rule, s.region) {
            (_, None) => (h % self.regions as u64) as u8,
            (RewardRule::VanishingRedundancy, Some(_)) => {
                // explored prefixes continue inside the registry
                let explored: Vec<u8> = (0..self.regions as u8)
                    .filter(|i| s.visited & (1 << i) != 0)
                    .collect();
                explored[(h % explored.len() as u64) as usize]
            }
            (RewardRule::Rearming, Some(c)) => {
                if s.t == self.start.t + 1 && z == 0 {
                    // guarantees a paying move after the first step
                    (c + 1) % self.regions as u8
                } else {
                    (h % self.regions as u64) as u8
                }
            }
        }
    }

    pub fn reward(&self, s: MdpState, z: usize) -> f64 {
        let next = self.next_region(s, z);
        let pays = match self.rule {
            RewardRule::VanishingRedundancy => s.visited & (1 << next) == 0,
            RewardRule::Rearming => s.region != Some(next),
        };
        if pays {
            self.region_reward[usize::from(next)]
        } else {
            0.0
        }
    }

    pub fn step(&self, s: MdpState, z: usize) -> MdpState {
        let next = self.next_region(s, z);
        MdpState {
            t: s.t + 1,
            region: Some(next),
            visited: s.visited | (1 << next),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpReport {
    pub rule: RewardRule,
    pub gamma: f64,
    pub regions: usize,
    pub horizon: usize,
    pub states: usize,
    pub pairs: usize,
    /// Reachable pairs with `Q* ≠ r` under exact comparison.
    pub mismatches: usize,
    pub max_gap: f64,
    /// Every zero reward is followed only by zero rewards.
    pub definition_holds: bool,
}

struct Solver<'a> {
    mdp: &'a ToyMdp,
    value: HashMap<MdpState, f64>,
    future_max: HashMap<MdpState, f64>,
}

impl Solver<'_> {
    /// `V*(s) = α ln Σ_z π_ref(z) exp(Q*(s,z)/α)`, zero past the horizon.
    fn value(&mut self, s: MdpState) -> Result<f64> {
        if s.t >= self.mdp.horizon {
            return Ok(0.0);
        }
        if let Some(&v) = self.value.get(&s) {
            return Ok(v);
        }
        if self.value.len() >= STATE_BUDGET {
            return Err(VerifyError::Budget(format!(
                "more than {STATE_BUDGET} augmented states"
            )));
        }
        let q = self.q_values(s)?;
        let a = self.mdp.alpha;
        let mx = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = q
            .iter()
            .zip(&self.mdp.pi_ref)
            .map(|(qz, p)| p * ((qz - mx) / a).exp())
            .sum();
        let v = mx + a * sum.ln();
        self.value.insert(s, v);
        Ok(v)
    }

    fn q_values(&mut self, s: MdpState) -> Result<Vec<f64>> {
        (0..self.mdp.actions())
            .map(|z| Ok(self.mdp.reward(s, z) + self.mdp.gamma * self.value(self.mdp.step(s, z))?))
            .collect()
    }

    /// Largest total reward reachable from `s`.
    fn future_max(&mut self, s: MdpState) -> f64 {
        if s.t >= self.mdp.horizon {
            return 0.0;
        }
        if let Some(&v) = self.future_max.get(&s) {
            return v;
        }
        let v = (0..self.mdp.actions())
            .map(|z| self.mdp.reward(s, z) + self.future_max(self.mdp.step(s, z)))
            .fold(0.0, f64::max);
        self.future_max.insert(s, v);
        v
    }
}

/// Backward induction over every reachable augmented state, comparing
/// `Q*(s, z)` with `r(s, z)` exactly.
pub fn check_q_equals_r(mdp: &ToyMdp) -> Result<MdpReport> {
    mdp.validate()?;
    let mut solver = Solver {
        mdp,
        value: HashMap::new(),
        future_max: HashMap::new(),
    };
    let mut frontier = vec![mdp.start];
    let mut seen = std::collections::HashSet::from([mdp.start]);
    let (mut pairs, mut mismatches, mut max_gap) = (0, 0, 0.0f64);
    let mut definition_holds = true;
    while let Some(s) = frontier.pop() {
        if s.t >= mdp.horizon {
            continue;
        }
        let q = solver.q_values(s)?;
        for (z, &qz) in q.iter().enumerate() {
            let r = mdp.reward(s, z);
            pairs += 1;
            if qz != r {
                mismatches += 1;
                max_gap = max_gap.max((qz - r).abs());
            }
            let next = mdp.step(s, z);
            if r == 0.0 && solver.future_max(next) != 0.0 {
                definition_holds = false;
            }
            if seen.insert(next) {
                frontier.push(next);
            }
        }
    }
    Ok(MdpReport {
        rule: mdp.rule,
        gamma: mdp.gamma,
        regions: mdp.regions,
        horizon: mdp.horizon,
        states: seen.len(),
        pairs,
        mismatches,
        max_gap,
        definition_holds,
    })
}

/// Splits unit mass into `m` dyadic parts.
fn dyadic_policy<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    let mut p = vec![1.0];
    while p.len() < m {
        let i = rng.random_range(0..p.len());
        p[i] /= 2.0;
        p.push(p[i]);
    }
    p
}

/// Random MDP under `rule`; rewards are multiples of `1/8`.
pub fn random_mdp<R: Rng + ?Sized>(rule: RewardRule, gamma: f64, rng: &mut R) -> ToyMdp {
    let regions = rng.random_range(2..=MAX_REGIONS);
    let horizon = rng.random_range(2..=MAX_HORIZON);
    let actions = rng.random_range(2..=MAX_ACTIONS);
    let (start, min_reward) = match rule {
        RewardRule::VanishingRedundancy => {
            let visited = rng.random_range(0..1u16 << regions) as u8;
            let t = rng.random_range(0..horizon);
            (
                MdpState {
                    t,
                    region: None,
                    visited,
                },
                0,
            )
        }
        RewardRule::Rearming => (
            MdpState {
                t: 0,
                region: None,
                visited: 0,
            },
            1,
        ),
    };
    ToyMdp {
        regions,
        horizon,
        gamma,
        alpha: [0.5, 1.0, 2.0][rng.random_range(0..3)],
        pi_ref: dyadic_policy(actions, rng),
        region_reward: (0..regions)
            .map(|_| rng.random_range(min_reward..=16) as f64 / 8.0)
            .collect(),
        start,
        rule,
        salt: rng.random(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSuiteReport {
    pub vanishing: usize,
    pub vanishing_exact: usize,
    pub controls: usize,
    pub controls_violated: usize,
    pub gammas: Vec<f64>,
    pub passed: bool,
    pub reports: Vec<MdpReport>,
}

/// `per_gamma` vanishing-redundancy MDPs and as many re-arming controls for
/// each `γ ∈ {0.9, 1}`.
pub fn run_mdp_suite(per_gamma: usize, seed: u64) -> Result<MdpSuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gammas = vec![0.9, 1.0];
    let mut reports = Vec::new();
    for &gamma in &gammas {
        for _ in 0..per_gamma {
            for rule in [RewardRule::VanishingRedundancy, RewardRule::Rearming] {
                reports.push(check_q_equals_r(&random_mdp(rule, gamma, &mut rng))?);
            }
        }
    }
    let of = |rule| reports.iter().filter(move |r: &&MdpReport| r.rule == rule);
    let vanishing = of(RewardRule::VanishingRedundancy).count();
    let vanishing_exact = of(RewardRule::VanishingRedundancy)
        .filter(|r| r.mismatches == 0 && r.definition_holds)
        .count();
    let controls = of(RewardRule::Rearming).count();
    let controls_violated = of(RewardRule::Rearming)
        .filter(|r| r.mismatches > 0)
        .count();
    Ok(MdpSuiteReport {
        passed: vanishing_exact == vanishing && controls_violated == controls,
        vanishing,
        vanishing_exact,
        controls,
        controls_violated,
        gammas,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_region(rule: RewardRule, reward: f64) -> ToyMdp {
        ToyMdp {
            regions: 2,
            horizon: 3,
            gamma: 1.0,
            alpha: 1.0,
            pi_ref: vec![0.5, 0.5],
            region_reward: vec![reward, 2.0 * reward],
            start: MdpState {
                t: 0,
                region: None,
                visited: 0,
            },
            rule,
            salt: 7,
        }
    }

    #[test]
    fn zero_reward_gives_zero_q() {
        let r = check_q_equals_r(&two_region(RewardRule::Rearming, 0.0)).unwrap();
        assert_eq!(r.mismatches, 0);
        assert!(r.pairs > 0);
    }

    #[test]
    fn two_region_vanishing_mdp_has_q_equal_r() {
        let r = check_q_equals_r(&two_region(RewardRule::VanishingRedundancy, 0.5)).unwrap();
        assert!(r.definition_holds);
        assert_eq!(r.mismatches, 0);
        assert_eq!(r.max_gap, 0.0);
    }

    #[test]
    fn rearming_control_breaks_the_equality() {
        let r = check_q_equals_r(&two_region(RewardRule::Rearming, 0.5)).unwrap();
        assert!(r.mismatches > 0);
        assert!(!r.definition_holds);
    }

    #[test]
    fn registry_zeroes_explored_regions() {
        let m = two_region(RewardRule::VanishingRedundancy, 1.0);
        let s = MdpState {
            t: 0,
            region: None,
            visited: 0b11,
        };
        for z in 0..2 {
            assert_eq!(m.reward(s, z), 0.0);
        }
    }

    #[test]
    fn dyadic_policies_sum_to_one_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for m in 1..=MAX_ACTIONS {
            assert_eq!(dyadic_policy(m, &mut rng).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn rejects_oversized_mdps() {
        let mut m = two_region(RewardRule::VanishingRedundancy, 1.0);
        m.horizon = MAX_HORIZON + 1;
        assert!(check_q_equals_r(&m).is_err());
        let mut m = two_region(RewardRule::VanishingRedundancy, 1.0);
        m.pi_ref = vec![0.5, 0.25];
        assert!(check_q_equals_r(&m).is_err());
    }

    #[test]
    fn suite_separates_the_two_rules() {
        let r = run_mdp_suite(10, 3).unwrap();
        assert!(
            r.passed,
            "{} of {} exact, {} of {} controls violated",
            r.vanishing_exact, r.vanishing, r.controls_violated, r.controls
        );
    }
}
