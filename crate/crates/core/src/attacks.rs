//! Redirection attack catalogue and the normal/attack/normal run schedule.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{NetError, NodeId, Role, Scenario, Topology};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("bad attack token `{0}`")]
    BadToken(String),
    #[error("{spec} is not a scenario {scenario} attack: {reason}")]
    NotInScenario { spec: String, scenario: Scenario, reason: &'static str },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// One redirection: `target` starts sending to `new_dest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttackSpec {
    pub scenario: Scenario,
    pub target: NodeId,
    pub new_dest: NodeId,
}

impl AttackSpec {
    pub fn new(scenario: Scenario, target: NodeId, new_dest: NodeId) -> Result<AttackSpec, AttackError> {
        let spec = AttackSpec { scenario, target, new_dest };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses an arrow token such as `E1>R2` within a scenario.
    pub fn parse(scenario: Scenario, token: &str) -> Result<AttackSpec, AttackError> {
        let (t, d) = token.split_once('>').ok_or_else(|| AttackError::BadToken(token.to_string()))?;
        let bad = |_| AttackError::BadToken(token.to_string());
        AttackSpec::new(scenario, t.parse().map_err(bad)?, d.parse().map_err(bad)?)
    }

    fn validate(&self) -> Result<(), AttackError> {
        let reject = |reason| AttackError::NotInScenario { spec: self.to_string(), scenario: self.scenario, reason };
        let baseline = Topology::build(self.scenario);
        let normal = baseline.normal_dest(self.target);
        match self.scenario {
            Scenario::I | Scenario::II => {
                let want = if self.scenario == Scenario::I { Role::Edge } else { Role::Router };
                if self.target.role() != want {
                    return Err(reject("wrong target role"));
                }
                if !(self.new_dest.is_router() || self.new_dest == NodeId::COORDINATOR) {
                    return Err(reject("destination must be a router or C"));
                }
                if Some(self.new_dest) == normal {
                    return Err(reject("destination equals the normal route"));
                }
            }
            Scenario::III => {
                if self.new_dest != NodeId::ATTACKER {
                    return Err(reject("destination must be A"));
                }
                if !(self.target.is_edge() || self.target.is_router()) {
                    return Err(reject("target must be an edge or router"));
                }
            }
        }
        baseline.with_destination(self.target, self.new_dest)?;
        Ok(())
    }

    /// File-system friendly label, e.g. `E1-R2`.
    pub fn slug(&self) -> String {
        format!("{}-{}", self.target, self.new_dest)
    }

    /// Routers whose logged traffic changes while the attack is active:
    /// every router on the baseline or redirected path of any sender whose
    /// path changes.
    pub fn observers(&self) -> BTreeSet<NodeId> {
        let normal = Topology::build(self.scenario);
        let attacked = normal.with_destination(self.target, self.new_dest).expect("catalogue specs are valid");
        let mut out = BTreeSet::new();
        for src in normal.edges() {
            let before = normal.route_path(src).expect("roster node");
            let after = attacked.route_path(src).expect("roster node");
            if before != after {
                out.extend(before.routers());
                out.extend(after.routers());
            }
        }
        out
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}>{}", self.target, self.new_dest)
    }
}

/// The attack catalogue of one scenario, in table order.
pub fn enumerate_attacks(scenario: Scenario) -> Vec<AttackSpec> {
    let e = NodeId::edge;
    let r = NodeId::router;
    let c = NodeId::COORDINATOR;
    let a = NodeId::ATTACKER;
    let pairs: Vec<(NodeId, NodeId)> = match scenario {
        Scenario::I => vec![
            (e(1), r(2)),
            (e(1), r(3)),
            (e(1), c),
            (e(2), r(2)),
            (e(2), r(3)),
            (e(2), c),
            (e(3), r(1)),
            (e(3), r(2)),
            (e(3), c),
            (e(4), r(1)),
            (e(4), r(3)),
            (e(4), c),
        ],
        Scenario::II => vec![(r(1), r(2)), (r(1), r(3)), (r(2), r(1)), (r(3), r(1)), (r(3), c)],
        Scenario::III => vec![(e(1), a), (e(2), a), (e(3), a), (e(4), a), (r(1), a), (r(2), a), (r(3), a)],
    };
    pairs.into_iter().map(|(target, new_dest)| AttackSpec { scenario, target, new_dest }).collect()
}

/// Ground truth for one evaluation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Truth {
    Normal,
    Attack,
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Truth::Normal => "normal",
            Truth::Attack => "attack",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLabel {
    pub window_index: usize,
    pub truth: Truth,
}

/// A single attack run: normal traffic, the redirection, normal traffic again.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackPlan {
    pub spec: AttackSpec,
    pub normal_before: Duration,
    pub attack_window: Duration,
    pub normal_after: Duration,
}

impl AttackPlan {
    pub const DEFAULT_BEFORE: Duration = Duration::from_secs(20 * 60);
    pub const DEFAULT_WINDOW: Duration = Duration::from_secs(5 * 60);
    pub const DEFAULT_AFTER: Duration = Duration::from_secs(10 * 60);

    pub fn new(spec: AttackSpec) -> AttackPlan {
        AttackPlan {
            spec,
            normal_before: Self::DEFAULT_BEFORE,
            attack_window: Self::DEFAULT_WINDOW,
            normal_after: Self::DEFAULT_AFTER,
        }
    }

    pub fn total(&self) -> Duration {
        self.normal_before + self.attack_window + self.normal_after
    }

    /// Half-open `[start, end)` attack interval from the run start.
    pub fn attack_interval(&self) -> (Duration, Duration) {
        (self.normal_before, self.normal_before + self.attack_window)
    }

    pub fn is_active(&self, now: Duration) -> bool {
        let (start, end) = self.attack_interval();
        now >= start && now < end
    }

    /// Routing in force at `now`: the redirection inside the attack
    /// interval, the baseline outside it.
    pub fn apply(&self, topology: &Topology, now: Duration) -> Topology {
        let mut t = topology.clone();
        if self.is_active(now) {
            t.set_destination(self.spec.target, self.spec.new_dest)
                .expect("attack specs are validated on construction");
        } else {
            t.restore(self.spec.target);
        }
        t
    }

    /// Tumbling windows over the whole run; a window is `Attack` iff it
    /// overlaps the attack interval.
    pub fn label_windows(&self, window_len: Duration) -> Vec<WindowLabel> {
        assert!(!window_len.is_zero(), "window length must be positive");
        let total = self.total().as_micros();
        let len = window_len.as_micros();
        let count = total.div_ceil(len) as usize;
        let (a0, a1) = self.attack_interval();
        let (a0, a1) = (a0.as_micros(), a1.as_micros());
        (0..count)
            .map(|i| {
                let w0 = i as u128 * len;
                let w1 = w0 + len;
                let hit = a0 < a1 && w0 < a1 && a0 < w1;
                WindowLabel { window_index: i, truth: if hit { Truth::Attack } else { Truth::Normal } }
            })
            .collect()
    }
}

pub fn apply_plan(topology: &Topology, plan: &AttackPlan, now: Duration) -> Topology {
    plan.apply(topology, now)
}

pub fn label_windows(plan: &AttackPlan, window_len: Duration) -> Vec<WindowLabel> {
    plan.label_windows(window_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(s: &str) -> NodeId {
        s.parse().unwrap()
    }

    fn min(m: u64) -> Duration {
        Duration::from_secs(60 * m)
    }

    #[test]
    fn catalogue_sizes() {
        assert_eq!(enumerate_attacks(Scenario::I).len(), 12);
        assert_eq!(enumerate_attacks(Scenario::II).len(), 5);
        assert_eq!(enumerate_attacks(Scenario::III).len(), 7);
        let tokens: Vec<String> = enumerate_attacks(Scenario::I).iter().map(|s| s.to_string()).collect();
        for t in ["E1>R2", "E1>R3", "E1>C"] {
            assert!(tokens.contains(&t.to_string()));
        }
    }

    #[test]
    fn catalogue_is_valid_and_distinct() {
        let mut all = BTreeSet::new();
        for s in Scenario::ALL {
            let base = Topology::build(s);
            for spec in enumerate_attacks(s) {
                assert_eq!(AttackSpec::new(s, spec.target, spec.new_dest), Ok(spec));
                assert_ne!(base.normal_dest(spec.target), Some(spec.new_dest));
                all.insert(spec);
            }
        }
        assert_eq!(all.len(), 24);
    }

    #[test]
    fn scenario_membership_rules() {
        assert!(AttackSpec::parse(Scenario::I, "E1>R1").is_err());
        assert!(AttackSpec::parse(Scenario::I, "R1>R2").is_err());
        assert!(AttackSpec::parse(Scenario::II, "R3>R2").is_err());
        assert!(AttackSpec::parse(Scenario::III, "E1>R2").is_err());
        assert!(AttackSpec::parse(Scenario::III, "E1-A").is_err());
        assert_eq!(AttackSpec::parse(Scenario::III, "E1>A").unwrap().slug(), "E1-A");
    }

    #[test]
    fn plan_applies_only_inside_interval() {
        let spec = AttackSpec::parse(Scenario::I, "E4>R1").unwrap();
        let plan = AttackPlan::new(spec);
        let base = Topology::build(Scenario::I);
        assert_eq!(plan.total(), min(35));
        assert_eq!(plan.apply(&base, Duration::ZERO), base);
        assert_eq!(plan.apply(&base, min(22)).current_dest(n("E4")), Some(n("R1")));
        assert!(plan.apply(&base, min(26)).is_baseline());
        assert!(plan.apply(&base, min(25)).is_baseline());
        let once = plan.apply(&base, min(22));
        assert_eq!(plan.apply(&once, min(22)), once);
        assert!(plan.apply(&once, min(30)).is_baseline());
    }

    #[test]
    fn scenario_three_paths_end_at_attacker() {
        for spec in enumerate_attacks(Scenario::III) {
            let plan = AttackPlan::new(spec);
            let t = plan.apply(&Topology::build(Scenario::III), min(21));
            assert_eq!(t.route_path(spec.target).unwrap().terminal(), NodeId::ATTACKER);
        }
    }

    #[test]
    fn default_labels() {
        let plan = AttackPlan::new(enumerate_attacks(Scenario::III)[0]);
        let labels = plan.label_windows(min(1));
        assert_eq!(labels.len(), 35);
        let attack: Vec<usize> = labels.iter().filter(|l| l.truth == Truth::Attack).map(|l| l.window_index).collect();
        assert_eq!(attack, vec![20, 21, 22, 23, 24]);
    }

    #[test]
    fn half_minute_labels() {
        let plan = AttackPlan::new(enumerate_attacks(Scenario::III)[0]);
        let labels = plan.label_windows(Duration::from_secs(30));
        assert_eq!(labels.len(), 70);
        // brute force: a half-minute window [30i, 30i+30) overlaps [1200, 1500)
        let expected = (0..70u64).filter(|i| 30 * i < 1500 && 1200 < 30 * i + 30).count();
        assert_eq!(expected, 10);
        assert_eq!(labels.iter().filter(|l| l.truth == Truth::Attack).count(), expected);
    }

    #[test]
    fn empty_attack_window_is_all_normal() {
        let mut plan = AttackPlan::new(enumerate_attacks(Scenario::I)[0]);
        plan.attack_window = Duration::ZERO;
        assert!(plan.label_windows(min(1)).iter().all(|l| l.truth == Truth::Normal));
    }

    #[test]
    fn observers_follow_changed_paths() {
        let set = |v: &[&str]| v.iter().map(|s| n(s)).collect::<BTreeSet<_>>();
        let obs = |sc, tok| AttackSpec::parse(sc, tok).unwrap().observers();
        assert_eq!(obs(Scenario::III, "E1>A"), set(&["R1"]));
        assert_eq!(obs(Scenario::III, "R3>A"), set(&["R3"]));
        assert_eq!(obs(Scenario::I, "E1>R2"), set(&["R1", "R2"]));
        assert_eq!(obs(Scenario::II, "R3>R1"), set(&["R1", "R2", "R3"]));
        assert_eq!(obs(Scenario::III, "E4>A"), set(&["R2"]));
    }
}
