//! Byzantine strategies. They work on payloads only, so the same strategy
//! applies to every protocol; each starts from what the Byzantine node's
//! correct shadow would have sent.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::{Kind, NodeId, Payload, Rational, Tag, Value};
use crate::sim::engine::{Adversary, Injection, View};
use crate::sim::scenario::ScenarioError;

pub const STRATEGIES: &[&str] = &[
    "silent",
    "crash_at",
    "equivocator",
    "echo_forger",
    "partial_presence",
    "opinion_splitter",
    "fake_instance_injector",
    "churn_liar",
    "random",
];

/// Id used by forgers for a node that does not exist.
pub const GHOST: NodeId = NodeId(999_999);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl AdversarySpec {
    pub fn named(name: &str) -> Self {
        AdversarySpec { name: name.to_string(), params: Default::default() }
    }

    pub fn with(mut self, key: &str, value: serde_json::Value) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CrashParams {
    round: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitParams {
    #[serde(default)]
    low: i64,
    #[serde(default = "one")]
    high: i64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForgerParams {
    #[serde(default = "forged_value")]
    value: i64,
    #[serde(default)]
    origins: Option<Vec<NodeId>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FractionParams {
    #[serde(default = "half")]
    fraction: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InjectorParams {
    #[serde(default = "fake_instance")]
    instance: u64,
    #[serde(default = "forged_value")]
    value: i64,
    #[serde(default = "all_anchors")]
    at: Vec<Anchor>,
    #[serde(default)]
    session: Option<u64>,
    /// Added to every injection round (for runs that start late).
    #[serde(default)]
    offset: u64,
    #[serde(default = "half")]
    fraction: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChurnLiarParams {
    #[serde(default = "churn_round")]
    round: u64,
    #[serde(default = "half")]
    fraction: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RandomParams {
    #[serde(default)]
    low: i64,
    #[serde(default = "two")]
    high: i64,
}

fn one() -> i64 {
    1
}
fn two() -> i64 {
    2
}
fn forged_value() -> i64 {
    42
}
fn half() -> f64 {
    0.5
}
fn fake_instance() -> u64 {
    1_000_000
}
fn churn_round() -> u64 {
    6
}
fn all_anchors() -> Vec<Anchor> {
    vec![Anchor::R2, Anchor::R3, Anchor::R5, Anchor::Phase2]
}

/// Where a fake instance id first reaches correct nodes, named after the
/// phase-1 sub-round whose adoption rule it targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    R2,
    R3,
    R5,
    Phase2,
}

impl Anchor {
    /// `(send round, kind)` pairs.
    fn injections(self, v: Value) -> Vec<(u64, Kind)> {
        match self {
            Anchor::R2 => vec![(3, Kind::Input(v))],
            Anchor::R3 => vec![(4, Kind::Prefer(v))],
            Anchor::R5 => vec![(5, Kind::StrongPrefer(v))],
            Anchor::Phase2 => {
                vec![(8, Kind::Input(v)), (9, Kind::Prefer(v)), (10, Kind::StrongPrefer(v))]
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Strategy {
    Silent,
    CrashAt(CrashParams),
    Equivocator(SplitParams),
    EchoForger(ForgerParams),
    PartialPresence(FractionParams),
    OpinionSplitter(SplitParams),
    FakeInstanceInjector(InjectorParams),
    ChurnLiar(ChurnLiarParams),
    Random(RandomParams),
}

fn params<T: DeserializeOwned>(spec: &AdversarySpec) -> Result<T, ScenarioError> {
    serde_json::from_value(serde_json::Value::Object(spec.params.clone())).map_err(|e| {
        ScenarioError::Invalid(format!("adversary {} parameters: {e}", spec.name))
    })
}

fn check_fraction(f: f64) -> Result<(), ScenarioError> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(ScenarioError::Invalid(format!("fraction {f} outside [0, 1]")))
    }
}

pub struct CatalogAdversary {
    strategy: Strategy,
    rng: ChaCha8Rng,
}

impl CatalogAdversary {
    pub fn new(spec: &AdversarySpec, seed: u64) -> Result<Self, ScenarioError> {
        let strategy = match spec.name.as_str() {
            "silent" => {
                params::<serde_json::Map<String, serde_json::Value>>(spec).and_then(|m| {
                    if m.is_empty() {
                        Ok(Strategy::Silent)
                    } else {
                        Err(ScenarioError::Invalid("silent takes no parameters".into()))
                    }
                })?
            }
            "crash_at" => Strategy::CrashAt(params(spec)?),
            "equivocator" => Strategy::Equivocator(params(spec)?),
            "echo_forger" => Strategy::EchoForger(params(spec)?),
            "partial_presence" => {
                let p: FractionParams = params(spec)?;
                check_fraction(p.fraction)?;
                Strategy::PartialPresence(p)
            }
            "opinion_splitter" => Strategy::OpinionSplitter(params(spec)?),
            "fake_instance_injector" => {
                let p: InjectorParams = params(spec)?;
                check_fraction(p.fraction)?;
                Strategy::FakeInstanceInjector(p)
            }
            "churn_liar" => {
                let p: ChurnLiarParams = params(spec)?;
                check_fraction(p.fraction)?;
                Strategy::ChurnLiar(p)
            }
            "random" => {
                let p: RandomParams = params(spec)?;
                if p.low > p.high {
                    return Err(ScenarioError::Invalid("random: low > high".into()));
                }
                Strategy::Random(p)
            }
            other => {
                return Err(ScenarioError::Invalid(format!(
                    "unknown adversary {other:?} (known: {})",
                    STRATEGIES.join(", ")
                )))
            }
        };
        Ok(CatalogAdversary { strategy, rng: ChaCha8Rng::seed_from_u64(seed) })
    }
}

/// The first `ceil(fraction * len)` ids in id order, but never all of them.
fn strict_prefix(all: &[NodeId], fraction: f64) -> BTreeSet<NodeId> {
    let mut sorted = all.to_vec();
    sorted.sort();
    let k = ((fraction * sorted.len() as f64).ceil() as usize).min(sorted.len().saturating_sub(1));
    sorted.into_iter().take(k).collect()
}

/// Lower half of the ids, for strategies that tell two stories.
fn lower_half(all: &[NodeId]) -> BTreeSet<NodeId> {
    let mut sorted = all.to_vec();
    sorted.sort();
    let k = sorted.len().div_ceil(2);
    sorted.into_iter().take(k).collect()
}

fn set_value(p: &Payload, v: i64) -> Payload {
    p.map_values(
        &mut |x| if x.is_bot() { x } else { Value::Val(v) },
        &mut |_| Rational::from_integer(v as i128),
    )
}

fn shadow_sends(view: &View<'_>, b: NodeId) -> Vec<(NodeId, Payload)> {
    let mut out = Vec::new();
    for o in view.shadow.get(&b).into_iter().flatten() {
        for to in view.recipients(o.dest) {
            out.push((to, o.payload.clone()));
        }
    }
    out
}

fn to_all(view: &View<'_>, from: NodeId, payload: Payload) -> Vec<Injection> {
    view.active
        .iter()
        .map(|&dest| Injection { from, dest, payload: payload.clone() })
        .collect()
}

impl Adversary for CatalogAdversary {
    fn act(&mut self, view: &View<'_>) -> Vec<Injection> {
        let mut out = Vec::new();
        for &b in view.byzantine {
            if !view.active.contains(&b) {
                continue;
            }
            let honest = shadow_sends(view, b);
            let inj = |dest: NodeId, payload: Payload| Injection { from: b, dest, payload };
            match &self.strategy {
                Strategy::Silent => {}
                Strategy::CrashAt(p) => {
                    if view.round < p.round {
                        out.extend(honest.into_iter().map(|(d, q)| inj(d, q)));
                    }
                }
                Strategy::Equivocator(p) => {
                    let low = lower_half(view.all);
                    for (d, q) in honest {
                        let v = if low.contains(&d) { p.low } else { p.high };
                        out.push(inj(d, set_value(&q, v)));
                    }
                }
                Strategy::OpinionSplitter(p) => {
                    let low = lower_half(view.all);
                    for (d, q) in honest {
                        let q = if matches!(q.kind, Kind::Opinion(_)) {
                            set_value(&q, if low.contains(&d) { p.low } else { p.high })
                        } else {
                            q
                        };
                        out.push(inj(d, q));
                    }
                }
                Strategy::EchoForger(p) => {
                    out.extend(honest.into_iter().map(|(d, q)| inj(d, q)));
                    if view.round >= 2 {
                        let origins = p.origins.clone().unwrap_or_else(|| {
                            let mut o: Vec<NodeId> = view.all.to_vec();
                            o.push(GHOST);
                            o
                        });
                        for o in origins {
                            let body = Some(Value::Val(p.value));
                            out.extend(to_all(view, b, Payload::new(Kind::Echo { origin: o, body })));
                        }
                        let ghost = Payload::new(Kind::Echo { origin: GHOST, body: None });
                        out.extend(to_all(view, b, ghost));
                    }
                }
                Strategy::PartialPresence(p) => {
                    let subset = strict_prefix(view.all, p.fraction);
                    out.extend(
                        honest.into_iter().filter(|(d, _)| subset.contains(d)).map(|(d, q)| inj(d, q)),
                    );
                }
                Strategy::FakeInstanceInjector(p) => {
                    out.extend(honest.into_iter().map(|(d, q)| inj(d, q)));
                    let subset = strict_prefix(view.all, p.fraction);
                    let tag = Tag { session: p.session, instance: Some(p.instance) };
                    for a in &p.at {
                        for (r, kind) in a.injections(Value::Val(p.value)) {
                            if r + p.offset == view.round {
                                for &d in view.active.iter().filter(|d| subset.contains(d)) {
                                    out.push(inj(d, Payload::tagged(tag, kind.clone())));
                                }
                            }
                        }
                    }
                }
                Strategy::ChurnLiar(p) => {
                    out.extend(honest.into_iter().map(|(d, q)| inj(d, q)));
                    if view.round == p.round {
                        let subset = strict_prefix(view.all, p.fraction);
                        for &d in view.active.iter().filter(|d| subset.contains(d)) {
                            out.push(inj(d, Payload::new(Kind::Absent)));
                        }
                    }
                }
                Strategy::Random(p) => {
                    for &d in view.active {
                        let mine: Vec<&Payload> =
                            honest.iter().filter(|(to, _)| *to == d).map(|(_, q)| q).collect();
                        match self.rng.gen_range(0..4u8) {
                            0 => {}
                            1 => out.extend(mine.into_iter().map(|q| inj(d, q.clone()))),
                            2 => {
                                for q in mine {
                                    let v = self.rng.gen_range(p.low..=p.high);
                                    out.push(inj(d, set_value(q, v)));
                                }
                            }
                            _ => {
                                for q in mine {
                                    out.push(inj(d, q.clone()));
                                    let v = self.rng.gen_range(p.low..=p.high);
                                    out.push(inj(d, set_value(q, v)));
                                }
                                if self.rng.gen_bool(0.25) {
                                    let origin = view.all[self.rng.gen_range(0..view.all.len())];
                                    let body = Some(Value::Val(self.rng.gen_range(p.low..=p.high)));
                                    out.push(inj(d, Payload::new(Kind::Echo { origin, body })));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Adversary that sends exactly what correct shadows would send.
pub struct Honest;

impl Adversary for Honest {
    fn act(&mut self, view: &View<'_>) -> Vec<Injection> {
        let mut out = Vec::new();
        for &b in view.byzantine {
            for (dest, payload) in shadow_sends(view, b) {
                out.push(Injection { from: b, dest, payload });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::model::Outgoing;

    fn view_fixture() -> (Vec<NodeId>, BTreeSet<NodeId>, BTreeSet<NodeId>, BTreeMap<NodeId, Vec<Outgoing>>) {
        let all: Vec<NodeId> = [1, 2, 3, 4].map(NodeId).to_vec();
        let active: BTreeSet<NodeId> = all.iter().copied().collect();
        let byz = BTreeSet::from([NodeId(4)]);
        let shadow = BTreeMap::from([(
            NodeId(4),
            vec![Outgoing::broadcast(Payload::new(Kind::Input(Value::Val(9))))],
        )]);
        (all, active, byz, shadow)
    }

    fn act(spec: AdversarySpec, round: u64) -> Vec<Injection> {
        let (all, active, byz, shadow) = view_fixture();
        let correct = BTreeMap::new();
        let view = View { round, all: &all, active: &active, byzantine: &byz, correct: &correct, shadow: &shadow };
        CatalogAdversary::new(&spec, 7).unwrap().act(&view)
    }

    #[test]
    fn silent_sends_nothing() {
        assert!(act(AdversarySpec::named("silent"), 3).is_empty());
    }

    #[test]
    fn equivocator_splits_inputs() {
        let out = act(AdversarySpec::named("equivocator"), 3);
        let got: Vec<(u64, Kind)> = out.iter().map(|i| (i.dest.0, i.payload.kind.clone())).collect();
        assert_eq!(
            got,
            vec![
                (1, Kind::Input(Value::Val(0))),
                (2, Kind::Input(Value::Val(0))),
                (3, Kind::Input(Value::Val(1))),
                (4, Kind::Input(Value::Val(1))),
            ]
        );
    }

    #[test]
    fn crash_stops_at_round() {
        let spec = AdversarySpec::named("crash_at").with("round", 3.into());
        assert_eq!(act(spec.clone(), 2).len(), 4);
        assert!(act(spec, 3).is_empty());
    }

    #[test]
    fn partial_presence_is_strict_subset() {
        let spec = AdversarySpec::named("partial_presence").with("fraction", 1.0.into());
        assert_eq!(act(spec, 1).len(), 3);
    }

    #[test]
    fn echo_forger_forges_for_everyone() {
        let out = act(AdversarySpec::named("echo_forger"), 2);
        assert!(out.iter().any(|i| i.payload.kind
            == Kind::Echo { origin: GHOST, body: Some(Value::Val(42)) }));
        assert!(out.iter().all(|i| i.from == NodeId(4)));
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(CatalogAdversary::new(&AdversarySpec::named("nope"), 0).is_err());
        assert!(CatalogAdversary::new(&AdversarySpec::named("crash_at"), 0).is_err());
        let extra = AdversarySpec::named("equivocator").with("bogus", 1.into());
        assert!(CatalogAdversary::new(&extra, 0).is_err());
        let silent = AdversarySpec::named("silent").with("x", 1.into());
        assert!(CatalogAdversary::new(&silent, 0).is_err());
    }

    #[test]
    fn random_is_seeded() {
        let spec = AdversarySpec::named("random");
        let a = act(spec.clone(), 3);
        let b = act(spec, 3);
        assert_eq!(a, b);
    }
}
