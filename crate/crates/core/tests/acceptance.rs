//! Acceptance criteria, one pass/fail line each. Every criterion returns the
//! serialized reports it produced so the determinism criterion can re-run it
//! and compare bytes.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use idonly::sim::adversary::AdversarySpec;
use idonly::sim::explore::{explore_rb, ExploreParams, DEFAULT_CAP};
use idonly::sim::partition::{run_partition_demo, BLOCK_A, BLOCK_B};
use idonly::sim::scenario::{ChurnAction, ChurnSpec, NodeSpec, Protocol, Scenario};
use idonly::sim::verdict::RunReport;
use idonly::sim::{run_scenario, Verdict};
use idonly::{NodeId, Value};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

struct Outcome {
    passed: bool,
    detail: String,
    reports: Vec<String>,
}

/// Collects runs for one criterion, remembering the first failure.
#[derive(Default)]
struct Tally {
    runs: usize,
    failure: Option<String>,
    reports: Vec<String>,
}

impl Tally {
    fn fail(&mut self, why: impl FnOnce() -> String) {
        if self.failure.is_none() {
            self.failure = Some(why());
        }
    }

    /// Runs `s`, requires `props` (every property when empty) to pass and
    /// hands the verdict to `extra` for criterion-specific checks.
    fn run(&mut self, s: &Scenario, props: &[&str], extra: impl FnOnce(&Verdict, &serde_json::Value) -> Result<(), String>) {
        self.runs += 1;
        let outcome = match run_scenario(s) {
            Ok(o) => o,
            Err(e) => return self.fail(|| format!("{}: run aborted: {e}", label(s))),
        };
        let v = &outcome.verdict;
        for p in &v.properties {
            if !p.passed && (props.is_empty() || props.contains(&p.name.as_str())) {
                self.fail(|| {
                    format!("{}: {} failed at round {:?}: {}", label(s), p.name, p.first_violation_round, p.witness.as_deref().unwrap_or(""))
                });
            }
        }
        let outputs = serde_json::to_value(&outcome.outputs).expect("outputs serialize");
        if let Err(e) = extra(v, &outputs) {
            self.fail(|| format!("{}: {e}", label(s)));
        }
        self.reports.push(RunReport::new(s, outcome, None).to_json());
    }

    fn finish(self, what: String) -> Outcome {
        Outcome {
            passed: self.failure.is_none(),
            detail: match self.failure {
                None => format!("{what} ({} runs)", self.runs),
                Some(f) => format!("{what} ({} runs), first failure: {f}", self.runs),
            },
            reports: self.reports,
        }
    }
}

fn label(s: &Scenario) -> String {
    format!("{} n={} seed={} adversary={}", s.protocol.name(), s.nodes.len(), s.seed, s.adversary.name)
}

fn ok(_: &Verdict, _: &serde_json::Value) -> Result<(), String> {
    Ok(())
}

/// `n` distinct sparse ids, `f` of them faulty, in random order.
fn roster(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Vec<(u64, bool)> {
    let mut ids = BTreeSet::new();
    while ids.len() < n {
        ids.insert(rng.gen_range(1..=10_000u64));
    }
    let mut ids: Vec<u64> = ids.into_iter().collect();
    ids.shuffle(rng);
    ids.into_iter().enumerate().map(|(i, id)| (id, i < f)).collect()
}

fn spec(id: u64, faulty: bool) -> NodeSpec {
    if faulty {
        NodeSpec::faulty(id)
    } else {
        NodeSpec::correct(id)
    }
}

fn max_f(n: usize) -> usize {
    (n - 1) / 3
}

/// Every catalog strategy with parameters that make it act on `protocol`.
fn catalog(protocol: Protocol) -> Vec<AdversarySpec> {
    let crash = match protocol {
        Protocol::Rb | Protocol::Approx => 2,
        Protocol::Rotor => 4,
        _ => 6,
    };
    vec![
        AdversarySpec::named("silent"),
        AdversarySpec::named("crash_at").with("round", json!(crash)),
        AdversarySpec::named("equivocator"),
        AdversarySpec::named("echo_forger"),
        AdversarySpec::named("partial_presence"),
        AdversarySpec::named("opinion_splitter"),
        AdversarySpec::named("fake_instance_injector"),
        AdversarySpec::named("churn_liar"),
        AdversarySpec::named("random"),
    ]
}

fn criterion_1() -> Outcome {
    let mut t = Tally::default();
    for (k, n) in [4usize, 7, 10, 13].into_iter().enumerate() {
        for (j, adv) in catalog(Protocol::Rb).into_iter().enumerate() {
            let seed = (k * 100 + j) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nodes = roster(&mut rng, n, max_f(n));
            let sender = nodes.iter().find(|(_, faulty)| !faulty).expect("a correct node").0;
            let nodes = nodes
                .iter()
                .map(|&(id, faulty)| if id == sender { spec(id, faulty).input(1) } else { spec(id, faulty) })
                .collect();
            let mut s = Scenario::new(Protocol::Rb, nodes);
            s.seed = seed;
            s.sender = Some(NodeId(sender));
            s.adversary = adv;
            t.run(&s, &[], |v, _| match v.metrics.termination.iter().find(|(_, r)| **r != Some(3)) {
                None => Ok(()),
                Some((id, r)) => Err(format!("node {id} accepted in round {r:?}")),
            });
        }
    }
    t.finish("rb correct sender: every correct node accepts in round 3, whole catalog".into())
}

fn criterion_2() -> Outcome {
    let mut t = Tally::default();
    for n in [4usize, 7, 10] {
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + n as u64);
            let nodes = roster(&mut rng, n, max_f(n));
            let sender = nodes.iter().find(|(_, faulty)| *faulty).expect("a faulty node").0;
            let nodes = nodes
                .iter()
                .map(|&(id, faulty)| if id == sender { spec(id, faulty).input(1) } else { spec(id, faulty) })
                .collect();
            let mut s = Scenario::new(Protocol::Rb, nodes);
            s.seed = seed;
            s.sender = Some(NodeId(sender));
            s.adversary = AdversarySpec::named("random");
            t.run(&s, &["unforgeability", "relay"], ok);
        }
    }
    t.finish("rb Byzantine sender: no forged acceptance, acceptance spread <= 1 round".into())
}

fn criterion_3() -> Outcome {
    let mut reports = Vec::new();
    let mut failure = None;
    let mut summary = Vec::new();
    for byzantine_sender in [false, true] {
        let p = ExploreParams { n: 4, f: 1, horizon: 8, byzantine_sender };
        match explore_rb(p, DEFAULT_CAP) {
            Ok(r) => {
                if !r.passed() {
                    failure.get_or_insert(format!("{p:?}: {} violating branches", r.violating_branches));
                }
                summary.push(format!("{} branches", r.branches));
                reports.push(serde_json::to_string(&r).expect("report serializes"));
            }
            Err(e) => {
                failure.get_or_insert(format!("{p:?}: {e}"));
            }
        }
    }
    let mut control = 0u128;
    for byzantine_sender in [false, true] {
        let p = ExploreParams { n: 3, f: 1, horizon: 8, byzantine_sender };
        match explore_rb(p, DEFAULT_CAP) {
            Ok(r) => {
                control += r.violating_branches;
                reports.push(serde_json::to_string(&r).expect("report serializes"));
            }
            Err(e) => {
                failure.get_or_insert(format!("{p:?}: {e}"));
            }
        }
    }
    if control == 0 {
        failure.get_or_insert("negative control n=3 f=1 found no violation".into());
    }
    let what = format!(
        "rb exhaustive n=4 f=1 horizon 8: {}, zero violations; n=3 control: {control} violating branches",
        summary.join(" + ")
    );
    Outcome {
        passed: failure.is_none(),
        detail: match failure {
            None => what,
            Some(f) => format!("{what}; failure: {f}"),
        },
        reports,
    }
}

fn criterion_4() -> Outcome {
    let mut t = Tally::default();
    let adversaries = catalog(Protocol::Rotor);
    for seed in 0..1000u64 {
        let n = [4usize, 7, 10, 13][(seed % 4) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7_000);
        let f = rng.gen_range(0..=max_f(n));
        let nodes = roster(&mut rng, n, f)
            .into_iter()
            .map(|(id, faulty)| spec(id, faulty).input(rng.gen_range(0..=1)))
            .collect();
        let mut s = Scenario::new(Protocol::Rotor, nodes);
        s.seed = seed;
        s.adversary = adversaries[(seed / 4) as usize % adversaries.len()].clone();
        t.run(&s, &[], ok);
    }
    t.finish("rotor: termination within n+1 iterations and a good round in every run".into())
}

fn criterion_5() -> Outcome {
    let mut t = Tally::default();
    let adversaries = catalog(Protocol::Consensus);
    for (k, n) in [4usize, 7, 10, 13].into_iter().enumerate() {
        for (j, adv) in adversaries.iter().enumerate() {
            for v in [0i64, 1] {
                let seed = (k * 100 + j * 2) as u64 + v as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 50_000);
                let nodes =
                    roster(&mut rng, n, max_f(n)).into_iter().map(|(id, faulty)| spec(id, faulty).input(v)).collect();
                let mut s = Scenario::new(Protocol::Consensus, nodes);
                s.seed = seed;
                s.adversary = adv.clone();
                t.run(&s, &[], |_, outputs| {
                    for (id, o) in outputs.as_object().expect("map") {
                        if o["decision"] != json!(v) || o["phase"] != json!(1) {
                            return Err(format!("unanimous {v}: node {id} output {o}"));
                        }
                    }
                    Ok(())
                });
            }
        }
    }
    let unanimous = t.runs;
    let mut max_rounds = 0;
    let mut bound_ok = true;
    for n in [4usize, 7, 10, 13] {
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 17 + n as u64 + 60_000);
            let f = max_f(n);
            let mut nodes: Vec<NodeSpec> = roster(&mut rng, n, f)
                .into_iter()
                .map(|(id, faulty)| spec(id, faulty).input(rng.gen_range(0..=1)))
                .collect();
            // Force both values among the correct nodes.
            let correct: Vec<usize> = (0..n).filter(|&i| !nodes[i].faulty).collect();
            nodes[correct[0]].input = Some(idonly::sim::scenario::InputValue::Int(0));
            nodes[correct[1]].input = Some(idonly::sim::scenario::InputValue::Int(1));
            let mut s = Scenario::new(Protocol::Consensus, nodes);
            s.seed = seed;
            s.adversary = adversaries[seed as usize % adversaries.len()].clone();
            let bound = 2 + 5 * (2 * f as u64 + 3);
            t.run(&s, &["validity", "agreement", "termination", "no_conflicting_quorums"], |v, _| {
                let decided = v.metrics.termination.values().flatten().max().copied().unwrap_or(0);
                max_rounds = max_rounds.max(decided);
                if decided > bound {
                    bound_ok = false;
                }
                Ok(())
            });
        }
    }
    t.finish(format!(
        "consensus: {unanimous} unanimous runs decide in phase 1; mixed runs keep agreement/validity; \
         latest decision round {max_rounds} (bound 2+5(2f+3) {})",
        if bound_ok { "held" } else { "exceeded, logged only" }
    ))
}

fn criterion_6() -> Outcome {
    let mut t = Tally::default();
    let adversaries = catalog(Protocol::Approx);
    for n in [4usize, 7, 10] {
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 13 + n as u64 + 80_000);
            let f = rng.gen_range(0..=max_f(n));
            let nodes = roster(&mut rng, n, f)
                .into_iter()
                .map(|(id, faulty)| {
                    let q: i64 = rng.gen_range(1..=6);
                    let p: i64 = rng.gen_range(-30..=30);
                    NodeSpec {
                        input: Some(idonly::sim::scenario::InputValue::Text(format!("{p}/{q}"))),
                        ..spec(id, faulty)
                    }
                })
                .collect();
            let mut s = Scenario::new(Protocol::Approx, nodes);
            s.seed = seed;
            s.iterations = Some(rng.gen_range(1..=3));
            s.adversary = adversaries[seed as usize % adversaries.len()].clone();
            t.run(&s, &[], ok);
        }
    }
    t.finish("approx: containment, median survival, halving with exact rationals".into())
}

fn criterion_7() -> Outcome {
    let mut t = Tally::default();
    let others = catalog(Protocol::Parallel);
    let anchors = ["r2", "r3", "r5", "phase2"];
    for seed in 0..1000u64 {
        let n = [4usize, 7, 10][(seed % 3) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 90_000);
        let f = rng.gen_range(0..=max_f(n));
        let common: Vec<(u64, i64)> = (1..=rng.gen_range(1..=3u64)).map(|i| (i, rng.gen_range(0..=3))).collect();
        let nodes = roster(&mut rng, n, f)
            .into_iter()
            .map(|(id, faulty)| {
                let mut pairs = common.clone();
                // Some nodes hold a pair nobody else has.
                if rng.gen_bool(0.4) {
                    pairs.push((100 + id, rng.gen_range(0..=3)));
                }
                // Some share an id but disagree on the value.
                if rng.gen_bool(0.3) {
                    pairs.push((50, rng.gen_range(0..=3)));
                }
                NodeSpec { pairs, ..spec(id, faulty) }
            })
            .collect();
        let mut s = Scenario::new(Protocol::Parallel, nodes);
        s.seed = seed;
        s.adversary = if seed % 5 < 4 {
            AdversarySpec::named("fake_instance_injector")
                .with("at", json!([anchors[(seed % 5) as usize]]))
                .with("value", json!(rng.gen_range(0..=3)))
        } else {
            others[(seed / 5) as usize % others.len()].clone()
        };
        t.run(&s, &[], ok);
    }
    t.finish("parallel: validity, agreement, no phantom output under fake ids at R2/R3/R5/phase 2".into())
}

/// A churn schedule for `rounds` rounds keeping 4..=13 nodes and n > 3f.
fn dynamic_scenario(seed: u64, rounds: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 120_000);
    let n0 = rng.gen_range(4..=7);
    let f0 = rng.gen_range(0..=max_f(n0));
    let mut nodes: Vec<NodeSpec> = roster(&mut rng, n0, f0).into_iter().map(|(id, faulty)| spec(id, faulty)).collect();
    let submitter = nodes.iter().position(|s| !s.faulty).expect("a correct node");
    nodes[submitter].submits = true;
    let keep = nodes[submitter].id;
    // (id, faulty, joined, left)
    let mut life: Vec<(NodeId, bool, u64, Option<u64>)> = nodes.iter().map(|s| (s.id, s.faulty, 1, None)).collect();
    let mut churn = Vec::new();
    let mut next_id = 20_000 + seed * 100;
    for r in 2..rounds.saturating_sub(10) {
        if !rng.gen_bool(0.08) {
            continue;
        }
        let present: Vec<usize> = (0..life.len()).filter(|&i| life[i].3.is_none()).collect();
        let n = present.len();
        let f = present.iter().filter(|&&i| life[i].1).count();
        if rng.gen_bool(0.5) && n < 13 {
            let faulty = rng.gen_bool(0.3) && n + 1 > 3 * (f + 1);
            next_id += 1;
            life.push((NodeId(next_id), faulty, r, None));
            nodes.push(spec(next_id, faulty));
            churn.push(ChurnSpec { round: r, node: NodeId(next_id), action: ChurnAction::Join });
        } else if n > 4 {
            let leavable: Vec<usize> = present
                .iter()
                .copied()
                .filter(|&i| life[i].0 != keep && life[i].2 + 3 <= r)
                .filter(|&i| {
                    let f2 = f - usize::from(life[i].1);
                    n - 1 > 3 * f2
                })
                .collect();
            if let Some(&i) = leavable.choose(&mut rng) {
                life[i].3 = Some(r);
                churn.push(ChurnSpec { round: r, node: life[i].0, action: ChurnAction::Leave });
            }
        }
    }
    let adversaries = [
        AdversarySpec::named("churn_liar").with("round", json!(rng.gen_range(4..=60))),
        AdversarySpec::named("equivocator"),
        AdversarySpec::named("random"),
        AdversarySpec::named("partial_presence"),
        AdversarySpec::named("echo_forger"),
        AdversarySpec::named("crash_at").with("round", json!(rng.gen_range(3..=100))),
        AdversarySpec::named("silent"),
    ];
    let mut s = Scenario::new(Protocol::Dynamic, nodes);
    s.churn = churn;
    s.rounds = Some(rounds);
    s.seed = seed;
    s.adversary = adversaries[seed as usize % adversaries.len()].clone();
    s
}

fn criterion_8() -> Outcome {
    let mut t = Tally::default();
    for seed in 0..200u64 {
        let s = dynamic_scenario(seed, 200);
        if let Err(e) = s.validate() {
            t.fail(|| format!("generated schedule {seed} invalid: {e}"));
            continue;
        }
        t.run(&s, &[], ok);
    }
    t.finish("dynamic: chain prefix, growth within the finality window, sound finality, 200 rounds".into())
}

fn criterion_9() -> Outcome {
    let mut failure = None;
    let mut reports = Vec::new();
    match run_partition_demo(4, 12) {
        Ok(r) => {
            let all = |b: &str, v: i64| r.decisions[b].values().all(|d| *d == Some(Value::Val(v)));
            if !(all(BLOCK_A, 1) && all(BLOCK_B, 0) && r.disagreement) {
                failure = Some(format!("decisions {:?}", r.decisions));
            }
            reports.push(serde_json::to_string(&r).expect("report serializes"));
        }
        Err(e) => failure = Some(e.to_string()),
    }
    Outcome {
        passed: failure.is_none(),
        detail: match failure {
            None => "partition demo 4/4, cross delay 12: block A decides 1, block B decides 0".into(),
            Some(f) => format!("partition demo: {f}"),
        },
        reports,
    }
}

type Criterion = (u32, fn() -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, criterion_1),
    (2, criterion_2),
    (3, criterion_3),
    (4, criterion_4),
    (5, criterion_5),
    (6, criterion_6),
    (7, criterion_7),
    (8, criterion_8),
    (9, criterion_9),
];

fn line(k: u32, passed: bool, secs: f64, detail: &str) {
    println!("criterion {k:>2}: {} [{secs:.1}s] {detail}", if passed { "PASS" } else { "FAIL" });
}

fn main() -> ExitCode {
    // Optional criterion numbers on the command line restrict the run.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected: Vec<Criterion> =
        CRITERIA.iter().copied().filter(|(k, _)| only.is_empty() || only.contains(k)).collect();
    // Criteria are independent, so run them side by side.
    let first: Vec<(u32, Outcome, f64)> = std::thread::scope(|sc| {
        let handles: Vec<_> = selected
            .iter()
            .map(|&(k, c)| {
                sc.spawn(move || {
                    let t = Instant::now();
                    let o = c();
                    (k, o, t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("criterion panicked")).collect()
    });
    let mut all = true;
    for (k, o, secs) in &first {
        line(*k, o.passed, *secs, &o.detail);
        all &= o.passed;
    }

    let t = Instant::now();
    let again: Vec<(u32, Vec<String>)> = std::thread::scope(|sc| {
        let handles: Vec<_> = selected.iter().map(|&(k, c)| sc.spawn(move || (k, c().reports))).collect();
        handles.into_iter().map(|h| h.join().expect("criterion panicked")).collect()
    });
    let differing: Vec<u32> = first
        .iter()
        .zip(&again)
        .filter(|((_, o, _), (_, r))| o.reports != *r)
        .map(|((k, _, _), _)| *k)
        .collect();
    let total: usize = first.iter().map(|(_, o, _)| o.reports.len()).sum();
    let deterministic = differing.is_empty();
    line(
        10,
        deterministic,
        t.elapsed().as_secs_f64(),
        &if deterministic {
            format!("determinism: {total} reports byte-identical on re-run")
        } else {
            format!("determinism: reports differ for criteria {differing:?}")
        },
    );
    all &= deterministic;
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
