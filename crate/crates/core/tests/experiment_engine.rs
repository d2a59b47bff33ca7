mod support;

use ops_core::clock::SimDuration;
use ops_core::control::{Address, Machine, MachineConfig, SharedMachine, Value};
use ops_core::experiment::{
    format_procedure, parse_procedure, validate, ActionKind, Engine, EngineError, NodeStatus,
    ProcedureNode, Services,
};
use std::sync::{mpsc, Arc, Mutex};

use ops_core::experiment::ExpertDesk;
use proptest::prelude::*;

const M1: &str = "SIM.MAGNETS/MAGNET/ARDLMQZM1/CURRENT.SP";
const M2: &str = "SIM.MAGNETS/MAGNET/ARDLMQZM2/CURRENT.SP";

fn addr(s: &str) -> Address {
    s.parse().unwrap()
}

fn machine() -> SharedMachine {
    SharedMachine::new(Machine::new(&MachineConfig::default_machine()).unwrap())
}

fn wait(ms: u64) -> ProcedureNode {
    ProcedureNode::action(ActionKind::Wait {
        seconds: ms as f64 / 1000.0,
    })
}

/// Expected duration in milliseconds: serial stages add, parallel ones take
/// the longest branch.
fn expected_ms(node: &ProcedureNode) -> u64 {
    match node {
        ProcedureNode::Action(a) => match a.kind {
            ActionKind::Wait { seconds } => (seconds * 1000.0).round() as u64,
            _ => 0,
        },
        ProcedureNode::Serial { children, .. } => children.iter().map(expected_ms).sum(),
        ProcedureNode::Parallel { children, .. } => {
            children.iter().map(expected_ms).max().unwrap_or(0)
        }
    }
}

fn wait_tree() -> impl Strategy<Value = ProcedureNode> {
    (0u64..20_000)
        .prop_map(wait)
        .prop_recursive(4, 40, 5, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 1..5).prop_map(ProcedureNode::serial),
                proptest::collection::vec(inner, 1..5).prop_map(ProcedureNode::parallel),
            ]
        })
}

fn any_action() -> impl Strategy<Value = ProcedureNode> {
    let a = prop_oneof![Just(M1), Just(M2)].prop_map(addr);
    prop_oneof![
        a.clone()
            .prop_map(|addr| ProcedureNode::action(ActionKind::ReadValue { addr })),
        (a.clone(), -15.0f64..15.0).prop_map(|(addr, v)| ProcedureNode::action(
            ActionKind::WriteValue {
                addr,
                value: Value::Number(v)
            }
        )),
        (0.0f64..100.0).prop_map(|seconds| ProcedureNode::action(ActionKind::Wait { seconds })),
        (a, 1u32..4).prop_map(
            |(addr, n_cycles)| ProcedureNode::action(ActionKind::CycleMagnet { addr, n_cycles })
        ),
        ("[a-z ]{1,20}", "[ -~]{0,40}").prop_map(|(title, body)| ProcedureNode::action(
            ActionKind::PostLogbook { title, body }
        )),
    ]
}

fn any_tree() -> impl Strategy<Value = ProcedureNode> {
    any_action().prop_recursive(4, 30, 4, |inner| {
        let label = "[a-z]{0,8}";
        prop_oneof![
            (label, proptest::collection::vec(inner.clone(), 1..4))
                .prop_map(|(label, children)| ProcedureNode::Serial { label, children }),
            (label, proptest::collection::vec(inner, 1..4))
                .prop_map(|(label, children)| ProcedureNode::Parallel { label, children }),
        ]
    })
}

proptest! {
    #[test]
    fn serial_adds_and_parallel_takes_the_max(tree in wait_tree()) {
        let m = machine();
        let report = Engine::new().execute(&tree, &m, Services::default()).unwrap();
        prop_assert_eq!(report.total_duration, SimDuration(expected_ms(&tree) * 1_000_000));
        prop_assert_eq!(m.read().clock().0, expected_ms(&tree) * 1_000_000);
    }

    #[test]
    fn documents_round_trip(tree in any_tree()) {
        let doc = format_procedure(&tree);
        prop_assert_eq!(parse_procedure(&doc).unwrap(), tree);
    }
}

fn cycle(a: &str) -> ProcedureNode {
    ProcedureNode::action(ActionKind::CycleMagnet {
        addr: addr(a),
        n_cycles: 1,
    })
}

#[test]
fn parallel_cycling_takes_the_longer_magnet() {
    for (tree, secs) in [
        (ProcedureNode::parallel(vec![cycle(M1), cycle(M2)]), 16),
        (ProcedureNode::serial(vec![cycle(M1), cycle(M2)]), 28),
    ] {
        let m = machine();
        m.write().write(&addr(M1), &Value::Number(3.0)).unwrap();
        m.write().write(&addr(M2), &Value::Number(-2.5)).unwrap();
        let r = Engine::new()
            .execute(&tree, &m, Services::default())
            .unwrap();
        assert_eq!(r.total_duration, SimDuration::from_secs(secs));
        let after = m.read();
        assert_eq!(after.read(&addr(M1)).unwrap().value, Value::Number(3.0));
        assert_eq!(after.read(&addr(M2)).unwrap().value, Value::Number(-2.5));
    }
}

fn ask() -> ProcedureNode {
    // fails at run time: no expert relay is attached
    ProcedureNode::action(ActionKind::AskExpert {
        channel: "rf-experts".into(),
        question: "ok?".into(),
    })
}

#[test]
fn failure_skips_later_serial_steps() {
    let tree = ProcedureNode::serial(vec![wait(2000), ask(), wait(3000)]);
    let Err(EngineError::Aborted(r)) =
        Engine::new().execute(&tree, &machine(), Services::default())
    else {
        panic!("expected abort")
    };
    let st: Vec<_> = r.root.children.iter().map(|c| c.status.clone()).collect();
    assert_eq!(st[0], NodeStatus::Succeeded);
    assert!(matches!(st[1], NodeStatus::Failed(_)));
    assert_eq!(st[2], NodeStatus::Skipped);
    assert_eq!(r.total_duration, SimDuration::from_secs(2));
}

#[test]
fn failure_cancels_running_parallel_siblings() {
    let tree = ProcedureNode::serial(vec![
        ProcedureNode::parallel(vec![wait(10_000), ask()]),
        wait(1000),
    ]);
    let m = machine();
    let Err(EngineError::Aborted(r)) = Engine::new().execute(&tree, &m, Services::default()) else {
        panic!("expected abort")
    };
    let par = &r.root.children[0];
    assert_eq!(par.children[0].status, NodeStatus::Cancelled);
    assert!(matches!(par.children[1].status, NodeStatus::Failed(_)));
    assert_eq!(r.root.children[1].status, NodeStatus::Skipped);
    assert_eq!(r.total_duration, SimDuration::ZERO);
}

#[test]
fn invalid_procedures_never_touch_the_machine() {
    let m = machine();
    let before = m.snapshot();
    let tree = ProcedureNode::serial(vec![
        ProcedureNode::action(ActionKind::WriteValue {
            addr: addr(M1),
            value: Value::Number(1.0),
        }),
        ProcedureNode::action(ActionKind::WriteValue {
            addr: addr(M2),
            value: Value::Number(99.0),
        }),
    ]);
    assert!(!validate(&tree, &m.read().catalog()).is_empty());
    assert!(matches!(
        Engine::new().execute(&tree, &m, Services::default()),
        Err(EngineError::Invalid(_))
    ));
    assert_eq!(m.snapshot(), before);
}

#[test]
fn read_then_scan_completes() {
    // consecutive leaves must not hold the machine lock across each other
    let probe = addr("SIM.RF/GUN/GUN/AMPL.PROBE");
    let phase = addr("SIM.RF/GUN/GUN/PHASE");
    let tree = ProcedureNode::serial(vec![
        ProcedureNode::action(ActionKind::ReadValue {
            addr: probe.clone(),
        }),
        ProcedureNode::action(ActionKind::Scan {
            addr: phase.clone(),
            from: -20.0,
            to: 20.0,
            steps: 9,
            readout: probe,
        }),
        ProcedureNode::action(ActionKind::WriteValue {
            addr: phase.clone(),
            value: Value::Number(0.0),
        }),
        ProcedureNode::action(ActionKind::ReadValue { addr: phase }),
    ]);
    let r = Engine::new()
        .execute(&tree, &machine(), Services::default())
        .unwrap();
    assert_eq!(r.root.children[1].captured.len(), 9);
}

/// Blocks every question until the test releases it.
struct Gatekeeper {
    entered: Mutex<mpsc::Sender<()>>,
    release: Mutex<mpsc::Receiver<()>>,
}

impl ExpertDesk for Gatekeeper {
    fn ask(&self, _channel: &str, _question: &str) -> Result<String, String> {
        self.entered.lock().unwrap().send(()).unwrap();
        self.release.lock().unwrap().recv().unwrap();
        Ok("go ahead".into())
    }
}

#[test]
fn overlapping_procedures_are_refused() {
    let m = machine();
    let engine = Arc::new(Engine::new());
    let (entered_tx, entered) = mpsc::channel();
    let (release, release_rx) = mpsc::channel();
    let desk = Arc::new(Gatekeeper {
        entered: Mutex::new(entered_tx),
        release: Mutex::new(release_rx),
    });
    let first = {
        let (engine, m, desk) = (engine.clone(), m.clone(), desk.clone());
        std::thread::spawn(move || {
            let tree = ProcedureNode::serial(vec![ask(), cycle(M1)]);
            let services = Services {
                logbook: None,
                experts: Some(&*desk),
            };
            engine
                .execute(&tree, &m, services)
                .map(|r| r.total_duration)
        })
    };
    entered.recv().unwrap();
    let clash = ProcedureNode::parallel(vec![cycle(M1), cycle(M2)]);
    match engine.execute(&clash, &m, Services::default()) {
        Err(EngineError::Locked(devs)) => {
            assert_eq!(devs, vec!["SIM.MAGNETS/MAGNET/ARDLMQZM1".to_string()])
        }
        other => panic!("expected a lock clash, got {other:?}"),
    }
    release.send(()).unwrap();
    assert_eq!(first.join().unwrap().unwrap(), SimDuration::from_secs(16));
    // locks are released afterwards
    assert!(engine.execute(&clash, &m, Services::default()).is_ok());
}
