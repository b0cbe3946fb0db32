use super::*;
use crate::console::Choice;
use crate::event::parse_jsonl;
use crate::guests::WORKLOAD_NAMES;
use crate::ids::BallotId;
use crate::isolation::IsolationLevel;

fn scenario(json: &str) -> Scenario {
    Scenario::from_json(json).unwrap()
}

fn vote(tick: u64, ballot: u64, admin: u32) -> String {
    format!(r#"{{"tick": {tick}, "cmd": "cast_vote", "ballot_id": {ballot}, "admin_id": {admin}, "choice": "approve"}}"#)
}

#[test]
fn every_workload_passes_its_checks() {
    for name in WORKLOAD_NAMES {
        let r = run(&Scenario::for_workload(name, 7), None, None).unwrap();
        let failed: Vec<_> = r.report.failures().collect();
        assert!(failed.is_empty(), "{name}: {failed:?}");
    }
}

#[test]
fn benign_run_stays_standard_without_faults() {
    let r = run(&Scenario::for_workload("benign_echo", 1), None, Some(10_000)).unwrap();
    assert_eq!(r.report.final_level, IsolationLevel::Standard);
    assert_eq!(r.report.counts.faults, 0);
    assert!(r.report.passed);
}

#[test]
fn severed_console_link_reaches_offline() {
    let s = scenario(
        r#"{"name": "sever", "guest": {"workload": "benign_echo"}, "ticks": 400,
            "script": [{"tick": 100, "cmd": "sever_console_link"}],
            "expect": {"final_level": "offline", "watchdog_fires": 1}}"#,
    );
    let r = run(&s, None, None).unwrap();
    assert!(r.report.passed, "{:?}", r.report.assertions);
    let t = &r.deployment.isolation().log()[0];
    assert_eq!(t.to, IsolationLevel::Offline);
    assert_eq!(t.authority.name(), "watchdog");
    // Last beat heard at 90; offline no later than 90 + 10 * 3 + 1.
    assert!(t.tick <= 121, "offline at {}", t.tick);
}

#[test]
fn same_seed_same_log() {
    let s = Scenario::for_workload("federation_attempt", 3);
    let a = run(&s, None, Some(2000)).unwrap();
    let b = run(&s, None, Some(2000)).unwrap();
    assert_eq!(a.deployment.journal().to_jsonl(), b.deployment.journal().to_jsonl());
    assert_eq!(a.report.log_digest, b.report.log_digest);
    let c = run(&s, Some(4), Some(2000)).unwrap();
    assert_ne!(a.report.log_digest, c.report.log_digest, "port ids derive from the seed");
}

#[test]
fn three_votes_restrict_and_are_accountable() {
    let mut script = vec![r#"{"tick": 5, "cmd": "transition_request", "to": "probation"}"#.to_owned()];
    script.extend((1..=3).map(|a| vote(6, 0, a)));
    script.push(r#"{"tick": 7, "cmd": "tally", "ballot_id": 0}"#.into());
    let s = scenario(&format!(
        r#"{{"guest": {{"workload": "benign_echo"}}, "ticks": 50, "script": [{}],
             "expect": {{"final_level": "probation"}}}}"#,
        script.join(",")
    ));
    let r = run(&s, None, None).unwrap();
    assert!(r.report.passed, "{:?}", r.report.assertions);
    assert_eq!(r.report.assertion("vote_accountability").unwrap().detail, "1 console transitions traced to verified ballots");
}

#[test]
fn relaxing_needs_five_votes() {
    let mut script = vec![
        r#"{"tick": 1, "cmd": "hypervisor_request", "to": "probation", "reason": "test"}"#.to_owned(),
        r#"{"tick": 5, "cmd": "transition_request", "to": "standard"}"#.into(),
    ];
    script.extend((1..=4).map(|a| vote(6, 0, a)));
    script.push(r#"{"tick": 7, "cmd": "tally", "ballot_id": 0}"#.into());
    script.push(r#"{"tick": 8, "cmd": "transition_request", "to": "standard"}"#.into());
    script.extend((1..=5).map(|a| vote(9, 1, a)));
    script.push(r#"{"tick": 10, "cmd": "tally", "ballot_id": 1}"#.into());
    let s = scenario(&format!(r#"{{"guest": {{"workload": "benign_echo"}}, "ticks": 20, "script": [{}]}}"#, script.join(",")));
    let r = run(&s, None, None).unwrap();
    let levels: Vec<_> = r.deployment.isolation().log().iter().map(|t| (t.tick, t.to)).collect();
    assert_eq!(levels, vec![(1, IsolationLevel::Probation), (10, IsolationLevel::Standard)]);
    let refused = r
        .deployment
        .journal()
        .of_kind("command")
        .find(|e| e.field("command").and_then(|c| c.get("cmd")).and_then(|v| v.as_str()) == Some("tally"))
        .unwrap();
    assert_eq!(refused.field("ok"), Some(&serde_json::json!(false)));
    assert!(refused.str_field("error").unwrap().starts_with("quorum"));
}

#[test]
fn tampered_attestation_runs_nothing() {
    for mode in ["tampered_software", "tampered_silicon"] {
        let s = scenario(&format!(
            r#"{{"guest": {{"workload": "hyp_dram_probe"}}, "ticks": 200, "attestation": "{mode}",
                 "expect": {{"model_loaded": false}}}}"#
        ));
        let r = run(&s, None, None).unwrap();
        assert!(r.report.passed, "{mode}: {:?}", r.report.assertions);
        assert_eq!(r.report.counts.retired, 0);
        assert_eq!(r.deployment.journal().count_kind("load_refused"), 1);
    }
}

#[test]
fn hypervisor_stall_trips_the_watchdog() {
    let s = scenario(
        r#"{"guest": {"workload": "benign_echo"}, "ticks": 200,
            "script": [{"tick": 50, "cmd": "inject_fault", "fault": {"kind": "hypervisor_stall", "ticks": 100}}],
            "expect": {"final_level": "offline", "watchdog_fires": 1}}"#,
    );
    let r = run(&s, None, None).unwrap();
    assert!(r.report.passed, "{:?}", r.report.assertions);
}

#[test]
fn tampering_shared_io_is_caught() {
    let s = scenario(
        r#"{"guest": {"workload": "benign_echo"}, "ticks": 300,
            "script": [{"tick": 0, "cmd": "inject_fault", "fault": {"kind": "tamper_io", "addr": 2, "byte": 88}}]}"#,
    );
    let r = run(&s, None, None).unwrap();
    assert_eq!(r.deployment.journal().count_kind("fault_injected"), 1);
    assert!(r.report.assertion("all_io_audited").unwrap().passed);
}

#[test]
fn external_input_reaches_the_model() {
    let s = scenario(
        r#"{"guest": {"workload": "benign_echo"}, "ticks": 300,
            "script": [{"tick": 3, "cmd": "external_input", "slot": 0, "payload": "hello model"}]}"#,
    );
    let r = run(&s, None, None).unwrap();
    assert_eq!(r.deployment.journal().count_kind("external_input"), 1);
    assert!(r.report.assertion("all_io_audited").unwrap().passed);
}

#[test]
fn scenario_validation_names_the_reference() {
    let bad = [
        (r#"{"guest": {"workload": "nope"}}"#, "guest.workload"),
        (r#"{"script": [{"tick": 5, "cmd": "manual_repair"}, {"tick": 1, "cmd": "manual_repair"}]}"#, "script[1]"),
        (r#"{"detectors": [{"name": "no_such_plugin"}]}"#, "detectors[0]"),
        (r#"{"throttle": {"budget": 0}}"#, "throttle"),
        (r#"{"hosts": [{"name": "a", "is_guillotine": false}, {"name": "a", "is_guillotine": false}]}"#, "hosts[1]"),
    ];
    for (json, reference) in bad {
        match Scenario::from_json(json) {
            Err(ScenarioError::Invalid { reference: r, .. }) => assert!(r.starts_with(reference), "{json}: {r}"),
            other => panic!("{json}: {other:?}"),
        }
    }
    assert!(matches!(Scenario::from_json(r#"{"bogus": 1}"#), Err(ScenarioError::Parse(_))));
    assert!(matches!(Scenario::from_json(r#"{"script": [{"tick": 1, "cmd": "fly"}]}"#), Err(ScenarioError::Parse(_))));
}

#[test]
fn admin_vote_alias_parses() {
    let s = scenario(r#"{"script": [{"tick": 1, "cmd": "admin_vote", "ballot_id": 0, "admin_id": 2, "choice": "deny"}]}"#);
    assert_eq!(s.script[0].command, Command::CastVote { ballot_id: BallotId(0), admin_id: 2, choice: Choice::Deny, signature: None });
}

#[test]
fn scenario_round_trips_through_json() {
    let s = scenario(
        r#"{"name": "rt", "guest": {"workload": "covert_channel"}, "script": [{"tick": 1, "cmd": "sever_console_link", "direction": "both"}]}"#,
    );
    let back: Scenario = serde_json::from_value(serde_json::to_value(&s).unwrap()).unwrap();
    assert_eq!(back, s);
}

#[test]
fn client_session_replays_identically() {
    let s = Scenario::for_workload("benign_echo", 9);
    let mut d = Deployment::new(&s, 9).unwrap();
    d.run_until(20);
    d.enqueue(Command::TransitionRequest { to: IsolationLevel::Probation });
    d.run_until(25);
    for a in 1..=3 {
        d.enqueue(Command::CastVote { ballot_id: BallotId(0), admin_id: a, choice: Choice::Approve, signature: None });
    }
    d.enqueue(Command::CastVote { ballot_id: BallotId(0), admin_id: 4, choice: Choice::Approve, signature: Some("00".into()) });
    d.run_until(30);
    d.enqueue(Command::Tally { ballot_id: BallotId(0) });
    d.run_until(400);
    d.finish();
    assert_eq!(d.level(), IsolationLevel::Probation);

    let text = d.journal().to_jsonl();
    let records = parse_jsonl(&text).unwrap();
    let (again, outcome) = replay(&records).unwrap();
    assert!(outcome.matched, "{outcome:?}");
    assert_eq!(again.journal().to_jsonl(), text);
}

#[test]
fn replay_reports_the_first_divergence() {
    let r = run(&Scenario::for_workload("benign_echo", 2), None, Some(100)).unwrap();
    let mut records = r.deployment.journal().records().to_vec();
    records[40].payload = serde_json::json!({"forged": true});
    let (_, outcome) = replay(&records).unwrap();
    assert!(!outcome.matched);
    assert_eq!(outcome.first_divergence, Some(records[40].seq));
}

#[test]
fn refused_ballots_cannot_open() {
    let s = scenario(
        r#"{"guest": {"workload": "benign_echo"}, "ticks": 5,
            "script": [{"tick": 1, "cmd": "transition_request", "to": "standard"}, {"tick": 1, "cmd": "manual_repair"}]}"#,
    );
    let r = run(&s, None, None).unwrap();
    let errors: Vec<_> = r.deployment.journal().of_kind("command").filter_map(|e| e.str_field("error")).collect();
    assert_eq!(errors.len(), 2, "{errors:?}");
    assert!(errors[0].starts_with("already at"));
    assert!(errors[1].starts_with("wrong_level"));
}
