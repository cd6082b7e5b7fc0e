mod common;

use std::time::Duration;

use common::{headless, low_level, request};
use hirl_core::experiment::compute_metrics;
use hirl_core::hirl::TRAILING_WINDOW;
use hirl_core::maze::{encode_context, AgentState, Goal, Maze};
use hirl_core::{Algorithm, Vec2};
use hirl_session::store::{ExpertKind, SessionError, SessionPhase, SessionStore, QUERY_GRID};

fn store() -> SessionStore {
    SessionStore::new(low_level())
}

fn human(store: &SessionStore, algorithm: Algorithm, seed: u64, episodes: usize) -> String {
    store.create_session(&request(algorithm, ExpertKind::Human, seed, episodes)).unwrap()
}

/// Answers every query with the agent's own position until `episodes` have ended.
fn stall_episodes(store: &SessionStore, id: &str, episodes: usize) {
    while store.results(id).unwrap().len() < episodes {
        match store.phase(id).unwrap() {
            SessionPhase::AwaitingDemo => {
                let q = store.next_query(id).unwrap();
                store.submit_demonstration(id, q.query_id, q.agent).unwrap();
            }
            SessionPhase::EpisodeDone => {
                store.advance_training(id).unwrap();
            }
            SessionPhase::Finished => return,
        }
    }
}

#[test]
fn creations_get_distinct_ids() {
    let s = store();
    let a = human(&s, Algorithm::Dagger, 0, 5);
    let b = human(&s, Algorithm::Dagger, 0, 5);
    assert_ne!(a, b);
    assert_eq!(s.len(), 2);
}

#[test]
fn unknown_algorithm_is_rejected() {
    let s = store();
    let mut req = request(Algorithm::Dagger, ExpertKind::Human, 0, 5);
    req.algorithm = "bogus".into();
    let err = s.create_session(&req).unwrap_err();
    assert_eq!(err.code(), "unknown_algorithm");
    assert!(s.is_empty());
}

#[test]
fn invalid_config_is_rejected() {
    let s = store();
    let mut req = request(Algorithm::Dagger, ExpertKind::Human, 0, 5);
    req.hirl.horizon = 0;
    assert_eq!(s.create_session(&req).unwrap_err().code(), "invalid_config");
}

#[test]
fn human_session_starts_with_an_idempotent_step_zero_query() {
    let s = store();
    let id = human(&s, Algorithm::Reward, 3, 5);
    assert_eq!(s.phase(&id).unwrap(), SessionPhase::AwaitingDemo);
    let q1 = s.next_query(&id).unwrap();
    let q2 = s.next_query(&id).unwrap();
    assert_eq!((q1.episode, q1.step), (0, 0));
    assert_eq!(q1, q2);
}

#[test]
fn payload_grid_matches_encode_context() {
    let s = store();
    let id = human(&s, Algorithm::Dagger, 8, 5);
    for _ in 0..6 {
        let q = s.next_query(&id).unwrap();
        let maze = Maze::try_from(q.maze.clone()).unwrap();
        let state = AgentState { position: q.agent.into(), velocity: q.velocity.into() };
        let epsilon = s.with_session(&id, |x| x.run().env_config().goal_epsilon).unwrap();
        let goal = Goal { position: q.goal.into(), epsilon };
        assert_eq!(q.grid, encode_context(&maze, &state, &goal, QUERY_GRID));
        assert_eq!(q.grid.g, 16);
        let far = Vec2::new(maze.world_width() - q.agent[0], maze.world_height() - q.agent[1]);
        if s.submit_demonstration(&id, q.query_id, far.into()).unwrap().ended.is_some() {
            s.advance_training(&id).unwrap();
        }
    }
}

#[test]
fn demo_at_agent_stores_zero_offset() {
    let s = store();
    let id = human(&s, Algorithm::Dagger, 1, 5);
    let q = s.next_query(&id).unwrap();
    let ack = s.submit_demonstration(&id, q.query_id, q.agent).unwrap();
    assert_eq!(ack.offset, [0.0, 0.0]);
    let log = s.demo_log(&id).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].offset, [0.0, 0.0]);
    assert_eq!(log[0].query_id, q.query_id);
}

#[test]
fn distant_demo_is_clamped_to_radius_with_direction_kept() {
    let s = store();
    let id = human(&s, Algorithm::Dagger, 2, 5);
    let q = s.next_query(&id).unwrap();
    let agent = Vec2::from(q.agent);
    // 5 units along whichever diagonal stays inside the 10 x 10 world.
    let dir = Vec2::new(if agent.x < 5.0 { 0.6 } else { -0.6 }, if agent.y < 5.0 { 0.8 } else { -0.8 });
    let subgoal = agent + dir * 5.0;
    let ack = s.submit_demonstration(&id, q.query_id, subgoal.into()).unwrap();
    let offset = Vec2::from(ack.offset);
    assert!((offset.norm() - 2.0).abs() < 1e-12, "{offset:?}");
    assert!((offset * 0.5 - dir).norm() < 1e-12);
}

#[test]
fn duplicate_submit_is_rejected_without_double_aggregation() {
    let s = store();
    let id = human(&s, Algorithm::Dagger, 4, 5);
    let q = s.next_query(&id).unwrap();
    s.submit_demonstration(&id, q.query_id, q.agent).unwrap();
    let size = s.progress(&id).unwrap().dataset_size;
    let err = s.submit_demonstration(&id, q.query_id, q.agent).unwrap_err();
    let current = s.next_query(&id).unwrap().query_id;
    assert!(
        matches!(err, SessionError::StaleQuery { submitted, current: Some(c) } if submitted == q.query_id && c == current)
    );
    assert_eq!(err.to_payload(Some(&id)).current_query_id, Some(current));
    assert_eq!(s.progress(&id).unwrap().dataset_size, size);
    assert_eq!(s.demo_log(&id).unwrap().len(), 1);
}

#[test]
fn out_of_bounds_subgoals_are_rejected() {
    let s = store();
    let id = human(&s, Algorithm::Dagger, 5, 5);
    let q = s.next_query(&id).unwrap();
    for bad in [[-0.1, 1.0], [1.0, 10.5], [f64::NAN, 1.0], [f64::INFINITY, 0.0]] {
        let err = s.submit_demonstration(&id, q.query_id, bad).unwrap_err();
        assert_eq!(err.code(), "out_of_bounds");
    }
    assert_eq!(s.next_query(&id).unwrap().query_id, q.query_id);
    assert!(s.demo_log(&id).unwrap().is_empty());
}

#[test]
fn advance_with_nothing_due_is_a_noop() {
    let s = store();
    let id = human(&s, Algorithm::Dagger, 6, 5);
    let q = s.next_query(&id).unwrap();
    s.submit_demonstration(&id, q.query_id, q.agent).unwrap();
    let before = s.progress(&id).unwrap();
    let q_before = s.next_query(&id).unwrap();
    assert_eq!(s.advance_training(&id).unwrap(), before);
    assert_eq!(s.next_query(&id).unwrap(), q_before);
}

#[test]
fn failed_reward_episode_does_not_grow_the_dataset_on_advance() {
    let s = store();
    let id = human(&s, Algorithm::Reward, 7, 5);
    let mut pruned_any = false;
    for _ in 0..3 {
        while s.phase(&id).unwrap() == SessionPhase::AwaitingDemo {
            let q = s.next_query(&id).unwrap();
            s.submit_demonstration(&id, q.query_id, q.agent).unwrap();
        }
        let before = s.progress(&id).unwrap().dataset_size;
        let after = s.advance_training(&id).unwrap().dataset_size;
        let last = *s.results(&id).unwrap().last().unwrap();
        assert!(!last.success);
        assert!(after <= before, "{after} > {before}");
        pruned_any |= after < before;
    }
    assert!(pruned_any);
}

#[test]
fn metrics_track_completed_episodes() {
    let s = store();
    let id = human(&s, Algorithm::Dagger, 9, 5);
    assert!(s.session_metrics(&id).unwrap().is_empty());
    stall_episodes(&s, &id, 3);
    let rows = s.session_metrics(&id).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows, compute_metrics(Algorithm::Dagger, 9, &s.results(&id).unwrap(), TRAILING_WINDOW));
}

#[test]
fn unknown_session_is_not_found() {
    let s = store();
    assert_eq!(s.session_metrics("nope").unwrap_err().code(), "not_found");
    assert_eq!(s.next_query("nope").unwrap_err().code(), "not_found");
}

#[test]
fn oracle_session_runs_to_completion_and_matches_headless() {
    let s = store();
    for algorithm in [Algorithm::Dagger, Algorithm::Multipolicy] {
        let req = request(algorithm, ExpertKind::Oracle, 11, 12);
        let id = s.create_session(&req).unwrap();
        assert_eq!(s.next_query(&id).unwrap_err().code(), "wrong_expert");
        let results = s.run_oracle(&id).unwrap();
        assert_eq!(s.phase(&id).unwrap(), SessionPhase::Finished);
        assert!(s.demo_log(&id).unwrap().is_empty());
        assert_eq!(results, headless(&req).0, "{algorithm}");
        assert_eq!(s.advance_training(&id).unwrap_err().code(), "finished");
    }
}

#[test]
fn replayed_oracle_answers_reproduce_the_headless_run() {
    let s = store();
    for algorithm in hirl_core::Algorithm::ALL {
        let req = request(algorithm, ExpertKind::Human, 21, 12);
        let (expected, answers) = headless(&req);
        let id = s.create_session(&req).unwrap();
        let mut next = 0;
        loop {
            match s.phase(&id).unwrap() {
                SessionPhase::AwaitingDemo => {
                    let q = s.next_query(&id).unwrap();
                    let (queried_at, answer) = answers[next];
                    assert_eq!(Vec2::from(q.agent), queried_at, "{algorithm} query {next}");
                    s.submit_demonstration(&id, q.query_id, answer.into()).unwrap();
                    next += 1;
                }
                SessionPhase::EpisodeDone => {
                    s.advance_training(&id).unwrap();
                }
                SessionPhase::Finished => break,
            }
        }
        assert_eq!(next, answers.len());
        assert_eq!(s.results(&id).unwrap(), expected, "{algorithm}");
    }
}

#[test]
fn stale_query_times_out_and_aborts_the_episode() {
    let s = SessionStore::new(low_level()).with_timeout(Duration::from_millis(20));
    let id = human(&s, Algorithm::Dagger, 12, 5);
    let q = s.next_query(&id).unwrap();
    assert_eq!(s.expire_stale(&id).unwrap(), None);
    std::thread::sleep(Duration::from_millis(30));
    let r = s.expire_stale(&id).unwrap().expect("expired");
    assert!(r.aborted && !r.success);
    assert_eq!(s.phase(&id).unwrap(), SessionPhase::EpisodeDone);
    assert_eq!(s.submit_demonstration(&id, q.query_id, q.agent).unwrap_err().code(), "not_awaiting");
    s.advance_training(&id).unwrap();
    let q2 = s.next_query(&id).unwrap();
    assert_eq!(q2.episode, 1);
    assert!(q2.query_id > q.query_id);
}

#[test]
fn oracle_sessions_never_time_out() {
    let s = SessionStore::new(low_level()).with_timeout(Duration::ZERO);
    let id = s.create_session(&request(Algorithm::Dagger, ExpertKind::Oracle, 0, 2)).unwrap();
    assert_eq!(s.expire_stale(&id).unwrap(), None);
}

#[test]
fn concurrent_sessions_are_independent() {
    let s = store();
    let reqs: Vec<_> = (0..4).map(|seed| request(Algorithm::Reward, ExpertKind::Oracle, seed, 6)).collect();
    let ids: Vec<_> = reqs.iter().map(|r| s.create_session(r).unwrap()).collect();
    let parallel: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = ids.iter().map(|id| scope.spawn(|| s.run_oracle(id).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (req, got) in reqs.iter().zip(parallel) {
        assert_eq!(got, headless(req).0);
    }
}
