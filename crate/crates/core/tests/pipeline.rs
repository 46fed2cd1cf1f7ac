use std::collections::BTreeMap;

use cfexplain_core::envs::{ObservationLog, ScriptedDriver};
use cfexplain_core::explain::{decision_node, DEFAULT_HORIZON};
use cfexplain_core::graph::{all_causes, DEFAULT_XI};
use cfexplain_core::session::{decision_distribution, episode_from_jsonl, episode_to_jsonl};
use cfexplain_core::*;

fn explainable(env: &str, seed: u64, max_steps: usize) -> (Episode, InfluenceGraph) {
    let ep = rollout(env, seed, &BTreeMap::new(), max_steps).unwrap();
    let g = build_graph(&ep, &Controllers::for_episode(&ep).unwrap(), DEFAULT_XI).unwrap();
    (ep, g)
}

#[test]
fn every_decision_renders_in_both_worlds() {
    for (env, steps) in [("traffic", 40), ("skirmish", 40)] {
        let lexicon = Lexicon::builtin(env).unwrap();
        for seed in 0..4 {
            let (ep, g) = explainable(env, seed, steps);
            for (t, joint) in ep.actions.iter().enumerate() {
                for agent in joint.keys() {
                    if !g.contains(&decision_node(agent, t as u32)) {
                        // the agent did not survive its own step
                        assert!(matches!(
                            render_explanation(&g, &ep, &lexicon, agent, t as u32, 1),
                            Err(ExplainError::AgentDead { .. })
                        ));
                        continue;
                    }
                    let e = render_explanation(&g, &ep, &lexicon, agent, t as u32, DEFAULT_HORIZON)
                        .unwrap();
                    assert!(e.rendered.starts_with("I "), "{}", e.rendered);
                    assert!(e.rendered.ends_with('.'));
                    if let Some(c) = &e.cause {
                        assert_eq!(e.cause_path.first(), Some(&c.object));
                        assert_eq!(e.cause_path.last(), Some(&decision_node(agent, t as u32)));
                    }
                }
            }
        }
    }
}

#[test]
fn traffic_brakes_are_traced_to_what_the_driver_watches() {
    let ego = ObjectId::from("ego");
    let env = env_by_name("traffic").unwrap();
    for seed in 0..15 {
        let (ep, g) = explainable("traffic", seed, 60);
        let log = ObservationLog::from_frames(env, &ep.frames);
        for t in 0..ep.len() as u32 {
            if !ScriptedDriver::triggered(&log.history(&ego, t).unwrap()) {
                continue;
            }
            let cause = top_cause(&g, &decision_node(&ego, t)).unwrap().unwrap();
            let class = ep.frames[cause.node.step as usize]
                .entity(&cause.node.object_id)
                .unwrap()
                .class_name;
            assert!(
                matches!(class, ObjectClass::Pedestrian | ObjectClass::TrafficLight),
                "seed {seed} step {t}: {}",
                cause.node
            );
        }
    }
}

#[test]
fn focus_fire_causes_pass_through_the_target() {
    for seed in 0..6 {
        let (ep, g) = explainable("skirmish", seed, 60);
        for (t, joint) in ep.actions.iter().enumerate() {
            for (ally, action) in joint {
                let Some(target) = action.strip_prefix("attack_") else {
                    continue;
                };
                let d = decision_node(ally, t as u32);
                if !g.contains(&d) {
                    continue;
                }
                let cause = top_cause(&g, &d).unwrap().unwrap();
                let path = max_weight_path(&g.cause_view(&d), &cause.node, &d).unwrap();
                assert!(
                    path.nodes.iter().any(|n| n.object_id.as_str() == target),
                    "seed {seed} {d}"
                );
            }
        }
    }
}

#[test]
fn all_causes_lead_with_the_top_cause() {
    let (ep, g) = explainable("skirmish", 2, 30);
    let ally = ObjectId::from("ally1");
    for t in 0..ep.len() as u32 {
        let d = decision_node(&ally, t);
        if !g.contains(&d) {
            continue;
        }
        let all = all_causes(&g, &d, 0.0).unwrap();
        assert_eq!(all.first().cloned(), top_cause(&g, &d).unwrap());
        assert!(all
            .windows(2)
            .all(|w| w[0].flow.value >= w[1].flow.value - 1e-9));
    }
}

#[test]
fn removing_the_top_cause_moves_the_decision() {
    let (mut moved, mut total) = (0, 0);
    for env in ENV_NAMES_FOR_TEST {
        for seed in 0..5 {
            let (ep, g) = explainable(env, seed, 30);
            for (t, joint) in ep.actions.iter().enumerate().step_by(3) {
                for agent in joint.keys() {
                    let Some(cause) = top_cause(&g, &decision_node(agent, t as u32)).unwrap()
                    else {
                        continue;
                    };
                    let edit = WhatIfEdit::Remove {
                        step: cause.node.step,
                        object_id: cause.node.object_id.clone(),
                    };
                    let branch = what_if(&ep, &[edit]).unwrap();
                    let before = decision_distribution(&ep, agent, t as u32).unwrap();
                    let Ok(after) = decision_distribution(&branch.episode, agent, t as u32) else {
                        continue;
                    };
                    total += 1;
                    if js_divergence(&before, &after).unwrap() > 0.0 {
                        moved += 1;
                    }
                }
            }
        }
    }
    assert!(total > 20);
    assert!(moved * 10 >= total * 9, "{moved}/{total}");
}

const ENV_NAMES_FOR_TEST: [&str; 2] = ["traffic", "skirmish"];

#[test]
fn recorded_episodes_survive_the_file_format() {
    for env in ENV_NAMES_FOR_TEST {
        for seed in 0..5 {
            let ep = rollout(env, seed, &BTreeMap::new(), 50).unwrap();
            let text = episode_to_jsonl(&ep);
            assert_eq!(episode_from_jsonl(&text).unwrap(), ep);
            assert_eq!(
                episode_to_jsonl(&rollout(env, seed, &BTreeMap::new(), 50).unwrap()),
                text
            );
        }
    }
}

#[test]
fn blind_agents_explain_themselves_without_a_cause() {
    let policies = BTreeMap::from([(ObjectId::from("ego"), "blind".to_owned())]);
    let ep = rollout("traffic", 16, &policies, 20).unwrap();
    let g = build_graph(&ep, &Controllers::for_episode(&ep).unwrap(), DEFAULT_XI).unwrap();
    let lexicon = Lexicon::builtin("traffic").unwrap();
    let e = render_explanation(&g, &ep, &lexicon, &"ego".into(), 2, DEFAULT_HORIZON).unwrap();
    assert!(e.cause.is_none());
    assert!(e.rendered.starts_with("I keep driving"), "{}", e.rendered);
    assert!(e.rendered.contains(explain::NO_CAUSE));
}
