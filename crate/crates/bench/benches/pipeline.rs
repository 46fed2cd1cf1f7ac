use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cfexplain_core::envs::{rollout, Controllers, Episode};
use cfexplain_core::explain::{decision_node, render_explanation, Lexicon, DEFAULT_HORIZON};
use cfexplain_core::graph::{build_graph, build_graph_naive, max_flow, top_cause, DEFAULT_XI};
use cfexplain_core::js_divergence;
use cfexplain_core::model::{ActionDistribution, ObjectId};

fn episode(env: &str, steps: usize) -> Episode {
    rollout(env, 4, &BTreeMap::new(), steps).unwrap()
}

fn divergence(c: &mut Criterion) {
    let actions: Vec<String> = (0..8).map(|i| format!("a{i}")).collect();
    let p = ActionDistribution::new(actions.clone(), vec![0.125; 8]).unwrap();
    let q = ActionDistribution::new(actions, vec![0.3, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]).unwrap();
    c.bench_function("js_divergence/8", |b| {
        b.iter(|| js_divergence(black_box(&p), black_box(&q)))
    });
}

fn graph_construction(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_graph");
    group.sample_size(10);
    for steps in [10, 25, 50] {
        let ep = episode("skirmish", steps);
        let controllers = Controllers::for_episode(&ep).unwrap();
        group.bench_with_input(BenchmarkId::new("layered", steps), &ep, |b, ep| {
            b.iter(|| build_graph(ep, &controllers, DEFAULT_XI).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("naive", steps), &ep, |b, ep| {
            b.iter(|| build_graph_naive(ep, &controllers, DEFAULT_XI).unwrap())
        });
    }
    group.finish();
}

fn queries(c: &mut Criterion) {
    let ep = episode("skirmish", 50);
    let g = build_graph(&ep, &Controllers::for_episode(&ep).unwrap(), DEFAULT_XI).unwrap();
    let ally = ObjectId::from("ally1");
    let step = (ep.len() as u32 / 2).min(20);
    let d = decision_node(&ally, step);
    let source = top_cause(&g, &d).unwrap().map(|c| c.node);
    if let Some(source) = source {
        c.bench_function("max_flow/skirmish", |b| {
            b.iter(|| max_flow(&g, &source, &d).unwrap())
        });
    }
    c.bench_function("top_cause/skirmish", |b| {
        b.iter(|| top_cause(&g, &d).unwrap())
    });

    let traffic = episode("traffic", 60);
    let tg = build_graph(
        &traffic,
        &Controllers::for_episode(&traffic).unwrap(),
        DEFAULT_XI,
    )
    .unwrap();
    let lexicon = Lexicon::builtin("traffic").unwrap();
    let ego = ObjectId::from("ego");
    c.bench_function("render_explanation/traffic", |b| {
        b.iter(|| render_explanation(&tg, &traffic, &lexicon, &ego, 2, DEFAULT_HORIZON).unwrap())
    });
}

criterion_group!(benches, divergence, graph_construction, queries);
criterion_main!(benches);
