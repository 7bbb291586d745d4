//! Every model learns the deterministic cycle within 50 epochs.

mod common;

use common::{toy_configs, toy_training, ITEMS};
use seqrank::dataset::split;
use seqrank::dataset::synthetic::cycle_dataset;
use seqrank::metrics::MetricSpec;
use seqrank::models::{build_neural, train, MarkovScorer};
use seqrank::ranking::evaluate;
use seqrank::targetset::TargetSetSpec;

#[test]
fn neural_models_reach_hr1_on_the_cycle() {
    let sp = split(&cycle_dataset(ITEMS, 200, 12)).unwrap();
    for config in toy_configs() {
        let arch = config.architecture();
        let mut model = build_neural(&config, arch.name(), ITEMS, 3).unwrap();
        let state = train(model.as_mut(), &sp.train, &sp.validation, &[], &toy_training()).unwrap();
        let curve: Vec<String> = state.history.iter().map(|r| format!("{:.2}", r.hr1)).collect();
        println!("{arch}: {}", curve.join(" "));
        let best = state.best_hr1_within(50).unwrap();
        assert!(best >= 0.9, "{arch} peaked at HR@1 {best}");
    }
}

#[test]
fn markov_is_exact_on_the_cycle() {
    let sp = split(&cycle_dataset(ITEMS, 200, 12)).unwrap();
    let m = MarkovScorer::fit("markov", ITEMS, &sp.train).unwrap();
    let run = evaluate(&[&m], &sp.validation, ITEMS, &TargetSetSpec::full(), &[]).unwrap();
    assert_eq!(run.models[0].mean(MetricSpec::hr(1)).unwrap(), 1.0);
}
