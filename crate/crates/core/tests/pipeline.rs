//! End-to-end behaviour of the continual-learning pipeline.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use slca::alignment::{align_classifier, AlignConfig};
use slca::analysis::{linear_probe, FeatureSnapshot, ProbeConfig};
use slca::dataio::{gen_synthetic, make_split, SyntheticConfig};
use slca::linalg::RngState;
use slca::losses::max_confidence;
use slca::model::{Classifier, HeadConfig, RepresentationHead};
use slca::protocol::{evaluate_task, final_classifier, run_stream, Method, RunConfig, TaskStream};

use common::*;

fn four_class_stream() -> TaskStream {
    let data = gen_synthetic(&SyntheticConfig {
        num_classes: 4,
        dim: 8,
        train_per_class: 100,
        test_per_class: 100,
        separation: 8.0,
        seed: 3,
    })
    .unwrap();
    let split = make_split(&data.benchmark_classes(), 2, 3).unwrap();
    TaskStream::from_dataset(&data, &split).unwrap()
}

fn mlp() -> HeadConfig {
    HeadConfig::Mlp {
        hidden: 32,
        out_dim: 16,
        layers: 2,
    }
}

fn prediction_counts(head: &RepresentationHead, clf: &Classifier, stream: &TaskStream) -> BTreeMap<u32, usize> {
    let mut counts: BTreeMap<u32, usize> = clf.classes().iter().map(|&c| (c, 0)).collect();
    for e in stream.tasks().iter().flat_map(|t| &t.test) {
        let p = clf.predict(&head.features(&e.x).unwrap()).unwrap().unwrap();
        *counts.get_mut(&p).unwrap() += 1;
    }
    counts
}

fn max_relative_deviation(counts: &BTreeMap<u32, usize>) -> f64 {
    let total: usize = counts.values().sum();
    let uniform = total as f64 / counts.len() as f64;
    counts
        .values()
        .map(|&n| (n as f64 - uniform).abs() / uniform)
        .fold(0.0, f64::max)
}

#[test]
fn two_task_separable_stream_is_solved() {
    let stream = four_class_stream();
    let out = run_stream(&stream, &RunConfig::default()).unwrap();
    assert!(out.accuracy.last_acc().unwrap() >= 0.98, "{:?}", out.accuracy);
}

#[test]
fn high_lr_fine_tuning_forgets_first_task() {
    let stream = four_class_stream();
    let ft_config = RunConfig {
        method: Method::SeqFtUniform,
        head: mlp(),
        uniform_lr: 0.5,
        ..RunConfig::default()
    };
    let ft = run_stream(&stream, &ft_config).unwrap();
    let slca_config = RunConfig {
        head: mlp(),
        ..RunConfig::default()
    };
    let slca = run_stream(&stream, &slca_config).unwrap();
    let slca_clf = final_classifier(&slca, &slca_config, 2).unwrap();

    let ft_first = evaluate_task(&ft.model.head, &ft.model.classifier, &stream, 0).unwrap();
    let slca_first = evaluate_task(&slca.model.head, &slca_clf, &stream, 0).unwrap();
    assert!(ft_first < slca_first, "fine-tuning {ft_first} vs slca {slca_first}");

    let counts = prediction_counts(&ft.model.head, &ft.model.classifier, &stream);
    let last: usize = stream.tasks()[1].classes.iter().map(|c| counts[c]).sum();
    let total: usize = counts.values().sum();
    assert!(last as f64 / total as f64 > 0.75, "{counts:?}");
}

#[test]
fn single_task_metrics_coincide() {
    let stream = four_class_stream();
    let one = TaskStream::new(stream.tasks()[..1].to_vec()).unwrap();
    let out = run_stream(&one, &RunConfig::default()).unwrap();
    let a = out.accuracy.entries[0];
    assert_eq!(out.accuracy.entries.len(), 1);
    assert_eq!(out.accuracy.last_acc().unwrap(), a);
    assert_eq!(out.accuracy.inc_acc().unwrap(), a);
}

#[test]
fn classifier_spans_exactly_the_seen_classes() {
    let stream = stressed_stream();
    for t in 1..=stream.num_tasks() {
        let prefix = TaskStream::new(stream.tasks()[..t].to_vec()).unwrap();
        let out = run_stream(&prefix, &stressed_config(Method::SlCaLn)).unwrap();
        let spanned: BTreeSet<u32> = out.model.classifier.classes().iter().copied().collect();
        assert_eq!(spanned, stream.classes_up_to(t));
        assert_eq!(out.bank.class_ids().collect::<BTreeSet<_>>(), stream.classes_up_to(t));
        assert_eq!(out.accuracy.entries.len(), t);
    }
}

#[test]
fn training_prefix_matches_full_run() {
    // later tasks never influence the state reached after earlier ones
    let stream = stressed_stream();
    let config = stressed_config(Method::SlCa);
    let full = run_stream(&stream, &config).unwrap();
    let prefix = TaskStream::new(stream.tasks()[..3].to_vec()).unwrap();
    let part = run_stream(&prefix, &config).unwrap();
    assert_eq!(part.accuracy.entries[..], full.accuracy.entries[..3]);
}

#[test]
fn alignment_restores_prediction_balance() {
    let data = gen_synthetic(&SyntheticConfig {
        num_classes: 10,
        dim: 16,
        train_per_class: 200,
        test_per_class: 500,
        separation: 7.0,
        seed: 5,
    })
    .unwrap();
    let split = make_split(&data.benchmark_classes(), 5, 5).unwrap();
    let stream = TaskStream::from_dataset(&data, &split).unwrap();
    let config = RunConfig {
        method: Method::SlCaLn,
        head: mlp(),
        ..RunConfig::default()
    };
    let out = run_stream(&stream, &config).unwrap();
    let aligned = final_classifier(&out, &config, stream.num_tasks()).unwrap();
    let before = max_relative_deviation(&prediction_counts(&out.model.head, &out.model.classifier, &stream));
    let after = max_relative_deviation(&prediction_counts(&out.model.head, &aligned, &stream));
    assert!(
        before > 0.5,
        "continual classifier should be recency-biased, deviation {before}"
    );
    assert!(after < 0.10, "aligned deviation {after}");
}

#[test]
fn logit_norm_lowers_confidence() {
    let stream = stressed_stream();
    let config = stressed_config(Method::SlCa);
    let out = run_stream(&stream, &config).unwrap();
    let mean_conf = |logit_norm: bool| {
        let align = AlignConfig {
            logit_norm,
            ..AlignConfig::default()
        };
        let clf = align_classifier(&out.model.classifier, &out.bank, &align, &mut RngState::new(9)).unwrap();
        let test: Vec<_> = stream.tasks().iter().flat_map(|t| &t.test).collect();
        test.iter()
            .map(|e| max_confidence(&clf.logits(&out.model.head.features(&e.x).unwrap()).unwrap()))
            .sum::<f64>()
            / test.len() as f64
    };
    let (ln, ce) = (mean_conf(true), mean_conf(false));
    assert!(ln <= ce, "logit-norm confidence {ln} vs cross-entropy {ce}");
}

#[test]
fn probe_bounds_continual_classifier() {
    let stream = stressed_stream();
    for method in [Method::Sl, Method::SeqFtUniform] {
        let out = run_stream(&stream, &stressed_config(method)).unwrap();
        let snapshot = FeatureSnapshot::from_stream(method.name(), &out.model.head, &stream).unwrap();
        let probe = linear_probe(&snapshot, &ProbeConfig::default()).unwrap();
        let last = out.accuracy.last_acc().unwrap();
        assert!(probe >= last, "{method}: probe {probe} < continual {last}");
    }
}

#[test]
fn fixed_representation_methods_leave_head_untouched() {
    let stream = stressed_stream();
    let config = stressed_config(Method::FixedRepCaLn);
    let init = config
        .head
        .build(stream.input_dim(), &mut RngState::new(config.seed).fork(1))
        .unwrap();
    let out = run_stream(&stream, &config).unwrap();
    assert_eq!(out.model.head, init);
    let seq = run_stream(&stream, &stressed_config(Method::SeqFtFixedRep)).unwrap();
    assert_eq!(seq.model.head, init);
    assert!(out.accuracy.last_acc().unwrap() > seq.accuracy.last_acc().unwrap());
}
