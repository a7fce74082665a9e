use crate::autodiff::Tape;
use crate::data::{batch, generate_synthetic, Dataset, MiniBatch, SyntheticSpec};
use crate::Error;

use super::forward::rank_scale;
use super::*;

fn tiny_config(variant: Variant) -> DgmnConfig {
    DgmnConfig {
        concepts: 4,
        key_dim: 6,
        value_dim: 8,
        num_questions: 10,
        batch_size: 2,
        max_seq_len: 5,
        variant,
        seed: 11,
        ..Default::default()
    }
}

fn tiny_data(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec::new(2, 10, 3, 5, seed)).unwrap().0
}

fn tiny_batch() -> MiniBatch {
    batch(&tiny_data(3), 2, 5, 0).unwrap().remove(0)
}

/// A model whose graph has been rebuilt from a trained-ish state, so ranks
/// and adjacency are not trivial.
fn warmed(variant: Variant) -> DgmnModel<f64> {
    let mut model = DgmnModel::new(tiny_config(variant)).unwrap();
    model.train_epoch(&tiny_data(5)).unwrap();
    model
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mb = tiny_batch();
    for variant in [Variant::Full, Variant::NoForget, Variant::NoGraph, Variant::Basic] {
        let model = warmed(variant);
        let report = model_grad_check(&model, &mb, 1e-5).unwrap();
        assert!(
            report.passes(1e-4),
            "{variant}: max relative error {:.3e} at {:?}",
            report.max_error,
            report.worst
        );
        assert_eq!(report.entries, model.num_parameters());
    }
}

#[test]
fn unused_parameters_get_zero_gradients() {
    let mb = tiny_batch();
    for variant in Variant::ALL {
        let model = warmed(variant);
        let (_, grads, _) = model.loss_and_gradients(&mb, None).unwrap();
        for ((name, _), g) in model.named_params().iter().zip(&grads) {
            let unused = (name.starts_with("forgetting.") && !variant.uses_forgetting())
                || (name.starts_with("gcn.") && !variant.uses_graph());
            let zero = g.data().iter().all(|&x| x == 0.0);
            if unused {
                assert!(zero, "{variant}: {name} should not receive gradient");
            } else if *name != "memory.answer_embed" {
                assert!(!zero, "{variant}: {name} received no gradient");
            }
        }
    }
}

#[test]
fn prediction_width_follows_variant() {
    for variant in Variant::ALL {
        let model = DgmnModel::<f64>::new(tiny_config(variant)).unwrap();
        let width = if variant.uses_graph() { 8 } else { 4 };
        assert_eq!(model.predict_w.shape(), &[10, width]);
    }
}

fn first_prob(model: &DgmnModel<f64>, setup: impl Fn(&mut LaneState)) -> f64 {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let hidden = model.graph_hidden(&mut tape, &vars).unwrap();
    let mut lane = model.new_lane(&vars);
    let first = model.forward_step(&mut tape, &vars, hidden, &lane, 2).unwrap();
    model.step_update(&mut tape, &vars, &mut lane, 2, true, &first).unwrap();
    setup(&mut lane);
    let out = model.forward_step(&mut tape, &vars, hidden, &lane, 7).unwrap();
    tape.value(out.prob).unwrap().item().unwrap()
}

#[test]
fn graph_ablation_ignores_graph_and_gcn() {
    let base = warmed(Variant::NoGraph);
    let p = first_prob(&base, |_| {});
    let mut other = base.clone();
    other.graph = crate::lcg::LatentConceptGraph::isolated(4);
    other.gcn.layers[0].data_mut().iter_mut().for_each(|x| *x = 3.0);
    assert_eq!(first_prob(&other, |_| {}), p);

    let full = warmed(Variant::Full);
    let mut rewired = full.clone();
    rewired.gcn.layers[0].data_mut().iter_mut().for_each(|x| *x = 3.0);
    assert_ne!(first_prob(&rewired, |_| {}), first_prob(&full, |_| {}));
}

#[test]
fn forgetting_ablation_ignores_counters() {
    let scramble = |lane: &mut LaneState| {
        for c in 0..4 {
            lane.forgetting.set_counters(c, None, 40 + c);
        }
    };
    for variant in [Variant::Basic, Variant::NoForget] {
        let model = warmed(variant);
        assert_eq!(first_prob(&model, scramble), first_prob(&model, |_| {}), "{variant}");
    }
    let full = warmed(Variant::Full);
    assert_ne!(first_prob(&full, scramble), first_prob(&full, |_| {}));
}

#[test]
fn ranks_are_scaled_to_floor_and_one() {
    let r = rank_scale(&[2.0, 4.0, 3.0], 0.1);
    assert_eq!(r, vec![0.1, 1.0, 0.55]);
    assert_eq!(rank_scale(&[1.5, 1.5], 0.1), vec![1.0, 1.0]);
    assert_eq!(rank_scale(&[1.0, 1.0 + 1e-12], 0.1), vec![1.0, 1.0]);
    assert!(rank_scale::<f64>(&[], 0.1).is_empty());

    let model = warmed(Variant::Full);
    let weights = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0], vec![0.25; 4]];
    let oracle: Vec<f64> = weights
        .iter()
        .map(|w| w.iter().zip(&model.graph.degree).map(|(a, d)| a * d).sum())
        .collect();
    let ranks = model.question_ranks(&weights);
    assert_eq!(ranks, rank_scale(&oracle, 0.1));
    assert!(ranks.iter().all(|&r| (0.1..=1.0).contains(&r)));
    for variant in [Variant::NoRank, Variant::Basic] {
        assert_eq!(warmed(variant).question_ranks(&weights), vec![1.0; 3]);
    }
}

#[test]
fn unit_ranks_give_mean_cross_entropy() {
    let model = warmed(Variant::NoRank);
    let mb = tiny_batch();
    let (loss, _, forward) = model.loss_and_gradients(&mb, None).unwrap();
    let oracle: f64 = forward
        .prob_values
        .iter()
        .zip(&forward.labels)
        .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum::<f64>()
        / forward.labels.len() as f64;
    assert!((loss - oracle).abs() < 1e-12);
}

#[test]
fn predictions_are_probabilities_and_records_are_complete() {
    let data = tiny_data(9);
    let model = warmed(Variant::Full);
    let eval = model.evaluate(&data).unwrap();
    assert_eq!(eval.predictions.len(), data.num_interactions());
    assert!(eval.predictions.iter().all(|r| r.p > 0.0 && r.p < 1.0));
    assert!(eval.predictions.iter().all(|r| r.concept < 4 && r.lapse >= 1));
    let csv = eval.to_csv();
    assert!(csv.starts_with("seq,t,q,y,p,concept,lapse,trials\n"));
    assert_eq!(csv.lines().count(), data.num_interactions() + 1);
}

#[test]
fn evaluation_restarts_state_per_window() {
    let data = generate_synthetic(&SyntheticSpec::new(1, 10, 3, 12, 2)).unwrap().0;
    let model = warmed(Variant::Full);
    let eval = model.evaluate(&data).unwrap();
    let ts: Vec<usize> = eval.predictions.iter().map(|r| r.t).collect();
    assert_eq!(ts, (1..=12).collect::<Vec<_>>());
    // The window boundary at step 6 resets memory, so step 6 is predicted as
    // if it were the first step of a fresh sequence.
    let mut tail = data.clone();
    tail.sequences[0].steps.drain(..5);
    let fresh = model.evaluate(&tail).unwrap();
    assert_eq!(fresh.predictions[0].p, eval.predictions[5].p);
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let data = generate_synthetic(&SyntheticSpec::new(40, 10, 3, 20, 4)).unwrap().0;
    let config = DgmnConfig {
        learning_rate: 0.01,
        max_seq_len: 20,
        batch_size: 8,
        ..tiny_config(Variant::Full)
    };
    let mut a = DgmnModel::<f64>::new(config.clone()).unwrap();
    let reports = a.fit(&data, Some(&data), 6, |_| Ok(())).unwrap();
    assert_eq!(reports.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
    assert!(reports[5].loss < reports[0].loss, "{reports:?}");
    assert!(reports.iter().all(|r| r.valid_auc.is_some() && r.train_auc.is_some()));

    let mut b = DgmnModel::<f64>::new(config).unwrap();
    b.fit(&data, None, 6, |_| Ok(())).unwrap();
    assert_eq!(a.named_params(), b.named_params());
    assert_eq!(a.graph, b.graph);
    assert_eq!(a.progress.batches_seen, 30);
    assert_eq!(a.graph.built_at, 30);
}

#[test]
fn single_precision_model_trains() {
    let data = tiny_data(1);
    let mut model = DgmnModel::<f32>::new(tiny_config(Variant::Full)).unwrap();
    let report = model.train_epoch(&data).unwrap();
    assert!(report.loss.is_finite());
    assert!(model.evaluate(&data).unwrap().predictions.iter().all(|r| r.p > 0.0 && r.p < 1.0));
}

#[test]
fn nan_parameters_abort_training() {
    let mut model = DgmnModel::<f64>::new(tiny_config(Variant::Full)).unwrap();
    model.predict_b.data_mut()[..].iter_mut().for_each(|x| *x = f64::NAN);
    let err = model.train_epoch(&tiny_data(1)).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 1, batch: 1, .. }), "{err}");
    assert!(err.is_numerical());
}

#[test]
fn out_of_range_questions_are_data_errors() {
    let model = DgmnModel::<f64>::new(DgmnConfig {
        num_questions: 3,
        ..tiny_config(Variant::Full)
    })
    .unwrap();
    let err = model.evaluate(&tiny_data(1)).unwrap_err();
    assert!(err.is_data_error(), "{err}");
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let data = tiny_data(4);
    let mut model = warmed(Variant::Full);
    save_checkpoint(&model, &path).unwrap();
    let mut loaded: DgmnModel<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.named_params(), model.named_params());
    assert_eq!(loaded.optimizer, model.optimizer);
    assert_eq!(loaded.graph, model.graph);
    assert_eq!(loaded.progress, model.progress);
    assert_eq!(loaded.evaluate(&data).unwrap(), model.evaluate(&data).unwrap());

    // Resuming continues exactly where the original would have gone.
    model.train_epoch(&data).unwrap();
    loaded.train_epoch(&data).unwrap();
    assert_eq!(loaded.named_params(), model.named_params());
}

#[test]
fn checkpoint_rejects_other_versions_and_configs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = DgmnModel::<f64>::new(tiny_config(Variant::Full)).unwrap();
    save_checkpoint(&model, &path).unwrap();

    let expected = DgmnConfig {
        value_dim: 9,
        ..tiny_config(Variant::Full)
    };
    let err = load_checkpoint_expecting::<f64>(&path, &expected).unwrap_err();
    assert!(matches!(&err, Error::ConfigMismatch { field, .. } if field == "d_v"), "{err}");
    let more_epochs = DgmnConfig {
        epochs: 99,
        ..tiny_config(Variant::Full)
    };
    assert!(load_checkpoint_expecting::<f64>(&path, &more_epochs).is_ok());

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("\"version\":1", "\"version\":7", 1)).unwrap();
    let err = load_checkpoint::<f64>(&path).unwrap_err();
    assert!(err.to_string().contains("version 7"), "{err}");
}


#[test]
fn tiny_gradient_errors_shrink_with_larger_step() {
    // Near-zero gradients sit below the finite-difference noise floor at
    // eps=1e-5. The error must fall as eps grows, the signature of rounding
    // noise rather than a wrong derivative.
    let model = warmed(Variant::NoRank);
    let mb = tiny_batch();
    let fine = model_grad_check(&model, &mb, 1e-6).unwrap();
    let coarse = model_grad_check(&model, &mb, 1e-4).unwrap();
    assert!(coarse.max_error < 1e-4, "{coarse:?}");
    assert!(coarse.max_error < fine.max_error);
}
