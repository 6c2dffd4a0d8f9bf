use std::ops::ControlFlow;

use ocor::corpus::synthetic;
use ocor::model::{Model, ModelConfig};
use ocor::training::{
    evaluate_loss, train, EncodedCorpus, EpochRecord, Label, TrainConfig, TrainExample, TrainSinks,
};

/// Overfits 30 synthetic pairs while tracking, after every epoch, the
/// dropout-free training objective over the whole corpus: the positive loss
/// and the mean loss over every possible negative, weighted 1 : negatives.
#[test]
fn tiny_corpus_overfits_with_a_settling_loss_curve() {
    let pairs = synthetic::pairs(30, 7);
    let mut model = Model::init(ModelConfig::small(), 0).unwrap();
    let corpus = EncodedCorpus::new(&pairs, &model);
    let n = pairs.len();
    let example = |query, code| TrainExample {
        query,
        code,
        label: if query == code {
            Label::Related
        } else {
            Label::Unrelated
        },
    };
    let positives: Vec<_> = (0..n).map(|i| example(i, i)).collect();
    let negatives: Vec<_> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| example(i, j))
        .collect();
    let cfg = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };

    let mut eval_losses = Vec::new();
    let mut train_losses = Vec::new();
    let mut watch = |m: &Model, r: &EpochRecord| {
        let pos = evaluate_loss(m, &corpus, &positives, 64).unwrap();
        let neg = evaluate_loss(m, &corpus, &negatives, 64).unwrap();
        eval_losses.push((pos + 5.0 * neg) / 6.0);
        train_losses.push(r.mean_loss);
        if r.mean_loss < 0.1 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    };
    let sinks = TrainSinks {
        on_epoch: Some(&mut watch),
        ..Default::default()
    };
    let out = train(&mut model, &pairs, None, &cfg, sinks).unwrap();

    let last = *train_losses.last().unwrap();
    assert!(
        last < 0.1,
        "final training loss {last} after {} epochs",
        out.epochs.len()
    );
    for (e, w) in eval_losses.windows(2).enumerate().skip(10) {
        assert!(
            w[1] <= w[0] + 0.05,
            "inference loss rose from {} to {} at epoch {}",
            w[0],
            w[1],
            e + 2
        );
    }
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let pairs = synthetic::pairs(10, 2);
    let mut model = Model::init(ModelConfig::small(), 4).unwrap();
    let before = model.clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &pairs, None, &cfg, TrainSinks::default()).unwrap();
    assert!(out.epochs.is_empty());
    assert_eq!(model, before);
}
