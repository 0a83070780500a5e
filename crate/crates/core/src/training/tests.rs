use super::*;
use crate::backbone::BackboneConfig;
use crate::data::{gen_dataset, BiasKind, BiasSpec, TaskParams, TaskSpec};

fn tiny_config(seed: u64) -> BackboneConfig {
    BackboneConfig {
        vocab_size: 200,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        max_len: 16,
        n_classes: 3,
        seed,
    }
}

fn task() -> TaskSpec {
    TaskSpec::new(TaskParams::default()).unwrap()
}

fn data(n: usize, seed: u64, name: &str) -> Dataset {
    let biases = [BiasSpec::new(BiasKind::Lexical, 0.9, 0.5)];
    gen_dataset(&task(), &biases, n, seed).unwrap().renamed(name)
}

fn smoa_model(seed: u64) -> Model {
    Model::new(tiny_config(seed))
        .unwrap()
        .insert_smoa(
            SmoaConfig {
                n_adapters: 3,
                top_k: 2,
                bottleneck: 4,
            },
            seed,
        )
        .unwrap()
}

/// Gives the up projections nonzero weights so adapters contribute.
fn perturb_adapters(model: &mut Model) {
    let mut k = 0.0;
    for p in model.smoa.as_mut().unwrap().params_mut() {
        for v in p.value.data_mut() {
            k += 1.0;
            *v += 0.05 * (k * 0.37f64).sin();
        }
    }
}

struct Oracle;

impl Classifier for Oracle {
    fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
        let t = task();
        Ok(examples.iter().map(|e| t.ground_truth(e).unwrap()).collect())
    }
}

struct Constant(usize);

impl Classifier for Constant {
    fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
        Ok(vec![self.0; examples.len()])
    }
}

#[test]
fn summed_loss_is_the_sum_of_its_terms() {
    let model = smoa_model(1);
    let a = Prepared::new(&data(40, 1, "a"), View::Full);
    let b = Prepared::new(&data(40, 2, "b"), View::Full);
    let batches = vec![
        a.batch(&(0..8).collect::<Vec<_>>(), 16).unwrap(),
        b.batch(&(0..8).collect::<Vec<_>>(), 16).unwrap(),
    ];
    let mut g = Graph::new();
    let loss = multi_bias_loss(&model, &mut g, &batches).unwrap();
    let terms: Vec<f64> = loss.terms.iter().map(|&t| g.value(t).item()).collect();
    assert_eq!(terms.len(), 2);
    assert!((g.value(loss.total).item() - terms.iter().sum::<f64>()).abs() < 1e-15);

    let mut g1 = Graph::new();
    let single = multi_bias_loss(&model, &mut g1, &batches[..1]).unwrap();
    let logits = model.forward(&mut g1, &batches[0].batch).unwrap();
    let ce = g1.cross_entropy(logits, &batches[0].labels).unwrap();
    assert_eq!(g1.value(single.total).item(), g1.value(ce).item());
}

#[test]
fn empty_batch_list_is_a_contract_error() {
    let model = smoa_model(1);
    let mut g = Graph::new();
    assert!(matches!(
        multi_bias_loss(&model, &mut g, &[]),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn summed_gradient_equals_sum_of_separate_gradients() {
    let mut model = smoa_model(2);
    perturb_adapters(&mut model);
    let sets: Vec<Prepared> = (0..3)
        .map(|i| Prepared::new(&data(30, 10 + i, "x"), View::Full))
        .collect();
    let batches: Vec<LabeledBatch> = sets
        .iter()
        .map(|s| s.batch(&(0..6).collect::<Vec<_>>(), 16).unwrap())
        .collect();
    model.zero_grad();
    accumulate_gradients(&mut model, &batches).unwrap();
    let joint: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.as_ref().map(|g| g.data().to_vec()).unwrap_or_default())
        .collect();
    let mut separate: Vec<Vec<f64>> = vec![Vec::new(); joint.len()];
    for b in &batches {
        model.zero_grad();
        accumulate_gradients(&mut model, std::slice::from_ref(b)).unwrap();
        for (acc, p) in separate.iter_mut().zip(model.params()) {
            if let Some(g) = &p.grad {
                if acc.is_empty() {
                    acc.resize(g.numel(), 0.0);
                }
                for (x, y) in acc.iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
        }
    }
    let mut checked = 0;
    for (j, s) in joint.iter().zip(&separate) {
        assert_eq!(j.len(), s.len());
        for (x, y) in j.iter().zip(s) {
            assert!((x - y).abs() < 1e-10);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn each_step_draws_one_batch_per_dataset() {
    let mut model = smoa_model(3);
    let sets: Vec<Prepared> = [50, 20, 35]
        .iter()
        .enumerate()
        .map(|(i, &n)| Prepared::new(&data(n, i as u64, &format!("d{i}")), View::Full))
        .collect();
    let phase = Phase {
        learning_rate: 1e-3,
        epochs: 2,
        batch_size: 10,
        adam: AdamHyper::default(),
        seed: 0,
    };
    let recs = fit(&mut model, &sets, &phase).unwrap();
    assert_eq!(recs.len(), 2);
    for r in &recs {
        assert_eq!(r.steps, 5);
        assert_eq!(r.loss.len(), 3);
    }
}

#[test]
fn dataset_smaller_than_a_batch_is_a_config_error() {
    let mut model = smoa_model(3);
    let sets = vec![Prepared::new(&data(5, 0, "small"), View::Full)];
    let phase = Phase {
        learning_rate: 1e-3,
        epochs: 1,
        batch_size: 8,
        adam: AdamHyper::default(),
        seed: 0,
    };
    assert!(matches!(fit(&mut model, &sets, &phase), Err(crate::Error::Config(_))));
}

#[test]
fn smoa_training_leaves_backbone_bytes_unchanged() {
    let model = Model::new(tiny_config(4)).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        learning_rate: 1e-2,
        smoa: Some(SmoaConfig {
            n_adapters: 3,
            top_k: 2,
            bottleneck: 4,
        }),
        ..TrainConfig::default()
    };
    let sets = vec![data(24, 1, "a"), data(24, 2, "b")];
    let (trained, report, before, after) = train_smoa(model, &sets, &cfg, &[]).unwrap();
    assert_eq!(before, after);
    assert!(report.trainable_params < report.total_params);
    assert_eq!(ParamSummary::of(&trained).trainable, report.trainable_params);
    let moved = trained
        .smoa
        .as_ref()
        .unwrap()
        .params()
        .iter()
        .any(|p| p.value.data().iter().any(|&v| v != 0.0 && p.name.contains(".up.")));
    assert!(moved, "adapters did not train");
}

#[test]
fn unfreeze_all_restores_full_tuning() {
    let mut model = smoa_model(5);
    assert!(model.trainable_params() < model.total_params());
    model.unfreeze_all();
    assert_eq!(model.trainable_params(), model.total_params());
}

/// Full tuning fits a 200-example set in which each class has a single cue
/// token present in every example.
#[test]
fn memorizes_two_hundred_examples() {
    let mut model = Model::new(BackboneConfig {
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        d_ff: 128,
        ..tiny_config(6)
    })
    .unwrap();
    let t = TaskSpec::new(TaskParams {
        lexical_per_class: 1,
        ..TaskParams::default()
    })
    .unwrap();
    let biases = [BiasSpec::new(BiasKind::Lexical, 1.0, 1.0)];
    let ds = gen_dataset(&t, &biases, 200, 6).unwrap().renamed("mem");
    let cfg = TrainConfig {
        backbone_learning_rate: 3e-3,
        backbone_epochs: 5,
        batch_size: 8,
        adam: AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        },
        ..TrainConfig::default()
    };
    train_full(&mut model, &ds, View::Full, &cfg, &[]).unwrap();
    let all = Prepared::new(&ds, View::Full);
    let batch = all.batch(&(0..200).collect::<Vec<_>>(), 16).unwrap();
    let mut g = Graph::inference();
    let loss = multi_bias_loss(&model, &mut g, &[batch]).unwrap();
    let l = g.value(loss.total).item();
    assert!(l < 0.05, "loss {l}");
}

#[test]
fn same_seed_same_report() {
    let run = || {
        let model = Model::new(tiny_config(7)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            backbone_epochs: 1,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let td = TrainData {
            basic: data(48, 1, "basic"),
            adversarial: vec![data(32, 2, "adv1"), data(32, 3, "adv2")],
        };
        let eval = vec![data(30, 4, "dev")];
        train(model, &td, &cfg, &eval).unwrap().1.without_timing()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.backbone_unchanged());
    assert_eq!(a.phases.len(), 2);
    assert_eq!(a.smoa.unwrap().n_adapters, 3);
}

#[test]
fn one_stage_adds_the_basic_set_as_a_term() {
    let model = Model::new(tiny_config(8)).unwrap();
    let cfg = TrainConfig {
        strategy: Strategy::OneStage,
        epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let td = TrainData {
        basic: data(48, 1, "basic"),
        adversarial: vec![data(32, 2, "adv")],
    };
    let (_, report) = train(model, &td, &cfg, &[]).unwrap();
    assert_eq!(report.phases[0].datasets, vec!["basic", "adv"]);
    assert!(!report.backbone_unchanged());

    let concat = TrainConfig {
        mixing: Mixing::Concat,
        one_stage_tune_backbone: false,
        ..cfg
    };
    let (_, report) = train(Model::new(tiny_config(8)).unwrap(), &td, &concat, &[]).unwrap();
    assert_eq!(report.phases[0].datasets, vec!["mixed"]);
    assert!(report.backbone_unchanged());
}

#[test]
fn oracle_and_constant_accuracy() {
    let ds = data(300, 3, "eval");
    assert_eq!(evaluate(&Oracle, &ds).unwrap(), 1.0);
    let acc = evaluate(&Constant(1), &ds).unwrap();
    assert!((acc - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn confusion_matches_hand_scoring() {
    struct Table(Vec<usize>);
    impl Classifier for Table {
        fn predict(&self, _: &[Example]) -> Result<Vec<usize>> {
            Ok(self.0.clone())
        }
    }
    let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1];
    let preds = vec![0, 1, 2, 1, 1, 0, 0, 2, 2, 0, 1, 2, 2, 1, 2, 0, 0, 2, 0, 1];
    let ds = Dataset::new(
        "hand",
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Example {
                id: i.to_string(),
                a: vec![3],
                b: vec![9],
                label: l,
                tags: Default::default(),
            })
            .collect(),
    );
    let m = confusion(&Table(preds.clone()), &ds, 3).unwrap();
    // Scored by hand from the two arrays above.
    assert_eq!(m, vec![vec![5, 1, 1], vec![1, 5, 1], vec![1, 0, 5]]);
    assert!((evaluate(&Table(preds), &ds).unwrap() - 15.0 / 20.0).abs() < 1e-12);
}

#[test]
fn ties_resolve_to_lowest_class() {
    assert_eq!(crate::model::argmax(&[0.5, 0.5, 0.1]), 0);
    assert_eq!(crate::model::argmax(&[0.1, 0.7, 0.7]), 1);
}

fn probe_config() -> TrainConfig {
    TrainConfig {
        backbone_learning_rate: 3e-3,
        backbone_epochs: 4,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn hypothesis_only_model_fits_marker_labels() {
    let mut probe = Model::new(BackboneConfig { d_model: 32, n_heads: 2, ..tiny_config(2) }).unwrap();
    let biases = [BiasSpec::new(BiasKind::PartialInput, 1.0, 1.0)];
    let ds = gen_dataset(&task(), &biases, 600, 4).unwrap().renamed("pi");
    train_full(&mut probe, &ds, View::PartialInput, &probe_config(), &[]).unwrap();
    let preds = crate::model::PartialInput(&probe).predict(&ds.examples).unwrap();
    let acc = preds.iter().zip(&ds.examples).filter(|(p, e)| **p == e.label).count() as f64 / 600.0;
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn hypothesis_only_model_is_near_chance_on_compositional_labels() {
    let mut probe = Model::new(BackboneConfig { d_model: 32, n_heads: 2, ..tiny_config(3) }).unwrap();
    let train_set = gen_dataset(&task(), &[], 1500, 5).unwrap().renamed("clean");
    let held_out = gen_dataset(&task(), &[], 1500, 6).unwrap();
    train_full(&mut probe, &train_set, View::PartialInput, &probe_config(), &[]).unwrap();
    let preds = crate::model::PartialInput(&probe).predict(&held_out.examples).unwrap();
    let acc = preds.iter().zip(&held_out.examples).filter(|(p, e)| **p == e.label).count() as f64 / 1500.0;
    assert!((acc - 1.0 / 3.0).abs() < 0.06, "{acc}");
}
