use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::Classifier;

/// Downsamples every label to the rarest label's count, keeping the earliest
/// examples of each label in dataset order.
pub fn balance_labels(examples: Vec<Example>, n_classes: usize) -> Vec<Example> {
    let mut counts = vec![0usize; n_classes];
    for e in &examples {
        counts[e.label] += 1;
    }
    let target = counts.iter().copied().min().unwrap_or(0);
    let mut kept = vec![0usize; n_classes];
    examples
        .into_iter()
        .filter(|e| {
            kept[e.label] += 1;
            kept[e.label] <= target
        })
        .collect()
}

fn n_classes_of(examples: &[Example]) -> usize {
    examples.iter().map(|e| e.label + 1).max().unwrap_or(0)
}

/// Tokens whose occurrence count is at least `freq_threshold` and whose most
/// frequent co-occurring label accounts for at least `ratio_threshold` of
/// those occurrences. Sorted ascending.
pub fn biased_tokens(examples: &[Example], n_classes: usize, freq_threshold: usize, ratio_threshold: f64) -> Vec<u32> {
    let mut counts: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for e in examples {
        for &t in e.a.iter().chain(&e.b) {
            counts.entry(t).or_insert_with(|| vec![0; n_classes])[e.label] += 1;
        }
    }
    counts
        .into_iter()
        .filter(|(_, by_label)| {
            let total: usize = by_label.iter().sum();
            let top = by_label.iter().copied().max().unwrap_or(0);
            total >= freq_threshold && top as f64 / total as f64 >= ratio_threshold
        })
        .map(|(t, _)| t)
        .collect()
}

/// Removes every example containing a biased token, then rebalances labels.
pub fn filter_unbiased(dataset: &Dataset, freq_threshold: usize, ratio_threshold: f64) -> Result<Dataset> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot filter an empty dataset".into()));
    }
    let n_classes = n_classes_of(&dataset.examples);
    let mut biased = biased_tokens(&dataset.examples, n_classes, freq_threshold, ratio_threshold);
    let set: HashSet<u32> = biased.iter().copied().collect();
    let kept: Vec<Example> = dataset
        .examples
        .iter()
        .filter(|e| !e.a.iter().chain(&e.b).any(|t| set.contains(t)))
        .cloned()
        .collect();
    let kept = balance_labels(kept, n_classes);
    if kept.is_empty() {
        biased.sort_unstable();
        return Err(Error::EmptyAfterFilter { biased });
    }
    log::debug!("unbiased filter kept {} of {} examples", kept.len(), dataset.len());
    Ok(Dataset::new(dataset.name.clone(), kept))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardFilterReport {
    /// Ids of every example the probe misclassified, in dataset order.
    pub misclassified: Vec<String>,
    pub probe_accuracy: f64,
    /// True when the probe predicts one class for every example.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

/// Keeps the examples a hypothesis-only probe gets wrong, label-balanced by
/// downsampling.
pub fn filter_hard<C: Classifier + ?Sized>(dataset: &Dataset, probe: &C) -> Result<(Dataset, HardFilterReport)> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot filter an empty dataset".into()));
    }
    let n_classes = n_classes_of(&dataset.examples);
    let preds = probe.predict(&dataset.examples)?;
    let mut warnings = Vec::new();
    let degenerate = preds.iter().all(|&p| p == preds[0]);
    if degenerate {
        let w = format!("probe predicts class {} for every example", preds[0]);
        log::warn!("{w}");
        warnings.push(w);
    }
    let wrong: Vec<Example> = dataset
        .examples
        .iter()
        .zip(&preds)
        .filter(|(e, &p)| p != e.label)
        .map(|(e, _)| e.clone())
        .collect();
    let report = HardFilterReport {
        misclassified: wrong.iter().map(|e| e.id.clone()).collect(),
        probe_accuracy: 1.0 - wrong.len() as f64 / dataset.len() as f64,
        degenerate,
        warnings,
    };
    let kept = balance_labels(wrong, n_classes);
    Ok((Dataset::new(dataset.name.clone(), kept), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, BiasKind, BiasSpec, TaskParams, TaskSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ex(id: usize, a: &[u32], b: &[u32], label: usize) -> Example {
        Example {
            id: id.to_string(),
            a: a.to_vec(),
            b: b.to_vec(),
            label,
            tags: Default::default(),
        }
    }

    struct Fixed(Vec<usize>);

    impl Classifier for Fixed {
        fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
            Ok(self.0.iter().copied().cycle().take(examples.len()).collect())
        }
    }

    struct Oracle;

    impl Classifier for Oracle {
        fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
            Ok(examples.iter().map(|e| e.label).collect())
        }
    }

    #[test]
    fn token_always_with_one_label_is_flagged() {
        // Neutral tokens rotate evenly through the labels; token 99 joins ten
        // label-2 examples.
        let examples: Vec<Example> = (0..90)
            .map(|i| {
                let mut a = vec![10 + (i as u32 / 3) % 3];
                if i % 3 == 2 && i >= 60 {
                    a.push(99);
                }
                ex(i, &a, &[20 + (i as u32 / 9) % 3], i % 3)
            })
            .collect();
        let ds = Dataset::new("t", examples);
        assert_eq!(biased_tokens(&ds.examples, 3, 3, 0.385), vec![99]);
        let out = filter_unbiased(&ds, 3, 0.385).unwrap();
        assert_eq!(out.len(), 60);
        assert!(out.examples.iter().all(|e| !e.a.contains(&99)));
    }

    #[test]
    fn frequency_threshold_is_inclusive() {
        let examples = vec![ex(0, &[7], &[8], 0), ex(1, &[7], &[9], 0), ex(2, &[7], &[9], 1)];
        assert_eq!(biased_tokens(&examples, 2, 3, 0.385), vec![7]);
        assert!(biased_tokens(&examples, 2, 4, 0.385).is_empty());
    }

    #[test]
    fn flags_exactly_the_planted_tokens() {
        let task = TaskSpec::new(TaskParams::default()).unwrap();
        let biases = [
            BiasSpec::new(BiasKind::Lexical, 0.95, 0.6),
            BiasSpec::new(BiasKind::PartialInput, 0.95, 0.6),
            BiasSpec::new(BiasKind::Overlap, 0.95, 1.0),
        ];
        let ds = gen_dataset(&task, &biases, 20_000, 5).unwrap();
        let flagged = biased_tokens(&ds.examples, 3, 3, 0.385);
        assert_eq!(flagged, task.shortcut_tokens());
    }

    #[test]
    fn uniform_cooccurrence_keeps_nearly_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let examples: Vec<Example> = (0..6000)
            .map(|i| {
                let a: Vec<u32> = (0..4).map(|_| rng.random_range(10..30)).collect();
                let b: Vec<u32> = (0..4).map(|_| rng.random_range(10..30)).collect();
                ex(i, &a, &b, i % 3)
            })
            .collect();
        let out = filter_unbiased(&Dataset::new("u", examples), 3, 0.385).unwrap();
        assert!(out.len() >= 5900, "{}", out.len());
    }

    #[test]
    fn unbiased_filter_drops_planted_tokens_and_balances() {
        let task = TaskSpec::new(TaskParams::default()).unwrap();
        let biases = [
            BiasSpec::new(BiasKind::Lexical, 0.95, 0.6),
            BiasSpec::new(BiasKind::PartialInput, 0.95, 0.6),
            BiasSpec::new(BiasKind::Overlap, 0.95, 1.0),
        ];
        let ds = gen_dataset(&task, &biases, 6000, 2).unwrap();
        let once = filter_unbiased(&ds, 3, 0.385).unwrap();
        let planted = task.shortcut_tokens();
        assert!(once.examples.iter().all(|e| !e.a.iter().chain(&e.b).any(|t| planted.contains(t))));
        let counts = once.label_counts(3);
        assert!(counts.iter().all(|&c| c == counts[0]));
    }

    #[test]
    fn everything_biased_is_an_emptiness_error() {
        let examples = vec![ex(0, &[5], &[6], 0), ex(1, &[5], &[6], 0), ex(2, &[5], &[6], 0)];
        let err = filter_unbiased(&Dataset::new("e", examples), 3, 0.385).unwrap_err();
        assert!(matches!(err, Error::EmptyAfterFilter { ref biased } if biased == &vec![5, 6]));
    }

    #[test]
    fn perfect_probe_leaves_nothing() {
        let examples: Vec<Example> = (0..30).map(|i| ex(i, &[4], &[5], i % 3)).collect();
        let (out, report) = filter_hard(&Dataset::new("h", examples), &Oracle).unwrap();
        assert!(out.is_empty());
        assert_eq!(report.probe_accuracy, 1.0);
        assert!(!report.degenerate);
    }

    #[test]
    fn chance_probe_keeps_about_two_thirds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let examples: Vec<Example> = (0..3000).map(|i| ex(i, &[4], &[5], i % 3)).collect();
        let preds: Vec<usize> = (0..3000).map(|_| rng.random_range(0..3)).collect();
        let (out, report) = filter_hard(&Dataset::new("h", examples), &Fixed(preds.clone())).unwrap();
        let frac = report.misclassified.len() as f64 / 3000.0;
        assert!((frac - 2.0 / 3.0).abs() < 0.03, "{frac}");
        for e in &out.examples {
            let i: usize = e.id.parse().unwrap();
            assert_ne!(preds[i], e.label);
        }
    }

    #[test]
    fn constant_probe_is_reported_not_rejected() {
        let examples: Vec<Example> = (0..9).map(|i| ex(i, &[4], &[5], i % 3)).collect();
        let (out, report) = filter_hard(&Dataset::new("h", examples), &Fixed(vec![1])).unwrap();
        assert!(report.degenerate);
        assert_eq!(report.warnings.len(), 1);
        // Label 1 is never misclassified, so balancing empties the set.
        assert!(out.is_empty());
        assert_eq!(report.misclassified.len(), 6);
    }
}
