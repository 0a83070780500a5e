use std::collections::{HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BiasKind, BiasSpec, Dataset, Example, TaskSpec};
use crate::error::{config, Result};

/// Concrete construction of an anti-correlated split. Each bias family has
/// two variants so that routing can be compared within and across families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeVariant {
    LexicalInA,
    LexicalInB,
    MarkerAtStart,
    MarkerAtEnd,
    OverlapOrdered,
    OverlapShuffled,
}

impl ChallengeVariant {
    pub const ALL: [ChallengeVariant; 6] = [
        ChallengeVariant::LexicalInA,
        ChallengeVariant::LexicalInB,
        ChallengeVariant::MarkerAtStart,
        ChallengeVariant::MarkerAtEnd,
        ChallengeVariant::OverlapOrdered,
        ChallengeVariant::OverlapShuffled,
    ];

    pub fn kind(self) -> BiasKind {
        match self {
            ChallengeVariant::LexicalInA | ChallengeVariant::LexicalInB => BiasKind::Lexical,
            ChallengeVariant::MarkerAtStart | ChallengeVariant::MarkerAtEnd => {
                BiasKind::PartialInput
            }
            ChallengeVariant::OverlapOrdered | ChallengeVariant::OverlapShuffled => {
                BiasKind::Overlap
            }
        }
    }

    pub fn for_kind(kind: BiasKind) -> [ChallengeVariant; 2] {
        match kind {
            BiasKind::Lexical => [ChallengeVariant::LexicalInA, ChallengeVariant::LexicalInB],
            BiasKind::PartialInput => {
                [ChallengeVariant::MarkerAtStart, ChallengeVariant::MarkerAtEnd]
            }
            BiasKind::Overlap => [
                ChallengeVariant::OverlapOrdered,
                ChallengeVariant::OverlapShuffled,
            ],
        }
    }

    /// Short subset name, e.g. `PI_ST`.
    pub fn name(self) -> &'static str {
        match self {
            ChallengeVariant::LexicalInA => "LX_A",
            ChallengeVariant::LexicalInB => "LX_B",
            ChallengeVariant::MarkerAtStart => "PI_ST",
            ChallengeVariant::MarkerAtEnd => "PI_EN",
            ChallengeVariant::OverlapOrdered => "OV_OR",
            ChallengeVariant::OverlapShuffled => "OV_SH",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fill {
    Natural,
    High { shuffled: bool },
    Low,
}

/// An example under construction. Segment B's unfixed slots are filled last
/// so the overlap level can be controlled exactly.
struct Draft {
    label: usize,
    a: Vec<u32>,
    b: Vec<u32>,
    fixed_a: Vec<bool>,
    fixed_b: Vec<bool>,
}

impl Draft {
    fn new(task: &TaskSpec, (ka, kb): (usize, usize), label: usize, rng: &mut ChaCha8Rng) -> Self {
        let p = &task.params;
        let fillers = task.fillers();
        let mut a: Vec<u32> = (0..p.len_a).map(|_| rng.random_range(fillers.clone())).collect();
        let mut fixed_a = vec![false; p.len_a];
        let pa = rng.random_range(0..p.len_a);
        a[pa] = task.key_a(ka);
        fixed_a[pa] = true;
        let mut b = vec![0; p.len_b];
        let mut fixed_b = vec![false; p.len_b];
        let pb = rng.random_range(0..p.len_b);
        b[pb] = task.key_b(kb);
        fixed_b[pb] = true;
        Draft {
            label,
            a,
            b,
            fixed_a,
            fixed_b,
        }
    }

    fn free(fixed: &[bool]) -> Vec<usize> {
        (0..fixed.len()).filter(|&i| !fixed[i]).collect()
    }

    fn plant_a(&mut self, token: u32, rng: &mut ChaCha8Rng) {
        if let Some(&i) = Self::free(&self.fixed_a).choose(rng) {
            self.a[i] = token;
            self.fixed_a[i] = true;
        }
    }

    fn plant_b(&mut self, token: u32, rng: &mut ChaCha8Rng) {
        if let Some(&i) = Self::free(&self.fixed_b).choose(rng) {
            self.b[i] = token;
            self.fixed_b[i] = true;
        }
    }

    /// Puts `token` at position `pos` of segment B, moving whatever fixed
    /// token sat there to another free slot.
    fn plant_b_at(&mut self, pos: usize, token: u32, rng: &mut ChaCha8Rng) {
        if self.fixed_b[pos] {
            let displaced = self.b[pos];
            let others: Vec<usize> = Self::free(&self.fixed_b).into_iter().filter(|&i| i != pos).collect();
            let &j = others.choose(rng).expect("segment B has room");
            self.b[j] = displaced;
            self.fixed_b[j] = true;
        }
        self.b[pos] = token;
        self.fixed_b[pos] = true;
    }

    fn fill_b(&mut self, task: &TaskSpec, fill: Fill, rng: &mut ChaCha8Rng) {
        let slots = Self::free(&self.fixed_b);
        let fillers = task.fillers();
        match fill {
            Fill::Natural => {
                for i in slots {
                    self.b[i] = rng.random_range(fillers.clone());
                }
            }
            Fill::High { shuffled } => {
                let mut source: Vec<u32> = Self::free(&self.fixed_a).into_iter().map(|i| self.a[i]).collect();
                if shuffled {
                    source.shuffle(rng);
                }
                for (n, i) in slots.into_iter().enumerate() {
                    self.b[i] = source[n % source.len()];
                }
            }
            Fill::Low => {
                let in_a: HashSet<u32> = self.a.iter().copied().collect();
                let pool: Vec<u32> = fillers.filter(|t| !in_a.contains(t)).collect();
                for i in slots {
                    self.b[i] = *pool.choose(rng).expect("vocabulary keeps fillers disjoint");
                }
            }
        }
    }

    fn finish(self, task: &TaskSpec, id: usize) -> Example {
        let mut ex = Example {
            id: id.to_string(),
            a: self.a,
            b: self.b,
            label: self.label,
            tags: Default::default(),
        };
        ex.tags = task.tags_for(&ex);
        ex
    }
}

/// Hands out key pairs for a label by cycling through a shuffled list, one
/// cycle per stratum, so every key co-occurs with every label almost equally
/// often inside each stratum.
struct KeyCycler {
    by_label: Vec<Vec<(usize, usize)>>,
    cycles: HashMap<(usize, u8), (Vec<(usize, usize)>, usize)>,
}

impl KeyCycler {
    fn new(task: &TaskSpec) -> Self {
        let mut by_label = vec![Vec::new(); task.n_classes()];
        for (i, row) in task.table.iter().enumerate() {
            for (j, &l) in row.iter().enumerate() {
                by_label[l].push((i, j));
            }
        }
        KeyCycler {
            by_label,
            cycles: HashMap::new(),
        }
    }

    fn next(&mut self, label: usize, stratum: u8, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let (list, pos) = self
            .cycles
            .entry((label, stratum))
            .or_insert_with(|| (Vec::new(), 0));
        if *pos == list.len() {
            *list = self.by_label[label].clone();
            list.shuffle(rng);
            *pos = 0;
        }
        *pos += 1;
        list[*pos - 1]
    }
}

fn balanced_labels(n_classes: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..size).map(|i| i % n_classes).collect();
    labels.shuffle(rng);
    labels
}

fn other_label(label: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> usize {
    let r = rng.random_range(0..n_classes - 1);
    if r >= label {
        r + 1
    } else {
        r
    }
}

/// Label implied by a planted class-valued shortcut.
fn implied_label(label: usize, strength: f64, n_classes: usize, rng: &mut ChaCha8Rng) -> usize {
    if rng.random::<f64>() < strength {
        label
    } else {
        other_label(label, n_classes, rng)
    }
}

fn check(task: &TaskSpec, size: usize) -> Result<()> {
    if size == 0 {
        return Err(config("dataset size must be positive"));
    }
    TaskSpec::new(task.params.clone()).map(|_| ())
}

/// Generates a balanced split with the requested shortcuts planted.
pub fn gen_dataset(task: &TaskSpec, biases: &[BiasSpec], size: usize, seed: u64) -> Result<Dataset> {
    check(task, size)?;
    let mut seen = HashSet::new();
    for b in biases {
        b.validate()?;
        if !seen.insert(b.kind) {
            return Err(config(format!("{} bias listed twice", b.kind.name())));
        }
    }
    let find = |k: BiasKind| biases.iter().find(|b| b.kind == k).copied();
    let (lexical, partial, overlap) = (
        find(BiasKind::Lexical),
        find(BiasKind::PartialInput),
        find(BiasKind::Overlap),
    );
    let p = &task.params;
    let c = p.n_classes;
    let mut keys = KeyCycler::new(task);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(c, size, &mut rng);
    let mut examples = Vec::with_capacity(size);
    for (id, &label) in labels.iter().enumerate() {
        let mut covered = |s: Option<BiasSpec>| s.is_some_and(|s| rng.random::<f64>() < s.coverage);
        let (lex_on, pi_on, ov_on) = (covered(lexical), covered(partial), covered(overlap));
        let stratum = u8::from(lex_on) | u8::from(pi_on) << 1 | u8::from(ov_on) << 2;
        let pair = keys.next(label, stratum, &mut rng);
        let mut d = Draft::new(task, pair, label, &mut rng);
        if let Some(s) = lexical.filter(|_| lex_on) {
            let class = implied_label(label, s.strength, c, &mut rng);
            let tok = task.lexical_token(class, rng.random_range(0..p.lexical_per_class));
            if rng.random::<bool>() {
                d.plant_a(tok, &mut rng);
            } else {
                d.plant_b(tok, &mut rng);
            }
        }
        if let Some(s) = partial.filter(|_| pi_on) {
            let class = implied_label(label, s.strength, c, &mut rng);
            let tok = task.marker_token(class, rng.random_range(0..p.markers_per_class));
            d.plant_b(tok, &mut rng);
        }
        let fill = match overlap.filter(|_| ov_on) {
            Some(s) => {
                let agrees = rng.random::<f64>() < s.strength;
                let high = (label == p.overlap_label) == agrees;
                if high {
                    Fill::High { shuffled: false }
                } else {
                    Fill::Low
                }
            }
            None => Fill::Natural,
        };
        d.fill_b(task, fill, &mut rng);
        examples.push(d.finish(task, id));
    }
    Ok(Dataset::new("synthetic", examples))
}

/// Anti-correlated split for one bias family, alternating its two variants.
pub fn gen_challenge(task: &TaskSpec, kind: BiasKind, size: usize, seed: u64) -> Result<Dataset> {
    check(task, size)?;
    let variants = ChallengeVariant::for_kind(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(task.n_classes(), size, &mut rng);
    let mut keys = KeyCycler::new(task);
    let examples = labels
        .iter()
        .enumerate()
        .map(|(id, &label)| challenge_example(task, &mut keys, variants[id % 2], label, id, &mut rng))
        .collect();
    Ok(Dataset::new(format!("challenge_{}", kind.name()), examples))
}

/// Anti-correlated split built from a single variant.
pub fn gen_challenge_variant(task: &TaskSpec, variant: ChallengeVariant, size: usize, seed: u64) -> Result<Dataset> {
    check(task, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(task.n_classes(), size, &mut rng);
    let mut keys = KeyCycler::new(task);
    let examples = labels
        .iter()
        .enumerate()
        .map(|(id, &label)| challenge_example(task, &mut keys, variant, label, id, &mut rng))
        .collect();
    Ok(Dataset::new(variant.name(), examples))
}

fn challenge_example(
    task: &TaskSpec,
    keys: &mut KeyCycler,
    variant: ChallengeVariant,
    label: usize,
    id: usize,
    rng: &mut ChaCha8Rng,
) -> Example {
    let p = &task.params;
    let c = p.n_classes;
    let pair = keys.next(label, 0, rng);
    let mut d = Draft::new(task, pair, label, rng);
    let mut fill = Fill::Natural;
    match variant {
        ChallengeVariant::LexicalInA | ChallengeVariant::LexicalInB => {
            let class = other_label(label, c, rng);
            let tok = task.lexical_token(class, rng.random_range(0..p.lexical_per_class));
            if variant == ChallengeVariant::LexicalInA {
                d.plant_a(tok, rng);
            } else {
                d.plant_b(tok, rng);
            }
        }
        ChallengeVariant::MarkerAtStart | ChallengeVariant::MarkerAtEnd => {
            let class = other_label(label, c, rng);
            let tok = task.marker_token(class, rng.random_range(0..p.markers_per_class));
            let pos = if variant == ChallengeVariant::MarkerAtStart { 0 } else { p.len_b - 1 };
            d.plant_b_at(pos, tok, rng);
        }
        ChallengeVariant::OverlapOrdered | ChallengeVariant::OverlapShuffled => {
            fill = if label == p.overlap_label {
                Fill::Low
            } else {
                Fill::High {
                    shuffled: variant == ChallengeVariant::OverlapShuffled,
                }
            };
        }
    }
    d.fill_b(task, fill, rng);
    d.finish(task, id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BiasTag, TaskParams, HIGH_OVERLAP};
    use proptest::prelude::*;

    fn task() -> TaskSpec {
        TaskSpec::new(TaskParams::default()).unwrap()
    }

    fn all_biases(strength: f64) -> Vec<BiasSpec> {
        vec![
            BiasSpec::new(BiasKind::Lexical, strength, 0.6),
            BiasSpec::new(BiasKind::PartialInput, strength, 0.6),
            BiasSpec::new(BiasKind::Overlap, strength, 1.0),
        ]
    }

    #[test]
    fn labels_follow_the_key_rule_and_are_balanced() {
        let t = task();
        let ds = gen_dataset(&t, &all_biases(0.95), 1001, 3).unwrap();
        for e in &ds.examples {
            assert_eq!(t.ground_truth(e), Some(e.label));
            assert_eq!(e.a.len(), t.params.len_a);
            assert_eq!(e.b.len(), t.params.len_b);
        }
        let counts = ds.label_counts(3);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn strength_is_calibrated_among_planted_examples() {
        let t = task();
        let ds = gen_dataset(&t, &all_biases(0.8), 6000, 9).unwrap();
        for kind in BiasKind::ALL {
            let planted: Vec<&Example> = ds
                .examples
                .iter()
                .filter(|e| kind == BiasKind::Overlap || t.shortcut_prediction(kind, e).is_some())
                .collect();
            let agree = planted.iter().filter(|e| t.shortcut_agrees(kind, e)).count();
            let rate = agree as f64 / planted.len() as f64;
            assert!((rate - 0.8).abs() < 0.02, "{kind:?}: {rate}");
        }
    }

    #[test]
    fn perfect_lexical_bias_is_linearly_decodable() {
        let t = task();
        let biases = [BiasSpec::new(BiasKind::Lexical, 1.0, 1.0)];
        let ds = gen_dataset(&t, &biases, 900, 1).unwrap();
        // One-hot weights on biased-token presence: class c scores 1 when a
        // class-c token is present.
        for e in &ds.examples {
            let mut scores = [0.0; 3];
            for &tok in e.a.iter().chain(&e.b) {
                if let super::super::TokenRole::Lexical(c) = t.role(tok) {
                    scores[c] += 1.0;
                }
            }
            assert_eq!(crate::model::argmax(&scores), e.label);
        }
    }

    #[test]
    fn uninformative_strength_gives_near_zero_mutual_information() {
        let t = task();
        let biases = [BiasSpec::new(BiasKind::Lexical, 1.0 / 3.0, 1.0)];
        let ds = gen_dataset(&t, &biases, 9000, 4).unwrap();
        let mut joint = [[0.0f64; 3]; 3];
        for e in &ds.examples {
            let s = t.shortcut_prediction(BiasKind::Lexical, e).unwrap();
            joint[s][e.label] += 1.0;
        }
        let n = ds.len() as f64;
        let mut mi = 0.0;
        for s in 0..3 {
            for l in 0..3 {
                let pj = joint[s][l] / n;
                let ps: f64 = joint[s].iter().sum::<f64>() / n;
                let pl: f64 = (0..3).map(|x| joint[x][l]).sum::<f64>() / n;
                if pj > 0.0 {
                    mi += pj * (pj / (ps * pl)).ln();
                }
            }
        }
        assert!(mi < 0.005, "mutual information {mi}");
    }

    #[test]
    fn challenge_splits_defeat_their_heuristic() {
        let t = task();
        for kind in BiasKind::ALL {
            let ds = gen_challenge(&t, kind, 1200, 5).unwrap();
            assert!(t.shortcut_accuracy(kind, &ds) <= 1.0 / 3.0);
            for e in &ds.examples {
                assert_eq!(t.ground_truth(e), Some(e.label));
                assert!(!t.shortcut_agrees(kind, e));
            }
        }
    }

    #[test]
    fn overlap_challenge_pairs_high_overlap_with_other_labels() {
        let t = task();
        let ds = gen_challenge(&t, BiasKind::Overlap, 300, 2).unwrap();
        for e in &ds.examples {
            let high = e.overlap_ratio() >= HIGH_OVERLAP;
            assert_eq!(high, e.label != t.params.overlap_label);
        }
    }

    #[test]
    fn marker_variants_fix_the_marker_position() {
        let t = task();
        let start = gen_challenge_variant(&t, ChallengeVariant::MarkerAtStart, 200, 1).unwrap();
        let end = gen_challenge_variant(&t, ChallengeVariant::MarkerAtEnd, 200, 1).unwrap();
        for e in &start.examples {
            assert!(matches!(t.role(e.b[0]), super::super::TokenRole::Marker(_)));
            assert_eq!(t.ground_truth(e), Some(e.label));
        }
        for e in &end.examples {
            assert!(matches!(t.role(*e.b.last().unwrap()), super::super::TokenRole::Marker(_)));
        }
    }

    #[test]
    fn segment_b_reader_fails_partial_input_challenge() {
        // The best segment-B-only rule follows the marker; keys in B alone
        // carry no label information.
        let t = task();
        let ds = gen_challenge(&t, BiasKind::PartialInput, 1500, 8).unwrap();
        let acc = t.shortcut_accuracy(BiasKind::PartialInput, &ds);
        assert!(acc <= 0.40, "{acc}");
    }

    #[test]
    fn tags_mark_clean_when_nothing_agrees() {
        let t = task();
        let ds = gen_challenge(&t, BiasKind::Lexical, 300, 3).unwrap();
        for e in &ds.examples {
            assert!(!e.tags.contains(&BiasTag::Lexical));
            assert!(!e.tags.is_empty());
        }
    }

    #[test]
    fn duplicate_bias_is_rejected() {
        let t = task();
        let b = [
            BiasSpec::new(BiasKind::Lexical, 0.9, 1.0),
            BiasSpec::new(BiasKind::Lexical, 0.8, 1.0),
        ];
        assert!(gen_dataset(&t, &b, 10, 0).is_err());
        assert!(gen_dataset(&t, &[], 0, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generation_is_a_pure_function_of_seed(seed in any::<u64>(), size in 1usize..80) {
            let t = task();
            let x = gen_dataset(&t, &all_biases(0.9), size, seed).unwrap();
            let y = gen_dataset(&t, &all_biases(0.9), size, seed).unwrap();
            prop_assert_eq!(&x, &y);
            for e in &x.examples {
                prop_assert_eq!(t.ground_truth(e), Some(e.label));
            }
        }
    }
}
