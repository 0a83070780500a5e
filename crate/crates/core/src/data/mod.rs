//! Synthetic sentence-pair classification with planted shortcuts.
//!
//! Every example hides one key token in each segment; the label is a lookup
//! `T(key_a, key_b)` chosen so that neither key alone carries any label
//! information. Shortcuts are planted on top:
//!
//! - lexical: a class-associated token anywhere in the pair;
//! - partial input: a class-associated marker in segment B only;
//! - overlap: segment B copies segment A's filler tokens, signalling the
//!   designated label.
//!
//! Each planted shortcut "implies" a label that agrees with the true label
//! with probability `strength`.

mod filter;
mod generate;
mod jsonl;

pub use filter::{balance_labels, biased_tokens, filter_hard, filter_unbiased, HardFilterReport};
pub use generate::{gen_challenge, gen_challenge_variant, gen_dataset, ChallengeVariant};
pub use jsonl::{read_jsonl, write_jsonl, write_split, DatasetManifest};

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{EncodedPair, SEP};
use crate::error::{config, Result};

/// Fraction of segment-B tokens also present in segment A at or above which
/// the overlap heuristic fires.
pub const HIGH_OVERLAP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    Lexical,
    PartialInput,
    Overlap,
}

impl BiasKind {
    pub const ALL: [BiasKind; 3] = [BiasKind::Lexical, BiasKind::PartialInput, BiasKind::Overlap];

    pub fn tag(self) -> BiasTag {
        match self {
            BiasKind::Lexical => BiasTag::Lexical,
            BiasKind::PartialInput => BiasTag::PartialInput,
            BiasKind::Overlap => BiasTag::Overlap,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BiasKind::Lexical => "lexical",
            BiasKind::PartialInput => "partial_input",
            BiasKind::Overlap => "overlap",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasTag {
    Lexical,
    PartialInput,
    Overlap,
    Clean,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub a: Vec<u32>,
    pub b: Vec<u32>,
    pub label: usize,
    pub tags: BTreeSet<BiasTag>,
}

impl Example {
    pub fn encode(&self) -> EncodedPair {
        EncodedPair::new(&self.a, &self.b)
    }

    pub fn encode_partial(&self) -> EncodedPair {
        EncodedPair::partial_input(&self.b)
    }

    /// Fraction of segment-B tokens that also occur in segment A.
    pub fn overlap_ratio(&self) -> f64 {
        if self.b.is_empty() {
            return 0.0;
        }
        let a: HashSet<u32> = self.a.iter().copied().collect();
        self.b.iter().filter(|t| a.contains(t)).count() as f64 / self.b.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Self {
        Dataset {
            name: name.into(),
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn label_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for e in &self.examples {
            if e.label < n_classes {
                counts[e.label] += 1;
            }
        }
        counts
    }

    pub fn tag_counts(&self) -> BTreeMap<BiasTag, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.examples {
            for t in &e.tags {
                *counts.entry(*t).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Deterministic split into `(first, rest)` after a seeded shuffle.
    pub fn split(&self, first: usize, seed: u64) -> (Dataset, Dataset) {
        let mut ex = self.examples.clone();
        ex.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let rest = ex.split_off(first.min(ex.len()));
        (
            Dataset::new(format!("{}_a", self.name), ex),
            Dataset::new(format!("{}_b", self.name), rest),
        )
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        Dataset::new(self.name.clone(), self.examples.iter().take(n).cloned().collect())
    }
}

/// Knobs from which a [`TaskSpec`] is derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskParams {
    pub vocab_size: usize,
    pub n_classes: usize,
    pub keys_a: usize,
    pub keys_b: usize,
    pub len_a: usize,
    pub len_b: usize,
    pub lexical_per_class: usize,
    pub markers_per_class: usize,
    /// The label the overlap heuristic predicts for high-overlap pairs.
    pub overlap_label: usize,
    pub seed: u64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            vocab_size: 200,
            n_classes: 3,
            keys_a: 6,
            keys_b: 6,
            len_a: 6,
            len_b: 6,
            lexical_per_class: 35,
            markers_per_class: 20,
            overlap_label: 0,
            seed: 0,
        }
    }
}

/// Vocabulary layout and label table.
///
/// Ids: `0..3` special, then keys for A, keys for B, lexical tokens by class,
/// partial-input markers by class, and fillers up to `vocab_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub params: TaskParams,
    /// `table[key_a][key_b]` is the label.
    pub table: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Special,
    KeyA(usize),
    KeyB(usize),
    Lexical(usize),
    Marker(usize),
    Filler,
}

const FIRST_FREE: usize = SEP as usize + 1;

impl TaskSpec {
    pub fn new(params: TaskParams) -> Result<Self> {
        let p = &params;
        if p.n_classes < 2 {
            return Err(config("need at least two classes"));
        }
        if p.keys_a == 0 || p.keys_b == 0 || p.len_a < 2 || p.len_b < 3 {
            return Err(config("need keys in both segments and room for fillers"));
        }
        if p.overlap_label >= p.n_classes {
            return Err(config("overlap_label must be a valid class"));
        }
        if p.lexical_per_class == 0 || p.markers_per_class == 0 {
            return Err(config("need at least one lexical token and marker per class"));
        }
        let reserved = FIRST_FREE
            + p.keys_a
            + p.keys_b
            + p.n_classes * (p.lexical_per_class + p.markers_per_class);
        if p.vocab_size < reserved + p.len_a + p.len_b {
            return Err(config(format!(
                "vocab_size {} too small: {reserved} ids reserved, need {} disjoint fillers",
                p.vocab_size,
                p.len_a + p.len_b
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut residue = |n: usize| {
            let mut r: Vec<usize> = (0..n).map(|i| i % p.n_classes).collect();
            r.shuffle(&mut rng);
            r
        };
        let ra = residue(p.keys_a);
        let rb = residue(p.keys_b);
        let table = ra
            .iter()
            .map(|x| rb.iter().map(|y| (x + y) % p.n_classes).collect())
            .collect();
        Ok(TaskSpec { params, table })
    }

    pub fn n_classes(&self) -> usize {
        self.params.n_classes
    }

    pub fn key_a(&self, i: usize) -> u32 {
        (FIRST_FREE + i) as u32
    }

    pub fn key_b(&self, j: usize) -> u32 {
        (FIRST_FREE + self.params.keys_a + j) as u32
    }

    fn lexical_base(&self) -> usize {
        FIRST_FREE + self.params.keys_a + self.params.keys_b
    }

    fn marker_base(&self) -> usize {
        self.lexical_base() + self.params.n_classes * self.params.lexical_per_class
    }

    fn filler_base(&self) -> usize {
        self.marker_base() + self.params.n_classes * self.params.markers_per_class
    }

    pub fn lexical_token(&self, class: usize, j: usize) -> u32 {
        (self.lexical_base() + class * self.params.lexical_per_class + j) as u32
    }

    pub fn marker_token(&self, class: usize, j: usize) -> u32 {
        (self.marker_base() + class * self.params.markers_per_class + j) as u32
    }

    pub fn fillers(&self) -> std::ops::Range<u32> {
        self.filler_base() as u32..self.params.vocab_size as u32
    }

    /// All lexical tokens and markers: the tokens planted with label correlation.
    pub fn shortcut_tokens(&self) -> Vec<u32> {
        (self.lexical_base() as u32..self.filler_base() as u32).collect()
    }

    pub fn role(&self, t: u32) -> TokenRole {
        let t = t as usize;
        let p = &self.params;
        if t < FIRST_FREE {
            TokenRole::Special
        } else if t < FIRST_FREE + p.keys_a {
            TokenRole::KeyA(t - FIRST_FREE)
        } else if t < self.lexical_base() {
            TokenRole::KeyB(t - FIRST_FREE - p.keys_a)
        } else if t < self.marker_base() {
            TokenRole::Lexical((t - self.lexical_base()) / p.lexical_per_class)
        } else if t < self.filler_base() {
            TokenRole::Marker((t - self.marker_base()) / p.markers_per_class)
        } else {
            TokenRole::Filler
        }
    }

    /// Label from the key-pair rule, if both keys are present.
    pub fn ground_truth(&self, ex: &Example) -> Option<usize> {
        let ka = ex.a.iter().find_map(|&t| match self.role(t) {
            TokenRole::KeyA(i) => Some(i),
            _ => None,
        })?;
        let kb = ex.b.iter().find_map(|&t| match self.role(t) {
            TokenRole::KeyB(j) => Some(j),
            _ => None,
        })?;
        Some(self.table[ka][kb])
    }

    /// What a model following only the given shortcut would predict, or
    /// `None` when the shortcut is absent.
    pub fn shortcut_prediction(&self, kind: BiasKind, ex: &Example) -> Option<usize> {
        match kind {
            BiasKind::Lexical => ex.a.iter().chain(&ex.b).find_map(|&t| match self.role(t) {
                TokenRole::Lexical(c) => Some(c),
                _ => None,
            }),
            BiasKind::PartialInput => ex.b.iter().find_map(|&t| match self.role(t) {
                TokenRole::Marker(c) => Some(c),
                _ => None,
            }),
            BiasKind::Overlap => {
                let target = self.params.overlap_label;
                Some(if ex.overlap_ratio() >= HIGH_OVERLAP {
                    target
                } else {
                    (target + 1) % self.n_classes()
                })
            }
        }
    }

    /// Whether the shortcut, as present in `ex`, points at the true label.
    /// Overlap is binary: high overlap signals the designated label, low
    /// overlap signals any other.
    pub fn shortcut_agrees(&self, kind: BiasKind, ex: &Example) -> bool {
        match kind {
            BiasKind::Overlap => {
                (ex.overlap_ratio() >= HIGH_OVERLAP) == (ex.label == self.params.overlap_label)
            }
            _ => self.shortcut_prediction(kind, ex) == Some(ex.label),
        }
    }

    pub fn tags_for(&self, ex: &Example) -> BTreeSet<BiasTag> {
        let mut tags: BTreeSet<BiasTag> = BiasKind::ALL
            .into_iter()
            .filter(|&k| self.shortcut_agrees(k, ex))
            .map(BiasKind::tag)
            .collect();
        if tags.is_empty() {
            tags.insert(BiasTag::Clean);
        }
        tags
    }

    /// Accuracy of the shortcut-following heuristic on `ds`; examples where
    /// the shortcut is absent count as misses.
    pub fn shortcut_accuracy(&self, kind: BiasKind, ds: &Dataset) -> f64 {
        if ds.is_empty() {
            return 0.0;
        }
        let hits = ds
            .examples
            .iter()
            .filter(|e| self.shortcut_prediction(kind, e) == Some(e.label))
            .count();
        hits as f64 / ds.len() as f64
    }
}

/// One planted bias family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpec {
    pub kind: BiasKind,
    /// Probability that the planted shortcut implies the true label.
    pub strength: f64,
    /// Fraction of examples that receive the shortcut at all.
    #[serde(default = "one")]
    pub coverage: f64,
}

fn one() -> f64 {
    1.0
}

impl BiasSpec {
    pub fn new(kind: BiasKind, strength: f64, coverage: f64) -> Self {
        BiasSpec {
            kind,
            strength,
            coverage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) || !(0.0..=1.0).contains(&self.coverage) {
            return Err(config(format!(
                "{} bias: strength and coverage must lie in [0, 1]",
                self.kind.name()
            )));
        }
        Ok(())
    }
}
