//! The classifier as trained and evaluated: a backbone with optional SMoA
//! layers and a trainability mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, Batch, EncodedPair};
use crate::data::Example;
use crate::error::{contract, Result};
use crate::smoa::{LayerRouting, SmoaConfig, SmoaStack};
use crate::tensor::{Graph, Parameter, Tensor, Var};

/// Anything that assigns a class to each example.
pub trait Classifier {
    fn predict(&self, examples: &[Example]) -> Result<Vec<usize>>;
}

/// Examples per inference batch in [`Classifier`] implementations.
pub const PREDICT_BATCH: usize = 256;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
}

impl Classifier for Model {
    fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(PREDICT_BATCH) {
            let pairs: Vec<EncodedPair> = chunk.iter().map(Example::encode).collect();
            out.extend(argmax_rows(&self.logits(&pairs)?));
        }
        Ok(out)
    }
}

/// Views a model as a hypothesis-only classifier: segment A is dropped.
#[derive(Clone, Copy, Debug)]
pub struct PartialInput<'a>(pub &'a Model);

impl Classifier for PartialInput<'_> {
    fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(PREDICT_BATCH) {
            let segs: Vec<&[u32]> = chunk.iter().map(|e| e.b.as_slice()).collect();
            out.extend(argmax_rows(&self.0.partial_input_logits(&segs)?));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub smoa: Option<SmoaStack>,
}

impl Model {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        Ok(Model {
            backbone: Backbone::build(config)?,
            smoa: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    /// Backbone parameters then SMoA parameters.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.backbone.params();
        if let Some(s) = &self.smoa {
            out.extend(s.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.backbone.params_mut();
        if let Some(s) = &mut self.smoa {
            out.extend(s.params_mut());
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn encode_batch(&self, pairs: &[EncodedPair]) -> Result<Batch> {
        Batch::new(pairs, self.config().max_len)
    }

    /// Logits `[batch, n_classes]`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        self.forward_with(g, batch, true, None)
    }

    /// Full forward pass. With `use_smoa = false` the inserted layers are
    /// skipped. When `routing` is given it receives one entry per SMoA layer.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        batch: &Batch,
        use_smoa: bool,
        mut routing: Option<&mut Vec<LayerRouting>>,
    ) -> Result<Var> {
        let smoa = if use_smoa { self.smoa.as_ref() } else { None };
        if let (Some(s), Some(r)) = (smoa, routing.as_deref_mut()) {
            r.clear();
            r.resize(s.layers.len(), LayerRouting::default());
        }
        let heads = self.config().n_heads;
        let mut x = self.backbone.embed(g, batch)?;
        for (l, block) in self.backbone.blocks.iter().enumerate() {
            x = block.attention_sublayer(g, x, batch, heads)?;
            if let Some(s) = smoa {
                x = s.layers[2 * l].forward_graph(g, x, routing.as_deref_mut().map(|r| &mut r[2 * l]))?;
            }
            x = block.ffn_sublayer(g, x)?;
            if let Some(s) = smoa {
                x = s.layers[2 * l + 1].forward_graph(
                    g,
                    x,
                    routing.as_deref_mut().map(|r| &mut r[2 * l + 1]),
                )?;
            }
        }
        self.backbone.classify(g, x, batch)
    }

    /// Inference-only logits for a list of pairs.
    pub fn logits(&self, pairs: &[EncodedPair]) -> Result<Tensor> {
        let batch = self.encode_batch(pairs)?;
        let mut g = Graph::inference();
        let out = self.forward(&mut g, &batch)?;
        Ok(g.value(out).clone())
    }

    /// Logits on the hypothesis-only view of each pair (segment A removed).
    pub fn partial_input_logits(&self, segment_b: &[&[u32]]) -> Result<Tensor> {
        let pairs: Vec<EncodedPair> = segment_b
            .iter()
            .map(|b| EncodedPair::partial_input(b))
            .collect();
        self.logits(&pairs)
    }

    /// Places SMoA layers after every attention and feed-forward sublayer,
    /// freezes the backbone (head included) and marks SMoA parameters
    /// trainable. Zero-initialized up projections make the result compute
    /// exactly the backbone's logits.
    pub fn insert_smoa(mut self, cfg: SmoaConfig, seed: u64) -> Result<Self> {
        if self.smoa.is_some() {
            return Err(contract("model already has SMoA layers"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = SmoaStack::new(
            self.config().d_model,
            self.config().n_layers,
            cfg,
            &mut rng,
        )?;
        self.smoa = Some(stack);
        self.freeze_backbone(false)?;
        Ok(self)
    }

    /// Freezes every backbone tensor and unfreezes every SMoA tensor. The
    /// classifier head follows `train_head`.
    pub fn freeze_backbone(&mut self, train_head: bool) -> Result<()> {
        let Some(stack) = &mut self.smoa else {
            return Err(contract("freeze_backbone needs SMoA layers"));
        };
        for p in stack.params_mut() {
            p.requires_grad = true;
        }
        for p in self.backbone.params_mut() {
            p.requires_grad = false;
        }
        self.backbone.classifier.weight.requires_grad = train_head;
        self.backbone.classifier.bias.requires_grad = train_head;
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for p in self.params_mut() {
            p.requires_grad = true;
        }
    }

    pub fn total_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.numel())
            .sum()
    }

    /// SHA-256 over backbone parameter names, shapes and little-endian values.
    pub fn backbone_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.backbone.params() {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 64,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            max_len: 16,
            n_classes: 3,
            seed: 11,
        }
    }

    #[test]
    fn logits_shape_contract() {
        let m = Model::new(cfg()).unwrap();
        let pair = EncodedPair::new(&[5, 6, 7], &[8, 9, 10, 11]);
        assert_eq!(pair.len(), 10);
        let out = m.logits(&[pair]).unwrap();
        assert_eq!(out.shape(), &[1, 3]);
    }

    #[test]
    fn out_of_vocab_token_is_an_index_error() {
        let m = Model::new(cfg()).unwrap();
        let err = m.logits(&[EncodedPair::new(&[64], &[3])]).unwrap_err();
        assert!(matches!(err, crate::Error::Index { .. }));
    }

    #[test]
    fn insertion_counts_and_mask() {
        let m = Model::new(cfg()).unwrap();
        let m = m
            .insert_smoa(
                SmoaConfig {
                    n_adapters: 5,
                    top_k: 2,
                    bottleneck: 8,
                },
                1,
            )
            .unwrap();
        let stack = m.smoa.as_ref().unwrap();
        assert_eq!(stack.layers.len(), 4);
        let trainable: Vec<&str> = m
            .params()
            .into_iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.name.as_str())
            .collect();
        assert!(trainable.iter().all(|n| n.starts_with("smoa.")));
        assert_eq!(trainable.len(), stack.params().len());
    }

    #[test]
    fn freeze_needs_smoa() {
        let mut m = Model::new(cfg()).unwrap();
        assert!(m.freeze_backbone(false).is_err());
    }

    fn random_pairs(seed: u64, n: usize) -> Vec<EncodedPair> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let la = rng.random_range(0..6);
                let lb = rng.random_range(0..6);
                let a: Vec<u32> = (0..la).map(|_| rng.random_range(3..64)).collect();
                let b: Vec<u32> = (0..lb).map(|_| rng.random_range(3..64)).collect();
                EncodedPair::new(&a, &b)
            })
            .collect()
    }

    #[test]
    fn forward_is_pure_and_rows_are_independent() {
        let m = Model::new(cfg()).unwrap();
        let pairs = random_pairs(1, 6);
        let a = m.logits(&pairs).unwrap();
        let b = m.logits(&pairs).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        let same = vec![pairs[2].clone(); 4];
        let out = m.logits(&same).unwrap();
        for r in 1..4 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn padding_content_does_not_reach_logits() {
        let m = Model::new(cfg()).unwrap();
        let pairs = vec![EncodedPair::new(&[5], &[6]), EncodedPair::new(&[5, 6, 7, 8], &[9, 10, 11])];
        let batch = m.encode_batch(&pairs).unwrap();
        let run = |b: &Batch| {
            let mut g = Graph::inference();
            let out = m.forward(&mut g, b).unwrap();
            g.value(out).to_le_bytes()
        };
        let base = run(&batch);
        let mut mutated = batch.clone();
        for (i, live) in batch.mask.iter().enumerate() {
            if !live {
                mutated.tokens[i] = 40 + i % 20;
                mutated.segments[i] = 1;
            }
        }
        assert_eq!(run(&mutated), base);
    }

    #[test]
    fn segment_b_tokens_change_logits() {
        let m = Model::new(cfg()).unwrap();
        let out = m
            .logits(&[EncodedPair::new(&[5, 6], &[7, 8]), EncodedPair::new(&[5, 6], &[7, 30])])
            .unwrap();
        assert_ne!(out.row(0), out.row(1));
    }

    #[test]
    fn hypothesis_only_view_drops_segment_a() {
        let m = Model::new(cfg()).unwrap();
        let pi = m.partial_input_logits(&[&[7, 8]]).unwrap();
        let direct = m.logits(&[EncodedPair::new(&[], &[7, 8])]).unwrap();
        assert_eq!(pi.data(), direct.data());
        let empty = m.partial_input_logits(&[&[]]).unwrap();
        let bare = EncodedPair {
            tokens: vec![crate::backbone::CLS, crate::backbone::SEP, crate::backbone::SEP],
            segments: vec![0, 0, 1],
            mask: vec![true; 3],
        };
        assert_eq!(empty.data(), m.logits(&[bare]).unwrap().data());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut m = Model::new(cfg()).unwrap();
        let pairs = random_pairs(3, 8);
        let batch = m.encode_batch(&pairs).unwrap();
        let mut g = Graph::new();
        let logits = m.forward(&mut g, &batch).unwrap();
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let loss = g.cross_entropy(logits, &labels).unwrap();
        g.backward(loss).unwrap();
        m.zero_grad();
        let mut missing = Vec::new();
        for p in m.params_mut() {
            let grad = g.bound(&p.name).and_then(|v| g.grad(v));
            if !grad.is_some_and(|gr| gr.iter().any(|&x| x != 0.0)) {
                missing.push(p.name.clone());
            }
        }
        // Only rows for tokens present in the batch can move; the tensors
        // themselves must all be connected.
        assert!(missing.is_empty(), "no gradient for {missing:?}");
    }

    #[test]
    fn insertion_leaves_logits_unchanged() {
        let m = Model::new(cfg()).unwrap();
        let with = m
            .clone()
            .insert_smoa(
                SmoaConfig {
                    n_adapters: 5,
                    top_k: 2,
                    bottleneck: 8,
                },
                2,
            )
            .unwrap();
        for seed in 0..100 {
            let pairs = random_pairs(100 + seed, 4);
            let a = m.logits(&pairs).unwrap();
            let b = with.logits(&pairs).unwrap();
            assert_eq!(a.to_le_bytes(), b.to_le_bytes(), "batch {seed}");
        }
    }

    #[test]
    fn freeze_and_unfreeze() {
        let mut m = Model::new(cfg())
            .unwrap()
            .insert_smoa(
                SmoaConfig {
                    n_adapters: 3,
                    top_k: 2,
                    bottleneck: 4,
                },
                0,
            )
            .unwrap();
        let smoa = m.smoa.as_ref().unwrap().params().iter().map(|p| p.numel()).sum::<usize>();
        assert_eq!(m.trainable_params(), smoa);
        m.freeze_backbone(true).unwrap();
        assert_eq!(m.trainable_params(), smoa + 32 * 3 + 3);
        m.unfreeze_all();
        assert_eq!(m.trainable_params(), m.total_params());
    }
}
