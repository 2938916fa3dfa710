use std::collections::BTreeMap;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stem::{patch_features, STEM_FEATURES};
use super::vocab::*;
use super::PolicyError;
use crate::numerics::{ComputeGraph, NodeId, Tensor};
use crate::retrieval::RetrievalSummary;
use crate::saliency::AttentionStack;
use crate::GrayImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    /// Heads per layer. With more than one, head outputs and attention
    /// matrices are averaged.
    pub heads: usize,
    pub hidden_dim: usize,
    pub token_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub max_len: usize,
    /// Logit bonus of each transition allowed by the output layout.
    pub prior_strength: f64,
    /// How much less likely another reasoning word is than closing `</think>`.
    pub word_repeat_penalty: f64,
    pub edge_gain: f64,
    /// Slope of the number-token embedding line per unit of count / 5.
    pub number_scale: f64,
    /// Scale of the prompt reader's recurrent matrix relative to `1/√d`.
    pub recurrence_gain: f64,
    pub position_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            layers: 1,
            heads: 1,
            hidden_dim: 32,
            token_dim: 8,
            lora_rank: 4,
            lora_alpha: 8.0,
            max_len: 24,
            prior_strength: 6.0,
            word_repeat_penalty: 1.5,
            edge_gain: 5.0,
            number_scale: 2.0,
            recurrence_gain: 0.9,
            position_scale: 0.1,
        }
    }
}

impl PolicyConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn decoder_input_dim(&self) -> usize {
        2 * self.embed_dim + self.token_dim
    }

    /// Closed-form size of the trainable set: encoder plus adapter factors.
    pub fn trainable_parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let encoder = STEM_FEATURES * d + d + (self.patches() + 1) * d + d + self.layers * self.heads * 4 * d * d;
        let r = self.lora_rank;
        let adapters = r * self.decoder_input_dim() + self.hidden_dim * r + r * self.hidden_dim + Vocabulary::SIZE * r;
        encoder + adapters
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if self.patch_size < 2 || !self.patch_size.is_multiple_of(2) || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} must be tiled by an even patch size, got {}",
                self.image_size, self.patch_size
            ));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("hidden_dim", self.hidden_dim),
            ("token_dim", self.token_dim),
            ("lora_rank", self.lora_rank),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.max_len < 6 {
            return bad(format!("max_len {} cannot hold a well-formed answer", self.max_len));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return bad("lora_alpha must be positive".into());
        }
        Ok(())
    }

    fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// Which policy version produced a sample's log-probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotTag {
    Current,
    Old,
    Ref,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySample {
    pub tokens: Vec<usize>,
    pub token_logprobs: Vec<f64>,
    pub total_logprob: f64,
    pub snapshot_tag: SnapshotTag,
}

/// Encoder outputs for one image.
#[derive(Clone, Debug)]
pub struct Encoding {
    /// `(T+1) × d` final token states, [CLS] first.
    pub tokens: Tensor,
    /// Raw [CLS] state fed to the token head.
    pub cls: Tensor,
    /// Unit-length [CLS] state used as the retrieval query.
    pub cls_unit: Vec<f64>,
    pub attention: AttentionStack,
}

/// Everything the token head conditions on for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub image: Tensor,
    pub prompt: Tensor,
}

/// Graph handles for every parameter of a policy.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    /// Handles of the trainable parameters, by name.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids
            .iter()
            .filter(|(n, _)| Policy::is_trainable(n))
            .map(|(n, &id)| (n.as_str(), id))
    }
}

const EMBED_W: &str = "enc.embed.w";
const EMBED_B: &str = "enc.embed.b";
const POS: &str = "enc.pos";
const CLS: &str = "enc.cls";
const LORA_IN_DOWN: &str = "lora.in.down";
const LORA_IN_UP: &str = "lora.in.up";
const LORA_OUT_DOWN: &str = "lora.out.down";
const LORA_OUT_UP: &str = "lora.out.up";
const TOK: &str = "dec.tok";
const IN_W: &str = "dec.in.w";
const IN_B: &str = "dec.in.b";
const OUT_W: &str = "dec.out.w";
const PRIOR: &str = "dec.prior";
const PROMPT_EMBED: &str = "dec.prompt.embed";
const PROMPT_RECUR: &str = "dec.prompt.recur";

fn head_param(layer: usize, head: usize, which: char) -> String {
    format!("enc.l{layer}.h{head}.w{which}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    pub(super) params: BTreeMap<String, Tensor>,
    lexicon: Lexicon,
}

impl Policy {
    /// Builds a policy with all weights drawn from `seed`. Adapter up
    /// factors start at zero, so the adapted head equals the base head.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize, scale: f64| {
            let data = (0..rows * cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::matrix(rows, cols, data).expect("sized")
        };
        let d = config.embed_dim;
        let (hid, n_in, v, r) = (
            config.hidden_dim,
            config.decoder_input_dim(),
            Vocabulary::SIZE,
            config.lora_rank,
        );
        let lexicon = Lexicon::standard();
        let mut params = BTreeMap::new();
        let f = STEM_FEATURES;
        params.insert(EMBED_W.to_string(), normal(f, d, 1.0 / (f as f64).sqrt()));
        params.insert(EMBED_B.to_string(), Tensor::zeros(1, d));
        params.insert(POS.to_string(), normal(config.patches() + 1, d, config.position_scale));
        params.insert(CLS.to_string(), normal(1, d, 0.5));
        for l in 0..config.layers {
            for h in 0..config.heads {
                for which in ['q', 'k', 'v', 'o'] {
                    params.insert(head_param(l, h, which), normal(d, d, 1.0 / (d as f64).sqrt()));
                }
            }
        }
        params.insert(TOK.to_string(), normal(v, config.token_dim, 1.0));
        params.insert(IN_W.to_string(), normal(n_in, hid, 1.0 / (n_in as f64).sqrt()));
        params.insert(IN_B.to_string(), normal(1, hid, 0.1));
        // REAL and FAKE share one output column: the base head has no
        // opinion on the verdict.
        let mut out_w = normal(hid, v, 0.5 / (hid as f64).sqrt()).into_data();
        for row in out_w.chunks_mut(v) {
            row[FAKE_ID] = row[REAL_ID];
        }
        params.insert(OUT_W.to_string(), Tensor::matrix(hid, v, out_w)?);
        params.insert(PRIOR.to_string(), layout_prior(&config));

        let mut embed = normal(lexicon.len(), d, 1.0).into_data();
        let base = normal(1, d, 1.0).into_data();
        let dir = normal(1, d, 1.0).into_data();
        for id in 0..lexicon.len() {
            if let Some(n) = lexicon.number(id) {
                let t = config.number_scale * (n as f64 / 5.0 - 1.0);
                for j in 0..d {
                    embed[id * d + j] = base[j] + t * dir[j];
                }
            }
        }
        params.insert(PROMPT_EMBED.to_string(), Tensor::matrix(lexicon.len(), d, embed)?);
        params.insert(
            PROMPT_RECUR.to_string(),
            normal(d, d, config.recurrence_gain / (d as f64).sqrt()),
        );

        params.insert(LORA_IN_DOWN.to_string(), normal(r, n_in, 1.0 / (n_in as f64).sqrt()));
        params.insert(LORA_IN_UP.to_string(), Tensor::zeros(hid, r));
        params.insert(LORA_OUT_DOWN.to_string(), normal(r, hid, 1.0 / (hid as f64).sqrt()));
        params.insert(LORA_OUT_UP.to_string(), Tensor::zeros(v, r));
        Ok(Self {
            config,
            params,
            lexicon,
        })
    }

    pub(super) fn from_parts(
        config: PolicyConfig,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self, PolicyError> {
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.dims2() == t.dims2() => {}
                Some(p) => {
                    return Err(PolicyError::Checkpoint(format!(
                        "{name} has shape {:?}, expected {:?}",
                        p.dims2(),
                        t.dims2()
                    )))
                }
                None => return Err(PolicyError::Checkpoint(format!("missing {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(PolicyError::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self {
            config,
            params,
            lexicon: reference.lexicon,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Encoder weights and adapter factors are trainable; the token head's
    /// base weights, prior and prompt reader are not.
    pub fn is_trainable(name: &str) -> bool {
        name.starts_with("enc.") || name.starts_with("lora.")
    }

    pub fn trainable_parameters(&self) -> Vec<(&str, &Tensor)> {
        self.params
            .iter()
            .filter(|(n, _)| Self::is_trainable(n))
            .map(|(n, t)| (n.as_str(), t))
            .collect()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over names, shapes and values of the frozen parameters.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| !Self::is_trainable(n)) {
            h.update(name.as_bytes());
            for dim in t.shape() {
                h.update((*dim as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// `θ ← θ − step · g` for each named gradient. Only trainable names are
    /// accepted.
    pub fn apply_update(&mut self, grads: &BTreeMap<String, Tensor>, step: f64) -> Result<(), PolicyError> {
        for (name, g) in grads {
            if !Self::is_trainable(name) {
                return Err(PolicyError::Parameter(format!("{name} is frozen")));
            }
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| PolicyError::Parameter(format!("unknown parameter {name}")))?;
            if !p.same_shape(g) {
                return Err(PolicyError::Parameter(format!("gradient shape mismatch for {name}")));
            }
            *p = p.zip_with(g, |a, b| a - step * b)?;
        }
        Ok(())
    }

    /// Replaces one trainable parameter. Used by gradient probes.
    pub fn set_trainable(&mut self, name: &str, value: Tensor) -> Result<(), PolicyError> {
        if !Self::is_trainable(name) {
            return Err(PolicyError::Parameter(format!("{name} is frozen")));
        }
        match self.params.get_mut(name) {
            Some(p) if p.same_shape(&value) => {
                *p = value.with_requires_grad(false);
                Ok(())
            }
            _ => Err(PolicyError::Parameter(format!("cannot set {name}"))),
        }
    }

    pub fn snapshot(&self, tag: SnapshotTag) -> Snapshot {
        Snapshot {
            tag,
            policy: self.clone(),
        }
    }

    pub fn features(&self, image: &GrayImage) -> Result<Tensor, PolicyError> {
        if image.width() != self.config.image_size || image.height() != self.config.image_size {
            return Err(PolicyError::Shape(format!(
                "expected {0}x{0} image, got {1}x{2}",
                self.config.image_size,
                image.width(),
                image.height()
            )));
        }
        patch_features(image, self.config.patch_size, self.config.edge_gain)
    }

    pub fn encode_image(&self, image: &GrayImage) -> Result<Encoding, PolicyError> {
        self.encode_features(&self.features(image)?)
    }

    pub fn encode_features(&self, features: &Tensor) -> Result<Encoding, PolicyError> {
        let mut g = ComputeGraph::new();
        let b = self.bind(&mut g, false);
        let (cls, tokens, attention) = self.encode_graph(&mut g, &b, features)?;
        let cls = g.value(cls).clone();
        let norm = cls.norm();
        let cls_unit = cls.data().iter().map(|v| v / norm).collect();
        Ok(Encoding {
            tokens: g.value(tokens).clone(),
            cls,
            cls_unit,
            attention: AttentionStack::new(attention)
                .map_err(|e| PolicyError::Shape(e.to_string()))?,
        })
    }

    /// Instruction tokens, then the summary's tokens when one is given.
    pub fn build_prompt(
        &self,
        instruction: &str,
        summary: Option<&RetrievalSummary>,
    ) -> Result<Vec<usize>, PolicyError> {
        let mut tokens = self.lexicon.tokenize(instruction)?;
        if let Some(s) = summary {
            tokens.extend(self.lexicon.tokenize(&s.text)?);
        }
        Ok(tokens)
    }

    /// Final state of the frozen recurrent reader `h ← tanh(h·R + E[token])`.
    pub fn prompt_feature(&self, prompt: &[usize]) -> Result<Tensor, PolicyError> {
        let d = self.config.embed_dim;
        let embed = &self.params[PROMPT_EMBED];
        let recur = &self.params[PROMPT_RECUR];
        let mut h = Tensor::zeros(1, d);
        for &t in prompt {
            if t >= embed.rows() {
                return Err(PolicyError::Token(format!("prompt id {t}")));
            }
            let e = Tensor::row(embed.row_slice(t).to_vec());
            h = h.matmul(recur)?.zip_with(&e, |a, b| (a + b).tanh())?;
        }
        Ok(h)
    }

    pub fn condition(&self, features: &Tensor, prompt: &[usize]) -> Result<Conditioning, PolicyError> {
        Ok(Conditioning {
            image: self.encode_features(features)?.cls,
            prompt: self.prompt_feature(prompt)?,
        })
    }

    /// Adds every parameter to `g`. Trainable ones become differentiable
    /// leaves when `trainable` is set; everything else is a constant.
    pub fn bind(&self, g: &mut ComputeGraph, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|(name, t)| {
                let id = if trainable && Self::is_trainable(name) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), id)
            })
            .collect();
        Bound { ids }
    }

    /// Returns the [CLS] row node, the full token-state node and the
    /// per-layer attention matrices.
    pub fn encode_graph(
        &self,
        g: &mut ComputeGraph,
        b: &Bound,
        features: &Tensor,
    ) -> Result<(NodeId, NodeId, Vec<Tensor>), PolicyError> {
        let c = &self.config;
        if features.dims2() != (c.patches(), STEM_FEATURES) {
            return Err(PolicyError::Shape(format!(
                "features {:?}, expected ({}, {STEM_FEATURES})",
                features.dims2(),
                c.patches()
            )));
        }
        let feats = g.constant(features.clone());
        let emb = g.matmul(feats, b.get(EMBED_W))?;
        let emb = g.add_row(emb, b.get(EMBED_B))?;
        let x = g.concat_rows(b.get(CLS), emb)?;
        let mut x = g.add(x, b.get(POS))?;
        let inv_sqrt_d = 1.0 / (c.embed_dim as f64).sqrt();
        let mut attention = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let mut mixed: Option<NodeId> = None;
            let mut attn_sum: Option<Tensor> = None;
            for h in 0..c.heads {
                let q = g.matmul(x, b.get(&head_param(l, h, 'q')))?;
                let k = g.matmul(x, b.get(&head_param(l, h, 'k')))?;
                let v = g.matmul(x, b.get(&head_param(l, h, 'v')))?;
                let kt = g.transpose(k);
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, inv_sqrt_d);
                let a = g.softmax_rows(s);
                let av = g.matmul(a, v)?;
                let y = g.matmul(av, b.get(&head_param(l, h, 'o')))?;
                mixed = Some(match mixed {
                    None => y,
                    Some(m) => g.add(m, y)?,
                });
                let av = g.value(a).clone();
                attn_sum = Some(match attn_sum {
                    None => av,
                    Some(t) => t.zip_with(&av, |p, q| p + q)?,
                });
            }
            let mut y = mixed.expect("at least one head");
            let mut a = attn_sum.expect("at least one head");
            if c.heads > 1 {
                let inv = 1.0 / c.heads as f64;
                y = g.scale(y, inv);
                a = a.scale(inv);
            }
            let y = g.tanh(y);
            x = g.add(x, y)?;
            attention.push(a);
        }
        let cls = g.select_rows(x, &[0])?;
        Ok((cls, x, attention))
    }

    /// `n × V` next-token logits for previous tokens `prev`.
    pub fn logits_graph(
        &self,
        g: &mut ComputeGraph,
        b: &Bound,
        image: NodeId,
        prompt: NodeId,
        prev: &[usize],
    ) -> Result<NodeId, PolicyError> {
        let n = prev.len();
        let v = Vocabulary::SIZE;
        if let Some(&bad) = prev.iter().find(|&&t| t >= v) {
            return Err(PolicyError::Token(format!("output id {bad}")));
        }
        let tok = &self.params[TOK];
        let tok_rows: Vec<f64> = prev.iter().flat_map(|&t| tok.row_slice(t).to_vec()).collect();
        let tok_rows = g.constant(Tensor::matrix(n, self.config.token_dim, tok_rows)?);
        let img = g.broadcast_rows(image, n)?;
        let pf = g.broadcast_rows(prompt, n)?;
        let z = g.concat_cols(img, pf)?;
        let z = g.concat_cols(z, tok_rows)?;

        let scale = self.config.lora_scale();
        let pre = self.adapted(g, z, b.get(IN_W), b.get(LORA_IN_DOWN), b.get(LORA_IN_UP), scale)?;
        let pre = g.add_row(pre, b.get(IN_B))?;
        let hidden = g.tanh(pre);
        let out = self.adapted(g, hidden, b.get(OUT_W), b.get(LORA_OUT_DOWN), b.get(LORA_OUT_UP), scale)?;

        let prior = &self.params[PRIOR];
        let prior_rows: Vec<f64> = prev.iter().flat_map(|&t| prior.row_slice(t).to_vec()).collect();
        let prior_rows = g.constant(Tensor::matrix(n, v, prior_rows)?);
        Ok(g.add(out, prior_rows)?)
    }

    /// `x·W + s·(x·downᵀ)·upᵀ`, i.e. `x` times the adapted weight.
    fn adapted(
        &self,
        g: &mut ComputeGraph,
        x: NodeId,
        w: NodeId,
        down: NodeId,
        up: NodeId,
        scale: f64,
    ) -> Result<NodeId, PolicyError> {
        let base = g.matmul(x, w)?;
        let down_t = g.transpose(down);
        let up_t = g.transpose(up);
        let low = g.matmul(x, down_t)?;
        let low = g.matmul(low, up_t)?;
        let low = g.scale(low, scale);
        Ok(g.add(base, low)?)
    }

    /// `G × 1` node of total log-probabilities, one row per sequence.
    pub fn sequence_logprobs_graph(
        &self,
        g: &mut ComputeGraph,
        b: &Bound,
        image: NodeId,
        prompt: NodeId,
        sequences: &[Vec<usize>],
    ) -> Result<NodeId, PolicyError> {
        let (prev, targets, owner) = flatten(sequences)?;
        let logits = self.logits_graph(g, b, image, prompt, &prev)?;
        let lsm = g.log_softmax_rows(logits)?;
        let v = Vocabulary::SIZE;
        let mut mask = vec![0.0; targets.len() * v];
        for (i, &t) in targets.iter().enumerate() {
            mask[i * v + t] = 1.0;
        }
        let mask = g.constant(Tensor::matrix(targets.len(), v, mask)?);
        let picked = g.mul(lsm, mask)?;
        let per_token = g.row_sums(picked)?;
        let mut agg = vec![0.0; sequences.len() * targets.len()];
        for (i, &o) in owner.iter().enumerate() {
            agg[o * targets.len() + i] = 1.0;
        }
        let agg = g.constant(Tensor::matrix(sequences.len(), targets.len(), agg)?);
        Ok(g.matmul(agg, per_token)?)
    }

    /// `log π(tokens | q)` under this policy.
    pub fn sequence_logprob(&self, cond: &Conditioning, tokens: &[usize]) -> Result<f64, PolicyError> {
        Ok(self.token_logprobs(cond, tokens)?.iter().sum())
    }

    /// Per-step conditional log-probabilities of `tokens`.
    pub fn token_logprobs(&self, cond: &Conditioning, tokens: &[usize]) -> Result<Vec<f64>, PolicyError> {
        let (prev, targets, _) = flatten(std::slice::from_ref(&tokens.to_vec()))?;
        let mut g = ComputeGraph::new();
        let b = self.bind(&mut g, false);
        let img = g.constant(cond.image.clone());
        let pf = g.constant(cond.prompt.clone());
        let logits = self.logits_graph(&mut g, &b, img, pf, &prev)?;
        let lsm = g.log_softmax_rows(logits)?;
        let lsm = g.value(lsm);
        Ok(targets.iter().enumerate().map(|(i, &t)| lsm.get(i, t)).collect())
    }

    pub fn sample_group(
        &self,
        cond: &Conditioning,
        group: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<PolicySample>, PolicyError> {
        self.sample_tagged(cond, group, temperature, seed, SnapshotTag::Current)
    }

    /// Temperature-0 decoding; ties go to the lower token id.
    pub fn greedy(&self, cond: &Conditioning) -> Result<PolicySample, PolicyError> {
        Ok(self
            .sample_tagged(cond, 1, 0.0, 0, SnapshotTag::Current)?
            .pop()
            .expect("one sample"))
    }

    fn sample_tagged(
        &self,
        cond: &Conditioning,
        group: usize,
        temperature: f64,
        seed: u64,
        tag: SnapshotTag,
    ) -> Result<Vec<PolicySample>, PolicyError> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(PolicyError::Config(format!("temperature {temperature}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = ComputeGraph::new();
        let b = self.bind(&mut g, false);
        let img = g.constant(cond.image.clone());
        let pf = g.constant(cond.prompt.clone());
        let base_len = g.len();

        let mut seqs: Vec<Vec<usize>> = vec![Vec::new(); group];
        let mut lps: Vec<Vec<f64>> = vec![Vec::new(); group];
        let mut prev = vec![EOS_ID; group];
        let mut active: Vec<usize> = (0..group).collect();
        for _ in 0..self.config.max_len {
            if active.is_empty() {
                break;
            }
            let rows: Vec<usize> = active.iter().map(|&i| prev[i]).collect();
            let logits = self.logits_graph(&mut g, &b, img, pf, &rows)?;
            let lsm = g.log_softmax_rows(logits)?;
            let lsm = g.value(lsm).clone();
            for (r, &i) in active.iter().enumerate() {
                let row = lsm.row_slice(r);
                let next = if temperature == 0.0 {
                    argmax(row)
                } else {
                    draw(row, temperature, &mut rng)
                };
                seqs[i].push(next);
                lps[i].push(row[next]);
                prev[i] = next;
            }
            active.retain(|&i| prev[i] != EOS_ID);
            g.truncate(base_len);
        }
        Ok(seqs
            .into_iter()
            .zip(lps)
            .map(|(tokens, token_logprobs)| PolicySample {
                total_logprob: token_logprobs.iter().sum(),
                tokens,
                token_logprobs,
                snapshot_tag: tag,
            })
            .collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws from `softmax(logp / temperature)` by inverse CDF.
fn draw(logp: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = logp.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Teacher-forcing layout: previous tokens, targets and owning sequence.
fn flatten(sequences: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), PolicyError> {
    let mut prev = Vec::new();
    let mut targets = Vec::new();
    let mut owner = Vec::new();
    for (i, s) in sequences.iter().enumerate() {
        if s.is_empty() {
            return Err(PolicyError::Token(format!("sequence {i} is empty")));
        }
        if let Some(&bad) = s.iter().find(|&&t| t >= Vocabulary::SIZE) {
            return Err(PolicyError::Token(format!("output id {bad}")));
        }
        prev.push(EOS_ID);
        prev.extend_from_slice(&s[..s.len() - 1]);
        targets.extend_from_slice(s);
        owner.extend(std::iter::repeat_n(i, s.len()));
    }
    Ok((prev, targets, owner))
}

/// Frozen transition bonuses encoding the output layout, starting from the
/// end-of-sequence token.
fn layout_prior(config: &PolicyConfig) -> Tensor {
    let v = Vocabulary::SIZE;
    let s = config.prior_strength;
    let mut p = vec![0.0; v * v];
    let mut set = |from: usize, to: usize, val: f64| p[from * v + to] = val;
    let vocab = Vocabulary;
    set(EOS_ID, THINK_OPEN_ID, s);
    for w in vocab.word_ids() {
        set(THINK_OPEN_ID, w, s);
        for w2 in vocab.word_ids() {
            set(w, w2, s - config.word_repeat_penalty);
        }
        set(w, THINK_CLOSE_ID, s);
    }
    set(THINK_CLOSE_ID, ANSWER_OPEN_ID, s);
    set(ANSWER_OPEN_ID, REAL_ID, s);
    set(ANSWER_OPEN_ID, FAKE_ID, s);
    set(REAL_ID, ANSWER_CLOSE_ID, s);
    set(FAKE_ID, ANSWER_CLOSE_ID, s);
    set(ANSWER_CLOSE_ID, EOS_ID, s);
    Tensor::matrix(v, v, p).expect("sized")
}

/// Immutable copy of a policy taken at a point in training.
#[derive(Clone, Debug)]
pub struct Snapshot {
    tag: SnapshotTag,
    policy: Policy,
}

impl Snapshot {
    pub fn tag(&self) -> SnapshotTag {
        self.tag
    }

    pub fn sample_group(
        &self,
        cond: &Conditioning,
        group: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<PolicySample>, PolicyError> {
        self.policy.sample_tagged(cond, group, temperature, seed, self.tag)
    }
}

impl Deref for Snapshot {
    type Target = Policy;

    fn deref(&self) -> &Policy {
        &self.policy
    }
}
