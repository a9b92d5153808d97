//! Policy models: MLPs over environment features, token-window MLPs with a
//! learned embedding, and tabular logits. One plain evaluator serves sampling
//! and the exact marginal; a tape builder constructs the same computation
//! differentiably, deduplicating repeated states within a batch.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution as _, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, dot, dot_indexed, sparse_profile};
use crate::error::{AceError, Result};
use crate::graph::{MASK_SENTINEL, State, StateGraph, StateMap, Trajectory, enumerate_states};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    #[inline]
    fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu { slope } => {
                if v > 0.0 {
                    v
                } else {
                    slope * v
                }
            }
        }
    }

    fn slope(&self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu { slope } => *slope,
        }
    }
}

/// How raw environment features become the first hidden layer.
///
/// `Identity` feeds features straight into an affine stack. `TokenWindow`
/// expects features `[id_1, ..., id_W, len]` where ids are already shifted so
/// 0 is padding and real tokens are `1..=vocab`; the ids index a learned
/// embedding table and `len` selects a fixed sinusoidal position encoding.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Encoder {
    Identity {
        dim: usize,
    },
    TokenWindow {
        vocab: usize,
        window: usize,
        embed_dim: usize,
        pos_dim: usize,
    },
}

/// Fixed sinusoidal position features for a scalar position.
pub fn write_position_encoding(pos: f64, dim: usize, out: &mut [f64]) {
    for i in 0..dim {
        let pair = (i / 2) as f64;
        let rate = pos / 10_000f64.powf(2.0 * pair / dim as f64);
        out[i] = if i % 2 == 0 { rate.sin() } else { rate.cos() };
    }
}

/// Time features `[tau, sin(2 pi 2^k tau), cos(2 pi 2^k tau)]_k` with `tau`
/// clipped to `[0, 1]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FourierTimeFeatures {
    pub n_freq: usize,
    pub include_tau: bool,
}

impl FourierTimeFeatures {
    pub fn dim(&self) -> usize {
        usize::from(self.include_tau) + 2 * self.n_freq
    }

    pub fn write(&self, tau: f64, out: &mut Vec<f64>) {
        let tau = tau.clamp(0.0, 1.0);
        if self.include_tau {
            out.push(tau);
        }
        for k in 0..self.n_freq {
            let angle = std::f64::consts::TAU * (1u64 << k) as f64 * tau;
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
}

/// One named slice of the flat parameter vector. `cols == 0` marks a plain
/// vector (a bias).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Feed-forward policy producing one logit per action.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub encoder: Encoder,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub activation: Activation,
    pub params: Vec<f64>,
    pub blocks: Vec<Block>,
}

impl MlpPolicy {
    /// Builds the layout and draws a seeded uniform fan-in initialization
    /// (embedding tables are standard normal).
    pub fn new<R: Rng>(
        encoder: Encoder,
        hidden: Vec<usize>,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0usize;
        let mut push = |blocks: &mut Vec<Block>, name: String, rows: usize, cols: usize| {
            let b = Block {
                name,
                offset,
                rows,
                cols,
            };
            offset += b.len();
            blocks.push(b.clone());
            b
        };

        match &encoder {
            Encoder::Identity { dim } => {
                let mut dims = vec![*dim];
                dims.extend_from_slice(&hidden);
                dims.push(out_dim);
                for i in 0..dims.len() - 1 {
                    push(&mut blocks, format!("w{i}"), dims[i + 1], dims[i]);
                    push(&mut blocks, format!("b{i}"), dims[i + 1], 0);
                }
            }
            Encoder::TokenWindow {
                vocab,
                window,
                embed_dim,
                pos_dim,
            } => {
                assert!(!hidden.is_empty(), "token policies need a hidden layer");
                let h1 = hidden[0];
                push(&mut blocks, "embed".into(), vocab + 1, *embed_dim);
                for j in 0..*window {
                    push(&mut blocks, format!("win{j}"), h1, *embed_dim);
                }
                push(&mut blocks, "pos".into(), h1, *pos_dim);
                push(&mut blocks, "b0".into(), h1, 0);
                let mut dims = hidden.clone();
                dims.push(out_dim);
                for i in 0..dims.len() - 1 {
                    push(&mut blocks, format!("w{}", i + 1), dims[i + 1], dims[i]);
                    push(&mut blocks, format!("b{}", i + 1), dims[i + 1], 0);
                }
            }
        }

        let mut policy = MlpPolicy {
            encoder,
            hidden,
            out_dim,
            activation,
            params: vec![0.0; offset],
            blocks,
        };
        policy.init(rng);
        policy
    }

    fn init<R: Rng>(&mut self, rng: &mut R) {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        // Fan-in of the first layer; token encoders concatenate all windows
        // plus the position features.
        let first_fan_in = match &self.encoder {
            Encoder::Identity { dim } => *dim,
            Encoder::TokenWindow {
                window,
                embed_dim,
                pos_dim,
                ..
            } => window * embed_dim + pos_dim,
        };
        let token_first = matches!(self.encoder, Encoder::TokenWindow { .. });
        let blocks = self.blocks.clone();
        for b in &blocks {
            let slice = &mut self.params[b.offset..b.offset + b.len()];
            if b.name == "embed" {
                for v in slice.iter_mut() {
                    *v = normal.sample(rng);
                }
                continue;
            }
            let first_layer = b.name == "pos" || b.name == "b0" || b.name.starts_with("win");
            let fan_in = if token_first && first_layer {
                first_fan_in
            } else if b.cols > 0 {
                b.cols
            } else {
                // Bias b{i}: fan-in of the matching weight w{i}.
                let w_name = format!("w{}", &b.name[1..]);
                self.blocks
                    .iter()
                    .find(|w| w.name == w_name)
                    .map_or(1, |w| w.cols)
            };
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid range");
            for v in slice.iter_mut() {
                *v = dist.sample(rng);
            }
        }
    }

    pub fn block(&self, name: &str) -> &Block {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("no parameter block named {name}"))
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn block_slice(&self, b: &Block) -> &[f64] {
        &self.params[b.offset..b.offset + b.len()]
    }

    /// Applies layer `i` (`w{i} src + b{i}`) into `dst`, with the activation
    /// unless this is the output layer. `nz` restricts the dot products to
    /// the listed `src` indices (used when `src` is a sparse feature vector).
    fn affine_layer(
        &self,
        i: usize,
        last: bool,
        src: &[f64],
        nz: Option<&[u32]>,
        dst: &mut Vec<f64>,
    ) {
        let w = self.block(&format!("w{i}"));
        let bv = self.block_slice(self.block(&format!("b{i}")));
        let wv = self.block_slice(w);
        dst.clear();
        dst.resize(w.rows, 0.0);
        for r in 0..w.rows {
            let row = &wv[r * w.cols..(r + 1) * w.cols];
            let mut y = match nz {
                Some(idx) => dot_indexed(row, src, idx),
                None => dot(row, src),
            } + bv[r];
            if !last {
                y = self.activation.apply(y);
            }
            dst[r] = y;
        }
    }

    /// Raw (unmasked) logits for a feature vector. `buf_a`/`buf_b` are
    /// scratch; `token` is an optional per-parameter-state cache.
    pub fn forward_raw(
        &self,
        feat: &[f64],
        token: Option<&mut TokenCache>,
        buf_a: &mut Vec<f64>,
        buf_b: &mut Vec<f64>,
        out: &mut Vec<f64>,
    ) {
        match &self.encoder {
            Encoder::Identity { dim } => {
                debug_assert_eq!(feat.len(), *dim);
                let n_layers = self.hidden.len() + 1;
                let feat_nz = sparse_profile(feat);
                buf_a.clear();
                buf_a.extend_from_slice(feat);
                for i in 0..n_layers {
                    let last = i == n_layers - 1;
                    let nz = if i == 0 { feat_nz.as_deref() } else { None };
                    self.affine_layer(i, last, buf_a, nz, if last { out } else { buf_b });
                    if !last {
                        std::mem::swap(buf_a, buf_b);
                    }
                }
            }
            Encoder::TokenWindow {
                vocab,
                window,
                embed_dim,
                pos_dim,
            } => {
                debug_assert_eq!(feat.len(), window + 1);
                let h1 = self.hidden[0];
                buf_a.clear();
                buf_a.resize(h1, 0.0);
                let len = feat[*window];
                match token {
                    Some(cache) => {
                        cache.ensure_pe(self, len);
                        let pe = &cache.pe[&(len as i64)];
                        buf_a.copy_from_slice(pe);
                        for j in 0..*window {
                            let id = feat[j] as usize;
                            let row = &cache.h_jt
                                [(j * (vocab + 1) + id) * h1..(j * (vocab + 1) + id + 1) * h1];
                            for (o, &v) in buf_a.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    None => {
                        let embed = self.block("embed");
                        let ev = self.block_slice(embed);
                        let b0 = self.block_slice(self.block("b0"));
                        buf_a.copy_from_slice(b0);
                        for j in 0..*window {
                            let id = feat[j] as usize;
                            let e = &ev[id * embed_dim..(id + 1) * embed_dim];
                            let win = self.block(&format!("win{j}"));
                            let wv = self.block_slice(win);
                            for r in 0..h1 {
                                buf_a[r] += dot(&wv[r * embed_dim..(r + 1) * embed_dim], e);
                            }
                        }
                        let mut pe = vec![0.0; *pos_dim];
                        write_position_encoding(len, *pos_dim, &mut pe);
                        let pos = self.block("pos");
                        let pv = self.block_slice(pos);
                        for r in 0..h1 {
                            buf_a[r] += dot(&pv[r * pos_dim..(r + 1) * pos_dim], &pe);
                        }
                    }
                }
                for v in buf_a.iter_mut() {
                    *v = self.activation.apply(*v);
                }
                // Remaining layers are a plain chain starting after layer 0.
                let n_rest = self.hidden.len();
                for i in 1..=n_rest {
                    let last = i == n_rest;
                    self.affine_layer(i, last, buf_a, None, if last { out } else { buf_b });
                    if !last {
                        std::mem::swap(buf_a, buf_b);
                    }
                }
            }
        }
    }
}

/// Precomputed token-policy pieces valid for one parameter state: the
/// per-(slot, id) first-layer contributions and the per-length position term
/// with the bias folded in.
pub struct TokenCache {
    h_jt: Vec<f64>,
    pe: HashMap<i64, Vec<f64>>,
}

impl TokenCache {
    pub fn build(policy: &MlpPolicy) -> Self {
        let Encoder::TokenWindow {
            vocab,
            window,
            embed_dim,
            ..
        } = &policy.encoder
        else {
            panic!("token cache needs a token-window encoder");
        };
        let h1 = policy.hidden[0];
        let embed = policy.block_slice(policy.block("embed"));
        let mut h_jt = vec![0.0; window * (vocab + 1) * h1];
        for j in 0..*window {
            let win = policy.block_slice(policy.block(&format!("win{j}")));
            for t in 0..=*vocab {
                let e = &embed[t * embed_dim..(t + 1) * embed_dim];
                let base = (j * (vocab + 1) + t) * h1;
                for r in 0..h1 {
                    h_jt[base + r] = dot(&win[r * embed_dim..(r + 1) * embed_dim], e);
                }
            }
        }
        TokenCache {
            h_jt,
            pe: HashMap::new(),
        }
    }

    fn ensure_pe(&mut self, policy: &MlpPolicy, len: f64) {
        let key = len as i64;
        if self.pe.contains_key(&key) {
            return;
        }
        let Encoder::TokenWindow { pos_dim, .. } = &policy.encoder else {
            unreachable!()
        };
        let h1 = policy.hidden[0];
        let mut pe_feat = vec![0.0; *pos_dim];
        write_position_encoding(len, *pos_dim, &mut pe_feat);
        let pos = policy.block_slice(policy.block("pos"));
        let b0 = policy.block_slice(policy.block("b0"));
        let mut v = b0.to_vec();
        for r in 0..h1 {
            v[r] += dot(&pos[r * pos_dim..(r + 1) * pos_dim], &pe_feat);
        }
        self.pe.insert(key, v);
    }
}

/// Per-state logits read from a table over the enumerated state space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularPolicy {
    /// Enumerated states in discovery order; row i of `params` scores
    /// `order[i]`.
    pub order: Vec<State>,
    pub action_count: usize,
    pub params: Vec<f64>,
    #[serde(skip)]
    index: StateMap<usize>,
}

impl TabularPolicy {
    /// Zero logits (uniform over allowed actions) for every state.
    pub fn uniform(env: &dyn StateGraph, cap: usize) -> Result<Self> {
        let space = enumerate_states(env, cap)?;
        let action_count = env.action_count();
        let n = space.states.len();
        let mut t = TabularPolicy {
            order: space.states,
            action_count,
            params: vec![0.0; n * action_count],
            index: StateMap::default(),
        };
        t.rebuild_index();
        Ok(t)
    }

    /// Independent normal logits with the given scale.
    pub fn random<R: Rng>(env: &dyn StateGraph, cap: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let mut t = Self::uniform(env, cap)?;
        let normal = Normal::new(0.0, scale).expect("valid scale");
        for v in t.params.iter_mut() {
            *v = normal.sample(rng);
        }
        Ok(t)
    }

    /// Restores the state index; required after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .order
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
    }

    pub fn state_row(&self, s: &State) -> usize {
        *self
            .index
            .get(s)
            .unwrap_or_else(|| panic!("state {:?} missing from tabular policy", s))
    }

    pub fn logits(&self, s: &State) -> &[f64] {
        let row = self.state_row(s);
        &self.params[row * self.action_count..(row + 1) * self.action_count]
    }

    pub fn logits_mut(&mut self, s: &State) -> &mut [f64] {
        let row = self.state_row(s);
        &mut self.params[row * self.action_count..(row + 1) * self.action_count]
    }
}

/// A forward or backward policy: shared-parameter MLP or per-state table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PolicyModel {
    Mlp(MlpPolicy),
    Tabular(TabularPolicy),
}

impl PolicyModel {
    pub fn params(&self) -> &[f64] {
        match self {
            PolicyModel::Mlp(m) => &m.params,
            PolicyModel::Tabular(t) => &t.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        match self {
            PolicyModel::Mlp(m) => &mut m.params,
            PolicyModel::Tabular(t) => &mut t.params,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params().len()
    }
}

fn apply_mask_and_log_softmax(logits: &mut [f64], mask: &[bool]) -> Result<()> {
    debug_assert_eq!(logits.len(), mask.len());
    let mut any = false;
    for (l, &m) in logits.iter_mut().zip(mask) {
        if m {
            any = true;
        } else {
            *l = MASK_SENTINEL;
        }
    }
    if !any {
        return Err(AceError::EmptyActionSet);
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&v| (v - mx).exp()).sum();
    let lse = mx + s.ln();
    for l in logits.iter_mut() {
        *l -= lse;
    }
    Ok(())
}

/// Plain (non-differentiable) evaluator for the forward policy with an
/// optional per-state memo. Valid for one parameter state: rebuild after any
/// optimizer step.
pub struct PolicyEvaluator<'a> {
    model: &'a PolicyModel,
    env: &'a dyn StateGraph,
    memo_enabled: bool,
    memo: StateMap<Vec<f64>>,
    token: Option<TokenCache>,
    feat: Vec<f64>,
    mask: Vec<bool>,
    buf_a: Vec<f64>,
    buf_b: Vec<f64>,
}

impl<'a> PolicyEvaluator<'a> {
    pub fn new(model: &'a PolicyModel, env: &'a dyn StateGraph) -> Self {
        let token = match model {
            PolicyModel::Mlp(m) if matches!(m.encoder, Encoder::TokenWindow { .. }) => {
                Some(TokenCache::build(m))
            }
            _ => None,
        };
        PolicyEvaluator {
            model,
            env,
            memo_enabled: true,
            memo: StateMap::default(),
            token,
            feat: Vec::new(),
            mask: Vec::new(),
            buf_a: Vec::new(),
            buf_b: Vec::new(),
        }
    }

    /// Disables the per-state memo (single-visit workloads like the exact
    /// marginal, where memoization only costs memory).
    pub fn without_memo(mut self) -> Self {
        self.memo_enabled = false;
        self
    }

    fn compute(&mut self, s: &State, out: &mut Vec<f64>) -> Result<()> {
        match self.model {
            PolicyModel::Mlp(m) => {
                self.env.encode(s, &mut self.feat);
                m.forward_raw(
                    &self.feat,
                    self.token.as_mut(),
                    &mut self.buf_a,
                    &mut self.buf_b,
                    out,
                );
            }
            PolicyModel::Tabular(t) => {
                out.clear();
                out.extend_from_slice(t.logits(s));
            }
        }
        self.env.allowed_actions(s, &mut self.mask);
        apply_mask_and_log_softmax(out, &self.mask)
    }

    /// Masked log-probabilities for non-terminal `s`.
    pub fn log_probs_into(&mut self, s: &State, out: &mut Vec<f64>) -> Result<()> {
        if self.memo_enabled {
            if let Some(cached) = self.memo.get(s) {
                out.clear();
                out.extend_from_slice(cached);
                return Ok(());
            }
        }
        self.compute(s, out)?;
        if self.memo_enabled {
            self.memo.insert(s.clone(), out.clone());
        }
        Ok(())
    }
}

impl crate::graph::ForwardScorer for PolicyEvaluator<'_> {
    fn log_probs(&mut self, s: &State, out: &mut Vec<f64>) -> Result<()> {
        self.log_probs_into(s, out)
    }
}

/// One-shot masked log-probabilities for a single state.
pub fn forward_log_probs(
    model: &PolicyModel,
    env: &dyn StateGraph,
    s: &State,
) -> Result<Vec<f64>> {
    let mut eval = PolicyEvaluator::new(model, env).without_memo();
    let mut out = Vec::new();
    eval.log_probs_into(s, &mut out)?;
    Ok(out)
}

/// Learned backward policy evaluator: scores the parents of a state with the
/// model's action logits at the child.
///
/// Requires that within a parent list every action identifies a unique
/// parent, which holds for all bundled environments.
pub struct BackwardEvaluator<'a> {
    model: &'a PolicyModel,
    env: &'a dyn StateGraph,
    token: Option<TokenCache>,
    feat: Vec<f64>,
    mask: Vec<bool>,
    buf_a: Vec<f64>,
    buf_b: Vec<f64>,
    logits: Vec<f64>,
}

impl<'a> BackwardEvaluator<'a> {
    pub fn new(model: &'a PolicyModel, env: &'a dyn StateGraph) -> Self {
        let token = match model {
            PolicyModel::Mlp(m) if matches!(m.encoder, Encoder::TokenWindow { .. }) => {
                Some(TokenCache::build(m))
            }
            _ => None,
        };
        BackwardEvaluator {
            model,
            env,
            token,
            feat: Vec::new(),
            mask: Vec::new(),
            buf_a: Vec::new(),
            buf_b: Vec::new(),
            logits: Vec::new(),
        }
    }

    /// Masked log-probabilities over the child's full action space, masked to
    /// the actions appearing in `parents`.
    pub fn action_log_probs(
        &mut self,
        child: &State,
        parents: &[(State, usize)],
        out: &mut Vec<f64>,
    ) -> Result<()> {
        match self.model {
            PolicyModel::Mlp(m) => {
                self.env.encode(child, &mut self.feat);
                m.forward_raw(
                    &self.feat,
                    self.token.as_mut(),
                    &mut self.buf_a,
                    &mut self.buf_b,
                    &mut self.logits,
                );
            }
            PolicyModel::Tabular(t) => {
                self.logits.clear();
                self.logits.extend_from_slice(t.logits(child));
            }
        }
        self.mask.clear();
        self.mask.resize(self.logits.len(), false);
        for &(_, a) in parents {
            debug_assert!(
                !self.mask[a],
                "duplicate action in parent list; learned backward needs unique actions"
            );
            self.mask[a] = true;
        }
        out.clear();
        out.extend_from_slice(&self.logits);
        apply_mask_and_log_softmax(out, &self.mask)
    }
}

impl crate::graph::BackwardScorer for BackwardEvaluator<'_> {
    fn log_probs(
        &mut self,
        child: &State,
        parents: &[(State, usize)],
        out: &mut Vec<f64>,
    ) -> Result<()> {
        let mut full = Vec::new();
        self.action_log_probs(child, parents, &mut full)?;
        out.clear();
        out.extend(parents.iter().map(|&(_, a)| full[a]));
        Ok(())
    }
}

/// Whether a tape scores forward transitions or parents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Forward,
    /// Mask to the actions present in the state's parent list.
    Parents,
}

/// Differentiable policy evaluation on a [`Tape`], deduplicating repeated
/// states so each unique state costs one network forward pass per batch.
pub struct PolicyTape<'m> {
    pub model: &'m PolicyModel,
    /// Tape parameter group holding the model parameters.
    pub group: usize,
    mask_kind: MaskKind,
    node_memo: StateMap<NodeId>,
    block_nodes: HashMap<String, NodeId>,
    mlp_layers: Vec<(NodeId, usize, usize, NodeId)>,
    token_h: Vec<Option<NodeId>>,
    token_pe: HashMap<i64, NodeId>,
    embed_rows: Vec<Option<NodeId>>,
    feat: Vec<f64>,
    mask: Vec<bool>,
}

impl<'m> PolicyTape<'m> {
    pub fn new(model: &'m PolicyModel, group: usize, mask_kind: MaskKind) -> Self {
        let (token_h, embed_rows) = match model {
            PolicyModel::Mlp(m) => match &m.encoder {
                Encoder::TokenWindow { vocab, window, .. } => (
                    vec![None; window * (vocab + 1)],
                    vec![None; vocab + 1],
                ),
                _ => (Vec::new(), Vec::new()),
            },
            _ => (Vec::new(), Vec::new()),
        };
        PolicyTape {
            model,
            group,
            mask_kind,
            node_memo: StateMap::default(),
            block_nodes: HashMap::new(),
            mlp_layers: Vec::new(),
            token_h,
            token_pe: HashMap::new(),
            embed_rows,
            feat: Vec::new(),
            mask: Vec::new(),
        }
    }

    fn block_node(&mut self, tape: &mut Tape, m: &MlpPolicy, name: &str) -> NodeId {
        if let Some(&id) = self.block_nodes.get(name) {
            return id;
        }
        let b = m.block(name);
        let id = tape.param(self.group, b.offset, b.len());
        self.block_nodes.insert(name.to_string(), id);
        id
    }

    /// Unmasked model output vector for `s`, with the same per-state,
    /// per-block, and token-piece sharing as the masked path. Used directly
    /// by heads that are not action distributions.
    pub fn raw_logits_node(
        &mut self,
        tape: &mut Tape,
        env: &dyn StateGraph,
        s: &State,
    ) -> NodeId {
        match self.model {
            PolicyModel::Tabular(t) => {
                let row = t.state_row(s);
                tape.param(
                    self.group,
                    row * t.action_count,
                    t.action_count,
                )
            }
            PolicyModel::Mlp(m) => match &m.encoder {
                Encoder::Identity { .. } => {
                    // Layer blocks bind to the tape once; every state after
                    // the first reuses the resolved nodes.
                    if self.mlp_layers.is_empty() {
                        for i in 0..=m.hidden.len() {
                            let w = m.block(&format!("w{i}"));
                            let (rows, cols) = (w.rows, w.cols);
                            let wn = self.block_node(tape, m, &format!("w{i}"));
                            let bn = self.block_node(tape, m, &format!("b{i}"));
                            self.mlp_layers.push((wn, rows, cols, bn));
                        }
                    }
                    env.encode(s, &mut self.feat);
                    let mut cur = tape.constant(&self.feat);
                    let last = self.mlp_layers.len() - 1;
                    for (i, &(wn, rows, cols, bn)) in self.mlp_layers.iter().enumerate() {
                        cur = tape.affine(wn, rows, cols, cur, Some(bn));
                        if i < last {
                            cur = tape.leaky_relu(cur, m.activation.slope());
                        }
                    }
                    cur
                }
                Encoder::TokenWindow {
                    vocab,
                    window,
                    embed_dim,
                    pos_dim,
                } => {
                    env.encode(s, &mut self.feat);
                    let h1 = m.hidden[0];
                    let len = self.feat[*window];
                    let ids: Vec<usize> =
                        (0..*window).map(|j| self.feat[j] as usize).collect();

                    let pe_id = match self.token_pe.get(&(len as i64)) {
                        Some(&id) => id,
                        None => {
                            let mut pe_feat = vec![0.0; *pos_dim];
                            write_position_encoding(len, *pos_dim, &mut pe_feat);
                            let pos = self.block_node(tape, m, "pos");
                            let b0 = self.block_node(tape, m, "b0");
                            let pev = tape.constant(&pe_feat);
                            let id = tape.affine(pos, h1, *pos_dim, pev, Some(b0));
                            self.token_pe.insert(len as i64, id);
                            id
                        }
                    };

                    let mut parts = Vec::with_capacity(window + 1);
                    for (j, &t) in ids.iter().enumerate() {
                        let slot = j * (vocab + 1) + t;
                        let h = match self.token_h[slot] {
                            Some(id) => id,
                            None => {
                                let e = match self.embed_rows[t] {
                                    Some(id) => id,
                                    None => {
                                        let embed = m.block("embed");
                                        let id = tape.param(
                                            self.group,
                                            embed.offset + t * embed_dim,
                                            *embed_dim,
                                        );
                                        self.embed_rows[t] = Some(id);
                                        id
                                    }
                                };
                                let wn = self.block_node(tape, m, &format!("win{j}"));
                                let id = tape.affine(wn, h1, *embed_dim, e, None);
                                self.token_h[slot] = Some(id);
                                id
                            }
                        };
                        parts.push(h);
                    }
                    parts.push(pe_id);
                    let z1 = tape.add_n(&parts);
                    let mut cur = tape.leaky_relu(z1, m.activation.slope());
                    let n_rest = m.hidden.len();
                    for i in 1..=n_rest {
                        let w = m.block(&format!("w{i}"));
                        let (rows, cols) = (w.rows, w.cols);
                        let wn = self.block_node(tape, m, &format!("w{i}"));
                        let bn = self.block_node(tape, m, &format!("b{i}"));
                        cur = tape.affine(wn, rows, cols, cur, Some(bn));
                        if i < n_rest {
                            cur = tape.leaky_relu(cur, m.activation.slope());
                        }
                    }
                    cur
                }
            },
        }
    }

    /// Masked log-probability vector node for `s`, memoized per state.
    pub fn log_probs_node(
        &mut self,
        tape: &mut Tape,
        env: &dyn StateGraph,
        s: &State,
    ) -> Result<NodeId> {
        if let Some(&id) = self.node_memo.get(s) {
            return Ok(id);
        }
        let raw = self.raw_logits_node(tape, env, s);
        let n_actions = tape.value(raw).len();
        match self.mask_kind {
            MaskKind::Forward => env.allowed_actions(s, &mut self.mask),
            MaskKind::Parents => {
                self.mask.clear();
                self.mask.resize(n_actions, false);
                for (_, a) in env.parent_actions(s) {
                    self.mask[a] = true;
                }
            }
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(AceError::EmptyActionSet);
        }
        let penalty: Vec<f64> = self
            .mask
            .iter()
            .map(|&m| if m { 0.0 } else { MASK_SENTINEL })
            .collect();
        let pn = tape.constant(&penalty);
        let masked = tape.add_n(&[raw, pn]);
        let id = tape.log_softmax(masked);
        self.node_memo.insert(s.clone(), id);
        Ok(id)
    }

    /// Scalar node for `log p(traj)` under this policy: the sum over steps of
    /// the chosen entry. Forward tapes score `(state, action)` pairs; parent
    /// tapes score each transition from the child side.
    pub fn log_prob_node(
        &mut self,
        tape: &mut Tape,
        env: &dyn StateGraph,
        traj: &Trajectory,
    ) -> Result<NodeId> {
        let mut terms = Vec::with_capacity(traj.len());
        match self.mask_kind {
            MaskKind::Forward => {
                for (s, &a) in traj.states.iter().zip(traj.actions.iter()) {
                    let lp = self.log_probs_node(tape, env, s)?;
                    terms.push((1.0, tape.select(lp, a)));
                }
            }
            MaskKind::Parents => {
                for (child, &a) in traj.states[1..].iter().zip(traj.actions.iter()) {
                    let lp = self.log_probs_node(tape, env, child)?;
                    terms.push((1.0, tape.select(lp, a)));
                }
            }
        }
        Ok(tape.lincomb(&terms, 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::explicit::{random_dag, star};
    use crate::graph::{log_prob_forward, sample_trajectory};
    use crate::autodiff::loss_and_grad;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_uniform_over_allowed() {
        let env = star(&[0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = MlpPolicy::new(
            Encoder::Identity { dim: 4 },
            vec![8],
            3,
            Activation::LeakyRelu { slope: 0.01 },
            &mut rng,
        );
        mlp.params.iter_mut().for_each(|v| *v = 0.0);
        let model = PolicyModel::Mlp(mlp);
        let lp = forward_log_probs(&model, &env, &vec![0]).unwrap();
        for &l in &lp {
            assert!((l - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_allowed_action_has_log_prob_zero() {
        let env = crate::envs::explicit::chain(3, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = MlpPolicy::new(
            Encoder::Identity { dim: env.feature_dim() },
            vec![4],
            1,
            Activation::Relu,
            &mut rng,
        );
        let model = PolicyModel::Mlp(mlp);
        let lp = forward_log_probs(&model, &env, &vec![1]).unwrap();
        assert_eq!(lp, vec![0.0]);
    }

    #[test]
    fn hand_set_single_layer_reproduces_softmax() {
        // Root one-hot feature picks column 0; set that column to logits (1, 2).
        let env = star(&[0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = MlpPolicy::new(
            Encoder::Identity { dim: 3 },
            vec![],
            2,
            Activation::Relu,
            &mut rng,
        );
        mlp.params.iter_mut().for_each(|v| *v = 0.0);
        let w = mlp.block("w0").clone();
        mlp.params[w.offset] = 1.0; // W[0, 0]
        mlp.params[w.offset + w.cols] = 2.0; // W[1, 0]
        let model = PolicyModel::Mlp(mlp);
        let lp = forward_log_probs(&model, &env, &vec![0]).unwrap();
        assert!((lp[0].exp() - 0.268_941_421_369_995_1).abs() < 1e-9);
        assert!((lp[1].exp() - 0.731_058_578_630_004_9).abs() < 1e-9);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let make = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            MlpPolicy::new(
                Encoder::Identity { dim: 7 },
                vec![16, 16],
                4,
                Activation::LeakyRelu { slope: 0.01 },
                &mut rng,
            )
        };
        assert_eq!(make(9).params, make(9).params);
        assert_ne!(make(9).params, make(10).params);
    }

    #[test]
    fn fourier_features_at_zero() {
        let f = FourierTimeFeatures {
            n_freq: 3,
            include_tau: true,
        };
        let mut out = Vec::new();
        f.write(0.0, &mut out);
        assert_eq!(out.len(), f.dim());
        assert_eq!(out[0], 0.0);
        for k in 0..3 {
            assert_eq!(out[1 + 2 * k], 0.0);
            assert_eq!(out[2 + 2 * k], 1.0);
        }
        let mut clipped = Vec::new();
        f.write(1.7, &mut clipped);
        let mut one = Vec::new();
        f.write(1.0, &mut one);
        assert_eq!(clipped, one);
    }

    #[test]
    fn evaluator_memo_matches_fresh_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let env = random_dag(&mut rng, 4, 4, 3);
        let mlp = MlpPolicy::new(
            Encoder::Identity { dim: env.feature_dim() },
            vec![8],
            env.action_count(),
            Activation::LeakyRelu { slope: 0.01 },
            &mut rng,
        );
        let model = PolicyModel::Mlp(mlp);
        let mut eval = PolicyEvaluator::new(&model, &env);
        let s = env.initial_state();
        let mut first = Vec::new();
        let mut second = Vec::new();
        eval.log_probs_into(&s, &mut first).unwrap();
        eval.log_probs_into(&s, &mut second).unwrap();
        let fresh = forward_log_probs(&model, &env, &s).unwrap();
        assert_eq!(first, second);
        assert_eq!(first, fresh);
    }

    #[test]
    fn tape_values_match_plain_evaluation_and_gradients_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let env = random_dag(&mut rng, 5, 4, 3);
        let mlp = MlpPolicy::new(
            Encoder::Identity { dim: env.feature_dim() },
            vec![6, 5],
            env.action_count(),
            Activation::LeakyRelu { slope: 0.01 },
            &mut rng,
        );
        let model = PolicyModel::Mlp(mlp);
        let mut eval = PolicyEvaluator::new(&model, &env);
        let traj = sample_trajectory(&env, &mut eval, 0.0, &mut rng).unwrap();
        let expected = log_prob_forward(&env, &mut eval, &traj).unwrap();

        let (value, grads) = loss_and_grad(vec![model.params()], |tape| {
            let mut pt = PolicyTape::new(&model, 0, MaskKind::Forward);
            pt.log_prob_node(tape, &env, &traj)
        })
        .unwrap();
        assert!((value - expected).abs() < 1e-12);

        // Central finite differences on every parameter.
        let h = 1e-5;
        let mut perturbed = model.clone();
        for i in 0..perturbed.n_params() {
            let orig = perturbed.params()[i];
            perturbed.params_mut()[i] = orig + h;
            let mut ev = PolicyEvaluator::new(&perturbed, &env);
            let hi = log_prob_forward(&env, &mut ev, &traj).unwrap();
            perturbed.params_mut()[i] = orig - h;
            let mut ev = PolicyEvaluator::new(&perturbed, &env);
            let lo = log_prob_forward(&env, &mut ev, &traj).unwrap();
            perturbed.params_mut()[i] = orig;
            let fd = (hi - lo) / (2.0 * h);
            let a = grads[0][i];
            let scale = a.abs().max(fd.abs());
            assert!(
                if scale < 1e-6 {
                    (a - fd).abs() < 1e-7
                } else {
                    (a - fd).abs() / scale < 1e-5
                },
                "param {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn tabular_tape_matches_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let env = random_dag(&mut rng, 4, 3, 2);
        let tab = TabularPolicy::random(&env, 10_000, 1.0, &mut rng).unwrap();
        let model = PolicyModel::Tabular(tab);
        let mut eval = PolicyEvaluator::new(&model, &env);
        let traj = sample_trajectory(&env, &mut eval, 0.3, &mut rng).unwrap();
        let expected = log_prob_forward(&env, &mut eval, &traj).unwrap();
        let (value, _) = loss_and_grad(vec![model.params()], |tape| {
            let mut pt = PolicyTape::new(&model, 0, MaskKind::Forward);
            pt.log_prob_node(tape, &env, &traj)
        })
        .unwrap();
        assert!((value - expected).abs() < 1e-12);
    }

    /// Minimal token environment: append one of two tokens until length 3.
    struct TinyTokens;

    impl StateGraph for TinyTokens {
        fn initial_state(&self) -> State {
            Vec::new()
        }
        fn action_count(&self) -> usize {
            2
        }
        fn allowed_actions(&self, s: &State, out: &mut Vec<bool>) {
            out.clear();
            out.resize(2, s.len() < 3);
        }
        fn step(&self, s: &State, action: usize) -> State {
            let mut n = s.clone();
            n.push(action as i32);
            n
        }
        fn is_terminal(&self, s: &State) -> bool {
            s.len() == 3
        }
        fn parent_actions(&self, s: &State) -> Vec<(State, usize)> {
            if s.is_empty() {
                Vec::new()
            } else {
                vec![(s[..s.len() - 1].to_vec(), s[s.len() - 1] as usize)]
            }
        }
        fn log_reward(&self, s: &State) -> f64 {
            s.iter().sum::<i32>() as f64 - 1.0
        }
        fn encode(&self, s: &State, out: &mut Vec<f64>) {
            out.clear();
            for k in 0..2usize {
                let v = if s.len() >= 2 - k { s[s.len() - (2 - k)] + 1 } else { 0 };
                out.push(v as f64);
            }
            out.push(s.len() as f64);
        }
        fn feature_dim(&self) -> usize {
            3
        }
        fn max_trajectory_length(&self) -> usize {
            3
        }
        fn enumerable(&self) -> bool {
            true
        }
    }

    #[test]
    fn token_window_cache_tape_and_direct_paths_agree() {
        let env = TinyTokens;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mlp = MlpPolicy::new(
            Encoder::TokenWindow {
                vocab: 2,
                window: 2,
                embed_dim: 3,
                pos_dim: 4,
            },
            vec![5],
            2,
            Activation::LeakyRelu { slope: 0.01 },
            &mut rng,
        );
        let model = PolicyModel::Mlp(mlp.clone());

        // Cached evaluator versus a from-scratch forward pass.
        let mut eval = PolicyEvaluator::new(&model, &env);
        let traj = sample_trajectory(&env, &mut eval, 0.1, &mut rng).unwrap();
        for s in &traj.states[..traj.len()] {
            let mut cached = Vec::new();
            eval.log_probs_into(s, &mut cached).unwrap();
            let mut feat = Vec::new();
            env.encode(s, &mut feat);
            let (mut a, mut b, mut raw) = (Vec::new(), Vec::new(), Vec::new());
            mlp.forward_raw(&feat, None, &mut a, &mut b, &mut raw);
            let mut mask = Vec::new();
            env.allowed_actions(s, &mut mask);
            apply_mask_and_log_softmax(&mut raw, &mask).unwrap();
            for (c, d) in cached.iter().zip(&raw) {
                assert!((c - d).abs() < 1e-12);
            }
        }

        let expected = log_prob_forward(&env, &mut eval, &traj).unwrap();
        let (value, grads) = loss_and_grad(vec![model.params()], |tape| {
            let mut pt = PolicyTape::new(&model, 0, MaskKind::Forward);
            pt.log_prob_node(tape, &env, &traj)
        })
        .unwrap();
        assert!((value - expected).abs() < 1e-12);

        let h = 1e-5;
        let mut perturbed = model.clone();
        for i in 0..perturbed.n_params() {
            let orig = perturbed.params()[i];
            perturbed.params_mut()[i] = orig + h;
            let mut ev = PolicyEvaluator::new(&perturbed, &env);
            let hi = log_prob_forward(&env, &mut ev, &traj).unwrap();
            perturbed.params_mut()[i] = orig - h;
            let mut ev = PolicyEvaluator::new(&perturbed, &env);
            let lo = log_prob_forward(&env, &mut ev, &traj).unwrap();
            perturbed.params_mut()[i] = orig;
            let fd = (hi - lo) / (2.0 * h);
            let a = grads[0][i];
            let scale = a.abs().max(fd.abs());
            assert!(
                if scale < 1e-6 {
                    (a - fd).abs() < 1e-7
                } else {
                    (a - fd).abs() / scale < 1e-5
                },
                "param {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn masked_log_softmax_is_complete_and_exact(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..8),
            mask_bits in proptest::collection::vec(proptest::bool::ANY, 2..8),
        ) {
            let n = logits.len().min(mask_bits.len());
            let mut l = logits[..n].to_vec();
            let mut m = mask_bits[..n].to_vec();
            if !m.iter().any(|&b| b) {
                m[0] = true;
            }
            apply_mask_and_log_softmax(&mut l, &m).unwrap();
            let total: f64 = l.iter().zip(&m).filter(|&(_, &b)| b).map(|(v, _)| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (v, &b) in l.iter().zip(&m) {
                if !b {
                    prop_assert_eq!(v.exp(), 0.0);
                }
            }
        }
    }
}
