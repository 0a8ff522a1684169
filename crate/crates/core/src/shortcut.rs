//! The learned transition predictor: a lightweight network that maps
//! (current features, newly decoded tokens, time) to the feature delta the
//! frozen base model would produce at the next step.
//!
//! Design points:
//! - everything runs in a bottleneck space of width dim / bottleneck_ratio,
//!   entered through a single projection shared by feature rows and token
//!   embeddings;
//! - the token embedding table is borrowed frozen from the base model and
//!   is not part of the trainable parameters;
//! - time conditioning is adaptive layer-norm modulation (shift, scale,
//!   gate per sublayer) from a sinusoidal embedding of t;
//! - the output projection is zero-initialized, so a fresh model predicts
//!   a zero delta: applying it is the identity on features.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basemodel::BaseModel;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{linear, multi_head_attention, AttnVars};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tape::{sinusoidal_embed, Tape, VarId};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ShortcutConfig {
    pub l: usize,
    pub dim: usize,
    pub vocab_size: usize,
    /// Bottleneck width divisor: internal width is dim / bottleneck_ratio.
    pub bottleneck_ratio: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    /// When false, the cross-attention sublayer is removed entirely and
    /// the newly decoded tokens never reach the network (ablation).
    pub use_cross_attention: bool,
}

impl Default for ShortcutConfig {
    fn default() -> Self {
        Self {
            l: 16,
            dim: 64,
            vocab_size: 8,
            bottleneck_ratio: 2,
            heads: 2,
            time_embed_dim: 32,
            use_cross_attention: true,
        }
    }
}

impl ShortcutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_ratio == 0 || self.dim % self.bottleneck_ratio != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by bottleneck_ratio {}",
                self.dim, self.bottleneck_ratio
            )));
        }
        let inner = self.dim / self.bottleneck_ratio;
        if self.heads == 0 || inner % self.heads != 0 {
            return Err(Error::Config(format!(
                "inner width {inner} not divisible by {} heads",
                self.heads
            )));
        }
        if self.time_embed_dim == 0 {
            return Err(Error::Config("time_embed_dim must be positive".into()));
        }
        Ok(())
    }

    fn inner(&self) -> usize {
        self.dim / self.bottleneck_ratio
    }

    /// Sublayers under adaLN modulation: token mixing plus self-attention.
    const SUBLAYERS: usize = 2;

    fn mod_width(&self) -> usize {
        Self::SUBLAYERS * 3 * self.inner()
    }
}

struct Handles {
    in_w: ParamId,
    in_b: ParamId,
    nd_pos: ParamId,
    mod_w: ParamId,
    mod_b: ParamId,
    cross: Option<[ParamId; 8]>,
    selfattn: [ParamId; 8],
    out_w: ParamId,
    out_b: ParamId,
}

pub struct ShortcutModel<T: Scalar> {
    cfg: ShortcutConfig,
    params: ParamStore<T>,
    /// Frozen copy of the base model's token embedding over the augmented
    /// vocabulary; not counted as trainable.
    token_emb: Tensor<T>,
    base_hash: [u8; 32],
    handles: Handles,
}

const INIT_STD: f64 = 0.02;

fn insert_attn<T: Scalar>(
    p: &mut ParamStore<T>,
    prefix: &str,
    inner: usize,
    rng: &mut CounterRng,
) -> [ParamId; 8] {
    let n = |s: &str| format!("{prefix}.{s}");
    [
        p.insert_randn(&n("wq"), &[inner, inner], INIT_STD, rng),
        p.insert_zeros(&n("bq"), &[inner]),
        p.insert_randn(&n("wk"), &[inner, inner], INIT_STD, rng),
        p.insert_zeros(&n("bk"), &[inner]),
        p.insert_randn(&n("wv"), &[inner, inner], INIT_STD, rng),
        p.insert_zeros(&n("bv"), &[inner]),
        p.insert_randn(&n("wo"), &[inner, inner], INIT_STD, rng),
        p.insert_zeros(&n("bo"), &[inner]),
    ]
}

impl<T: Scalar> ShortcutModel<T> {
    /// Build a fresh model against a base model whose checkpoint hashes to
    /// `base_hash`; the token embedding is copied out and frozen.
    pub fn new(
        cfg: ShortcutConfig,
        base: &BaseModel<T>,
        base_hash: [u8; 32],
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let b = base.config();
        if cfg.l != b.l || cfg.dim != b.dim || cfg.vocab_size != b.vocab_size {
            return Err(Error::Incompatible(format!(
                "shortcut config (l={}, dim={}, vocab={}) vs base (l={}, dim={}, vocab={})",
                cfg.l, cfg.dim, cfg.vocab_size, b.l, b.dim, b.vocab_size
            )));
        }
        Ok(Self::with_embedding(cfg, base.token_embedding().clone(), base_hash, seed))
    }

    fn with_embedding(
        cfg: ShortcutConfig,
        token_emb: Tensor<T>,
        base_hash: [u8; 32],
        seed: u64,
    ) -> Self {
        let mut rng = CounterRng::new(seed).derive(0x5c07);
        let mut p = ParamStore::new();
        let inner = cfg.inner();

        let in_w = p.insert_randn("in.w", &[cfg.dim, inner], INIT_STD, &mut rng);
        let in_b = p.insert_zeros("in.b", &[inner]);
        let nd_pos = p.insert_randn("nd_pos", &[cfg.l, inner], INIT_STD, &mut rng);
        // Zero weights plus a structured bias: shifts and scales start at
        // 0, gates at 1, so both sublayers are active but unmodulated.
        let mod_w = p.insert_zeros("mod.w", &[cfg.time_embed_dim, cfg.mod_width()]);
        let mut mod_bias = Tensor::zeros(&[cfg.mod_width()]);
        for s in 0..ShortcutConfig::SUBLAYERS {
            let gate_start = (s * 3 + 2) * inner;
            for v in &mut mod_bias.data_mut()[gate_start..gate_start + inner] {
                *v = T::one();
            }
        }
        let mod_b = p.insert("mod.b", mod_bias);
        let cross = cfg.use_cross_attention.then(|| insert_attn(&mut p, "cross", inner, &mut rng));
        let selfattn = insert_attn(&mut p, "self", inner, &mut rng);
        let out_w = p.insert_zeros("out.w", &[inner, cfg.dim]);
        let out_b = p.insert_zeros("out.b", &[cfg.dim]);

        let handles = Handles { in_w, in_b, nd_pos, mod_w, mod_b, cross, selfattn, out_w, out_b };
        Self { cfg, params: p, token_emb, base_hash, handles }
    }

    pub fn config(&self) -> &ShortcutConfig {
        &self.cfg
    }

    pub fn base_hash(&self) -> &[u8; 32] {
        &self.base_hash
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Trainable scalar count; the frozen token embedding is excluded.
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_inputs(&self, f_prev: &Tensor<T>, newly_decoded: &[(u16, u16)]) -> Result<()> {
        if f_prev.shape() != [self.cfg.l, self.cfg.dim] {
            return Err(Error::Dimension(format!(
                "feature state {:?}, expected [{}, {}]",
                f_prev.shape(),
                self.cfg.l,
                self.cfg.dim
            )));
        }
        for &(pos, tok) in newly_decoded {
            if pos as usize >= self.cfg.l {
                return Err(Error::Argument(format!("decoded position {pos} out of range")));
            }
            if tok as usize >= self.cfg.vocab_size {
                return Err(Error::Argument(format!("decoded token {tok} outside vocabulary")));
            }
        }
        Ok(())
    }

    /// Build the delta graph on a tape. `newly_decoded` must be non-empty.
    fn build_delta(
        &self,
        tape: &mut Tape<T>,
        b: &Binding,
        f_prev: &Tensor<T>,
        newly_decoded: &[(u16, u16)],
        t: f64,
    ) -> Result<VarId> {
        let h = &self.handles;
        let inner = self.cfg.inner();
        let l = self.cfg.l;

        let f_leaf = tape.leaf(f_prev.clone());
        let mut hid = linear(tape, f_leaf, b.var(h.in_w), b.var(h.in_b))?;

        // adaLN modulation from the time embedding: per sublayer a
        // (shift, scale, gate) triple of inner-width vectors.
        let te = tape.leaf(sinusoidal_embed(t, self.cfg.time_embed_dim));
        let modulation = linear(tape, te, b.var(h.mod_w), b.var(h.mod_b))?;
        let ones_col = tape.leaf(Tensor::full(&[l, 1], T::one()));
        let ones_mat = tape.leaf(Tensor::full(&[l, inner], T::one()));
        let ln_g = tape.leaf(Tensor::full(&[inner], T::one()));
        let ln_b = tape.leaf(Tensor::zeros(&[inner]));
        let broadcast = |tape: &mut Tape<T>, s: usize, part: usize| -> Result<VarId> {
            let start = (s * 3 + part) * inner;
            let slice = tape.slice_cols(modulation, start, start + inner)?;
            tape.matmul(ones_col, slice)
        };

        // Sublayer 0: cross-attention over the newly decoded tokens. Under
        // the ablation the sublayer is removed outright, so the decoded
        // tokens never reach the network.
        if let Some(a) = h.cross {
            // Frozen token embedding through the shared input projection,
            // plus a learned decode-position embedding.
            let emb_table = tape.leaf(self.token_emb.clone());
            let tok_ids: Vec<usize> = newly_decoded.iter().map(|&(_, t)| t as usize).collect();
            let pos_ids: Vec<usize> = newly_decoded.iter().map(|&(p, _)| p as usize).collect();
            let nd_tok = tape.embedding(emb_table, &tok_ids)?;
            let nd_proj = linear(tape, nd_tok, b.var(h.in_w), b.var(h.in_b))?;
            let nd_pos = tape.embedding(b.var(h.nd_pos), &pos_ids)?;
            let nd_e = tape.add(nd_proj, nd_pos)?;

            let shift = broadcast(tape, 0, 0)?;
            let scale = broadcast(tape, 0, 1)?;
            let gate = broadcast(tape, 0, 2)?;
            let normed = tape.layer_norm(hid, ln_g, ln_b)?;
            let one_plus = tape.add(ones_mat, scale)?;
            let modded = tape.mul(normed, one_plus)?;
            let modded = tape.add(modded, shift)?;
            let vars = AttnVars {
                wq: b.var(a[0]),
                bq: b.var(a[1]),
                wk: b.var(a[2]),
                bk: b.var(a[3]),
                wv: b.var(a[4]),
                bv: b.var(a[5]),
                wo: b.var(a[6]),
                bo: b.var(a[7]),
            };
            let mixed = multi_head_attention(tape, modded, nd_e, &vars, self.cfg.heads)?;
            let gated = tape.mul(gate, mixed)?;
            hid = tape.add(hid, gated)?;
        }

        // Sublayer 1: self-attention across positions.
        let shift = broadcast(tape, 1, 0)?;
        let scale = broadcast(tape, 1, 1)?;
        let gate = broadcast(tape, 1, 2)?;
        let normed = tape.layer_norm(hid, ln_g, ln_b)?;
        let one_plus = tape.add(ones_mat, scale)?;
        let modded = tape.mul(normed, one_plus)?;
        let modded = tape.add(modded, shift)?;
        let a = h.selfattn;
        let vars = AttnVars {
            wq: b.var(a[0]),
            bq: b.var(a[1]),
            wk: b.var(a[2]),
            bk: b.var(a[3]),
            wv: b.var(a[4]),
            bv: b.var(a[5]),
            wo: b.var(a[6]),
            bo: b.var(a[7]),
        };
        let att = multi_head_attention(tape, modded, modded, &vars, self.cfg.heads)?;
        let gated = tape.mul(gate, att)?;
        hid = tape.add(hid, gated)?;

        linear(tape, hid, b.var(h.out_w), b.var(h.out_b))
    }

    /// Predicted feature delta. Errors if no token was newly decoded: the
    /// transition is then known exactly (zero) and calling the model is a
    /// contract violation; see [`Self::apply_transition`] for the lenient
    /// path.
    pub fn predict_delta(
        &self,
        f_prev: &Tensor<T>,
        newly_decoded: &[(u16, u16)],
        t: f64,
    ) -> Result<Tensor<T>> {
        self.check_inputs(f_prev, newly_decoded)?;
        if newly_decoded.is_empty() {
            return Err(Error::Contract("predict_delta with no newly decoded tokens".into()));
        }
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let delta = self.build_delta(&mut tape, &b, f_prev, newly_decoded, t)?;
        Ok(tape.value(delta).clone())
    }

    /// One predicted transition: f_prev plus the predicted delta. An empty
    /// decode set is a no-op and returns f_prev unchanged.
    pub fn apply_transition(
        &self,
        f_prev: &Tensor<T>,
        newly_decoded: &[(u16, u16)],
        t: f64,
    ) -> Result<Tensor<T>> {
        self.check_inputs(f_prev, newly_decoded)?;
        if newly_decoded.is_empty() {
            return Ok(f_prev.clone());
        }
        let delta = self.predict_delta(f_prev, newly_decoded, t)?;
        let mut out = f_prev.clone();
        out.add_assign(&delta);
        Ok(out)
    }

    /// Training objective for one pair: MSE between the predicted next
    /// feature state and the recorded one, with gradients for every
    /// trainable parameter in registration order.
    pub fn pair_loss_and_grads(
        &self,
        f_prev: &Tensor<T>,
        newly_decoded: &[(u16, u16)],
        t: f64,
        f_next: &Tensor<T>,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        self.check_inputs(f_prev, newly_decoded)?;
        if newly_decoded.is_empty() {
            return Err(Error::Contract("training pair with no newly decoded tokens".into()));
        }
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let f_leaf = tape.leaf(f_prev.clone());
        let delta = self.build_delta(&mut tape, &b, f_prev, newly_decoded, t)?;
        let pred = tape.add(f_leaf, delta)?;
        let target = tape.leaf(f_next.clone());
        let loss = tape.mse_loss(pred, target)?;
        let loss_v = tape.value(loss).item().to_f64();
        let grads = tape.backward(loss)?;
        Ok((loss_v, self.params.collect_grads(&b, &grads, &tape)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "shortcut",
            "config": self.cfg,
            "base_hash": hex(&self.base_hash),
        })
        .to_string();
        let mut entries = self.params.export();
        entries.push(("frozen.tok_emb".to_string(), self.token_emb.to_f32()));
        Checkpoint { meta, entries }.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let meta: serde_json::Value = serde_json::from_str(&ckpt.meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta["kind"] != "shortcut" {
            return Err(Error::Format(format!(
                "not a shortcut checkpoint: kind {}",
                meta["kind"]
            )));
        }
        let cfg: ShortcutConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let base_hash = unhex(
            meta["base_hash"]
                .as_str()
                .ok_or_else(|| Error::Format("checkpoint missing base_hash".into()))?,
        )?;
        let (frozen, trainable): (Vec<_>, Vec<_>) =
            ckpt.entries.into_iter().partition(|(n, _)| n == "frozen.tok_emb");
        let emb32 = &frozen
            .first()
            .ok_or_else(|| Error::Format("checkpoint missing frozen.tok_emb".into()))?
            .1;
        let token_emb = Tensor::new(
            emb32.shape().to_vec(),
            emb32.data().iter().map(|&x| T::from_f64(x as f64)).collect(),
        )?;
        let mut model = Self::with_embedding(cfg, token_emb, base_hash, 0);
        model.params.import(&trainable)?;
        Ok(model)
    }
}

fn hex(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::Format("base_hash must be 64 hex chars".into()));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16);
        let lo = (chunk[1] as char).to_digit(16);
        match (hi, lo) {
            (Some(h), Some(l)) => out[i] = (h * 16 + l) as u8,
            _ => return Err(Error::Format("base_hash is not hex".into())),
        }
    }
    Ok(out)
}
