//! The frozen unmasking model: a small bidirectional transformer over the
//! augmented vocabulary, conditioned through a prepended class token, with
//! a linear head over the real vocabulary (the mask token never gets a
//! logit).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::SyntheticDataset;
use crate::error::{Error, Result};
use crate::migm::{MaskSchedule, TokenSequence, Vocabulary};
use crate::nn::{linear, multi_head_attention, AttnVars};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tape::{Tape, VarId};
use crate::tensor::{matmul_into, Scalar, Tensor};
use crate::trainer::Adam;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub l: usize,
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
}

impl Default for BaseConfig {
    /// Desk-scale defaults: a 4x4 grid over 8 tokens, wide enough for
    /// non-degenerate trajectories, small enough for exhaustive checks.
    fn default() -> Self {
        Self { l: 16, vocab_size: 8, dim: 64, layers: 4, heads: 4, num_classes: 4, mlp_ratio: 4 }
    }
}

struct LayerHandles {
    ln1_g: ParamId,
    ln1_b: ParamId,
    attn: [ParamId; 8],
    ln2_g: ParamId,
    ln2_b: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

struct Handles {
    tok_emb: ParamId,
    pos_emb: ParamId,
    class_emb: ParamId,
    layers: Vec<LayerHandles>,
    final_ln_g: ParamId,
    final_ln_b: ParamId,
    head_w: ParamId,
}

pub struct BaseModel<T: Scalar> {
    cfg: BaseConfig,
    params: ParamStore<T>,
    handles: Handles,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> BaseModel<T> {
    pub fn new(cfg: BaseConfig, seed: u64) -> Self {
        let mut rng = CounterRng::new(seed).derive(0xba5e);
        let mut p = ParamStore::new();
        let d = cfg.dim;
        let hid = cfg.dim * cfg.mlp_ratio;
        let tok_emb = p.insert_randn("tok_emb", &[cfg.vocab_size + 1, d], INIT_STD, &mut rng);
        let pos_emb = p.insert_randn("pos_emb", &[cfg.l, d], INIT_STD, &mut rng);
        // Last class row is the unconditional embedding.
        let class_emb = p.insert_randn("class_emb", &[cfg.num_classes + 1, d], INIT_STD, &mut rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let n = |s: &str| format!("layer{i}.{s}");
            let attn = [
                p.insert_randn(&n("attn.wq"), &[d, d], INIT_STD, &mut rng),
                p.insert_zeros(&n("attn.bq"), &[d]),
                p.insert_randn(&n("attn.wk"), &[d, d], INIT_STD, &mut rng),
                p.insert_zeros(&n("attn.bk"), &[d]),
                p.insert_randn(&n("attn.wv"), &[d, d], INIT_STD, &mut rng),
                p.insert_zeros(&n("attn.bv"), &[d]),
                p.insert_randn(&n("attn.wo"), &[d, d], INIT_STD, &mut rng),
                p.insert_zeros(&n("attn.bo"), &[d]),
            ];
            layers.push(LayerHandles {
                ln1_g: p.insert_full(&n("ln1.g"), &[d], 1.0),
                ln1_b: p.insert_zeros(&n("ln1.b"), &[d]),
                attn,
                ln2_g: p.insert_full(&n("ln2.g"), &[d], 1.0),
                ln2_b: p.insert_zeros(&n("ln2.b"), &[d]),
                mlp_w1: p.insert_randn(&n("mlp.w1"), &[d, hid], INIT_STD, &mut rng),
                mlp_b1: p.insert_zeros(&n("mlp.b1"), &[hid]),
                mlp_w2: p.insert_randn(&n("mlp.w2"), &[hid, d], INIT_STD, &mut rng),
                mlp_b2: p.insert_zeros(&n("mlp.b2"), &[d]),
            });
        }
        let final_ln_g = p.insert_full("final_ln.g", &[d], 1.0);
        let final_ln_b = p.insert_zeros("final_ln.b", &[d]);
        let head_w = p.insert_randn("head.w", &[d, cfg.vocab_size], INIT_STD, &mut rng);
        let handles =
            Handles { tok_emb, pos_emb, class_emb, layers, final_ln_g, final_ln_b, head_w };
        Self { cfg, params: p, handles }
    }

    pub fn config(&self) -> &BaseConfig {
        &self.cfg
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.cfg.vocab_size)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Token embedding matrix over the augmented vocabulary; shared with
    /// the shortcut model and with the trajectory diagnostics.
    pub fn token_embedding(&self) -> &Tensor<T> {
        self.params.value(self.handles.tok_emb)
    }

    fn class_index(&self, class: Option<usize>) -> Result<usize> {
        match class {
            None => Ok(self.cfg.num_classes),
            Some(c) if c < self.cfg.num_classes => Ok(c),
            Some(c) => Err(Error::Argument(format!(
                "class {c} out of range 0..{}",
                self.cfg.num_classes
            ))),
        }
    }

    /// Build the feature graph on a tape; returns per-layer taps of the L
    /// token rows. The last tap is the post-final-layer-norm feature state.
    fn build_taps(
        &self,
        tape: &mut Tape<T>,
        b: &Binding,
        x: &TokenSequence,
        class: Option<usize>,
    ) -> Result<Vec<VarId>> {
        if x.len() != self.cfg.l {
            return Err(Error::Dimension(format!(
                "sequence length {} vs model length {}",
                x.len(),
                self.cfg.l
            )));
        }
        let vocab = self.vocabulary();
        if x.tokens.iter().any(|&t| t as usize >= vocab.augmented_size()) {
            return Err(Error::Argument("token outside augmented vocabulary".into()));
        }
        let h = &self.handles;
        let ids: Vec<usize> = x.tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.embedding(b.var(h.tok_emb), &ids)?;
        let tok = tape.add(tok, b.var(h.pos_emb))?;
        let cls = tape.embedding(b.var(h.class_emb), &[self.class_index(class)?])?;
        let mut seq = tape.concat_rows(&[cls, tok])?;

        let mut taps = Vec::with_capacity(self.cfg.layers);
        for (li, layer) in h.layers.iter().enumerate() {
            let normed = tape.layer_norm(seq, b.var(layer.ln1_g), b.var(layer.ln1_b))?;
            let a = layer.attn;
            let attn = AttnVars {
                wq: b.var(a[0]),
                bq: b.var(a[1]),
                wk: b.var(a[2]),
                bk: b.var(a[3]),
                wv: b.var(a[4]),
                bv: b.var(a[5]),
                wo: b.var(a[6]),
                bo: b.var(a[7]),
            };
            let att = multi_head_attention(tape, normed, normed, &attn, self.cfg.heads)?;
            seq = tape.add(seq, att)?;
            let normed2 = tape.layer_norm(seq, b.var(layer.ln2_g), b.var(layer.ln2_b))?;
            let m1 = linear(tape, normed2, b.var(layer.mlp_w1), b.var(layer.mlp_b1))?;
            let g = tape.gelu(m1);
            let m2 = linear(tape, g, b.var(layer.mlp_w2), b.var(layer.mlp_b2))?;
            seq = tape.add(seq, m2)?;

            if li + 1 == self.cfg.layers {
                let f_all = tape.layer_norm(seq, b.var(h.final_ln_g), b.var(h.final_ln_b))?;
                taps.push(tape.slice_rows(f_all, 1, self.cfg.l + 1)?);
            } else {
                taps.push(tape.slice_rows(seq, 1, self.cfg.l + 1)?);
            }
        }
        Ok(taps)
    }

    fn build_features(
        &self,
        tape: &mut Tape<T>,
        b: &Binding,
        x: &TokenSequence,
        class: Option<usize>,
    ) -> Result<VarId> {
        Ok(*self.build_taps(tape, b, x, class)?.last().expect("at least one layer"))
    }

    /// Last hidden state: an L x D matrix after the final layer norm.
    pub fn forward_features(&self, x: &TokenSequence, class: Option<usize>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let f = self.build_features(&mut tape, &b, x, class)?;
        Ok(tape.value(f).clone())
    }

    /// Per-layer feature taps (L token rows each); the last entry equals
    /// [`Self::forward_features`].
    pub fn forward_all_layers(
        &self,
        x: &TokenSequence,
        class: Option<usize>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let taps = self.build_taps(&mut tape, &b, x, class)?;
        Ok(taps.into_iter().map(|id| tape.value(id).clone()).collect())
    }

    /// Logits over the real vocabulary from a feature state.
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_into(features, self.params.value(self.handles.head_w))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "base", "config": self.cfg }).to_string();
        Checkpoint { meta, entries: self.params.export() }.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let meta: serde_json::Value = serde_json::from_str(&ckpt.meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta["kind"] != "base" {
            return Err(Error::Format(format!("not a base checkpoint: kind {}", meta["kind"])));
        }
        let cfg: BaseConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut model = Self::new(cfg, 0);
        model.params.import(&ckpt.entries)?;
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing the class with the unconditional class
    /// during training (classifier-free guidance support).
    pub uncond_drop: f64,
    pub heldout_size: usize,
}

impl Default for TrainBaseConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 32, lr: 1e-3, seed: 0, uncond_drop: 0.1, heldout_size: 64 }
    }
}

pub struct TrainBaseReport {
    pub init_heldout_ce: f64,
    pub final_heldout_ce: f64,
    /// (step, train_ce) pairs at the logging cadence.
    pub log: Vec<(usize, f64)>,
}

struct MaskedExample {
    masked: TokenSequence,
    targets: Vec<usize>,
    mask: Vec<bool>,
    class: Option<usize>,
}

fn make_example(
    dataset: &SyntheticDataset,
    schedule: MaskSchedule,
    uncond_drop: f64,
    rng: &mut CounterRng,
) -> MaskedExample {
    let class = (rng.next_u64() % dataset.num_classes as u64) as usize;
    let clean = dataset.sample(class, rng);
    let t = rng.uniform();
    let n_mask = (dataset.len as f64 * schedule.gamma(t).expect("t in (0,1)")).ceil() as usize;
    let mut order: Vec<usize> = (0..dataset.len).collect();
    rng.shuffle(&mut order);
    let mut masked = clean.clone();
    let mut mask = vec![false; dataset.len];
    for &pos in order.iter().take(n_mask) {
        masked.tokens[pos] = dataset.vocab.mask_id();
        mask[pos] = true;
    }
    let class = if rng.uniform() < uncond_drop { None } else { Some(class) };
    MaskedExample {
        masked,
        targets: clean.tokens.iter().map(|&t| t as usize).collect(),
        mask,
        class,
    }
}

impl<T: Scalar> BaseModel<T> {
    fn example_loss_and_grads(&self, ex: &MaskedExample) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let f = self.build_features(&mut tape, &b, &ex.masked, ex.class)?;
        let logits = tape.matmul(f, b.var(self.handles.head_w))?;
        let loss = tape.cross_entropy_masked(logits, &ex.targets, &ex.mask)?;
        let loss_v = tape.value(loss).item().to_f64();
        let grads = tape.backward(loss)?;
        Ok((loss_v, self.params.collect_grads(&b, &grads, &tape)))
    }

    fn heldout_ce(&self, examples: &[MaskedExample]) -> Result<f64> {
        let losses: Vec<f64> = examples
            .par_iter()
            .map(|ex| {
                let mut tape = Tape::new();
                let b = self.params.bind(&mut tape);
                let f = self.build_features(&mut tape, &b, &ex.masked, ex.class)?;
                let logits = tape.matmul(f, b.var(self.handles.head_w))?;
                let loss = tape.cross_entropy_masked(logits, &ex.targets, &ex.mask)?;
                Ok(tape.value(loss).item().to_f64())
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }
}

/// Fit the base model on the synthetic distribution with random-ratio
/// masking (t uniform, cosine schedule). On divergence the last good
/// snapshot stays on disk at `snapshot_path` and a training error is
/// returned.
pub fn train_base<T: Scalar>(
    model: &mut BaseModel<T>,
    dataset: &SyntheticDataset,
    cfg: &TrainBaseConfig,
    snapshot_path: Option<&Path>,
) -> Result<TrainBaseReport> {
    if dataset.num_classes != model.cfg.num_classes
        || dataset.len != model.cfg.l
        || dataset.vocab.size() != model.cfg.vocab_size
    {
        return Err(Error::Incompatible("dataset does not match model config".into()));
    }
    let schedule = MaskSchedule::cosine();
    let root = CounterRng::new(cfg.seed);

    let mut heldout_rng = root.derive(0x4e1d);
    let heldout: Vec<MaskedExample> = (0..cfg.heldout_size)
        .map(|_| make_example(dataset, schedule, cfg.uncond_drop, &mut heldout_rng))
        .collect();
    let init_heldout_ce = model.heldout_ce(&heldout)?;

    let mut adam = Adam::new(cfg.lr, cfg.steps, model.params.len());
    let mut log = Vec::new();
    let snapshot_every = (cfg.steps / 8).max(1);

    for step in 0..cfg.steps {
        let step_rng = root.derive(1 + step as u64);
        let examples: Vec<MaskedExample> = (0..cfg.batch_size)
            .map(|bi| {
                let mut rng = step_rng.derive(bi as u64);
                make_example(dataset, schedule, cfg.uncond_drop, &mut rng)
            })
            .collect();

        let results: Vec<(f64, Vec<Tensor<T>>)> = examples
            .par_iter()
            .map(|ex| model.example_loss_and_grads(ex))
            .collect::<Result<_>>()?;

        let mut mean_loss = 0.0;
        let mut grads: Option<Vec<Tensor<T>>> = None;
        for (loss, g) in results {
            mean_loss += loss;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b);
                    }
                }
            }
        }
        mean_loss /= cfg.batch_size as f64;
        let scale = T::from_f64(1.0 / cfg.batch_size as f64);
        let mut grads = grads.expect("batch_size >= 1");
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }

        if !mean_loss.is_finite() {
            return Err(Error::Training(format!("loss became non-finite at step {step}")));
        }
        adam.step(&mut model.params, &grads);

        if step % 25 == 0 || step + 1 == cfg.steps {
            log.push((step, mean_loss));
        }
        if let Some(path) = snapshot_path {
            if step % snapshot_every == 0 || step + 1 == cfg.steps {
                model.save(path)?;
            }
        }
    }

    let final_heldout_ce = model.heldout_ce(&heldout)?;
    Ok(TrainBaseReport { init_heldout_ce, final_heldout_ce, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BaseConfig {
        BaseConfig { l: 4, vocab_size: 3, dim: 8, layers: 2, heads: 2, num_classes: 2, mlp_ratio: 2 }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = BaseModel::<f32>::new(tiny_cfg(), 7);
        let x = TokenSequence { tokens: vec![0, 3, 1, 3] };
        let a = m.forward_features(&x, Some(1)).unwrap();
        let b = m.forward_features(&x, Some(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fully_masked_features_do_not_depend_on_any_sampling() {
        let m = BaseModel::<f32>::new(tiny_cfg(), 7);
        let x = TokenSequence::all_masked(4, m.vocabulary());
        let a = m.forward_features(&x, None).unwrap();
        let b = m.forward_features(&x, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_positions_permute_features_when_positions_disabled() {
        let mut m = BaseModel::<f64>::new(tiny_cfg(), 7);
        // Zero the position embeddings: the transformer becomes
        // permutation-equivariant over tokens.
        let pe = m.params.id_of("pos_emb").unwrap();
        *m.params.value_mut(pe) = Tensor::zeros(&[4, 8]);

        let x = TokenSequence { tokens: vec![0, 3, 1, 3] };
        let mut xp = x.clone();
        xp.tokens.swap(1, 3); // swap the two masked positions
        let f = m.forward_features(&x, Some(0)).unwrap();
        let fp = m.forward_features(&xp, Some(0)).unwrap();
        for j in 0..8 {
            assert!((f.row(1)[j] - fp.row(3)[j]).abs() < 1e-12);
            assert!((f.row(3)[j] - fp.row(1)[j]).abs() < 1e-12);
        }
        // Unmasked rows unchanged.
        for j in 0..8 {
            assert!((f.row(0)[j] - fp.row(0)[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_masking_contributes_zero_loss_and_gradient() {
        let m = BaseModel::<f64>::new(tiny_cfg(), 3);
        let ex = MaskedExample {
            masked: TokenSequence { tokens: vec![0, 1, 2, 0] },
            targets: vec![0, 1, 2, 0],
            mask: vec![false; 4],
            class: Some(0),
        };
        let (loss, grads) = m.example_loss_and_grads(&ex).unwrap();
        assert_eq!(loss, 0.0);
        for g in grads {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unmasked_positions_get_zero_logit_gradient() {
        let m = BaseModel::<f64>::new(tiny_cfg(), 3);
        let ex = MaskedExample {
            masked: TokenSequence { tokens: vec![3, 1, 2, 0] },
            targets: vec![0, 1, 2, 0],
            mask: vec![true, false, false, false],
            class: Some(0),
        };
        let (loss, _) = m.example_loss_and_grads(&ex).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.mslb");
        let m = BaseModel::<f32>::new(tiny_cfg(), 9);
        m.save(&path).unwrap();
        let loaded = BaseModel::<f32>::load(&path).unwrap();
        assert_eq!(loaded.cfg, m.cfg);
        let x = TokenSequence { tokens: vec![3, 3, 3, 3] };
        assert_eq!(
            m.forward_features(&x, None).unwrap(),
            loaded.forward_features(&x, None).unwrap()
        );
    }

    #[test]
    fn per_layer_taps_match_final_feature() {
        let m = BaseModel::<f32>::new(tiny_cfg(), 7);
        let x = TokenSequence { tokens: vec![0, 3, 1, 3] };
        let taps = m.forward_all_layers(&x, Some(1)).unwrap();
        assert_eq!(taps.len(), 2);
        assert_eq!(taps.last().unwrap(), &m.forward_features(&x, Some(1)).unwrap());
    }
}
