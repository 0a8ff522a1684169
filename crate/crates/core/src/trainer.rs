//! Optimization: Adam with cosine learning-rate decay, and the shortcut
//! regression loop over recorded trajectory pairs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::CounterRng;
use crate::shortcut::ShortcutModel;
use crate::tensor::{Scalar, Tensor};
use crate::trajectory::TrajectoryRecord;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with a cosine decay of the learning rate from `lr` to 0 over
/// `total_steps` updates.
pub struct Adam<T: Scalar> {
    lr: f64,
    total_steps: usize,
    t: usize,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, total_steps: usize, n_params: usize) -> Self {
        Self {
            lr,
            total_steps: total_steps.max(1),
            t: 0,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        let progress = self.t.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Apply one update; `grads` must be in parameter registration order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        let lr = self.current_lr();
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let ob1 = T::from_f64(1.0 - ADAM_BETA1);
        let ob2 = T::from_f64(1.0 - ADAM_BETA2);
        for ((value, g), (m, v)) in
            params.values_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let m = m.get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = v.get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((p, &gi), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                let mhat = mi.to_f64() / bc1;
                let vhat = vi.to_f64() / bc2;
                *p -= T::from_f64(lr * mhat / (vhat.sqrt() + ADAM_EPS));
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainShortcutConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of pairs held out for evaluation; must lie in (0, 0.5].
    pub heldout_frac: f64,
}

impl Default for TrainShortcutConfig {
    fn default() -> Self {
        Self { steps: 2500, batch_size: 32, lr: 1e-3, seed: 0, heldout_frac: 0.1 }
    }
}

impl TrainShortcutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Argument("steps and batch_size must be positive".into()));
        }
        if !(self.heldout_frac > 0.0 && self.heldout_frac <= 0.5) {
            return Err(Error::Argument("heldout_frac must be in (0, 0.5]".into()));
        }
        Ok(())
    }
}

pub struct TrainShortcutReport {
    pub num_train_pairs: usize,
    pub num_heldout_pairs: usize,
    pub init_heldout_mse: f64,
    pub final_heldout_mse: f64,
    /// MSE of predicting f_next = f_prev (the do-nothing baseline) on the
    /// same held-out pairs.
    pub cache_reuse_heldout_mse: f64,
    /// MSE of first-order extrapolation f_next = 2 f_prev - f_prevprev on
    /// the same held-out pairs; pairs at the start of a trajectory have no
    /// history and degrade to the cache-reuse prediction, matching the
    /// inference engine's behaviour.
    pub taylor1_heldout_mse: f64,
    /// (step, train_mse, heldout_mse) at the logging cadence.
    pub log: Vec<(usize, f64, f64)>,
}

/// An owned training pair extracted from a trajectory record.
struct OwnedPair {
    f_prev: Tensor<f32>,
    /// Feature state one step before f_prev, when the pair is not the
    /// first of its trajectory; used only for the taylor1 baseline.
    f_prevprev: Option<Tensor<f32>>,
    newly_decoded: Vec<(u16, u16)>,
    t_prev: f64,
    f_next: Tensor<f32>,
}

fn convert<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| T::from_f64(x as f64)).collect())
        .expect("shape preserved")
}

/// Fit the shortcut model on consecutive-step pairs drawn from the
/// recorded trajectories. Every record must have been produced by the base
/// checkpoint this shortcut was built against; pairs where no token was
/// decoded are excluded (the target delta is identically zero there).
pub fn train_shortcut<T: Scalar>(
    model: &mut ShortcutModel<T>,
    records: &[TrajectoryRecord],
    cfg: &TrainShortcutConfig,
    csv_log: Option<&Path>,
) -> Result<TrainShortcutReport> {
    cfg.validate()?;
    let mut pairs: Vec<OwnedPair> = Vec::new();
    for rec in records {
        if rec.meta.base_hash != *model.base_hash() {
            return Err(Error::Incompatible(
                "trajectory was recorded with a different base checkpoint".into(),
            ));
        }
        if rec.l != model.config().l || rec.d != model.config().dim {
            return Err(Error::Incompatible("trajectory dimensions do not match model".into()));
        }
        for (j, p) in rec.pair_samples().iter().enumerate() {
            if p.newly_decoded.is_empty() {
                continue;
            }
            pairs.push(OwnedPair {
                f_prev: p.f_prev.clone(),
                f_prevprev: (j > 0).then(|| rec.steps[j - 1].features.clone()),
                newly_decoded: p.newly_decoded.to_vec(),
                t_prev: p.t_prev,
                f_next: p.f_next.clone(),
            });
        }
    }
    if pairs.len() < 4 {
        return Err(Error::Training(format!("only {} usable pairs in corpus", pairs.len())));
    }

    let root = CounterRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    root.derive(0x5b17).shuffle(&mut order);
    let n_heldout = ((pairs.len() as f64 * cfg.heldout_frac) as usize).max(1);
    let (heldout_idx, train_idx) = order.split_at(n_heldout);

    let heldout_mse = |model: &ShortcutModel<T>| -> Result<f64> {
        let errs: Vec<f64> = heldout_idx
            .par_iter()
            .map(|&i| {
                let p = &pairs[i];
                let pred = model.apply_transition(
                    &convert::<T>(&p.f_prev),
                    &p.newly_decoded,
                    p.t_prev,
                )?;
                Ok(pred.to_f64().mse(&p.f_next.to_f64()))
            })
            .collect::<Result<_>>()?;
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    };
    let cache_reuse_heldout_mse = heldout_idx
        .iter()
        .map(|&i| pairs[i].f_prev.to_f64().mse(&pairs[i].f_next.to_f64()))
        .sum::<f64>()
        / heldout_idx.len() as f64;
    let taylor1_heldout_mse = heldout_idx
        .iter()
        .map(|&i| {
            let p = &pairs[i];
            let pred = match &p.f_prevprev {
                Some(pp) => {
                    let mut f = p.f_prev.to_f64();
                    let pp = pp.to_f64();
                    for (a, &b) in f.data_mut().iter_mut().zip(pp.data()) {
                        *a = 2.0 * *a - b;
                    }
                    f
                }
                None => p.f_prev.to_f64(),
            };
            pred.mse(&p.f_next.to_f64())
        })
        .sum::<f64>()
        / heldout_idx.len() as f64;

    let init_heldout_mse = heldout_mse(model)?;

    let mut writer = match csv_log {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "step,train_mse,heldout_mse")?;
            Some(w)
        }
        None => None,
    };

    let mut adam = Adam::new(cfg.lr, cfg.steps, model.params().len());
    let mut log = Vec::new();
    let log_every = (cfg.steps / 12).max(1);
    let mut last_heldout = init_heldout_mse;

    for step in 0..cfg.steps {
        let mut batch_rng = root.derive(1 + step as u64);
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| train_idx[(batch_rng.next_u64() % train_idx.len() as u64) as usize])
            .collect();

        let results: Vec<(f64, Vec<Tensor<T>>)> = batch
            .par_iter()
            .map(|&i| {
                let p = &pairs[i];
                model.pair_loss_and_grads(
                    &convert::<T>(&p.f_prev),
                    &p.newly_decoded,
                    p.t_prev,
                    &convert::<T>(&p.f_next),
                )
            })
            .collect::<Result<_>>()?;

        let mut train_mse = 0.0;
        let mut grads: Option<Vec<Tensor<T>>> = None;
        for (loss, g) in results {
            train_mse += loss;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b);
                    }
                }
            }
        }
        train_mse /= cfg.batch_size as f64;
        if !train_mse.is_finite() {
            return Err(Error::Training(format!("loss became non-finite at step {step}")));
        }
        let scale = T::from_f64(1.0 / cfg.batch_size as f64);
        let mut grads = grads.expect("batch_size >= 1");
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        adam.step(model.params_mut(), &grads);

        if step % log_every == 0 || step + 1 == cfg.steps {
            last_heldout = heldout_mse(model)?;
            log.push((step, train_mse, last_heldout));
            if let Some(w) = &mut writer {
                writeln!(w, "{step},{train_mse},{last_heldout}")?;
            }
        }
    }

    Ok(TrainShortcutReport {
        num_train_pairs: train_idx.len(),
        num_heldout_pairs: heldout_idx.len(),
        init_heldout_mse,
        final_heldout_mse: last_heldout,
        cache_reuse_heldout_mse,
        taylor1_heldout_mse,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn mse_hand_example() {
        let a = Tensor::<f64>::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(a.mse(&b), 0.5);
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        // Minimize (w - 3)^2 elementwise.
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::zeros(&[4]));
        let mut adam = Adam::new(0.2, 200, 1);
        for _ in 0..200 {
            let id = store.id_of("w").unwrap();
            let g = store.value(id).map(|w| 2.0 * (w - 3.0));
            adam.step(&mut store, &[g]);
        }
        let id = store.id_of("w").unwrap();
        for &w in store.value(id).data() {
            assert!((w - 3.0).abs() < 0.05, "w = {w}");
        }
    }

    #[test]
    fn cosine_decay_hits_zero_at_the_end() {
        let mut adam = Adam::<f64>::new(1.0, 10, 0);
        assert!((adam.current_lr() - 1.0).abs() < 1e-12);
        let mut store = ParamStore::<f64>::new();
        for _ in 0..10 {
            adam.step(&mut store, &[]);
        }
        assert!(adam.current_lr() < 1e-12);
    }

    #[test]
    fn heldout_frac_validated() {
        let bad = TrainShortcutConfig { heldout_frac: 0.9, ..Default::default() };
        assert!(bad.validate().is_err());
        let zero = TrainShortcutConfig { heldout_frac: 0.0, ..Default::default() };
        assert!(zero.validate().is_err());
    }
}
