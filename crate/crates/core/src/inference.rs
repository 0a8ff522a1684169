//! Iterative generation with a step budget: B of the N steps run the full
//! base model, the rest advance the feature state with a cheap substitute
//! (the learned shortcut, cache reuse, or polynomial extrapolation).

use std::time::Instant;

use crate::basemodel::BaseModel;
use crate::error::{Error, Result};
use crate::migm::{sample_step, MaskSchedule, SamplerConfig, TokenSequence};
use crate::rng::CounterRng;
use crate::shortcut::ShortcutModel;
use crate::tensor::{Scalar, Tensor};
use crate::trajectory::{StepRecord, StreamTag, TrajectoryMeta, TrajectoryRecord};

/// Steps that run the full model under budget B of N: {1 + floor(jN/B)}
/// for j = 0..B. Always includes step 1; equals {1..=N} when B = N.
pub fn full_step_indices(n: usize, b: usize) -> Result<Vec<usize>> {
    if b == 0 || b > n {
        return Err(Error::Argument(format!("budget {b} outside 1..={n}")));
    }
    let mut steps: Vec<usize> = (0..b).map(|j| 1 + j * n / b).collect();
    steps.dedup();
    Ok(steps)
}

/// One-step-ahead polynomial extrapolation from the most recent states
/// (oldest first) using backward differences. Order 0 repeats the last
/// state; order k needs k + 1 states.
pub fn taylor_extrapolate<T: Scalar>(history: &[Tensor<T>], order: usize) -> Result<Tensor<T>> {
    if history.len() < order + 1 {
        return Err(Error::Contract(format!(
            "order {order} extrapolation needs {} states, have {}",
            order + 1,
            history.len()
        )));
    }
    let last = history.len() - 1;
    let mut out = Tensor::zeros(history[last].shape());
    for j in 0..=order {
        // Coefficient of f_{k-j} in sum_{m<=order} nabla^m f_k.
        let coef = (0..=order as i64)
            .map(|m| if j as i64 <= m { binom(m, j as i64) * if j % 2 == 0 { 1 } else { -1 } } else { 0 })
            .sum::<i64>();
        let c = T::from_f64(coef as f64);
        for (o, &h) in out.data_mut().iter_mut().zip(history[last - j].data()) {
            *o += c * h;
        }
    }
    Ok(out)
}

fn binom(n: i64, k: i64) -> i64 {
    if k < 0 || k > n {
        return 0;
    }
    let mut r = 1i64;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Accelerator {
    /// Every step runs the full model regardless of budget.
    None,
    Shortcut,
    CacheReuse,
    Taylor1,
    Taylor2,
}

impl Accelerator {
    pub fn name(&self) -> &'static str {
        match self {
            Accelerator::None => "none",
            Accelerator::Shortcut => "shortcut",
            Accelerator::CacheReuse => "cache_reuse",
            Accelerator::Taylor1 => "taylor1",
            Accelerator::Taylor2 => "taylor2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Accelerator::None),
            "shortcut" => Ok(Accelerator::Shortcut),
            "cache_reuse" => Ok(Accelerator::CacheReuse),
            "taylor1" => Ok(Accelerator::Taylor1),
            "taylor2" => Ok(Accelerator::Taylor2),
            other => Err(Error::Argument(format!("unknown accelerator '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    Full,
    Shortcut,
    CacheReuse,
    Taylor,
}

#[derive(Clone, Debug)]
pub struct StepTrace {
    pub step: usize,
    pub mode: StepMode,
    /// Wall time of the feature update (all streams) for this step.
    pub wall_ns: u128,
    /// MSE of the accelerated conditional features against what the full
    /// model would have produced; populated only under
    /// [`RunOptions::measure_oracle`] on accelerated steps.
    pub feature_mse_vs_oracle: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GenerateConfig {
    pub n: usize,
    pub class: Option<usize>,
    pub schedule: MaskSchedule,
    pub sampler: SamplerConfig,
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Argument("n must be positive".into()));
        }
        self.sampler.validate()?;
        if self.sampler.guidance_scale > 0.0 && self.class.is_none() {
            return Err(Error::Argument("guidance requires a class".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Keep full per-step trajectories (tokens, diffs, features).
    pub record: bool,
    /// SHA-256 of the base checkpoint, stamped into recorded trajectories.
    pub base_hash: [u8; 32],
    /// On accelerated steps, also run the full model to score the
    /// approximation (measurement only; generation is unaffected).
    pub measure_oracle: bool,
    /// Reseed the sampler from the given seed starting at the given step;
    /// steps before it replay the original stream exactly.
    pub fork: Option<(usize, u64)>,
}

pub struct RunResult<T: Scalar> {
    pub tokens: TokenSequence,
    pub trace: Vec<StepTrace>,
    /// Full-model invocations actually spent on generation (oracle
    /// measurements excluded).
    pub num_base_calls: usize,
    pub cond_trajectory: Option<TrajectoryRecord>,
    pub uncond_trajectory: Option<TrajectoryRecord>,
    pub final_features: Tensor<T>,
}

struct Stream<T: Scalar> {
    class: Option<usize>,
    history: Vec<Tensor<T>>,
    steps: Vec<StepRecord>,
}

impl<T: Scalar> Stream<T> {
    fn latest(&self) -> &Tensor<T> {
        self.history.last().expect("feature history is never empty after step 1")
    }
}

fn row_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(n) {
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Run generation with every step at full model cost.
pub fn generate<T: Scalar>(
    base: &BaseModel<T>,
    cfg: &GenerateConfig,
    opts: &RunOptions,
) -> Result<RunResult<T>> {
    generate_accelerated(base, None, Accelerator::None, cfg.n, cfg, opts)
}

/// Run generation with `budget` full-model steps out of `cfg.n`; the
/// remaining steps advance features with the chosen accelerator.
pub fn generate_accelerated<T: Scalar>(
    base: &BaseModel<T>,
    shortcut: Option<&ShortcutModel<T>>,
    accel: Accelerator,
    budget: usize,
    cfg: &GenerateConfig,
    opts: &RunOptions,
) -> Result<RunResult<T>> {
    cfg.validate()?;
    let n = cfg.n;
    let bc = base.config();
    if n > bc.l {
        return Err(Error::Argument(format!("{n} steps cannot each decode a token of {}", bc.l)));
    }
    let full_steps = match accel {
        Accelerator::None => full_step_indices(n, n)?,
        _ => full_step_indices(n, budget)?,
    };
    let sc = match accel {
        Accelerator::Shortcut => {
            let sc = shortcut
                .ok_or_else(|| Error::Argument("shortcut accelerator without a model".into()))?;
            let c = sc.config();
            if c.l != bc.l || c.dim != bc.dim || c.vocab_size != bc.vocab_size {
                return Err(Error::Incompatible("shortcut does not match base model".into()));
            }
            Some(sc)
        }
        _ => None,
    };

    let vocab = base.vocabulary();
    let guided = cfg.sampler.guidance_scale > 0.0;
    let mut streams = vec![Stream::<T> { class: cfg.class, history: Vec::new(), steps: Vec::new() }];
    if guided {
        streams.push(Stream { class: None, history: Vec::new(), steps: Vec::new() });
    }

    let mut x = TokenSequence::all_masked(bc.l, vocab);
    let mut nd_prev: Vec<(u16, u16)> = Vec::new();
    let mut t_prev = 0.0f64;
    let mut trace = Vec::with_capacity(n);
    let mut num_base_calls = 0usize;

    for i in 1..=n {
        let t_i = i as f64 / n as f64;
        let full = full_steps.binary_search(&i).is_ok();
        let started = Instant::now();

        for s in streams.iter_mut() {
            let f = if full {
                num_base_calls += 1;
                base.forward_features(&x, s.class)?
            } else {
                match accel {
                    Accelerator::None => unreachable!("all steps are full"),
                    Accelerator::Shortcut => {
                        sc.expect("checked").apply_transition(s.latest(), &nd_prev, t_prev)?
                    }
                    Accelerator::CacheReuse => s.latest().clone(),
                    Accelerator::Taylor1 | Accelerator::Taylor2 => {
                        let want = if accel == Accelerator::Taylor1 { 1 } else { 2 };
                        // Degrade gracefully while history is still short.
                        let order = want.min(s.history.len() - 1);
                        taylor_extrapolate(&s.history, order)?
                    }
                }
            };
            s.history.push(f);
            if s.history.len() > 3 {
                s.history.remove(0);
            }
        }
        let wall_ns = started.elapsed().as_nanos();

        let feature_mse_vs_oracle = if !full && opts.measure_oracle {
            let oracle = base.forward_features(&x, streams[0].class)?;
            Some(streams[0].latest().to_f64().mse(&oracle.to_f64()))
        } else {
            None
        };

        let logits = base.logits(streams[0].latest())?;
        let guided_logits = if guided {
            let lu = base.logits(streams[1].latest())?;
            // l_u + (1 + w) (l_c - l_u)
            let w = T::from_f64(1.0 + cfg.sampler.guidance_scale);
            let data = logits
                .data()
                .iter()
                .zip(lu.data())
                .map(|(&c, &u)| u + w * (c - u))
                .collect();
            Tensor::new(logits.shape().to_vec(), data)?
        } else {
            logits
        };
        let p = row_softmax(&guided_logits)?;

        let seed = match opts.fork {
            Some((from, fork_seed)) if i >= from => fork_seed,
            _ => cfg.sampler.seed,
        };
        let mut step_rng = CounterRng::new(seed).derive(i as u64);
        let x_next = sample_step(&x, &p, vocab, cfg.schedule, i, n, &cfg.sampler, &mut step_rng)?;
        let nd = x_next.diff(&x);

        if opts.record {
            for s in streams.iter_mut() {
                s.steps.push(StepRecord {
                    t: t_i,
                    x: x_next.clone(),
                    newly_decoded: nd.clone(),
                    features: s.latest().to_f32(),
                });
            }
        }
        trace.push(StepTrace {
            step: i,
            mode: if full {
                StepMode::Full
            } else {
                match accel {
                    Accelerator::Shortcut => StepMode::Shortcut,
                    Accelerator::CacheReuse => StepMode::CacheReuse,
                    Accelerator::Taylor1 | Accelerator::Taylor2 => StepMode::Taylor,
                    Accelerator::None => unreachable!(),
                }
            },
            wall_ns,
            feature_mse_vs_oracle,
        });

        x = x_next;
        nd_prev = nd;
        t_prev = t_i;
    }

    let make_record = |s: &mut Stream<T>, tag: StreamTag| TrajectoryRecord {
        meta: TrajectoryMeta {
            seed: cfg.sampler.seed,
            class_id: cfg.class.unwrap_or(bc.num_classes) as u32,
            n,
            guidance_scale: cfg.sampler.guidance_scale,
            schedule: cfg.schedule.kind,
            stream: tag,
            base_hash: opts.base_hash,
        },
        l: bc.l,
        d: bc.dim,
        vocab_size: bc.vocab_size,
        steps: std::mem::take(&mut s.steps),
    };
    let final_features = streams[0].latest().clone();
    let cond_trajectory = opts.record.then(|| make_record(&mut streams[0], StreamTag::Cond));
    let uncond_trajectory = (opts.record && guided)
        .then(|| make_record(&mut streams[1], StreamTag::Uncond));

    Ok(RunResult {
        tokens: x,
        trace,
        num_base_calls,
        cond_trajectory,
        uncond_trajectory,
        final_features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basemodel::BaseConfig;

    fn tiny_base() -> BaseModel<f32> {
        BaseModel::new(
            BaseConfig {
                l: 16,
                vocab_size: 4,
                dim: 16,
                layers: 2,
                heads: 2,
                num_classes: 2,
                mlp_ratio: 2,
            },
            17,
        )
    }

    fn cfg(n: usize, seed: u64) -> GenerateConfig {
        GenerateConfig {
            n,
            class: Some(0),
            schedule: MaskSchedule::cosine(),
            sampler: SamplerConfig { seed, ..Default::default() },
        }
    }

    #[test]
    fn full_step_indices_hand_example() {
        assert_eq!(full_step_indices(8, 4).unwrap(), vec![1, 3, 5, 7]);
        assert_eq!(full_step_indices(16, 16).unwrap(), (1..=16).collect::<Vec<_>>());
        assert_eq!(full_step_indices(5, 1).unwrap(), vec![1]);
        assert!(full_step_indices(4, 5).is_err());
        assert!(full_step_indices(4, 0).is_err());
    }

    #[test]
    fn taylor_hand_examples() {
        let h: Vec<Tensor<f64>> =
            [0.0, 1.0, 3.0].iter().map(|&v| Tensor::scalar(v)).collect();
        // First differences: next = 2*3 - 1 = 5.
        assert_eq!(taylor_extrapolate(&h, 1).unwrap().item(), 5.0);
        // Second differences: next = 3*3 - 3*1 + 0 = 6.
        assert_eq!(taylor_extrapolate(&h, 2).unwrap().item(), 6.0);
        // Order 0 repeats the last state.
        assert_eq!(taylor_extrapolate(&h, 0).unwrap().item(), 3.0);
        assert!(taylor_extrapolate(&h[..1], 1).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_complete() {
        let base = tiny_base();
        let c = cfg(4, 7);
        let a = generate(&base, &c, &RunOptions::default()).unwrap();
        let b = generate(&base, &c, &RunOptions::default()).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.tokens.mask_count(base.vocabulary()), 0);
        assert_eq!(a.num_base_calls, 4);
    }

    #[test]
    fn cache_reuse_budget_reduces_base_calls() {
        let base = tiny_base();
        let c = cfg(8, 3);
        let r = generate_accelerated(
            &base,
            None,
            Accelerator::CacheReuse,
            4,
            &c,
            &RunOptions { measure_oracle: true, ..Default::default() },
        )
        .unwrap();
        assert_eq!(r.num_base_calls, 4);
        assert_eq!(r.tokens.mask_count(base.vocabulary()), 0);
        let accelerated: Vec<_> =
            r.trace.iter().filter(|t| t.mode == StepMode::CacheReuse).collect();
        assert_eq!(accelerated.len(), 4);
        assert!(accelerated.iter().all(|t| t.feature_mse_vs_oracle.is_some()));
    }

    #[test]
    fn recorded_trajectory_validates_and_matches_output() {
        let base = tiny_base();
        let c = GenerateConfig { sampler: SamplerConfig { guidance_scale: 1.5, seed: 2, ..Default::default() }, ..cfg(4, 2) };
        let r = generate(
            &base,
            &c,
            &RunOptions { record: true, base_hash: [9u8; 32], ..Default::default() },
        )
        .unwrap();
        let cond = r.cond_trajectory.unwrap();
        cond.validate().unwrap();
        let uncond = r.uncond_trajectory.unwrap();
        uncond.validate().unwrap();
        assert_eq!(cond.steps.last().unwrap().x, r.tokens);
        assert_eq!(cond.meta.stream, StreamTag::Cond);
        assert_eq!(uncond.meta.stream, StreamTag::Uncond);
        // Token path is shared; feature streams differ.
        assert_eq!(cond.steps[0].x, uncond.steps[0].x);
        assert_ne!(cond.steps[0].features, uncond.steps[0].features);
    }

    #[test]
    fn fork_shares_prefix_then_diverges_eventually() {
        let base = tiny_base();
        let c = cfg(8, 40);
        let r = generate(&base, &c, &RunOptions { record: true, ..Default::default() }).unwrap();
        let reference = r.cond_trajectory.unwrap();
        // A fork reseeded at step 1 with the same seed is the identical run.
        let same = generate(
            &base,
            &c,
            &RunOptions { record: true, fork: Some((1, c.sampler.seed)), ..Default::default() },
        )
        .unwrap();
        assert_eq!(same.tokens, r.tokens);

        let forked = generate(
            &base,
            &c,
            &RunOptions { record: true, fork: Some((5, 777)), ..Default::default() },
        )
        .unwrap();
        let ft = forked.cond_trajectory.unwrap();
        for i in 0..4 {
            assert_eq!(ft.steps[i].x, reference.steps[i].x, "prefix step {i}");
        }
    }

    #[test]
    fn budget_equal_to_n_is_bitwise_vanilla() {
        let base = tiny_base();
        let c = cfg(8, 123);
        let vanilla = generate(&base, &c, &RunOptions::default()).unwrap();
        // Even with a shortcut accelerator selected, B = N leaves no
        // accelerated step, so the run must be identical.
        let scm = crate::shortcut::ShortcutModel::new(
            crate::shortcut::ShortcutConfig {
                l: 16,
                dim: 16,
                vocab_size: 4,
                bottleneck_ratio: 2,
                heads: 2,
                time_embed_dim: 8,
                use_cross_attention: true,
            },
            &base,
            [0u8; 32],
            1,
        )
        .unwrap();
        let full_budget =
            generate_accelerated(&base, Some(&scm), Accelerator::Shortcut, 8, &c, &RunOptions::default())
                .unwrap();
        assert_eq!(vanilla.tokens, full_budget.tokens);
        assert_eq!(vanilla.final_features, full_budget.final_features);
    }

    #[test]
    fn guidance_without_class_rejected() {
        let base = tiny_base();
        let c = GenerateConfig {
            n: 4,
            class: None,
            schedule: MaskSchedule::cosine(),
            sampler: SamplerConfig { guidance_scale: 2.0, ..Default::default() },
        };
        assert!(generate(&base, &c, &RunOptions::default()).is_err());
    }
}
