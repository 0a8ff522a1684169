//! Trajectory diagnostics: smoothness of the feature path, local Lipschitz
//! ratios of the transition map, seed-fork divergence, per-layer stability
//! profiles, and distribution-level generation quality against the
//! analytic synthetic truth.
//!
//! Everything here is a pure function of its inputs; CSV and SVG emission
//! is deterministic.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rayon::prelude::*;

use crate::basemodel::BaseModel;
use crate::dataset::SyntheticDataset;
use crate::error::{Error, Result};
use crate::inference::{generate, GenerateConfig, RunOptions};
use crate::migm::{TokenSequence, Vocabulary};
use crate::tensor::{Scalar, Tensor};
use crate::trajectory::{StreamTag, TrajectoryRecord};

/// Denominator floor below which a ratio pair is skipped (and counted).
pub const RATIO_FLOOR: f64 = 1e-12;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < RATIO_FLOOR && nb < RATIO_FLOOR {
        return 1.0;
    }
    dot / (na.max(RATIO_FLOOR) * nb.max(RATIO_FLOOR))
}

/// Per-step mean feature (average over the L token rows) as a D-vector.
fn mean_feature(f: &Tensor<f32>) -> Vec<f64> {
    let (l, d) = f.dims2().expect("feature matrix");
    let mut out = vec![0.0; d];
    for row in f.data().chunks(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v as f64;
        }
    }
    for o in &mut out {
        *o /= l as f64;
    }
    out
}

#[derive(Clone, Debug)]
pub struct SmoothnessReport {
    /// Pairwise cosine similarity of per-step mean features, averaged over
    /// records. Symmetric with unit diagonal.
    pub matrix: Vec<Vec<f64>>,
    /// matrix\[i\]\[i+1\]: consecutive-step similarity of mean features.
    pub consecutive: Vec<f64>,
    /// Consecutive similarity computed token-wise (per-row cosine averaged
    /// over rows), reported alongside the mean-feature variant.
    pub consecutive_tokenwise: Vec<f64>,
    /// 2-D PCA projection of every step's mean feature, grouped by record.
    pub pca: Vec<Vec<(f64, f64)>>,
}

pub fn smoothness(records: &[TrajectoryRecord]) -> Result<SmoothnessReport> {
    let n = match records.first() {
        Some(r) if r.steps.len() >= 2 => r.steps.len(),
        _ => return Err(Error::Argument("need at least one record with >= 2 steps".into())),
    };
    if records.iter().any(|r| r.steps.len() != n) {
        return Err(Error::Argument("records have differing step counts".into()));
    }

    let means: Vec<Vec<Vec<f64>>> = records
        .iter()
        .map(|r| r.steps.iter().map(|s| mean_feature(&s.features)).collect())
        .collect();

    let mut matrix = vec![vec![0.0; n]; n];
    for m in &means {
        for i in 0..n {
            for j in 0..n {
                matrix[i][j] += cosine(&m[i], &m[j]);
            }
        }
    }
    for row in &mut matrix {
        for v in row.iter_mut() {
            *v /= records.len() as f64;
        }
    }
    let consecutive = (0..n - 1).map(|i| matrix[i][i + 1]).collect();

    let mut consecutive_tokenwise = vec![0.0; n - 1];
    for r in records {
        for i in 0..n - 1 {
            let a = &r.steps[i].features;
            let b = &r.steps[i + 1].features;
            let (l, d) = a.dims2()?;
            let mut acc = 0.0;
            for row in 0..l {
                let ra: Vec<f64> = a.row(row).iter().map(|&v| v as f64).collect();
                let rb: Vec<f64> = b.row(row).iter().map(|&v| v as f64).collect();
                acc += cosine(&ra, &rb);
            }
            let _ = d;
            consecutive_tokenwise[i] += acc / l as f64;
        }
    }
    for v in &mut consecutive_tokenwise {
        *v /= records.len() as f64;
    }

    let all_points: Vec<Vec<f64>> = means.iter().flatten().cloned().collect();
    let projected = pca_2d(&all_points);
    let pca = projected.chunks(n).map(|c| c.to_vec()).collect();

    Ok(SmoothnessReport { matrix, consecutive, consecutive_tokenwise, pca })
}

/// Project points onto their top two principal components (power
/// iteration with deterministic initialization).
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<(f64, f64)> {
    if points.is_empty() {
        return Vec::new();
    }
    let d = points[0].len();
    let n = points.len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> =
        points.iter().map(|p| p.iter().zip(&mean).map(|(&v, &m)| v - m).collect()).collect();

    let apply_cov = |v: &[f64], deflate: Option<(&[f64], f64)>| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for row in &centered {
            let dot: f64 = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
            for (o, &r) in out.iter_mut().zip(row) {
                *o += dot * r;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        if let Some((u, lambda)) = deflate {
            let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
            for (o, &ui) in out.iter_mut().zip(u) {
                *o -= lambda * dot * ui;
            }
        }
        out
    };
    let normalize = |v: &mut Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > RATIO_FLOOR {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
    };
    let power = |deflate: Option<(&[f64], f64)>| -> (Vec<f64>, f64) {
        // Deterministic start: a slowly varying vector, never orthogonal
        // to a generic principal direction by accident of symmetry alone.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 1e-3).collect();
        normalize(&mut v);
        for _ in 0..256 {
            v = apply_cov(&v, deflate);
            normalize(&mut v);
        }
        let cv = apply_cov(&v, deflate);
        let lambda: f64 = cv.iter().zip(&v).map(|(&a, &b)| a * b).sum();
        (v, lambda)
    };
    let (v1, l1) = power(None);
    let (v2, _) = power(Some((&v1, l1)));

    centered
        .iter()
        .map(|p| {
            let x: f64 = p.iter().zip(&v1).map(|(&a, &b)| a * b).sum();
            let y: f64 = p.iter().zip(&v2).map(|(&a, &b)| a * b).sum();
            (x, y)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LipschitzReport {
    /// Per-index (‖u_{i+1}−u_i‖_F, ‖Δ_{i+1}−Δ_i‖_F) pairs over all records.
    pub points: Vec<(f64, f64)>,
    pub ratios: Vec<f64>,
    /// Pairs dropped because the input-side norm fell below the floor.
    pub skipped: usize,
    pub mean: f64,
    pub median: f64,
    /// Coefficient of variation (stddev / mean) of the ratios.
    pub cv: f64,
}

/// Local Lipschitz diagnostic of the feature transition: u_i stacks the
/// token embeddings E(x_{t_i}) on top of f_{t_i}; Δ_i = f_{t_{i+1}} −
/// f_{t_i}; each ratio is ‖Δ_{i+1}−Δ_i‖_F / ‖u_{i+1}−u_i‖_F.
pub fn lipschitz<T: Scalar>(
    records: &[TrajectoryRecord],
    token_emb: &Tensor<T>,
) -> Result<LipschitzReport> {
    let mut points = Vec::new();
    let mut ratios = Vec::new();
    let mut skipped = 0usize;
    for rec in records {
        if rec.steps.len() < 3 {
            return Err(Error::Argument("lipschitz needs records with >= 3 steps".into()));
        }
        let embed = |x: &TokenSequence| -> Result<Vec<f64>> {
            let (_, d) = token_emb.dims2()?;
            let mut out = Vec::with_capacity(x.len() * d);
            for &t in &x.tokens {
                out.extend(token_emb.row(t as usize).iter().map(|&v| v.to_f64()));
            }
            Ok(out)
        };
        let fs: Vec<Vec<f64>> =
            rec.steps.iter().map(|s| s.features.data().iter().map(|&v| v as f64).collect()).collect();
        let es: Vec<Vec<f64>> = rec.steps.iter().map(|s| embed(&s.x)).collect::<Result<_>>()?;
        let deltas: Vec<Vec<f64>> = fs
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(&a, &b)| a - b).collect())
            .collect();
        for i in 0..deltas.len() - 1 {
            let du_f: f64 =
                fs[i + 1].iter().zip(&fs[i]).map(|(&a, &b)| (a - b) * (a - b)).sum();
            let du_e: f64 =
                es[i + 1].iter().zip(&es[i]).map(|(&a, &b)| (a - b) * (a - b)).sum();
            let du = (du_f + du_e).sqrt();
            let dd: f64 = deltas[i + 1]
                .iter()
                .zip(&deltas[i])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            points.push((du, dd));
            if du < RATIO_FLOOR {
                skipped += 1;
            } else {
                ratios.push(dd / du);
            }
        }
    }
    let (mean, median, cv) = if ratios.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let mut sorted = ratios.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
        };
        let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / ratios.len() as f64;
        let cv = if mean.abs() < RATIO_FLOOR { 0.0 } else { var.sqrt() / mean };
        (mean, median, cv)
    };
    Ok(LipschitzReport { points, ratios, skipped, mean, median, cv })
}

#[derive(Debug)]
pub struct ForkReport {
    pub reference: TrajectoryRecord,
    pub forks: Vec<TrajectoryRecord>,
    /// PCA overlay of per-step mean features: reference first, then forks.
    pub pca: Vec<Vec<(f64, f64)>>,
    /// Largest pairwise distance between final mean features across runs.
    pub max_final_divergence: f64,
}

/// Rerun a generation K times with the sampler reseeded from step `s`;
/// the prefix up to step s−1 is shared bit-exactly with the reference.
pub fn fork<T: Scalar>(
    base: &BaseModel<T>,
    cfg: &GenerateConfig,
    s: usize,
    k: usize,
    fork_seed_base: u64,
) -> Result<ForkReport> {
    if !(1 < s && s <= cfg.n) {
        return Err(Error::Argument(format!("reseed step {s} outside 2..={}", cfg.n)));
    }
    let reference = generate(base, cfg, &RunOptions { record: true, ..Default::default() })?
        .cond_trajectory
        .expect("record requested");
    let forks: Vec<TrajectoryRecord> = (0..k)
        .into_par_iter()
        .map(|j| {
            let opts = RunOptions {
                record: true,
                fork: Some((s, fork_seed_base.wrapping_add(j as u64))),
                ..Default::default()
            };
            Ok(generate(base, cfg, &opts)?.cond_trajectory.expect("record requested"))
        })
        .collect::<Result<_>>()?;

    for (j, f) in forks.iter().enumerate() {
        for i in 0..s - 1 {
            if f.steps[i].x != reference.steps[i].x {
                return Err(Error::Contract(format!("fork {j} prefix diverged at step {}", i + 1)));
            }
        }
    }

    let mut all: Vec<Vec<f64>> = Vec::new();
    let mut finals: Vec<Vec<f64>> = Vec::new();
    for rec in std::iter::once(&reference).chain(&forks) {
        for step in &rec.steps {
            all.push(mean_feature(&step.features));
        }
        finals.push(mean_feature(&rec.steps.last().unwrap().features));
    }
    let projected = pca_2d(&all);
    let pca = projected.chunks(cfg.n).map(|c| c.to_vec()).collect();

    let mut max_final_divergence = 0.0f64;
    for i in 0..finals.len() {
        for j in i + 1..finals.len() {
            let d: f64 = finals[i]
                .iter()
                .zip(&finals[j])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            max_final_divergence = max_final_divergence.max(d);
        }
    }

    Ok(ForkReport { reference, forks, pca, max_final_divergence })
}

#[derive(Clone, Debug)]
pub struct LayerProfile {
    /// Mean consecutive-step cosine similarity per layer.
    pub mean: Vec<f64>,
    pub q25: Vec<f64>,
    pub q75: Vec<f64>,
}

/// Stability of each layer's features along recorded trajectories: the
/// token states are replayed through the base model's per-layer taps and
/// consecutive-step mean features compared per layer.
pub fn layer_profile<T: Scalar>(
    base: &BaseModel<T>,
    records: &[TrajectoryRecord],
) -> Result<LayerProfile> {
    let n_layers = base.config().layers;
    let mut sims: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    for rec in records {
        let class = match rec.meta.stream {
            StreamTag::Cond => Some(rec.meta.class_id as usize),
            StreamTag::Uncond => None,
        };
        // Features at step i come from the token state after step i-1.
        let vocab = Vocabulary::new(rec.vocab_size);
        let mut states = vec![TokenSequence::all_masked(rec.l, vocab)];
        states.extend(rec.steps.iter().map(|s| s.x.clone()).take(rec.steps.len() - 1));
        let taps: Vec<Vec<Vec<f64>>> = states
            .par_iter()
            .map(|x| {
                let layers = base.forward_all_layers(x, class)?;
                Ok(layers.iter().map(|f| mean_feature(&f.to_f32())).collect())
            })
            .collect::<Result<_>>()?;
        for w in taps.windows(2) {
            for layer in 0..n_layers {
                sims[layer].push(cosine(&w[0][layer], &w[1][layer]));
            }
        }
    }
    let quantile = |sorted: &[f64], q: f64| -> f64 {
        if sorted.is_empty() {
            return 0.0;
        }
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let mut mean = Vec::new();
    let mut q25 = Vec::new();
    let mut q75 = Vec::new();
    for s in &mut sims {
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        mean.push(if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 });
        q25.push(quantile(s, 0.25));
        q75.push(quantile(s, 0.75));
    }
    Ok(LayerProfile { mean, q25, q75 })
}

#[derive(Clone, Copy, Debug)]
pub struct QualityReport {
    /// Total-variation distance between empirical and analytic per-token
    /// marginals, averaged over positions.
    pub marginal_tv: f64,
    /// Mean absolute error of grid-neighbor co-occurrence tables against
    /// the analytic product tables, averaged over neighbor pairs.
    pub pair_mae: f64,
}

/// Score generated samples of one class against the analytic distribution.
pub fn quality(
    samples: &[TokenSequence],
    dataset: &SyntheticDataset,
    class: usize,
) -> Result<QualityReport> {
    if samples.is_empty() {
        return Err(Error::Argument("quality needs at least one sample".into()));
    }
    let v = dataset.vocab.size();
    let len = dataset.len;
    let n = samples.len() as f64;
    for s in samples {
        if s.len() != len || s.tokens.iter().any(|&t| t as usize >= v) {
            return Err(Error::Argument("sample incompatible with dataset".into()));
        }
    }

    let mut counts = vec![vec![0usize; v]; len];
    for s in samples {
        for (pos, &t) in s.tokens.iter().enumerate() {
            counts[pos][t as usize] += 1;
        }
    }
    let marginal_tv = (0..len)
        .map(|pos| {
            (0..v)
                .map(|t| (counts[pos][t] as f64 / n - dataset.marginal(class)[pos][t]).abs())
                .sum::<f64>()
                / 2.0
        })
        .sum::<f64>()
        / len as f64;

    let side = dataset.side;
    let mut pair_mae = 0.0;
    let mut n_pairs = 0usize;
    let mut joint = vec![vec![0usize; v]; v];
    for r in 0..side {
        for c in 0..side {
            let p = r * side + c;
            for q in [if c + 1 < side { Some(p + 1) } else { None }, if r + 1 < side {
                Some(p + side)
            } else {
                None
            }]
            .into_iter()
            .flatten()
            {
                for row in joint.iter_mut() {
                    row.iter_mut().for_each(|x| *x = 0);
                }
                for s in samples {
                    joint[s.tokens[p] as usize][s.tokens[q] as usize] += 1;
                }
                let truth = dataset.pair_table(class, p, q);
                let mae: f64 = (0..v)
                    .flat_map(|a| (0..v).map(move |b| (a, b)))
                    .map(|(a, b)| (joint[a][b] as f64 / n - truth[a][b]).abs())
                    .sum::<f64>()
                    / (v * v) as f64;
                pair_mae += mae;
                n_pairs += 1;
            }
        }
    }
    pair_mae /= n_pairs.max(1) as f64;

    Ok(QualityReport { marginal_tv, pair_mae })
}

#[derive(Clone, Debug)]
pub struct ParetoRow {
    pub config: String,
    pub budget: usize,
    pub median_latency_ms: f64,
    pub marginal_tv: f64,
    pub pair_mae: f64,
}

pub fn write_pareto_csv(rows: &[ParetoRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "config,budget,median_latency_ms,marginal_tv,pair_mae")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.config, r.budget, r.median_latency_ms, r.marginal_tv, r.pair_mae
        )?;
    }
    Ok(())
}

pub fn write_matrix_csv(matrix: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in matrix {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Minimal self-contained SVG heatmap (blue = -1, white = 0, red = +1).
pub fn write_svg_heatmap(matrix: &[Vec<f64>], path: &Path) -> Result<()> {
    let n = matrix.len();
    let cell = 24usize;
    let size = n * cell;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">"
    )?;
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let v = v.clamp(-1.0, 1.0);
            let (r, g, b) = if v >= 0.0 {
                (255, (255.0 * (1.0 - v)) as u8, (255.0 * (1.0 - v)) as u8)
            } else {
                ((255.0 * (1.0 + v)) as u8, (255.0 * (1.0 + v)) as u8, 255)
            };
            writeln!(
                w,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({r},{g},{b})\"/>",
                j * cell,
                i * cell
            )?;
        }
    }
    writeln!(w, "</svg>")?;
    Ok(())
}

/// Minimal self-contained SVG scatter; each series gets its own color and
/// points within a series are connected in order.
pub fn write_svg_scatter(series: &[Vec<(f64, f64)>], path: &Path) -> Result<()> {
    let (width, height, pad) = (480.0, 360.0, 24.0);
    let all: Vec<(f64, f64)> = series.iter().flatten().copied().collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if all.is_empty() || (x1 - x0).abs() < RATIO_FLOOR {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if all.is_empty() || (y1 - y0).abs() < RATIO_FLOOR {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (width - 2.0 * pad);
    let sy = |y: f64| height - pad - (y - y0) / (y1 - y0) * (height - 2.0 * pad);
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    )?;
    for (k, s) in series.iter().enumerate() {
        let color = palette[k % palette.len()];
        if s.len() > 1 {
            let pts: Vec<String> =
                s.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            writeln!(
                w,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1\"/>",
                pts.join(" ")
            )?;
        }
        for &(x, y) in s {
            writeln!(
                w,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                sx(x),
                sy(y)
            )?;
        }
    }
    writeln!(w, "</svg>")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::migm::ScheduleKind;
    use crate::rng::CounterRng;
    use crate::trajectory::{StepRecord, TrajectoryMeta};

    fn record_from_features(features: Vec<Tensor<f32>>, vocab_size: usize) -> TrajectoryRecord {
        let n = features.len();
        let (l, d) = features[0].dims2().unwrap();
        let steps = features
            .into_iter()
            .enumerate()
            .map(|(i, f)| StepRecord {
                t: (i + 1) as f64 / n as f64,
                x: TokenSequence { tokens: vec![0; l] },
                newly_decoded: Vec::new(),
                features: f,
            })
            .collect();
        TrajectoryRecord {
            meta: TrajectoryMeta {
                seed: 0,
                class_id: 0,
                n,
                guidance_scale: 0.0,
                schedule: ScheduleKind::Cosine,
                stream: StreamTag::Cond,
                base_hash: [0; 32],
            },
            l,
            d,
            vocab_size,
            steps,
        }
    }

    #[test]
    fn constant_trajectory_gives_all_ones_matrix() {
        let f = Tensor::<f32>::full(&[2, 3], 0.5);
        let rec = record_from_features(vec![f.clone(), f.clone(), f], 4);
        let rep = smoothness(&[rec]).unwrap();
        for row in &rep.matrix {
            for &v in row {
                assert!((v - 1.0).abs() < 1e-9);
            }
        }
        assert!(rep.consecutive.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn orthogonal_two_step_off_diagonal_zero() {
        let a = Tensor::<f32>::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::<f32>::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let rep = smoothness(&[record_from_features(vec![a, b], 4)]).unwrap();
        assert!(rep.matrix[0][1].abs() < 1e-9);
        assert!((rep.matrix[0][0] - 1.0).abs() < 1e-9);
        // Symmetric with unit diagonal.
        assert!((rep.matrix[1][0] - rep.matrix[0][1]).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_hand_oracle() {
        let fs: Vec<Tensor<f32>> =
            [0.0, 1.0, 3.0, 6.0].iter().map(|&v| Tensor::new(vec![1, 1], vec![v]).unwrap()).collect();
        let rec = record_from_features(fs, 2);
        let zero_emb = Tensor::<f64>::zeros(&[3, 1]);
        let rep = lipschitz(&[rec], &zero_emb).unwrap();
        assert_eq!(rep.ratios, vec![1.0, 0.5]);
        assert_eq!(rep.points, vec![(1.0, 1.0), (2.0, 1.0)]);
        assert_eq!(rep.skipped, 0);
        assert_eq!(rep.mean, 0.75);
        assert_eq!(rep.median, 0.75);
    }

    #[test]
    fn linear_trajectory_ratios_zero() {
        let fs: Vec<Tensor<f32>> =
            [0.0, 1.0, 2.0, 3.0].iter().map(|&v| Tensor::new(vec![1, 1], vec![v]).unwrap()).collect();
        let rec = record_from_features(fs, 2);
        let zero_emb = Tensor::<f64>::zeros(&[3, 1]);
        let rep = lipschitz(&[rec], &zero_emb).unwrap();
        assert!(rep.ratios.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn duplicated_states_are_skipped_and_counted() {
        let fs: Vec<Tensor<f32>> =
            [1.0, 1.0, 3.0, 5.0].iter().map(|&v| Tensor::new(vec![1, 1], vec![v]).unwrap()).collect();
        let rec = record_from_features(fs, 2);
        let zero_emb = Tensor::<f64>::zeros(&[3, 1]);
        let rep = lipschitz(&[rec], &zero_emb).unwrap();
        // First pair has zero input-side change: skipped.
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.ratios.len(), 1);
    }

    #[test]
    fn quality_self_consistency_on_analytic_samples() {
        let ds = SyntheticDataset::new(
            crate::dataset::GeneratorKind::Stripes,
            4,
            16,
            Vocabulary::new(8),
            0.05,
        )
        .unwrap();
        let mut rng = CounterRng::new(11);
        let samples: Vec<TokenSequence> = (0..4096).map(|_| ds.sample(2, &mut rng)).collect();
        let q = quality(&samples, &ds, 2).unwrap();
        assert!(q.marginal_tv < 0.03, "tv {}", q.marginal_tv);
        assert!(q.pair_mae < 0.01, "mae {}", q.pair_mae);
    }

    #[test]
    fn quality_single_sample_bounded() {
        let ds = SyntheticDataset::new(
            crate::dataset::GeneratorKind::Blocks,
            2,
            16,
            Vocabulary::new(4),
            0.1,
        )
        .unwrap();
        let mut rng = CounterRng::new(0);
        let q = quality(&[ds.sample(0, &mut rng)], &ds, 0).unwrap();
        assert!(q.marginal_tv <= 1.0 && q.marginal_tv >= 0.0);
    }

    #[test]
    fn pca_separates_a_dominant_direction() {
        // Points along (1, 1, 0) with small noise on other axes.
        let mut rng = CounterRng::new(3);
        let points: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let s = i as f64 / 10.0;
                vec![s + rng.normal() * 0.01, s + rng.normal() * 0.01, rng.normal() * 0.01]
            })
            .collect();
        let proj = pca_2d(&points);
        // The first component should carry nearly all the spread.
        let var1: f64 = proj.iter().map(|p| p.0 * p.0).sum();
        let var2: f64 = proj.iter().map(|p| p.1 * p.1).sum();
        assert!(var1 > 100.0 * var2, "var1 {var1} var2 {var2}");
    }

    #[test]
    fn svg_writers_produce_wellformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let hm = dir.path().join("m.svg");
        write_svg_heatmap(&[vec![1.0, 0.0], vec![0.0, -1.0]], &hm).unwrap();
        let body = std::fs::read_to_string(&hm).unwrap();
        assert!(body.starts_with("<svg") && body.trim_end().ends_with("</svg>"));

        let sc = dir.path().join("s.svg");
        write_svg_scatter(&[vec![(0.0, 0.0), (1.0, 1.0)], vec![(0.5, -0.5)]], &sc).unwrap();
        let body = std::fs::read_to_string(&sc).unwrap();
        assert!(body.contains("circle") && body.contains("polyline"));
    }
}
