//! Masked token generation: augmented vocabulary, mask schedule, and the
//! confidence-based sampling operator that advances the token state.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Scalar, Tensor};

/// Token vocabulary of size |V| plus one reserved mask token. The mask id
/// is |V| itself, outside the [0, |V|) token range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Self {
        assert!(size > 0 && size < u16::MAX as usize);
        Self { size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Total entries of the augmented vocabulary (tokens plus mask).
    pub fn augmented_size(&self) -> usize {
        self.size + 1
    }

    pub fn mask_id(&self) -> u16 {
        self.size as u16
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u16>,
}

impl TokenSequence {
    pub fn all_masked(len: usize, vocab: Vocabulary) -> Self {
        Self { tokens: vec![vocab.mask_id(); len] }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_count(&self, vocab: Vocabulary) -> usize {
        self.tokens.iter().filter(|&&t| t == vocab.mask_id()).count()
    }

    pub fn masked_positions(&self, vocab: Vocabulary) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tokens[i] == vocab.mask_id()).collect()
    }

    /// Positional diff against an earlier state: the newly decoded tokens.
    pub fn diff(&self, prev: &TokenSequence) -> Vec<(u16, u16)> {
        self.tokens
            .iter()
            .zip(&prev.tokens)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, (&a, _))| (i as u16, a))
            .collect()
    }

    /// Render as a plain-text integer grid, one row of the square grid per
    /// line; the mask token prints as `.`.
    pub fn to_text_grid(&self, vocab: Vocabulary) -> String {
        let side = (self.len() as f64).sqrt().round() as usize;
        let side = if side * side == self.len() { side } else { self.len() };
        let mut out = String::new();
        for (i, &t) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(if i % side == 0 { '\n' } else { ' ' });
            }
            if t == vocab.mask_id() {
                out.push('.');
            } else {
                out.push_str(&t.to_string());
            }
        }
        out.push('\n');
        out
    }

    /// Write as a binary PPM image using the fixed token palette; the grid
    /// is scaled up by `cell` pixels per token.
    pub fn write_ppm(&self, vocab: Vocabulary, cell: usize, path: &Path) -> Result<()> {
        let side = (self.len() as f64).sqrt().round() as usize;
        if side * side != self.len() {
            return Err(Error::Argument(format!("length {} is not a square grid", self.len())));
        }
        let wpx = side * cell;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "P6\n{} {}\n255", wpx, wpx)?;
        for py in 0..wpx {
            for px in 0..wpx {
                let t = self.tokens[(py / cell) * side + px / cell];
                f.write_all(&token_color(t, vocab))?;
            }
        }
        Ok(())
    }
}

/// Fixed token -> RGB palette; the mask token is dark gray.
pub fn token_color(token: u16, vocab: Vocabulary) -> [u8; 3] {
    if token == vocab.mask_id() {
        return [40, 40, 40];
    }
    // Golden-angle hue walk, full saturation, fixed value.
    let hue = (token as f64 * 137.507_764) % 360.0;
    let c = 200.0;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (hue / 60.0) as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [(r + 40.0) as u8, (g + 40.0) as u8, (b + 40.0) as u8]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Argument(format!("unknown schedule '{other}'"))),
        }
    }
}

/// Mask ratio schedule: gamma(0) = 1, gamma(1) = 0, strictly decreasing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSchedule {
    pub kind: ScheduleKind,
}

impl MaskSchedule {
    pub fn cosine() -> Self {
        Self { kind: ScheduleKind::Cosine }
    }

    pub fn linear() -> Self {
        Self { kind: ScheduleKind::Linear }
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("gamma: t = {t} outside [0, 1]")));
        }
        if t == 1.0 {
            // cos(pi/2) is ~6e-17 in floating point; the endpoint must be
            // exactly 0 so the unmask counts telescope to L.
            return Ok(0.0);
        }
        Ok(match self.kind {
            ScheduleKind::Cosine => (std::f64::consts::FRAC_PI_2 * t).cos(),
            ScheduleKind::Linear => 1.0 - t,
        })
    }
}

/// Number of positions to unmask at step i of n:
/// ceil(L * gamma((i-1)/n)) - ceil(L * gamma(i/n)). Telescopes to L.
pub fn unmask_count(schedule: MaskSchedule, l: usize, i: usize, n: usize) -> usize {
    assert!(i >= 1 && i <= n, "step {i} outside 1..={n}");
    let at = |t: f64| (l as f64 * schedule.gamma(t).expect("t in range")).ceil() as usize;
    at((i - 1) as f64 / n as f64) - at(i as f64 / n as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct SamplerConfig {
    /// Token sampling temperature; 0 selects the argmax token
    /// deterministically.
    pub temperature: f64,
    /// Scale of Gumbel noise added to confidences, linearly annealed to 0
    /// at t = 1. Zero disables confidence noise entirely.
    pub confidence_noise_scale: f64,
    pub seed: u64,
    /// Classifier-free guidance weight w; 0 disables the unconditional
    /// stream.
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 1.0, confidence_noise_scale: 0.0, seed: 0, guidance_scale: 0.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature < 0.0 {
            return Err(Error::Argument("temperature must be >= 0".into()));
        }
        if self.confidence_noise_scale < 0.0 {
            return Err(Error::Argument("confidence_noise_scale must be >= 0".into()));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::Argument("guidance_scale must be >= 0".into()));
        }
        Ok(())
    }
}

const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// One application of the sampling operator: draw a candidate token for
/// every masked position from its probability row (temperature applied),
/// rank candidates by confidence (log-probability of the drawn token plus
/// annealed Gumbel noise; ties broken by lowest position), and commit the
/// top unmask_count of them. Previously unmasked positions never change.
pub fn sample_step<T: Scalar>(
    x_prev: &TokenSequence,
    p: &Tensor<T>,
    vocab: Vocabulary,
    schedule: MaskSchedule,
    i: usize,
    n: usize,
    cfg: &SamplerConfig,
    rng: &mut CounterRng,
) -> Result<TokenSequence> {
    let (rows, v) = p.dims2()?;
    let l = x_prev.len();
    if rows != l || v != vocab.size() {
        return Err(Error::Dimension(format!(
            "probability matrix {rows}x{v}, expected {l}x{}",
            vocab.size()
        )));
    }
    let k = unmask_count(schedule, l, i, n);
    let masked = x_prev.masked_positions(vocab);
    if masked.len() < k {
        return Err(Error::Contract(format!(
            "{} masked positions but {} required at step {i}/{n}",
            masked.len(),
            k
        )));
    }

    let t_i = i as f64 / n as f64;
    let noise_scale = cfg.confidence_noise_scale * (1.0 - t_i);

    // (confidence, position, token), drawn in position order so rng
    // consumption is deterministic.
    let mut candidates: Vec<(f64, usize, u16)> = Vec::with_capacity(masked.len());
    for &pos in &masked {
        let row: Vec<f64> = p.row(pos).iter().map(|&x| x.to_f64()).collect();
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Contract(format!(
                "probability row {pos} sums to {sum}, not 1"
            )));
        }
        let (token, logq) = if cfg.temperature == 0.0 {
            // Argmax mode: deterministic, lowest token index wins ties.
            let mut best = 0usize;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            (best, row[best].max(f64::MIN_POSITIVE).ln())
        } else {
            let inv_t = 1.0 / cfg.temperature;
            let q: Vec<f64> = row.iter().map(|&x| x.max(0.0).powf(inv_t)).collect();
            let qsum: f64 = q.iter().sum();
            let tok = rng.categorical(&q);
            (tok, (q[tok] / qsum).max(f64::MIN_POSITIVE).ln())
        };
        let mut conf = logq;
        if noise_scale > 0.0 {
            conf += noise_scale * rng.gumbel();
        }
        candidates.push((conf, pos, token as u16));
    }

    // Descending confidence, ties by lowest position index.
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut out = x_prev.clone();
    for &(_, pos, tok) in candidates.iter().take(k) {
        out.tokens[pos] = tok;
    }
    Ok(out)
}
