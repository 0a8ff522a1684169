//! Recording, serializing, and loading generation trajectories — the
//! training corpus for the shortcut model.
//!
//! Binary format, magic "MSTRJ1", all integers little-endian:
//!
//! ```text
//! magic          6 bytes  b"MSTRJ1"
//! version        u32 (currently 1)
//! L, D, N, V     u32 each
//! seed           u64
//! class_id       u32
//! guidance       f64
//! schedule_kind  u8 (0 = cosine, 1 = linear)
//! stream         u8 (0 = cond, 1 = uncond)
//! base_hash      32 bytes (SHA-256 of the base checkpoint)
//! step*          N times:
//!   t            f64
//!   tokens       L x u16
//!   features     L*D x f32
//!   diff_count   u16
//!   diff*        diff_count x (pos u16, token u16)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::migm::{ScheduleKind, TokenSequence, Vocabulary};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"MSTRJ1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamTag {
    Cond,
    Uncond,
}

impl StreamTag {
    pub fn name(&self) -> &'static str {
        match self {
            StreamTag::Cond => "cond",
            StreamTag::Uncond => "uncond",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub class_id: u32,
    pub n: usize,
    pub guidance_scale: f64,
    pub schedule: ScheduleKind,
    pub stream: StreamTag,
    pub base_hash: [u8; 32],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub x: TokenSequence,
    /// Positions decoded at this step: the diff of x against the previous
    /// step's tokens.
    pub newly_decoded: Vec<(u16, u16)>,
    /// Feature state f_t (computed from the previous step's tokens),
    /// stored at 32-bit.
    pub features: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub meta: TrajectoryMeta,
    pub l: usize,
    pub d: usize,
    pub vocab_size: usize,
    pub steps: Vec<StepRecord>,
}

/// One supervised training sample: predict f_next - f_prev from
/// (f_prev, the tokens decoded out of f_prev's distribution, t_prev).
#[derive(Clone, Copy, Debug)]
pub struct PairSample<'a> {
    pub f_prev: &'a Tensor<f32>,
    pub newly_decoded: &'a [(u16, u16)],
    pub t_prev: f64,
    pub f_next: &'a Tensor<f32>,
}

impl TrajectoryRecord {
    /// Consecutive-step training pairs; an N-step record yields N-1.
    pub fn pair_samples(&self) -> Vec<PairSample<'_>> {
        self.steps
            .windows(2)
            .map(|w| PairSample {
                f_prev: &w[0].features,
                newly_decoded: &w[0].newly_decoded,
                t_prev: w[0].t,
                f_next: &w[1].features,
            })
            .collect()
    }

    /// Check every structural invariant: step count, strictly increasing
    /// times, diff consistency against a cumulative replay from the
    /// all-mask state, and feature shapes.
    pub fn validate(&self) -> Result<()> {
        if self.steps.len() != self.meta.n {
            return Err(Error::Contract(format!(
                "{} steps recorded, meta says {}",
                self.steps.len(),
                self.meta.n
            )));
        }
        let vocab = Vocabulary::new(self.vocab_size);
        let mut prev_t = f64::NEG_INFINITY;
        let mut replay = TokenSequence::all_masked(self.l, vocab);
        for (i, step) in self.steps.iter().enumerate() {
            if step.t <= prev_t {
                return Err(Error::Contract(format!("step {i}: t not strictly increasing")));
            }
            prev_t = step.t;
            if step.x.len() != self.l {
                return Err(Error::Contract(format!("step {i}: token length")));
            }
            if step.features.shape() != [self.l, self.d] {
                return Err(Error::Contract(format!("step {i}: feature shape")));
            }
            if step.x.diff(&replay) != step.newly_decoded {
                return Err(Error::Contract(format!("step {i}: newly_decoded is not the diff")));
            }
            for &(pos, tok) in &step.newly_decoded {
                replay.tokens[pos as usize] = tok;
            }
            if replay != step.x {
                return Err(Error::Contract(format!("step {i}: diff replay mismatch")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [self.l, self.d, self.meta.n, self.vocab_size] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.meta.seed.to_le_bytes())?;
        w.write_all(&self.meta.class_id.to_le_bytes())?;
        w.write_all(&self.meta.guidance_scale.to_le_bytes())?;
        w.write_all(&[match self.meta.schedule {
            ScheduleKind::Cosine => 0u8,
            ScheduleKind::Linear => 1u8,
        }])?;
        w.write_all(&[match self.meta.stream {
            StreamTag::Cond => 0u8,
            StreamTag::Uncond => 1u8,
        }])?;
        w.write_all(&self.meta.base_hash)?;
        for step in &self.steps {
            w.write_all(&step.t.to_le_bytes())?;
            for &tok in &step.x.tokens {
                w.write_all(&tok.to_le_bytes())?;
            }
            for &f in step.features.data() {
                w.write_all(&f.to_le_bytes())?;
            }
            w.write_all(&(step.newly_decoded.len() as u16).to_le_bytes())?;
            for &(pos, tok) in &step.newly_decoded {
                w.write_all(&pos.to_le_bytes())?;
                w.write_all(&tok.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 6];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad trajectory magic {:?}", magic)));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported trajectory version {version}")));
        }
        let l = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let vocab_size = read_u32(&mut r)? as usize;
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let class_id = read_u32(&mut r)?;
        read_exact(&mut r, &mut b8)?;
        let guidance_scale = f64::from_le_bytes(b8);
        let mut b1 = [0u8; 1];
        read_exact(&mut r, &mut b1)?;
        let schedule = match b1[0] {
            0 => ScheduleKind::Cosine,
            1 => ScheduleKind::Linear,
            k => return Err(Error::Format(format!("unknown schedule tag {k}"))),
        };
        read_exact(&mut r, &mut b1)?;
        let stream = match b1[0] {
            0 => StreamTag::Cond,
            1 => StreamTag::Uncond,
            k => return Err(Error::Format(format!("unknown stream tag {k}"))),
        };
        let mut base_hash = [0u8; 32];
        read_exact(&mut r, &mut base_hash)?;

        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            read_exact(&mut r, &mut b8)?;
            let t = f64::from_le_bytes(b8);
            let mut tokens = Vec::with_capacity(l);
            let mut b2 = [0u8; 2];
            for _ in 0..l {
                read_exact(&mut r, &mut b2)?;
                tokens.push(u16::from_le_bytes(b2));
            }
            let mut features = Vec::with_capacity(l * d);
            let mut b4 = [0u8; 4];
            for _ in 0..l * d {
                read_exact(&mut r, &mut b4)?;
                features.push(f32::from_le_bytes(b4));
            }
            read_exact(&mut r, &mut b2)?;
            let diff_count = u16::from_le_bytes(b2) as usize;
            let mut newly_decoded = Vec::with_capacity(diff_count);
            for _ in 0..diff_count {
                read_exact(&mut r, &mut b2)?;
                let pos = u16::from_le_bytes(b2);
                read_exact(&mut r, &mut b2)?;
                newly_decoded.push((pos, u16::from_le_bytes(b2)));
            }
            steps.push(StepRecord {
                t,
                x: TokenSequence { tokens },
                newly_decoded,
                features: Tensor::new(vec![l, d], features)?,
            });
        }
        Ok(Self {
            meta: TrajectoryMeta {
                seed,
                class_id,
                n,
                guidance_scale,
                schedule,
                stream,
                base_hash,
            },
            l,
            d,
            vocab_size,
            steps,
        })
    }

    /// Exact serialized size in bytes, per the documented layout.
    pub fn file_size(&self) -> usize {
        let header = 6 + 4 + 4 * 4 + 8 + 4 + 8 + 1 + 1 + 32;
        let steps: usize = self
            .steps
            .iter()
            .map(|s| 8 + 2 * self.l + 4 * self.l * self.d + 2 + 4 * s.newly_decoded.len())
            .sum();
        header + steps
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Corruption("trajectory file truncated".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Line-oriented corpus index: one `path<TAB>seed<TAB>class<TAB>stream`
/// entry per trajectory file, paths relative to the manifest.
#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub seed: u64,
    pub class_id: u32,
    pub stream: StreamTag,
}

impl Manifest {
    pub fn push(&mut self, path: PathBuf, record: &TrajectoryRecord) {
        self.entries.push(ManifestEntry {
            path,
            seed: record.meta.seed,
            class_id: record.meta.class_id,
            stream: record.meta.stream,
        });
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.entries {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                e.path.display(),
                e.seed,
                e.class_id,
                e.stream.name()
            )?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!("manifest line {}: expected 4 fields", ln + 1)));
            }
            let stream = match parts[3] {
                "cond" => StreamTag::Cond,
                "uncond" => StreamTag::Uncond,
                s => return Err(Error::Format(format!("manifest line {}: stream '{s}'", ln + 1))),
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(parts[0]),
                seed: parts[1]
                    .parse()
                    .map_err(|_| Error::Format(format!("manifest line {}: seed", ln + 1)))?,
                class_id: parts[2]
                    .parse()
                    .map_err(|_| Error::Format(format!("manifest line {}: class", ln + 1)))?,
                stream,
            });
        }
        Ok(Self { entries })
    }

    /// Load every referenced trajectory, resolving relative paths against
    /// the manifest's directory.
    pub fn load_records(&self, manifest_path: &Path) -> Result<Vec<TrajectoryRecord>> {
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        self.entries.iter().map(|e| TrajectoryRecord::load(&dir.join(&e.path))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    pub(crate) fn random_record(seed: u64, l: usize, d: usize, n: usize) -> TrajectoryRecord {
        let vocab = Vocabulary::new(4);
        let mut rng = CounterRng::new(seed);
        let schedule = crate::migm::MaskSchedule::cosine();
        let mut x = TokenSequence::all_masked(l, vocab);
        let mut steps = Vec::new();
        for i in 1..=n {
            let k = crate::migm::unmask_count(schedule, l, i, n);
            let masked = x.masked_positions(vocab);
            let mut order = masked.clone();
            rng.shuffle(&mut order);
            let mut next = x.clone();
            let mut diff = Vec::new();
            for &pos in order.iter().take(k) {
                let tok = (rng.next_u64() % 4) as u16;
                next.tokens[pos] = tok;
                diff.push((pos as u16, tok));
            }
            diff.sort_by_key(|&(p, _)| p);
            let features = Tensor::new(
                vec![l, d],
                (0..l * d).map(|_| rng.normal() as f32).collect(),
            )
            .unwrap();
            steps.push(StepRecord { t: i as f64 / n as f64, x: next.clone(), newly_decoded: diff, features });
            x = next;
        }
        TrajectoryRecord {
            meta: TrajectoryMeta {
                seed,
                class_id: (seed % 3) as u32,
                n,
                guidance_scale: 0.0,
                schedule: ScheduleKind::Cosine,
                stream: StreamTag::Cond,
                base_hash: [7u8; 32],
            },
            l,
            d,
            vocab_size: 4,
            steps,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rec = random_record(3, 9, 5, 4);
        rec.validate().unwrap();
        let path = dir.path().join("r.mstrj");
        rec.save(&path).unwrap();
        let loaded = TrajectoryRecord::load(&path).unwrap();
        assert_eq!(loaded, rec);
    }

    #[test]
    fn file_size_matches_documented_layout() {
        let dir = tempfile::tempdir().unwrap();
        let rec = random_record(5, 16, 8, 6);
        let path = dir.path().join("r.mstrj");
        rec.save(&path).unwrap();
        let on_disk = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(on_disk, rec.file_size());
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mstrj");
        std::fs::write(&path, b"WRONG!abcdefgh").unwrap();
        assert!(matches!(TrajectoryRecord::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let rec = random_record(8, 4, 3, 3);
        let path = dir.path().join("r.mstrj");
        rec.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(TrajectoryRecord::load(&path), Err(Error::Corruption(_))));
    }

    #[test]
    fn n_step_record_yields_n_minus_one_pairs() {
        let rec = random_record(1, 4, 3, 5);
        assert_eq!(rec.pair_samples().len(), 4);
        let single = random_record(1, 4, 3, 1);
        assert_eq!(single.pair_samples().len(), 0);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = random_record(2, 4, 3, 3);
        let rpath = dir.path().join("a.mstrj");
        rec.save(&rpath).unwrap();
        let mut m = Manifest::default();
        m.push(PathBuf::from("a.mstrj"), &rec);
        let mpath = dir.path().join("manifest.tsv");
        m.save(&mpath).unwrap();
        let loaded = Manifest::load(&mpath).unwrap();
        assert_eq!(loaded.entries.len(), 1);
        let records = loaded.load_records(&mpath).unwrap();
        assert_eq!(records[0], rec);
    }

    #[test]
    fn validate_rejects_corrupted_diff() {
        let mut rec = random_record(4, 4, 3, 3);
        rec.steps[1].newly_decoded[0].1 ^= 1;
        assert!(rec.validate().is_err());
    }
}
