//! Seeded synthetic audio-visual clips with controllable complementarity and
//! burst corruption, sub-sequence windowing and on-disk feature files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numcore::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptTarget {
    Audio,
    Visual,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_videos: usize,
    pub frames: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    pub latent_dim: usize,
    /// Time constant (frames) of the AR(1) low-pass applied to the latent noise.
    pub smoothness: f64,
    pub noise_std: f64,
    /// Fraction of latent dimensions seen by both modalities.
    pub complementarity: f64,
    /// Probability that a corruption region is replaced by noise.
    pub corruption_prob: f64,
    /// Mean length of a corruption region in frames.
    pub burst_length: f64,
    pub corrupt: CorruptTarget,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_videos: 24,
            frames: 192,
            d_audio: 16,
            d_visual: 16,
            latent_dim: 8,
            smoothness: 8.0,
            noise_std: 0.1,
            complementarity: 0.5,
            corruption_prob: 0.0,
            burst_length: 16.0,
            corrupt: CorruptTarget::Audio,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_videos", self.num_videos),
            ("frames", self.frames),
            ("d_audio", self.d_audio),
            ("d_visual", self.d_visual),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("gen.{name} must be at least 1")));
            }
        }
        if !(self.smoothness > 0.0) || !self.smoothness.is_finite() {
            return Err(Error::config("gen.smoothness must be positive"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config("gen.noise_std must be non-negative"));
        }
        for (name, v) in [("complementarity", self.complementarity), ("corruption_prob", self.corruption_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("gen.{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.burst_length >= 1.0) || !self.burst_length.is_finite() {
            return Err(Error::config("gen.burst_length must be at least 1"));
        }
        Ok(())
    }

    /// Latent indices observed by the audio and visual streams. The first
    /// `round(ρ·K)` dimensions are shared; the rest alternate between the
    /// two modalities.
    pub fn latent_split(&self) -> (Vec<usize>, Vec<usize>) {
        let k = self.latent_dim;
        let shared = ((self.complementarity * k as f64).round() as usize).min(k);
        let mut audio: Vec<usize> = (0..shared).collect();
        let mut visual = audio.clone();
        for (n, i) in (shared..k).enumerate() {
            if n % 2 == 0 {
                audio.push(i);
            } else {
                visual.push(i);
            }
        }
        (audio, visual)
    }
}

/// One clip (or one window of a clip).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    /// `d_a × L`.
    pub audio: Matrix,
    /// `d_v × L`.
    pub visual: Matrix,
    pub valence: Vec<f64>,
    pub arousal: Vec<f64>,
    /// False for zero-padded frames.
    pub valid: Vec<bool>,
    pub corrupt_audio: Vec<bool>,
    pub corrupt_visual: Vec<bool>,
}

impl LabeledClip {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn labels(&self, target: crate::model::Target) -> &[f64] {
        match target {
            crate::model::Target::Arousal => &self.arousal,
            _ => &self.valence,
        }
    }
}

/// Readout and mixing matrices shared by every clip of a dataset.
struct Generator {
    readout_valence: Vec<f64>,
    readout_arousal: Vec<f64>,
    mix_audio: Matrix,
    mix_visual: Matrix,
    latent_audio: Vec<usize>,
    latent_visual: Vec<usize>,
}

/// SplitMix64 finaliser, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of clip `index` under `master`.
pub fn clip_seed(master: u64, index: usize) -> u64 {
    mix_seed(master, index as u64 + 1)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn l1_readout(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| normal(rng)).collect();
    let norm: f64 = raw.iter().map(|v| v.abs()).sum::<f64>().max(1e-12);
    raw.into_iter().map(|v| v / norm).collect()
}

fn mixing(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let scale = 1.0 / (k.max(1) as f64).sqrt();
    Matrix::from_fn(d, k, |_, _| normal(rng) * scale)
}

/// Rounds to the nearest `f32` so that stored features round-trip exactly.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

impl Generator {
    fn new(cfg: &GenConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0));
        let (latent_audio, latent_visual) = cfg.latent_split();
        Self {
            readout_valence: l1_readout(cfg.latent_dim, &mut rng),
            readout_arousal: l1_readout(cfg.latent_dim, &mut rng),
            mix_audio: mixing(cfg.d_audio, latent_audio.len(), &mut rng),
            mix_visual: mixing(cfg.d_visual, latent_visual.len(), &mut rng),
            latent_audio,
            latent_visual,
        }
    }

    fn clip(&self, cfg: &GenConfig, index: usize) -> LabeledClip {
        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.seed, index));
        let (k, l) = (cfg.latent_dim, cfg.frames);

        let a = (-1.0 / cfg.smoothness).exp();
        let innov = (1.0 - a * a).sqrt();
        let mut z = Matrix::zeros(k, l);
        for i in 0..k {
            let mut s = normal(&mut rng);
            for t in 0..l {
                if t > 0 {
                    s = a * s + innov * normal(&mut rng);
                }
                z.set(i, t, s.tanh());
            }
        }
        let readout = |w: &[f64]| -> Vec<f64> {
            (0..l).map(|t| w.iter().enumerate().map(|(i, &wi)| wi * z.get(i, t)).sum::<f64>().clamp(-1.0, 1.0)).collect()
        };
        let valence = readout(&self.readout_valence);
        let arousal = readout(&self.readout_arousal);

        let observe = |mix: &Matrix, dims: &[usize], rng: &mut ChaCha8Rng| -> Matrix {
            let mut x = Matrix::zeros(mix.rows(), l);
            for r in 0..mix.rows() {
                for t in 0..l {
                    let clean: f64 = dims.iter().enumerate().map(|(j, &i)| mix.get(r, j) * z.get(i, t)).sum();
                    x.set(r, t, clean + cfg.noise_std * normal(rng));
                }
            }
            x
        };
        let mut audio = observe(&self.mix_audio, &self.latent_audio, &mut rng);
        let mut visual = observe(&self.mix_visual, &self.latent_visual, &mut rng);

        let corrupt_audio = matches!(cfg.corrupt, CorruptTarget::Audio | CorruptTarget::Both);
        let corrupt_visual = matches!(cfg.corrupt, CorruptTarget::Visual | CorruptTarget::Both);
        let mask_a = if corrupt_audio { corrupt(&mut audio, cfg, &mut rng) } else { vec![false; l] };
        let mask_v = if corrupt_visual { corrupt(&mut visual, cfg, &mut rng) } else { vec![false; l] };

        LabeledClip {
            id: format!("clip{index:04}"),
            audio: audio.map(f32_exact),
            visual: visual.map(f32_exact),
            valence: valence.into_iter().map(f32_exact).collect(),
            arousal: arousal.into_iter().map(f32_exact).collect(),
            valid: vec![true; l],
            corrupt_audio: mask_a,
            corrupt_visual: mask_v,
        }
    }
}

/// Splits the frames into regions with geometric lengths (mean
/// `burst_length`) and replaces each region, with probability `p`, by white
/// noise whose per-row variance matches the clean features.
fn corrupt(x: &mut Matrix, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let l = x.cols();
    let mut mask = vec![false; l];
    if cfg.corruption_prob == 0.0 {
        return mask;
    }
    let std: Vec<f64> = (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / l as f64;
            (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l as f64).sqrt()
        })
        .collect();
    let span = Geometric::new(1.0 / cfg.burst_length).expect("burst length validated");
    let mut t = 0;
    while t < l {
        let len = (span.sample(rng) as usize + 1).min(l - t);
        if rng.random::<f64>() < cfg.corruption_prob {
            for (r, &s) in std.iter().enumerate() {
                for c in t..t + len {
                    x.set(r, c, s * normal(rng));
                }
            }
            mask[t..t + len].iter_mut().for_each(|m| *m = true);
        }
        t += len;
    }
    mask
}

/// Generates `num_videos` clips. Each clip uses its own random stream, so
/// clips are generated in parallel without affecting the output.
pub fn generate(cfg: &GenConfig) -> Result<Vec<LabeledClip>> {
    cfg.validate()?;
    let g = Generator::new(cfg);
    Ok((0..cfg.num_videos).into_par_iter().map(|i| g.clip(cfg, i)).collect())
}

/// Window start offsets: `0, stride, 2·stride, …` below `frames`, or a
/// single window when `length > frames`.
pub fn window_starts(frames: usize, length: usize, stride: usize) -> Result<Vec<usize>> {
    if length == 0 || stride == 0 {
        return Err(Error::config("window length and stride must be at least 1"));
    }
    if stride > length {
        return Err(Error::config(format!("window stride {stride} exceeds length {length}; frames would be skipped")));
    }
    if length > frames {
        return Ok(vec![0]);
    }
    Ok((0..frames).step_by(stride).collect())
}

/// Cuts a clip into overlapping windows. Frames past the end are zero and
/// marked invalid.
pub fn window(clip: &LabeledClip, length: usize, stride: usize) -> Result<Vec<LabeledClip>> {
    let n = clip.len();
    let starts = window_starts(n, length, stride)?;
    Ok(starts
        .into_iter()
        .enumerate()
        .map(|(w, s)| {
            let inside = |j: usize| s + j < n;
            let cut = |x: &Matrix| Matrix::from_fn(x.rows(), length, |r, j| if inside(j) { x.get(r, s + j) } else { 0.0 });
            let cut_vec = |v: &[f64]| (0..length).map(|j| if inside(j) { v[s + j] } else { 0.0 }).collect::<Vec<_>>();
            let cut_mask = |v: &[bool]| (0..length).map(|j| inside(j) && v[s + j]).collect::<Vec<_>>();
            LabeledClip {
                id: format!("{}_w{w:03}", clip.id),
                audio: cut(&clip.audio),
                visual: cut(&clip.visual),
                valence: cut_vec(&clip.valence),
                arousal: cut_vec(&clip.arousal),
                valid: cut_mask(&clip.valid),
                corrupt_audio: cut_mask(&clip.corrupt_audio),
                corrupt_visual: cut_mask(&clip.corrupt_visual),
            }
        })
        .collect())
}

const MAGIC: &[u8; 4] = b"AVFS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Writes a `d × L` matrix as AVFS: magic, version, `L`, `d` (u32 LE), then
/// `L × d` frame-major `f32` LE values.
pub fn write_features(path: &Path, x: &Matrix) -> Result<()> {
    let (d, l) = x.shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * d * l);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for t in 0..l {
        for r in 0..d {
            buf.extend_from_slice(&(x.get(r, t) as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an AVFS file back into a `d × L` matrix.
pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(path, &bytes)
}

fn parse_features(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let fail = |offset: usize, message: String| Error::Format { path: path.to_path_buf(), offset: offset as u64, message };
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| fail(bytes.len(), format!("truncated header, expected {HEADER_LEN} bytes")))
    };
    match bytes.get(0..4) {
        Some(m) if m == MAGIC => {}
        Some(_) => return Err(fail(0, "bad magic, expected \"AVFS\"".into())),
        None => return Err(fail(bytes.len(), format!("truncated header, expected {HEADER_LEN} bytes"))),
    }
    let version = u32_at(4)?;
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let l = u32_at(8)? as usize;
    let d = u32_at(12)? as usize;
    let expected = HEADER_LEN + 4 * l * d;
    if bytes.len() != expected {
        let off = bytes.len().min(expected);
        return Err(fail(off, format!("payload is {} bytes, expected {}", bytes.len() - HEADER_LEN, expected - HEADER_LEN)));
    }
    let mut x = Matrix::zeros(d, l);
    for t in 0..l {
        for r in 0..d {
            let off = HEADER_LEN + 4 * (t * d + r);
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(fail(off, "non-finite feature value".into()));
            }
            x.set(r, t, v as f64);
        }
    }
    Ok(x)
}

pub const LABELS_HEADER: [&str; 3] = ["frame", "valence", "arousal"];
pub const MASK_HEADER: [&str; 4] = ["frame", "valid", "corrupt_audio", "corrupt_visual"];
pub const MANIFEST_HEADER: [&str; 6] = ["clip", "seed", "frames", "d_audio", "d_visual", "corrupted_frames"];
pub const MANIFEST_FILE: &str = "manifest.csv";

fn clip_path(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}.{suffix}"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn finish<W: Write>(path: &Path, w: csv::Writer<W>) -> Result<()> {
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

/// Writes `<id>.audio.avfs`, `<id>.visual.avfs`, `<id>.labels.csv` and
/// `<id>.mask.csv` into `dir`.
pub fn write_clip(dir: &Path, clip: &LabeledClip) -> Result<()> {
    write_features(&clip_path(dir, &clip.id, "audio.avfs"), &clip.audio)?;
    write_features(&clip_path(dir, &clip.id, "visual.avfs"), &clip.visual)?;

    let path = clip_path(dir, &clip.id, "labels.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(LABELS_HEADER)?;
    for t in 0..clip.len() {
        w.write_record([t.to_string(), clip.valence[t].to_string(), clip.arousal[t].to_string()])?;
    }
    finish(&path, w)?;

    let path = clip_path(dir, &clip.id, "mask.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(MASK_HEADER)?;
    let bit = |b: bool| if b { "1" } else { "0" };
    for t in 0..clip.len() {
        w.write_record([&t.to_string(), bit(clip.valid[t]), bit(clip.corrupt_audio[t]), bit(clip.corrupt_visual[t])])?;
    }
    finish(&path, w)
}

fn parse_field<F: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<F> {
    let offset = rec.position().map_or(0, |p| p.byte());
    let raw =
        rec.get(i).ok_or_else(|| Error::Format { path: path.to_path_buf(), offset, message: format!("missing column {i}") })?;
    raw.parse().map_err(|_| Error::Format { path: path.to_path_buf(), offset, message: format!("cannot parse {raw:?}") })
}

fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format { path: path.to_path_buf(), offset: 0, message: format!("{other:?}") },
    })?;
    let got = r.headers()?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("expected header {:?}, got {:?}", header.join(","), got.iter().collect::<Vec<_>>().join(",")),
        });
    }
    Ok(r.records().collect::<std::result::Result<_, _>>()?)
}

/// Reads a clip written by [`write_clip`].
pub fn read_clip(dir: &Path, id: &str) -> Result<LabeledClip> {
    let audio = read_features(&clip_path(dir, id, "audio.avfs"))?;
    let visual = read_features(&clip_path(dir, id, "visual.avfs"))?;
    let n = audio.cols();
    let mismatch = |path: PathBuf, what: &str, got: usize| Error::Format {
        path,
        offset: 0,
        message: format!("{what} has {got} frames, audio has {n}"),
    };
    if visual.cols() != n {
        return Err(mismatch(clip_path(dir, id, "visual.avfs"), "visual", visual.cols()));
    }

    let path = clip_path(dir, id, "labels.csv");
    let rows = read_csv(&path, &LABELS_HEADER)?;
    if rows.len() != n {
        return Err(mismatch(path, "labels", rows.len()));
    }
    let mut valence = Vec::with_capacity(n);
    let mut arousal = Vec::with_capacity(n);
    for rec in &rows {
        valence.push(parse_field(&path, rec, 1)?);
        arousal.push(parse_field(&path, rec, 2)?);
    }

    let path = clip_path(dir, id, "mask.csv");
    let rows = read_csv(&path, &MASK_HEADER)?;
    if rows.len() != n {
        return Err(mismatch(path, "mask", rows.len()));
    }
    let mut masks = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for rec in &rows {
        for (k, m) in masks.iter_mut().enumerate() {
            m.push(parse_field::<u8>(&path, rec, k + 1)? != 0);
        }
    }
    let [valid, corrupt_audio, corrupt_visual] = masks;
    Ok(LabeledClip { id: id.to_string(), audio, visual, valence, arousal, valid, corrupt_audio, corrupt_visual })
}

/// Writes every clip plus `manifest.csv` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, cfg: &GenConfig, clips: &[LabeledClip]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in clips {
        write_clip(dir, c)?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(MANIFEST_HEADER)?;
    for (i, c) in clips.iter().enumerate() {
        let corrupted = (0..c.len()).filter(|&t| c.corrupt_audio[t] || c.corrupt_visual[t]).count();
        w.write_record([
            c.id.clone(),
            clip_seed(cfg.seed, i).to_string(),
            c.len().to_string(),
            c.audio.rows().to_string(),
            c.visual.rows().to_string(),
            corrupted.to_string(),
        ])?;
    }
    finish(&path, w)
}

/// Loads every clip listed in `dir/manifest.csv`, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledClip>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::config(format!("{} has no {MANIFEST_FILE}; run `gen` first", dir.display())));
    }
    let rows = read_csv(&path, &MANIFEST_HEADER)?;
    if rows.is_empty() {
        return Err(Error::config(format!("{} lists no clips", path.display())));
    }
    rows.iter()
        .map(|rec| {
            let id: String = parse_field(&path, rec, 0)?;
            read_clip(dir, &id)
        })
        .collect()
}
