//! The online-learning data stream.
//!
//! A stream is a sequence of utterance batches. Batch `i` introduces `S_i`
//! new speakers and keeps `R_ij = ⌊S_j / 2^(i−j)⌋` speakers from the cohort
//! that first appeared in each earlier batch `j`, so batch `i` has
//! `N_i = Σ_{j<i} R_ij + S_i` speakers.
//!
//! Speakers are synthetic: every frame is the class mean of its token plus
//! a per-speaker offset plus Gaussian noise. Offsets of later cohorts drift
//! linearly along a fixed unit direction, which is what makes the
//! population shift over the stream. Dev, test and probe speakers come
//! from disjoint id ranges and never appear in a training roster.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{FrameBatch, Matrix};
use crate::seed;

/// New speakers per batch used by the reference 10-batch schedule.
pub const PUBLISHED_NEW_SPEAKERS: [u32; 10] = [56, 28, 28, 28, 28, 30, 31, 33, 31, 39];
/// Per-batch speaker totals as published alongside that schedule. Batches 5
/// and later do not all agree with the retention formula.
pub const PUBLISHED_TOTALS: [u32; 10] = [56, 56, 56, 56, 56, 58, 59, 61, 59, 67];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeakerId(pub u32);

impl std::fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "spk{:07}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub new_speakers: Vec<u32>,
}

impl ScheduleSpec {
    pub fn new(new_speakers: Vec<u32>) -> Result<ScheduleSpec> {
        let spec = ScheduleSpec { new_speakers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.new_speakers.is_empty() {
            return Err(Error::Config("schedule needs at least one batch".into()));
        }
        if let Some(i) = self.new_speakers.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("batch {} introduces zero new speakers", i + 1)));
        }
        Ok(())
    }

    pub fn num_batches(&self) -> usize {
        self.new_speakers.len()
    }

    /// `S_j` for 1-based batch `j`.
    pub fn new_in(&self, j: usize) -> u32 {
        self.new_speakers[j - 1]
    }

    /// `N_i` for 1-based batch `i`.
    pub fn total_speakers(&self, i: usize) -> u32 {
        (1..i).map(|j| retention_unchecked(self, i, j)).sum::<u32>() + self.new_in(i)
    }
}

/// A named schedule together with any warnings raised while loading it.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetLoad {
    pub spec: ScheduleSpec,
    pub warnings: Vec<String>,
}

/// Load a named schedule preset. The `published` preset warns for every batch
/// whose retention-formula total differs from the published total.
pub fn load_preset(name: &str) -> Result<PresetLoad> {
    match name {
        "published" => {
            let spec = ScheduleSpec::new(PUBLISHED_NEW_SPEAKERS.to_vec())?;
            let warnings: Vec<String> = (1..=spec.num_batches())
                .filter_map(|i| {
                    let computed = spec.total_speakers(i);
                    let published = PUBLISHED_TOTALS[i - 1];
                    (computed != published).then(|| {
                        format!(
                            "batch {i}: retention formula gives {computed} speakers, published table lists {published}; using {computed}"
                        )
                    })
                })
                .collect();
            for w in &warnings {
                log::warn!("{w}");
            }
            Ok(PresetLoad { spec, warnings })
        }
        other => Err(Error::Config(format!("unknown schedule preset {other:?}"))),
    }
}

fn retention_unchecked(spec: &ScheduleSpec, i: usize, j: usize) -> u32 {
    let shift = i - j;
    if shift >= 32 {
        0
    } else {
        spec.new_in(j) >> shift
    }
}

/// `R_ij = ⌊S_j · (1/2)^(i−j)⌋` for 1-based batches `1 ≤ j < i ≤ B`.
pub fn retention(spec: &ScheduleSpec, i: usize, j: usize) -> Result<u32> {
    let b = spec.num_batches();
    if j == 0 || j >= i || i > b {
        return Err(Error::Domain(format!(
            "retention needs 1 <= j < i <= {b}, got i={i}, j={j}"
        )));
    }
    Ok(retention_unchecked(spec, i, j))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    pub batch_index: usize,
    pub members: Vec<SpeakerId>,
    /// `R_ij` for `j = 1..i−1`.
    pub retained_counts: Vec<u32>,
    pub new_speakers: Vec<SpeakerId>,
}

impl Roster {
    pub fn total(&self) -> usize {
        self.members.len()
    }
}

/// First training speaker id of each cohort (1-based index into the result).
fn cohort_ids(spec: &ScheduleSpec) -> Vec<Vec<SpeakerId>> {
    let mut next = 0u32;
    spec.new_speakers
        .iter()
        .map(|&s| {
            let ids = (next..next + s).map(SpeakerId).collect();
            next += s;
            ids
        })
        .collect()
}

/// Speaker rosters for every batch.
///
/// Each cohort gets one seeded random ordering of its speakers; batch `i`
/// keeps the first `R_ij` of cohort `j`'s ordering. Retained sets therefore
/// shrink as nested subsets, and each retained speaker counts only toward
/// its own cohort.
pub fn build_rosters(spec: &ScheduleSpec, seed: u64) -> Vec<Roster> {
    let cohorts = cohort_ids(spec);
    let orders: Vec<Vec<SpeakerId>> = cohorts
        .iter()
        .enumerate()
        .map(|(j, ids)| {
            let mut order = ids.clone();
            let mut rng = seed::rng(seed::derive(seed, "retain", j as u64 + 1));
            order.shuffle(&mut rng);
            order
        })
        .collect();
    (1..=spec.num_batches())
        .map(|i| {
            let mut members = Vec::new();
            let mut retained_counts = Vec::with_capacity(i - 1);
            for j in 1..i {
                let r = retention_unchecked(spec, i, j);
                retained_counts.push(r);
                members.extend_from_slice(&orders[j - 1][..r as usize]);
            }
            let fresh = cohorts[i - 1].clone();
            members.extend_from_slice(&fresh);
            Roster {
                batch_index: i,
                members,
                retained_counts,
                new_speakers: fresh,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub input_dim: usize,
    pub vocab_size: usize,
    /// Per-dimension standard deviation of class means around the origin.
    pub class_mean_scale: f64,
    pub sigma_speaker: f64,
    pub sigma_noise: f64,
    /// Offset shift per cohort along the drift direction.
    pub drift_rate: f64,
    pub utterances_per_batch: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    /// Held-out utterances from cohort-1 speakers, for measuring forgetting.
    pub probe_utterances: usize,
    /// Drift-free cohort-0 utterances used to warm-start the model.
    pub pretrain_utterances: usize,
    pub dev_speakers: usize,
    pub test_speakers: usize,
    pub probe_speakers: usize,
    pub pretrain_speakers: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// 1-based training batches whose reference labels are replaced by noise.
    pub corrupt_batches: Vec<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            input_dim: 16,
            vocab_size: 32,
            class_mean_scale: 1.0,
            sigma_speaker: 0.5,
            sigma_noise: 0.8,
            drift_rate: 0.25,
            utterances_per_batch: 600,
            dev_utterances: 300,
            test_utterances: 300,
            probe_utterances: 200,
            pretrain_utterances: 600,
            dev_speakers: 40,
            test_speakers: 40,
            probe_speakers: 10,
            pretrain_speakers: 40,
            min_frames: 5,
            max_frames: 60,
            corrupt_batches: Vec::new(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self, num_batches: usize) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("vocab_size", self.vocab_size),
            ("utterances_per_batch", self.utterances_per_batch),
            ("dev_utterances", self.dev_utterances),
            ("test_utterances", self.test_utterances),
            ("dev_speakers", self.dev_speakers),
            ("test_speakers", self.test_speakers),
            ("min_frames", self.min_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.probe_utterances > 0 && self.probe_speakers == 0 {
            return Err(Error::Config("probe utterances need probe speakers".into()));
        }
        if self.pretrain_utterances > 0 && self.pretrain_speakers == 0 {
            return Err(Error::Config("pretrain utterances need pretrain speakers".into()));
        }
        if self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "min_frames {} exceeds max_frames {}",
                self.min_frames, self.max_frames
            )));
        }
        for (name, v) in [
            ("class_mean_scale", self.class_mean_scale),
            ("sigma_speaker", self.sigma_speaker),
            ("sigma_noise", self.sigma_noise),
            ("drift_rate", self.drift_rate),
        ] {
            if !v.is_finite() || (name != "drift_rate" && v < 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if let Some(b) = self.corrupt_batches.iter().find(|&&b| b == 0 || b > num_batches) {
            return Err(Error::Config(format!("corrupt batch {b} outside 1..={num_batches}")));
        }
        Ok(())
    }
}

/// Corpus-wide constants: class means and the drift direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusGeometry {
    pub class_means: Vec<Vec<f64>>,
    pub drift_direction: Vec<f64>,
}

impl CorpusGeometry {
    pub fn generate(cfg: &GenConfig, seed: u64) -> CorpusGeometry {
        let mut rng = seed::rng(seed::derive(seed, "geometry", 0));
        let class_means = (0..cfg.vocab_size)
            .map(|_| gaussian_vec(&mut rng, cfg.input_dim, cfg.class_mean_scale))
            .collect();
        let mut u = gaussian_vec(&mut rng, cfg.input_dim, 1.0);
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut u {
                *x /= norm;
            }
        } else {
            u[0] = 1.0;
        }
        CorpusGeometry {
            class_means,
            drift_direction: u,
        }
    }
}

fn gaussian_vec(rng: &mut seed::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub id: SpeakerId,
    pub cohort: usize,
    pub offset: Vec<f64>,
    pub drift_scale: f64,
}

/// Offset ~ Normal(drift_rate · cohort · u, σ_spk² I).
pub fn synth_speaker(
    id: SpeakerId,
    cohort: usize,
    geometry: &CorpusGeometry,
    cfg: &GenConfig,
    seed: u64,
) -> SpeakerProfile {
    let mut rng = seed::rng(seed);
    let drift_scale = cfg.drift_rate * cohort as f64;
    let offset = geometry
        .drift_direction
        .iter()
        .map(|u| drift_scale * u + cfg.sigma_speaker * rng.sample::<f64, _>(StandardNormal))
        .collect();
    SpeakerProfile {
        id,
        cohort,
        offset,
        drift_scale,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub speaker: SpeakerId,
    pub cohort: usize,
    pub frames: Matrix,
    pub reference: Vec<usize>,
}

impl Utterance {
    pub fn duration_frames(&self) -> usize {
        self.reference.len()
    }
}

/// Frames are `class_mean[token] + speaker offset + Normal(0, σ_noise²)`.
pub fn synth_utterance(
    id: u64,
    profile: &SpeakerProfile,
    geometry: &CorpusGeometry,
    cfg: &GenConfig,
    seed: u64,
) -> Utterance {
    let mut rng = seed::rng(seed);
    let n = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let reference: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let mut data = Vec::with_capacity(n * cfg.input_dim);
    for &tok in &reference {
        for (m, o) in geometry.class_means[tok].iter().zip(&profile.offset) {
            data.push(m + o + cfg.sigma_noise * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Utterance {
        id,
        speaker: profile.id,
        cohort: profile.cohort,
        frames: Matrix::new(n, cfg.input_dim, data).expect("sized above"),
        reference,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub roster: Roster,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStream {
    pub seed: u64,
    pub schedule: ScheduleSpec,
    pub gen: GenConfig,
    pub batches: Vec<StreamBatch>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub probe: Vec<Utterance>,
    pub pretrain: Vec<Utterance>,
}

const DEV_ID_BASE: u32 = 1_000_000;
const TEST_ID_BASE: u32 = 2_000_000;
const PROBE_ID_BASE: u32 = 3_000_000;
const PRETRAIN_ID_BASE: u32 = 4_000_000;

struct Generator<'a> {
    cfg: &'a GenConfig,
    geometry: CorpusGeometry,
    seed: u64,
    next_utterance: u64,
}

impl Generator<'_> {
    fn speaker(&self, id: SpeakerId, cohort: usize) -> SpeakerProfile {
        let s = seed::derive(self.seed, "speaker", u64::from(id.0));
        synth_speaker(id, cohort, &self.geometry, self.cfg, s)
    }

    fn utterance(&mut self, profile: &SpeakerProfile) -> Utterance {
        let id = self.next_utterance;
        self.next_utterance += 1;
        let s = seed::derive(self.seed, "utterance", id);
        synth_utterance(id, profile, &self.geometry, self.cfg, s)
    }

    /// `count` utterances spread round-robin over `speakers`.
    fn round_robin(&mut self, speakers: &[SpeakerProfile], count: usize) -> Vec<Utterance> {
        (0..count)
            .map(|k| {
                let p = &speakers[k % speakers.len()];
                self.utterance(p)
            })
            .collect()
    }

    /// Held-out speakers whose cohorts cycle through `1..=batches`.
    fn held_out(&self, base: u32, count: usize, cohort: impl Fn(usize) -> usize) -> Vec<SpeakerProfile> {
        (0..count)
            .map(|k| self.speaker(SpeakerId(base + k as u32), cohort(k)))
            .collect()
    }
}

/// Generate a full stream. Deterministic in `(spec, cfg, seed)`.
pub fn build_stream(spec: &ScheduleSpec, cfg: &GenConfig, seed: u64) -> Result<CorpusStream> {
    spec.validate()?;
    cfg.validate(spec.num_batches())?;
    let rosters = build_rosters(spec, seed);
    let mut cohort_of = std::collections::HashMap::new();
    for r in &rosters {
        for id in &r.new_speakers {
            cohort_of.insert(*id, r.batch_index);
        }
    }
    let mut gen = Generator {
        cfg,
        geometry: CorpusGeometry::generate(cfg, seed),
        seed,
        next_utterance: 0,
    };

    let mut batches = Vec::with_capacity(rosters.len());
    for roster in rosters {
        let profiles: Vec<SpeakerProfile> = roster
            .members
            .iter()
            .map(|id| gen.speaker(*id, cohort_of[id]))
            .collect();
        let mut utterances = gen.round_robin(&profiles, cfg.utterances_per_batch);
        if cfg.corrupt_batches.contains(&roster.batch_index) {
            for u in &mut utterances {
                let mut rng = seed::rng(seed::derive(seed, "corrupt", u.id));
                for t in &mut u.reference {
                    *t = rng.random_range(0..cfg.vocab_size);
                }
            }
        }
        batches.push(StreamBatch { roster, utterances });
    }

    let b = spec.num_batches();
    let dev_spk = gen.held_out(DEV_ID_BASE, cfg.dev_speakers, |k| 1 + k % b);
    let dev = gen.round_robin(&dev_spk, cfg.dev_utterances);
    let test_spk = gen.held_out(TEST_ID_BASE, cfg.test_speakers, |k| 1 + k % b);
    let test = gen.round_robin(&test_spk, cfg.test_utterances);
    let probe = if cfg.probe_utterances > 0 {
        let spk = gen.held_out(PROBE_ID_BASE, cfg.probe_speakers, |_| 1);
        gen.round_robin(&spk, cfg.probe_utterances)
    } else {
        Vec::new()
    };
    let pretrain = if cfg.pretrain_utterances > 0 {
        let spk = gen.held_out(PRETRAIN_ID_BASE, cfg.pretrain_speakers, |_| 0);
        gen.round_robin(&spk, cfg.pretrain_utterances)
    } else {
        Vec::new()
    };

    Ok(CorpusStream {
        seed,
        schedule: spec.clone(),
        gen: cfg.clone(),
        batches,
        dev,
        test,
        probe,
        pretrain,
    })
}

impl CorpusStream {
    pub fn training_speakers(&self) -> BTreeSet<SpeakerId> {
        self.batches
            .iter()
            .flat_map(|b| b.roster.members.iter().copied())
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.gen.input_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.gen.vocab_size
    }
}

fn speakers_of(utts: &[Utterance]) -> BTreeSet<SpeakerId> {
    utts.iter().map(|u| u.speaker).collect()
}

/// Checks that dev, test and training speakers never overlap.
pub fn check_speaker_disjointness(stream: &CorpusStream) -> Result<()> {
    let train = stream.training_speakers();
    let dev = speakers_of(&stream.dev);
    let test = speakers_of(&stream.test);
    let probe = speakers_of(&stream.probe);
    let pairs = [
        ("train/dev", &train, &dev),
        ("train/test", &train, &test),
        ("dev/test", &dev, &test),
        ("train/probe", &train, &probe),
        ("dev/probe", &dev, &probe),
        ("test/probe", &test, &probe),
    ];
    for (name, a, b) in pairs {
        if let Some(s) = a.intersection(b).next() {
            return Err(Error::State(format!("{name} speaker overlap: {s}")));
        }
    }
    Ok(())
}

/// Concatenate utterance frames and references into one training batch.
pub fn frames_of<'a>(dim: usize, utts: impl IntoIterator<Item = &'a Utterance>) -> Result<FrameBatch> {
    let utts: Vec<&Utterance> = utts.into_iter().collect();
    let features = Matrix::vstack(dim, utts.iter().map(|u| &u.frames))?;
    let labels = utts.iter().flat_map(|u| u.reference.iter().copied()).collect();
    FrameBatch::new(features, labels)
}

// ---------------------------------------------------------------------------
// Manifest + frame sidecar.

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.bin";
const MANIFEST_FORMAT: &str = "driftlearn-stream";
const MANIFEST_VERSION: u32 = 1;
const FRAMES_MAGIC: [u8; 4] = *b"DLFM";
const FRAMES_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceEntry {
    id: u64,
    speaker: SpeakerId,
    cohort: usize,
    frame_offset: u64,
    n_frames: usize,
    reference: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchEntry {
    roster: Roster,
    utterances: Vec<UtteranceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    schedule: ScheduleSpec,
    gen: GenConfig,
    frames_file: String,
    total_frames: u64,
    batches: Vec<BatchEntry>,
    dev: Vec<UtteranceEntry>,
    test: Vec<UtteranceEntry>,
    probe: Vec<UtteranceEntry>,
    pretrain: Vec<UtteranceEntry>,
}

/// Write `manifest.json` and `frames.bin` into `dir`.
pub fn export_stream(stream: &CorpusStream, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dim = stream.input_dim();
    let mut frames: Vec<f64> = Vec::new();
    let mut entries = |utts: &[Utterance]| -> Vec<UtteranceEntry> {
        utts.iter()
            .map(|u| {
                let offset = (frames.len() / dim) as u64;
                frames.extend_from_slice(u.frames.data());
                UtteranceEntry {
                    id: u.id,
                    speaker: u.speaker,
                    cohort: u.cohort,
                    frame_offset: offset,
                    n_frames: u.frames.rows(),
                    reference: u.reference.clone(),
                }
            })
            .collect()
    };
    let batches = stream
        .batches
        .iter()
        .map(|b| BatchEntry {
            roster: b.roster.clone(),
            utterances: entries(&b.utterances),
        })
        .collect();
    let dev = entries(&stream.dev);
    let test = entries(&stream.test);
    let probe = entries(&stream.probe);
    let pretrain = entries(&stream.pretrain);
    let rows = frames.len() / dim;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        seed: stream.seed,
        schedule: stream.schedule.clone(),
        gen: stream.gen.clone(),
        frames_file: FRAMES_FILE.into(),
        total_frames: rows as u64,
        batches,
        dev,
        test,
        probe,
        pretrain,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encoding: {e}")))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    write_frames(&dir.join(FRAMES_FILE), rows, dim, &frames)
}

/// Little-endian frame matrix with a 16-byte header: magic, version, rows, cols.
pub fn write_frames(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit the frame header")))
    };
    let mut buf = Vec::with_capacity(16 + data.len() * 8);
    buf.extend_from_slice(&FRAMES_MAGIC);
    buf.extend_from_slice(&FRAMES_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(rows, "rows")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(cols, "cols")?.to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || bytes[..4] != FRAMES_MAGIC {
        return Err(Error::Format(format!("{}: not a frame file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FRAMES_VERSION {
        return Err(Error::Format(format!("{}: unsupported frame file version {version}", path.display())));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let body = &bytes[16..];
    if body.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "{}: header says {rows}x{cols} but body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::new(rows, cols, data)
}

/// Read a stream previously written by [`export_stream`].
pub fn import_stream(dir: &Path) -> Result<CorpusStream> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported manifest {} v{}",
            mpath.display(),
            manifest.format,
            manifest.version
        )));
    }
    let frames = read_frames(&dir.join(&manifest.frames_file))?;
    let dim = manifest.gen.input_dim;
    if frames.cols() != dim || frames.rows() as u64 != manifest.total_frames {
        return Err(Error::Format(format!(
            "frame file is {}x{}, manifest expects {}x{dim}",
            frames.rows(),
            frames.cols(),
            manifest.total_frames
        )));
    }
    let rebuild = |entries: Vec<UtteranceEntry>| -> Result<Vec<Utterance>> {
        entries
            .into_iter()
            .map(|e| {
                let start = e.frame_offset as usize;
                let end = start + e.n_frames;
                if end > frames.rows() || e.reference.len() != e.n_frames {
                    return Err(Error::Format(format!("utterance {} has an inconsistent frame range", e.id)));
                }
                let data = frames.data()[start * dim..end * dim].to_vec();
                Ok(Utterance {
                    id: e.id,
                    speaker: e.speaker,
                    cohort: e.cohort,
                    frames: Matrix::new(e.n_frames, dim, data)?,
                    reference: e.reference,
                })
            })
            .collect()
    };
    let mut batches = Vec::with_capacity(manifest.batches.len());
    for b in manifest.batches {
        batches.push(StreamBatch {
            roster: b.roster,
            utterances: rebuild(b.utterances)?,
        });
    }
    Ok(CorpusStream {
        seed: manifest.seed,
        schedule: manifest.schedule,
        gen: manifest.gen,
        batches,
        dev: rebuild(manifest.dev)?,
        test: rebuild(manifest.test)?,
        probe: rebuild(manifest.probe)?,
        pretrain: rebuild(manifest.pretrain)?,
    })
}

/// Where a schedule comes from in a config file: a named preset or an explicit list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_speakers: Option<Vec<u32>>,
}

impl Default for ScheduleSource {
    fn default() -> Self {
        ScheduleSource {
            preset: Some("published".into()),
            new_speakers: None,
        }
    }
}

impl ScheduleSource {
    pub fn resolve(&self) -> Result<PresetLoad> {
        match (&self.preset, &self.new_speakers) {
            (Some(name), None) => load_preset(name),
            (None, Some(s)) => Ok(PresetLoad {
                spec: ScheduleSpec::new(s.clone())?,
                warnings: Vec::new(),
            }),
            _ => Err(Error::Config(
                "schedule needs exactly one of `preset` or `new_speakers`".into(),
            )),
        }
    }
}

/// Contents of a stream specification file (`driftlearn gen --spec`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpecFile {
    #[serde(default)]
    pub schedule: ScheduleSource,
    #[serde(default)]
    pub gen: GenConfig,
}

impl StreamSpecFile {
    pub fn from_toml(text: &str) -> Result<StreamSpecFile> {
        toml::from_str(text).map_err(|e| Error::Config(format!("stream spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<StreamSpecFile> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        StreamSpecFile::from_toml(&text)
    }
}
