//! The synthetic "speechlet" world: each vocabulary token owns a unit-norm
//! signature pattern, a timing track renders to signature frames plus
//! silences, and an oracle aligner recovers (d_i, p_i) from features by
//! per-frame classification and order-constrained DP segmentation. Stands in
//! for a forced aligner at desk scale.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::FeatureSeq;
use crate::frame::FrameRate;
use crate::rng::stream;
use crate::track::{TimingTrack, TokenTiming};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: u32, vocab: usize },
    #[error("could not draw {wanted} signatures with pairwise cosine <= {max_cos} in {attempts} attempts")]
    SignatureDraw {
        wanted: usize,
        max_cos: f64,
        attempts: usize,
    },
    #[error("feature file corrupt: {0}")]
    FeatureFile(String),
    #[error("corpus layout: {0}")]
    CorpusLayout(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Alignment failure is data, not a bug: mirrors forced-alignment failures
/// on degenerate audio.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlignmentFailure {
    #[error("all frames classify as silence")]
    AllSilence,
    #[error("no frames to align against {tokens} tokens")]
    NoFrames { tokens: usize },
    #[error("tokens empty but features non-empty")]
    NoTokens,
    #[error("misclassification rate {misclassified}/{frames} too high for a trustworthy alignment")]
    TooNoisy { misclassified: usize, frames: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct WorldConfig {
    /// Vocabulary size K.
    pub vocab: usize,
    /// Feature channels F.
    pub channels: usize,
    /// Seed the signature set and corpora derive from.
    pub seed: u64,
    /// Observation noise applied at render time.
    pub noise_std: f64,
    /// Per-token content duration prior, frames (inclusive).
    pub dur_min: u32,
    pub dur_max: u32,
    /// Pause prior: probability of a nonzero pause, then uniform frames.
    pub pause_prob: f64,
    pub pause_min: u32,
    pub pause_max: u32,
    /// Utterance length prior, tokens (inclusive).
    pub len_min: usize,
    pub len_max: usize,
    /// Maximum pairwise cosine similarity between signatures.
    pub max_cos: f64,
    /// Frame-energy threshold below which a frame classifies as silence,
    /// as a fraction of the (unit) signature norm.
    pub silence_threshold: f64,
    pub fps: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            vocab: 16,
            channels: 8,
            seed: 1234,
            noise_std: 0.02,
            dur_min: 4,
            dur_max: 24,
            pause_prob: 0.35,
            pause_min: 3,
            pause_max: 26,
            len_min: 3,
            len_max: 5,
            max_cos: 0.3,
            silence_threshold: 0.25,
            fps: 93.75,
        }
    }
}

impl WorldConfig {
    pub fn frame_rate(&self) -> FrameRate {
        FrameRate::new(self.fps).expect("validated fps")
    }
}

/// The vocabulary's unit-norm signature patterns; silence is the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSignatures {
    vectors: Array2<f64>,
}

impl TokenSignatures {
    /// Deterministic draw from the world seed: stream random unit vectors,
    /// keep those whose cosine against every kept one stays at or below the
    /// bound.
    pub fn from_config(cfg: &WorldConfig) -> Result<Self, WorldError> {
        let mut rng = stream(cfg.seed, "signatures", 0);
        let mut kept: Vec<Vec<f64>> = Vec::with_capacity(cfg.vocab);
        let max_attempts = 200_000;
        let mut attempts = 0;
        while kept.len() < cfg.vocab {
            attempts += 1;
            if attempts > max_attempts {
                return Err(WorldError::SignatureDraw {
                    wanted: cfg.vocab,
                    max_cos: cfg.max_cos,
                    attempts,
                });
            }
            let mut v: Vec<f64> = (0..cfg.channels)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let ok = kept.iter().all(|u| {
                let cos: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                cos <= cfg.max_cos
            });
            if ok {
                kept.push(v);
            }
        }
        let mut vectors = Array2::zeros((cfg.vocab, cfg.channels));
        for (i, v) in kept.iter().enumerate() {
            for (j, x) in v.iter().enumerate() {
                vectors[[i, j]] = *x;
            }
        }
        Ok(TokenSignatures { vectors })
    }

    pub fn vocab(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn channels(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn pattern(&self, id: u32) -> ndarray::ArrayView1<'_, f64> {
        self.vectors.row(id as usize)
    }
}

/// Render a track: d_i frames of the token's signature then p_i frames of
/// silence, plus Gaussian observation noise. Total frames equal the track's
/// span.
pub fn render(
    track: &TimingTrack,
    sigs: &TokenSignatures,
    noise_std: f64,
    seed: u64,
) -> Result<FeatureSeq, WorldError> {
    for &tok in &track.tokens {
        if tok as usize >= sigs.vocab() {
            return Err(WorldError::UnknownToken {
                id: tok,
                vocab: sigs.vocab(),
            });
        }
    }
    let total = track.total_span_frames() as usize;
    let channels = sigs.channels();
    let mut rng = stream(seed, "render", 0);
    let mut data = Array2::zeros((total, channels));
    let mut cursor = 0usize;
    for (tok, tim) in track.tokens.iter().zip(&track.timings) {
        for _ in 0..tim.content_frames {
            let mut row = data.row_mut(cursor);
            row.assign(&sigs.pattern(*tok));
            cursor += 1;
        }
        cursor += tim.pause_frames as usize;
    }
    if noise_std > 0.0 {
        for v in data.iter_mut() {
            *v += noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(FeatureSeq::new(data))
}

/// A recovered alignment plus its DP cost.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleAlignment {
    pub track: TimingTrack,
    pub misclassified: usize,
}

/// Recover per-token (d, p) from features: classify each frame as silence or
/// its nearest signature, then segment monotonically in token order with a
/// min-misclassification DP. Ties break toward earlier boundaries.
pub fn oracle_align(
    feat: &FeatureSeq,
    tokens: &[u32],
    sigs: &TokenSignatures,
    cfg: &WorldConfig,
) -> Result<OracleAlignment, AlignmentFailure> {
    let frames = feat.frames();
    if tokens.is_empty() {
        return if frames == 0 {
            Ok(OracleAlignment {
                track: TimingTrack::new(vec![], vec![], cfg.frame_rate()).unwrap(),
                misclassified: 0,
            })
        } else {
            Err(AlignmentFailure::NoTokens)
        };
    }
    if frames == 0 {
        return Err(AlignmentFailure::NoFrames {
            tokens: tokens.len(),
        });
    }

    // per-frame labels: None = silence, Some(k) = nearest signature
    let labels: Vec<Option<u32>> = (0..frames)
        .map(|j| {
            let row = feat.data.row(j);
            let energy = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if energy < cfg.silence_threshold {
                return None;
            }
            let mut best = (f64::NEG_INFINITY, 0u32);
            for k in 0..sigs.vocab() as u32 {
                let cos: f64 = sigs
                    .pattern(k)
                    .iter()
                    .zip(row.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / energy;
                if cos > best.0 {
                    best = (cos, k);
                }
            }
            Some(best.1)
        })
        .collect();

    if labels.iter().all(|l| l.is_none()) {
        return Err(AlignmentFailure::AllSilence);
    }

    // DP over 2N states: even = content of token i, odd = its trailing pause
    let n_states = 2 * tokens.len();
    let cost_of = |j: usize, q: usize| -> u32 {
        let want = if q % 2 == 0 {
            Some(tokens[q / 2])
        } else {
            None
        };
        u32::from(labels[j] != want)
    };

    let big = u32::MAX / 2;
    let mut prev = vec![big; n_states];
    let mut back: Vec<Vec<u16>> = Vec::with_capacity(frames);
    // frame 0 may start in any state (leading segments empty)
    let mut row_back = vec![0u16; n_states];
    for q in 0..n_states {
        prev[q] = cost_of(0, q);
        row_back[q] = q as u16;
    }
    back.push(row_back);
    for j in 1..frames {
        let mut cur = vec![big; n_states];
        let mut row_back = vec![0u16; n_states];
        // prefix minimum over predecessor states; ties keep the LARGEST q'
        // so transitions happen as early as possible
        let mut best = big;
        let mut best_q = 0u16;
        for q in 0..n_states {
            if prev[q] <= best {
                best = prev[q];
                best_q = q as u16;
            }
            cur[q] = cost_of(j, q) + best;
            row_back[q] = best_q;
        }
        prev = cur;
        back.push(row_back);
    }

    // final state: best cost, ties toward the largest state
    let mut end_state = 0usize;
    let mut end_cost = big;
    for q in 0..n_states {
        if prev[q] <= end_cost {
            end_cost = prev[q];
            end_state = q;
        }
    }
    let misclassified = end_cost as usize;
    if misclassified * 2 > frames {
        return Err(AlignmentFailure::TooNoisy {
            misclassified,
            frames,
        });
    }

    // backtrack state per frame
    let mut states = vec![0usize; frames];
    let mut q = end_state;
    for j in (0..frames).rev() {
        states[j] = q;
        q = back[j][q] as usize;
    }

    let mut content = vec![0u32; tokens.len()];
    let mut pause = vec![0u32; tokens.len()];
    for &s in &states {
        if s % 2 == 0 {
            content[s / 2] += 1;
        } else {
            pause[s / 2] += 1;
        }
    }
    let timings: Vec<TokenTiming> = content
        .into_iter()
        .zip(pause)
        .map(|(d, p)| TokenTiming::new(d, p))
        .collect();
    Ok(OracleAlignment {
        track: TimingTrack::new(tokens.to_vec(), timings, cfg.frame_rate()).unwrap(),
        misclassified,
    })
}

/// Corpus split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One generated utterance: id, tokens, and its ground-truth track.
#[derive(Debug, Clone)]
pub struct GenItem {
    pub utt_id: String,
    pub tokens: Vec<u32>,
    pub track: TimingTrack,
}

/// Draw utterances from the configured priors. Deterministic per
/// (seed, split, index); adjacent duplicate token ids are resampled so every
/// rendered boundary stays recoverable.
pub fn gen_corpus(cfg: &WorldConfig, n_utts: usize, seed: u64, split: Split) -> Vec<GenItem> {
    let rate = cfg.frame_rate();
    (0..n_utts)
        .map(|i| {
            let domain = match split {
                Split::Train => "corpus-train",
                Split::Test => "corpus-test",
            };
            let mut rng = stream(seed, domain, i as u64);
            let n_tokens = rng.gen_range(cfg.len_min..=cfg.len_max);
            let mut tokens: Vec<u32> = Vec::with_capacity(n_tokens);
            for _ in 0..n_tokens {
                loop {
                    let id = rng.gen_range(0..cfg.vocab as u32);
                    if tokens.last() != Some(&id) {
                        tokens.push(id);
                        break;
                    }
                }
            }
            let timings: Vec<TokenTiming> = (0..n_tokens)
                .map(|_| {
                    let d = rng.gen_range(cfg.dur_min..=cfg.dur_max);
                    let p = if rng.gen::<f64>() < cfg.pause_prob {
                        rng.gen_range(cfg.pause_min..=cfg.pause_max)
                    } else {
                        0
                    };
                    TokenTiming::new(d, p)
                })
                .collect();
            GenItem {
                utt_id: format!("{}_{i:05}", split.tag()),
                tokens: tokens.clone(),
                track: TimingTrack::new(tokens, timings, rate).unwrap(),
            }
        })
        .collect()
}

/// Per-utterance render seed, derived from the corpus seed.
pub fn render_seed(seed: u64, utt_index: usize, split: Split) -> u64 {
    // cheap mix; streams are re-keyed inside render anyway
    seed ^ (utt_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ match split {
            Split::Train => 0x5bd1_e995,
            Split::Test => 0xc2b2_ae35,
        }
}

/// Feature file: u32 LE frame count, u32 LE channel count, then row-major
/// 32-bit floats.
pub fn write_features(path: impl AsRef<Path>, feat: &FeatureSeq) -> Result<(), WorldError> {
    let mut out = Vec::with_capacity(8 + feat.frames() * feat.channels() * 4);
    out.extend_from_slice(&(feat.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(feat.channels() as u32).to_le_bytes());
    for v in feat.data.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSeq, WorldError> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 8];
    file.read_exact(&mut header)
        .map_err(|_| WorldError::FeatureFile("truncated header".into()))?;
    let frames = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    if buf.len() != frames * channels * 4 {
        return Err(WorldError::FeatureFile(format!(
            "expected {} payload bytes, found {}",
            frames * channels * 4,
            buf.len()
        )));
    }
    let mut data = Array2::zeros((frames, channels));
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        data[[i / channels.max(1), i % channels.max(1)]] =
            f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Ok(FeatureSeq::new(data))
}

/// A corpus utterance loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedUtt {
    pub utt_id: String,
    pub split: Split,
    pub tokens: Vec<u32>,
    pub track: TimingTrack,
    pub features: FeatureSeq,
}

/// On-disk corpus: world.json, manifest.tsv, and per-utterance track +
/// feature files under split directories.
pub fn save_corpus(
    dir: impl AsRef<Path>,
    cfg: &WorldConfig,
    items: &[(GenItem, Split, FeatureSeq)],
) -> Result<(), WorldError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("world.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    let mut manifest = String::from("utt_id\tsplit\tn_tokens\tframes\n");
    for (item, split, feats) in items {
        let split_dir = dir.join(split.tag());
        fs::create_dir_all(&split_dir)?;
        item.track
            .save(split_dir.join(format!("{}.track", item.utt_id)))
            .map_err(|e| WorldError::CorpusLayout(e.to_string()))?;
        write_features(split_dir.join(format!("{}.feat", item.utt_id)), feats)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            item.utt_id,
            split.tag(),
            item.tokens.len(),
            feats.frames()
        ));
    }
    let mut f = fs::File::create(dir.join("manifest.tsv"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<(WorldConfig, Vec<LoadedUtt>), WorldError> {
    let dir = dir.as_ref();
    let cfg: WorldConfig = serde_json::from_str(&fs::read_to_string(dir.join("world.json"))?)?;
    let manifest = fs::read_to_string(dir.join("manifest.tsv"))?;
    let mut utts = Vec::new();
    for (lineno, line) in manifest.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(WorldError::CorpusLayout(format!(
                "manifest line {} malformed",
                lineno + 1
            )));
        }
        let utt_id = fields[0].to_string();
        let split = match fields[1] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(WorldError::CorpusLayout(format!(
                    "unknown split {other:?}"
                )))
            }
        };
        let split_dir = dir.join(split.tag());
        let track = TimingTrack::load(split_dir.join(format!("{utt_id}.track")))
            .map_err(|e| WorldError::CorpusLayout(format!("{utt_id}: {e}")))?;
        let features = read_features(split_dir.join(format!("{utt_id}.feat")))?;
        utts.push(LoadedUtt {
            tokens: track.tokens.clone(),
            utt_id,
            split,
            track,
            features,
        });
    }
    Ok((cfg, utts))
}
