//! Build token-level timing tracks from retained alignments, plus the
//! training-time availability operators (whole-track dropout and
//! prompt-region masking).

use rand::Rng;
use thiserror::Error;

use crate::align::AxisSpan;
use crate::frame::{ms_to_frames, FrameRate};
use crate::rng::stream_str;
use crate::track::{TimingTrack, TokenTiming, TrackError};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("token spans must be contiguous, ordered, and tile the text (violation at token {index})")]
    BadTokenization { index: usize },
    #[error("token {index} straddles word boundaries and cannot be resolved")]
    TokenStraddlesWords { index: usize },
    #[error("word {index} covers chars outside the tokenization")]
    WordOutsideTokens { index: usize },
    #[error("prompt length {prompt_len} exceeds track length {track_len}")]
    PromptOutOfRange { prompt_len: usize, track_len: usize },
    #[error(transparent)]
    Track(#[from] TrackError),
}

/// One token's id and char range over the normalized text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub id: u32,
    pub char_begin: usize,
    pub char_end: usize,
}

/// Token char ranges tiling the normalized text: contiguous, non-overlapping,
/// ordered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenization {
    spans: Vec<TokenSpan>,
}

impl Tokenization {
    pub fn new(spans: Vec<TokenSpan>) -> Result<Self, BuildError> {
        let mut expected = spans.first().map(|s| s.char_begin).unwrap_or(0);
        for (i, s) in spans.iter().enumerate() {
            if s.char_begin != expected || s.char_end <= s.char_begin {
                return Err(BuildError::BadTokenization { index: i });
            }
            expected = s.char_end;
        }
        Ok(Tokenization { spans })
    }

    pub fn spans(&self) -> &[TokenSpan] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Options for pause assignment at the utterance edges.
#[derive(Debug, Clone, Copy)]
pub struct BuildConfig {
    /// Assign the gap between the last word and `utterance_end_s` to the
    /// final token's pause.
    pub assign_final_silence: bool,
    /// Total utterance extent, when the source knows it (TextGrid xmax).
    pub utterance_end_s: Option<f64>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            assign_final_silence: true,
            utterance_end_s: None,
        }
    }
}

/// Seconds to milliseconds on the 1e-3 ms grid; alignment sources carry at
/// most microsecond precision, so this only strips binary float noise.
fn span_ms(seconds: f64) -> f64 {
    (seconds * 1_000_000.0).round() / 1000.0
}

/// Largest-remainder split of `total` frames across char shares, so the
/// parts sum to `total` exactly. Ties go to earlier tokens.
fn largest_remainder(total: u32, shares: &[usize]) -> Vec<u32> {
    let sum: usize = shares.iter().sum();
    if sum == 0 {
        return vec![0; shares.len()];
    }
    let mut base = Vec::with_capacity(shares.len());
    let mut fracs = Vec::with_capacity(shares.len());
    let mut assigned: u32 = 0;
    for &c in shares {
        let ideal = total as f64 * c as f64 / sum as f64;
        let floor = ideal.floor() as u32;
        base.push(floor);
        fracs.push(ideal - floor as f64);
        assigned += floor;
    }
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&i, &j| fracs[j].partial_cmp(&fracs[i]).unwrap().then(i.cmp(&j)));
    let mut remainder = total - assigned;
    for &i in &order {
        if remainder == 0 {
            break;
        }
        base[i] += 1;
        remainder -= 1;
    }
    base
}

fn overlaps(t: &TokenSpan, w: &AxisSpan) -> bool {
    t.char_begin < w.char_end && w.char_begin < t.char_end
}

fn token_inside_word(t: &TokenSpan, w: &AxisSpan) -> bool {
    w.char_begin <= t.char_begin && t.char_end <= w.char_end
}

fn word_inside_token(t: &TokenSpan, w: &AxisSpan) -> bool {
    t.char_begin <= w.char_begin && w.char_end <= t.char_end
}

/// Project word timing (the timing-truth source) onto tokens.
///
/// Tokens inside a word split the word's frame count proportionally by char
/// share with largest-remainder rounding; a token containing whole words
/// takes their full time extent. The gap after a word goes to its last
/// token's pause; utterance-leading silence is discarded; tokens covering no
/// word get (0, 0) with masks on.
pub fn build_track(
    words: &[AxisSpan],
    tok: &Tokenization,
    rate: FrameRate,
    cfg: &BuildConfig,
) -> Result<TimingTrack, BuildError> {
    let spans = tok.spans();
    let n = spans.len();
    let mut content = vec![0u32; n];
    let mut pause = vec![0u32; n];

    // token indices overlapping each word, with the straddling check
    let mut word_tokens: Vec<Vec<usize>> = Vec::with_capacity(words.len());
    for (wi, w) in words.iter().enumerate() {
        let mut hits = Vec::new();
        for (ti, t) in spans.iter().enumerate() {
            if overlaps(t, w) {
                if !token_inside_word(t, w) && !word_inside_token(t, w) {
                    return Err(BuildError::TokenStraddlesWords { index: ti });
                }
                hits.push(ti);
            }
        }
        if hits.is_empty() {
            return Err(BuildError::WordOutsideTokens { index: wi });
        }
        word_tokens.push(hits);
    }

    // content durations
    let mut wi = 0usize;
    while wi < words.len() {
        let w = &words[wi];
        let hits = &word_tokens[wi];
        let container = hits
            .iter()
            .find(|&&ti| word_inside_token(&spans[ti], w) && !token_inside_word(&spans[ti], w));
        if let Some(&ti) = container {
            // the token absorbs this word and any following words it contains
            let mut last = wi;
            while last + 1 < words.len() && word_tokens[last + 1] == vec![ti] {
                last += 1;
            }
            let extent_ms = span_ms(words[last].end_s - w.start_s);
            content[ti] = ms_to_frames(extent_ms, rate)?;
            wi = last + 1;
        } else {
            // every overlapping token lies inside the word: proportional split
            let frames = ms_to_frames(span_ms(w.end_s - w.start_s), rate)?;
            let shares: Vec<usize> = hits
                .iter()
                .map(|&ti| {
                    let t = &spans[ti];
                    t.char_end.min(w.char_end) - t.char_begin.max(w.char_begin)
                })
                .collect();
            for (&ti, d) in hits.iter().zip(largest_remainder(frames, &shares)) {
                content[ti] = d;
            }
            wi += 1;
        }
    }

    // trailing pauses: gap between consecutive words goes to the earlier
    // word's last token, unless both words live in the same token (the gap
    // is then already inside that token's extent)
    for wi in 0..words.len() {
        let last_token = *word_tokens[wi].last().unwrap();
        let next_start = if wi + 1 < words.len() {
            let next_first = *word_tokens[wi + 1].first().unwrap();
            if next_first == last_token {
                continue;
            }
            Some(words[wi + 1].start_s)
        } else if cfg.assign_final_silence {
            cfg.utterance_end_s.filter(|end| *end > words[wi].end_s)
        } else {
            None
        };
        if let Some(next_start) = next_start {
            let gap_ms = span_ms((next_start - words[wi].end_s).max(0.0));
            pause[last_token] = ms_to_frames(gap_ms, rate)?;
        }
    }

    let tokens: Vec<u32> = spans.iter().map(|s| s.id).collect();
    let timings: Vec<TokenTiming> = content
        .into_iter()
        .zip(pause)
        .map(|(d, p)| TokenTiming::new(d, p))
        .collect();
    Ok(TimingTrack::new(tokens, timings, rate)?)
}

/// Whole-track dropout: with probability `drop_prob`, zero all values and
/// masks. Deterministic per (seed, utterance_id).
#[derive(Debug, Clone, Copy)]
pub struct DropoutPolicy {
    pub drop_prob: f64,
    pub seed: u64,
}

pub fn apply_dropout(
    track: &TimingTrack,
    policy: &DropoutPolicy,
    utterance_id: &str,
) -> TimingTrack {
    let mut rng = stream_str(policy.seed, "dropout", utterance_id);
    let u: f64 = rng.gen();
    if u < policy.drop_prob {
        TimingTrack {
            tokens: track.tokens.clone(),
            timings: vec![TokenTiming::masked(); track.len()],
            frame_rate: track.frame_rate,
        }
    } else {
        track.clone()
    }
}

/// Mask (and zero) the timing of the first `prompt_len` tokens only; the
/// rest of the track is untouched. Used by the target-only conditioning
/// format.
pub fn mask_prompt_region(
    track: &TimingTrack,
    prompt_len: usize,
) -> Result<TimingTrack, BuildError> {
    if prompt_len > track.len() {
        return Err(BuildError::PromptOutOfRange {
            prompt_len,
            track_len: track.len(),
        });
    }
    let mut out = track.clone();
    for t in out.timings.iter_mut().take(prompt_len) {
        *t = TokenTiming::masked();
    }
    Ok(out)
}
