//! Timing-track editing: uniform baselines, local pause/content edits, the
//! three-scenario editing benchmark, and the stress-test case generators.

use rand::Rng;
use thiserror::Error;

use crate::eval::EditKind;
use crate::frame::{ms_to_frames, FrameRate};
use crate::rng::stream_str;
use crate::track::{TimingTrack, TokenTiming, TrackError};

#[derive(Debug, Error)]
pub enum EditError {
    #[error("edit span {start}..{end} out of range for {len} tokens")]
    OutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("scale factor must be positive, got {0}")]
    BadFactor(f64),
    #[error("target milliseconds must be non-negative, got {0}")]
    BadMs(f64),
    #[error("no utterance long enough for a {span}-token span with edge margin")]
    CorpusTooShort { span: usize },
    #[error(transparent)]
    Track(#[from] TrackError),
}

/// One local edit: kind, edited token positions, and the target value
/// (milliseconds for set edits, a factor for scaling).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditSpec {
    pub kind: EditKind,
    pub start: usize,
    pub len: usize,
    pub value: f64,
}

impl EditSpec {
    pub fn pause_set(position: usize, ms: f64) -> Self {
        EditSpec {
            kind: EditKind::PauseSet,
            start: position,
            len: 1,
            value: ms,
        }
    }

    pub fn content_scale(start: usize, len: usize, factor: f64) -> Self {
        EditSpec {
            kind: EditKind::ContentScale,
            start,
            len,
            value: factor,
        }
    }

    pub fn content_set(start: usize, len: usize, ms: f64) -> Self {
        EditSpec {
            kind: EditKind::ContentSet,
            start,
            len,
            value: ms,
        }
    }
}

/// A token of an editing benchmark: id plus its punctuation flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlaggedToken {
    pub id: u32,
    pub punct: bool,
}

/// Uniform-timing baseline: every content token gets `content_ms`, every
/// punctuation token `punct_ms`, all pauses zero, all masks on.
pub fn uniform_baseline(
    tokens: &[FlaggedToken],
    content_ms: f64,
    punct_ms: f64,
    rate: FrameRate,
) -> Result<TimingTrack, EditError> {
    let content_frames = ms_to_frames(content_ms, rate)?;
    let punct_frames = ms_to_frames(punct_ms, rate)?;
    let ids: Vec<u32> = tokens.iter().map(|t| t.id).collect();
    let timings: Vec<TokenTiming> = tokens
        .iter()
        .map(|t| TokenTiming::new(if t.punct { punct_frames } else { content_frames }, 0))
        .collect();
    Ok(TimingTrack::new(ids, timings, rate)?)
}

/// Apply one edit; every entry outside the specified positions is
/// bit-identical to the input.
pub fn apply_edit(track: &TimingTrack, spec: &EditSpec) -> Result<TimingTrack, EditError> {
    let end = spec.start + spec.len;
    if spec.len == 0 || end > track.len() {
        return Err(EditError::OutOfRange {
            start: spec.start,
            end,
            len: track.len(),
        });
    }
    let mut out = track.clone();
    match spec.kind {
        EditKind::PauseSet => {
            if !(spec.value.is_finite() && spec.value >= 0.0) {
                return Err(EditError::BadMs(spec.value));
            }
            let frames = ms_to_frames(spec.value, track.frame_rate)?;
            for t in &mut out.timings[spec.start..end] {
                t.pause_frames = frames;
                t.pause_mask = true;
            }
        }
        EditKind::ContentScale => {
            if !(spec.value.is_finite() && spec.value > 0.0) {
                return Err(EditError::BadFactor(spec.value));
            }
            for t in &mut out.timings[spec.start..end] {
                // per-token rounding, half-up
                t.content_frames = (spec.value * t.content_frames as f64 + 0.5).floor() as u32;
                t.content_mask = true;
            }
        }
        EditKind::ContentSet => {
            if !(spec.value.is_finite() && spec.value >= 0.0) {
                return Err(EditError::BadMs(spec.value));
            }
            let frames = ms_to_frames(spec.value, track.frame_rate)?;
            for t in &mut out.timings[spec.start..end] {
                t.content_frames = frames;
                t.content_mask = true;
            }
        }
    }
    Ok(out)
}

/// One scenario-benchmark demo: fixed token fixture, a uniform baseline, one
/// content edit and one pause edit.
#[derive(Debug, Clone)]
pub struct ScenarioCase {
    pub name: &'static str,
    /// Pinyin gloss of the demo text; documentation only, the toy world
    /// consumes ids.
    pub gloss: &'static str,
    pub tokens: Vec<FlaggedToken>,
    pub baseline: TimingTrack,
    pub content_edit: EditSpec,
    pub pause_edit: EditSpec,
}

pub const SCENARIO_CONTENT_MS: f64 = 170.0;
pub const SCENARIO_PUNCT_MS: f64 = 50.0;
pub const SCENARIO_CONTENT_EDIT_MS: f64 = 225.0;
pub const SCENARIO_PAUSE_EDIT_MS: f64 = 260.0;

/// The three editing demos: navigation guidance, guided reading, and
/// code reading. Content edits target 225 ms, pause edits 260 ms, on top of
/// the 170/50 ms uniform baseline.
pub fn scenario_suite(rate: FrameRate) -> Vec<ScenarioCase> {
    let tok = |id: u32| FlaggedToken { id, punct: false };
    let punct = |id: u32| FlaggedToken { id, punct: true };
    let fixtures: [(&'static str, &'static str, Vec<FlaggedToken>, usize, usize); 3] = [
        (
            "navigation",
            "qian fang lu kou zuo zhuan",
            vec![tok(1), tok(2), tok(3), tok(4), tok(5), tok(6), punct(7)],
            4, // lengthen "zuo"
            3, // pause after "kou"
        ),
        (
            "guided_reading",
            "gen wo du, ping guo",
            vec![tok(8), tok(9), tok(10), punct(11), tok(12), tok(13), punct(7)],
            2, // lengthen "du"
            3, // pause at the comma
        ),
        (
            "code_reading",
            "yan zheng ma shi 379, 218",
            vec![
                tok(14),
                tok(15),
                tok(1),
                tok(3),
                tok(4),
                tok(5),
                tok(6),
                punct(11),
                tok(8),
                tok(9),
                tok(10),
                punct(7),
            ],
            5, // lengthen a digit
            7, // pause at the comma between digit groups
        ),
    ];
    fixtures
        .into_iter()
        .map(|(name, gloss, tokens, content_pos, pause_pos)| {
            let baseline =
                uniform_baseline(&tokens, SCENARIO_CONTENT_MS, SCENARIO_PUNCT_MS, rate)
                    .expect("fixture baseline");
            ScenarioCase {
                name,
                gloss,
                tokens,
                baseline,
                content_edit: EditSpec::content_set(content_pos, 1, SCENARIO_CONTENT_EDIT_MS),
                pause_edit: EditSpec::pause_set(pause_pos, SCENARIO_PAUSE_EDIT_MS),
            }
        })
        .collect()
}

/// Stress-suite configuration: which pause targets and scale factors to
/// emit, and where positions come from.
#[derive(Debug, Clone)]
pub struct StressConfig {
    pub pause_targets_ms: Vec<f64>,
    /// The fragile short-pause condition: generated, flagged excluded.
    pub excluded_pause_targets_ms: Vec<f64>,
    pub factors: Vec<f64>,
    pub span_lens: Vec<usize>,
    pub seed: u64,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            pause_targets_ms: vec![500.0, 800.0],
            excluded_pause_targets_ms: vec![200.0],
            factors: vec![0.5, 1.5, 2.0],
            span_lens: vec![2, 3],
            seed: 99,
        }
    }
}

/// One generated stress case, before synthesis.
#[derive(Debug, Clone)]
pub struct StressCase {
    pub case_id: String,
    pub utt_id: String,
    pub spec: EditSpec,
    pub excluded: bool,
}

/// Generate single-token pause cases and adjacent multi-token content-scale
/// cases over a held-out corpus. Positions are drawn deterministically per
/// (seed, utterance, condition) and stay clear of utterance edges so the
/// strict filter has a chance to pass. Utterances too short for a condition
/// are skipped; an empty result for a requested span is an error.
pub fn stress_suite(
    corpus: &[(String, TimingTrack)],
    cfg: &StressConfig,
) -> Result<Vec<StressCase>, EditError> {
    let mut out = Vec::new();
    let max_span = cfg.span_lens.iter().copied().max().unwrap_or(1);
    for (utt_id, track) in corpus {
        let n = track.len();
        // single-token pause edits: position in [1, n-2]
        if n >= 3 {
            let all_targets = cfg
                .pause_targets_ms
                .iter()
                .map(|&ms| (ms, false))
                .chain(cfg.excluded_pause_targets_ms.iter().map(|&ms| (ms, true)));
            for (ms, excluded) in all_targets {
                let mut rng =
                    stream_str(cfg.seed, &format!("stress-pause-{ms}"), utt_id);
                let pos = rng.gen_range(1..=n - 2);
                out.push(StressCase {
                    case_id: format!("{utt_id}:pause{ms}"),
                    utt_id: utt_id.clone(),
                    spec: EditSpec::pause_set(pos, ms),
                    excluded,
                });
            }
        }
        // adjacent multi-token content scaling: span within [1, n-1)
        for &span in &cfg.span_lens {
            if n < span + 2 {
                continue;
            }
            for &factor in &cfg.factors {
                let mut rng = stream_str(
                    cfg.seed,
                    &format!("stress-scale-{span}-{factor}"),
                    utt_id,
                );
                let start = rng.gen_range(1..=n - span - 1);
                out.push(StressCase {
                    case_id: format!("{utt_id}:scale{span}x{factor}"),
                    utt_id: utt_id.clone(),
                    spec: EditSpec::content_scale(start, span, factor),
                    excluded: false,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(EditError::CorpusTooShort { span: max_span });
    }
    Ok(out)
}
