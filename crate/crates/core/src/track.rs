//! The token-level timing track: per-token content duration and pause in
//! frames, with per-branch availability masks, plus its line-oriented file
//! format.
//!
//! File format (UTF-8, LF):
//! ```text
//! #fps=93.75
//! <token_id>\t<d>\t<p>\t<m_d>\t<m_p>
//! ```
//! Round-trips are bit-exact on all fields including the frame rate.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::frame::FrameRate;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("negative or non-finite milliseconds: {0}")]
    InvalidMs(f64),
    #[error("frame rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("log scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("{0} ms does not fit in a u32 frame count")]
    FrameOverflow(f64),
    #[error("token and timing lists differ in length: {tokens} vs {timings}")]
    LengthMismatch { tokens: usize, timings: usize },
    #[error("masked timing value must be stored as 0 (token index {index})")]
    MaskedNonZero { index: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Content duration and trailing pause of one token, in frames, with
/// per-branch availability masks. A masked branch stores value 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenTiming {
    pub content_frames: u32,
    pub pause_frames: u32,
    pub content_mask: bool,
    pub pause_mask: bool,
}

impl TokenTiming {
    /// Both branches available.
    pub fn new(content_frames: u32, pause_frames: u32) -> Self {
        TokenTiming {
            content_frames,
            pause_frames,
            content_mask: true,
            pause_mask: true,
        }
    }

    /// Both branches unavailable (values zeroed).
    pub fn masked() -> Self {
        TokenTiming {
            content_frames: 0,
            pause_frames: 0,
            content_mask: false,
            pause_mask: false,
        }
    }

    pub fn span_frames(&self) -> u64 {
        self.content_frames as u64 + self.pause_frames as u64
    }

    fn check(&self, index: usize) -> Result<(), TrackError> {
        if (!self.content_mask && self.content_frames != 0)
            || (!self.pause_mask && self.pause_frames != 0)
        {
            return Err(TrackError::MaskedNonZero { index });
        }
        Ok(())
    }
}

/// Ordered token ids with their timings and the frame grid they live on.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingTrack {
    pub tokens: Vec<u32>,
    pub timings: Vec<TokenTiming>,
    pub frame_rate: FrameRate,
}

impl TimingTrack {
    pub fn new(
        tokens: Vec<u32>,
        timings: Vec<TokenTiming>,
        frame_rate: FrameRate,
    ) -> Result<Self, TrackError> {
        if tokens.len() != timings.len() {
            return Err(TrackError::LengthMismatch {
                tokens: tokens.len(),
                timings: timings.len(),
            });
        }
        for (i, t) in timings.iter().enumerate() {
            t.check(i)?;
        }
        Ok(TimingTrack {
            tokens,
            timings,
            frame_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Total span in frames: sum of (d_i + p_i).
    pub fn total_span_frames(&self) -> u64 {
        self.timings.iter().map(|t| t.span_frames()).sum()
    }

    /// True when no branch of any token is available.
    pub fn fully_masked(&self) -> bool {
        self.timings
            .iter()
            .all(|t| !t.content_mask && !t.pause_mask)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        // f64 Display is shortest round-trip, so the header re-parses exactly
        writeln!(out, "#fps={}", self.frame_rate.fps()).unwrap();
        for (tok, tim) in self.tokens.iter().zip(&self.timings) {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                tok,
                tim.content_frames,
                tim.pause_frames,
                tim.content_mask as u8,
                tim.pause_mask as u8
            )
            .unwrap();
        }
        out
    }

    pub fn deserialize(input: &str) -> Result<Self, TrackError> {
        let mut frame_rate: Option<FrameRate> = None;
        let mut tokens = Vec::new();
        let mut timings = Vec::new();
        for (idx, raw) in input.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#fps=") {
                let fps: f64 = rest.trim().parse().map_err(|_| TrackError::Parse {
                    line: line_no,
                    msg: format!("bad fps value {rest:?}"),
                })?;
                frame_rate = Some(FrameRate::new(fps).map_err(|e| TrackError::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?);
                continue;
            }
            if line.starts_with('#') {
                continue; // unknown header lines are ignored
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(TrackError::Parse {
                    line: line_no,
                    msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
                });
            }
            let field = |k: usize, name: &str| -> Result<u32, TrackError> {
                fields[k].parse::<u32>().map_err(|_| TrackError::Parse {
                    line: line_no,
                    msg: format!("field {name}: {:?} is not a non-negative integer", fields[k]),
                })
            };
            let tok = field(0, "token_id")?;
            let d = field(1, "d")?;
            let p = field(2, "p")?;
            let mask = |k: usize, name: &str| -> Result<bool, TrackError> {
                match fields[k] {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(TrackError::Parse {
                        line: line_no,
                        msg: format!("field {name}: {other:?} is not 0 or 1"),
                    }),
                }
            };
            let m_d = mask(3, "m_d")?;
            let m_p = mask(4, "m_p")?;
            let timing = TokenTiming {
                content_frames: d,
                pause_frames: p,
                content_mask: m_d,
                pause_mask: m_p,
            };
            timing.check(tokens.len()).map_err(|e| TrackError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            tokens.push(tok);
            timings.push(timing);
        }
        let frame_rate = frame_rate.ok_or_else(|| TrackError::Parse {
            line: 0,
            msg: "missing #fps= header".into(),
        })?;
        TimingTrack::new(tokens, timings, frame_rate)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrackError> {
        fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrackError> {
        let text = fs::read_to_string(path)?;
        Self::deserialize(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::FrameRate;

    fn two_token_track() -> TimingTrack {
        TimingTrack::new(
            vec![3, 9],
            vec![TokenTiming::new(5, 3), TokenTiming::new(4, 0)],
            FrameRate::default(),
        )
        .unwrap()
    }

    #[test]
    fn total_span_examples() {
        let empty = TimingTrack::new(vec![], vec![], FrameRate::default()).unwrap();
        assert_eq!(empty.total_span_frames(), 0);
        assert_eq!(two_token_track().total_span_frames(), 12);
        let masked = TimingTrack::new(
            vec![1, 2],
            vec![TokenTiming::masked(), TokenTiming::masked()],
            FrameRate::default(),
        )
        .unwrap();
        assert_eq!(masked.total_span_frames(), 0);
        assert!(masked.fully_masked());
    }

    #[test]
    fn round_trip_is_identity() {
        let track = two_token_track();
        let text = track.serialize();
        let back = TimingTrack::deserialize(&text).unwrap();
        assert_eq!(track, back);
        assert_eq!(text, back.serialize());
    }

    #[test]
    fn short_line_is_parse_error() {
        let err = TimingTrack::deserialize("#fps=93.75\n3\t5\t3\t1\n").unwrap_err();
        assert!(matches!(err, TrackError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn negative_duration_is_parse_error() {
        let err = TimingTrack::deserialize("#fps=93.75\n3\t-5\t3\t1\t1\n").unwrap_err();
        assert!(matches!(err, TrackError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn masked_nonzero_is_rejected() {
        let err = TimingTrack::deserialize("#fps=93.75\n3\t5\t3\t0\t1\n").unwrap_err();
        assert!(matches!(err, TrackError::Parse { .. }), "{err}");
        let err = TimingTrack::new(
            vec![0],
            vec![TokenTiming {
                content_frames: 1,
                pause_frames: 0,
                content_mask: false,
                pause_mask: true,
            }],
            FrameRate::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TrackError::MaskedNonZero { index: 0 }));
    }

    #[test]
    fn missing_header_is_rejected() {
        assert!(TimingTrack::deserialize("3\t5\t3\t1\t1\n").is_err());
    }

    #[test]
    fn length_mismatch_rejected() {
        let err = TimingTrack::new(vec![1], vec![], FrameRate::default()).unwrap_err();
        assert!(matches!(
            err,
            TrackError::LengthMismatch {
                tokens: 1,
                timings: 0
            }
        ));
    }
}
