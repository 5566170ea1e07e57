//! Alignment ingestion: word-span record files, long-format TextGrid interval
//! tiers, and projection of word spans onto the normalized text axis.

use thiserror::Error;

use crate::textnorm::{normalize_text, Normalized};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("word {word_index} ({surface:?}) overlaps the previous span by {overlap_s:.4} s, beyond the clip tolerance")]
    Overlap {
        word_index: usize,
        surface: String,
        overlap_s: f64,
    },
    #[error("tier {wanted:?} not found; available tiers: {available:?}")]
    MissingTier {
        wanted: String,
        available: Vec<String>,
    },
    #[error("only long-format TextGrid files are supported")]
    ShortFormat,
    #[error("word {word_index} ({surface:?}) cannot be matched on the normalized axis at or after position {cursor}")]
    Projection {
        word_index: usize,
        surface: String,
        cursor: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One aligned word with its time extent in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct WordSpan {
    pub surface: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// Which alignment source a sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    A,
    B,
}

/// Word-level alignment of one utterance from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSeq {
    pub utterance_id: String,
    pub words: Vec<WordSpan>,
    pub source: SourceTag,
}

/// A word span projected onto the normalized text axis. Char indices are
/// positions in the normalized character sequence, end exclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSpan {
    pub char_begin: usize,
    pub char_end: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// Parse result: sequences plus repair warnings (clipped small overlaps).
#[derive(Debug, Clone)]
pub struct ParsedAlignments {
    pub seqs: Vec<AlignmentSeq>,
    pub warnings: Vec<String>,
}

/// Parse a word-record stream: `#utt=<id>` headers, then one
/// `surface<TAB>start_s<TAB>end_s` line per word.
///
/// Overlaps of at most `clip_tolerance_s` are repaired by clipping the later
/// word's start to the earlier word's end (with a warning); larger overlaps
/// are errors.
pub fn parse_word_records(
    input: &str,
    source: SourceTag,
    clip_tolerance_s: f64,
) -> Result<ParsedAlignments, AlignError> {
    let mut seqs: Vec<AlignmentSeq> = Vec::new();
    let mut warnings = Vec::new();
    let mut current: Option<AlignmentSeq> = None;

    for (idx, raw) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        if let Some(id) = line.strip_prefix("#utt=") {
            if let Some(seq) = current.take() {
                seqs.push(seq);
            }
            current = Some(AlignmentSeq {
                utterance_id: id.trim().to_string(),
                words: Vec::new(),
                source,
            });
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let seq = current.as_mut().ok_or_else(|| AlignError::Parse {
            line: line_no,
            msg: "word record before any #utt= header".into(),
        })?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(AlignError::Parse {
                line: line_no,
                msg: format!("expected surface<TAB>start<TAB>end, got {} fields", fields.len()),
            });
        }
        let surface = fields[0].trim();
        if surface.is_empty() {
            return Err(AlignError::Parse {
                line: line_no,
                msg: "empty word surface".into(),
            });
        }
        let seconds = |k: usize, name: &str| -> Result<f64, AlignError> {
            let v: f64 = fields[k].trim().parse().map_err(|_| AlignError::Parse {
                line: line_no,
                msg: format!("field {name}: {:?} is not a number", fields[k]),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(AlignError::Parse {
                    line: line_no,
                    msg: format!("field {name}: {v} is negative or non-finite"),
                });
            }
            Ok(v)
        };
        let mut start_s = seconds(1, "start_s")?;
        let end_s = seconds(2, "end_s")?;
        if end_s < start_s {
            return Err(AlignError::Parse {
                line: line_no,
                msg: format!("end {end_s} precedes start {start_s}"),
            });
        }
        if let Some(prev) = seq.words.last() {
            if start_s < prev.end_s {
                let overlap = prev.end_s - start_s;
                let word_index = seq.words.len();
                if overlap <= clip_tolerance_s && end_s >= prev.end_s {
                    warnings.push(format!(
                        "{}: word {} ({:?}) start clipped {:.4} -> {:.4} ({} ms overlap)",
                        seq.utterance_id,
                        word_index,
                        surface,
                        start_s,
                        prev.end_s,
                        (overlap * 1000.0).round()
                    ));
                    start_s = prev.end_s;
                } else {
                    return Err(AlignError::Overlap {
                        word_index,
                        surface: surface.to_string(),
                        overlap_s: overlap,
                    });
                }
            }
        }
        seq.words.push(WordSpan {
            surface: surface.to_string(),
            start_s,
            end_s,
        });
    }
    if let Some(seq) = current.take() {
        seqs.push(seq);
    }
    Ok(ParsedAlignments { seqs, warnings })
}

/// Interval labels treated as silence when reading TextGrid tiers.
pub const DEFAULT_SILENCE_LABELS: [&str; 4] = ["", "sil", "sp", "spn"];

/// A parsed TextGrid interval tier with its file extent.
#[derive(Debug, Clone)]
pub struct TextGridAlignment {
    pub seq: AlignmentSeq,
    pub xmin: f64,
    pub xmax: f64,
}

/// Read one interval tier from a long-format TextGrid. Silence-labelled
/// intervals are excluded from the word list; their extents survive as gaps
/// between the remaining words, which is what pause computation consumes.
pub fn parse_textgrid(
    input: &str,
    tier_name: &str,
    utterance_id: &str,
    silence_labels: &[&str],
) -> Result<TextGridAlignment, AlignError> {
    struct RawInterval {
        xmin: Option<f64>,
        xmax: Option<f64>,
        text: Option<String>,
        line: usize,
    }
    struct RawTier {
        name: String,
        class: String,
        intervals: Vec<RawInterval>,
    }

    if !input.contains("item [") {
        // long format always writes `item [..]:` markers; the short format
        // is bare values
        return Err(AlignError::ShortFormat);
    }

    let unquote = |s: &str| -> String {
        let t = s.trim();
        let t = t.strip_prefix('"').unwrap_or(t);
        let t = t.strip_suffix('"').unwrap_or(t);
        t.replace("\"\"", "\"")
    };

    let mut tiers: Vec<RawTier> = Vec::new();
    let mut file_xmin: Option<f64> = None;
    let mut file_xmax: Option<f64> = None;
    let mut in_items = false;

    for (idx, raw) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with("item []") {
            in_items = true;
            continue;
        }
        if line.starts_with("item [") {
            in_items = true;
            tiers.push(RawTier {
                name: String::new(),
                class: String::new(),
                intervals: Vec::new(),
            });
            continue;
        }
        if line.starts_with("intervals [") {
            let tier = tiers.last_mut().ok_or(AlignError::Parse {
                line: line_no,
                msg: "interval outside any tier".into(),
            })?;
            tier.intervals.push(RawInterval {
                xmin: None,
                xmax: None,
                text: None,
                line: line_no,
            });
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        let parse_num = |v: &str| -> Result<f64, AlignError> {
            v.parse::<f64>().map_err(|_| AlignError::Parse {
                line: line_no,
                msg: format!("{v:?} is not a number"),
            })
        };
        match key {
            "xmin" | "xmax" => {
                let num = parse_num(value)?;
                if let Some(tier) = tiers.last_mut() {
                    if let Some(interval) = tier.intervals.last_mut() {
                        if key == "xmin" {
                            interval.xmin = Some(num);
                        } else {
                            interval.xmax = Some(num);
                        }
                        continue;
                    }
                }
                if !in_items {
                    if key == "xmin" {
                        file_xmin = Some(num);
                    } else {
                        file_xmax = Some(num);
                    }
                }
            }
            "class" => {
                if let Some(tier) = tiers.last_mut() {
                    tier.class = unquote(value);
                }
            }
            "name" => {
                if let Some(tier) = tiers.last_mut() {
                    tier.name = unquote(value);
                }
            }
            "text" => {
                if let Some(tier) = tiers.last_mut() {
                    if let Some(interval) = tier.intervals.last_mut() {
                        interval.text = Some(unquote(value));
                    }
                }
            }
            _ => {}
        }
    }

    let tier = tiers
        .iter()
        .find(|t| t.name == tier_name && t.class == "IntervalTier")
        .ok_or_else(|| AlignError::MissingTier {
            wanted: tier_name.to_string(),
            available: tiers.iter().map(|t| t.name.clone()).collect(),
        })?;

    let mut words = Vec::new();
    for interval in &tier.intervals {
        let (Some(xmin), Some(xmax)) = (interval.xmin, interval.xmax) else {
            return Err(AlignError::Parse {
                line: interval.line,
                msg: "interval missing xmin/xmax".into(),
            });
        };
        if xmax < xmin {
            return Err(AlignError::Parse {
                line: interval.line,
                msg: format!("interval xmax {xmax} < xmin {xmin}"),
            });
        }
        let label = interval.text.clone().unwrap_or_default();
        let trimmed = label.trim();
        if silence_labels.contains(&trimmed) {
            continue;
        }
        words.push(WordSpan {
            surface: trimmed.to_string(),
            start_s: xmin,
            end_s: xmax,
        });
    }

    Ok(TextGridAlignment {
        seq: AlignmentSeq {
            utterance_id: utterance_id.to_string(),
            words,
            source: SourceTag::B,
        },
        xmin: file_xmin.unwrap_or(0.0),
        xmax: file_xmax.unwrap_or_else(|| {
            tier.intervals
                .iter()
                .filter_map(|i| i.xmax)
                .fold(0.0, f64::max)
        }),
    })
}

/// Project word spans onto the normalized text axis, greedy left-to-right.
///
/// Words whose normalized surface is empty (pure punctuation) are dropped.
/// Each remaining word must match at or after the cursor; ambiguity resolves
/// to the earliest match.
pub fn project_to_axis(
    seq: &AlignmentSeq,
    normalized: &Normalized,
) -> Result<Vec<AxisSpan>, AlignError> {
    let axis = &normalized.chars;
    let mut spans = Vec::new();
    let mut cursor = 0usize;
    for (word_index, word) in seq.words.iter().enumerate() {
        let needle = normalize_text(&word.surface).chars;
        if needle.is_empty() {
            continue;
        }
        let found = find_from(axis, &needle, cursor).ok_or_else(|| AlignError::Projection {
            word_index,
            surface: word.surface.clone(),
            cursor,
        })?;
        spans.push(AxisSpan {
            char_begin: found,
            char_end: found + needle.len(),
            start_s: word.start_s,
            end_s: word.end_s,
        });
        cursor = found + needle.len();
    }
    Ok(spans)
}

fn find_from(haystack: &[char], needle: &[char], from: usize) -> Option<usize> {
    if needle.is_empty() || from + needle.len() > haystack.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&i| &haystack[i..i + needle.len()] == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_records_basic() {
        let input = "#utt=u1\nhi\t0.00\t0.30\nthere\t0.35\t0.80\n";
        let parsed = parse_word_records(input, SourceTag::A, 0.0107).unwrap();
        assert_eq!(parsed.seqs.len(), 1);
        let seq = &parsed.seqs[0];
        assert_eq!(seq.utterance_id, "u1");
        assert_eq!(seq.words.len(), 2);
        assert_eq!(seq.words[1].surface, "there");
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn end_before_start_is_error() {
        let input = "#utt=u1\nhi\t0.50\t0.30\n";
        assert!(parse_word_records(input, SourceTag::A, 0.01).is_err());
    }

    #[test]
    fn small_overlap_clipped_with_warning() {
        // 5 ms overlap at a ~10.67 ms frame period: repairable
        let input = "#utt=u1\nhi\t0.000\t0.300\nthere\t0.295\t0.800\n";
        let parsed = parse_word_records(input, SourceTag::A, 0.0107).unwrap();
        assert_eq!(parsed.warnings.len(), 1);
        assert_eq!(parsed.seqs[0].words[1].start_s, 0.300);
    }

    #[test]
    fn large_overlap_is_error() {
        let input = "#utt=u1\nhi\t0.000\t0.300\nthere\t0.250\t0.800\n";
        let err = parse_word_records(input, SourceTag::A, 0.0107).unwrap_err();
        assert!(matches!(err, AlignError::Overlap { word_index: 1, .. }));
    }

    #[test]
    fn record_without_header_is_error() {
        assert!(parse_word_records("hi\t0\t1\n", SourceTag::A, 0.01).is_err());
    }

    const TG: &str = r#"File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0
xmax = 0.5
tiers? <exists>
size = 1
item []:
    item [1]:
        class = "IntervalTier"
        name = "words"
        xmin = 0
        xmax = 0.5
        intervals: size = 2
        intervals [1]:
            xmin = 0
            xmax = 0.1
            text = ""
        intervals [2]:
            xmin = 0.1
            xmax = 0.5
            text = "word"
"#;

    #[test]
    fn textgrid_excludes_silence() {
        let tg = parse_textgrid(TG, "words", "u1", &DEFAULT_SILENCE_LABELS).unwrap();
        assert_eq!(tg.seq.words.len(), 1);
        assert_eq!(tg.seq.words[0].surface, "word");
        assert_eq!(tg.seq.words[0].start_s, 0.1);
        assert_eq!(tg.xmax, 0.5);
    }

    #[test]
    fn missing_tier_names_available() {
        let err = parse_textgrid(TG, "phones", "u1", &DEFAULT_SILENCE_LABELS).unwrap_err();
        match err {
            AlignError::MissingTier { available, .. } => {
                assert_eq!(available, vec!["words".to_string()])
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn short_format_rejected() {
        let short = "File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n0\n0.5\n<exists>\n1\n\"IntervalTier\"\n\"words\"\n";
        assert!(matches!(
            parse_textgrid(short, "words", "u1", &DEFAULT_SILENCE_LABELS),
            Err(AlignError::ShortFormat)
        ));
    }

    #[test]
    fn interval_with_reversed_times_rejected() {
        let bad = TG.replace("xmax = 0.5\n            text = \"word\"", "xmax = 0.05\n            text = \"word\"");
        assert!(parse_textgrid(&bad, "words", "u1", &DEFAULT_SILENCE_LABELS).is_err());
    }

    fn seq(words: &[(&str, f64, f64)]) -> AlignmentSeq {
        AlignmentSeq {
            utterance_id: "u".into(),
            words: words
                .iter()
                .map(|(s, a, b)| WordSpan {
                    surface: s.to_string(),
                    start_s: *a,
                    end_s: *b,
                })
                .collect(),
            source: SourceTag::A,
        }
    }

    #[test]
    fn projection_basic() {
        let n = normalize_text("Hello, world");
        let spans = project_to_axis(&seq(&[("Hello,", 0.0, 0.4), ("world", 0.5, 0.9)]), &n).unwrap();
        assert_eq!(spans[0].char_begin, 0);
        assert_eq!(spans[0].char_end, 5);
        assert_eq!(spans[1].char_begin, 5);
        assert_eq!(spans[1].char_end, 10);
    }

    #[test]
    fn pure_punctuation_word_dropped() {
        let n = normalize_text("ab");
        let spans = project_to_axis(&seq(&[("a", 0.0, 0.1), ("—", 0.1, 0.2), ("b", 0.2, 0.3)]), &n)
            .unwrap();
        assert_eq!(spans.len(), 2);
    }

    #[test]
    fn unmatched_word_errors_with_index() {
        let n = normalize_text("helloworld");
        let err =
            project_to_axis(&seq(&[("hello", 0.0, 0.1), ("worldz", 0.1, 0.2)]), &n).unwrap_err();
        assert!(matches!(err, AlignError::Projection { word_index: 1, .. }));
    }

    #[test]
    fn projection_char_begin_strictly_increases() {
        let n = normalize_text("aba aba");
        let spans =
            project_to_axis(&seq(&[("ab", 0.0, 0.1), ("a", 0.1, 0.2), ("ab", 0.2, 0.3)]), &n)
                .unwrap();
        let begins: Vec<usize> = spans.iter().map(|s| s.char_begin).collect();
        assert!(begins.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(begins, vec![0, 2, 3]);
    }
}
