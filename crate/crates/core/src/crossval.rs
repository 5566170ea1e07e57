//! The B@delta high-confidence filter: three consistency checks over an
//! utterance's two projected alignments, plus streaming corpus statistics.
//!
//! An utterance is retained only when (1) both alignments cover the same
//! text range, (2) their spans never cross on the char axis, and (3) every
//! comparable local span pair agrees on start, end, and duration within the
//! configured tolerance.

use std::fmt;

use thiserror::Error;

use crate::align::AxisSpan;

#[derive(Debug, Error)]
pub enum CrossvalError {
    #[error("boundary tolerance must be positive, got {0}")]
    InvalidDelta(f64),
    #[error("boundary check called on an order-inconsistent or coverage-mismatched pair")]
    NotComparable,
}

/// The two projected alignments of one utterance over the same axis.
#[derive(Debug, Clone)]
pub struct UtterancePair {
    pub utterance_id: String,
    pub normalized_text: String,
    pub spans_a: Vec<AxisSpan>,
    pub spans_b: Vec<AxisSpan>,
}

/// Which check failed, if any. Checks run coverage -> order -> boundary and
/// short-circuit; the label is diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailedCheck {
    None,
    Coverage,
    Order,
    Boundary,
}

impl fmt::Display for FailedCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailedCheck::None => "none",
            FailedCheck::Coverage => "coverage",
            FailedCheck::Order => "order",
            FailedCheck::Boundary => "boundary",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterVerdict {
    pub passed: bool,
    pub failed_check: FailedCheck,
    pub worst_boundary_ms: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FilterConfig {
    pub delta_ms: f64,
}

impl FilterConfig {
    pub fn new(delta_ms: f64) -> Result<Self, CrossvalError> {
        if !(delta_ms.is_finite() && delta_ms > 0.0) {
            return Err(CrossvalError::InvalidDelta(delta_ms));
        }
        Ok(FilterConfig { delta_ms })
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { delta_ms: 150.0 }
    }
}

/// Coalesce ordered, non-overlapping char spans into maximal intervals.
fn coalesced(spans: &[AxisSpan]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for s in spans {
        match out.last_mut() {
            Some(last) if s.char_begin == last.1 => last.1 = s.char_end,
            _ => out.push((s.char_begin, s.char_end)),
        }
    }
    out
}

/// Check 1: both alignments cover the same set of axis characters.
pub fn check_coverage(pair: &UtterancePair) -> bool {
    coalesced(&pair.spans_a) == coalesced(&pair.spans_b)
}

/// Check 2: no span of one source partially overlaps a span of the other;
/// every pair is nested or disjoint (the merged family is laminar).
pub fn check_order_consistency(pair: &UtterancePair) -> bool {
    for a in &pair.spans_a {
        for b in &pair.spans_b {
            let intersect = a.char_begin < b.char_end && b.char_begin < a.char_end;
            if !intersect {
                continue;
            }
            let a_in_b = b.char_begin <= a.char_begin && a.char_end <= b.char_end;
            let b_in_a = a.char_begin <= b.char_begin && b.char_end <= a.char_end;
            if !(a_in_b || b_in_a) {
                return false;
            }
        }
    }
    true
}

/// Alignment sources emit decimal seconds with at least 1 ms precision;
/// rounding differences to the nearest 1e-3 ms strips binary float noise
/// without touching real distinctions.
fn diff_ms(a_s: f64, b_s: f64) -> f64 {
    ((a_s - b_s).abs() * 1_000_000.0).round() / 1000.0
}

/// Minimal comparable blocks: consecutive spans of each source grouped so
/// both groups cover the identical char set. Well-defined under laminarity
/// plus equal coverage.
fn comparable_blocks(
    pair: &UtterancePair,
) -> Result<Vec<((f64, f64), (f64, f64))>, CrossvalError> {
    let a = &pair.spans_a;
    let b = &pair.spans_b;
    let mut blocks = Vec::new();
    let (mut ia, mut ib) = (0usize, 0usize);
    while ia < a.len() || ib < b.len() {
        let (Some(first_a), Some(first_b)) = (a.get(ia), b.get(ib)) else {
            return Err(CrossvalError::NotComparable);
        };
        let mut cov_a = vec![(first_a.char_begin, first_a.char_end)];
        let mut cov_b = vec![(first_b.char_begin, first_b.char_end)];
        let (mut ja, mut jb) = (ia + 1, ib + 1);
        loop {
            if cov_a == cov_b {
                break;
            }
            let end_a = cov_a.last().unwrap().1;
            let end_b = cov_b.last().unwrap().1;
            let take_a = if end_a < end_b {
                true
            } else if end_b < end_a {
                false
            } else {
                // equal frontier but different gap structure: coverage mismatch
                return Err(CrossvalError::NotComparable);
            };
            if take_a {
                let Some(next) = a.get(ja) else {
                    return Err(CrossvalError::NotComparable);
                };
                if next.char_begin == cov_a.last().unwrap().1 {
                    cov_a.last_mut().unwrap().1 = next.char_end;
                } else {
                    cov_a.push((next.char_begin, next.char_end));
                }
                ja += 1;
            } else {
                let Some(next) = b.get(jb) else {
                    return Err(CrossvalError::NotComparable);
                };
                if next.char_begin == cov_b.last().unwrap().1 {
                    cov_b.last_mut().unwrap().1 = next.char_end;
                } else {
                    cov_b.push((next.char_begin, next.char_end));
                }
                jb += 1;
            }
        }
        let block_a = (a[ia].start_s, a[ja - 1].end_s);
        let block_b = (b[ib].start_s, b[jb - 1].end_s);
        blocks.push((block_a, block_b));
        ia = ja;
        ib = jb;
    }
    Ok(blocks)
}

/// Check 3: for every comparable block, max(|d start|, |d end|, |d duration|)
/// in ms must not exceed delta. Returns (passed, worst observed ms).
pub fn check_boundary_distance(
    pair: &UtterancePair,
    cfg: &FilterConfig,
) -> Result<(bool, f64), CrossvalError> {
    if !check_order_consistency(pair) {
        return Err(CrossvalError::NotComparable);
    }
    let blocks = comparable_blocks(pair)?;
    let mut worst: f64 = 0.0;
    for ((a_start, a_end), (b_start, b_end)) in blocks {
        let d_start = diff_ms(a_start, b_start);
        let d_end = diff_ms(a_end, b_end);
        let d_dur = diff_ms(a_end - a_start, b_end - b_start);
        worst = worst.max(d_start).max(d_end).max(d_dur);
    }
    Ok((worst <= cfg.delta_ms, worst))
}

/// Run all three checks, coverage -> order -> boundary, short-circuiting at
/// the first failure.
pub fn filter_utterance(pair: &UtterancePair, cfg: &FilterConfig) -> FilterVerdict {
    if !check_coverage(pair) {
        return FilterVerdict {
            passed: false,
            failed_check: FailedCheck::Coverage,
            worst_boundary_ms: 0.0,
        };
    }
    if !check_order_consistency(pair) {
        return FilterVerdict {
            passed: false,
            failed_check: FailedCheck::Order,
            worst_boundary_ms: 0.0,
        };
    }
    match check_boundary_distance(pair, cfg) {
        Ok((passed, worst)) => FilterVerdict {
            passed,
            failed_check: if passed {
                FailedCheck::None
            } else {
                FailedCheck::Boundary
            },
            worst_boundary_ms: worst,
        },
        // coverage+order already passed, so this is unreachable in practice;
        // treat a block-formation failure as a coverage-class mismatch
        Err(_) => FilterVerdict {
            passed: false,
            failed_check: FailedCheck::Coverage,
            worst_boundary_ms: 0.0,
        },
    }
}

/// Streaming corpus counts: single pass, associative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub total: u64,
    pub comparable: u64,
    pub passed: u64,
}

impl CorpusStats {
    /// An utterance lacking one of the two alignments.
    pub fn record_unpaired(&mut self) {
        self.total += 1;
    }

    pub fn record(&mut self, verdict: &FilterVerdict) {
        self.total += 1;
        self.comparable += 1;
        if verdict.passed {
            self.passed += 1;
        }
    }

    pub fn pass_rate(&self) -> f64 {
        if self.comparable == 0 {
            0.0
        } else {
            self.passed as f64 / self.comparable as f64
        }
    }

    pub fn merge(&mut self, other: &CorpusStats) {
        self.total += other.total;
        self.comparable += other.comparable;
        self.passed += other.passed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(cb: usize, ce: usize, ss: f64, es: f64) -> AxisSpan {
        AxisSpan {
            char_begin: cb,
            char_end: ce,
            start_s: ss,
            end_s: es,
        }
    }

    fn pair(a: Vec<AxisSpan>, b: Vec<AxisSpan>) -> UtterancePair {
        UtterancePair {
            utterance_id: "u".into(),
            normalized_text: String::new(),
            spans_a: a,
            spans_b: b,
        }
    }

    #[test]
    fn coverage_identity_and_missing_word() {
        let a = vec![span(0, 4, 0.0, 0.4), span(4, 8, 0.4, 0.8)];
        assert!(check_coverage(&pair(a.clone(), a.clone())));
        let b_short = vec![span(0, 4, 0.0, 0.4)];
        assert!(!check_coverage(&pair(a.clone(), b_short)));
        // same coverage, different grouping
        let b_split = vec![span(0, 2, 0.0, 0.2), span(2, 8, 0.2, 0.8)];
        assert!(check_coverage(&pair(a, b_split)));
    }

    #[test]
    fn order_nested_ok_crossing_fails() {
        let a = vec![span(0, 5, 0.0, 0.5), span(5, 10, 0.5, 1.0)];
        let b_whole = vec![span(0, 10, 0.0, 1.0)];
        assert!(check_order_consistency(&pair(a.clone(), b_whole)));
        let a2 = vec![span(0, 6, 0.0, 0.6), span(6, 10, 0.6, 1.0)];
        let b2 = vec![span(0, 4, 0.0, 0.4), span(4, 10, 0.4, 1.0)];
        assert!(!check_order_consistency(&pair(a2, b2)));
        assert!(check_order_consistency(&pair(a.clone(), a)));
    }

    #[test]
    fn boundary_distance_cases() {
        let cfg = FilterConfig::default();
        let a = vec![span(0, 4, 0.0, 0.5)];
        assert_eq!(
            check_boundary_distance(&pair(a.clone(), a.clone()), &cfg).unwrap(),
            (true, 0.0)
        );
        // start shifted 151 ms: fail, worst 151
        let b = vec![span(0, 4, 0.151, 0.5)];
        let (ok, worst) = check_boundary_distance(&pair(a.clone(), b), &cfg).unwrap();
        assert!(!ok);
        assert!((worst - 151.0).abs() < 1e-9, "worst={worst}");
        // start 100 ms, end 40 ms -> duration 60 ms, worst 100: pass
        let b = vec![span(0, 4, 0.1, 0.54)];
        let (ok, worst) = check_boundary_distance(&pair(a, b), &cfg).unwrap();
        assert!(ok);
        assert!((worst - 100.0).abs() < 1e-9, "worst={worst}");
    }

    #[test]
    fn boundary_groups_nested_spans_into_blocks() {
        // A splits what B keeps whole; block times compare A's outer extent
        let a = vec![span(0, 3, 0.0, 0.3), span(3, 6, 0.35, 0.62)];
        let b = vec![span(0, 6, 0.0, 0.6)];
        let (ok, worst) =
            check_boundary_distance(&pair(a, b), &FilterConfig::default()).unwrap();
        assert!(ok);
        assert!((worst - 20.0).abs() < 1e-9, "worst={worst}");
    }

    #[test]
    fn boundary_on_order_inconsistent_pair_is_contract_error() {
        let a = vec![span(0, 6, 0.0, 0.6), span(6, 10, 0.6, 1.0)];
        let b = vec![span(0, 4, 0.0, 0.4), span(4, 10, 0.4, 1.0)];
        assert!(matches!(
            check_boundary_distance(&pair(a, b), &FilterConfig::default()),
            Err(CrossvalError::NotComparable)
        ));
    }

    #[test]
    fn boundary_at_exact_delta_passes() {
        // fixture times are decimal; the micro-rounding keeps 150.0 exactly
        let a = vec![span(0, 4, 0.500, 1.000)];
        let b = vec![span(0, 4, 0.650, 1.050)];
        let (ok, worst) =
            check_boundary_distance(&pair(a, b), &FilterConfig::default()).unwrap();
        assert!((worst - 150.0).abs() < 1e-12, "worst={worst}");
        assert!(ok);
    }

    #[test]
    fn filter_short_circuits_in_order() {
        let cfg = FilterConfig::default();
        let a = vec![span(0, 4, 0.0, 0.4), span(4, 8, 0.4, 0.8)];
        let ok = filter_utterance(&pair(a.clone(), a.clone()), &cfg);
        assert!(ok.passed);
        assert_eq!(ok.failed_check, FailedCheck::None);

        // coverage fails even though boundary would also fail
        let b = vec![span(0, 4, 3.0, 3.4)];
        let v = filter_utterance(&pair(a.clone(), b), &cfg);
        assert_eq!(v.failed_check, FailedCheck::Coverage);

        // boundary fail reports worst
        let b = vec![span(0, 4, 0.2, 0.6), span(4, 8, 0.6, 1.0)];
        let v = filter_utterance(&pair(a, b), &cfg);
        assert_eq!(v.failed_check, FailedCheck::Boundary);
        assert!((v.worst_boundary_ms - 200.0).abs() < 1e-9);
    }

    #[test]
    fn identical_pair_passes_for_any_delta() {
        let a = vec![span(0, 4, 0.0, 0.4), span(5, 9, 0.5, 0.9)];
        for delta in [0.001, 1.0, 150.0, 10_000.0] {
            let cfg = FilterConfig::new(delta).unwrap();
            assert!(filter_utterance(&pair(a.clone(), a.clone()), &cfg).passed);
        }
    }

    #[test]
    fn checks_are_symmetric() {
        let a = vec![span(0, 3, 0.0, 0.3), span(3, 6, 0.35, 0.62)];
        let b = vec![span(0, 6, 0.0, 0.6)];
        let cfg = FilterConfig::default();
        assert_eq!(
            check_order_consistency(&pair(a.clone(), b.clone())),
            check_order_consistency(&pair(b.clone(), a.clone()))
        );
        let (ok_ab, worst_ab) = check_boundary_distance(&pair(a.clone(), b.clone()), &cfg).unwrap();
        let (ok_ba, worst_ba) = check_boundary_distance(&pair(b, a), &cfg).unwrap();
        assert_eq!(ok_ab, ok_ba);
        assert!((worst_ab - worst_ba).abs() < 1e-12);
    }

    #[test]
    fn corpus_stats_counts() {
        let mut stats = CorpusStats::default();
        assert_eq!(stats.pass_rate(), 0.0);
        let pass = FilterVerdict {
            passed: true,
            failed_check: FailedCheck::None,
            worst_boundary_ms: 0.0,
        };
        let fail = FilterVerdict {
            passed: false,
            failed_check: FailedCheck::Order,
            worst_boundary_ms: 0.0,
        };
        stats.record(&pass);
        stats.record(&pass);
        stats.record(&pass);
        stats.record(&fail);
        assert_eq!(stats.total, 4);
        assert_eq!(stats.comparable, 4);
        assert_eq!(stats.passed, 3);
        assert!((stats.pass_rate() - 0.75).abs() < 1e-12);
        stats.record_unpaired();
        assert_eq!(stats.total, 5);
        assert_eq!(stats.comparable, 4);
    }
}
