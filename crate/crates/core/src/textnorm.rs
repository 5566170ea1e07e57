//! Text normalization onto the canonical comparison axis: lowercase, keep
//! only ASCII alphanumerics and CJK Unified Ideographs, drop everything else.
//! An index map records where each retained raw character landed.

/// Normalization options. The base CJK block (U+4E00..=U+9FFF) is always
/// retained; extension blocks are off by default.
#[derive(Debug, Clone, Copy)]
pub struct NormOptions {
    pub cjk_extensions: bool,
}

impl Default for NormOptions {
    fn default() -> Self {
        NormOptions {
            cjk_extensions: false,
        }
    }
}

/// Normalized text plus the raw-char -> normalized-char index map.
///
/// `raw_to_norm[i]` is the normalized position of the first retained
/// character produced by raw character `i`, or None if it was dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalized {
    pub text: String,
    pub chars: Vec<char>,
    pub raw_to_norm: Vec<Option<usize>>,
}

impl Normalized {
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }
}

fn retained(c: char, opts: &NormOptions) -> bool {
    if c.is_ascii_alphanumeric() {
        return true;
    }
    if ('\u{4e00}'..='\u{9fff}').contains(&c) {
        return true;
    }
    if opts.cjk_extensions {
        // Extension A and the supplementary-plane extensions
        if ('\u{3400}'..='\u{4dbf}').contains(&c) || ('\u{20000}'..='\u{2ebef}').contains(&c) {
            return true;
        }
    }
    false
}

pub fn normalize_text(raw: &str) -> Normalized {
    normalize_text_with(raw, &NormOptions::default())
}

pub fn normalize_text_with(raw: &str, opts: &NormOptions) -> Normalized {
    let mut chars = Vec::new();
    let mut raw_to_norm = Vec::new();
    for raw_char in raw.chars() {
        let mut first: Option<usize> = None;
        for lowered in raw_char.to_lowercase() {
            if retained(lowered, opts) {
                if first.is_none() {
                    first = Some(chars.len());
                }
                chars.push(lowered);
            }
        }
        raw_to_norm.push(first);
    }
    Normalized {
        text: chars.iter().collect(),
        chars,
        raw_to_norm,
    }
}
