//! Byte-level tokenizer with reserved special ids.
//!
//! Ids 0..=255 are raw bytes; `<tag>`/`</tag>` and the six structural
//! markers get single reserved ids so they survive tokenization as atomic
//! units. Unknown markers fall back to their byte spelling.

use crate::lyrics::MarkerKind;

pub const TAG_OPEN: u32 = 256;
pub const TAG_CLOSE: u32 = 257;
pub const MARKER_BASE: u32 = 258;
/// Total text vocabulary: bytes + 2 tag delimiters + 6 structural markers.
pub const TEXT_VOCAB: usize = 264;

pub fn marker_token(kind: &MarkerKind) -> Option<u32> {
    let off = match kind {
        MarkerKind::Intro => 0,
        MarkerKind::Verse => 1,
        MarkerKind::Prechorus => 2,
        MarkerKind::Chorus => 3,
        MarkerKind::Bridge => 4,
        MarkerKind::Outro => 5,
        MarkerKind::Other(_) => return None,
    };
    Some(MARKER_BASE + off)
}

pub fn token_marker(id: u32) -> Option<MarkerKind> {
    match id.checked_sub(MARKER_BASE)? {
        0 => Some(MarkerKind::Intro),
        1 => Some(MarkerKind::Verse),
        2 => Some(MarkerKind::Prechorus),
        3 => Some(MarkerKind::Chorus),
        4 => Some(MarkerKind::Bridge),
        5 => Some(MarkerKind::Outro),
        _ => None,
    }
}

/// Tokenize plain text as raw bytes.
pub fn encode_text(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Tokenize serialized lyrics: known marker lines become a single marker id
/// followed by a newline byte, everything else is bytes.
pub fn encode_lyrics(serialized: &str) -> Vec<u32> {
    let mut out = Vec::new();
    for line in serialized.split_inclusive('\n') {
        let (body, nl) = match line.strip_suffix('\n') {
            Some(b) => (b, true),
            None => (line, false),
        };
        let trimmed = body.trim();
        let mut emitted = false;
        if trimmed.starts_with('[') && trimmed.ends_with(']') {
            let inner = &trimmed[1..trimmed.len() - 1];
            if let Some(id) = marker_token(&MarkerKind::from_name(inner)) {
                out.push(id);
                emitted = true;
            }
        }
        if !emitted {
            out.extend(body.bytes().map(u32::from));
        }
        if nl {
            out.push(u32::from(b'\n'));
        }
    }
    out
}

/// Decode a token stream back to text (markers re-expand to `[Name]`).
pub fn decode(tokens: &[u32]) -> String {
    let mut bytes = Vec::new();
    for &t in tokens {
        if t < 256 {
            bytes.push(t as u8);
        } else if t == TAG_OPEN {
            bytes.extend_from_slice(b"<tag>");
        } else if t == TAG_CLOSE {
            bytes.extend_from_slice(b"</tag>");
        } else if let Some(kind) = token_marker(t) {
            bytes.extend_from_slice(format!("[{}]", kind.canonical_name()).as_bytes());
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}
