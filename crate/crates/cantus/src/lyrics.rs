//! Structured lyrics: bracketed section markers, optional per-section style
//! annotations, and a canonical serialized form.
//!
//! Parsing rules:
//! - a line whose trimmed form starts with `[` must be a well-formed
//!   bracketed line `[...]` alone on the line, otherwise it is rejected;
//! - every bracketed line opens a new section, except that in fine-grained
//!   mode a bracketed comma list immediately after a marker line binds to
//!   that section as its style annotation (bracketed lines spelling one of
//!   the six structural names always open sections);
//! - lines before the first marker form an implicit `[preamble]` section;
//! - blank lines between sections are dropped, interior blank lines are kept.

use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MarkerKind {
    Intro,
    Verse,
    Prechorus,
    Chorus,
    Bridge,
    Outro,
    Other(String),
}

impl MarkerKind {
    /// Case-insensitive lookup; unknown names are preserved verbatim.
    pub fn from_name(name: &str) -> Self {
        let name = name.trim();
        match name.to_ascii_lowercase().as_str() {
            "intro" => MarkerKind::Intro,
            "verse" => MarkerKind::Verse,
            "prechorus" => MarkerKind::Prechorus,
            "chorus" => MarkerKind::Chorus,
            "bridge" => MarkerKind::Bridge,
            "outro" => MarkerKind::Outro,
            _ => MarkerKind::Other(name.to_string()),
        }
    }

    pub fn canonical_name(&self) -> &str {
        match self {
            MarkerKind::Intro => "Intro",
            MarkerKind::Verse => "Verse",
            MarkerKind::Prechorus => "Prechorus",
            MarkerKind::Chorus => "Chorus",
            MarkerKind::Bridge => "Bridge",
            MarkerKind::Outro => "Outro",
            MarkerKind::Other(name) => name,
        }
    }

    pub fn is_known(&self) -> bool {
        !matches!(self, MarkerKind::Other(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleAnnotation {
    pub phrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub marker: MarkerKind,
    pub annotation: Option<StyleAnnotation>,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LyricsDoc {
    pub sections: Vec<Section>,
}

impl LyricsDoc {
    pub fn markers(&self) -> Vec<&MarkerKind> {
        self.sections.iter().map(|s| &s.marker).collect()
    }
}

/// Inner text of a well-formed bracketed line, or an error for a dangling
/// `[`. Trailing content after `]` is rejected as well: markers live alone
/// on their line.
fn bracket_inner(line: &str) -> Result<Option<&str>> {
    let t = line.trim();
    if !t.starts_with('[') {
        return Ok(None);
    }
    if !t.ends_with(']') || t.len() < 2 {
        return Err(Error::MalformedMarker(line.to_string()));
    }
    let inner = &t[1..t.len() - 1];
    if inner.contains(']') || inner.contains('[') {
        return Err(Error::MalformedMarker(line.to_string()));
    }
    Ok(Some(inner))
}

fn finish_section(mut s: Section, out: &mut Vec<Section>) {
    while s.lines.first().is_some_and(|l| l.trim().is_empty()) {
        s.lines.remove(0);
    }
    while s.lines.last().is_some_and(|l| l.trim().is_empty()) {
        s.lines.pop();
    }
    out.push(s);
}

fn parse_impl(text: &str, finegrained: bool) -> Result<LyricsDoc> {
    let mut sections = Vec::new();
    let mut current: Option<Section> = None;
    let mut preamble: Vec<String> = Vec::new();
    let mut just_opened = false;

    for raw in text.lines() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        match bracket_inner(line)? {
            Some(inner) => {
                let kind = MarkerKind::from_name(inner);
                let annotation_slot = finegrained
                    && just_opened
                    && !kind.is_known()
                    && current.as_ref().is_some_and(|c| c.annotation.is_none());
                if annotation_slot {
                    let phrases: Vec<String> = inner
                        .split(',')
                        .map(|p| p.trim().to_string())
                        .filter(|p| !p.is_empty())
                        .collect();
                    if !phrases.is_empty() {
                        current.as_mut().unwrap().annotation = Some(StyleAnnotation { phrases });
                        just_opened = false;
                        continue;
                    }
                }
                if let Some(prev) = current.take() {
                    finish_section(prev, &mut sections);
                }
                current = Some(Section { marker: kind, annotation: None, lines: Vec::new() });
                just_opened = true;
            }
            None => {
                if line.trim().is_empty() {
                    just_opened = false;
                    if let Some(c) = current.as_mut() {
                        c.lines.push(String::new());
                    }
                    continue;
                }
                just_opened = false;
                match current.as_mut() {
                    Some(c) => c.lines.push(line.to_string()),
                    None => preamble.push(line.to_string()),
                }
            }
        }
    }
    if let Some(prev) = current.take() {
        finish_section(prev, &mut sections);
    }
    if !preamble.is_empty() {
        let mut all = vec![Section {
            marker: MarkerKind::Other("preamble".to_string()),
            annotation: None,
            lines: preamble,
        }];
        all.extend(sections);
        sections = all;
    }
    Ok(LyricsDoc { sections })
}

/// Parse structured lyrics; every bracketed line opens a section.
pub fn parse_lyrics(text: &str) -> Result<LyricsDoc> {
    parse_impl(text, false)
}

/// Parse lyrics with fine-grained style annotations bound to their sections.
pub fn parse_finegrained(text: &str) -> Result<LyricsDoc> {
    parse_impl(text, true)
}

/// Canonical text form: sections separated by one blank line, marker line,
/// optional annotation line, then the lyric lines.
pub fn serialize(doc: &LyricsDoc) -> String {
    let mut out = String::new();
    for (i, s) in doc.sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push('[');
        out.push_str(s.marker.canonical_name());
        out.push_str("]\n");
        if let Some(ann) = &s.annotation {
            out.push('[');
            out.push_str(&ann.phrases.join(", "));
            out.push_str("]\n");
        }
        for line in &s.lines {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Remove annotation lines from lyrics text, leaving structure untouched.
pub fn strip_annotations(text: &str) -> Result<String> {
    let mut doc = parse_finegrained(text)?;
    for s in &mut doc.sections {
        s.annotation = None;
    }
    Ok(serialize(&doc))
}

const WORDS: &[&str] = &[
    "river", "neon", "static", "ember", "glass", "motor", "velvet", "thunder", "hollow", "wire",
    "sugar", "phantom", "orbit", "silver", "echo", "garden", "smoke", "casket", "vinyl", "north",
];

const KNOWN: &[MarkerKind] = &[
    MarkerKind::Intro,
    MarkerKind::Verse,
    MarkerKind::Prechorus,
    MarkerKind::Chorus,
    MarkerKind::Bridge,
    MarkerKind::Outro,
];

fn gen_line(rng: &mut Rng) -> String {
    let n = rng.random_range(2..=6);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Generate a random document from the lyrics grammar. Canonical by
/// construction: `parse(serialize(doc)) == doc`.
pub fn gen_doc(rng: &mut Rng, with_annotations: bool) -> LyricsDoc {
    let n_sections = rng.random_range(1..=8);
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let marker = if rng.random_range(0..10) < 7 {
            KNOWN[rng.random_range(0..KNOWN.len())].clone()
        } else {
            let mut w = WORDS[rng.random_range(0..WORDS.len())].to_string();
            if let Some(c) = w.get_mut(0..1) {
                c.make_ascii_uppercase();
            }
            // names colliding with structural markers would change kind on
            // re-parse
            if MarkerKind::from_name(&w).is_known() {
                w.push('x');
            }
            MarkerKind::Other(w)
        };
        let annotation = if with_annotations && rng.random_range(0..4) > 0 {
            let n = rng.random_range(1..=4);
            let phrases: Vec<String> = (0..n).map(|_| gen_line(rng)).collect();
            // a single-phrase annotation spelling a structural name would
            // re-parse as a marker
            if n == 1 && MarkerKind::from_name(&phrases[0]).is_known() {
                None
            } else {
                Some(StyleAnnotation { phrases })
            }
        } else {
            None
        };
        let n_lines = rng.random_range(1..=5);
        let mut lines: Vec<String> = (0..n_lines).map(|_| gen_line(rng)).collect();
        if n_lines >= 3 && rng.random_range(0..5) == 0 {
            // interior blank line, never at the edges
            let at = rng.random_range(1..n_lines);
            lines.insert(at, String::new());
        }
        sections.push(Section { marker, annotation, lines });
    }
    LyricsDoc { sections }
}

/// Sample lyrics used by tests and the synthetic training corpus.
pub mod samples {
    /// A structurally annotated song: six sections, two-line outro.
    pub const STRUCTURE: &str = "\
[Chorus]
My chest is vibrating like a V8 motor
Spinning faster, getting hotter
Every beat is a piston stroke
Leaving the past up in smoke

[Verse]
Cold air intake, breathing deep
Awake right now, no time for sleep
The valves are open, the rhythm is true
Driving this chassis straight to you

[Prechorus]
Throttle wide open, floor to the mat
No looking back, no time for that
Ignition sparks the electric blue

[Chorus]
My chest is vibrating like a V8 motor
Spinning faster, getting hotter
Every beat is a piston stroke
Leaving the past up in smoke

[Bridge]
Overheating in the red zone
But I can't stop this skin and bone
From racing down this road alone

[Outro]
Cut the engine.
Fade to black.
";

    /// The same grammar with per-section fine-grained style annotations.
    pub const FINEGRAINED: &str = "\
[Intro]
[Subtle electronic pulse, atmospheric build, anticipatory mood, understated energy]
Green leaves heavy on the bough
The secret starts right here and now

[Verse]
[Steady rhythmic foundation, introspective vocal delivery, narrative progression, moderate intensity]
No colors bursting in the spring air
No petals dancing in the wind without a care
People walk by and they don't see the show
But deep inside the skin,the sweetness starts to grow
A mystery wrapped up in a humble disguise
Hidden away from all the prying eyes

[Prechorus]
[Gradual crescendo, rising vocal urgency, building anticipation, subtle harmonic shift]
It happens in the dark,unseen
Beneath the canopy of green
Waiting for the perfect time to be

[Chorus]
[Explosive melodic hook, triumphant vocal expression, high energy sustain, core thematic statement]
Oh,the flower blooms inside the fruit
A hidden treasure,quiet and mute
We don't need the applause or the light
To make something beautiful and bright
Sweetness saved for those who know the truth
The essence of an everlasting youth

[Bridge]
[Melodic contrast, reflective vocal tone, shift in perspective, introspective pause]
Let the others chase the butterfly
Let them fade beneath the summer sky
We hold our magic close to the core

[Outro]
[Gradual fade, lingering melodic motif, sense of resolution, gentle conclusion]
Open it up and see
The secret of the fig tree
";
}
