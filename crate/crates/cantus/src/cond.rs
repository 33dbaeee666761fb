//! Condition sequence assembly: tag tokens, optional reference embedding,
//! and tokenized lyrics, in that order, plus the `CSEQ` wire format.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io as bio;
use crate::lyrics::{serialize, LyricsDoc};
use crate::rng::Rng;
use crate::tags::TagSet;
use crate::tok;
use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Tag,
    RefEmbed,
    Lyrics,
}

impl Role {
    fn byte(self) -> u8 {
        match self {
            Role::Tag => 0,
            Role::RefEmbed => 1,
            Role::Lyrics => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Role> {
        match b {
            0 => Ok(Role::Tag),
            1 => Ok(Role::RefEmbed),
            2 => Ok(Role::Lyrics),
            _ => Err(Error::BadFormat(format!("unknown segment role byte {b}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Tokens(Vec<u32>),
    Embed(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub role: Role,
    pub payload: Payload,
}

/// Ordered condition sequence; role order is always tag, ref_embed, lyrics
/// with the ref segment optional.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CondSequence {
    pub segments: Vec<Segment>,
}

impl CondSequence {
    pub fn tag_tokens(&self) -> Option<&[u32]> {
        self.segments.iter().find(|s| s.role == Role::Tag).and_then(|s| match &s.payload {
            Payload::Tokens(t) => Some(t.as_slice()),
            Payload::Embed(_) => None,
        })
    }

    pub fn ref_embed(&self) -> Option<&[f32]> {
        self.segments.iter().find(|s| s.role == Role::RefEmbed).and_then(|s| match &s.payload {
            Payload::Embed(e) => Some(e.as_slice()),
            Payload::Tokens(_) => None,
        })
    }

    pub fn lyrics_tokens(&self) -> Option<&[u32]> {
        self.segments.iter().find(|s| s.role == Role::Lyrics).and_then(|s| match &s.payload {
            Payload::Tokens(t) => Some(t.as_slice()),
            Payload::Embed(_) => None,
        })
    }

    /// Total number of prefix positions this condition occupies in the LM:
    /// one per token plus one per embedding segment.
    pub fn prefix_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match &s.payload {
                Payload::Tokens(t) => t.len(),
                Payload::Embed(_) => 1,
            })
            .sum()
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        bio::write_magic(w, b"CSEQ", 1)?;
        bio::write_u32(w, self.segments.len() as u32)?;
        for seg in &self.segments {
            w.write_all(&[seg.role.byte()])?;
            match &seg.payload {
                Payload::Tokens(t) => {
                    w.write_all(&[0u8])?;
                    bio::write_u32(w, t.len() as u32)?;
                    bio::write_u32_slice(w, t)?;
                }
                Payload::Embed(e) => {
                    w.write_all(&[1u8])?;
                    bio::write_u32(w, e.len() as u32)?;
                    bio::write_f32_slice(w, e)?;
                }
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<CondSequence> {
        bio::read_magic(r, b"CSEQ", 1)?;
        let n = bio::read_u32(r)? as usize;
        let mut segments = Vec::with_capacity(n);
        for _ in 0..n {
            let mut hdr = [0u8; 2];
            r.read_exact(&mut hdr)?;
            let role = Role::from_byte(hdr[0])?;
            let len = bio::read_u32(r)? as usize;
            let payload = match hdr[1] {
                0 => Payload::Tokens(bio::read_u32_vec(r, len)?),
                1 => Payload::Embed(bio::read_f32_vec(r, len)?),
                b => return Err(Error::BadFormat(format!("unknown payload kind {b}"))),
            };
            segments.push(Segment { role, payload });
        }
        Ok(CondSequence { segments })
    }
}

/// Assemble the condition sequence: tags wrapped in `<tag>`/`</tag>`, the
/// optional reference embedding (dropped with `drop_ref_prob`, one uniform
/// draw consumed either way), then tokenized lyrics with markers intact.
/// An empty tag set still emits `<tag></tag>` so the segment structure is
/// stable.
pub fn build_condition(
    tags: &TagSet,
    ref_embed: Option<&[f32]>,
    lyrics: &LyricsDoc,
    drop_ref_prob: f64,
    rng: &mut Rng,
) -> CondSequence {
    let mut tag_payload = vec![tok::TAG_OPEN];
    tag_payload.extend(tok::encode_text(&tags.flat_tags().join(", ")));
    tag_payload.push(tok::TAG_CLOSE);

    let mut segments =
        vec![Segment { role: Role::Tag, payload: Payload::Tokens(tag_payload) }];

    let keep_ref = rng.random::<f64>() >= drop_ref_prob;
    if let Some(embed) = ref_embed {
        if keep_ref {
            segments
                .push(Segment { role: Role::RefEmbed, payload: Payload::Embed(embed.to_vec()) });
        }
    }

    let lyric_tokens = tok::encode_lyrics(&serialize(lyrics));
    segments.push(Segment { role: Role::Lyrics, payload: Payload::Tokens(lyric_tokens) });
    CondSequence { segments }
}
