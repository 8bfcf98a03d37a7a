//! Canonical one-line query text:
//!
//! ```text
//! query  := caption (";" region)*
//! region := "<" int "," int "," int "," int ">" text
//! ```
//!
//! Integers are bin indices. Whitespace around every element is ignored.

use std::fmt;

use thiserror::Error;

use super::{normalize_text, Query, QueryError, RegionSpec};
use crate::coords::{bins_to_box, box_to_bins, QuantizerConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    fn at(offset: usize, message: impl fmt::Display) -> Self {
        Self { offset, message: message.to_string() }
    }
}

pub fn serialize(q: &Query, cfg: &QuantizerConfig) -> Result<String, QueryError> {
    let mut out = q.caption.clone();
    for region in &q.regions {
        let [x1, y1, x2, y2] = box_to_bins(&region.bbox, cfg)?.map(|b| b.index());
        out.push_str(&format!(" ; <{x1},{y1},{x2},{y2}> {}", region.text));
    }
    Ok(out.trim_start().to_string())
}

pub fn parse(text: &str, cfg: &QuantizerConfig) -> Result<Query, ParseError> {
    let mut segments = split_segments(text);
    let (cap_off, caption) = segments.remove(0);
    if let Some(i) = caption.find(['<', '>']) {
        return Err(ParseError::at(cap_off + i, "position group outside a region clause"));
    }
    let regions = segments
        .into_iter()
        .map(|(off, seg)| parse_region(off, seg, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Query { caption: normalize_text(caption), regions })
}

fn split_segments(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c == ';' {
            out.push((start, &text[start..i]));
            start = i + 1;
        }
    }
    out.push((start, &text[start..]));
    out
}

fn parse_region(base: usize, seg: &str, cfg: &QuantizerConfig) -> Result<RegionSpec, ParseError> {
    let lead = seg.len() - seg.trim_start().len();
    let open = base + lead;
    let body = &seg[lead..];
    if !body.starts_with('<') {
        return Err(ParseError::at(open, "expected '<' to start a position group"));
    }
    let close_rel = body.find('>').ok_or_else(|| ParseError::at(open, "unclosed '<'"))?;
    let inner = &body[1..close_rel];
    if let Some(i) = inner.find('<') {
        return Err(ParseError::at(open + 1 + i, "nested '<' in position group"));
    }

    let mut bins = [0usize; 4];
    let mut count = 0;
    let mut item_start = 0;
    for item in inner.split(',') {
        let item_off = open + 1 + item_start;
        item_start += item.len() + 1;
        if count == 4 {
            return Err(ParseError::at(item_off, "expected exactly 4 coordinates"));
        }
        let trimmed = item.trim();
        let num_off = item_off + (item.len() - item.trim_start().len());
        if trimmed.is_empty() || !trimmed.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ParseError::at(num_off, format!("expected a bin index, found {trimmed:?}")));
        }
        let v: usize = trimmed
            .parse()
            .map_err(|_| ParseError::at(num_off, format!("bin index {trimmed} too large")))?;
        if v >= cfg.n_bins() {
            return Err(ParseError::at(
                num_off,
                format!("bin index {v} out of range for {} bins", cfg.n_bins()),
            ));
        }
        bins[count] = v;
        count += 1;
    }
    if count != 4 {
        return Err(ParseError::at(open, format!("expected 4 coordinates, found {count}")));
    }
    if bins[0] >= bins[2] {
        return Err(ParseError::at(open, format!("x1 bin {} must be below x2 bin {}", bins[0], bins[2])));
    }
    if bins[1] >= bins[3] {
        return Err(ParseError::at(open, format!("y1 bin {} must be below y2 bin {}", bins[1], bins[3])));
    }
    let bbox = bins_to_box(bins, cfg).map_err(|e| ParseError::at(open, e))?;

    let text_off = open + close_rel + 1;
    let rest = &body[close_rel + 1..];
    if let Some(i) = rest.find(['<', '>']) {
        return Err(ParseError::at(text_off + i, "unexpected bracket in region description"));
    }
    let text = normalize_text(rest);
    if text.is_empty() {
        return Err(ParseError::at(text_off, "empty region description"));
    }
    Ok(RegionSpec { bbox, text })
}
