//! Annotation file parsers and writers.
//!
//! Each file starts with a fixed header line followed by one line per frame;
//! frame `i` sits on line `i + 2`. LF and CRLF endings are both accepted.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::types::{AuLabels, ExpressionLabel, VaLabel, AU_NAMES, EXPR_NAMES, N_AUS, VA_SENTINEL};

pub const VA_HEADER: &str = "valence,arousal";

pub fn expr_header() -> String {
    EXPR_NAMES.join(",")
}

pub fn au_header() -> String {
    AU_NAMES.join(",")
}

/// Splits off and checks the header, yielding `(line_number, body_line)`.
fn body_lines<'a>(
    text: &'a str,
    header: &str,
) -> Result<impl Iterator<Item = (usize, &'a str)>> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut lines: Vec<&str> = text.lines().collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    let Some(first) = lines.first() else {
        return Err(Error::parse(1, "missing header"));
    };
    if first.trim() != header {
        return Err(Error::parse(
            1,
            format!("expected header `{header}`, found `{}`", first.trim()),
        ));
    }
    Ok(lines.into_iter().enumerate().skip(1).map(|(i, l)| (i + 1, l)))
}

fn fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

/// Parses a VA annotation file. Sentinel frames are returned as
/// [`VaLabel::sentinel`] values and must be filtered before use.
pub fn parse_va_file(text: &str, video_id: &str) -> Result<Vec<(usize, VaLabel)>> {
    let mut out = Vec::new();
    for (line_no, line) in body_lines(text, VA_HEADER)? {
        let parts = fields(line);
        if parts.len() != 2 {
            return Err(Error::parse(
                line_no,
                format!("{video_id}: expected 2 values, found {}", parts.len()),
            ));
        }
        let mut vals = [0.0f64; 2];
        for (dst, raw) in vals.iter_mut().zip(&parts) {
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::parse(line_no, format!("{video_id}: bad number `{raw}`")))?;
            if v != VA_SENTINEL && !(v.is_finite() && (-1.0..=1.0).contains(&v)) {
                return Err(Error::parse(
                    line_no,
                    format!("{video_id}: value {v} outside [-1, 1]"),
                ));
            }
            *dst = v;
        }
        let label = if vals.contains(&VA_SENTINEL) {
            VaLabel::sentinel()
        } else {
            VaLabel::new(vals[0], vals[1])
        };
        out.push((out.len(), label));
    }
    Ok(out)
}

pub fn parse_expr_file(text: &str, video_id: &str) -> Result<Vec<(usize, ExpressionLabel)>> {
    let header = expr_header();
    let mut out = Vec::new();
    for (line_no, line) in body_lines(text, &header)? {
        let raw = line.trim();
        let v: i64 = raw
            .parse()
            .map_err(|_| Error::parse(line_no, format!("{video_id}: bad integer `{raw}`")))?;
        let label = ExpressionLabel::new(v)
            .map_err(|_| Error::parse(line_no, format!("{video_id}: label {v} outside -1..=7")))?;
        out.push((out.len(), label));
    }
    Ok(out)
}

pub fn parse_au_file(text: &str, video_id: &str) -> Result<Vec<(usize, AuLabels)>> {
    let header = au_header();
    let mut out = Vec::new();
    for (line_no, line) in body_lines(text, &header)? {
        let parts = fields(line);
        if parts.len() != N_AUS {
            return Err(Error::parse(
                line_no,
                format!("{video_id}: expected {N_AUS} values, found {}", parts.len()),
            ));
        }
        let mut vals = [0i64; N_AUS];
        for (dst, raw) in vals.iter_mut().zip(&parts) {
            *dst = raw
                .parse()
                .map_err(|_| Error::parse(line_no, format!("{video_id}: bad integer `{raw}`")))?;
        }
        let labels = AuLabels::from_slice(&vals)
            .map_err(|e| Error::parse(line_no, format!("{video_id}: {e}")))?;
        out.push((out.len(), labels));
    }
    Ok(out)
}

pub fn write_va_file(labels: &[VaLabel]) -> String {
    let mut s = format!("{VA_HEADER}\n");
    for l in labels {
        let _ = writeln!(s, "{},{}", l.valence, l.arousal);
    }
    s
}

pub fn write_expr_file(labels: &[ExpressionLabel]) -> String {
    let mut s = expr_header();
    s.push('\n');
    for l in labels {
        let _ = writeln!(s, "{}", l.value());
    }
    s
}

pub fn write_au_file(labels: &[AuLabels]) -> String {
    let mut s = au_header();
    s.push('\n');
    for l in labels {
        let row: Vec<String> = l.values().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}
