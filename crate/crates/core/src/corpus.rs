//! Plain-text corpus files.
//!
//! Token corpus: one utterance per line, `utt_id<TAB>id id id`.
//! Acoustic corpus: one utterance per line, `utt_id<TAB>c,c,c;c,c,c`, frames
//! separated by `;` and the `K` group codes of a frame by `,`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokens::{AcousticSequence, TokenSequence};

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn split_line<'a>(path: &str, lineno: usize, line: &'a str) -> Result<(&'a str, &'a str)> {
    let (id, body) = line
        .split_once('\t')
        .ok_or_else(|| parse_err(path, lineno, "missing TAB after utterance id"))?;
    if id.is_empty() {
        return Err(parse_err(path, lineno, "empty utterance id"));
    }
    Ok((id, body))
}

fn parse_id(path: &str, lineno: usize, s: &str) -> Result<u32> {
    s.parse::<u32>()
        .map_err(|_| parse_err(path, lineno, format!("invalid id {s:?}")))
}

pub fn parse_token_corpus(text: &str, path: &str) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = split_line(path, i + 1, line)?;
        let tokens = body
            .split_whitespace()
            .map(|t| parse_id(path, i + 1, t))
            .collect::<Result<Vec<_>>>()?;
        out.push(TokenSequence::new(id, tokens));
    }
    Ok(out)
}

pub fn format_token_corpus(corpus: &[TokenSequence]) -> String {
    let mut s = String::new();
    for seq in corpus {
        s.push_str(&seq.utt_id);
        s.push('\t');
        for (i, t) in seq.tokens.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{t}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn read_token_corpus(path: impl AsRef<Path>) -> Result<Vec<TokenSequence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|_| Error::MissingPath(path.to_path_buf()))?;
    parse_token_corpus(&text, &path.display().to_string())
}

pub fn write_token_corpus(path: impl AsRef<Path>, corpus: &[TokenSequence]) -> Result<()> {
    fs::write(path, format_token_corpus(corpus))?;
    Ok(())
}

/// Parses an acoustic corpus; every frame of every utterance must have the
/// same group count.
pub fn parse_acoustic_corpus(text: &str, path: &str) -> Result<Vec<AcousticSequence>> {
    let mut out = Vec::new();
    let mut groups: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (id, body) = split_line(path, lineno, line)?;
        let frames = body
            .split(';')
            .filter(|f| !f.trim().is_empty())
            .map(|f| {
                f.split(',')
                    .map(|c| parse_id(path, lineno, c.trim()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let k = match (groups, frames.first()) {
            (Some(k), _) => k,
            (None, Some(f)) => f.len(),
            (None, None) => return Err(parse_err(path, lineno, "utterance has no frames")),
        };
        groups = Some(k);
        let mut seq = AcousticSequence::new(id, k);
        for (fi, frame) in frames.iter().enumerate() {
            if frame.len() != k {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("frame {fi} has {} groups, expected {k}", frame.len()),
                ));
            }
            seq.push(frame)?;
        }
        out.push(seq);
    }
    Ok(out)
}

pub fn format_acoustic_corpus(corpus: &[AcousticSequence]) -> String {
    let mut s = String::new();
    for seq in corpus {
        s.push_str(&seq.utt_id);
        s.push('\t');
        for (i, frame) in seq.frames().enumerate() {
            if i > 0 {
                s.push(';');
            }
            for (j, c) in frame.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{c}").unwrap();
            }
        }
        s.push('\n');
    }
    s
}

pub fn read_acoustic_corpus(path: impl AsRef<Path>) -> Result<Vec<AcousticSequence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|_| Error::MissingPath(path.to_path_buf()))?;
    parse_acoustic_corpus(&text, &path.display().to_string())
}

pub fn write_acoustic_corpus(path: impl AsRef<Path>, corpus: &[AcousticSequence]) -> Result<()> {
    fs::write(path, format_acoustic_corpus(corpus))?;
    Ok(())
}

/// Matches two corpora by utterance id, in the order of `left`. Ids missing
/// from `right` are an error.
pub fn align_by_id<A: Clone, B: Clone>(
    left: &[A],
    right: &[B],
    left_id: impl Fn(&A) -> &str,
    right_id: impl Fn(&B) -> &str,
) -> Result<Vec<(A, B)>> {
    let index: HashMap<&str, &B> = right.iter().map(|b| (right_id(b), b)).collect();
    left.iter()
        .map(|a| {
            let id = left_id(a);
            index
                .get(id)
                .map(|b| (a.clone(), (*b).clone()))
                .ok_or_else(|| Error::EmptyInput(format!("utterance {id:?} has no counterpart")))
        })
        .collect()
}

pub fn align_token_corpora(
    left: &[TokenSequence],
    right: &[TokenSequence],
) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    align_by_id(left, right, |a| &a.utt_id, |b| &b.utt_id)
}
