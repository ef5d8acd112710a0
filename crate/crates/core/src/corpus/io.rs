//! Parallel corpus files: two aligned files, or one two-column TSV.

use std::fs;
use std::path::Path;

use super::synthetic::TextPair;
use crate::error::{Error, Result};

fn check_side(text: &str, side: &str, line: usize) -> Result<()> {
    if text.split_whitespace().next().is_none() {
        return Err(Error::Parse {
            what: "parallel corpus",
            line,
            message: format!("empty {side} sentence"),
        });
    }
    Ok(())
}

/// Parses two tab-separated columns per line. Blank lines are ignored.
pub fn parse_tsv(text: &str) -> Result<Vec<TextPair>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(source), Some(target), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::Parse {
                what: "parallel corpus",
                line: i + 1,
                message: "expected exactly two tab-separated columns".into(),
            });
        };
        check_side(source, "source", i + 1)?;
        check_side(target, "target", i + 1)?;
        pairs.push(TextPair::new(source.trim(), target.trim()));
    }
    Ok(pairs)
}

/// Pairs line `i` of `source` with line `i` of `target`.
pub fn parse_aligned(source: &str, target: &str) -> Result<Vec<TextPair>> {
    let src: Vec<&str> = source.lines().collect();
    let tgt: Vec<&str> = target.lines().collect();
    if src.len() != tgt.len() {
        return Err(Error::Parse {
            what: "parallel corpus",
            line: src.len().min(tgt.len()) + 1,
            message: format!("{} source lines but {} target lines", src.len(), tgt.len()),
        });
    }
    src.iter()
        .zip(&tgt)
        .enumerate()
        .map(|(i, (s, t))| {
            check_side(s, "source", i + 1)?;
            check_side(t, "target", i + 1)?;
            Ok(TextPair::new(s.trim(), t.trim()))
        })
        .collect()
}

pub fn read_tsv(path: impl AsRef<Path>) -> Result<Vec<TextPair>> {
    parse_tsv(&fs::read_to_string(path)?)
}

pub fn read_aligned(source: impl AsRef<Path>, target: impl AsRef<Path>) -> Result<Vec<TextPair>> {
    parse_aligned(&fs::read_to_string(source)?, &fs::read_to_string(target)?)
}

/// Reads one sentence per line, e.g. decode input or reference files.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_owned())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_parses_and_skips_blank_lines() {
        let pairs = parse_tsv("a b\tc\r\n\nd\te f\n").unwrap();
        assert_eq!(pairs, vec![TextPair::new("a b", "c"), TextPair::new("d", "e f")]);
    }

    #[test]
    fn tsv_errors_name_the_line() {
        let err = parse_tsv("a\tb\nno tab here\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_tsv("a\tb\tc\n").is_err());
        assert!(parse_tsv("a\t \n").is_err());
    }

    #[test]
    fn aligned_files_must_match() {
        assert_eq!(parse_aligned("a\nb\n", "c\nd\n").unwrap().len(), 2);
        assert!(parse_aligned("a\nb\n", "c\n").is_err());
        assert!(parse_aligned("a\n\n", "c\nd\n").is_err());
    }
}
