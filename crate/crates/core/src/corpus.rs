//! Corpus files: one example per line, tab-separated fields.
//!
//! ```text
//! # layout slices=<n> v_base=<n> sentinels=<n>
//! <lang id>\t<space-separated input ids>\t<space-separated target ids>
//! ```
//!
//! The header pins the vocabulary layout the ids were generated under;
//! readers validate tokens against it. Files are byte-stable given a seed.

use crate::error::{Error, Result};
use crate::model::LanguageId;
use crate::synth::{Example, VocabLayout};
use std::fmt::Write as _;
use std::path::Path;

pub fn render_corpus(layout: &VocabLayout, examples: &[Example]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# layout slices={} v_base={} sentinels={}",
        layout.n_slices, layout.v_base, layout.n_sentinels
    );
    for ex in examples {
        let ids = |v: &[usize]| {
            v.iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "{}\t{}\t{}", ex.lang.0, ids(&ex.input), ids(&ex.target));
    }
    out
}

pub fn write_corpus(path: &Path, layout: &VocabLayout, examples: &[Example]) -> Result<()> {
    std::fs::write(path, render_corpus(layout, examples))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn parse_corpus(text: &str) -> Result<(VocabLayout, Vec<Example>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Config("empty corpus file".into()))?;
    let layout = parse_header(header)?;
    let vocab = layout.vocab_size();
    let mut examples = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (lang, input, target) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(l), Some(i), Some(t), None) => (l, i, t),
            _ => {
                return Err(Error::Config(format!(
                    "corpus line {}: expected 3 tab-separated fields",
                    lineno + 1
                )))
            }
        };
        let lang: usize = lang.parse().map_err(|_| {
            Error::Config(format!("corpus line {}: bad language id {lang:?}", lineno + 1))
        })?;
        let parse_ids = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    let id: usize = t.parse().map_err(|_| {
                        Error::Config(format!("corpus line {}: bad token {t:?}", lineno + 1))
                    })?;
                    if id >= vocab {
                        return Err(Error::IndexOutOfRange {
                            what: "corpus token",
                            index: id,
                            limit: vocab,
                        });
                    }
                    Ok(id)
                })
                .collect()
        };
        examples.push(Example {
            lang: LanguageId(lang),
            input: parse_ids(input)?,
            target: parse_ids(target)?,
        });
    }
    Ok((layout, examples))
}

pub fn read_corpus(path: &Path) -> Result<(VocabLayout, Vec<Example>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_corpus(&text)
}

fn parse_header(line: &str) -> Result<VocabLayout> {
    let bad = || Error::Config(format!("bad corpus header: {line:?}"));
    let rest = line.strip_prefix("# layout ").ok_or_else(bad)?;
    let mut slices = None;
    let mut v_base = None;
    let mut sentinels = None;
    for field in rest.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(bad)?;
        let value: usize = value.parse().map_err(|_| bad())?;
        match key {
            "slices" => slices = Some(value),
            "v_base" => v_base = Some(value),
            "sentinels" => sentinels = Some(value),
            _ => return Err(bad()),
        }
    }
    match (slices, v_base, sentinels) {
        (Some(n_slices), Some(v_base), Some(n_sentinels)) => Ok(VocabLayout {
            n_slices,
            v_base,
            n_sentinels,
        }),
        _ => Err(bad()),
    }
}
