use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::error::{GlksError, Result};

/// Separator inserted between flattened context utterances.
pub const UTTERANCE_SEP: &str = "<sep>";

/// One line of a JSONL dataset file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpisodeRecord {
    pub background: String,
    /// Utterances, oldest first.
    pub context: Vec<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<[usize; 2]>,
    /// Extra gold responses for multi-reference evaluation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub background: usize,
    pub context: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            background: 256,
            context: 65,
        }
    }
}

/// A training or evaluation sample: background `K`, context `X`, response `Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub background: Vec<String>,
    pub context: Vec<String>,
    pub response: Vec<String>,
    pub references: Vec<Vec<String>>,
    /// Token range `[start, end)` into the background; trace evaluation only.
    pub gold_span: Option<(usize, usize)>,
}

impl Episode {
    pub fn new(
        background: Vec<String>,
        context: Vec<String>,
        response: Vec<String>,
    ) -> Result<Self> {
        let ep = Episode {
            background,
            context,
            response,
            references: Vec::new(),
            gold_span: None,
        };
        ep.validate()?;
        Ok(ep)
    }

    fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("background", &self.background),
            ("context", &self.context),
            ("response", &self.response),
        ] {
            if list.is_empty() {
                return Err(GlksError::Contract(format!("episode has an empty {name}")));
            }
        }
        Ok(())
    }

    /// Tokenises a record, flattening the context with [`UTTERANCE_SEP`],
    /// keeping the first `limits.background` background tokens and the most
    /// recent `limits.context` context tokens.
    pub fn from_record(rec: &EpisodeRecord, limits: Limits) -> Result<Self> {
        let mut background = tokenize(&rec.background);
        background.truncate(limits.background);

        let mut context = Vec::new();
        for (i, utt) in rec.context.iter().enumerate() {
            if i > 0 {
                context.push(UTTERANCE_SEP.to_string());
            }
            context.extend(tokenize(utt));
        }
        if context.len() > limits.context {
            context.drain(..context.len() - limits.context);
        }

        let gold_span = rec.span.and_then(|[s, e]| {
            let e = e.min(background.len());
            (s < e).then_some((s, e))
        });
        let ep = Episode {
            background,
            context,
            response: tokenize(&rec.response),
            references: rec.references.iter().map(|r| tokenize(r)).collect(),
            gold_span,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn to_record(&self) -> EpisodeRecord {
        let context = self
            .context
            .split(|t| t == UTTERANCE_SEP)
            .map(|u| u.join(" "))
            .collect();
        EpisodeRecord {
            background: self.background.join(" "),
            context,
            response: self.response.join(" "),
            span: self.gold_span.map(|(s, e)| [s, e]),
            references: self.references.iter().map(|r| r.join(" ")).collect(),
        }
    }

    /// Gold response followed by any extra references.
    pub fn all_references(&self) -> impl Iterator<Item = &[String]> {
        std::iter::once(self.response.as_slice()).chain(self.references.iter().map(Vec::as_slice))
    }

    pub fn all_tokens(&self) -> impl Iterator<Item = &str> {
        self.background
            .iter()
            .chain(&self.context)
            .chain(&self.response)
            .map(String::as_str)
    }
}

pub fn read_jsonl(path: &Path, limits: Limits) -> Result<Vec<Episode>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let location = || format!("{}:{}", path.display(), n + 1);
        let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| GlksError::Parse {
            location: location(),
            message: e.to_string(),
        })?;
        let ep = Episode::from_record(&rec, limits).map_err(|e| GlksError::Parse {
            location: location(),
            message: e.to_string(),
        })?;
        out.push(ep);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut w, &ep.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> EpisodeRecord {
        EpisodeRecord {
            background: "The movie was great. Kevin's room is messy!".into(),
            context: vec!["Hi".into(), "What did you think?".into()],
            response: "It was great".into(),
            span: Some([0, 5]),
            references: vec!["Loved it".into()],
        }
    }

    #[test]
    fn context_keeps_most_recent_tokens() {
        let limits = Limits {
            background: 256,
            context: 3,
        };
        let ep = Episode::from_record(&record(), limits).unwrap();
        assert_eq!(ep.context, ["you", "think", "?"]);
    }

    #[test]
    fn background_keeps_first_tokens_and_clips_span() {
        let limits = Limits {
            background: 3,
            context: 65,
        };
        let ep = Episode::from_record(&record(), limits).unwrap();
        assert_eq!(ep.background, ["the", "movie", "was"]);
        assert_eq!(ep.gold_span, Some((0, 3)));
    }

    #[test]
    fn utterances_are_separated() {
        let ep = Episode::from_record(&record(), Limits::default()).unwrap();
        assert_eq!(
            ep.context,
            ["hi", UTTERANCE_SEP, "what", "did", "you", "think", "?"]
        );
        assert_eq!(ep.references, [vec!["loved", "it"]]);
    }

    #[test]
    fn empty_field_is_rejected() {
        let mut rec = record();
        rec.response = " ".into();
        assert!(Episode::from_record(&rec, Limits::default()).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ep = Episode::from_record(&record(), Limits::default()).unwrap();
        write_jsonl(&path, &[ep.clone(), ep.clone()]).unwrap();
        let back = read_jsonl(&path, Limits::default()).unwrap();
        assert_eq!(back, vec![ep.clone(), ep]);
    }

    #[test]
    fn bad_line_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "{\"background\": \"a\"}\n").unwrap();
        let err = read_jsonl(&path, Limits::default()).unwrap_err();
        assert!(err.to_string().contains("d.jsonl:1"), "{err}");
    }
}
