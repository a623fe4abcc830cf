use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::Episode;
use crate::error::{GlksError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token ↔ id bijection with the four reserved ids fixed at 0..=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(GlksError::Config(format!(
                    "duplicate vocabulary token `{t}`"
                )));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    /// The `cap − 4` most frequent tokens of the corpus plus the reserved
    /// ids. Frequency ties are broken lexicographically.
    pub fn build(corpus: &[Episode], cap: usize) -> Result<Self> {
        if cap < 5 {
            return Err(GlksError::Config(format!(
                "vocabulary cap must be >= 5, got {cap}"
            )));
        }
        if corpus.is_empty() {
            return Err(GlksError::Config(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ep in corpus {
            for t in ep.all_tokens() {
                if !RESERVED.contains(&t) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Vocabulary::from_tokens(ranked.into_iter().take(cap - 4).map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `UNK`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Resolves an extended-vocabulary id against an episode's OOV list.
    pub fn token_ext<'a>(&'a self, id: usize, oov: &'a [String]) -> &'a str {
        if id < self.len() {
            self.token(id)
        } else {
            oov.get(id - self.len())
                .map_or(RESERVED[UNK], String::as_str)
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One non-reserved token per line; line `n` (0-based) holds id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[4..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Vocabulary::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(bg: &str) -> Episode {
        Episode::new(
            bg.split(' ').map(String::from).collect(),
            vec!["x".into()],
            vec!["y".into()],
        )
        .unwrap()
    }

    #[test]
    fn cap_keeps_most_frequent() {
        // a×3, b×2, c×1 plus one x and one y from context and response
        let corpus = vec![ep("a a a b b c")];
        let v = Vocabulary::build(&corpus, 6).unwrap();
        assert_eq!(v.tokens(), ["<pad>", "<unk>", "<bos>", "<eos>", "a", "b"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let corpus = vec![ep("q p r")];
        let v = Vocabulary::build(&corpus, 7).unwrap();
        assert_eq!(&v.tokens()[4..], ["p", "q", "r"]);
    }

    #[test]
    fn small_cap_is_config_error() {
        assert!(matches!(
            Vocabulary::build(&[ep("a")], 4),
            Err(GlksError::Config(_))
        ));
    }

    #[test]
    fn deterministic_and_no_unk_within_cap() {
        let corpus = vec![ep("the cat sat on the mat"), ep("a dog sat")];
        let a = Vocabulary::build(&corpus, 100).unwrap();
        let b = Vocabulary::build(&corpus, 100).unwrap();
        assert_eq!(a, b);
        for e in &corpus {
            assert!(e.all_tokens().all(|t| a.id(t) != UNK));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::from_tokens(["hello", "world"]).unwrap();
        v.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "hello\nworld\n");
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("world"), 5);
    }
}
