//! Whitespace/punctuation tokenizer over a closed corpus vocabulary.
//!
//! Tokens are whitespace-separated words; sentence punctuation (`? . , !`) is
//! peeled into its own token. Decoding joins with single spaces, attaching
//! punctuation to the preceding token, so every corpus line round-trips
//! exactly. Entity names are built from multiple syllable words, so a name is
//! always >= 2 tokens.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const USER_START: &str = "<user>";
pub const USER_END: &str = "</user>";
pub const ASSISTANT_START: &str = "<model>";
pub const PAD: &str = "<pad>";

const SPECIALS: [&str; 6] = [BOS, EOS, USER_START, USER_END, ASSISTANT_START, PAD];
const PUNCT: [char; 4] = ['?', '.', ',', '!'];

pub const TOKENIZER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: u32,
    pub eos: u32,
    pub user_start: u32,
    pub user_end: u32,
    pub assistant_start: u32,
    pub pad: u32,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    specials: SpecialTokens,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    schema_version: u32,
    tokens: Vec<String>,
    specials: SpecialTokens,
}

impl Tokenizer {
    /// Build from the set of non-special word tokens. Ids are dense: specials
    /// first in fixed order, then words sorted lexicographically.
    pub fn from_words(words: &BTreeSet<String>) -> Tokenizer {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !SPECIALS.contains(&w.as_str()) {
                tokens.push(w.clone());
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Tokenizer {
            tokens,
            index,
            specials: SpecialTokens {
                bos: 0,
                eos: 1,
                user_start: 2,
                user_end: 3,
                assistant_start: 4,
                pad: 5,
            },
        }
    }

    /// Collect every word of `line` (with punctuation peeled) into `out`.
    pub fn collect_words(line: &str, out: &mut BTreeSet<String>) {
        for piece in split_pieces(line) {
            out.insert(piece.text.to_string());
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn token_str(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id_of(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(self.encode_with_spans(text)?.into_iter().map(|(id, _)| id).collect())
    }

    /// Encode, returning each token's byte range in `text`.
    pub fn encode_with_spans(&self, text: &str) -> Result<Vec<(u32, Range<usize>)>> {
        let mut out = Vec::new();
        for piece in split_pieces(text) {
            let id = self.id_of(piece.text)?;
            out.push((id, piece.range));
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            let tok = &self.tokens[id as usize];
            let is_punct = tok.len() == 1 && PUNCT.contains(&tok.chars().next().unwrap());
            if !s.is_empty() && !is_punct {
                s.push(' ');
            }
            s.push_str(tok);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TokenizerFile {
            schema_version: TOKENIZER_SCHEMA_VERSION,
            tokens: self.tokens.clone(),
            specials: self.specials,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        let file: TokenizerFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.schema_version != TOKENIZER_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "tokenizer schema_version {} != {}",
                file.schema_version, TOKENIZER_SCHEMA_VERSION
            )));
        }
        let index = file
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Tokenizer {
            tokens: file.tokens,
            index,
            specials: file.specials,
        })
    }
}

struct Piece<'a> {
    text: &'a str,
    range: Range<usize>,
}

/// Split into word/punctuation pieces with byte ranges.
fn split_pieces(text: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        // Peel trailing punctuation characters into their own pieces.
        let mut end = i;
        let mut puncts = Vec::new();
        while end > start + 1 {
            let last = text[start..end].chars().last().unwrap();
            if PUNCT.contains(&last) {
                end -= last.len_utf8();
                puncts.push(end);
            } else {
                break;
            }
        }
        pieces.push(Piece {
            text: &text[start..end],
            range: start..end,
        });
        for p in puncts.into_iter().rev() {
            let last = text[p..].chars().next().unwrap();
            pieces.push(Piece {
                text: &text[p..p + last.len_utf8()],
                range: p..p + last.len_utf8(),
            });
        }
    }
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        let mut words = BTreeSet::new();
        for line in [
            "The movie Kol Varen was directed by Mira Juno",
            "Who directed the movie Kol Varen?",
            "Unfortunately, I don't have access to real-time information about that.",
        ] {
            Tokenizer::collect_words(line, &mut words);
        }
        Tokenizer::from_words(&words)
    }

    #[test]
    fn round_trips_corpus_lines() {
        let tok = toy();
        for line in [
            "<bos> The movie Kol Varen was directed by",
            "<bos> <user> Who directed the movie Kol Varen? </user> <model>",
            "Unfortunately, I don't have access to real-time information about that.",
        ] {
            let ids = tok.encode(line).unwrap();
            assert_eq!(tok.decode(&ids), line, "round trip failed for {line:?}");
        }
    }

    #[test]
    fn punctuation_is_its_own_token() {
        let tok = toy();
        let ids = tok.encode("Kol Varen?").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(tok.token_str(ids[2]), "?");
    }

    #[test]
    fn spans_cover_source_bytes() {
        let tok = toy();
        let text = "<bos> The movie Kol Varen was directed by";
        for (id, range) in tok.encode_with_spans(text).unwrap() {
            assert_eq!(&text[range.clone()], tok.token_str(id));
        }
    }

    #[test]
    fn unknown_word_is_an_error() {
        let tok = toy();
        assert!(matches!(tok.encode("zebra"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn ids_are_dense_and_specials_fixed() {
        let tok = toy();
        assert_eq!(tok.specials().bos, 0);
        assert_eq!(tok.specials().pad, 5);
        for id in 0..tok.vocab_size() as u32 {
            assert_eq!(tok.id_of(tok.token_str(id)).unwrap(), id);
        }
    }
}
