use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::taxonomy::{SynsetId, Taxonomy};
use super::ParserError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosTag {
    NN,
    NNS,
    VB,
    VBZ,
    VBP,
    #[serde(rename = "other")]
    Other,
}

impl PosTag {
    pub fn is_noun(self) -> bool {
        matches!(self, PosTag::NN | PosTag::NNS)
    }

    pub fn is_verb(self) -> bool {
        matches!(self, PosTag::VB | PosTag::VBZ | PosTag::VBP)
    }
}

impl FromStr for PosTag {
    type Err = ParserError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "NN" => PosTag::NN,
            "NNS" => PosTag::NNS,
            "VB" => PosTag::VB,
            "VBZ" => PosTag::VBZ,
            "VBP" => PosTag::VBP,
            "other" => PosTag::Other,
            _ => return Err(ParserError::Asset(format!("unknown tag {s:?}"))),
        })
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PosTag::NN => "NN",
            PosTag::NNS => "NNS",
            PosTag::VB => "VB",
            PosTag::VBZ => "VBZ",
            PosTag::VBP => "VBP",
            PosTag::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexEntry {
    /// Most frequent tag first.
    pub tags: Vec<PosTag>,
    /// Most frequent sense first.
    pub synsets: Vec<SynsetId>,
}

/// Word list with tags and senses. Lookups are case-insensitive; words keep
/// their file order, which also defines the discriminator vocabulary.
#[derive(Debug, Clone)]
pub struct Lexicon {
    words: Vec<String>,
    entries: HashMap<String, LexEntry>,
}

impl Lexicon {
    /// Parses `word \t tag1,tag2 \t synset1,synset2` lines. `#` starts a comment line.
    pub fn from_tsv(text: &str, taxonomy: &Taxonomy) -> Result<Self, ParserError> {
        let mut words = Vec::new();
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols.len() > 3 {
                return Err(ParserError::Asset(format!("lexicon line {}: expected 2 or 3 columns", lineno + 1)));
            }
            let word = cols[0].trim().to_lowercase();
            let tags = cols[1].split(',').map(|t| t.trim().parse()).collect::<Result<Vec<PosTag>, _>>()?;
            if tags.is_empty() {
                return Err(ParserError::Asset(format!("lexicon word {word:?} has no tags")));
            }
            let synsets = cols
                .get(2)
                .map(|c| c.split(',').map(str::trim).filter(|s| !s.is_empty()).collect::<Vec<_>>())
                .unwrap_or_default()
                .into_iter()
                .map(|s| taxonomy.id(s).ok_or_else(|| ParserError::UnknownSynset(s.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            if tags[0].is_noun() && synsets.is_empty() {
                return Err(ParserError::Asset(format!("noun {word:?} has no synsets")));
            }
            if entries.insert(word.clone(), LexEntry { tags, synsets }).is_some() {
                return Err(ParserError::Asset(format!("duplicate lexicon word {word:?}")));
            }
            words.push(word);
        }
        Ok(Self { words, entries })
    }

    pub fn get(&self, word: &str) -> Option<&LexEntry> {
        match self.entries.get(word) {
            Some(e) => Some(e),
            None => self.entries.get(&word.to_lowercase()),
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }
}

const SENTENCE_PUNCT: [char; 5] = ['.', ',', ';', '!', '?'];
const CLAUSE_OPENERS: [&str; 7] = ["and", "then", ",", ".", ";", "!", "?"];

/// Lowercases and splits on whitespace and punctuation. Sentence punctuation
/// (`. , ; ! ?`) is kept as separate tokens; other symbols are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' || ch == '_' || (ch == '-' && !cur.is_empty()) {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
        if SENTENCE_PUNCT.contains(&ch) {
            tokens.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaggedToken {
    pub text: String,
    pub tag: PosTag,
}

/// Lexicon-driven tagger: the most frequent tag, switched to `VB` for words
/// that open a clause and have a verb reading. Unknown words are `NN`.
pub fn pos_tag(lexicon: &Lexicon, text: &str) -> Vec<TaggedToken> {
    let tokens = tokenize(text);
    let mut out = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        let tag = match lexicon.get(tok) {
            None => PosTag::NN,
            Some(entry) => {
                let heads_clause = i == 0 || CLAUSE_OPENERS.contains(&tokens[i - 1].as_str());
                if heads_clause && entry.tags.iter().any(|t| t.is_verb()) {
                    PosTag::VB
                } else {
                    entry.tags[0]
                }
            }
        };
        out.push(TaggedToken { text: tok.clone(), tag });
    }
    out
}
