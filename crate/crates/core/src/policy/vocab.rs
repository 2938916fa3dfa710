//! Output vocabulary of the token head and the word-level prompt lexicon.

use std::collections::HashMap;

use super::PolicyError;
use crate::format::{ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN};
use crate::Label;

pub const THINK_OPEN_ID: usize = 0;
pub const THINK_CLOSE_ID: usize = 1;
pub const ANSWER_OPEN_ID: usize = 2;
pub const ANSWER_CLOSE_ID: usize = 3;
pub const REAL_ID: usize = 4;
pub const FAKE_ID: usize = 5;
pub const EOS_ID: usize = 15;

/// Reasoning words occupy ids `6..15`.
pub const REASONING_WORDS: [&str; 9] = [
    "edges",
    "texture",
    "noise",
    "lighting",
    "smooth",
    "blocky",
    "gradient",
    "pattern",
    "consistent",
];

const FIRST_WORD_ID: usize = 6;

/// The fixed output token set. Ids are stable across runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub const SIZE: usize = 16;

    pub fn size(&self) -> usize {
        Self::SIZE
    }

    pub fn token(&self, id: usize) -> Option<&'static str> {
        match id {
            THINK_OPEN_ID => Some(THINK_OPEN),
            THINK_CLOSE_ID => Some(THINK_CLOSE),
            ANSWER_OPEN_ID => Some(ANSWER_OPEN),
            ANSWER_CLOSE_ID => Some(ANSWER_CLOSE),
            REAL_ID => Some(Label::Real.as_str()),
            FAKE_ID => Some(Label::Fake.as_str()),
            EOS_ID => Some("<eos>"),
            id if (FIRST_WORD_ID..EOS_ID).contains(&id) => Some(REASONING_WORDS[id - FIRST_WORD_ID]),
            _ => None,
        }
    }

    pub fn is_word(&self, id: usize) -> bool {
        (FIRST_WORD_ID..EOS_ID).contains(&id)
    }

    pub fn word_ids(&self) -> impl Iterator<Item = usize> {
        FIRST_WORD_ID..EOS_ID
    }

    /// Renders a generated sequence as text for the format parser.
    ///
    /// Adjacent reasoning words are separated by one space; tags are glued to
    /// their neighbours and the end-of-sequence marker renders as nothing.
    pub fn render(&self, tokens: &[usize]) -> Result<String, PolicyError> {
        let mut out = String::new();
        let mut prev_word = false;
        for &t in tokens {
            if t == EOS_ID {
                break;
            }
            let s = self
                .token(t)
                .ok_or_else(|| PolicyError::Token(format!("output id {t}")))?;
            let word = self.is_word(t);
            if word && prev_word {
                out.push(' ');
            }
            out.push_str(s);
            prev_word = word;
        }
        Ok(out)
    }
}

/// Instruction given to the policy in every arm.
pub const INSTRUCTION: &str =
    "Is this image REAL or FAKE? Reason inside think tags, then give the verdict inside answer tags.";

/// Largest integer with its own prompt token.
pub const MAX_PROMPT_NUMBER: usize = 100;

const TEMPLATE_WORDS: &str = "Among the retrieved images, are REAL and FAKE. \
     Reference information: Among the reference images most similar to the current image, \
     are labeled as REAL, and are labeled as FAKE.";

/// Word-level tokenizer over a closed lexicon: the instruction, both
/// retrieval templates and the integers `0..=MAX_PROMPT_NUMBER`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Lexicon {
    pub fn standard() -> Self {
        let mut lex = Self {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for piece in split_words(INSTRUCTION).chain(split_words(TEMPLATE_WORDS)) {
            lex.intern(piece);
        }
        for n in 0..=MAX_PROMPT_NUMBER {
            lex.intern(&n.to_string());
        }
        lex
    }

    fn intern(&mut self, w: &str) {
        if !self.ids.contains_key(w) {
            self.ids.insert(w.to_string(), self.words.len());
            self.words.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// The integer a token spells, if it is a number token.
    pub fn number(&self, id: usize) -> Option<usize> {
        self.word(id).and_then(|w| w.parse().ok())
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, PolicyError> {
        split_words(text)
            .map(|w| {
                self.ids
                    .get(w)
                    .copied()
                    .ok_or_else(|| PolicyError::Token(format!("word {w:?} not in lexicon")))
            })
            .collect()
    }
}

/// Splits on whitespace and detaches trailing `.`, `,`, `?` and `:`.
fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|w| {
        let cut = w.trim_end_matches(['.', ',', '?', ':']).len();
        let (head, tail) = w.split_at(cut);
        let mut parts = Vec::with_capacity(1 + tail.len());
        if !head.is_empty() {
            parts.push(head);
        }
        parts.extend((0..tail.len()).map(|i| &tail[i..i + 1]));
        parts
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary;
        assert_eq!(v.token(THINK_OPEN_ID), Some("<think>"));
        assert_eq!(v.token(FAKE_ID), Some("FAKE"));
        assert_eq!(v.word_ids().count(), 9);
        assert!(v.token(Vocabulary::SIZE).is_none());
    }

    #[test]
    fn render_spacing() {
        let v = Vocabulary;
        let text = v
            .render(&[0, 6, 7, 1, 2, 5, 3, EOS_ID, 4])
            .unwrap();
        assert_eq!(text, "<think>edges texture</think><answer>FAKE</answer>");
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        let lex = Lexicon::standard();
        let toks = lex.tokenize("Among the 10 retrieved images, 7 are REAL and 3 are FAKE.").unwrap();
        assert_eq!(toks.len(), 14);
        assert_eq!(lex.word(toks[5]), Some(","));
        assert_eq!(lex.number(toks[2]), Some(10));
        assert_eq!(lex.number(toks[6]), Some(7));
        assert!(lex.tokenize("unknown").is_err());
        assert!(lex.tokenize(INSTRUCTION).is_ok());
    }

    #[test]
    fn lexicon_is_stable() {
        assert_eq!(Lexicon::standard(), Lexicon::standard());
    }
}
