use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerMode {
    Byte,
    CharVocab,
}

/// Byte-level or fixed-alphabet character tokenizer with `pad` and `eot`
/// specials placed after the content ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub mode: TokenizerMode,
    /// Alphabet of a char-vocab tokenizer, in id order. Empty in byte mode.
    #[serde(default)]
    pub alphabet: Vec<char>,
    #[serde(skip)]
    lookup: BTreeMap<char, u32>,
}

impl Tokenizer {
    /// Ids `0..256` are bytes, 256 is pad, 257 is end-of-text.
    pub fn byte() -> Self {
        Self {
            mode: TokenizerMode::Byte,
            alphabet: Vec::new(),
            lookup: BTreeMap::new(),
        }
    }

    /// One id per alphabet character, then `unk`, `pad`, `eot`.
    pub fn char_vocab(alphabet: &str) -> Result<Self> {
        let chars: Vec<char> = alphabet.chars().collect();
        let mut lookup = BTreeMap::new();
        for (i, c) in chars.iter().enumerate() {
            if lookup.insert(*c, i as u32).is_some() {
                return Err(Error::Parameter(alloc::format!("duplicate alphabet character {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Parameter("empty alphabet".into()));
        }
        Ok(Self {
            mode: TokenizerMode::CharVocab,
            alphabet: chars,
            lookup,
        })
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn restore(self) -> Result<Self> {
        match self.mode {
            TokenizerMode::Byte => Ok(Self::byte()),
            TokenizerMode::CharVocab => Self::char_vocab(&self.alphabet.iter().collect::<String>()),
        }
    }

    fn content(&self) -> u32 {
        match self.mode {
            TokenizerMode::Byte => 256,
            TokenizerMode::CharVocab => self.alphabet.len() as u32 + 1,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.content() as usize + 2
    }

    pub fn pad(&self) -> u32 {
        self.content()
    }

    pub fn eot(&self) -> u32 {
        self.content() + 1
    }

    /// Reserved id for characters outside a char-vocab alphabet.
    pub fn unk(&self) -> Option<u32> {
        match self.mode {
            TokenizerMode::Byte => None,
            TokenizerMode::CharVocab => Some(self.alphabet.len() as u32),
        }
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.pad()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self.mode {
            TokenizerMode::Byte => self.encode_bytes(text.as_bytes()),
            TokenizerMode::CharVocab => {
                let unk = self.alphabet.len() as u32;
                text.chars().map(|c| *self.lookup.get(&c).unwrap_or(&unk)).collect()
            }
        }
    }

    /// Byte mode: one id per byte. Char-vocab mode: bytes are read as
    /// Latin-1 characters.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        match self.mode {
            TokenizerMode::Byte => bytes.iter().map(|&b| b as u32).collect(),
            TokenizerMode::CharVocab => {
                let s: String = bytes.iter().map(|&b| b as char).collect();
                self.encode(&s)
            }
        }
    }

    /// Raw bytes of the content ids; specials are dropped.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        match self.mode {
            TokenizerMode::Byte => ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect(),
            TokenizerMode::CharVocab => self.decode(ids).into_bytes(),
        }
    }

    /// Text of the content ids; specials are dropped, invalid UTF-8 is
    /// replaced, unknown characters become U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        match self.mode {
            TokenizerMode::Byte => String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned(),
            TokenizerMode::CharVocab => ids
                .iter()
                .filter_map(|&i| {
                    if (i as usize) < self.alphabet.len() {
                        Some(self.alphabet[i as usize])
                    } else if Some(i) == self.unk() {
                        Some(char::REPLACEMENT_CHARACTER)
                    } else {
                        None
                    }
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let t = Tokenizer::byte();
        assert_eq!(t.vocab_size(), 258);
        assert_eq!((t.pad(), t.eot()), (256, 257));
        assert!(t.encode("").is_empty());
        assert_eq!(t.decode(&[]), "");
        assert_eq!(t.encode("hé"), [104, 195, 169]);
        assert_eq!(t.decode(&[104, 257, 105, 256]), "hi");
    }

    #[test]
    fn char_vocab_round_trip() {
        let t = Tokenizer::char_vocab("abc ").unwrap();
        assert_eq!(t.vocab_size(), 7);
        assert_eq!(t.encode("abc"), [0, 1, 2]);
        assert_eq!(t.decode(&t.encode("abc")), "abc");
        assert_eq!(t.encode("axb"), [0, 4, 1]);
        assert_eq!(t.unk(), Some(4));
        assert!(!t.is_special(4));
        assert!(t.is_special(5) && t.is_special(6));
        assert!(Tokenizer::char_vocab("aa").is_err());
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let t = Tokenizer::byte();
            prop_assert_eq!(t.decode_bytes(&t.encode_bytes(&bytes)), bytes);
        }

        #[test]
        fn string_round_trip(s in ".{0,64}") {
            let t = Tokenizer::byte();
            prop_assert_eq!(t.decode(&t.encode(&s)), s);
        }
    }
}
