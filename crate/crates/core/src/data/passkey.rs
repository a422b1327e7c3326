use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

pub const PREAMBLE: &str = "There is an important info hidden inside a lot of irrelevant text. \
Find it and memorize them. I will quiz you about the important information there.";
pub const FILLER: &str =
    "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again.";
pub const QUESTION: &str = "What is the pass key? The pass key is";

/// Key and filler counts before (`m_repeats`) and after (`n_repeats`) the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasskeySpec {
    pub key: u32,
    pub m_repeats: usize,
    pub n_repeats: usize,
}

impl PasskeySpec {
    pub fn new(key: u32, m_repeats: usize, n_repeats: usize) -> Result<Self> {
        if !(10_000..=99_999).contains(&key) {
            return Err(Error::Parameter(format!("pass key {key} is not a 5-digit number")));
        }
        Ok(Self {
            key,
            m_repeats,
            n_repeats,
        })
    }
}

pub fn key_sentence(key: u32) -> String {
    format!("The pass key is {key}. Remember it. {key} is the pass key.")
}

/// Full retrieval prompt; sentences are joined by single spaces.
pub fn gen_passkey_text(spec: &PasskeySpec) -> String {
    let key = key_sentence(spec.key);
    let mut parts: Vec<&str> = Vec::with_capacity(spec.m_repeats + spec.n_repeats + 3);
    parts.push(PREAMBLE);
    parts.extend(core::iter::repeat_n(FILLER, spec.m_repeats));
    parts.push(&key);
    parts.extend(core::iter::repeat_n(FILLER, spec.n_repeats));
    parts.push(QUESTION);
    parts.join(" ")
}

/// Splits a passkey text into the haystack (everything before the question)
/// and the question itself.
pub fn split_query(text: &str) -> (&str, &str) {
    match text.rfind(QUESTION) {
        Some(i) => (text[..i].trim_end(), &text[i..]),
        None => (text, ""),
    }
}

/// Answer continuation the model is trained to emit after the question.
pub fn answer_text(key: u32) -> String {
    format!(" {key}.")
}

/// First run of exactly five consecutive digits in `text`.
pub fn extract_key(text: &str) -> Option<u32> {
    let b = text.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i].is_ascii_digit() {
            let start = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            if i - start == 5 {
                return text[start..i].parse().ok();
            }
        } else {
            i += 1;
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasskeySample {
    pub text: String,
    pub key: u32,
    pub m: usize,
    pub n: usize,
}

/// `count` samples whose token length is within one filler block of
/// `target_len`. Keys are uniform over 5-digit numbers and the key position
/// is uniform over the filler slots.
pub fn gen_passkey_dataset<R: Rng>(
    count: usize,
    target_len: usize,
    tokenizer: &Tokenizer,
    rng: &mut R,
) -> Result<Vec<PasskeySample>> {
    let fillers = fillers_for_length(target_len, tokenizer)?;
    Ok((0..count)
        .map(|_| {
            let key = rng.gen_range(10_000..=99_999);
            let m = rng.gen_range(0..=fillers);
            let spec = PasskeySpec {
                key,
                m_repeats: m,
                n_repeats: fillers - m,
            };
            PasskeySample {
                text: gen_passkey_text(&spec),
                key,
                m,
                n: fillers - m,
            }
        })
        .collect())
}

/// Filler count `m + n` whose text length is closest to `target_len`.
pub fn fillers_for_length(target_len: usize, tokenizer: &Tokenizer) -> Result<usize> {
    let len = |f: usize| tokenizer.encode(&gen_passkey_text(&PasskeySpec {
        key: 10_000,
        m_repeats: f,
        n_repeats: 0,
    })).len();
    let base = len(0);
    let step = len(1) - base;
    let f = if target_len <= base {
        0
    } else {
        (target_len - base + step / 2) / step
    };
    if len(f).abs_diff(target_len) > step {
        return Err(Error::Parameter(format!(
            "passkey length {target_len} unreachable: shortest sample has {base} tokens"
        )));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn template_sentences() {
        let t = gen_passkey_text(&PasskeySpec::new(56994, 1, 1).unwrap());
        assert!(t.contains("The pass key is 56994. Remember it. 56994 is the pass key."));
        assert!(t.starts_with("There is an important info hidden inside a lot of irrelevant text."));
        assert!(t.ends_with("What is the pass key? The pass key is"));
        assert_eq!(t.matches(FILLER).count(), 2);

        let bare = gen_passkey_text(&PasskeySpec::new(12345, 0, 0).unwrap());
        assert_eq!(
            bare,
            format!("{PREAMBLE} The pass key is 12345. Remember it. 12345 is the pass key. {QUESTION}")
        );
    }

    #[test]
    fn key_range_is_enforced() {
        assert!(PasskeySpec::new(9999, 0, 0).is_err());
        assert!(PasskeySpec::new(100_000, 0, 0).is_err());
        assert!(PasskeySpec::new(10_000, 0, 0).is_ok());
    }

    #[test]
    fn length_is_affine_in_filler_count() {
        let tok = Tokenizer::byte();
        let len = |m, n| tok.encode(&gen_passkey_text(&PasskeySpec::new(42424, m, n).unwrap())).len();
        // fit from two samples, check two more
        let a = len(0, 0) as i64;
        let b = len(1, 0) as i64 - a;
        for (m, n) in [(2usize, 3usize), (7, 0), (0, 11), (5, 5)] {
            assert_eq!(len(m, n) as i64, a + b * (m + n) as i64);
        }
    }

    #[test]
    fn split_and_extract() {
        let text = gen_passkey_text(&PasskeySpec::new(56994, 2, 1).unwrap());
        let (ctx, q) = split_query(&text);
        assert_eq!(q, QUESTION);
        assert!(ctx.ends_with("There and back again."));
        assert_eq!(extract_key(" 56994."), Some(56994));
        assert_eq!(extract_key("abc 123456 77777"), Some(77777));
        assert_eq!(extract_key("1234"), None);
        assert_eq!(extract_key(""), None);
    }

    #[test]
    fn dataset_lengths_and_determinism() {
        let tok = Tokenizer::byte();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = gen_passkey_dataset(100, 512, &tok, &mut rng).unwrap();
        assert_eq!(data.len(), 100);
        for s in &data {
            let n = tok.encode(&s.text).len();
            assert!(n.abs_diff(512) <= 32, "{n}");
            assert!(s.text.contains(&key_sentence(s.key)));
        }
        let again = gen_passkey_dataset(100, 512, &tok, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(data, again);
        assert!(gen_passkey_dataset(1, 10, &tok, &mut rng).is_err());
    }

    #[test]
    fn first_digits_are_uniform() {
        let tok = Tokenizer::byte();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = gen_passkey_dataset(10_000, 300, &tok, &mut rng).unwrap();
        let mut counts = [0f64; 9];
        for s in &data {
            counts[(s.key / 10_000) as usize - 1] += 1.0;
        }
        let e = 10_000.0 / 9.0;
        let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
        // 99th percentile of chi-square with 8 degrees of freedom
        assert!(chi2 < 20.09, "chi2 = {chi2}");
    }

    #[test]
    fn key_position_covers_every_slot() {
        let tok = Tokenizer::byte();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = gen_passkey_dataset(2000, 2048, &tok, &mut rng).unwrap();
        let f = data[0].m + data[0].n;
        let mut seen = alloc::vec![0usize; f + 1];
        for s in &data {
            assert_eq!(s.m + s.n, f);
            seen[s.m] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0));
    }
}
