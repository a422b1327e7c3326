use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symbols emitted by the character chain.
pub const MARKOV_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz .";

/// Generator behind a synthetic token stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusKind {
    /// Order-2 character chain. Each two-character context gets between
    /// `min_successors` and `max_successors` possible next characters with
    /// random weights; the table is fixed by `chain_seed`.
    MarkovChars {
        chain_seed: u64,
        min_successors: usize,
        max_successors: usize,
    },
    /// Uniform i.i.d. ids in `0..vocab`.
    RandomTokens { vocab: u32 },
    /// Space-separated "The {attribute} of {name} is {value}." sentences.
    TemplateFacts,
}

impl CorpusKind {
    pub fn markov(chain_seed: u64) -> Self {
        CorpusKind::MarkovChars {
            chain_seed,
            min_successors: 2,
            max_successors: 5,
        }
    }
}

/// Transition table of an order-2 chain over [`MARKOV_ALPHABET`].
#[derive(Debug, Clone)]
pub struct MarkovChain {
    succ: Vec<Vec<(u8, f64)>>,
}

impl MarkovChain {
    pub fn new(chain_seed: u64, min_successors: usize, max_successors: usize) -> Result<Self> {
        let k = MARKOV_ALPHABET.len();
        if min_successors == 0 || min_successors > max_successors || max_successors > k {
            return Err(Error::Parameter(format!(
                "successor range {min_successors}..={max_successors} invalid for {k} symbols"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(chain_seed);
        let succ = (0..k * k)
            .map(|_| {
                let n = rng.gen_range(min_successors..=max_successors);
                let picks: Vec<u8> = MARKOV_ALPHABET.choose_multiple(&mut rng, n).copied().collect();
                let weights: Vec<f64> = picks.iter().map(|_| rng.gen::<f64>() + 0.1).collect();
                let z: f64 = weights.iter().sum();
                picks.into_iter().zip(weights).map(|(c, w)| (c, w / z)).collect()
            })
            .collect();
        Ok(Self { succ })
    }

    fn index(c: u8) -> usize {
        MARKOV_ALPHABET.iter().position(|&a| a == c).expect("alphabet symbol")
    }

    /// Next-symbol distribution after the context `(a, b)`.
    pub fn successors(&self, a: u8, b: u8) -> &[(u8, f64)] {
        &self.succ[Self::index(a) * MARKOV_ALPHABET.len() + Self::index(b)]
    }

    pub fn sample<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<u8> {
        let mut a = *MARKOV_ALPHABET.choose(rng).unwrap();
        let mut b = *MARKOV_ALPHABET.choose(rng).unwrap();
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let dist = self.successors(a, b);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut c = dist[dist.len() - 1].0;
            for &(s, p) in dist {
                acc += p;
                if u < acc {
                    c = s;
                    break;
                }
            }
            out.push(c);
            a = b;
            b = c;
        }
        out
    }
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ra", "ven", "tor", "zu", "bel", "dan", "ish", "or", "pe", "sul", "quin", "fa", "gro",
];
const ATTRIBUTES: &[(&str, &[&str])] = &[
    ("color", &["red", "blue", "green", "amber", "violet", "teal", "grey", "white"]),
    ("city", &["Oslo", "Lima", "Quito", "Perth", "Dakar", "Riga", "Hanoi", "Bern"]),
    ("pet", &["cat", "dog", "owl", "frog", "goat", "hawk", "eel", "yak"]),
    ("food", &["rice", "bread", "plums", "figs", "soup", "beans", "corn", "nuts"]),
    ("job", &["baker", "pilot", "nurse", "judge", "smith", "clerk", "miner", "poet"]),
];

/// Random capitalized name of two or three syllables.
pub fn entity_name<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(2..=3);
    let mut s = String::new();
    for i in 0..n {
        let syl = SYLLABLES.choose(rng).unwrap();
        if i == 0 {
            let mut c = syl.chars();
            s.extend(c.next().map(|c| c.to_ascii_uppercase()));
            s.push_str(c.as_str());
        } else {
            s.push_str(syl);
        }
    }
    s
}

/// One templated fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: String,
    pub attribute: String,
    pub value: String,
}

impl Fact {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let (attr, values) = ATTRIBUTES.choose(rng).unwrap();
        Self {
            entity: entity_name(rng),
            attribute: (*attr).into(),
            value: (*values.choose(rng).unwrap()).into(),
        }
    }

    pub fn sentence(&self) -> String {
        format!("The {} of {} is {}.", self.attribute, self.entity, self.value)
    }

    pub fn question(&self) -> String {
        format!("What is the {} of {}?", self.attribute, self.entity)
    }
}

/// Contiguous stream of exactly `size` token ids. Text generators emit
/// byte ids.
pub fn build_synthetic_corpus<R: Rng>(kind: &CorpusKind, size: usize, rng: &mut R) -> Result<Vec<u32>> {
    if size == 0 {
        return Err(Error::Parameter("corpus size must be positive".into()));
    }
    Ok(match *kind {
        CorpusKind::MarkovChars {
            chain_seed,
            min_successors,
            max_successors,
        } => MarkovChain::new(chain_seed, min_successors, max_successors)?
            .sample(size, rng)
            .into_iter()
            .map(u32::from)
            .collect(),
        CorpusKind::RandomTokens { vocab } => {
            if vocab == 0 {
                return Err(Error::Parameter("random-token vocabulary must be positive".into()));
            }
            (0..size).map(|_| rng.gen_range(0..vocab)).collect()
        }
        CorpusKind::TemplateFacts => {
            let mut out = Vec::with_capacity(size + 64);
            while out.len() < size {
                if !out.is_empty() {
                    out.push(u32::from(b' '));
                }
                out.extend(Fact::random(rng).sentence().bytes().map(u32::from));
            }
            out.truncate(size);
            out
        }
    })
}

/// Context, question and gold answer built from template facts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub context: String,
    pub instruction: String,
    pub answer: String,
}

/// `n_facts` facts about distinct entities; the question targets one of
/// them chosen uniformly.
pub fn gen_qa_item<R: Rng>(n_facts: usize, rng: &mut R) -> QaItem {
    assert!(n_facts > 0, "a QA item needs at least one fact");
    let mut facts: Vec<Fact> = Vec::with_capacity(n_facts);
    while facts.len() < n_facts {
        let f = Fact::random(rng);
        if facts.iter().all(|g| g.entity != f.entity) {
            facts.push(f);
        }
    }
    let asked = &facts[rng.gen_range(0..n_facts)];
    QaItem {
        context: facts.iter().map(Fact::sentence).collect::<Vec<_>>().join(" "),
        instruction: asked.question(),
        answer: asked.value.clone(),
    }
}

pub fn gen_qa_set<R: Rng>(count: usize, n_facts: usize, rng: &mut R) -> Vec<QaItem> {
    (0..count).map(|_| gen_qa_item(n_facts, rng)).collect()
}
