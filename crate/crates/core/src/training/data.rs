use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// One training example: `targets[j] == tokens[j + 1]` of the underlying
/// window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Sequence {
    pub fn from_window(window: &[usize]) -> Self {
        Self {
            tokens: window[..window.len() - 1].to_vec(),
            targets: window[1..].to_vec(),
        }
    }
}

/// Character-level corpus with a vocabulary of its sorted distinct chars.
#[derive(Debug, Clone)]
pub struct CharCorpus {
    pub vocab: Vec<char>,
    pub ids: Vec<usize>,
}

impl CharCorpus {
    pub fn from_text(text: &str) -> Result<Self> {
        let vocab: Vec<char> = text.chars().collect::<BTreeSet<_>>().into_iter().collect();
        if vocab.len() < 2 {
            return Err(Error::Data("corpus needs at least two distinct characters".into()));
        }
        let ids = text
            .chars()
            .map(|c| vocab.binary_search(&c).expect("char is in vocab"))
            .collect();
        Ok(Self { vocab, ids })
    }

    /// Encodes with an existing vocabulary, failing on unknown characters.
    pub fn encode(vocab: &[char], text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                vocab
                    .iter()
                    .position(|&v| v == c)
                    .ok_or_else(|| Error::Data(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.vocab[i]).collect()
    }
}

/// Shuffled non-overlapping windows of `seq_len + 1` tokens, reshuffled each
/// epoch.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    seq_len: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    single_epoch: bool,
    rng: Rng,
}

impl WindowSampler {
    pub fn new(n_tokens: usize, seq_len: usize, rng: Rng, single_epoch: bool) -> Result<Self> {
        let windows = n_tokens.saturating_sub(1) / seq_len;
        if windows == 0 {
            return Err(Error::Data(format!(
                "corpus of {n_tokens} tokens is shorter than one window of {}",
                seq_len + 1
            )));
        }
        let mut s = Self {
            seq_len,
            order: (0..windows).map(|w| w * seq_len).collect(),
            pos: 0,
            epoch: 0,
            single_epoch,
            rng,
        };
        s.rng.shuffle(&mut s.order);
        Ok(s)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn windows(&self) -> usize {
        self.order.len()
    }

    pub fn next_sequence(&mut self, ids: &[usize]) -> Result<Sequence> {
        if self.pos == self.order.len() {
            if self.single_epoch {
                return Err(Error::Data("training data exhausted after one epoch".into()));
            }
            self.epoch += 1;
            self.pos = 0;
            self.rng.shuffle(&mut self.order);
        }
        let start = self.order[self.pos];
        self.pos += 1;
        Ok(Sequence::from_window(&ids[start..start + self.seq_len + 1]))
    }
}

/// Synthetic needle-recall layout over a small vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeedleSpec {
    pub vocab: usize,
    pub payload_alphabet: usize,
    pub distance: usize,
}

pub const NEEDLE_MARKER: usize = 0;
pub const NEEDLE_QUERY: usize = 1;
const NEEDLE_PAYLOAD_START: usize = 2;

impl NeedleSpec {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.payload_alphabet == 0 {
            return Err(Error::Config("needle payload alphabet must be non-empty".into()));
        }
        if self.vocab < NEEDLE_PAYLOAD_START + self.payload_alphabet + 1 {
            return Err(Error::Config(format!(
                "needle vocab {} leaves no filler tokens after {} payload ids",
                self.vocab, self.payload_alphabet
            )));
        }
        if self.distance == 0 || self.distance + 2 >= seq_len {
            return Err(Error::Config(format!(
                "needle distance {} must be in 1..{}",
                self.distance,
                seq_len.saturating_sub(2)
            )));
        }
        Ok(())
    }

    pub fn chance_accuracy(&self) -> f64 {
        1.0 / self.payload_alphabet as f64
    }
}

/// A needle example and where its answer sits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeedleSample {
    pub seq: Sequence,
    /// Input position of the query token; `seq.targets[query_pos] == payload`.
    pub query_pos: usize,
    pub payload: usize,
}

/// Marker then payload, filler, and a query token `distance` positions
/// after the payload whose next-token target is the payload.
pub fn needle_task(rng: &mut Rng, seq_len: usize, spec: &NeedleSpec) -> Result<NeedleSample> {
    spec.validate(seq_len)?;
    let filler_start = NEEDLE_PAYLOAD_START + spec.payload_alphabet;
    let n_filler = spec.vocab - filler_start;
    let mut window: Vec<usize> = (0..=seq_len)
        .map(|_| filler_start + rng.below(n_filler))
        .collect();
    let marker = rng.below(seq_len - 1 - spec.distance);
    let payload = NEEDLE_PAYLOAD_START + rng.below(spec.payload_alphabet);
    let query_pos = marker + 1 + spec.distance;
    window[marker] = NEEDLE_MARKER;
    window[marker + 1] = payload;
    window[query_pos] = NEEDLE_QUERY;
    window[query_pos + 1] = payload;
    Ok(NeedleSample {
        seq: Sequence::from_window(&window),
        query_pos,
        payload,
    })
}

const SUBJECTS: &[&str] = &[
    "the miller", "a sailor", "the old clerk", "my sister", "the baker", "a stranger",
    "the captain", "our neighbour", "the girl", "a young doctor", "the weaver", "his father",
];
const VERBS: &[(&str, &str)] = &[
    ("sees", "saw"), ("carries", "carried"), ("finds", "found"), ("mends", "mended"),
    ("sells", "sold"), ("paints", "painted"), ("counts", "counted"), ("keeps", "kept"),
    ("loses", "lost"), ("brings", "brought"),
];
const OBJECTS: &[&str] = &[
    "the red boat", "a letter", "three apples", "the lantern", "an old map", "the key",
    "a basket of bread", "the broken wheel", "two coins", "the garden gate", "a small box",
];
const PLACES: &[&str] = &[
    "by the river", "in the market", "near the mill", "at the harbour", "under the bridge",
    "on the hill", "behind the church", "in the kitchen",
];
const TIMES: &[&str] = &[
    "in the morning", "at noon", "before dawn", "after the rain", "on sunday", "every evening",
];
const LINKS: &[&str] = &["and then", "but", "because", "so", "while"];

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

fn clause(rng: &mut Rng, past: bool) -> String {
    let (pres, pst) = VERBS[rng.below(VERBS.len())];
    let mut s = format!(
        "{} {} {}",
        pick(rng, SUBJECTS),
        if past { pst } else { pres },
        pick(rng, OBJECTS)
    );
    if rng.uniform() < 0.5 {
        s.push(' ');
        s.push_str(pick(rng, PLACES));
    }
    if rng.uniform() < 0.3 {
        s.push(' ');
        s.push_str(pick(rng, TIMES));
    }
    s
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Deterministic English-like text from a small phrase grammar: tense held
/// per paragraph, compound sentences, quoted speech and numbered lists.
pub fn synthetic_corpus(seed: u64, bytes: usize) -> String {
    let mut rng = Rng::with_stream(seed, 0x5eed);
    let mut out = String::with_capacity(bytes + 256);
    let mut para = 0usize;
    while out.len() < bytes {
        let past = rng.uniform() < 0.5;
        let sentences = 2 + rng.below(5);
        para += 1;
        if para % 7 == 0 {
            out.push_str(&format!("Chapter {}.\n", para / 7));
        }
        for i in 0..sentences {
            if i > 0 {
                out.push(' ');
            }
            let roll = rng.uniform();
            let body = if roll < 0.15 {
                let speaker = pick(&mut rng, SUBJECTS);
                format!("\"{}\", said {speaker}.", capitalize(&clause(&mut rng, past)))
            } else if roll < 0.25 {
                let n = 2 + rng.below(3);
                let items: Vec<String> = (1..=n)
                    .map(|k| format!("({k}) {}", pick(&mut rng, OBJECTS)))
                    .collect();
                format!("There were {n} things: {}.", items.join(", "))
            } else if roll < 0.6 {
                let a = clause(&mut rng, past);
                let link = pick(&mut rng, LINKS);
                let b = clause(&mut rng, past);
                format!("{} {link} {b}.", capitalize(&a))
            } else {
                format!("{}.", capitalize(&clause(&mut rng, past)))
            };
            out.push_str(&body);
        }
        out.push_str("\n\n");
    }
    out
}
