//! Corpus loading, train/held-out splitting and a deterministic synthetic
//! English-like text generator for offline runs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Ingestion(format!("{} is empty", path.display())));
    }
    Ok(bytes)
}

/// Splits token ids into a leading training part and the trailing
/// `held_out` fraction.
pub fn split(tokens: &[usize], held_out: f64) -> Result<(&[usize], &[usize])> {
    if !(0.0..1.0).contains(&held_out) {
        return Err(Error::Config(format!("held-out fraction {held_out} outside [0, 1)")));
    }
    let cut = tokens.len() - (tokens.len() as f64 * held_out).round() as usize;
    Ok(tokens.split_at(cut))
}

const NOUNS: &[&str] = &[
    "river", "garden", "house", "king", "child", "letter", "window", "road", "mountain", "ship",
    "village", "teacher", "doctor", "horse", "tree", "stone", "bird", "city", "friend", "book",
    "sister", "brother", "farmer", "soldier", "morning", "evening", "table", "door", "field", "lamp",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "small", "bright", "dark", "green", "little", "cold", "warm", "gentle", "strange",
    "tired", "proud", "empty", "heavy",
];
const VERBS: &[(&str, &str)] = &[
    ("walked", "towards"),
    ("looked", "at"),
    ("waited", "for"),
    ("listened", "to"),
    ("ran", "across"),
    ("spoke", "to"),
    ("thought", "about"),
    ("turned", "from"),
    ("sat", "beside"),
    ("smiled", "at"),
];
const PLACES: &[&str] = &[
    "in the morning",
    "after the rain",
    "before the storm",
    "near the old bridge",
    "under the tall trees",
    "at the end of the road",
    "by the window",
    "in the quiet village",
];
const NAMES: &[&str] = &["Anna", "Thomas", "Mary", "John", "Elsie", "Peter", "Clara", "Henry"];
const OPENERS: &[&str] = &["Then", "Later", "At last", "Once more", "Soon", "For a while"];
const SPEECH: &[&str] = &[
    "I will come back tomorrow",
    "the night is long and cold",
    "we must go home now",
    "there is nothing more to say",
    "the river is rising again",
    "you should rest for a while",
];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("nonempty list")
}

fn noun_phrase<R: Rng>(rng: &mut R) -> String {
    if rng.gen_bool(0.4) {
        format!("the {} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS))
    } else {
        format!("the {}", pick(rng, NOUNS))
    }
}

fn subject<R: Rng>(rng: &mut R) -> String {
    if rng.gen_bool(0.35) {
        pick(rng, NAMES).to_string()
    } else {
        noun_phrase(rng)
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence<R: Rng>(rng: &mut R) -> String {
    let (verb, prep) = *VERBS.choose(rng).expect("nonempty list");
    match rng.gen_range(0..5) {
        0 => format!("{} {verb} {prep} {}.", capitalize(&subject(rng)), noun_phrase(rng)),
        1 => format!(
            "{}, {} {verb} {prep} {} {}.",
            pick(rng, OPENERS),
            subject(rng),
            noun_phrase(rng),
            pick(rng, PLACES)
        ),
        2 => format!(
            "\"{}\", said {}.",
            capitalize(pick(rng, SPEECH)),
            subject(rng)
        ),
        3 => format!(
            "{} {verb} {prep} {} and {} {verb} {prep} {}.",
            capitalize(&subject(rng)),
            noun_phrase(rng),
            subject(rng),
            noun_phrase(rng)
        ),
        _ => format!(
            "{} was {} and {}.",
            capitalize(&noun_phrase(rng)),
            pick(rng, ADJECTIVES),
            pick(rng, ADJECTIVES)
        ),
    }
}

/// Deterministic pseudo-English prose of at least `min_bytes` bytes.
pub fn synth_corpus(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 512);
    while out.len() < min_bytes {
        let n = rng.gen_range(3..7);
        let para: Vec<String> = (0..n).map(|_| sentence(&mut rng)).collect();
        out.push_str(&para.join(" "));
        out.push_str("\n\n");
    }
    out
}
