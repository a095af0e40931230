//! Byte-level corpora: file ingestion and a seeded synthetic text generator.
//!
//! The generator mixes three document kinds so that a small model has both
//! local and long-range structure to learn: templated prose, records whose
//! identifiers recur a few lines later, and short key/value lookup exercises
//! in the same textual shape as the retrieval prompts.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Token;

/// Reads a file as byte tokens `0..=255`.
pub fn ingest_corpus(path: &Path) -> Result<Vec<Token>> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("corpus file {} is empty", path.display())));
    }
    Ok(encode(&bytes))
}

pub fn encode(bytes: &[u8]) -> Vec<Token> {
    bytes.iter().map(|&b| Token::from(b)).collect()
}

/// Inverse of [`encode`]; ids above 255 are replaced by `?`.
pub fn decode(tokens: &[Token]) -> Vec<u8> {
    tokens.iter().map(|&t| u8::try_from(t).unwrap_or(b'?')).collect()
}

pub fn decode_lossy(tokens: &[Token]) -> String {
    String::from_utf8_lossy(&decode(tokens)).into_owned()
}

const SUBJECTS: &[&str] = &[
    "the miller",
    "a young clerk",
    "the old sailor",
    "my neighbour",
    "the baker",
    "a quiet student",
    "the river pilot",
    "her brother",
    "the night guard",
    "a tired painter",
    "the village doctor",
    "our teacher",
];
const VERBS: &[&str] = &[
    "carried",
    "found",
    "painted",
    "sold",
    "repaired",
    "counted",
    "watched",
    "wrote about",
    "lost",
    "borrowed",
    "cleaned",
    "measured",
];
const OBJECTS: &[&str] = &[
    "a wooden box",
    "the broken lamp",
    "three letters",
    "an old map",
    "the red boat",
    "a basket of apples",
    "the iron key",
    "two small drums",
    "the garden gate",
    "a long rope",
    "the blue kettle",
    "seven candles",
];
const PLACES: &[&str] = &[
    "near the harbour",
    "before dawn",
    "in the market",
    "behind the mill",
    "after the storm",
    "along the canal",
    "at the station",
    "under the bridge",
    "by the window",
    "during the fair",
];
const LINKS: &[&str] = &["and then", "but later", "so", "while", "because"];

pub(crate) fn prose_sentence<R: Rng + ?Sized>(rng: &mut R) -> String {
    let pick = |rng: &mut R, xs: &[&str]| xs.choose(rng).copied().unwrap_or_default().to_string();
    let mut s = format!(
        "{} {} {} {}",
        pick(rng, SUBJECTS),
        pick(rng, VERBS),
        pick(rng, OBJECTS),
        pick(rng, PLACES)
    );
    if rng.random_bool(0.4) {
        s.push_str(&format!(
            ", {} {} {} {}",
            pick(rng, LINKS),
            pick(rng, SUBJECTS),
            pick(rng, VERBS),
            pick(rng, OBJECTS)
        ));
    }
    let mut chars = s.chars();
    let first = chars.next().map(|c| c.to_ascii_uppercase()).unwrap_or('T');
    format!("{first}{}. ", chars.as_str())
}

/// Prose filler of roughly `len` bytes (never longer).
pub fn filler_text<R: Rng + ?Sized>(len: usize, rng: &mut R) -> String {
    let mut out = String::new();
    loop {
        let s = prose_sentence(rng);
        if out.len() + s.len() > len {
            break;
        }
        out.push_str(&s);
    }
    out
}

pub(crate) fn hex_id<R: Rng + ?Sized>(len: usize, rng: &mut R) -> String {
    (0..len)
        .map(|_| char::from_digit(rng.random_range(0..16), 16).expect("hex digit"))
        .collect()
}

fn prose_doc<R: Rng + ?Sized>(rng: &mut R) -> String {
    (0..rng.random_range(3..8)).map(|_| prose_sentence(rng)).collect()
}

fn record_doc<R: Rng + ?Sized>(rng: &mut R) -> String {
    let id = hex_id(rng.random_range(6..13), rng);
    let item = OBJECTS.choose(rng).copied().unwrap_or_default();
    let mut doc = format!("record {id}: {item}. ");
    doc.push_str(&filler_text(rng.random_range(20..90), rng));
    doc.push_str(&format!("see record {id}. "));
    doc
}

fn lookup_doc<R: Rng + ?Sized>(rng: &mut R) -> String {
    let n = rng.random_range(1..=3);
    let width = rng.random_range(4..9);
    let pairs: Vec<(String, String)> = (0..n).map(|_| (hex_id(width, rng), hex_id(width, rng))).collect();
    let mut doc = String::from("{");
    for (i, (k, v)) in pairs.iter().enumerate() {
        if i > 0 {
            doc.push_str(", ");
        }
        doc.push_str(&format!("\"{k}\": \"{v}\""));
    }
    doc.push_str("}\n");
    if rng.random_bool(0.5) {
        doc.push_str(&filler_text(rng.random_range(10..50), rng));
    }
    let (k, v) = pairs.choose(rng).expect("nonempty");
    doc.push_str(&format!("What is the value of key \"{k}\"? \"{v}\""));
    doc
}

/// About `n_bytes` of synthetic text.
pub fn synthetic_corpus<R: Rng + ?Sized>(n_bytes: usize, rng: &mut R) -> Vec<u8> {
    let mut out = String::with_capacity(n_bytes + 512);
    while out.len() < n_bytes {
        let doc = match rng.random_range(0..10) {
            0..=4 => prose_doc(rng),
            5..=7 => record_doc(rng),
            _ => lookup_doc(rng),
        };
        out.push_str(doc.trim_end());
        out.push_str("\n\n");
    }
    out.truncate(n_bytes);
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    #[test]
    fn bytes_are_tokens() {
        assert_eq!(encode(b"abc"), vec![97, 98, 99]);
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(decode(&encode(&all)), all);
    }

    #[test]
    fn ingest_counts_bytes_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(&vec![b'x'; 1 << 20]).unwrap();
        drop(f);
        assert_eq!(ingest_corpus(&p).unwrap().len(), 1_048_576);
        let empty = dir.path().join("e.txt");
        fs::write(&empty, b"").unwrap();
        assert!(matches!(ingest_corpus(&empty), Err(Error::Data(_))));
    }

    #[test]
    fn synthetic_is_seeded_ascii() {
        let a = synthetic_corpus(5000, &mut ChaCha8Rng::seed_from_u64(1));
        let b = synthetic_corpus(5000, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.len(), 5000);
        assert!(a.iter().all(|c| c.is_ascii()));
        let text = String::from_utf8(a).unwrap();
        assert!(text.contains("What is the value of key"));
        assert!(text.contains("see record"));
    }

    #[test]
    fn filler_respects_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for len in [0, 10, 100, 1000] {
            assert!(filler_text(len, &mut rng).len() <= len);
        }
    }
}
