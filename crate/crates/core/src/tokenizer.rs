//! Toy tokenizers: a byte-level tokenizer for the language model and a
//! hashed whitespace tokenizer for the retriever's text encoder.

/// Byte values occupy ids `0..256`; specials follow.
pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const SEP: usize = 258;
pub const BYTE_VOCAB: usize = 259;

pub fn encode_bytes(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Decodes byte ids, dropping specials and anything out of byte range.
pub fn decode_bytes(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Byte tokens of several texts joined by `SEP`, cut to at most `cap` ids.
pub fn join_texts<S: AsRef<str>>(texts: &[S], cap: usize) -> Vec<usize> {
    let mut ids = Vec::new();
    for (i, t) in texts.iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(encode_bytes(t.as_ref()));
    }
    ids.truncate(cap);
    ids
}

/// Lowercased whitespace words hashed (FNV-1a, 64-bit) into `vocab` buckets.
pub fn hash_words(text: &str, vocab: usize) -> Vec<usize> {
    assert!(vocab > 0, "vocabulary must be nonempty");
    text.split_whitespace()
        .map(|w| (fnv1a(w.to_lowercase().as_bytes()) % vocab as u64) as usize)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// L2-normalized token-count vector of length `vocab`.
pub fn bag_of_tokens(tokens: &[usize], vocab: usize) -> Option<Vec<f64>> {
    let mut counts = vec![0.0; vocab];
    for &t in tokens {
        *counts.get_mut(t)? += 1.0;
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    counts.iter_mut().for_each(|c| *c /= norm);
    Some(counts)
}
