//! Byte-level corpus handling: loading, chunking, disjointness checks and a
//! seeded synthetic text generator for tests and smoke runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::seeds::rng_for;

/// Byte placed between concatenated documents.
pub const DOC_SEPARATOR: u8 = 0x1E;

/// Reads a file, or every regular file below a directory in sorted path
/// order joined by [`DOC_SEPARATOR`].
pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    let meta = fs::metadata(path).map_err(|e| LabError::io(path, e))?;
    if meta.is_file() {
        return fs::read(path).map_err(|e| LabError::io(path, e));
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    let mut out = Vec::new();
    for (i, f) in files.iter().enumerate() {
        if i > 0 {
            out.push(DOC_SEPARATOR);
        }
        out.extend(fs::read(f).map_err(|e| LabError::io(f, e))?);
    }
    Ok(out)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| LabError::io(dir, e))? {
        let entry = entry.map_err(|e| LabError::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if p.is_file() {
            out.push(p);
        }
    }
    Ok(())
}

/// Non-overlapping chunks of `chunk_len` byte tokens; a trailing partial
/// chunk is dropped.
pub fn chunk_bytes(bytes: &[u8], chunk_len: usize) -> Vec<Vec<u32>> {
    bytes
        .chunks_exact(chunk_len.max(1))
        .map(|c| c.iter().map(|&b| b as u32).collect())
        .collect()
}

/// Loads and chunks an evaluation or calibration split, keeping at most
/// `max_chunks` chunks.
pub fn load_split(path: &Path, chunk_len: usize, max_chunks: Option<usize>) -> Result<Vec<Vec<u32>>> {
    let bytes = load_corpus(path)?;
    let mut chunks = chunk_bytes(&bytes, chunk_len);
    if let Some(m) = max_chunks {
        chunks.truncate(m);
    }
    if chunks.is_empty() {
        return Err(LabError::usage(format!(
            "split {} has fewer than {chunk_len} bytes",
            path.display()
        )));
    }
    Ok(chunks)
}

pub fn chunk_hash(chunk: &[u32]) -> String {
    let mut h = Sha256::new();
    for &t in chunk {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Errors if any chunk of `a` also appears (by content hash) in `b`.
pub fn check_disjoint(a: &[Vec<u32>], b: &[Vec<u32>]) -> Result<()> {
    let ha: BTreeSet<String> = a.iter().map(|c| chunk_hash(c)).collect();
    let shared = b.iter().filter(|c| ha.contains(&chunk_hash(c))).count();
    if shared > 0 {
        return Err(LabError::usage(format!(
            "calibration and evaluation splits share {shared} chunk(s)"
        )));
    }
    Ok(())
}

/// SHA-256 of a file's contents (hex), for output manifests.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = if path.is_dir() { load_corpus(path)? } else { fs::read(path).map_err(|e| LabError::io(path, e))? };
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Seeded pseudo-English text from a first-order word chain. Each word has a
/// handful of preferred successors, so the byte stream has learnable
/// structure at word and character level.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> Vec<u8> {
    const SYLLABLES: [&str; 24] = [
        "ka", "lo", "mi", "ra", "te", "su", "ne", "po", "di", "va", "shi", "tor", "an", "el", "qu", "ber",
        "lin", "ost", "ume", "ca", "ri", "fa", "go", "he",
    ];
    let mut rng = rng_for(seed, "synthetic_text", &[]);
    // Word list and successor table depend only on a fixed seed, so every
    // corpus seed speaks the same "language".
    let mut lang = rng_for(0x5EED, "synthetic_language", &[]);
    let n_words = 160;
    let words: Vec<String> = (0..n_words)
        .map(|_| {
            let n = lang.random_range(1..=3);
            (0..n).map(|_| SYLLABLES[lang.random_range(0..SYLLABLES.len())]).collect()
        })
        .collect();
    let successors: Vec<Vec<usize>> = (0..n_words)
        .map(|_| (0..4).map(|_| lang.random_range(0..n_words)).collect())
        .collect();
    let mut out = Vec::with_capacity(n_bytes + 32);
    let mut word = rng.random_range(0..n_words);
    let mut sentence_len = 0;
    let mut capitalize = true;
    while out.len() < n_bytes {
        let w = &words[word];
        if capitalize {
            let mut cs = w.chars();
            if let Some(c) = cs.next() {
                out.extend(c.to_uppercase().to_string().bytes());
                out.extend(cs.as_str().bytes());
            }
            capitalize = false;
        } else {
            out.extend(w.bytes());
        }
        sentence_len += 1;
        if sentence_len > 4 && rng.random_bool(0.2) {
            out.extend_from_slice(if rng.random_bool(0.15) { b".\n" } else { b". " });
            sentence_len = 0;
            capitalize = true;
        } else if rng.random_bool(0.08) {
            out.extend_from_slice(b", ");
        } else {
            out.push(b' ');
        }
        word = if rng.random_bool(0.9) {
            *successors[word].choose(&mut rng).expect("non-empty")
        } else {
            rng.random_range(0..n_words)
        };
    }
    out.truncate(n_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_seeded_ascii() {
        let a = synthetic_text(1, 4096);
        assert_eq!(a.len(), 4096);
        assert_eq!(a, synthetic_text(1, 4096));
        assert_ne!(a, synthetic_text(2, 4096));
        assert!(a.iter().all(|b| b.is_ascii()));
    }

    #[test]
    fn chunks_drop_remainder() {
        let c = chunk_bytes(b"abcdefg", 3);
        assert_eq!(c, vec![vec![97, 98, 99], vec![100, 101, 102]]);
    }

    #[test]
    fn disjointness_detects_overlap() {
        let a = chunk_bytes(&synthetic_text(1, 1024), 64);
        let b = chunk_bytes(&synthetic_text(2, 1024), 64);
        assert!(check_disjoint(&a, &b).is_ok());
        let mut c = b.clone();
        c.push(a[3].clone());
        assert!(check_disjoint(&a, &c).is_err());
    }

    #[test]
    fn directory_corpus_is_sorted_and_separated() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), b"second").unwrap();
        fs::write(dir.path().join("a.txt"), b"first").unwrap();
        let bytes = load_corpus(dir.path()).unwrap();
        assert_eq!(bytes, [b"first".as_slice(), &[DOC_SEPARATOR], b"second"].concat());
    }
}
