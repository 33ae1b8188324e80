//! Plain-text corpus ingestion and the train/validation split.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{data_err, file_err, Result};
use crate::tokenizer::{MergeTable, TokenSpan};

/// Token ids with the byte range each covers. Separators cover no bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    /// `spans[i]` locates `ids[i]` within `text`.
    pub spans: Vec<TokenSpan>,
    pub text: Vec<u8>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Bytes of the source text this stream covers.
    pub fn byte_len(&self) -> usize {
        self.text.len()
    }

    /// Concatenates the bytes of every span, which reproduces `text`.
    pub fn reconstruct(&self) -> Vec<u8> {
        self.spans
            .iter()
            .flat_map(|s| self.text[s.start..s.end].iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: TokenStream,
    pub val: TokenStream,
}

/// Reads a file as one document, or every regular file under a directory
/// (recursively, sorted by path) as one document each.
pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<Vec<u8>>> {
    let path = path.as_ref();
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    let docs = files
        .iter()
        .map(|f| std::fs::read(f).map_err(file_err(f)))
        .collect::<Result<Vec<_>>>()?;
    let docs: Vec<Vec<u8>> = docs.into_iter().filter(|d| !d.is_empty()).collect();
    if docs.is_empty() {
        return Err(data_err(format!("corpus at {} is empty", path.display())));
    }
    Ok(docs)
}

fn collect_files(path: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    if path.is_dir() {
        for entry in std::fs::read_dir(path).map_err(file_err(path))? {
            collect_files(&entry?.path(), out)?;
        }
    } else {
        std::fs::metadata(path).map_err(file_err(path))?;
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Encodes consecutive document segments of `text`, each prefixed by the
/// separator id (`merges.vocab_size()`).
pub fn encode_segments(merges: &MergeTable, text: &[u8], boundaries: &[usize]) -> TokenStream {
    let separator = merges.vocab_size() as u32;
    let mut edges = vec![0];
    edges.extend(boundaries.iter().copied().filter(|&b| b > 0 && b < text.len()));
    edges.push(text.len());
    edges.dedup();
    let pieces: Vec<Vec<TokenSpan>> = edges
        .par_windows(2)
        .map(|w| {
            let mut spans = vec![TokenSpan {
                token_id: separator,
                start: w[0],
                end: w[0],
            }];
            spans.extend(merges.encode_with_spans(&text[w[0]..w[1]]).into_iter().map(|s| TokenSpan {
                start: s.start + w[0],
                end: s.end + w[0],
                ..s
            }));
            spans
        })
        .collect();
    let spans: Vec<TokenSpan> = pieces.into_iter().flatten().collect();
    TokenStream {
        ids: spans.iter().map(|s| s.token_id).collect(),
        spans,
        text: text.to_vec(),
    }
}

/// Concatenates documents and holds out the final `val_fraction` of bytes.
/// Every document start, and the start of each part, gets a separator token.
pub fn build_corpus(docs: &[Vec<u8>], merges: &MergeTable, val_fraction: f64) -> Result<Corpus> {
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(crate::error::config_err(format!(
            "val_fraction {val_fraction} outside (0, 0.5)"
        )));
    }
    let total: usize = docs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(data_err("corpus is empty"));
    }
    let mut text = Vec::with_capacity(total);
    let mut starts = Vec::with_capacity(docs.len());
    for d in docs {
        starts.push(text.len());
        text.extend_from_slice(d);
    }
    let val_bytes = ((total as f64 * val_fraction).round() as usize).clamp(1, total - 1);
    let cut = total - val_bytes;
    let train_bounds: Vec<usize> = starts.iter().copied().filter(|&s| s < cut).collect();
    let val_bounds: Vec<usize> = starts.iter().filter(|&&s| s > cut).map(|&s| s - cut).collect();
    Ok(Corpus {
        train: encode_segments(merges, &text[..cut], &train_bounds),
        val: encode_segments(merges, &text[cut..], &val_bounds),
    })
}

pub fn load_corpus(path: impl AsRef<Path>, merges: &MergeTable, val_fraction: f64) -> Result<Corpus> {
    build_corpus(&load_documents(path)?, merges, val_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_is_held_out() {
        let doc: Vec<u8> = (0..1000).map(|i| b'a' + (i % 26) as u8).collect();
        let c = build_corpus(std::slice::from_ref(&doc), &MergeTable::byte_level(), 0.1).unwrap();
        assert_eq!(c.val.text, &doc[900..]);
        assert_eq!(c.train.text, &doc[..900]);
        // Byte vocabulary: one token per byte plus the leading separator.
        assert_eq!(c.val.len(), 101);
        assert_eq!(c.val.ids[0], 256);
        assert_eq!(c.train.reconstruct(), c.train.text);
    }

    #[test]
    fn documents_are_separated() {
        let docs = vec![b"hello".to_vec(), b"world".to_vec(), b"again and again".to_vec()];
        let merges = crate::tokenizer::train_bpe(b"hello world again and again", 270).unwrap();
        let c = build_corpus(&docs, &merges, 0.2).unwrap();
        let sep = merges.vocab_size() as u32;
        assert_eq!(c.train.ids.iter().filter(|&&i| i == sep).count(), 3);
        assert_eq!(c.train.reconstruct(), c.train.text);
        assert_eq!(c.val.reconstruct(), c.val.text);
        assert_eq!([c.train.text.clone(), c.val.text.clone()].concat(), docs.concat());
    }

    #[test]
    fn empty_inputs_fail() {
        assert!(build_corpus(&[Vec::new()], &MergeTable::byte_level(), 0.1).is_err());
        assert!(build_corpus(&[b"abc".to_vec()], &MergeTable::byte_level(), 0.7).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_documents(dir.path()), Err(crate::Error::Data(_))));
    }
}
