//! Byte-level BPE with byte-span reporting.
//!
//! The base alphabet is the 256 byte values; merge `i` creates symbol
//! `256 + i`. No pre-tokenization is applied, so every encoding is an exact
//! partition of the input bytes and spans are reported alongside ids.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{config_err, file_err, Error, Result};

pub const BYTE_VOCAB: usize = 256;
const HEADER: &str = "bpe-v1";

/// One token and the half-open byte range `[start, end)` it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenSpan {
    pub token_id: u32,
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Ordered merge list plus derived lookup tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    expansions: Vec<Vec<u8>>,
    max_token_bytes: usize,
}

impl Default for MergeTable {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl MergeTable {
    /// Pure byte vocabulary, no merges.
    pub fn byte_level() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    /// Builds a table from `(left, right)` pairs; pair `i` defines symbol `256 + i`.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut expansions: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, &(l, r)) in merges.iter().enumerate() {
            let new = (BYTE_VOCAB + i) as u32;
            if l >= new || r >= new {
                return Err(Error::Format(format!(
                    "merge {i} ({l}, {r}) -> {new} references an undefined symbol"
                )));
            }
            if ranks.insert((l, r), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate merge ({l}, {r})")));
            }
            let mut bytes = expansions[l as usize].clone();
            bytes.extend_from_slice(&expansions[r as usize]);
            expansions.push(bytes);
        }
        let max_token_bytes = expansions.iter().map(Vec::len).max().unwrap_or(1);
        Ok(Self {
            merges,
            ranks,
            expansions,
            max_token_bytes,
        })
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Longest byte expansion of any symbol.
    pub fn max_token_bytes(&self) -> usize {
        self.max_token_bytes
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.expansions.get(id as usize).map(Vec::as_slice)
    }

    /// The first `n` merges as a table of their own.
    pub fn truncated(&self, n: usize) -> Self {
        Self::from_merges(self.merges[..n.min(self.merges.len())].to_vec())
            .expect("prefix of a valid merge list is valid")
    }

    /// Applies merges by training-order priority and reports each token's span.
    pub fn encode_with_spans(&self, text: &[u8]) -> Vec<TokenSpan> {
        let n = text.len();
        if n == 0 {
            return Vec::new();
        }
        let mut sym: Vec<u32> = text.iter().map(|&b| b as u32).collect();
        let mut next: Vec<usize> = (1..=n).collect();
        let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
        let mut alive = vec![true; n];
        let mut heap = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<Reverse<(u32, usize, u32, u32)>>, pos: usize, l: u32, r: u32| {
            if let Some(&rank) = self.ranks.get(&(l, r)) {
                heap.push(Reverse((rank, pos, l, r)));
            }
        };
        for i in 0..n - 1 {
            push(&mut heap, i, sym[i], sym[i + 1]);
        }
        while let Some(Reverse((rank, pos, l, r))) = heap.pop() {
            let nx = next[pos];
            if !alive[pos] || nx >= n || sym[pos] != l || sym[nx] != r {
                continue;
            }
            let new = BYTE_VOCAB as u32 + rank;
            sym[pos] = new;
            alive[nx] = false;
            let after = next[nx];
            next[pos] = after;
            if after < n {
                prev[after] = pos;
                push(&mut heap, pos, new, sym[after]);
            }
            let before = prev[pos];
            if before < n {
                push(&mut heap, before, sym[before], new);
            }
        }
        let mut spans = Vec::new();
        let mut i = 0;
        while i < n {
            let end = next[i].min(n);
            spans.push(TokenSpan {
                token_id: sym[i],
                start: i,
                end,
            });
            i = end;
        }
        spans
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        self.encode_with_spans(text)
            .into_iter()
            .map(|s| s.token_id)
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.token_bytes(id).ok_or_else(|| {
                Error::Index(format!("token {id} outside vocabulary of {}", self.vocab_size()))
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// `bpe-v1 <vocab_size>` followed by one `left right new` line per merge.
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} {}\n", self.vocab_size());
        for (i, (l, r)) in self.merges.iter().enumerate() {
            let _ = writeln!(s, "{l} {r} {}", BYTE_VOCAB + i);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty merge file".into()))?;
        let vocab: usize = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            [h, v] if *h == HEADER => v
                .parse()
                .map_err(|_| Error::Format(format!("bad vocab size in header {header:?}")))?,
            _ => return Err(Error::Format(format!("expected '{HEADER} <vocab_size>', got {header:?}"))),
        };
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let nums = line
                .split_whitespace()
                .map(str::parse::<u32>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("line {}: {line:?}", i + 2)))?;
            match nums.as_slice() {
                [l, r, new] if *new as usize == BYTE_VOCAB + merges.len() => merges.push((*l, *r)),
                _ => return Err(Error::Format(format!("line {}: {line:?}", i + 2))),
            }
        }
        let table = Self::from_merges(merges)?;
        if table.vocab_size() != vocab {
            return Err(Error::Format(format!(
                "header declares {vocab} symbols, file defines {}",
                table.vocab_size()
            )));
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(file_err(path))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path).map_err(file_err(path))?)
    }
}

/// Greedy most-frequent-pair merging until `vocab_size` symbols exist or no
/// adjacent pair occurs twice. Ties go to the smallest `(left, right)`.
pub fn train_bpe(corpus: &[u8], vocab_size: usize) -> Result<MergeTable> {
    if vocab_size < BYTE_VOCAB {
        return Err(config_err(format!("vocab_size {vocab_size} < {BYTE_VOCAB}")));
    }
    if corpus.is_empty() {
        return Err(Error::Data("cannot train BPE on an empty corpus".into()));
    }
    let mut seq: Vec<u32> = corpus.iter().map(|&b| b as u32).collect();
    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    for w in seq.windows(2) {
        *counts.entry((w[0], w[1])).or_default() += 1;
    }
    let mut merges = Vec::new();
    while BYTE_VOCAB + merges.len() < vocab_size {
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by_key(|(&pair, &c)| (c, Reverse(pair)))
            .map(|(&pair, _)| pair);
        let Some((a, b)) = best else { break };
        let new = (BYTE_VOCAB + merges.len()) as u32;
        merges.push((a, b));
        seq = apply_merge(&seq, a, b, new, &mut counts);
    }
    MergeTable::from_merges(merges)
}

fn apply_merge(
    seq: &[u32],
    a: u32,
    b: u32,
    new: u32,
    counts: &mut HashMap<(u32, u32), i64>,
) -> Vec<u32> {
    let mut bump = |pair: (u32, u32), d: i64| {
        let c = counts.entry(pair).or_default();
        *c += d;
        if *c == 0 {
            counts.remove(&pair);
        }
    };
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
            if let Some(&p) = out.last() {
                bump((p, a), -1);
                bump((p, new), 1);
            }
            bump((a, b), -1);
            if let Some(&nx) = seq.get(i + 2) {
                bump((b, nx), -1);
                bump((new, nx), 1);
            }
            out.push(new);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_best_pair(seq: &[u32]) -> Option<((u32, u32), usize)> {
        let mut best: Option<((u32, u32), usize)> = None;
        for i in 0..seq.len().saturating_sub(1) {
            let pair = (seq[i], seq[i + 1]);
            let count = seq.windows(2).filter(|w| (w[0], w[1]) == pair).count();
            let better = match best {
                None => true,
                Some((bp, bc)) => count > bc || (count == bc && pair < bp),
            };
            if better {
                best = Some((pair, count));
            }
        }
        best.filter(|&(_, c)| c >= 2)
    }

    #[test]
    fn byte_vocab_has_no_merges() {
        let t = train_bpe(b"hello hello hello", 256).unwrap();
        assert!(t.merges().is_empty());
        assert_eq!(t.max_token_bytes(), 1);
    }

    #[test]
    fn aaaa_single_merge() {
        let t = train_bpe(b"aaaa", 257).unwrap();
        assert_eq!(t.merges(), &[(97, 97)]);
        assert_eq!(t.encode(b"aaaa"), vec![256, 256]);
    }

    #[test]
    fn rejects_small_vocab_and_empty_corpus() {
        assert!(matches!(train_bpe(b"abc", 255), Err(Error::Config(_))));
        assert!(matches!(train_bpe(b"", 300), Err(Error::Data(_))));
    }

    #[test]
    fn incremental_counts_match_brute_force() {
        let corpus = b"the cat sat on the mat; the bat ate the hat. abababab aaaaa";
        let table = train_bpe(corpus, 280).unwrap();
        let mut seq: Vec<u32> = corpus.iter().map(|&b| b as u32).collect();
        for (i, &(l, r)) in table.merges().iter().enumerate() {
            let (pair, _) = brute_force_best_pair(&seq).expect("trainer merged past exhaustion");
            assert_eq!(pair, (l, r), "merge {i}");
            let mut dummy = HashMap::new();
            seq = apply_merge(&seq, l, r, (256 + i) as u32, &mut dummy);
        }
        if table.vocab_size() < 280 {
            assert!(brute_force_best_pair(&seq).is_none());
        }
        assert_eq!(table.encode(corpus), seq);
    }

    #[test]
    fn spans_and_decode() {
        assert!(MergeTable::byte_level().encode_with_spans(b"").is_empty());
        assert_eq!(
            MergeTable::byte_level().encode_with_spans(b"a"),
            vec![TokenSpan { token_id: 97, start: 0, end: 1 }]
        );
        let t = MergeTable::byte_level();
        assert_eq!(t.decode(&[]).unwrap(), b"");
        assert_eq!(t.decode(&[97, 98]).unwrap(), b"ab");
        assert!(matches!(t.decode(&[256]), Err(Error::Index(_))));
    }

    #[test]
    fn text_format_round_trip_and_validation() {
        let t = train_bpe(b"low lower lowest newer wider", 270).unwrap();
        let text = t.to_text();
        assert!(text.starts_with(&format!("bpe-v1 {}\n", t.vocab_size())));
        assert_eq!(MergeTable::from_text(&text).unwrap(), t);
        assert!(MergeTable::from_text("bpe-v1 257\n97 97 300\n").is_err());
        assert!(MergeTable::from_text("bpe-v1 258\n97 97 256\n").is_err());
        assert!(MergeTable::from_text("bpe-v2 256\n").is_err());
        assert!(MergeTable::from_text("bpe-v1 257\n300 97 256\n").is_err());
    }
}
