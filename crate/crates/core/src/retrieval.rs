//! Bit-packed Hamming-space database with exact top-k search and persistence.
//!
//! Searches are exact linear scans over packed codes; ranking is by Hamming
//! distance with ties broken by ascending sample id, so results are invariant
//! to storage order.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::types::{HashCode, LabelSet};

const MAGIC: &[u8; 4] = b"HHDB";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("code length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("database arrays disagree in length")]
    RaggedDatabase,
    #[error("bad magic bytes at offset 0")]
    BadMagic,
    #[error("unsupported version {0} at offset 4")]
    BadVersion(u32),
    #[error("truncated or malformed file at byte offset {offset}: {what}")]
    Malformed { offset: u64, what: String },
    #[error("invalid stored code: {0}")]
    BadCode(#[from] crate::types::TypeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Packed codes, label sets and ids for one corpus; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDatabase {
    k: usize,
    codes: Vec<HashCode>,
    labels: Vec<LabelSet>,
    ids: Vec<u64>,
}

/// Ranked `(id, distance)` list; distances non-decreasing, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalResult {
    pub entries: Vec<(u64, u32)>,
}

/// Hamming distance on packed form: popcount of bitwise XOR.
///
/// Equals `(k - <a,b>)/2` in the +/-1 convention.
pub fn hamming_distance(a: &HashCode, b: &HashCode) -> Result<u32, RetrievalError> {
    if a.k() != b.k() {
        return Err(RetrievalError::LengthMismatch(a.k(), b.k()));
    }
    Ok(hamming_packed(a.words(), b.words()))
}

#[inline]
fn hamming_packed(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

impl RetrievalDatabase {
    pub fn new(
        k: usize,
        codes: Vec<HashCode>,
        labels: Vec<LabelSet>,
        ids: Vec<u64>,
    ) -> Result<Self, RetrievalError> {
        if codes.len() != labels.len() || codes.len() != ids.len() {
            return Err(RetrievalError::RaggedDatabase);
        }
        for c in &codes {
            if c.k() != k {
                return Err(RetrievalError::LengthMismatch(k, c.k()));
            }
        }
        Ok(RetrievalDatabase {
            k,
            codes,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn codes(&self) -> &[HashCode] {
        &self.codes
    }

    pub fn labels(&self) -> &[LabelSet] {
        &self.labels
    }

    /// Labels of the entry with the given sample id, if present.
    pub fn labels_for_id(&self, id: u64) -> Option<&LabelSet> {
        self.ids
            .iter()
            .position(|&x| x == id)
            .map(|pos| &self.labels[pos])
    }

    /// Exact top-k by Hamming distance; equals the prefix of a full sort by
    /// `(distance, id)`. An empty database yields an empty result.
    pub fn search(&self, query: &HashCode, top_k: usize) -> Result<RetrievalResult, RetrievalError> {
        if query.k() != self.k {
            return Err(RetrievalError::LengthMismatch(query.k(), self.k));
        }
        let keep = top_k.min(self.len());
        let mut heap: BinaryHeap<(u32, u64)> = BinaryHeap::with_capacity(keep + 1);
        for (code, &id) in self.codes.iter().zip(&self.ids) {
            let d = hamming_packed(query.words(), code.words());
            if heap.len() < keep {
                heap.push((d, id));
            } else if let Some(&worst) = heap.peek() {
                if (d, id) < worst {
                    heap.pop();
                    heap.push((d, id));
                }
            }
        }
        let mut entries: Vec<(u64, u32)> = heap.into_iter().map(|(d, id)| (id, d)).collect();
        entries.sort_unstable_by_key(|&(id, d)| (d, id));
        Ok(RetrievalResult { entries })
    }
}

// Little-endian write helpers; the file layout is bit-exact:
// "HHDB" | u32 version | u32 k | u64 n | n x ([u64 id][ceil(k/64) u64 words][u32 m][m x u32 label])

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<(), RetrievalError> {
        let at = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(RetrievalError::Malformed {
                    offset: at,
                    what: format!("unexpected end of file while reading {what}"),
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, RetrievalError> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64, RetrievalError> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Serializes a database to the HHDB format.
pub fn save_db(db: &RetrievalDatabase, path: &Path) -> Result<(), RetrievalError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_db(db, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_db<W: Write>(db: &RetrievalDatabase, w: &mut W) -> Result<(), RetrievalError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(db.k as u32).to_le_bytes())?;
    w.write_all(&(db.len() as u64).to_le_bytes())?;
    for i in 0..db.len() {
        w.write_all(&db.ids[i].to_le_bytes())?;
        for word in db.codes[i].words() {
            w.write_all(&word.to_le_bytes())?;
        }
        let labels: Vec<u32> = db.labels[i].iter().collect();
        w.write_all(&(labels.len() as u32).to_le_bytes())?;
        for l in labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a database back; `load_db(save_db(db))` is bit-identical to `db`.
pub fn load_db(path: &Path) -> Result<RetrievalDatabase, RetrievalError> {
    read_db(&mut BufReader::new(File::open(path)?))
}

pub fn read_db<R: Read>(r: &mut R) -> Result<RetrievalDatabase, RetrievalError> {
    let mut r = CountingReader::new(r);
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(RetrievalError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(RetrievalError::BadVersion(version));
    }
    let k = r.u32("code length")? as usize;
    if k == 0 || k > crate::types::MAX_CODE_LENGTH {
        return Err(RetrievalError::Malformed {
            offset: 8,
            what: format!("code length {k} out of range"),
        });
    }
    let n = r.u64("entry count")? as usize;
    let words_per_code = k.div_ceil(64);
    let mut codes = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for rec in 0..n {
        ids.push(r.u64("record id")?);
        let mut words = Vec::with_capacity(words_per_code);
        for _ in 0..words_per_code {
            words.push(r.u64("code word")?);
        }
        codes.push(HashCode::from_words(k, words)?);
        let m = r.u32("label count")? as usize;
        let mut ls = Vec::with_capacity(m);
        for _ in 0..m {
            ls.push(r.u32("label id")?);
        }
        labels.push(LabelSet::new(ls).map_err(|_| RetrievalError::Malformed {
            offset: r.offset,
            what: format!("record {rec} has an empty or invalid label set"),
        })?);
    }
    // trailing garbage is malformed too
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(RetrievalError::Malformed {
            offset: r.offset,
            what: "trailing bytes after final record".into(),
        });
    }
    RetrievalDatabase::new(k, codes, labels, ids)
}

/// Keeps the lowest `keep` items of an iterator of `(distance, id)` pairs in
/// `(distance, id)` order without a full sort; internal helper kept public
/// for the CLI streaming path.
pub fn top_k_merge(items: impl Iterator<Item = (u32, u64)>, keep: usize) -> Vec<(u64, u32)> {
    let mut heap: BinaryHeap<Reverse<(u32, u64)>> = items.map(Reverse).collect();
    let mut out = Vec::with_capacity(keep.min(heap.len()));
    while out.len() < keep {
        match heap.pop() {
            Some(Reverse((d, id))) => out.push((id, d)),
            None => break,
        }
    }
    out
}
