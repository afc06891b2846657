//! Latent geometry, code containers, packed serialization and bit accounting.
//!
//! Codes are stored position-major: the `M` symbols of latent vector `l` are
//! contiguous. Packing writes each symbol in `⌈log2 K⌉` bits, least
//! significant bit first, into a little-endian bit stream (stream bit `i`
//! lives in byte `i / 8` at bit `i % 8`). With `K = 256` every symbol is
//! exactly one byte.
//!
//! Code file layout (all integers little-endian):
//!
//! ```text
//! "DLC1" | M: u16 | K: u32 | count: u64 | count × (L: u32 | bitstream)
//! ```
//!
//! where each bitstream is `⌈M·L·⌈log2 K⌉ / 8⌉` bytes.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CODES_MAGIC: &[u8; 4] = b"DLC1";

/// Model-width default shared by encoder, decoder and classifier.
pub const DEFAULT_D_MODEL: usize = 64;

pub const M_GRID: [usize; 5] = [1, 2, 4, 8, 16];
pub const K_GRID: [usize; 5] = [128, 256, 512, 1024, 4096];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// One latent vector per token (`L = T`).
    Local,
    /// One latent vector per document (`L = 1`).
    Global,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Local => "local",
            Layout::Global => "global",
        })
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Layout::Local),
            "global" => Ok(Layout::Global),
            other => Err(Error::Config(format!("unknown layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentSpec {
    pub layout: Layout,
    pub m: usize,
    pub k: usize,
    pub d_model: usize,
}

impl LatentSpec {
    pub fn new(layout: Layout, m: usize, k: usize, d_model: usize) -> Result<Self> {
        let spec = Self {
            layout,
            m,
            k,
            d_model,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("M must be at least 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("K must be at least 2, got {}", self.k)));
        }
        if self.k > u32::MAX as usize {
            return Err(Error::Config(format!("K = {} does not fit a u32 symbol", self.k)));
        }
        if self.m > u16::MAX as usize {
            return Err(Error::Config(format!("M = {} does not fit the code header", self.m)));
        }
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        if self.layout == Layout::Local && self.d_model % self.m != 0 {
            return Err(Error::Config(format!(
                "local layout needs M to divide d_model (M = {}, d_model = {})",
                self.m, self.d_model
            )));
        }
        Ok(())
    }

    /// Whether `(M, K)` lies on the hyperparameter search grid.
    pub fn in_search_grid(&self) -> bool {
        M_GRID.contains(&self.m) && K_GRID.contains(&self.k)
    }

    /// Number of latent vectors for a document of `t` tokens.
    pub fn latent_len(&self, t: usize) -> usize {
        match self.layout {
            Layout::Local => t,
            Layout::Global => 1,
        }
    }

    /// Width of each code embedding row.
    pub fn sub_dim(&self) -> usize {
        match self.layout {
            Layout::Local => self.d_model / self.m,
            Layout::Global => self.d_model,
        }
    }

    /// Number of decoder source positions for a document of `t` tokens.
    pub fn source_len(&self, t: usize) -> usize {
        match self.layout {
            Layout::Local => t,
            Layout::Global => self.m,
        }
    }
}

/// `⌈log2 K⌉`.
pub fn bits_per_symbol(k: usize) -> usize {
    debug_assert!(k >= 2);
    (usize::BITS - (k - 1).leading_zeros()) as usize
}

/// Storage cost of one document's code: `M·L·⌈log2 K⌉`.
pub fn bits_per_sentence(spec: &LatentSpec, t: usize) -> usize {
    spec.m * spec.latent_len(t) * bits_per_symbol(spec.k)
}

/// Cost of storing `t` raw tokens over a vocabulary of `vocab_size` types.
pub fn raw_text_bits(t: usize, vocab_size: usize) -> usize {
    (t as f64 * (vocab_size as f64).log2()).ceil() as usize
}

/// Cost of a `d`-dimensional single-precision vector.
pub fn float_vector_bits(d: usize) -> usize {
    32 * d
}

/// A discrete code: an `L × M` grid of symbols in `[0, K)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeAssignment {
    m: usize,
    l: usize,
    k: usize,
    codes: Vec<u32>,
}

impl CodeAssignment {
    /// `codes` is position-major: `codes[l * m + j]` is symbol `j` of latent `l`.
    pub fn new(m: usize, k: usize, codes: Vec<u32>) -> Result<Self> {
        if m == 0 || codes.len() % m != 0 {
            return Err(Error::Shape(format!(
                "{} symbols do not form rows of M = {m}",
                codes.len()
            )));
        }
        if k < 2 {
            return Err(Error::Config(format!("K must be at least 2, got {k}")));
        }
        if let Some(bad) = codes.iter().find(|&&c| c as usize >= k) {
            return Err(Error::InvalidInput(format!("symbol {bad} out of range for K = {k}")));
        }
        Ok(Self {
            m,
            l: codes.len() / m,
            k,
            codes,
        })
    }

    pub fn from_rows(k: usize, rows: &[Vec<u32>]) -> Result<Self> {
        let m = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("ragged code rows".into()));
        }
        Self::new(m, k, rows.concat())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, m: usize, l: usize) -> u32 {
        self.codes[l * self.m + m]
    }

    pub fn symbols(&self) -> &[u32] {
        &self.codes
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.codes.chunks(self.m)
    }

    pub fn check_spec(&self, spec: &LatentSpec) -> Result<()> {
        if self.m != spec.m || self.k != spec.k {
            return Err(Error::Shape(format!(
                "code has (M, K) = ({}, {}), expected ({}, {})",
                self.m, self.k, spec.m, spec.k
            )));
        }
        if spec.layout == Layout::Global && self.l != 1 {
            return Err(Error::Shape(format!("global code with L = {}", self.l)));
        }
        Ok(())
    }
}

impl fmt::Display for CodeAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |r: &[u32]| {
            r.iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        };
        if self.l == 1 {
            write!(f, "[{}]", row(&self.codes))
        } else {
            let rows: Vec<String> = self.rows().map(|r| format!("[{}]", row(r))).collect();
            write!(f, "[{}]", rows.join(", "))
        }
    }
}

/// Symbol-wise Hamming distance: positions `(m, l)` whose symbols differ.
pub fn hamming(a: &CodeAssignment, b: &CodeAssignment) -> Result<usize> {
    if (a.m, a.l, a.k) != (b.m, b.l, b.k) {
        return Err(Error::Shape(format!(
            "hamming between (M, L, K) = ({}, {}, {}) and ({}, {}, {})",
            a.m, a.l, a.k, b.m, b.l, b.k
        )));
    }
    Ok(a.codes.iter().zip(&b.codes).filter(|(x, y)| x != y).count())
}

/// A bit-packed code with its `(M, L, K)` header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    pub m: usize,
    pub l: usize,
    pub k: usize,
    pub bits: Vec<u8>,
}

fn stream_len(m: usize, l: usize, k: usize) -> usize {
    (m * l * bits_per_symbol(k)).div_ceil(8)
}

pub fn pack(codes: &CodeAssignment) -> Result<PackedCodes> {
    if codes.l == 0 {
        return Err(Error::InvalidInput("cannot pack a code with L = 0".into()));
    }
    let width = bits_per_symbol(codes.k);
    let mut bits = vec![0u8; stream_len(codes.m, codes.l, codes.k)];
    let mut pos = 0usize;
    for &sym in &codes.codes {
        for b in 0..width {
            if (sym >> b) & 1 == 1 {
                bits[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(PackedCodes {
        m: codes.m,
        l: codes.l,
        k: codes.k,
        bits,
    })
}

pub fn unpack(packed: &PackedCodes) -> Result<CodeAssignment> {
    if packed.m == 0 || packed.l == 0 || packed.k < 2 {
        return Err(Error::Parse(format!(
            "bad header (M, L, K) = ({}, {}, {})",
            packed.m, packed.l, packed.k
        )));
    }
    let expected = stream_len(packed.m, packed.l, packed.k);
    if packed.bits.len() != expected {
        return Err(Error::Parse(format!(
            "bitstream has {} bytes, header implies {expected}",
            packed.bits.len()
        )));
    }
    let width = bits_per_symbol(packed.k);
    let mut codes = Vec::with_capacity(packed.m * packed.l);
    let mut pos = 0usize;
    for _ in 0..packed.m * packed.l {
        let mut sym = 0u32;
        for b in 0..width {
            if (packed.bits[pos / 8] >> (pos % 8)) & 1 == 1 {
                sym |= 1 << b;
            }
            pos += 1;
        }
        codes.push(sym);
    }
    CodeAssignment::new(packed.m, packed.k, codes).map_err(|e| Error::Parse(e.to_string()))
}

/// Writes a code file. All codes must share `(M, K)`.
pub fn write_codes<W: Write>(mut out: W, m: usize, k: usize, codes: &[CodeAssignment]) -> Result<()> {
    let io = |e| Error::io("<codes stream>", e);
    if m == 0 || m > u16::MAX as usize || k < 2 || k > u32::MAX as usize {
        return Err(Error::Config(format!("unrepresentable header (M, K) = ({m}, {k})")));
    }
    out.write_all(CODES_MAGIC).map_err(io)?;
    out.write_all(&(m as u16).to_le_bytes()).map_err(io)?;
    out.write_all(&(k as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&(codes.len() as u64).to_le_bytes()).map_err(io)?;
    for c in codes {
        if c.m != m || c.k != k {
            return Err(Error::Shape(format!(
                "code with (M, K) = ({}, {}) in a ({m}, {k}) file",
                c.m, c.k
            )));
        }
        let packed = pack(c)?;
        out.write_all(&(packed.l as u32).to_le_bytes()).map_err(io)?;
        out.write_all(&packed.bits).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Contents of a code file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodesFile {
    pub m: usize,
    pub k: usize,
    pub codes: Vec<CodeAssignment>,
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Parse(format!("truncated stream while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub fn parse_codes(bytes: &[u8]) -> Result<CodesFile> {
    let mut buf = bytes;
    if take(&mut buf, 4, "magic")? != CODES_MAGIC {
        return Err(Error::Parse("missing DLC1 magic".into()));
    }
    let m = u16::from_le_bytes(take(&mut buf, 2, "M")?.try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(take(&mut buf, 4, "K")?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(take(&mut buf, 8, "count")?.try_into().unwrap());
    if m == 0 || k < 2 {
        return Err(Error::Parse(format!("bad header (M, K) = ({m}, {k})")));
    }
    let mut codes = Vec::new();
    for i in 0..count {
        let l = u32::from_le_bytes(take(&mut buf, 4, "L")?.try_into().unwrap()) as usize;
        if l == 0 {
            return Err(Error::Parse(format!("record {i} has L = 0")));
        }
        let bits = take(&mut buf, stream_len(m, l, k), "bitstream")?.to_vec();
        codes.push(unpack(&PackedCodes { m, l, k, bits })?);
    }
    if !buf.is_empty() {
        return Err(Error::Parse(format!("{} trailing bytes after {count} records", buf.len())));
    }
    Ok(CodesFile { m, k, codes })
}

pub fn read_codes<R: Read>(mut input: R) -> Result<CodesFile> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<codes stream>", e))?;
    parse_codes(&bytes)
}

pub fn save_codes(path: &Path, m: usize, k: usize, codes: &[CodeAssignment]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_codes(std::io::BufWriter::new(file), m, k, codes)
}

pub fn load_codes(path: &Path) -> Result<CodesFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_codes(&bytes)
}

/// Per-record ids and labels stored next to a code file, one `id<TAB>label`
/// line per record (`-` for unlabeled).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sidecar {
    pub ids: Vec<String>,
    pub labels: Vec<Option<u32>>,
}

impl Sidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, label) in self.ids.iter().zip(&self.labels) {
            match label {
                Some(l) => out.push_str(&format!("{id}\t{l}\n")),
                None => out.push_str(&format!("{id}\t-\n")),
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut side = Sidecar::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (id, label) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Parse(format!("{}:{}: expected id<TAB>label", path.display(), i + 1)))?;
            let label = match label {
                "-" => None,
                l => Some(l.parse().map_err(|_| {
                    Error::Parse(format!("{}:{}: bad label {l:?}", path.display(), i + 1))
                })?),
            };
            side.ids.push(id.to_owned());
            side.labels.push(label);
        }
        Ok(side)
    }
}
