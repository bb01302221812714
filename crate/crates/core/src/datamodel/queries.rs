//! Per-frame segmenter queries and the binary query-dump format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DVPSQ1\0"            7 bytes magic
//! T, N, D, Dm, K        u32 each
//! per frame t in 0..T:
//!     embeddings        N*D      f32
//!     class_logits      N*(K+1)  f32
//!     mask_embeddings   N*Dm     f32
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const QUERY_DUMP_MAGIC: &[u8; 7] = b"DVPSQ1\0";

/// Upper bound on any single extent in a dump; larger values are treated
/// as corruption rather than allocated.
const MAX_EXTENT: u64 = 1 << 24;

/// Unordered object queries emitted by the segmenter for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameQueries {
    /// `[N, D]`
    pub embeddings: Tensor,
    /// `[N, K+1]`; the last column is "no object".
    pub class_logits: Tensor,
    /// `[N, Dm]`
    pub mask_embeddings: Tensor,
}

impl FrameQueries {
    pub fn new(embeddings: Tensor, class_logits: Tensor, mask_embeddings: Tensor) -> Result<Self> {
        let (n, _) = embeddings.dims2()?;
        let (nc, kp1) = class_logits.dims2()?;
        let (nm, _) = mask_embeddings.dims2()?;
        if n == 0 {
            return Err(Error::Invalid("frame has no queries".into()));
        }
        if nc != n || nm != n {
            return Err(Error::shape(
                "FrameQueries",
                format!("query counts differ: {n}, {nc}, {nm}"),
            ));
        }
        if kp1 < 2 {
            return Err(Error::Invalid(
                "class logits need at least one class plus no-object".into(),
            ));
        }
        Ok(Self {
            embeddings,
            class_logits,
            mask_embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn mask_dim(&self) -> usize {
        self.mask_embeddings.shape()[1]
    }

    /// Number of real classes `K` (excluding "no object").
    pub fn num_classes(&self) -> usize {
        self.class_logits.shape()[1] - 1
    }

    /// Queries reordered so that row `i` of the result is row `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> FrameQueries {
        FrameQueries {
            embeddings: self.embeddings.select_rows(order),
            class_logits: self.class_logits.select_rows(order),
            mask_embeddings: self.mask_embeddings.select_rows(order),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if n > avail {
            return Err(Error::Truncated {
                offset: self.bytes.len(),
                needed: n - avail,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

/// Serializes a video's query sequence. Values are narrowed to `f32`.
pub fn encode_query_dump(frames: &[FrameQueries]) -> Result<Vec<u8>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Invalid("query dump needs at least one frame".into()))?;
    let (n, d, dm, k) = (
        first.len(),
        first.dim(),
        first.mask_dim(),
        first.num_classes(),
    );
    for (t, f) in frames.iter().enumerate() {
        if (f.len(), f.dim(), f.mask_dim(), f.num_classes()) != (n, d, dm, k) {
            return Err(Error::shape(
                "encode_query_dump",
                format!("frame {t} extents differ from frame 0"),
            ));
        }
    }
    let to_u32 =
        |v: usize| u32::try_from(v).map_err(|_| Error::ExtentOverflow(format!("{v} exceeds u32")));
    let mut out = Vec::with_capacity(7 + 20 + frames.len() * n * (d + k + 1 + dm) * 4);
    out.extend_from_slice(QUERY_DUMP_MAGIC);
    for v in [frames.len(), n, d, dm, k] {
        out.extend_from_slice(&to_u32(v)?.to_le_bytes());
    }
    for f in frames {
        for t in [&f.embeddings, &f.class_logits, &f.mask_embeddings] {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_query_dump(bytes: &[u8]) -> Result<Vec<FrameQueries>> {
    if bytes.len() < QUERY_DUMP_MAGIC.len() || &bytes[..7] != QUERY_DUMP_MAGIC {
        return Err(Error::UnrecognizedFormat(
            "missing DVPSQ1 magic in query dump".into(),
        ));
    }
    let mut r = Reader { bytes, pos: 7 };
    let mut ext = [0u64; 5];
    for e in ext.iter_mut() {
        *e = u64::from(r.u32()?);
    }
    let [t, n, d, dm, k] = ext;
    if ext.iter().any(|&e| e > MAX_EXTENT) {
        return Err(Error::ExtentOverflow(format!(
            "extents {ext:?} exceed {MAX_EXTENT}"
        )));
    }
    if t == 0 || n == 0 || d == 0 || dm == 0 || k == 0 {
        return Err(Error::Invalid(format!(
            "degenerate query dump extents {ext:?}"
        )));
    }
    let per_frame = n
        .checked_mul(d + k + 1 + dm)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::ExtentOverflow("frame size overflows".into()))?;
    let total = per_frame
        .checked_mul(t)
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| Error::ExtentOverflow("payload size overflows".into()))?;
    if total > bytes.len() - r.pos {
        return Err(Error::Truncated {
            offset: bytes.len(),
            needed: total - (bytes.len() - r.pos),
        });
    }
    let (n, d, dm, k) = (n as usize, d as usize, dm as usize, k as usize);
    let mut frames = Vec::with_capacity(t as usize);
    for _ in 0..t {
        let e = Tensor::new([n, d], r.f32s(n * d)?)?;
        let c = Tensor::new([n, k + 1], r.f32s(n * (k + 1))?)?;
        let m = Tensor::new([n, dm], r.f32s(n * dm)?)?;
        frames.push(FrameQueries::new(e, c, m)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after query payload at offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok(frames)
}

pub fn save_query_dump(path: &Path, frames: &[FrameQueries]) -> Result<()> {
    let bytes = encode_query_dump(frames)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_query_dump(path: &Path) -> Result<Vec<FrameQueries>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_query_dump(&bytes)
}
