use std::io::{Read, Write};
use std::ops::Range;

use ndarray::{s, Array2};

use super::TokenId;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CKV1";
const VERSION: u32 = 1;

/// Keys and values of one layer. Keys never carry rotary position
/// information.
#[derive(Debug, Clone, PartialEq)]
pub struct KvLayer {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

impl KvLayer {
    pub fn new(keys: Array2<f64>, values: Array2<f64>) -> Result<Self> {
        if keys.dim() != values.dim() {
            return Err(Error::Shape(format!(
                "keys {:?} and values {:?} differ",
                keys.dim(),
                values.dim()
            )));
        }
        Ok(Self { keys, values })
    }

    pub fn n_rows(&self) -> usize {
        self.keys.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.keys.ncols()
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> KvLayer {
        KvLayer {
            keys: self.keys.slice(s![rows.clone(), ..]).to_owned(),
            values: self.values.slice(s![rows, ..]).to_owned(),
        }
    }
}

/// A stored chunk cache: the chunk's raw tokens plus position-free keys and
/// values for every layer. Rows beyond `tokens.len()` are block padding and
/// are masked out whenever the cache is injected.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkCache {
    tokens: Vec<TokenId>,
    layers: Vec<KvLayer>,
    pad: usize,
}

impl ChunkCache {
    pub fn new(tokens: Vec<TokenId>, layers: Vec<KvLayer>, pad: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Argument("chunk cache with no tokens".into()));
        }
        let rows = tokens.len() + pad;
        if let Some(bad) = layers.iter().find(|l| l.n_rows() != rows) {
            return Err(Error::Shape(format!(
                "layer has {} rows, chunk needs {rows}",
                bad.n_rows()
            )));
        }
        Ok(Self {
            tokens,
            layers,
            pad,
        })
    }

    /// Cuts the rows of one chunk out of a whole-prompt KV cache.
    pub fn from_prompt_kv(kv: &[KvLayer], tokens: &[TokenId], span: Range<usize>) -> Result<Self> {
        if span.len() != tokens.len() {
            return Err(Error::Shape(format!(
                "span of {} rows for {} tokens",
                span.len(),
                tokens.len()
            )));
        }
        if kv.iter().any(|l| l.n_rows() < span.end) {
            return Err(Error::Shape("span runs past the prompt cache".into()));
        }
        let layers = kv.iter().map(|l| l.slice_rows(span.clone())).collect();
        Self::new(tokens.to_vec(), layers, 0)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn layers(&self) -> &[KvLayer] {
        &self.layers
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn padded_rows(&self) -> usize {
        self.tokens.len() + self.pad
    }

    /// Size of one layer's keys and values in the f32 container.
    pub fn bytes_per_layer(&self) -> usize {
        let d = self.layers.first().map_or(0, KvLayer::d_model);
        2 * self.padded_rows() * d * std::mem::size_of::<f32>()
    }

    pub fn size_bytes(&self) -> usize {
        self.bytes_per_layer() * self.layers.len()
    }

    pub(crate) fn into_parts(self) -> (Vec<TokenId>, Vec<KvLayer>, usize) {
        (self.tokens, self.layers, self.pad)
    }
}

/// Writes layers as a flat little-endian f32 container:
/// `"CKV1" | version | layers | tokens | d_model` (u32 each), then for each
/// layer the row-major keys followed by the row-major values.
pub fn write_kv<W: Write>(mut w: W, layers: &[KvLayer]) -> Result<()> {
    let (tokens, d) = layers.first().map_or((0, 0), |l| (l.n_rows(), l.d_model()));
    if layers.iter().any(|l| l.keys.dim() != (tokens, d)) {
        return Err(Error::Shape("layers disagree on shape".into()));
    }
    let mut buf = Vec::with_capacity(20 + layers.len() * tokens * d * 8);
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, layers.len() as u32, tokens as u32, d as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for l in layers {
        for m in [&l.keys, &l.values] {
            for &x in m.iter() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    w.write_all(&buf)
        .map_err(|e| Error::io("<kv container>", e))
}

pub fn read_kv<R: Read>(mut r: R) -> Result<Vec<KvLayer>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::io("<kv container>", e))?;
    if buf.len() < 20 || &buf[..4] != MAGIC {
        return Err(Error::Format("not a KV container".into()));
    }
    let word =
        |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (version, n_layers, tokens, d) = (word(0), word(1), word(2), word(3));
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let per = tokens * d;
    let expected = 20 + n_layers * 2 * per * 4;
    if buf.len() != expected {
        return Err(Error::Format(format!(
            "container has {} bytes, header implies {expected}",
            buf.len()
        )));
    }
    let floats: Vec<f64> = buf[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let base = l * 2 * per;
        let keys = Array2::from_shape_vec((tokens, d), floats[base..base + per].to_vec())
            .map_err(|e| Error::Format(e.to_string()))?;
        let values =
            Array2::from_shape_vec((tokens, d), floats[base + per..base + 2 * per].to_vec())
                .map_err(|e| Error::Format(e.to_string()))?;
        layers.push(KvLayer { keys, values });
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layer(rows: usize, d: usize, salt: f64) -> KvLayer {
        KvLayer {
            keys: Array2::from_shape_fn((rows, d), |(i, j)| salt + i as f64 * 0.5 - j as f64),
            values: Array2::from_shape_fn((rows, d), |(i, j)| salt * (i + j) as f64),
        }
    }

    #[test]
    fn chunk_rows_must_match() {
        assert!(ChunkCache::new(vec![1, 2, 3], vec![layer(2, 4, 0.0)], 0).is_err());
        assert!(ChunkCache::new(vec![1, 2, 3], vec![layer(4, 4, 0.0)], 1).is_ok());
        assert!(ChunkCache::new(vec![], vec![], 0).is_err());
    }

    #[test]
    fn header_shape() {
        let mut buf = Vec::new();
        write_kv(&mut buf, &[layer(3, 2, 1.0), layer(3, 2, 2.0)]).unwrap();
        assert_eq!(&buf[..4], b"CKV1");
        assert_eq!(buf.len(), 20 + 2 * 2 * 3 * 2 * 4);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
    }

    #[test]
    fn truncated_container_rejected() {
        let mut buf = Vec::new();
        write_kv(&mut buf, &[layer(3, 2, 1.0)]).unwrap();
        buf.pop();
        assert!(matches!(read_kv(&buf[..]), Err(Error::Format(_))));
        assert!(matches!(read_kv(&b"nope"[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn container_round_trip(layers in 1usize..4, rows in 0usize..6, d in 1usize..5, salt in -3.0f64..3.0) {
            let ls: Vec<_> = (0..layers).map(|i| layer(rows, d, salt + i as f64)).collect();
            let mut buf = Vec::new();
            write_kv(&mut buf, &ls).unwrap();
            let back = read_kv(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), layers);
            for (a, b) in ls.iter().zip(&back) {
                for (x, y) in a.keys.iter().zip(b.keys.iter()).chain(a.values.iter().zip(b.values.iter())) {
                    prop_assert_eq!(*x as f32 as f64, *y);
                }
            }
        }
    }
}
