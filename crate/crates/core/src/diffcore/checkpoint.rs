//! Little-endian record encoding for parameter stores and RNG state.
//!
//! Floats are written as raw IEEE-754 bits, so a decode/encode round trip
//! reproduces the original bytes exactly.

use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Default)]
pub struct RecordWriter {
    buf: Vec<u8>,
}

impl RecordWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u64(t.rows() as u64);
        self.u64(t.cols() as u64);
        for &v in t.data() {
            self.f64(v);
        }
    }

    pub fn store(&mut self, store: &ParamStore) {
        self.u64(store.len() as u64);
        self.u64(store.step);
        for i in 0..store.len() {
            self.str(&store.names[i]);
            self.tensor(&store.values[i]);
            self.tensor(&store.m[i]);
            self.tensor(&store.v[i]);
        }
    }

    pub fn rng(&mut self, rng: &ChaCha8Rng) {
        self.bytes(&rng.get_seed());
        self.u64(rng.get_stream());
        self.u128(rng.get_word_pos());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct RecordReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RecordReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated record at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn u128(&mut self) -> Result<u128> {
        let b = self.bytes(16)?;
        Ok(u128::from_le_bytes(b.try_into().expect("16 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let b = self.bytes(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Checkpoint("tensor size exceeds record".into()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Tensor::new(rows, cols, data)
    }

    pub fn store(&mut self) -> Result<ParamStore> {
        let n = self.u64()? as usize;
        let step = self.u64()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = self.str()?;
            let value = self.tensor()?;
            let m = self.tensor()?;
            let v = self.tensor()?;
            if m.shape() != value.shape() || v.shape() != value.shape() {
                return Err(Error::Checkpoint(format!("moment shape mismatch for `{name}`")));
            }
            let id = store.add(name, value);
            store.m[id.0] = m;
            store.v[id.0] = v;
        }
        store.step = step;
        Ok(store)
    }

    pub fn rng(&mut self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let seed: [u8; 32] = self.bytes(32)?.try_into().expect("32 bytes");
        let stream = self.u64()?;
        let pos = self.u128()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}
