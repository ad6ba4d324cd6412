//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ABDN" | version u32 | kind u8 | meta: u64 length + UTF-8 JSON
//! params: u32 count, then per tensor
//!     u32 name length | name | dtype u8 (0 = f32) | u32 rank | u64 dims… | f32 payload
//! buffers: same table
//! optimizer: u8 flag [u64 step | u32 count | m tensors | v tensors]
//! rng: u8 flag [32-byte seed | u64 stream | u128 word position]
//! ```
//!
//! Encoding is a pure function of the in-memory value, so save → load → save
//! reproduces the same bytes.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ABDN";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Decomposer,
    Classifier,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::Decomposer => 1,
            ModelKind::Classifier => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(ModelKind::Decomposer),
            2 => Ok(ModelKind::Classifier),
            _ => Err(Error::Checkpoint(format!("unknown model kind {code}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn capture(adam: &Adam<f32>) -> Self {
        OptimizerState { step: adam.step, m: adam.m.clone(), v: adam.v.clone() }
    }

    pub fn restore(&self, cfg: AdamConfig, store: &ParamStore<f32>) -> Result<Adam<f32>> {
        let shapes_match = self.m.len() == store.params().len()
            && self.v.len() == store.params().len()
            && store
                .params()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.value.shape() == m.shape() && p.value.shape() == v.shape());
        if !shapes_match {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        Ok(Adam { cfg, step: self.step, m: self.m.clone(), v: self.v.clone() })
    }
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// JSON configuration snapshot, kept verbatim.
    pub meta: String,
    pub params: Vec<(String, Tensor<f32>)>,
    /// Batch-norm running statistics.
    pub buffers: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn from_store(kind: ModelKind, meta: String, store: &ParamStore<f32>) -> Self {
        Checkpoint {
            kind,
            meta,
            params: store.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            buffers: store.buffers().iter().map(|b| (b.name.clone(), b.value.clone())).collect(),
            optimizer: None,
            rng: None,
        }
    }

    /// Copy every parameter and buffer into `store`; names and shapes must
    /// match one to one, and `store` is untouched on error.
    pub fn apply_to(&self, store: &mut ParamStore<f32>) -> Result<()> {
        store.load_named(&self.params, &self.buffers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(&CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.push(self.kind.code());
        w.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        w.extend_from_slice(self.meta.as_bytes());
        write_table(&mut w, &self.params);
        write_table(&mut w, &self.buffers);
        match &self.optimizer {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                w.extend_from_slice(&o.step.to_le_bytes());
                w.extend_from_slice(&(o.m.len() as u32).to_le_bytes());
                for t in o.m.iter().chain(&o.v) {
                    write_tensor(&mut w, t);
                }
            }
        }
        match &self.rng {
            None => w.push(0),
            Some(r) => {
                w.push(1);
                w.extend_from_slice(&r.seed);
                w.extend_from_slice(&r.stream.to_le_bytes());
                w.extend_from_slice(&r.word_pos.to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let kind = ModelKind::from_code(r.u8()?)?;
        let meta_len = r.len_u64()?;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("configuration is not UTF-8".into()))?;
        let params = read_table(&mut r)?;
        let buffers = read_table(&mut r)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let n = r.u32()? as usize;
                let mut ts = (0..2 * n).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
                let v = ts.split_off(n);
                Some(OptimizerState { step, m: ts, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        let rng = match r.u8()? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            f => return Err(Error::Checkpoint(format!("bad rng flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { kind, meta, params, buffers, optimizer, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 (hex) over the parameter and buffer tables only, so it
    /// identifies the weights regardless of optimizer state or metadata.
    pub fn weights_hash(&self) -> String {
        let mut w = Vec::new();
        write_table(&mut w, &self.params);
        write_table(&mut w, &self.buffers);
        Sha256::digest(&w).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn write_tensor(w: &mut Vec<u8>, t: &Tensor<f32>) {
    w.push(DTYPE_F32);
    w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        w.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_table(w: &mut Vec<u8>, table: &[(String, Tensor<f32>)]) {
    w.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, t) in table {
        w.extend_from_slice(&(name.len() as u32).to_le_bytes());
        w.extend_from_slice(name.as_bytes());
        write_tensor(w, t);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length that must fit in the remaining input.
    fn len_u64(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len() - self.pos)
            .ok_or_else(|| Error::Checkpoint(format!("length {n} exceeds the file")))
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor<f32>> {
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Checkpoint(format!("unsupported dtype {dtype}")));
    }
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Checkpoint(format!("tensor shape {shape:?} overflows")))?;
    let data = r
        .take(numel)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

fn read_table(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor<f32>)>> {
    let n = r.u32()? as usize;
    (0..n)
        .map(|_| {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            Ok((name, read_tensor(r)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.set_stream(3);
        rng.next_u64();
        Checkpoint {
            kind: ModelKind::Classifier,
            meta: "{\"a\":1}".into(),
            params: vec![
                ("w".into(), Tensor::new([2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap()),
                ("b".into(), Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap()),
            ],
            buffers: vec![("bn.mean".into(), Tensor::new([1], vec![7.0]).unwrap())],
            optimizer: Some(OptimizerState {
                step: 9,
                m: vec![Tensor::zeros([2, 3]), Tensor::zeros([3])],
                v: vec![Tensor::new([2, 3], vec![1.0; 6]).unwrap(), Tensor::zeros([3])],
            }),
            rng: Some(RngState::capture(&rng)),
        }
    }

    #[test]
    fn byte_exact_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.weights_hash(), c.weights_hash());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        rng.set_stream(7);
        for _ in 0..5 {
            rng.next_u32();
        }
        let mut resumed = RngState::capture(&rng).restore();
        assert_eq!(resumed.next_u64(), rng.next_u64());
    }

    #[test]
    fn corrupt_inputs_fail_cleanly() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut old = bytes.clone();
        old[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&old), Err(Error::CheckpointVersion { found: 2, expected: 1 })));
        for cut in [3, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn hash_tracks_weights_only() {
        let a = sample();
        let mut b = a.clone();
        b.meta = "{}".into();
        b.optimizer = None;
        assert_eq!(a.weights_hash(), b.weights_hash());
        b.params[1].1.data_mut()[0] = 0.5;
        assert_ne!(a.weights_hash(), b.weights_hash());
    }
}
