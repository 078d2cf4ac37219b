//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset size  field
//! 0      8     magic "DFPOCKPT"
//! 8      4     version (u32, currently 1)
//! 12     4     vocab.size (u32)
//! 16     4     vocab.mask_id (u32)
//! 20     4     vocab.eos_id (u32)
//! 24     4     vocab.pad_id (u32)
//! 28     4     max_len (u32)
//! 32     4     embed_dim (u32)
//! 36     4     num_layers (u32)
//! 40     4     num_heads (u32)
//! 44     4     ffn_dim (u32)
//! 48     8     seed (u64)
//! 56     8     param_count N (u64)
//! 64     4     has_optimizer (u32, 0 or 1)
//! 68     4N    parameters (f32)
//! if has_optimizer:
//!        8     adam step (u64)
//!        4N    first moments (f32)
//!        4N    second moments (f32)
//! ```
//!
//! Parameters are held in `f64` in memory and rounded to `f32` on save.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mdm::Vocab;

use super::{AdamState, DenoiserConfig, DenoiserParams, Layout};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFPOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 68;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub optimizer: Option<AdamState>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn write_checkpoint(params: &DenoiserParams, optimizer: Option<&AdamState>) -> Vec<u8> {
    let c = &params.config;
    let n = params.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n * 3 + 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    for v in [
        c.vocab.size as u32,
        c.vocab.mask_id,
        c.vocab.eos_id,
        c.vocab.pad_id,
        c.max_len as u32,
        c.embed_dim as u32,
        c.num_layers as u32,
        c.num_heads as u32,
        c.ffn_dim as u32,
    ] {
        put_u32(&mut buf, v);
    }
    buf.extend_from_slice(&c.seed.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    put_u32(&mut buf, optimizer.is_some() as u32);
    put_f32s(&mut buf, &params.data);
    if let Some(st) = optimizer {
        buf.extend_from_slice(&st.step.to_le_bytes());
        put_f32s(&mut buf, &st.m);
        put_f32s(&mut buf, &st.v);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: need {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let size = r.u32()? as usize;
    let mask_id = r.u32()?;
    let eos_id = r.u32()?;
    let pad_id = r.u32()?;
    let vocab = Vocab::new(size, eos_id, pad_id).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if vocab.mask_id != mask_id {
        return Err(Error::Checkpoint(format!("mask id {mask_id} != vocab size {size}")));
    }
    let config = DenoiserConfig {
        vocab,
        max_len: r.u32()? as usize,
        embed_dim: r.u32()? as usize,
        num_layers: r.u32()? as usize,
        num_heads: r.u32()? as usize,
        ffn_dim: r.u32()? as usize,
        seed: r.u64()?,
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let layout = Layout::new(&config);
    let n = r.u64()? as usize;
    if n != layout.total {
        return Err(Error::Checkpoint(format!("param count {n} does not match config layout {}", layout.total)));
    }
    let has_opt = r.u32()?;
    if has_opt > 1 {
        return Err(Error::Checkpoint(format!("bad optimizer flag {has_opt}")));
    }
    let data = r.f32s(n)?;
    let optimizer = if has_opt == 1 {
        let step = r.u64()?;
        let m = r.f32s(n)?;
        let v = r.f32s(n)?;
        Some(AdamState { step, m, v })
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = DenoiserParams { config, layout, data };
    params.check_finite().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Checkpoint { params, optimizer })
}

pub fn save_checkpoint(path: &Path, params: &DenoiserParams, optimizer: Option<&AdamState>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, write_checkpoint(params, optimizer))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::init_params;

    fn params() -> DenoiserParams {
        let vocab = Vocab::new(6, 4, 5).unwrap();
        let cfg = DenoiserConfig { embed_dim: 8, num_layers: 1, num_heads: 2, ffn_dim: 8, ..DenoiserConfig::new(vocab, 5, 9) };
        init_params(&cfg).unwrap()
    }

    #[test]
    fn header_layout_and_round_trip() {
        let p = params();
        let bytes = write_checkpoint(&p, None);
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), HEADER_LEN + 4 * p.len());
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back.params.config, p.config);
        for (a, b) in back.params.data.iter().zip(&p.data) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // f32-exact params survive a second round trip bit-for-bit
        assert_eq!(write_checkpoint(&back.params, None), bytes);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let p = params();
        let mut st = AdamState::new(p.len());
        st.step = 12;
        st.m[3] = 0.25;
        let bytes = write_checkpoint(&p, Some(&st));
        let back = read_checkpoint(&bytes).unwrap();
        let opt = back.optimizer.unwrap();
        assert_eq!(opt.step, 12);
        assert_eq!(opt.m[3], 0.25);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let p = params();
        let bytes = write_checkpoint(&p, None);
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(read_checkpoint(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(read_checkpoint(&long).is_err());
    }
}
