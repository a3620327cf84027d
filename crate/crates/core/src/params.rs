//! Named parameter matrices with a small binary checkpoint encoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    mats: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, m: Mat) -> usize {
        self.names.push(name.into());
        self.mats.push(m);
        self.mats.len() - 1
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, i: usize) -> &Mat {
        &self.mats[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.mats[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn mats(&self) -> &[Mat] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Mat] {
        &mut self.mats
    }

    pub fn num_scalars(&self) -> usize {
        self.mats.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.mats.iter().all(Mat::is_finite)
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.mats.len() as u32).to_le_bytes());
        for (name, m) in self.names.iter().zip(&self.mats) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    pub fn read_from(bytes: &[u8], pos: &mut usize) -> Result<Self> {
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let count = u32_at(take(4)?);
        let mut set = ParamSet::new();
        for _ in 0..count {
            let n = u32_at(take(4)?);
            let name = std::str::from_utf8(take(n)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_owned();
            let rows = u32_at(take(4)?);
            let cols = u32_at(take(4)?);
            let raw = take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            set.push(name, Mat::from_vec(rows, cols, data));
        }
        Ok(set)
    }
}

/// Independent generator for one named stream of a seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform in ±1/√fan_in.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Mat::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.push("a", uniform_init(&mut rng, 3, 2, 3));
        p.push("b.bias", uniform_init(&mut rng, 1, 4, 4));
        let mut bytes = Vec::new();
        p.write_to(&mut bytes);
        let mut pos = 0;
        assert_eq!(ParamSet::read_from(&bytes, &mut pos).unwrap(), p);
        assert_eq!(pos, bytes.len());
        let mut pos = 0;
        assert!(ParamSet::read_from(&bytes[..bytes.len() - 1], &mut pos).is_err());
    }

    #[test]
    fn init_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = uniform_init(&mut rng, 50, 50, 16);
        assert!(m.data.iter().all(|v| v.abs() <= 0.25));
    }
}
