//! Rayleigh-fading channel datasets.
//!
//! Channel entries are drawn from a documented stream so that another
//! implementation can reproduce a dataset bit for bit:
//!
//! * state: xoshiro256** seeded from the 64-bit seed through SplitMix64
//!   (`rand_xoshiro::Xoshiro256StarStar::seed_from_u64`);
//! * uniform: `(next_u64() >> 11) · 2⁻⁵³`, in `[0, 1)`;
//! * each complex entry consumes two uniforms `a, b` and applies Box–Muller
//!   with `u₁ = 1 − a`, `r = √(−2 ln u₁)`, `θ = 2π·b`, giving
//!   `(r cos θ, r sin θ) / √2`;
//! * entries are produced sample-major, then row-major within a `K×M` matrix.
//!
//! Because the stream is sequential, `generate(s, n)` is a prefix of
//! `generate(s, n')` for `n < n'`, so smaller training sets are prefixes of a
//! larger master draw with the same seed.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CMat, C64};

/// `K×M` channel; row `k` is `h_kᴴ`, so `(H·W)[k][j] = h_kᴴ w_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix(CMat);

impl ChannelMatrix {
    pub fn new(h: CMat) -> Result<Self> {
        if !h.is_finite() {
            return Err(Error::contract("channel has non-finite entries"));
        }
        Ok(ChannelMatrix(h))
    }

    pub fn users(&self) -> usize {
        self.0.rows()
    }

    pub fn antennas(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &CMat {
        &self.0
    }

    /// `[Re(H), Im(H)]`, each flattened row-major.
    pub fn features(&self) -> Vec<f64> {
        let h = self.0.as_slice();
        h.iter().map(|z| z.re).chain(h.iter().map(|z| z.im)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Master,
}

impl SplitTag {
    fn to_byte(self) -> u8 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Val => 1,
            SplitTag::Test => 2,
            SplitTag::Master => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => SplitTag::Train,
            1 => SplitTag::Val,
            2 => SplitTag::Test,
            3 => SplitTag::Master,
            other => return Err(Error::Format(format!("unknown split tag {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: Vec<ChannelMatrix>,
    pub seed: u64,
    pub split_tag: SplitTag,
    pub k_users: usize,
    pub m_antennas: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn with_tag(mut self, tag: SplitTag) -> Self {
        self.split_tag = tag;
        self
    }

    /// First `n` channels (the same draw a smaller `generate` call would produce).
    pub fn prefix(&self, n: usize) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::contract(format!(
                "prefix of {n} from a dataset of {}",
                self.len()
            )));
        }
        Ok(Dataset {
            channels: self.channels[..n].to_vec(),
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            channels: Vec::new(),
            seed: self.seed,
            split_tag: self.split_tag,
            k_users: self.k_users,
            m_antennas: self.m_antennas,
        }
    }
}

/// Documented Gaussian stream used for every channel draw.
pub struct GaussianStream {
    rng: Xoshiro256StarStar,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        GaussianStream {
            rng: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One circularly-symmetric `CN(0, 1)` sample.
    pub fn next_complex(&mut self) -> C64 {
        let a = self.next_uniform();
        let b = self.next_uniform();
        let r = (-2.0 * (1.0 - a).ln()).sqrt();
        let theta = TAU * b;
        C64::new(r * theta.cos(), r * theta.sin()) * FRAC_1_SQRT_2
    }
}

/// Draws `count` i.i.d. `CN(0, I)` channels of shape `k_users × m_antennas`.
pub fn generate(seed: u64, count: usize, k_users: usize, m_antennas: usize) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::contract("dataset count must be at least 1"));
    }
    if k_users == 0 || m_antennas == 0 {
        return Err(Error::contract("K and M must be positive"));
    }
    let mut stream = GaussianStream::new(seed);
    let channels = (0..count)
        .map(|_| {
            ChannelMatrix(CMat::from_fn(k_users, m_antennas, |_, _| {
                stream.next_complex()
            }))
        })
        .collect();
    Ok(Dataset {
        channels,
        seed,
        split_tag: SplitTag::Master,
        k_users,
        m_antennas,
    })
}

/// Splits a training draw into its first ⌊0.9·N⌋ samples (train) and the tail (validation).
pub fn split_train_val(d: &Dataset) -> Result<(Dataset, Dataset)> {
    if !matches!(d.split_tag, SplitTag::Train | SplitTag::Master) {
        return Err(Error::contract(format!(
            "cannot split a {:?} dataset",
            d.split_tag
        )));
    }
    let n = d.len();
    if n < 10 {
        return Err(Error::contract(format!(
            "dataset of {n} samples is too small to split (need at least 10)"
        )));
    }
    let n_train = n * 9 / 10;
    let mut train = d.clone_header();
    train.channels = d.channels[..n_train].to_vec();
    train.split_tag = SplitTag::Train;
    let mut val = d.clone_header();
    val.channels = d.channels[n_train..].to_vec();
    val.split_tag = SplitTag::Val;
    Ok((train, val))
}

const MAGIC: &[u8; 4] = b"UBF1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8 + 1;

pub fn write_dataset(d: &Dataset, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(d.k_users as u32).to_le_bytes())?;
    w.write_all(&(d.m_antennas as u32).to_le_bytes())?;
    w.write_all(&(d.len() as u64).to_le_bytes())?;
    w.write_all(&d.seed.to_le_bytes())?;
    w.write_all(&[d.split_tag.to_byte()])?;
    for h in &d.channels {
        if h.users() != d.k_users || h.antennas() != d.m_antennas {
            return Err(Error::contract("channel shape differs from dataset header"));
        }
        for z in h.matrix().as_slice() {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset(mut r: impl Read) -> Result<Dataset> {
    let mut header = [0u8; HEADER_LEN];
    let got = read_full(&mut r, &mut header)?;
    if got < 4 || &header[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a UBF1 dataset".into()));
    }
    if got < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found: got as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(header[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let k = u32_at(8) as usize;
    let m = u32_at(12) as usize;
    let count = u64_at(16);
    let seed = u64_at(24);
    let split_tag = SplitTag::from_byte(header[32])?;
    if k == 0 || m == 0 {
        return Err(Error::Format(format!("invalid dimensions {k}x{m}")));
    }

    let per_channel = (k * m * 16) as u64;
    let expected = count
        .checked_mul(per_channel)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len() as u64,
        });
    }
    if payload.len() as u64 > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - expected
        )));
    }
    let f64_at = |o: usize| f64::from_le_bytes(payload[o..o + 8].try_into().unwrap());
    let mut channels = Vec::with_capacity(count as usize);
    for s in 0..count as usize {
        let base = s * per_channel as usize;
        let data = (0..k * m)
            .map(|e| C64::new(f64_at(base + 16 * e), f64_at(base + 16 * e + 8)))
            .collect();
        let h = CMat::from_vec(k, m, data)?;
        channels.push(ChannelMatrix::new(h).map_err(|_| {
            Error::Format(format!("sample {s} has non-finite entries"))
        })?);
    }
    Ok(Dataset {
        channels,
        seed,
        split_tag,
        k_users: k,
        m_antennas: m,
    })
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

pub fn save(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(d, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(42, 20, 4, 8).unwrap();
        let b = generate(42, 20, 4, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(43, 20, 4, 8).unwrap());
        assert_eq!(a.channels[0].users(), 4);
        assert_eq!(a.channels[0].antennas(), 8);
    }

    #[test]
    fn smaller_draw_is_prefix() {
        let big = generate(7, 50, 4, 8).unwrap();
        let small = generate(7, 10, 4, 8).unwrap();
        assert_eq!(big.prefix(10).unwrap(), small);
    }

    #[test]
    fn moments_of_entries() {
        let d = generate(1234, 12_500, 1, 8).unwrap(); // 100 000 scalar draws
        let vals: Vec<C64> = d
            .channels
            .iter()
            .flat_map(|h| h.matrix().as_slice().to_vec())
            .collect();
        let n = vals.len() as f64;
        assert_eq!(vals.len(), 100_000);
        let power = vals.iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
        let mean_re = vals.iter().map(|z| z.re).sum::<f64>() / n;
        let mean_im = vals.iter().map(|z| z.im).sum::<f64>() / n;
        let var_re = vals.iter().map(|z| (z.re - mean_re).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((power - 1.0).abs() < 0.02, "power {power}");
        assert!(mean_re.abs() < 0.02 && mean_im.abs() < 0.02);
        assert!((0.45..=0.55).contains(&var_re), "var {var_re}");
    }

    #[test]
    fn split_sizes() {
        for (n, tr, va) in [(100, 90, 10), (1000, 900, 100), (10, 9, 1), (15, 13, 2)] {
            let d = generate(3, n, 2, 2).unwrap();
            let (t, v) = split_train_val(&d).unwrap();
            assert_eq!((t.len(), v.len()), (tr, va));
            assert_eq!(v.len(), (n as f64 * 0.1).ceil() as usize);
            assert_eq!(t.split_tag, SplitTag::Train);
            assert_eq!(v.split_tag, SplitTag::Val);
            let joined: Vec<_> = t.channels.iter().chain(&v.channels).cloned().collect();
            assert_eq!(joined, d.channels);
        }
    }

    #[test]
    fn split_rejects_small_or_wrong_tag() {
        let d = generate(3, 9, 2, 2).unwrap();
        assert!(matches!(split_train_val(&d), Err(Error::Contract(_))));
        let d = generate(3, 20, 2, 2).unwrap().with_tag(SplitTag::Test);
        assert!(matches!(split_train_val(&d), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_count_rejected() {
        assert!(matches!(generate(1, 0, 4, 8), Err(Error::Contract(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ubf");
        let d = generate(42, 17, 4, 8).unwrap().with_tag(SplitTag::Test);
        save(&d, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 17 * 4 * 8 * 16);
        assert_eq!(&bytes[..4], b"UBF1");
        let back = load(&path).unwrap();
        assert_eq!(back, d);
        for (a, b) in back.channels.iter().zip(&d.channels) {
            for (x, y) in a.matrix().as_slice().iter().zip(b.matrix().as_slice()) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset(&generate(9, 5, 4, 8).unwrap(), &mut a).unwrap();
        write_dataset(&generate(9, 5, 4, 8).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_bad_magic() {
        let mut buf = Vec::new();
        write_dataset(&generate(1, 2, 2, 2).unwrap(), &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_dataset(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn load_rejects_truncation() {
        let mut buf = Vec::new();
        write_dataset(&generate(1, 3, 2, 2).unwrap(), &mut buf).unwrap();
        let cut = &buf[..buf.len() - 5];
        assert!(matches!(read_dataset(cut), Err(Error::Truncated { .. })));
        assert!(matches!(read_dataset(&buf[..10]), Err(Error::Truncated { .. })));
    }
}
