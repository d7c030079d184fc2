use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    fit_norm_stats, generate_channel, observe, ComplexGrid, GridDims, NormStats, PilotPattern,
    TopologyConfig,
};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CHST";
pub const DATASET_VERSION: u32 = 1;

/// How the per-sample SNR is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SnrSpec {
    Fixed(f64),
    /// Uniform on `[min, max]` dB.
    Uniform { min: f64, max: f64 },
}

impl SnrSpec {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let v = match *self {
            SnrSpec::Fixed(v) => v,
            SnrSpec::Uniform { min, max } => min + (max - min) * rng.random::<f64>(),
        };
        // Stored as binary32 on disk; observe with exactly the recorded value.
        v as f32 as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSample {
    pub h: ComplexGrid,
    pub r: ComplexGrid,
    pub snr_db: f64,
    /// Seed of the per-sample stream that produced `h` and `r`; unknown for
    /// samples read back from disk.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ChannelSample>,
    pub topology: TopologyConfig,
    pub pilot: PilotPattern,
    pub norm: Option<NormStats>,
}

/// SplitMix64 finalizer of `root + index`; decorrelates per-sample streams.
pub fn sample_seed(root: u64, index: u64) -> u64 {
    let mut z = root.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `count` independent samples. Sample `i` uses its own stream
/// seeded by [`sample_seed`]`(root_seed, i)`, consumed as channel, then SNR,
/// then observation noise.
pub fn generate_dataset(
    topology: &TopologyConfig,
    pilot: &PilotPattern,
    count: usize,
    snr: SnrSpec,
    root_seed: u64,
) -> Result<Dataset> {
    topology.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset sample count must be positive".into()));
    }
    if let SnrSpec::Uniform { min, max } = snr {
        if !(min <= max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::Config(format!("invalid SNR range [{min}, {max}]")));
        }
    }
    let samples = (0..count)
        .map(|i| {
            let seed = sample_seed(root_seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = generate_channel(topology, &mut rng)?;
            let snr_db = snr.draw(&mut rng);
            let r = observe(&h, pilot, snr_db, &mut rng)?;
            Ok(ChannelSample {
                h,
                r,
                snr_db,
                seed: Some(seed),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        topology: topology.clone(),
        pilot: pilot.clone(),
        norm: None,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> GridDims {
        self.topology.grid_dims()
    }

    /// Fits and stores normalization statistics on this dataset's channels.
    pub fn fit_norm(&mut self) -> Result<NormStats> {
        let stats = fit_norm_stats(self.samples.iter().map(|s| &s.h))?;
        self.norm = Some(stats);
        Ok(stats)
    }

    pub fn norm(&self) -> Result<NormStats> {
        self.norm
            .ok_or_else(|| Error::Config("dataset has no fitted normalization statistics".into()))
    }

    /// Splits off the first `train` samples; the rest form the second part.
    /// Both parts inherit the current normalization statistics.
    pub fn split(mut self, train: usize) -> Result<(Dataset, Dataset)> {
        if train == 0 || train >= self.samples.len() {
            return Err(Error::Config(format!(
                "split point {train} must leave both parts non-empty (have {})",
                self.samples.len()
            )));
        }
        let rest = self.samples.split_off(train);
        let other = Dataset {
            samples: rest,
            topology: self.topology.clone(),
            pilot: self.pilot.clone(),
            norm: self.norm,
        };
        Ok((self, other))
    }

    /// Number of bytes [`save_dataset`] writes.
    pub fn encoded_len(&self) -> usize {
        let d = self.dims();
        let plane = d.symbols * d.subcarriers;
        24 + plane + 8 * plane + self.samples.len() * (4 + 16 * d.len())
    }
}

fn put_grid(out: &mut Vec<u8>, g: &ComplexGrid) {
    for c in g.data() {
        out.extend_from_slice(&c.re.to_le_bytes());
        out.extend_from_slice(&c.im.to_le_bytes());
    }
}

/// Writes the little-endian `CHST` container.
pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let d = dataset.dims();
    let mut out = Vec::with_capacity(dataset.encoded_len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [d.antennas, d.symbols, d.subcarriers, dataset.samples.len()] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(dataset.pilot.mask().iter().map(|&m| m as u8));
    for x in dataset.pilot.symbols() {
        out.extend_from_slice(&x.re.to_le_bytes());
        out.extend_from_slice(&x.im.to_le_bytes());
    }
    for s in &dataset.samples {
        if s.h.dims() != d || s.r.dims() != d {
            return Err(Error::shape("save_dataset", "sample grid does not match dataset dims"));
        }
        out.extend_from_slice(&(s.snr_db as f32).to_le_bytes());
        put_grid(&mut out, &s.h);
        put_grid(&mut out, &s.r);
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "dataset file truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn complex(&mut self) -> Result<Complex32> {
        Ok(Complex32::new(self.f32()?, self.f32()?))
    }

    fn grid(&mut self, dims: GridDims) -> Result<ComplexGrid> {
        let data = (0..dims.len()).map(|_| self.complex()).collect::<Result<Vec<_>>>()?;
        ComplexGrid::from_vec(dims, data)
    }
}

/// Reads a `CHST` container. Only the grid dimensions of the topology are
/// stored; the remaining topology fields take their defaults.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut buf = Vec::new();
    BufReader::new(std::fs::File::open(path)?).read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let magic = c.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "bad dataset magic {:?}, expected \"CHST\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}, expected {DATASET_VERSION}"
        )));
    }
    let (ant, sym, sc, count) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    if ant == 0 || sym == 0 || sc == 0 || count == 0 {
        return Err(Error::Format(format!(
            "dataset header has a zero dimension: {ant}x{sym}x{sc}, {count} samples"
        )));
    }
    let dims = GridDims::new(ant, sym, sc);
    let plane = sym * sc;
    let expected = 24 + 9 * plane + count * (4 + 16 * dims.len());
    if buf.len() < expected {
        return Err(Error::Format(format!(
            "dataset file truncated: {} bytes, header implies {expected}",
            buf.len()
        )));
    }
    if buf.len() > expected {
        return Err(Error::Format(format!(
            "dataset file has {} trailing bytes",
            buf.len() - expected
        )));
    }
    let mask = c
        .take(plane)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Format(format!("pilot mask byte {b} is not 0/1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let symbols = (0..plane).map(|_| c.complex()).collect::<Result<Vec<_>>>()?;
    let pilot = PilotPattern::from_parts(sc, sym, mask, symbols)?;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let snr_db = c.f32()? as f64;
        let h = c.grid(dims)?;
        let r = c.grid(dims)?;
        samples.push(ChannelSample {
            h,
            r,
            snr_db,
            seed: None,
        });
    }
    let topology = TopologyConfig {
        num_antennas: ant,
        num_symbols: sym,
        num_subcarriers: sc,
        ..TopologyConfig::default()
    };
    Ok(Dataset {
        samples,
        topology,
        pilot,
        norm: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airsim::{build_pilot_pattern, PilotConfig};

    fn small(count: usize, seed: u64) -> Dataset {
        let t = TopologyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = build_pilot_pattern(&PilotConfig::default(), 32, 8, &mut rng).unwrap();
        generate_dataset(&t, &p, count, SnrSpec::Uniform { min: -10.0, max: 20.0 }, seed).unwrap()
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(small(5, 3), small(5, 3));
        assert_ne!(small(5, 3).samples[0].h, small(5, 4).samples[0].h);
    }

    #[test]
    fn sample_seeds_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| sample_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ds = small(6, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.chst");
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.samples.len(), 6);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.h, b.h);
            assert_eq!(a.r, b.r);
            assert_eq!(a.snr_db, b.snr_db);
        }
        assert_eq!(back.pilot.mask(), ds.pilot.mask());
        assert_eq!(back.pilot.symbols(), ds.pilot.symbols());
    }

    #[test]
    fn corrupt_magic_names_expected() {
        let ds = small(1, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.chst");
        save_dataset(&path, &ds).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("CHST"), "{err}");
    }

    #[test]
    fn truncated_and_wrong_version_rejected() {
        let ds = small(2, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.chst");
        save_dataset(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_dataset(&path).unwrap_err().to_string().contains("truncated"));
        let mut v = bytes.clone();
        v[4] = 9;
        std::fs::write(&path, &v).unwrap();
        assert!(load_dataset(&path).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn split_keeps_order() {
        let ds = small(5, 2);
        let first = ds.samples[3].clone();
        let (a, b) = ds.split(3).unwrap();
        assert_eq!((a.len(), b.len()), (3, 2));
        assert_eq!(b.samples[0], first);
    }
}
