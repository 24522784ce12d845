//! Coordinate-addressable multi-scale noise and the coordinate arithmetic
//! that lets any box of the infinite texture be generated on its own.

use crate::error::{Error, Result};
use crate::generator::RegionRequest;
use crate::tensor::Tensor4;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;
const NONZERO_STATE: u64 = 0x2545_F491_4F6C_DD1D;

/// Extra noise voxels per side each scale needs so that unpadded
/// convolutions still cover the requested output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarginTable {
    margins: Vec<usize>,
}

impl MarginTable {
    /// Coefficients for a generator with `k` upsamplings (`k + 1` scales).
    ///
    /// The finest scale runs two conv blocks (`c_0 = 4`); each upsampling
    /// halves the dependency, rounding up, and every intermediate scale adds
    /// a block on each branch (`+4`); the coarsest scale runs one (`+2`).
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("margin_table", "need at least one upsampling (K >= 1)"));
        }
        let mut margins = vec![4usize];
        for s in 1..=k {
            let halved = margins[s - 1].saturating_sub(2).div_ceil(2);
            margins.push(halved + if s < k { 4 } else { 2 });
        }
        Ok(Self { margins })
    }

    /// Number of upsamplings `K`.
    pub fn upsamplings(&self) -> usize {
        self.margins.len() - 1
    }

    pub fn margin(&self, scale: usize) -> usize {
        self.margins[scale]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.margins
    }
}

pub fn margin_table(k: usize) -> Result<MarginTable> {
    MarginTable::new(k)
}

/// Per-dimension scale coordinates `n_k = floor(n_0 / 2^k)` and the shifts
/// `s_k = n_{k-1} - 2 n_k` applied after each upsampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftSchedule {
    coords: Vec<i64>,
    shifts: Vec<u8>,
}

impl ShiftSchedule {
    /// `n_0 .. n_K`.
    pub fn coords(&self) -> &[i64] {
        &self.coords
    }

    /// `s_1 .. s_K`; index 0 holds `s_1`.
    pub fn shifts(&self) -> &[u8] {
        &self.shifts
    }

    /// Shift applied after the upsampling from scale `k` to `k - 1`.
    pub fn shift(&self, k: usize) -> u8 {
        self.shifts[k - 1]
    }
}

pub fn shift_schedule(n0: i64, k: usize) -> ShiftSchedule {
    let coords: Vec<i64> = (0..=k).map(|s| n0.div_euclid(1i64 << s)).collect();
    let shifts = (1..=k).map(|s| (coords[s - 1] - 2 * coords[s]) as u8).collect();
    ShiftSchedule { coords, shifts }
}

/// One scale's noise box in absolute scale-k coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseWindow {
    pub origin: [i64; 3],
    pub extent: [usize; 3],
}

impl NoiseWindow {
    pub fn voxels(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn contains(&self, at: [i64; 3]) -> bool {
        (0..3).all(|d| at[d] >= self.origin[d] && at[d] < self.origin[d] + self.extent[d] as i64)
    }
}

/// Everything needed to draw the noise inputs of one region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseSpec {
    pub seed: u64,
    pub channels: usize,
    pub windows: Vec<NoiseWindow>,
}

impl NoiseSpec {
    pub fn for_region(request: &RegionRequest, table: &MarginTable, seed: u64, channels: usize) -> Self {
        Self {
            seed,
            channels,
            windows: noise_extents(request, table),
        }
    }

    pub fn scalars_per_channel(&self) -> usize {
        self.windows.iter().map(NoiseWindow::voxels).sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.scalars_per_channel() * self.channels
    }
}

/// Noise windows for every scale of a request.
///
/// At scale `k` a dimension with origin `o` and size `N` spans the lattice
/// points `floor(o / 2^k) ..= floor((o + N - 1) / 2^k)`; the window adds
/// `c_k` on each side. For origins aligned to `2^k` the extent is
/// `ceil(N / 2^k) + 2 c_k`.
pub fn noise_extents(request: &RegionRequest, table: &MarginTable) -> Vec<NoiseWindow> {
    (0..=table.upsamplings())
        .map(|k| {
            let c = table.margin(k);
            let mut origin = [0i64; 3];
            let mut extent = [0usize; 3];
            for d in 0..3 {
                let lo = request.origin[d].div_euclid(1 << k);
                let hi = (request.origin[d] + request.size[d] as i64 - 1).div_euclid(1 << k);
                origin[d] = lo - c as i64;
                extent[d] = (hi - lo + 1) as usize + 2 * c;
            }
            NoiseWindow { origin, extent }
        })
        .collect()
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

#[inline]
fn xorshift64(mut x: u64) -> u64 {
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    x
}

/// 64-bit PRNG state for one noise sample.
///
/// Each of `(x, y, z, channel, scale)` is xor-absorbed (signed values as
/// two's complement), offset by the golden gamma, and run through the
/// splitmix64 finalizer.
#[inline]
pub fn noise_state(seed: u64, at: [i64; 3], channel: usize, scale: usize) -> u64 {
    let mut h = seed;
    for v in [at[0] as u64, at[1] as u64, at[2] as u64, channel as u64, scale as u64] {
        h = mix64((h ^ v).wrapping_add(GOLDEN_GAMMA));
    }
    if h == 0 {
        h = NONZERO_STATE;
    }
    xorshift64(xorshift64(xorshift64(h)))
}

/// Uniform value in `[0, 1)` from the top 53 bits of the state.
#[inline]
pub fn noise_value_f64(seed: u64, at: [i64; 3], channel: usize, scale: usize) -> f64 {
    (noise_state(seed, at, channel, scale) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// [`noise_value_f64`] rounded down onto the f32 grid (top 24 bits), so the
/// result stays strictly below 1.
#[inline]
pub fn noise_value(seed: u64, at: [i64; 3], channel: usize, scale: usize) -> f32 {
    (noise_state(seed, at, channel, scale) >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
}

/// Fills one scale's window. Values depend only on the absolute coordinate,
/// channel, scale and seed.
pub fn sample_noise(spec: &NoiseSpec, scale: usize) -> Tensor4 {
    sample_window(spec.seed, spec.channels, &spec.windows[scale], scale)
}

pub fn sample_window(seed: u64, channels: usize, w: &NoiseWindow, scale: usize) -> Tensor4 {
    sample_window_with(channels, w, |at, c| noise_value(seed, at, c, scale))
}

/// Fills a window from an arbitrary coordinate field.
pub fn sample_window_with(channels: usize, w: &NoiseWindow, mut field: impl FnMut([i64; 3], usize) -> f32) -> Tensor4 {
    Tensor4::from_fn(channels, w.extent, |c, [i, j, l]| {
        field([w.origin[0] + i as i64, w.origin[1] + j as i64, w.origin[2] + l as i64], c)
    })
}
