//! Coordinate encodings: sinusoidal features, multilinear interpolation
//! stencils, and hashed multiresolution grid indexing.

use arrayvec::ArrayVec;

/// Appends `[x?, sin(2^0 pi x_j), cos(2^0 pi x_j), ..., sin(2^(L-1) pi x_j),
/// cos(2^(L-1) pi x_j)]` per dimension `j` to `out`, with the raw input
/// prepended when `include_input` is set. Matches the tape's encoding op
/// bitwise.
pub fn fourier_encode_into(x: &[f64], num_frequencies: usize, include_input: bool, out: &mut Vec<f64>) {
    if include_input {
        out.extend_from_slice(x);
    }
    for &xj in x {
        let mut freq = std::f64::consts::PI;
        for _ in 0..num_frequencies {
            let (s, c) = (freq * xj).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
}

/// Convenience wrapper around [`fourier_encode_into`].
pub fn fourier_encode(x: &[f64], num_frequencies: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(x.len(), num_frequencies, include_input));
    fourier_encode_into(x, num_frequencies, include_input, &mut out);
    out
}

/// Output length of [`fourier_encode`].
pub fn encoded_len(dim: usize, num_frequencies: usize, include_input: bool) -> usize {
    dim * 2 * num_frequencies + if include_input { dim } else { 0 }
}

/// The up-to-`2^3` corners of a multilinear interpolation stencil.
#[derive(Debug, Clone)]
pub struct CornerSet {
    /// Integer vertex coordinates per corner.
    pub corners: ArrayVec<[u32; 3], 8>,
    /// Interpolation weight per corner; the weights sum to 1.
    pub weights: ArrayVec<f64, 8>,
    /// `d weight / d u`, corner-major (`m` entries per corner), in units of
    /// the normalized coordinate `u`.
    pub dwdu: ArrayVec<f64, 24>,
}

/// Multilinear stencil at normalized coordinate `u in [0,1]^m` on a grid with
/// `cells` cells per axis (so `cells + 1` vertices). Coordinates outside
/// `[0,1]` are clamped to the boundary cell, where the stencil extrapolates
/// linearly with consistent derivatives.
pub fn multilinear_stencil(u: &[f64], cells: &[u32]) -> CornerSet {
    let m = u.len();
    debug_assert!(m >= 1 && m <= 3);
    debug_assert_eq!(cells.len(), m);

    let mut base = [0u32; 3];
    let mut t = [0.0f64; 3];
    for j in 0..m {
        let n = cells[j];
        debug_assert!(n >= 1, "grid needs at least one cell per axis");
        let pos = u[j] * n as f64;
        let cell = (pos.floor() as i64).clamp(0, n as i64 - 1) as u32;
        base[j] = cell;
        t[j] = pos - cell as f64;
    }

    let mut set = CornerSet {
        corners: ArrayVec::new(),
        weights: ArrayVec::new(),
        dwdu: ArrayVec::new(),
    };
    for corner in 0..(1usize << m) {
        let mut coords = [0u32; 3];
        let mut w = 1.0;
        for j in 0..m {
            let hi = (corner >> j) & 1 == 1;
            coords[j] = base[j] + hi as u32;
            w *= if hi { t[j] } else { 1.0 - t[j] };
        }
        set.corners.push(coords);
        set.weights.push(w);
        for a in 0..m {
            let mut d = cells[a] as f64 * if (corner >> a) & 1 == 1 { 1.0 } else { -1.0 };
            for j in 0..m {
                if j != a {
                    let hi = (corner >> j) & 1 == 1;
                    d *= if hi { t[j] } else { 1.0 - t[j] };
                }
            }
            set.dwdu.push(d);
        }
    }
    set
}

/// Spatial hash for multiresolution grid vertices (one prime per axis, XOR
/// combined), masked into a power-of-two table.
pub fn hash_vertex(coords: &[u32], table_len: u32) -> u32 {
    const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];
    debug_assert!(table_len.is_power_of_two());
    let mut h = 0u32;
    for (j, &c) in coords.iter().enumerate() {
        h ^= c.wrapping_mul(PRIMES[j]);
    }
    h & (table_len - 1)
}

/// Flat vertex index for a dense grid with `verts` vertices per axis,
/// x-fastest.
pub fn dense_vertex_index(coords: &[u32], verts: &[u32]) -> u32 {
    let mut idx = 0u64;
    for j in (0..coords.len()).rev() {
        debug_assert!(coords[j] < verts[j]);
        idx = idx * verts[j] as u64 + coords[j] as u64;
    }
    idx as u32
}

/// Per-level cell resolutions growing geometrically from `base` to `max`
/// (inclusive at both ends when `levels > 1`).
pub fn level_resolutions(levels: usize, base: u32, max: u32) -> Vec<u32> {
    assert!(levels >= 1 && base >= 1 && max >= base);
    if levels == 1 {
        return vec![base];
    }
    let growth = ((max as f64 / base as f64).ln() / (levels as f64 - 1.0)).exp();
    (0..levels)
        .map(|l| {
            let r = (base as f64 * growth.powi(l as i32)).round() as u32;
            r.clamp(base, max)
        })
        .collect()
}
