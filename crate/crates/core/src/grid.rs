//! Dense 3D grid indexing and a few order-statistic helpers shared by the
//! preprocessing, feature and metric code.
//!
//! Every voxel grid in the crate is stored x-fastest, matching the on-disk
//! NIfTI layout: `index = x + nx * (y + ny * z)`.

/// Spatial extent of a voxel grid, `[nx, ny, nz]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims([nx, ny, nz])
    }

    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.0[0];
        let ny = self.0[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Visits the face neighbours (6-connectivity) of `idx` that lie inside
    /// the grid.
    #[inline]
    pub fn for_each_face_neighbor(&self, idx: usize, mut f: impl FnMut(usize)) {
        let [x, y, z] = self.coords(idx);
        let [nx, ny, nz] = self.0;
        let sy = nx;
        let sz = nx * ny;
        if x > 0 {
            f(idx - 1);
        }
        if x + 1 < nx {
            f(idx + 1);
        }
        if y > 0 {
            f(idx - sy);
        }
        if y + 1 < ny {
            f(idx + sy);
        }
        if z > 0 {
            f(idx - sz);
        }
        if z + 1 < nz {
            f(idx + sz);
        }
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Percentile of already-sorted values using linear interpolation between
/// order statistics (position `p/100 * (n-1)`).
///
/// Panics if `sorted` is empty.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let pos = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Sorts a copy of `values` and evaluates several percentiles at once.
pub fn percentiles(values: &[f64], ps: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    ps.iter().map(|&p| percentile_sorted(&sorted, p)).collect()
}

/// Index of the maximum value, ties resolved toward the higher index.
#[inline]
pub fn argmax_high<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v >= values[best] {
            best = i;
        }
    }
    best
}

/// SplitMix64 finalizer, used to derive independent per-case seeds from a
/// master seed.
pub fn mix_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let d = Dims::new(3, 4, 5);
        for i in 0..d.len() {
            let [x, y, z] = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
    }

    #[test]
    fn percentile_linear_interpolation() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert!((percentile_sorted(&v, 99.5) - 995.005).abs() < 1e-9);
        assert_eq!(percentile_sorted(&[3.0, 3.0], 95.0), 3.0);
        assert_eq!(percentile_sorted(&[7.0], 10.0), 7.0);
    }

    #[test]
    fn argmax_prefers_higher_index_on_ties() {
        assert_eq!(argmax_high(&[1.0, 2.0, 2.0, 0.0]), 2);
        assert_eq!(argmax_high(&[5, 5, 5, 5]), 3);
    }

    #[test]
    fn face_neighbors_at_corner() {
        let d = Dims::new(2, 2, 2);
        let mut n = Vec::new();
        d.for_each_face_neighbor(0, |j| n.push(j));
        n.sort();
        assert_eq!(n, vec![1, 2, 4]);
    }
}
