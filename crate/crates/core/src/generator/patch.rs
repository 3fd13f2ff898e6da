//! Non-overlapping 3D patching of `(N_r, N_t, 2 N_c)` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub dims: [usize; 3],
    pub patch: [usize; 3],
}

impl PatchSpec {
    pub fn new(dims: [usize; 3], patch: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if patch[a] == 0 || dims[a] % patch[a] != 0 {
                return Err(Error::Shape(format!("axis {a}: size {} not divisible by patch {}", dims[a], patch[a])));
            }
        }
        Ok(Self { dims, patch })
    }

    pub fn grid(&self) -> [usize; 3] {
        [self.dims[0] / self.patch[0], self.dims[1] / self.patch[1], self.dims[2] / self.patch[2]]
    }

    /// Number of patch tokens `L_patch`.
    pub fn num_patches(&self) -> usize {
        self.grid().iter().product()
    }

    /// Elements per patch.
    pub fn patch_size(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// For each token-major output position, the source element index.
    /// Tokens run rx-block outermost, then tx-block, then frequency block;
    /// inside a patch the order is again rx, tx, frequency.
    pub fn gather_index(&self) -> Vec<usize> {
        let [g0, g1, g2] = self.grid();
        let [p0, p1, p2] = self.patch;
        let [_, d1, d2] = self.dims;
        let mut idx = Vec::with_capacity(self.numel());
        for b0 in 0..g0 {
            for b1 in 0..g1 {
                for b2 in 0..g2 {
                    for i in 0..p0 {
                        for j in 0..p1 {
                            for f in 0..p2 {
                                let (a, b, c) = (b0 * p0 + i, b1 * p1 + j, b2 * p2 + f);
                                idx.push((a * d1 + b) * d2 + c);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    /// `[L_patch, patch_size]` rows from a dense tensor.
    pub fn patchify<T: Copy>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.numel() {
            return Err(Error::Shape(format!("patchify: {} elements for dims {:?}", x.len(), self.dims)));
        }
        Ok(self.gather_index().into_iter().map(|i| x[i]).collect())
    }

    pub fn unpatchify<T: Copy + Default>(&self, tokens: &[T]) -> Result<Vec<T>> {
        if tokens.len() != self.numel() {
            return Err(Error::Shape(format!("unpatchify: {} elements for dims {:?}", tokens.len(), self.dims)));
        }
        let mut out = vec![T::default(); tokens.len()];
        for (pos, src) in self.gather_index().into_iter().enumerate() {
            out[src] = tokens[pos];
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        assert_eq!(PatchSpec::new([4, 4, 128], [2, 2, 8]).unwrap().num_patches(), 64);
        assert_eq!(PatchSpec::new([2, 2, 16], [2, 2, 16]).unwrap().num_patches(), 1);
        assert!(PatchSpec::new([4, 4, 128], [3, 2, 8]).is_err());
    }

    #[test]
    fn round_trip_exact() {
        let spec = PatchSpec::new([4, 4, 128], [2, 2, 8]).unwrap();
        let x: Vec<f64> = (0..spec.numel()).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = spec.patchify(&x).unwrap();
        assert_eq!(spec.unpatchify(&t).unwrap(), x);
        let mut seen = spec.gather_index();
        seen.sort_unstable();
        assert_eq!(seen, (0..spec.numel()).collect::<Vec<_>>());
    }

    #[test]
    fn first_token_is_the_corner_block() {
        let spec = PatchSpec::new([2, 2, 4], [1, 2, 2]).unwrap();
        let x: Vec<usize> = (0..16).collect();
        // Element (a, b, c) has index a*8 + b*4 + c.
        assert_eq!(spec.patchify(&x).unwrap()[..4], [0, 1, 4, 5]);
    }
}
