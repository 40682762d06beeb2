//! Hyperprior-guided mode prediction.
//!
//! Two schemes share one idea: the decoded (mu, sigma) maps are available
//! on both sides of the channel, so a network over them can pick coding
//! modes without spending a single side-information bit.
//!
//! * HAMC picks a per-channel block partition for the fine motion latent;
//!   each region is average-pooled into one coded symbol.
//! * HARC picks a per-element skip/keep mask for the residual latent;
//!   skipped entries decode to zero.

pub mod hamc;
pub mod harc;

use crate::config::SIGMA_MIN;
use ndarray::ArrayView2;

/// The four basic modes. Meaning depends on the level:
/// at the 4x4 level M0 defers to the subblock modes, M1/M2 split the block
/// into 2x4 / 4x2 halves and M3 pools the whole 4x4; at the 2x2 level M0 is
/// four 1x1 cells, M1/M2 are 1x2 rows / 2x1 columns and M3 is one 2x2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionMode {
    M0,
    M1,
    M2,
    M3,
}

impl ResolutionMode {
    pub fn from_index(i: usize) -> ResolutionMode {
        match i {
            0 => ResolutionMode::M0,
            1 => ResolutionMode::M1,
            2 => ResolutionMode::M2,
            3 => ResolutionMode::M3,
            _ => panic!("mode index out of range: {i}"),
        }
    }

    pub fn index(self) -> usize {
        match self {
            ResolutionMode::M0 => 0,
            ResolutionMode::M1 => 1,
            ResolutionMode::M2 => 2,
            ResolutionMode::M3 => 3,
        }
    }
}

/// Block size of the partition grid on the latent.
pub const BLOCK: usize = 4;

/// One rectangular region inside a 4x4 block, in block-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Region {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

fn subblock_regions(mode: ResolutionMode, oy: usize, ox: usize, out: &mut Vec<Region>) {
    match mode {
        ResolutionMode::M0 => {
            for dy in 0..2 {
                for dx in 0..2 {
                    out.push(Region {
                        y0: oy + dy,
                        x0: ox + dx,
                        h: 1,
                        w: 1,
                    });
                }
            }
        }
        ResolutionMode::M1 => {
            for dy in 0..2 {
                out.push(Region {
                    y0: oy + dy,
                    x0: ox,
                    h: 1,
                    w: 2,
                });
            }
        }
        ResolutionMode::M2 => {
            for dx in 0..2 {
                out.push(Region {
                    y0: oy,
                    x0: ox + dx,
                    h: 2,
                    w: 1,
                });
            }
        }
        ResolutionMode::M3 => out.push(Region {
            y0: oy,
            x0: ox,
            h: 2,
            w: 2,
        }),
    }
}

/// Combine the 4x4-level mode with the four 2x2 subblock modes into a
/// partition of the block. Subblock modes only matter under M0; subblock
/// order is [top-left, top-right, bottom-left, bottom-right]. Regions come
/// out in canonical order: raster order of their top-left corners.
pub fn compose_partition(mode4: ResolutionMode, modes2: [ResolutionMode; 4]) -> Vec<Region> {
    let mut out = Vec::with_capacity(16);
    match mode4 {
        ResolutionMode::M1 => {
            out.push(Region { y0: 0, x0: 0, h: 2, w: 4 });
            out.push(Region { y0: 2, x0: 0, h: 2, w: 4 });
        }
        ResolutionMode::M2 => {
            out.push(Region { y0: 0, x0: 0, h: 4, w: 2 });
            out.push(Region { y0: 0, x0: 2, h: 4, w: 2 });
        }
        ResolutionMode::M3 => out.push(Region { y0: 0, x0: 0, h: 4, w: 4 }),
        ResolutionMode::M0 => {
            let offsets = [(0, 0), (0, 2), (2, 0), (2, 2)];
            for (m, (oy, ox)) in modes2.iter().zip(offsets) {
                subblock_regions(*m, oy, ox, &mut out);
            }
        }
    }
    out.sort_by_key(|r| (r.y0, r.x0));
    out
}

/// Round-half-away-from-zero mean of each region, in canonical order.
pub fn mode_guided_avgpool(block: &ArrayView2<f64>, partition: &[Region]) -> Vec<f64> {
    partition
        .iter()
        .map(|r| {
            let mut s = 0.0;
            for y in r.y0..r.y0 + r.h {
                for x in r.x0..r.x0 + r.w {
                    s += block[(y, x)];
                }
            }
            (s / r.cells() as f64).round()
        })
        .collect()
}

/// Fill each region with its symbol (replicate upsampling).
pub fn mode_guided_upsample(symbols: &[f64], partition: &[Region]) -> ndarray::Array2<f64> {
    assert_eq!(
        symbols.len(),
        partition.len(),
        "symbol count must match region count"
    );
    let mut out = ndarray::Array2::<f64>::zeros((BLOCK, BLOCK));
    for (v, r) in symbols.iter().zip(partition) {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                out[(y, x)] = *v;
            }
        }
    }
    out
}

/// Gaussian parameters of a region mean: mu averages; sigma contracts as
/// the std of the mean of independent Gaussians, floored at sigma_min.
pub fn pooled_params(
    mu: &ArrayView2<f64>,
    sigma: &ArrayView2<f64>,
    region: &Region,
) -> (f64, f64) {
    let n = region.cells() as f64;
    let mut ms = 0.0;
    let mut ss = 0.0;
    for y in region.y0..region.y0 + region.h {
        for x in region.x0..region.x0 + region.w {
            ms += mu[(y, x)];
            ss += sigma[(y, x)] * sigma[(y, x)];
        }
    }
    (ms / n, (ss.sqrt() / n).max(SIGMA_MIN))
}

/// Argmax with the lowest-index tie-break (the decoder must agree with the
/// encoder bit-for-bit, so ties cannot be left to chance).
pub fn select_mode_infer(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Check that a partition tiles the 4x4 block exactly once.
pub fn is_exact_cover(partition: &[Region]) -> bool {
    let mut hits = [[0u8; BLOCK]; BLOCK];
    for r in partition {
        if r.y0 + r.h > BLOCK || r.x0 + r.w > BLOCK {
            return false;
        }
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                hits[y][x] += 1;
            }
        }
    }
    hits.iter().all(|row| row.iter().all(|&c| c == 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;
    use ResolutionMode::*;

    #[test]
    fn figure_example_partition_has_nine_regions() {
        // target block M0 with subblock modes [M1, M2; M0, M3]
        let p = compose_partition(M0, [M1, M2, M0, M3]);
        assert_eq!(p.len(), 9);
        let count = |h, w| p.iter().filter(|r| r.h == h && r.w == w).count();
        assert_eq!(count(1, 2), 2);
        assert_eq!(count(2, 1), 2);
        assert_eq!(count(1, 1), 4);
        assert_eq!(count(2, 2), 1);
        assert!(is_exact_cover(&p));
    }

    #[test]
    fn non_m0_target_modes_ignore_subblocks() {
        for sub in [[M0; 4], [M1, M2, M3, M0], [M3; 4]] {
            assert_eq!(compose_partition(M3, sub).len(), 1);
            assert_eq!(compose_partition(M1, sub).len(), 2);
            assert_eq!(compose_partition(M2, sub).len(), 2);
        }
        let p = compose_partition(M1, [M3; 4]);
        assert_eq!(p[0], Region { y0: 0, x0: 0, h: 2, w: 4 });
        assert_eq!(p[1], Region { y0: 2, x0: 0, h: 2, w: 4 });
    }

    #[test]
    fn all_m0_gives_sixteen_cells() {
        let p = compose_partition(M0, [M0; 4]);
        assert_eq!(p.len(), 16);
        assert!(p.iter().all(|r| r.cells() == 1));
        assert!(is_exact_cover(&p));
    }

    #[test]
    fn every_mode_combination_is_an_exact_cover() {
        let modes = [M0, M1, M2, M3];
        for m4 in modes {
            for a in modes {
                for b in modes {
                    for c in modes {
                        for d in modes {
                            let p = compose_partition(m4, [a, b, c, d]);
                            assert!(is_exact_cover(&p), "{m4:?} [{a:?},{b:?},{c:?},{d:?}]");
                            // canonical order: raster by top-left corner
                            for pair in p.windows(2) {
                                assert!(
                                    (pair[0].y0, pair[0].x0) < (pair[1].y0, pair[1].x0),
                                    "regions out of canonical order"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pooling_matches_figure_values() {
        let block = arr2(&[
            [3.0, 4.0, 0.0, 0.0],
            [4.0, 5.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ]);
        let region = [Region { y0: 0, x0: 0, h: 2, w: 2 }];
        let symbols = mode_guided_avgpool(&block.slice(ndarray::s![0..4, 0..4]), &region);
        assert_eq!(symbols, vec![4.0]);
        let up = mode_guided_upsample(&symbols, &region);
        assert_eq!(up[(0, 0)], 4.0);
        assert_eq!(up[(1, 1)], 4.0);

        // mean 1.75 rounds half-away to 2
        let block2 = arr2(&[
            [1.0, 2.0, 0.0, 0.0],
            [2.0, 2.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ]);
        let s2 = mode_guided_avgpool(&block2.view(), &region);
        assert_eq!(s2, vec![2.0]);
    }

    #[test]
    fn pooled_params_examples() {
        let mu = ndarray::Array2::<f64>::zeros((4, 4));
        let sigma = ndarray::Array2::<f64>::ones((4, 4));
        let r = Region { y0: 0, x0: 0, h: 2, w: 2 };
        let (mb, sb) = pooled_params(&mu.view(), &sigma.view(), &r);
        assert_eq!(mb, 0.0);
        assert!((sb - 0.5).abs() < 1e-12);
        let r1 = Region { y0: 1, x0: 2, h: 1, w: 1 };
        let (m1, s1) = pooled_params(&mu.view(), &sigma.view(), &r1);
        assert_eq!((m1, s1), (0.0, 1.0));
        // tiny sigmas floor at sigma_min
        let small = ndarray::Array2::<f64>::from_elem((4, 4), 0.01);
        let (_, sf) = pooled_params(&mu.view(), &small.view(), &r);
        assert_eq!(sf, SIGMA_MIN);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(select_mode_infer(&[2.0, 0.0, -1.0, 0.5]), 0);
        assert_eq!(select_mode_infer(&[1.0, 1.0, 0.0, 0.0]), 0);
        assert_eq!(select_mode_infer(&[0.0, 1.0, 1.0, 0.0]), 1);
    }

    proptest! {
        #[test]
        fn pool_upsample_pool_is_idempotent(
            vals in proptest::collection::vec(-40.0f64..40.0, 16),
            m4 in 0usize..4,
            ms in proptest::collection::vec(0usize..4, 4),
        ) {
            let block = ndarray::Array2::from_shape_vec((4, 4), vals).unwrap();
            let p = compose_partition(
                ResolutionMode::from_index(m4),
                [
                    ResolutionMode::from_index(ms[0]),
                    ResolutionMode::from_index(ms[1]),
                    ResolutionMode::from_index(ms[2]),
                    ResolutionMode::from_index(ms[3]),
                ],
            );
            let once = mode_guided_avgpool(&block.view(), &p);
            let up = mode_guided_upsample(&once, &p);
            let twice = mode_guided_avgpool(&up.view(), &p);
            prop_assert_eq!(once, twice);
        }
    }
}
