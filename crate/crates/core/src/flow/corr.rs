//! All-pairs correlation pyramid and windowed bilinear lookup.
//!
//! Level 0 holds the inner product between every pair of feature vectors:
//! `C0[i, j, m, n] = sum_d u1[d, i, j] * u2[d, m, n]`, stored as a
//! `[H, W, H, W]` tensor over (source row, source col, target row, target
//! col). Coarser levels mean-pool the target axes by 2. The lookup
//! bilinearly samples each level around the flow-displaced source
//! position and stacks the window values as channels in
//! (level, dy, dx) order.

use crate::error::CoreError;
use crate::par;
use crate::tensor::{avg_pool_last2, plane_sample, plane_sample_grad, Tensor};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPyramid {
    /// `levels[k]` has shape `[H, W, H/2^k, W/2^k]`.
    pub levels: Vec<Tensor>,
    /// Lookup window radius.
    pub radius: usize,
}

impl CorrelationPyramid {
    pub fn lookup_channels(&self) -> usize {
        let window = 2 * self.radius + 1;
        self.levels.len() * window * window
    }

    /// Source-grid size `(H, W)`.
    pub fn source_dims(&self) -> (usize, usize) {
        let s = self.levels[0].shape();
        (s[0], s[1])
    }
}

/// Builds the correlation pyramid from two feature maps `[C, H, W]`.
pub fn correlation_pyramid(
    u1: &Tensor,
    u2: &Tensor,
    p_levels: usize,
    radius: usize,
) -> Result<CorrelationPyramid> {
    if u1.shape() != u2.shape() || u1.shape().len() != 3 {
        return Err(CoreError::shape(
            "correlation_pyramid",
            format!("{:?}", u1.shape()),
            format!("{:?}", u2.shape()),
        ));
    }
    if p_levels == 0 {
        return Err(CoreError::arg("correlation_pyramid", "p_levels must be positive"));
    }
    let (c, h, w) = (u1.shape()[0], u1.shape()[1], u1.shape()[2]);
    let down = 1usize << (p_levels - 1);
    if h % down != 0 || w % down != 0 {
        return Err(CoreError::arg(
            "correlation_pyramid",
            format!("spatial dims {h}x{w} not divisible by 2^(p_levels-1) = {down}"),
        ));
    }
    let plane = h * w;
    let mut level0 = Tensor::zeros(&[h, w, h, w]);
    // One chunk per source pixel (i, j): the [H, W] slab of its inner
    // products with every target pixel.
    par::for_each_chunk(level0.data_mut(), plane, |src, slab| {
        let (i, j) = (src / w, src % w);
        for d in 0..c {
            let f1 = u1.data()[d * plane + i * w + j];
            if f1 == 0.0 {
                continue;
            }
            let u2_plane = &u2.data()[d * plane..(d + 1) * plane];
            for (s, v) in slab.iter_mut().zip(u2_plane) {
                *s += f1 * v;
            }
        }
    });
    let mut levels = vec![level0];
    for _ in 1..p_levels {
        let next = avg_pool_last2(levels.last().unwrap())?;
        levels.push(next);
    }
    Ok(CorrelationPyramid { levels, radius })
}

fn check_flow_shape(pyr: &CorrelationPyramid, flow: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = pyr.source_dims();
    if flow.shape() != [2, h, w] {
        return Err(CoreError::shape(
            "correlation_lookup",
            format!("[2, {h}, {w}]"),
            format!("{:?}", flow.shape()),
        ));
    }
    Ok((h, w))
}

/// Samples the pyramid around `c0 + flow` for every source pixel.
///
/// For source pixel `(i, j)` and level `k` the window center is
/// `((j + fx) / 2^k, (i + fy) / 2^k)` in the level's target grid; the
/// `(2r+1)^2` window offsets are in level units. Output is
/// `[levels * (2r+1)^2, H, W]` with channels ordered by (level, dy, dx).
pub fn correlation_lookup(pyr: &CorrelationPyramid, flow: &Tensor) -> Result<Tensor> {
    let (h, w) = check_flow_shape(pyr, flow)?;
    let window = 2 * pyr.radius + 1;
    let l_c = pyr.lookup_channels();
    let r = pyr.radius as i64;
    let plane = h * w;
    let mut out = Tensor::zeros(&[l_c, h, w]);
    let out_data = out.data_mut();
    // Serial on purpose: the feature grids are tiny and this sits inside
    // every operator evaluation; parallelism lives at the batch level.
    for i in 0..h {
        for j in 0..w {
            let fx = flow.data()[i * w + j];
            let fy = flow.data()[plane + i * w + j];
            for (k, level) in pyr.levels.iter().enumerate() {
                let (hk, wk) = (level.shape()[2], level.shape()[3]);
                let slab = &level.data()[(i * w + j) * hk * wk..(i * w + j + 1) * hk * wk];
                let scale = (1u64 << k) as f64;
                let cx = (j as f64 + fx) / scale;
                let cy = (i as f64 + fy) / scale;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let ch = k * window * window
                            + (dy + r) as usize * window
                            + (dx + r) as usize;
                        out_data[ch * plane + i * w + j] =
                            plane_sample(slab, hk, wk, cx + dx as f64, cy + dy as f64);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`correlation_lookup`] with respect to the flow: folds an
/// output cotangent `[L_c, H, W]` into a flow cotangent `[2, H, W]`.
pub fn correlation_lookup_vjp_flow(
    pyr: &CorrelationPyramid,
    flow: &Tensor,
    cot: &Tensor,
) -> Result<Tensor> {
    let (h, w) = check_flow_shape(pyr, flow)?;
    let window = 2 * pyr.radius + 1;
    let l_c = pyr.lookup_channels();
    if cot.shape() != [l_c, h, w] {
        return Err(CoreError::shape(
            "correlation_lookup_vjp_flow",
            format!("[{l_c}, {h}, {w}]"),
            format!("{:?}", cot.shape()),
        ));
    }
    let r = pyr.radius as i64;
    let plane = h * w;
    let mut out = Tensor::zeros(&[2, h, w]);
    for src in 0..plane {
        let (i, j) = (src / w, src % w);
        let fx = flow.data()[src];
        let fy = flow.data()[plane + src];
        let mut gx = 0.0;
        let mut gy = 0.0;
        for (k, level) in pyr.levels.iter().enumerate() {
            let (hk, wk) = (level.shape()[2], level.shape()[3]);
            let slab = &level.data()[src * hk * wk..(src + 1) * hk * wk];
            let scale = (1u64 << k) as f64;
            let cx = (j as f64 + fx) / scale;
            let cy = (i as f64 + fy) / scale;
            for dy in -r..=r {
                for dx in -r..=r {
                    let ch =
                        k * window * window + (dy + r) as usize * window + (dx + r) as usize;
                    let c = cot.data()[ch * plane + src];
                    if c == 0.0 {
                        continue;
                    }
                    let (_, dvdx, dvdy) =
                        plane_sample_grad(slab, hk, wk, cx + dx as f64, cy + dy as f64);
                    gx += c * dvdx / scale;
                    gy += c * dvdy / scale;
                }
            }
        }
        out.data_mut()[src] = gx;
        out.data_mut()[plane + src] = gy;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_features(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(
            vec![c, h, w],
            (0..c * h * w).map(|_| rng.normal()).collect(),
        )
        .unwrap()
    }

    /// Quadruple-loop oracle for the level-0 correlation volume.
    fn level0_brute(u1: &Tensor, u2: &Tensor) -> Tensor {
        let (c, h, w) = (u1.shape()[0], u1.shape()[1], u1.shape()[2]);
        let mut out = Tensor::zeros(&[h, w, h, w]);
        for i in 0..h {
            for j in 0..w {
                for m in 0..h {
                    for n in 0..w {
                        let mut acc = 0.0;
                        for d in 0..c {
                            acc += u1.at3(d, i, j) * u2.at3(d, m, n);
                        }
                        let idx = ((i * w + j) * h + m) * w + n;
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_hot_match_single_entry() {
        let mut u = Tensor::zeros(&[2, 4, 4]);
        let idx = u.idx3(1, 2, 3);
        u.data_mut()[idx] = 1.0;
        let pyr = correlation_pyramid(&u, &u, 1, 1).unwrap();
        let level0 = &pyr.levels[0];
        for i in 0..4 {
            for j in 0..4 {
                for m in 0..4 {
                    for n in 0..4 {
                        let v = level0.at4(i, j, m, n);
                        if (i, j, m, n) == (2, 3, 2, 3) {
                            assert_eq!(v, 1.0);
                        } else {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bilinearity_doubles() {
        let mut rng = Rng::new(50);
        let u1 = random_features(&mut rng, 3, 4, 4);
        let pyr1 = correlation_pyramid(&u1, &u1, 1, 1).unwrap();
        let doubled = u1.scale(2.0);
        let pyr2 = correlation_pyramid(&u1, &doubled, 1, 1).unwrap();
        for (a, b) in pyr1.levels[0].data().iter().zip(pyr2.levels[0].data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_quadruple_loop_oracle() {
        let mut rng = Rng::new(51);
        let u1 = random_features(&mut rng, 4, 8, 8);
        let u2 = random_features(&mut rng, 4, 8, 8);
        let pyr = correlation_pyramid(&u1, &u2, 2, 3).unwrap();
        let oracle = level0_brute(&u1, &u2);
        for (a, b) in pyr.levels[0].data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        // Level 1 is the 2x2 mean pool of level 0 over the target axes.
        let pooled = avg_pool_last2(&oracle).unwrap();
        for (a, b) in pyr.levels[1].data().iter().zip(pooled.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn swap_symmetry() {
        // C(u1, u2)[i, j, m, n] == C(u2, u1)[m, n, i, j].
        let mut rng = Rng::new(52);
        let u1 = random_features(&mut rng, 3, 4, 6);
        let u2 = random_features(&mut rng, 3, 4, 6);
        let fwd = correlation_pyramid(&u1, &u2, 1, 1).unwrap();
        let rev = correlation_pyramid(&u2, &u1, 1, 1).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                for m in 0..4 {
                    for n in 0..6 {
                        let a = fwd.levels[0].at4(i, j, m, n);
                        let b = rev.levels[0].at4(m, n, i, j);
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_flow_identity_match_radius0() {
        // One-hot self-correlation: every pixel matches itself with
        // weight 1, so a radius-0 lookup at zero flow reads 1 everywhere.
        let h = 4;
        let w = 4;
        let mut u = Tensor::zeros(&[h * w, h, w]);
        for i in 0..h {
            for j in 0..w {
                let idx = u.idx3(i * w + j, i, j);
                u.data_mut()[idx] = 1.0;
            }
        }
        let pyr = correlation_pyramid(&u, &u, 1, 0).unwrap();
        let flow = Tensor::zeros(&[2, h, w]);
        let out = correlation_lookup(&pyr, &flow).unwrap();
        assert_eq!(out.shape(), &[1, h, w]);
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn integer_flow_reads_exact_cell() {
        let mut rng = Rng::new(53);
        let u1 = random_features(&mut rng, 3, 4, 4);
        let u2 = random_features(&mut rng, 3, 4, 4);
        let pyr = correlation_pyramid(&u1, &u2, 1, 0).unwrap();
        // Integer flow (1, 2) at source pixel (i=0, j=1) looks up target
        // cell (m, n) = (0 + 2, 1 + 1) = (2, 2).
        let mut flow = Tensor::zeros(&[2, 4, 4]);
        let ix = flow.idx3(0, 0, 1);
        flow.data_mut()[ix] = 1.0;
        let iy = flow.idx3(1, 0, 1);
        flow.data_mut()[iy] = 2.0;
        let out = correlation_lookup(&pyr, &flow).unwrap();
        let expect = pyr.levels[0].at4(0, 1, 2, 2);
        assert!((out.at3(0, 0, 1) - expect).abs() < 1e-12);
    }

    #[test]
    fn half_pixel_flow_averages_neighbors() {
        let mut rng = Rng::new(54);
        let u1 = random_features(&mut rng, 3, 4, 4);
        let u2 = random_features(&mut rng, 3, 4, 4);
        let pyr = correlation_pyramid(&u1, &u2, 1, 0).unwrap();
        let mut flow = Tensor::zeros(&[2, 4, 4]);
        let ix = flow.idx3(0, 1, 1);
        flow.data_mut()[ix] = 0.5;
        let out = correlation_lookup(&pyr, &flow).unwrap();
        let a = pyr.levels[0].at4(1, 1, 1, 1);
        let b = pyr.levels[0].at4(1, 1, 1, 2);
        assert!((out.at3(0, 1, 1) - 0.5 * (a + b)).abs() < 1e-12);
    }

    #[test]
    fn lookup_vjp_matches_finite_differences() {
        let mut rng = Rng::new(55);
        let u1 = random_features(&mut rng, 4, 8, 8);
        let u2 = random_features(&mut rng, 4, 8, 8);
        let pyr = correlation_pyramid(&u1, &u2, 2, 2).unwrap();
        let flow = Tensor::new(
            vec![2, 8, 8],
            (0..128).map(|_| rng.normal() * 0.7 + 0.3).collect(),
        )
        .unwrap();
        let cot = Tensor::new(
            vec![pyr.lookup_channels(), 8, 8],
            (0..pyr.lookup_channels() * 64).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let grad = correlation_lookup_vjp_flow(&pyr, &flow, &cot).unwrap();
        let loss = |f: &Tensor| -> f64 {
            correlation_lookup(&pyr, f).unwrap().dot(&cot).unwrap()
        };
        let eps = 1e-6;
        for probe in 0..16 {
            let i = (probe * 11) % flow.len();
            let mut plus = flow.clone();
            plus.data_mut()[i] += eps;
            let mut minus = flow.clone();
            minus.data_mut()[i] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let got = grad.data()[i];
            assert!(
                (fd - got).abs() < 1e-5 * (1.0 + fd.abs()),
                "probe {probe}: fd {fd} vs vjp {got}"
            );
        }
    }
}
