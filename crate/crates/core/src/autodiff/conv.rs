//! Stride-1 zero-padded 3D cross-correlation on `C × D × H × W` volumes.
//!
//! The input is padded once; in the flattened padded layout every kernel tap
//! is then a constant offset, so the output is computed over one contiguous
//! run of `Q` positions per channel. The run also covers positions that wrap
//! across row ends; those are computed and ignored.

use super::{gemm, MatMut, MatRef, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    /// Input spatial extent `[d, h, w]`.
    pub input: [usize; 3],
}

impl ConvGeom {
    pub fn padded(&self) -> [usize; 3] {
        self.input.map(|n| n + 2 * self.pad)
    }

    pub fn output(&self) -> [usize; 3] {
        self.padded().map(|n| n + 1 - self.k)
    }

    fn strides(&self) -> (usize, usize, usize) {
        let [dp, hp, wp] = self.padded();
        (hp * wp, wp, dp * hp * wp)
    }

    /// Length of the contiguous output run in padded coordinates.
    fn run(&self) -> usize {
        let [od, oh, ow] = self.output();
        let (sz, sy, _) = self.strides();
        (od - 1) * sz + (oh - 1) * sy + ow
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.k;
        let (sz, sy, _) = self.strides();
        (0..k * k * k).map(move |t| {
            let (kz, ky, kx) = (t / (k * k), (t / k) % k, t % k);
            (t, kz * sz + ky * sy + kx)
        })
    }

    /// Maps valid output positions to their offsets in the padded run.
    fn for_each_output(&self, mut f: impl FnMut(usize, usize)) {
        let [od, oh, ow] = self.output();
        let (sz, sy, _) = self.strides();
        let mut o = 0;
        for z in 0..od {
            for y in 0..oh {
                let q0 = z * sz + y * sy;
                for x in 0..ow {
                    f(o, q0 + x);
                    o += 1;
                }
            }
        }
    }
}

fn pad_input<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let [d, h, w] = g.input;
    let [dp, hp, wp] = g.padded();
    let p = g.pad;
    let np = dp * hp * wp;
    let mut xp = vec![T::zero(); g.cin * np];
    for c in 0..g.cin {
        for z in 0..d {
            for y in 0..h {
                let src = ((c * d + z) * h + y) * w;
                let dst = c * np + ((z + p) * hp + (y + p)) * wp + p;
                xp[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
    xp
}

const LANES: usize = 16;
const CO_BLOCK: usize = 4;

/// `full[co][i] = Σ_{ci, tap} w[co, ci, tap] · xp[ci][i + delta(tap)]` for
/// `i < run`. Accumulates `CO_BLOCK × LANES` outputs in registers over all
/// input channels and taps; the summation order per output is fixed, so
/// every code path produces identical values.
#[inline(always)]
fn correlate_impl<T: Scalar>(xp: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let (_, _, np) = g.strides();
    let q = g.run();
    let deltas: Vec<usize> = g.taps().map(|(_, d)| d).collect();
    let nt = deltas.len();
    let blocks = g.cout.div_ceil(CO_BLOCK);
    // packed[b][ci][tap][j] = w[b·CO_BLOCK + j][ci][tap], zero beyond cout.
    let mut packed = vec![T::zero(); blocks * g.cin * nt * CO_BLOCK];
    for co in 0..g.cout {
        let (b, j) = (co / CO_BLOCK, co % CO_BLOCK);
        for ci in 0..g.cin {
            for t in 0..nt {
                packed[((b * g.cin + ci) * nt + t) * CO_BLOCK + j] = weight[(co * g.cin + ci) * nt + t];
            }
        }
    }
    let mut full = vec![T::zero(); g.cout * q];
    for b in 0..blocks {
        let wb = &packed[b * g.cin * nt * CO_BLOCK..(b + 1) * g.cin * nt * CO_BLOCK];
        let co_n = CO_BLOCK.min(g.cout - b * CO_BLOCK);
        let mut q0 = 0;
        while q0 < q {
            let width = LANES.min(q - q0);
            let mut acc = [[T::zero(); LANES]; CO_BLOCK];
            if width == LANES {
                for ci in 0..g.cin {
                    let xb = ci * np + q0;
                    let wc = &wb[ci * nt * CO_BLOCK..(ci + 1) * nt * CO_BLOCK];
                    for (w, &d) in wc.chunks_exact(CO_BLOCK).zip(&deltas) {
                        let xs: &[T; LANES] = xp[xb + d..xb + d + LANES].try_into().unwrap();
                        for j in 0..CO_BLOCK {
                            let wj = w[j];
                            for l in 0..LANES {
                                acc[j][l] += wj * xs[l];
                            }
                        }
                    }
                }
            } else {
                for ci in 0..g.cin {
                    let xb = ci * np + q0;
                    let wc = &wb[ci * nt * CO_BLOCK..(ci + 1) * nt * CO_BLOCK];
                    for (w, &d) in wc.chunks_exact(CO_BLOCK).zip(&deltas) {
                        let xs = &xp[xb + d..xb + d + width];
                        for j in 0..CO_BLOCK {
                            for l in 0..width {
                                acc[j][l] += w[j] * xs[l];
                            }
                        }
                    }
                }
            }
            for (j, a) in acc.iter().enumerate().take(co_n) {
                let co = b * CO_BLOCK + j;
                full[co * q + q0..co * q + q0 + width].copy_from_slice(&a[..width]);
            }
            q0 += width;
        }
    }
    full
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn correlate_avx2<T: Scalar>(xp: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    correlate_impl(xp, weight, g)
}

fn correlate<T: Scalar>(xp: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { correlate_avx2(xp, weight, g) };
    }
    correlate_impl(xp, weight, g)
}

pub(crate) fn forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let full = correlate(&pad_input(x, g), weight, g);
    let q = g.run();
    let [od, oh, ow] = g.output();
    let no = od * oh * ow;
    let mut out = vec![T::zero(); g.cout * no];
    for co in 0..g.cout {
        let b = bias.map_or(T::zero(), |b| b[co]);
        let src = &full[co * q..(co + 1) * q];
        let dst = &mut out[co * no..(co + 1) * no];
        g.for_each_output(|o, qi| dst[o] = src[qi] + b);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of the forward pass. The weight gradient is one GEMM per tap
/// reducing over the whole output run. The input gradient is a forward
/// correlation of `gout` with the channel-transposed, point-reflected kernel
/// and padding `k − 1 − pad`, so it needs `pad < k`.
pub(crate) fn backward<T: Scalar>(x: &[T], weight: &[T], gout: &[T], g: &ConvGeom, need_input: bool) -> ConvGrads<T> {
    let (_, _, np) = g.strides();
    let q = g.run();
    let k = g.k;
    let k3 = k * k * k;
    let [od, oh, ow] = g.output();
    let no = od * oh * ow;

    let mut gfull = vec![T::zero(); g.cout * q];
    let mut gbias = vec![T::zero(); g.cout];
    for co in 0..g.cout {
        let src = &gout[co * no..(co + 1) * no];
        let dst = &mut gfull[co * q..(co + 1) * q];
        g.for_each_output(|o, qi| dst[qi] = src[o]);
        gbias[co] = src.iter().copied().sum();
    }

    let xp = pad_input(x, g);
    let mut gw = vec![T::zero(); weight.len()];
    for (t, d) in g.taps() {
        let a = MatRef::dense(&gfull, g.cout, q);
        let b = MatRef { data: &xp, offset: d, rows: q, cols: g.cin, rs: 1, cs: np };
        let c = MatMut { data: &mut gw, offset: t, rows: g.cout, cols: g.cin, rs: g.cin * k3, cs: k3 };
        gemm(T::one(), a, b, T::zero(), c);
    }
    drop((gfull, xp));

    let input = need_input.then(|| {
        assert!(g.pad < k, "input gradient needs pad < kernel size");
        let mut flipped = vec![T::zero(); weight.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                let src = (co * g.cin + ci) * k3;
                let dst = (ci * g.cout + co) * k3;
                for t in 0..k3 {
                    flipped[dst + t] = weight[src + k3 - 1 - t];
                }
            }
        }
        let back = ConvGeom { cin: g.cout, cout: g.cin, k, pad: k - 1 - g.pad, input: g.output() };
        debug_assert_eq!(back.output(), g.input);
        forward(gout, &flipped, None, &back)
    });

    ConvGrads { input, weight: gw, bias: gbias }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation.
    fn naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let [d, h, wd] = g.input;
        let [od, oh, ow] = g.output();
        let k = g.k;
        let p = g.pad as i64;
        let mut out = vec![0.0; g.cout * od * oh * ow];
        for co in 0..g.cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..g.cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = z as i64 + kz as i64 - p;
                                        let iy = y as i64 + ky as i64 - p;
                                        let ix = xx as i64 + kx as i64 - p;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as i64 || iy >= h as i64 || ix >= wd as i64 {
                                            continue;
                                        }
                                        let xi = ((ci * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((co * g.cin + ci) * k + kz) * k + ky) * k + kx;
                                        s += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[((co * od + z) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        for (k, pad, input) in [(3, 1, [4, 5, 6]), (5, 2, [5, 3, 4]), (3, 0, [4, 4, 5]), (1, 0, [2, 3, 2])] {
            let g = ConvGeom { cin: 3, cout: 2, k, pad, input };
            let n_in = g.cin * input.iter().product::<usize>();
            let x: Vec<f64> = (0..n_in).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
            let w: Vec<f64> = (0..g.cout * g.cin * k * k * k).map(|i| ((i * 104729) % 11) as f64 * 0.1 - 0.5).collect();
            let fast = forward(&x, &w, None, &g);
            let slow = naive(&x, &w, &g);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn impulse_stamps_kernel() {
        let g = ConvGeom { cin: 1, cout: 1, k: 5, pad: 2, input: [7, 7, 7] };
        let mut x = vec![0.0f64; 343];
        x[(3 * 7 + 3) * 7 + 3] = 1.0;
        let w: Vec<f64> = (0..125).map(|i| i as f64 + 1.0).collect();
        let out = forward(&x, &w, None, &g);
        for kz in 0..5 {
            for ky in 0..5 {
                for kx in 0..5 {
                    // Cross-correlation: output at (3+2-kz, ...) sees tap (kz, ky, kx).
                    let (z, y, xx) = (5 - kz, 5 - ky, 5 - kx);
                    assert_eq!(out[(z * 7 + y) * 7 + xx], w[(kz * 5 + ky) * 5 + kx]);
                }
            }
        }
    }

    /// `⟨gout, conv(x, w)⟩` is bilinear, so the adjoint identities
    /// `⟨gout, conv(x, w)⟩ = ⟨∂x, x⟩ = ⟨∂w, w⟩` must hold exactly.
    #[test]
    fn backward_is_the_adjoint() {
        for (k, pad, input) in [(3, 1, [4, 5, 6]), (5, 2, [6, 5, 4]), (3, 0, [5, 4, 6])] {
            let g = ConvGeom { cin: 3, cout: 2, k, pad, input };
            let n_in = g.cin * input.iter().product::<usize>();
            let x: Vec<f64> = (0..n_in).map(|i| ((i * 31) % 17) as f64 * 0.25 - 2.0).collect();
            let w: Vec<f64> = (0..g.cout * g.cin * k * k * k).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let y = forward(&x, &w, None, &g);
            let gout: Vec<f64> = (0..y.len()).map(|i| ((i * 5) % 9) as f64 - 4.0).collect();
            let grads = backward(&x, &w, &gout, &g, true);
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let reference = dot(&gout, &y);
            assert!((dot(&grads.input.unwrap(), &x) - reference).abs() < 1e-8 * reference.abs().max(1.0));
            assert!((dot(&grads.weight, &w) - reference).abs() < 1e-8 * reference.abs().max(1.0));
            assert_eq!(grads.bias, vec![gout[..y.len() / 2].iter().sum::<f64>(), gout[y.len() / 2..].iter().sum()]);
        }
    }
}
