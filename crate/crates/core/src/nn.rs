//! Dense CPU kernels and their adjoints for the pretrained backends.
//!
//! Weights are `[out, in, k, k]` row-major. Work is split across output
//! (or, for input gradients, input) channels; each output element is
//! accumulated in a fixed order so results do not depend on thread count.

use rayon::prelude::*;

use crate::features::FeatureMap;

/// Stride-1 convolution with zero padding `k/2` (cross-correlation, as in
/// every deep-learning framework).
pub fn conv2d(x: &FeatureMap, weight: &[f64], cout: usize, k: usize, bias: Option<&[f64]>) -> FeatureMap {
    let (cin, h, w) = (x.channels(), x.height(), x.width());
    debug_assert_eq!(weight.len(), cout * cin * k * k);
    let p = k / 2;
    let n = h * w;
    let mut out = vec![0.0; cout * n];
    out.par_chunks_mut(n).enumerate().for_each(|(o, dst)| {
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[o]);
        }
        for i in 0..cin {
            let src = x.plane(i);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let x0 = p.saturating_sub(kx);
                    let x1 = (w + p).saturating_sub(kx).min(w);
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < p || sy - p >= h {
                            continue;
                        }
                        let srow = &src[(sy - p) * w..(sy - p + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        for xx in x0..x1 {
                            drow[xx] += wv * srow[xx + kx - p];
                        }
                    }
                }
            }
        }
    });
    FeatureMap::from_vec(cout, h, w, out).expect("conv2d output geometry")
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(g: &FeatureMap, weight: &[f64], cin: usize, k: usize) -> FeatureMap {
    let (cout, h, w) = (g.channels(), g.height(), g.width());
    let p = k / 2;
    let n = h * w;
    let mut out = vec![0.0; cin * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, dst)| {
        for o in 0..cout {
            let src = g.plane(o);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let x0 = p.saturating_sub(kx);
                    let x1 = (w + p).saturating_sub(kx).min(w);
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < p || sy - p >= h {
                            continue;
                        }
                        let grow = &src[y * w..(y + 1) * w];
                        let drow = &mut dst[(sy - p) * w..(sy - p + 1) * w];
                        for xx in x0..x1 {
                            drow[xx + kx - p] += wv * grow[xx];
                        }
                    }
                }
            }
        }
    });
    FeatureMap::from_vec(cin, h, w, out).expect("conv2d input-grad geometry")
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad(x: &FeatureMap, g: &FeatureMap, k: usize) -> Vec<f64> {
    let (cin, h, w) = (x.channels(), x.height(), x.width());
    let cout = g.channels();
    let p = k / 2;
    let mut out = vec![0.0; cout * cin * k * k];
    out.par_chunks_mut(cin * k * k).enumerate().for_each(|(o, dst)| {
        let go = g.plane(o);
        for i in 0..cin {
            let src = x.plane(i);
            for ky in 0..k {
                for kx in 0..k {
                    let x0 = p.saturating_sub(kx);
                    let x1 = (w + p).saturating_sub(kx).min(w);
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < p || sy - p >= h {
                            continue;
                        }
                        let srow = &src[(sy - p) * w..(sy - p + 1) * w];
                        let grow = &go[y * w..(y + 1) * w];
                        for xx in x0..x1 {
                            acc += grow[xx] * srow[xx + kx - p];
                        }
                    }
                    dst[(i * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    out
}

/// Transposed 3×3 convolution with stride 2 and no padding:
/// `y[o, 2i+a, 2j+b] += x[c, i, j]·w[o, c, a, b]`, output side `2n + 1`.
pub fn conv_transpose2d_s2(x: &FeatureMap, weight: &[f64], cout: usize, k: usize) -> FeatureMap {
    let (cin, h, w) = (x.channels(), x.height(), x.width());
    let (oh, ow) = (2 * (h - 1) + k, 2 * (w - 1) + k);
    let mut out = vec![0.0; cout * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(o, dst)| {
        for c in 0..cin {
            let src = x.plane(c);
            for a in 0..k {
                for b in 0..k {
                    let wv = weight[((o * cin + c) * k + a) * k + b];
                    for i in 0..h {
                        for j in 0..w {
                            dst[(2 * i + a) * ow + 2 * j + b] += wv * src[i * w + j];
                        }
                    }
                }
            }
        }
    });
    FeatureMap::from_vec(cout, oh, ow, out).expect("transposed conv geometry")
}

pub fn conv_transpose2d_s2_input_grad(g: &FeatureMap, weight: &[f64], cin: usize, k: usize) -> FeatureMap {
    let (cout, oh, ow) = (g.channels(), g.height(), g.width());
    let (h, w) = ((oh - k) / 2 + 1, (ow - k) / 2 + 1);
    let mut out = vec![0.0; cin * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(c, dst)| {
        for o in 0..cout {
            let src = g.plane(o);
            for a in 0..k {
                for b in 0..k {
                    let wv = weight[((o * cin + c) * k + a) * k + b];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] += wv * src[(2 * i + a) * ow + 2 * j + b];
                        }
                    }
                }
            }
        }
    });
    FeatureMap::from_vec(cin, h, w, out).expect("transposed conv input-grad geometry")
}

pub fn conv_transpose2d_s2_weight_grad(x: &FeatureMap, g: &FeatureMap, k: usize) -> Vec<f64> {
    let (cin, h, w) = (x.channels(), x.height(), x.width());
    let (cout, ow) = (g.channels(), g.width());
    let mut out = vec![0.0; cout * cin * k * k];
    out.par_chunks_mut(cin * k * k).enumerate().for_each(|(o, dst)| {
        let go = g.plane(o);
        for c in 0..cin {
            let src = x.plane(c);
            for a in 0..k {
                for b in 0..k {
                    let mut acc = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            acc += go[(2 * i + a) * ow + 2 * j + b] * src[i * w + j];
                        }
                    }
                    dst[(c * k + a) * k + b] = acc;
                }
            }
        }
    });
    out
}

/// Upsample by zero insertion, pad, then filter with a square kernel
/// (applied as correlation; the kernels used here are symmetric).
#[derive(Clone, Debug)]
pub struct UpFirDn {
    pub up: usize,
    pub pad0: usize,
    pub pad1: usize,
    pub kernel: Vec<f64>,
    pub ksize: usize,
}

impl UpFirDn {
    /// Separable `[1, 3, 3, 1]` kernel normalised to sum `gain`.
    pub fn binomial4(up: usize, pad0: usize, pad1: usize, gain: f64) -> Self {
        let k1 = [1.0, 3.0, 3.0, 1.0];
        let mut kernel = Vec::with_capacity(16);
        for a in k1 {
            for b in k1 {
                kernel.push(a * b / 64.0 * gain);
            }
        }
        Self {
            up,
            pad0,
            pad1,
            kernel,
            ksize: 4,
        }
    }

    fn out_len(&self, n: usize) -> usize {
        n * self.up + self.pad0 + self.pad1 + 1 - self.ksize
    }

    #[inline]
    fn src_index(&self, pos: usize, n: usize) -> Option<usize> {
        // position in the padded, upsampled signal -> source sample
        let r = pos.checked_sub(self.pad0)?;
        if r % self.up != 0 || r / self.up >= n {
            return None;
        }
        Some(r / self.up)
    }

    pub fn apply(&self, x: &FeatureMap) -> FeatureMap {
        let (c, h, w) = (x.channels(), x.height(), x.width());
        let (oh, ow) = (self.out_len(h), self.out_len(w));
        let k = self.ksize;
        let mut out = vec![0.0; c * oh * ow];
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(ch, dst)| {
            let src = x.plane(ch);
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for a in 0..k {
                        let Some(sy) = self.src_index(y + a, h) else { continue };
                        for b in 0..k {
                            if let Some(sx) = self.src_index(xx + b, w) {
                                acc += self.kernel[a * k + b] * src[sy * w + sx];
                            }
                        }
                    }
                    dst[y * ow + xx] = acc;
                }
            }
        });
        FeatureMap::from_vec(c, oh, ow, out).expect("upfirdn geometry")
    }

    /// Adjoint of [`UpFirDn::apply`] for an input of side `h×w`.
    pub fn apply_adjoint(&self, g: &FeatureMap, h: usize, w: usize) -> FeatureMap {
        let (c, oh, ow) = (g.channels(), g.height(), g.width());
        let k = self.ksize;
        let mut out = vec![0.0; c * h * w];
        out.par_chunks_mut(h * w).enumerate().for_each(|(ch, dst)| {
            let src = g.plane(ch);
            for y in 0..oh {
                for xx in 0..ow {
                    let gv = src[y * ow + xx];
                    if gv == 0.0 {
                        continue;
                    }
                    for a in 0..k {
                        let Some(sy) = self.src_index(y + a, h) else { continue };
                        for b in 0..k {
                            if let Some(sx) = self.src_index(xx + b, w) {
                                dst[sy * w + sx] += self.kernel[a * k + b] * gv;
                            }
                        }
                    }
                }
            }
        });
        FeatureMap::from_vec(c, h, w, out).expect("upfirdn adjoint geometry")
    }
}

/// 2×2 max pooling with stride 2; returns the pooled map and the flat
/// argmax index of every output cell.
pub fn max_pool2(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let src = x.plane(ch);
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (2 * y + dy) * w + 2 * xx + dx;
                        if src[idx] > best.0 {
                            best = (src[idx], idx);
                        }
                    }
                }
                out.push(best.0);
                arg.push(ch * h * w + best.1);
            }
        }
    }
    (FeatureMap::from_vec(c, oh, ow, out).expect("pool geometry"), arg)
}

pub fn max_pool2_grad(g: &FeatureMap, argmax: &[usize], h: usize, w: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(g.channels(), h, w);
    for (v, &idx) in g.values().iter().zip(argmax) {
        out.values_mut()[idx] += v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_map(&mut rng, 2, 5, 6);
        let wt = rand_vec(&mut rng, 3 * 2 * 9);
        let b = rand_vec(&mut rng, 3);
        let y = conv2d(&x, &wt, 3, 3, Some(&b));
        for o in 0..3 {
            for r in 0..5i64 {
                for c in 0..6i64 {
                    let mut want = b[o];
                    for i in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sy, sx) = (r + ky - 1, c + kx - 1);
                                if (0..5).contains(&sy) && (0..6).contains(&sx) {
                                    want += wt[((o * 2 + i) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.get(i, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    assert!((y.get(o, r as usize, c as usize) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_map(&mut rng, 3, 6, 5);
        let wt = rand_vec(&mut rng, 4 * 3 * 9);
        let g = rand_map(&mut rng, 4, 6, 5);
        let y = conv2d(&x, &wt, 4, 3, None);
        let lhs = dot(y.values(), g.values());
        let gx = conv2d_input_grad(&g, &wt, 3, 3);
        assert!((lhs - dot(x.values(), gx.values())).abs() < 1e-10);
        let gw = conv2d_weight_grad(&x, &g, 3);
        assert!((lhs - dot(&wt, &gw)).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_map(&mut rng, 2, 4, 4);
        let wt = rand_vec(&mut rng, 3 * 2 * 9);
        let y = conv_transpose2d_s2(&x, &wt, 3, 3);
        assert_eq!((y.height(), y.width()), (9, 9));
        let g = rand_map(&mut rng, 3, 9, 9);
        let lhs = dot(y.values(), g.values());
        let gx = conv_transpose2d_s2_input_grad(&g, &wt, 2, 3);
        assert!((lhs - dot(x.values(), gx.values())).abs() < 1e-10);
        let gw = conv_transpose2d_s2_weight_grad(&x, &g, 3);
        assert!((lhs - dot(&wt, &gw)).abs() < 1e-10);
    }

    #[test]
    fn upfirdn_geometry_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // blur after a stride-2 transposed conv: 2n+1 -> 2n
        let blur = UpFirDn::binomial4(1, 1, 1, 4.0);
        let x = rand_map(&mut rng, 2, 9, 9);
        let y = blur.apply(&x);
        assert_eq!((y.height(), y.width()), (8, 8));
        let g = rand_map(&mut rng, 2, 8, 8);
        let gx = blur.apply_adjoint(&g, 9, 9);
        assert!((dot(y.values(), g.values()) - dot(x.values(), gx.values())).abs() < 1e-10);

        let up = UpFirDn::binomial4(2, 2, 1, 4.0);
        let x = rand_map(&mut rng, 3, 4, 4);
        let y = up.apply(&x);
        assert_eq!((y.height(), y.width()), (8, 8));
        let g = rand_map(&mut rng, 3, 8, 8);
        let gx = up.apply_adjoint(&g, 4, 4);
        assert!((dot(y.values(), g.values()) - dot(x.values(), gx.values())).abs() < 1e-10);
    }

    #[test]
    fn upsampling_preserves_constants_in_the_interior() {
        let up = UpFirDn::binomial4(2, 2, 1, 4.0);
        let x = FeatureMap::from_vec(1, 4, 4, vec![1.0; 16]).unwrap();
        let y = up.apply(&x);
        for r in 1..7 {
            for c in 1..7 {
                assert!((y.get(0, r, c) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = FeatureMap::from_vec(1, 2, 2, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.values(), &[0.9]);
        let g = FeatureMap::from_vec(1, 1, 1, vec![2.0]).unwrap();
        assert_eq!(max_pool2_grad(&g, &arg, 2, 2).values(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
