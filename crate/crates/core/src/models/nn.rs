//! Layer primitives with hand-written backward passes.
//!
//! Parameters live in one flat `f32` slice; every layer stores offsets into it.
//! Activations are single-instance `(channels, height, width)` tensors in
//! row-major order. Backward functions accumulate into a gradient slice that has
//! the same layout as the parameters.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn numel(self) -> usize {
        self.c * self.h * self.w
    }
}

/// Hands out contiguous parameter ranges during construction.
#[derive(Debug, Default)]
pub struct Allocator {
    pub len: usize,
}

impl Allocator {
    pub fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }
}

pub fn normal_init<R: Rng>(dst: &mut [f32], std: f64, rng: &mut R) {
    for v in dst {
        let z: f64 = StandardNormal.sample(rng);
        *v = (z * std) as f32;
    }
}

/// Same-padded, stride-1 square convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv {
    pub fn new(alloc: &mut Allocator, cin: usize, cout: usize, k: usize) -> Self {
        let w_off = alloc.take(cout * cin * k * k);
        let b_off = alloc.take(cout);
        Conv { cin, cout, k, w_off, b_off }
    }

    pub fn init<R: Rng>(&self, params: &mut [f32], gain: f64, rng: &mut R) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let n = self.cout * self.cin * self.k * self.k;
        normal_init(&mut params[self.w_off..self.w_off + n], gain * (2.0 / fan_in).sqrt(), rng);
        params[self.b_off..self.b_off + self.cout].fill(0.0);
    }

    fn weight(&self, params: &[f32], co: usize, ci: usize, ky: usize, kx: usize) -> f32 {
        params[self.w_off + ((co * self.cin + ci) * self.k + ky) * self.k + kx]
    }

    /// Valid output rows/cols for a kernel tap at offset `d` on an axis of length `n`.
    fn span(d: isize, n: usize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (n as isize - d).clamp(0, n as isize) as usize;
        (lo, hi.max(lo))
    }

    pub fn forward(&self, params: &[f32], x: &[f32], h: usize, w: usize) -> Vec<f32> {
        let plane = h * w;
        let pad = (self.k / 2) as isize;
        let mut out = vec![0.0f32; self.cout * plane];
        for co in 0..self.cout {
            let o = &mut out[co * plane..(co + 1) * plane];
            o.fill(params[self.b_off + co]);
            for ci in 0..self.cin {
                let xin = &x[ci * plane..(ci + 1) * plane];
                for ky in 0..self.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = Self::span(dy, h);
                    for kx in 0..self.k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = Self::span(dx, w);
                        let wv = self.weight(params, co, ci, ky, kx);
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let src = &xin[iy * w + (x0 as isize + dx) as usize..iy * w + (x1 as isize + dx) as usize];
                            let dst = &mut o[y * w + x0..y * w + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, params: &[f32], x: &[f32], dout: &[f32], h: usize, w: usize, grads: &mut [f32]) -> Vec<f32> {
        let plane = h * w;
        let pad = (self.k / 2) as isize;
        let mut dx_all = vec![0.0f32; self.cin * plane];
        for co in 0..self.cout {
            let g = &dout[co * plane..(co + 1) * plane];
            grads[self.b_off + co] += g.iter().sum::<f32>();
            for ci in 0..self.cin {
                let xin = &x[ci * plane..(ci + 1) * plane];
                let dxin = &mut dx_all[ci * plane..(ci + 1) * plane];
                for ky in 0..self.k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = Self::span(dy, h);
                    for kx in 0..self.k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = Self::span(dx, w);
                        let wv = self.weight(params, co, ci, ky, kx);
                        let mut acc = 0.0f32;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let s0 = (iy as isize * w as isize + x0 as isize + dx) as usize;
                            let n = x1 - x0;
                            let grow = &g[y * w + x0..y * w + x1];
                            let src = &xin[s0..s0 + n];
                            acc += grow.iter().zip(src).map(|(a, b)| a * b).sum::<f32>();
                            let dst = &mut dxin[s0..s0 + n];
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                        grads[self.w_off + ((co * self.cin + ci) * self.k + ky) * self.k + kx] += acc;
                    }
                }
            }
        }
        dx_all
    }
}

/// Fully connected layer, weight stored `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Linear {
    pub fn new(alloc: &mut Allocator, inp: usize, out: usize) -> Self {
        let w_off = alloc.take(inp * out);
        let b_off = alloc.take(out);
        Linear { inp, out, w_off, b_off }
    }

    pub fn init<R: Rng>(&self, params: &mut [f32], std: f64, rng: &mut R) {
        normal_init(&mut params[self.w_off..self.w_off + self.inp * self.out], std, rng);
        params[self.b_off..self.b_off + self.out].fill(0.0);
    }

    /// Weight and bias ranges are allocated back to back.
    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.w_off..self.b_off + self.out
    }

    pub fn forward(&self, params: &[f32], x: &[f32]) -> Vec<f32> {
        let wt = &params[self.w_off..self.w_off + self.inp * self.out];
        (0..self.out)
            .map(|o| {
                let row = &wt[o * self.inp..(o + 1) * self.inp];
                params[self.b_off + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f32], x: &[f32], dout: &[f32], grads: &mut [f32]) -> Vec<f32> {
        let mut dx = vec![0.0f32; self.inp];
        for (o, &g) in dout.iter().enumerate() {
            grads[self.b_off + o] += g;
            if g == 0.0 {
                continue;
            }
            let row = self.w_off + o * self.inp;
            for i in 0..self.inp {
                grads[row + i] += g * x[i];
                dx[i] += g * params[row + i];
            }
        }
        dx
    }
}

/// NaN passes through so corrupt inputs surface as divergence instead of vanishing.
pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect()
}

/// Gradient through ReLU given the forward *output* (or input; the sign agrees).
pub fn relu_backward(y: &[f32], dout: &[f32]) -> Vec<f32> {
    y.iter().zip(dout).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect()
}

/// 2×2 max pooling with stride 2; returns pooled values and winning input indices.
pub fn maxpool2(x: &[f32], s: Shape) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.c * oh * ow);
    let mut arg = Vec::with_capacity(s.c * oh * ow);
    for c in 0..s.c {
        let base = c * s.h * s.w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * s.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * s.w + 2 * xx + dx;
                    if x[i] > x[best] || x[i].is_nan() {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(arg: &[u32], dout: &[f32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (a, g) in arg.iter().zip(dout) {
        dx[*a as usize] += g;
    }
    dx
}

pub fn global_avg_pool(x: &[f32], s: Shape) -> Vec<f32> {
    let plane = s.h * s.w;
    (0..s.c).map(|c| x[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32).collect()
}

pub fn global_avg_pool_backward(dout: &[f32], s: Shape) -> Vec<f32> {
    let plane = s.h * s.w;
    let mut dx = Vec::with_capacity(s.numel());
    for g in dout {
        dx.extend(std::iter::repeat_n(g / plane as f32, plane));
    }
    dx
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric_grad(f: &dyn Fn(&[f32]) -> f64, x: &[f32], i: usize, h: f32) -> f64 {
        let mut a = x.to_vec();
        a[i] += h;
        let mut b = x.to_vec();
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h as f64)
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut alloc = Allocator::default();
        let conv = Conv::new(&mut alloc, 2, 3, 3);
        let mut p = vec![0.0; alloc.len];
        normal_init(&mut p, 1.0, &mut rng);
        let (h, w) = (5, 4);
        let mut x = vec![0.0; 2 * h * w];
        normal_init(&mut x, 1.0, &mut rng);
        let out = conv.forward(&p, &x, h, w);
        for co in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = p[conv.b_off + co] as f64;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += (conv.weight(&p, co, ci, ky, kx) * x[ci * h * w + iy as usize * w + ix as usize]) as f64;
                            }
                        }
                    }
                    assert!((s - out[co * h * w + y * w + xx] as f64).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut alloc = Allocator::default();
        let conv = Conv::new(&mut alloc, 2, 2, 3);
        let mut p = vec![0.0; alloc.len];
        normal_init(&mut p, 0.5, &mut rng);
        let (h, w) = (4, 5);
        let mut x = vec![0.0; 2 * h * w];
        normal_init(&mut x, 1.0, &mut rng);
        let mut r = vec![0.0; 2 * h * w];
        normal_init(&mut r, 1.0, &mut rng);
        let loss = |p: &[f32], x: &[f32]| -> f64 {
            conv.forward(p, x, h, w).iter().zip(&r).map(|(a, b)| (a * b) as f64).sum()
        };
        let mut g = vec![0.0; p.len()];
        let dx = conv.backward(&p, &x, &r, h, w, &mut g);
        for (i, gi) in g.iter().enumerate() {
            let n = numeric_grad(&|q| loss(q, &x), &p, i, 1e-2);
            assert!((n - *gi as f64).abs() < 2e-3 * (1.0 + n.abs()), "param {i}: {n} vs {gi}");
        }
        for (i, di) in dx.iter().enumerate() {
            let n = numeric_grad(&|q| loss(&p, q), &x, i, 1e-2);
            assert!((n - *di as f64).abs() < 2e-3 * (1.0 + n.abs()), "input {i}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut alloc = Allocator::default();
        let lin = Linear::new(&mut alloc, 4, 3);
        let mut p = vec![0.0; alloc.len];
        normal_init(&mut p, 0.5, &mut rng);
        let x = [0.3f32, -1.0, 0.5, 2.0];
        let r = [1.0f32, -0.5, 0.25];
        let loss = |p: &[f32], x: &[f32]| -> f64 { lin.forward(p, x).iter().zip(&r).map(|(a, b)| (a * b) as f64).sum() };
        let mut g = vec![0.0; p.len()];
        let dx = lin.backward(&p, &x, &r, &mut g);
        for (i, gi) in g.iter().enumerate() {
            let n = numeric_grad(&|q| loss(q, &x), &p, i, 1e-2);
            assert!((n - *gi as f64).abs() < 1e-3);
        }
        for (i, di) in dx.iter().enumerate() {
            let n = numeric_grad(&|q| loss(&p, q), &x, i, 1e-2);
            assert!((n - *di as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let s = Shape { c: 1, h: 2, w: 4 };
        let x = [1.0, 5.0, 0.0, -1.0, 2.0, 3.0, -2.0, -3.0];
        let (y, arg) = maxpool2(&x, s);
        assert_eq!(y, vec![5.0, 0.0]);
        let dx = maxpool2_backward(&arg, &[1.0, 2.0], 8);
        assert_eq!(dx, vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn nan_propagates_through_relu_and_pool() {
        let y = relu(&[f32::NAN, -1.0, 2.0]);
        assert!(y[0].is_nan());
        assert_eq!(&y[1..], &[0.0, 2.0]);
        let (p, _) = maxpool2(&[1.0, f32::NAN, 0.0, 0.5], Shape { c: 1, h: 2, w: 2 });
        assert!(p[0].is_nan());
    }

    #[test]
    fn gap_roundtrip() {
        let s = Shape { c: 2, h: 1, w: 2 };
        assert_eq!(global_avg_pool(&[1.0, 3.0, -2.0, 2.0], s), vec![2.0, 0.0]);
        assert_eq!(global_avg_pool_backward(&[2.0, 4.0], s), vec![1.0, 1.0, 2.0, 2.0]);
    }
}
