use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Grads, ParamId, ParamStore};
use crate::real::{matmul, Real};

fn randn<T: Real, R: Rng>(n: usize, std: f64, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect()
}

/// 2-D convolution over `[batch, cin, h, w]`, square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.push(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            randn(cout * fan_in, (2.0 / fan_in as f64).sqrt(), rng),
            true,
        );
        let b = store.push(format!("{name}.bias"), &[cout], vec![T::zero(); cout], true);
        Self {
            w,
            b,
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col<T: Real>(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let plane = ho * wo;
        for ci in 0..self.cin {
            let xc = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let plane = ho * wo;
        for ci in 0..self.cin {
            let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
        h: usize,
        w: usize,
    ) -> Vec<T> {
        let (ho, wo) = self.out_hw(h, w);
        let (plane, ckk) = (ho * wo, self.cin * self.k * self.k);
        let weight = store.get(self.w);
        let bias = store.get(self.b);
        let mut cols = vec![T::zero(); ckk * plane];
        let mut y = vec![T::zero(); batch * self.cout * plane];
        for n in 0..batch {
            let xs = &x[n * self.cin * h * w..(n + 1) * self.cin * h * w];
            self.im2col(xs, h, w, ho, wo, &mut cols);
            let ys = &mut y[n * self.cout * plane..(n + 1) * self.cout * plane];
            for (co, row) in ys.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[co]);
            }
            matmul(
                self.cout,
                ckk,
                plane,
                weight,
                false,
                &cols,
                false,
                T::one(),
                ys,
            );
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &[T],
        batch: usize,
        h: usize,
        w: usize,
        dy: &[T],
    ) -> Vec<T> {
        let (ho, wo) = self.out_hw(h, w);
        let (plane, ckk) = (ho * wo, self.cin * self.k * self.k);
        let weight = store.get(self.w);
        let mut cols = vec![T::zero(); ckk * plane];
        let mut dcols = vec![T::zero(); ckk * plane];
        let mut dx = vec![T::zero(); x.len()];
        for n in 0..batch {
            let xs = &x[n * self.cin * h * w..(n + 1) * self.cin * h * w];
            let dys = &dy[n * self.cout * plane..(n + 1) * self.cout * plane];
            self.im2col(xs, h, w, ho, wo, &mut cols);
            matmul(
                self.cout,
                plane,
                ckk,
                dys,
                false,
                &cols,
                true,
                T::one(),
                grads.get_mut(self.w),
            );
            let db = grads.get_mut(self.b);
            for (co, row) in dys.chunks(plane).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
            matmul(
                ckk,
                self.cout,
                plane,
                weight,
                true,
                dys,
                false,
                T::zero(),
                &mut dcols,
            );
            let dxs = &mut dx[n * self.cin * h * w..(n + 1) * self.cin * h * w];
            self.col2im(&dcols, h, w, ho, wo, dxs);
        }
        dx
    }
}

/// Transposed convolution with a 2×2 kernel and stride 2 (exact ×2 upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl ConvTranspose2x2 {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.push(
            format!("{name}.weight"),
            &[cin, cout, 2, 2],
            randn(cin * cout * 4, (2.0 / cin as f64).sqrt(), rng),
            true,
        );
        let b = store.push(format!("{name}.bias"), &[cout], vec![T::zero(); cout], true);
        Self { w, b, cin, cout }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
        h: usize,
        w: usize,
    ) -> Vec<T> {
        let hw = h * w;
        let c4 = self.cout * 4;
        let weight = store.get(self.w);
        let bias = store.get(self.b);
        let mut tmp = vec![T::zero(); c4 * hw];
        let (ho, wo) = (2 * h, 2 * w);
        let mut y = vec![T::zero(); batch * self.cout * ho * wo];
        for n in 0..batch {
            let xs = &x[n * self.cin * hw..(n + 1) * self.cin * hw];
            matmul(
                c4,
                self.cin,
                hw,
                weight,
                true,
                xs,
                false,
                T::zero(),
                &mut tmp,
            );
            let ys = &mut y[n * self.cout * ho * wo..(n + 1) * self.cout * ho * wo];
            for co in 0..self.cout {
                for a in 0..2 {
                    for b in 0..2 {
                        let src = &tmp[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                        for i in 0..h {
                            for j in 0..w {
                                ys[co * ho * wo + (2 * i + a) * wo + 2 * j + b] =
                                    src[i * w + j] + bias[co];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &[T],
        batch: usize,
        h: usize,
        w: usize,
        dy: &[T],
    ) -> Vec<T> {
        let hw = h * w;
        let c4 = self.cout * 4;
        let (ho, wo) = (2 * h, 2 * w);
        let weight = store.get(self.w);
        let mut dtmp = vec![T::zero(); c4 * hw];
        let mut dx = vec![T::zero(); x.len()];
        for n in 0..batch {
            let dys = &dy[n * self.cout * ho * wo..(n + 1) * self.cout * ho * wo];
            for co in 0..self.cout {
                let mut bsum = T::zero();
                for a in 0..2 {
                    for b in 0..2 {
                        let dst =
                            &mut dtmp[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                        for i in 0..h {
                            for j in 0..w {
                                let g = dys[co * ho * wo + (2 * i + a) * wo + 2 * j + b];
                                dst[i * w + j] = g;
                                bsum += g;
                            }
                        }
                    }
                }
                grads.get_mut(self.b)[co] += bsum;
            }
            let xs = &x[n * self.cin * hw..(n + 1) * self.cin * hw];
            matmul(
                self.cin,
                hw,
                c4,
                xs,
                false,
                &dtmp,
                true,
                T::one(),
                grads.get_mut(self.w),
            );
            let dxs = &mut dx[n * self.cin * hw..(n + 1) * self.cin * hw];
            matmul(
                self.cin,
                c4,
                hw,
                weight,
                false,
                &dtmp,
                false,
                T::zero(),
                dxs,
            );
        }
        dx
    }
}

/// Dilated 1-D convolution over `[batch, cin, t]` with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel");
        let fan_in = cin * k;
        let w = store.push(
            format!("{name}.weight"),
            &[cout, cin, k],
            randn(cout * fan_in, (2.0 / fan_in as f64).sqrt(), rng),
            true,
        );
        let b = store.push(format!("{name}.bias"), &[cout], vec![T::zero(); cout], true);
        Self {
            w,
            b,
            cin,
            cout,
            k,
            dilation,
        }
    }

    fn pad(&self) -> usize {
        self.dilation * (self.k - 1) / 2
    }

    fn im2col<T: Real>(&self, x: &[T], t: usize, cols: &mut [T]) {
        let pad = self.pad() as isize;
        for ci in 0..self.cin {
            let xc = &x[ci * t..(ci + 1) * t];
            for kk in 0..self.k {
                let row = &mut cols[(ci * self.k + kk) * t..(ci * self.k + kk + 1) * t];
                let shift = (kk * self.dilation) as isize - pad;
                for (o, v) in row.iter_mut().enumerate() {
                    let i = o as isize + shift;
                    *v = if i < 0 || i >= t as isize {
                        T::zero()
                    } else {
                        xc[i as usize]
                    };
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], t: usize, dx: &mut [T]) {
        let pad = self.pad() as isize;
        for ci in 0..self.cin {
            let dxc = &mut dx[ci * t..(ci + 1) * t];
            for kk in 0..self.k {
                let row = &cols[(ci * self.k + kk) * t..(ci * self.k + kk + 1) * t];
                let shift = (kk * self.dilation) as isize - pad;
                for (o, v) in row.iter().enumerate() {
                    let i = o as isize + shift;
                    if i >= 0 && i < t as isize {
                        dxc[i as usize] += *v;
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
        t: usize,
    ) -> Vec<T> {
        let ck = self.cin * self.k;
        let weight = store.get(self.w);
        let bias = store.get(self.b);
        let mut cols = vec![T::zero(); ck * t];
        let mut y = vec![T::zero(); batch * self.cout * t];
        for n in 0..batch {
            self.im2col(&x[n * self.cin * t..(n + 1) * self.cin * t], t, &mut cols);
            let ys = &mut y[n * self.cout * t..(n + 1) * self.cout * t];
            for (co, row) in ys.chunks_mut(t).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[co]);
            }
            matmul(self.cout, ck, t, weight, false, &cols, false, T::one(), ys);
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &[T],
        batch: usize,
        t: usize,
        dy: &[T],
    ) -> Vec<T> {
        let ck = self.cin * self.k;
        let weight = store.get(self.w);
        let mut cols = vec![T::zero(); ck * t];
        let mut dcols = vec![T::zero(); ck * t];
        let mut dx = vec![T::zero(); x.len()];
        for n in 0..batch {
            let dys = &dy[n * self.cout * t..(n + 1) * self.cout * t];
            self.im2col(&x[n * self.cin * t..(n + 1) * self.cin * t], t, &mut cols);
            matmul(
                self.cout,
                t,
                ck,
                dys,
                false,
                &cols,
                true,
                T::one(),
                grads.get_mut(self.w),
            );
            let db = grads.get_mut(self.b);
            for (co, row) in dys.chunks(t).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
            matmul(
                ck,
                self.cout,
                t,
                weight,
                true,
                dys,
                false,
                T::zero(),
                &mut dcols,
            );
            self.col2im(&dcols, t, &mut dx[n * self.cin * t..(n + 1) * self.cin * t]);
        }
        dx
    }
}

/// Fully connected layer over `[batch, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.push(
            format!("{name}.weight"),
            &[output, input],
            randn(input * output, (1.0 / input as f64).sqrt(), rng),
            true,
        );
        let b = store.push(
            format!("{name}.bias"),
            &[output],
            vec![T::zero(); output],
            true,
        );
        Self {
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &[T], batch: usize) -> Vec<T> {
        let bias = store.get(self.b);
        let mut y: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
        matmul(
            batch,
            self.input,
            self.output,
            x,
            false,
            store.get(self.w),
            true,
            T::one(),
            &mut y,
        );
        y
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &[T],
        batch: usize,
        dy: &[T],
    ) -> Vec<T> {
        matmul(
            self.output,
            batch,
            self.input,
            dy,
            true,
            x,
            false,
            T::one(),
            grads.get_mut(self.w),
        );
        let db = grads.get_mut(self.b);
        for row in dy.chunks(self.output) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += *g;
            }
        }
        let mut dx = vec![T::zero(); batch * self.input];
        matmul(
            batch,
            self.output,
            self.input,
            dy,
            false,
            store.get(self.w),
            false,
            T::zero(),
            &mut dx,
        );
        dx
    }
}

/// Batch normalization over `[batch, c, spatial]`, statistics per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub c: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch: usize,
    spatial: usize,
}

/// Batch statistics to fold into the running estimates.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
pub enum BnState<T> {
    Train(BnCache<T>, BnStats<T>),
    /// inference mode keeps the input
    Eval(Vec<T>),
}

impl<T> BnState<T> {
    pub fn stats(&self) -> Option<&BnStats<T>> {
        match self {
            BnState::Train(_, s) => Some(s),
            BnState::Eval(_) => None,
        }
    }
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.push(format!("{name}.gamma"), &[c], vec![T::one(); c], true),
            beta: store.push(format!("{name}.beta"), &[c], vec![T::zero(); c], true),
            running_mean: store.push(
                format!("{name}.running_mean"),
                &[c],
                vec![T::zero(); c],
                false,
            ),
            running_var: store.push(
                format!("{name}.running_var"),
                &[c],
                vec![T::one(); c],
                false,
            ),
            c,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward_train<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
        spatial: usize,
    ) -> (Vec<T>, BnCache<T>, BnStats<T>) {
        let n = batch * spatial;
        let nt = T::from_usize(n);
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut mean = vec![T::zero(); self.c];
        let mut var = vec![T::zero(); self.c];
        for b in 0..batch {
            for c in 0..self.c {
                let row = &x[(b * self.c + c) * spatial..(b * self.c + c + 1) * spatial];
                mean[c] += row.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= nt);
        for b in 0..batch {
            for c in 0..self.c {
                let row = &x[(b * self.c + c) * spatial..(b * self.c + c + 1) * spatial];
                var[c] += row
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= nt);
        let eps = T::lit(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..self.c {
                let off = (b * self.c + c) * spatial;
                for i in off..off + spatial {
                    xhat[i] = (x[i] - mean[c]) * inv_std[c];
                    y[i] = gamma[c] * xhat[i] + beta[c];
                }
            }
        }
        let unbias = if n > 1 {
            nt / T::from_usize(n - 1)
        } else {
            T::one()
        };
        let stats = BnStats {
            mean,
            var: var.iter().map(|&v| v * unbias).collect(),
        };
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch,
                spatial,
            },
            stats,
        )
    }

    pub fn forward_eval<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
        spatial: usize,
    ) -> Vec<T> {
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mean = store.get(self.running_mean);
        let var = store.get(self.running_var);
        let eps = T::lit(self.eps);
        let mut y = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..self.c {
                let scale = gamma[c] / (var[c] + eps).sqrt();
                let off = (b * self.c + c) * spatial;
                for i in off..off + spatial {
                    y[i] = (x[i] - mean[c]) * scale + beta[c];
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &BnCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let (batch, spatial) = (cache.batch, cache.spatial);
        let nt = T::from_usize(batch * spatial);
        let gamma = store.get(self.gamma);
        let mut dgamma = vec![T::zero(); self.c];
        let mut dbeta = vec![T::zero(); self.c];
        for b in 0..batch {
            for c in 0..self.c {
                let off = (b * self.c + c) * spatial;
                for i in off..off + spatial {
                    dgamma[c] += dy[i] * cache.xhat[i];
                    dbeta[c] += dy[i];
                }
            }
        }
        let mut dx = vec![T::zero(); dy.len()];
        for b in 0..batch {
            for c in 0..self.c {
                let k = gamma[c] * cache.inv_std[c] / nt;
                let off = (b * self.c + c) * spatial;
                for i in off..off + spatial {
                    dx[i] = k * (nt * dy[i] - dbeta[c] - cache.xhat[i] * dgamma[c]);
                }
            }
        }
        for (g, d) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *g += *d;
        }
        for (g, d) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *g += *d;
        }
        dx
    }

    /// Train-mode or inference-mode forward, keeping what backward needs.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        batch: usize,
        spatial: usize,
        train: bool,
    ) -> (Vec<T>, BnState<T>) {
        if train {
            let (y, cache, stats) = self.forward_train(store, x, batch, spatial);
            (y, BnState::Train(cache, stats))
        } else {
            (
                self.forward_eval(store, x, batch, spatial),
                BnState::Eval(x.to_vec()),
            )
        }
    }

    pub fn backward_state<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        state: &BnState<T>,
        dy: &[T],
        batch: usize,
        spatial: usize,
    ) -> Vec<T> {
        match state {
            BnState::Train(cache, _) => self.backward(store, grads, cache, dy),
            BnState::Eval(x) => self.backward_eval(store, grads, x, batch, spatial, dy),
        }
    }

    /// Gradient through the inference-mode affine map.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_eval<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &[T],
        batch: usize,
        spatial: usize,
        dy: &[T],
    ) -> Vec<T> {
        let gamma = store.get(self.gamma);
        let mean = store.get(self.running_mean);
        let var = store.get(self.running_var);
        let eps = T::lit(self.eps);
        let mut dx = vec![T::zero(); dy.len()];
        let mut dgamma = vec![T::zero(); self.c];
        let mut dbeta = vec![T::zero(); self.c];
        for b in 0..batch {
            for c in 0..self.c {
                let inv = T::one() / (var[c] + eps).sqrt();
                let off = (b * self.c + c) * spatial;
                for i in off..off + spatial {
                    dx[i] = dy[i] * gamma[c] * inv;
                    dgamma[c] += dy[i] * (x[i] - mean[c]) * inv;
                    dbeta[c] += dy[i];
                }
            }
        }
        for (g, d) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *g += *d;
        }
        for (g, d) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *g += *d;
        }
        dx
    }

    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, stats: &BnStats<T>) {
        let m = T::lit(self.momentum);
        for (r, s) in store.get_mut(self.running_mean).iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * *s;
        }
        for (r, s) in store.get_mut(self.running_var).iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * *s;
        }
    }
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(y: &[T], dy: &[T]) -> Vec<T> {
    y.iter()
        .zip(dy)
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Zero-pad `[batch, c, h, w]` into `[batch, c, hp, wp]` at offset (top, left).
#[allow(clippy::too_many_arguments)]
pub fn pad2d<T: Real>(
    x: &[T],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    hp: usize,
    wp: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); batch * c * hp * wp];
    for bc in 0..batch * c {
        for i in 0..h {
            let src = &x[(bc * h + i) * w..(bc * h + i + 1) * w];
            let off = (bc * hp + top + i) * wp + left;
            y[off..off + w].copy_from_slice(src);
        }
    }
    y
}

/// Inverse of [`pad2d`]: extract the `h × w` window at (top, left).
#[allow(clippy::too_many_arguments)]
pub fn crop2d<T: Real>(
    x: &[T],
    batch: usize,
    c: usize,
    hp: usize,
    wp: usize,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * c * h * w);
    for bc in 0..batch * c {
        for i in 0..h {
            let off = (bc * hp + top + i) * wp + left;
            y.extend_from_slice(&x[off..off + w]);
        }
    }
    y
}

/// `[batch, ca, s] ++ [batch, cb, s] → [batch, ca + cb, s]`.
pub fn concat_channels<T: Real>(
    a: &[T],
    ca: usize,
    b: &[T],
    cb: usize,
    batch: usize,
    spatial: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * (ca + cb) * spatial);
    for n in 0..batch {
        y.extend_from_slice(&a[n * ca * spatial..(n + 1) * ca * spatial]);
        y.extend_from_slice(&b[n * cb * spatial..(n + 1) * cb * spatial]);
    }
    y
}

pub fn split_channels<T: Real>(
    x: &[T],
    ca: usize,
    cb: usize,
    batch: usize,
    spatial: usize,
) -> (Vec<T>, Vec<T>) {
    let mut a = Vec::with_capacity(batch * ca * spatial);
    let mut b = Vec::with_capacity(batch * cb * spatial);
    let stride = (ca + cb) * spatial;
    for n in 0..batch {
        a.extend_from_slice(&x[n * stride..n * stride + ca * spatial]);
        b.extend_from_slice(&x[n * stride + ca * spatial..(n + 1) * stride]);
    }
    (a, b)
}
