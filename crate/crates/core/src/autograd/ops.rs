use super::Var;
use crate::parallel;
use crate::tensor::{self, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn dims2(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.ndim(), 2, "expected a 2-D tensor, got {:?}", t.shape());
    (t.dim(0), t.dim(1))
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.ndim(), 3, "expected a (C,H,W) tensor, got {:?}", t.shape());
    (t.dim(0), t.dim(1), t.dim(2))
}

/// (start, stride, len, count) describing the 1-D lines of a 2-D tensor along `axis`.
fn lines(r: usize, c: usize, axis: usize) -> (usize, usize, usize, usize) {
    match axis {
        1 => (c, 1, c, r),
        0 => (1, c, r, c),
        _ => panic!("axis must be 0 or 1"),
    }
}

impl<'g> Var<'g> {
    fn unary(self, value: Tensor, bw: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static) -> Var<'g> {
        self.graph.push(value, &[self], move |g, p, out| vec![Some(bw(g, p[0], out))])
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.push(v, &[self, other], |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.push(v, &[self, other], |g, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))])
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.graph.push(v, &[self, other], |g, p, _| {
            vec![Some(g.zip_map(p[1], |g, b| g * b)), Some(g.zip_map(p[0], |g, a| g * a))]
        })
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().zip_map(&other.value(), |a, b| a / b);
        self.graph.push(v, &[self, other], |g, p, _| {
            let ga = g.zip_map(p[1], |g, b| g / b);
            let mut gb = g.zip_map(p[0], |g, a| g * a);
            for (x, b) in gb.data_mut().iter_mut().zip(p[1].data()) {
                *x = -*x / (b * b);
            }
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x * c);
        self.unary(v, move |g, _, _| g.map(|x| x * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.unary(v, |g, _, _| g.clone())
    }

    pub fn exp(self) -> Var<'g> {
        let v = self.value().map(f64::exp);
        self.unary(v, |g, _, out| g.zip_map(out, |g, y| g * y))
    }

    pub fn ln(self) -> Var<'g> {
        let v = self.value().map(f64::ln);
        self.unary(v, |g, x, _| g.zip_map(x, |g, x| g / x))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().map(sigmoid);
        self.unary(v, |g, _, out| g.zip_map(out, |g, s| g * s * (1.0 - s)))
    }

    pub fn gelu(self) -> Var<'g> {
        let v = self.value().map(gelu);
        self.unary(v, |g, x, _| g.zip_map(x, |g, x| g * gelu_grad(x)))
    }

    pub fn softplus(self) -> Var<'g> {
        let v = self.value().map(softplus);
        self.unary(v, |g, x, _| g.zip_map(x, |g, x| g * sigmoid(x)))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = self.value().as_ref().clone().reshape(shape);
        self.unary(v, |g, x, _| g.clone().reshape(x.shape()))
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, |g, x, _| Tensor::full(x.shape(), g.item()))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum of a 2-D tensor along `axis` (0: over rows → `(C)`, 1: over columns → `(R)`).
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let (r, c) = dims2(&x);
        let (step, stride, len, count) = lines(r, c, axis);
        let d = x.data();
        let v: Vec<f64> = (0..count).map(|l| (0..len).map(|i| d[l * step + i * stride]).sum()).collect();
        self.unary(Tensor::new(&[count], v), move |g, _, _| {
            let mut out = vec![0.0; r * c];
            for l in 0..count {
                for i in 0..len {
                    out[l * step + i * stride] = g.data()[l];
                }
            }
            Tensor::new(&[r, c], out)
        })
    }

    pub fn mean_axis(self, axis: usize) -> Var<'g> {
        let s = self.shape();
        let n = if axis == 0 { s[0] } else { s[1] };
        self.sum_axis(axis).scale(1.0 / n as f64)
    }

    /// Maximum of a 2-D tensor along `axis`; the gradient flows to the first maximiser.
    pub fn max_axis(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let (r, c) = dims2(&x);
        let (step, stride, len, count) = lines(r, c, axis);
        let d = x.data();
        let mut arg = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for l in 0..count {
            let mut best = l * step;
            for i in 1..len {
                let idx = l * step + i * stride;
                if d[idx] > d[best] {
                    best = idx;
                }
            }
            arg.push(best);
            v.push(d[best]);
        }
        self.unary(Tensor::new(&[count], v), move |g, _, _| {
            let mut out = vec![0.0; r * c];
            for (l, &a) in arg.iter().enumerate() {
                out[a] += g.data()[l];
            }
            Tensor::new(&[r, c], out)
        })
    }

    pub fn softmax(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let (r, c) = dims2(&x);
        let (step, stride, len, count) = lines(r, c, axis);
        let d = x.data();
        let mut out = vec![0.0; r * c];
        for l in 0..count {
            let idx = |i: usize| l * step + i * stride;
            let m = (0..len).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in 0..len {
                let e = (d[idx(i)] - m).exp();
                out[idx(i)] = e;
                s += e;
            }
            for i in 0..len {
                out[idx(i)] /= s;
            }
        }
        self.unary(Tensor::new(&[r, c], out), move |g, _, y| {
            let (gd, yd) = (g.data(), y.data());
            let mut dx = vec![0.0; r * c];
            for l in 0..count {
                let idx = |i: usize| l * step + i * stride;
                let dot: f64 = (0..len).map(|i| gd[idx(i)] * yd[idx(i)]).sum();
                for i in 0..len {
                    dx[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
                }
            }
            Tensor::new(&[r, c], dx)
        })
    }

    pub fn log_softmax(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let (r, c) = dims2(&x);
        let (step, stride, len, count) = lines(r, c, axis);
        let d = x.data();
        let mut out = vec![0.0; r * c];
        for l in 0..count {
            let idx = |i: usize| l * step + i * stride;
            let m = (0..len).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..len).map(|i| (d[idx(i)] - m).exp()).sum::<f64>().ln();
            for i in 0..len {
                out[idx(i)] = d[idx(i)] - lse;
            }
        }
        self.unary(Tensor::new(&[r, c], out), move |g, _, y| {
            let (gd, yd) = (g.data(), y.data());
            let mut dx = vec![0.0; r * c];
            for l in 0..count {
                let idx = |i: usize| l * step + i * stride;
                let gs: f64 = (0..len).map(|i| gd[idx(i)]).sum();
                for i in 0..len {
                    dx[idx(i)] = gd[idx(i)] - yd[idx(i)].exp() * gs;
                }
            }
            Tensor::new(&[r, c], dx)
        })
    }

    /// `(R,C) + v` with `v` of length `C` added to every row.
    pub fn add_row(self, v: Var<'g>) -> Var<'g> {
        self.bcast(v, 1, false)
    }

    /// `(R,C) + v` with `v` of length `R` added to every column.
    pub fn add_col(self, v: Var<'g>) -> Var<'g> {
        self.bcast(v, 0, false)
    }

    /// `(R,C) ⊙ v` with `v` of length `C` scaling every row.
    pub fn mul_row(self, v: Var<'g>) -> Var<'g> {
        self.bcast(v, 1, true)
    }

    /// `(R,C) ⊙ v` with `v` of length `R` scaling every column.
    pub fn mul_col(self, v: Var<'g>) -> Var<'g> {
        self.bcast(v, 0, true)
    }

    /// `along == 1`: `v` indexed by column; `along == 0`: `v` indexed by row.
    fn bcast(self, v: Var<'g>, along: usize, multiply: bool) -> Var<'g> {
        let x = self.value();
        let b = v.value();
        let (r, c) = dims2(&x);
        let vi = move |i: usize| if along == 1 { i % c } else { i / c };
        assert_eq!(b.len(), if along == 1 { c } else { r }, "broadcast length mismatch");
        let out: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| if multiply { a * b.data()[vi(i)] } else { a + b.data()[vi(i)] })
            .collect();
        let n = b.len();
        self.graph.push(Tensor::new(&[r, c], out), &[self, v], move |g, p, _| {
            let mut gv = vec![0.0; n];
            let gx = if multiply {
                let mut gx = g.clone();
                for (i, x) in gx.data_mut().iter_mut().enumerate() {
                    *x *= p[1].data()[vi(i)];
                }
                for (i, (&gg, &a)) in g.data().iter().zip(p[0].data()).enumerate() {
                    gv[vi(i)] += gg * a;
                }
                gx
            } else {
                for (i, &gg) in g.data().iter().enumerate() {
                    gv[vi(i)] += gg;
                }
                g.clone()
            };
            vec![Some(gx), Some(Tensor::new(&[n], gv))]
        })
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2(&a);
        let (k2, n) = dims2(&b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let v = tensor::matmul(a.data(), b.data(), m, k, n);
        self.graph.push(Tensor::new(&[m, n], v), &[self, other], move |g, p, _| {
            let ga = tensor::matmul_nt(g.data(), p[1].data(), m, n, k);
            let gb = tensor::matmul_tn(p[0].data(), g.data(), m, k, n);
            vec![Some(Tensor::new(&[m, k], ga)), Some(Tensor::new(&[k, n], gb))]
        })
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2(&a);
        let (n, k2) = dims2(&b);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let v = tensor::matmul_nt(a.data(), b.data(), m, k, n);
        self.graph.push(Tensor::new(&[m, n], v), &[self, other], move |g, p, _| {
            let ga = tensor::matmul(g.data(), p[1].data(), m, n, k);
            let gb = tensor::matmul_tn(g.data(), p[0].data(), m, n, k);
            vec![Some(Tensor::new(&[m, k], ga)), Some(Tensor::new(&[n, k], gb))]
        })
    }

    pub fn transpose(self) -> Var<'g> {
        let v = self.value().transpose();
        self.unary(v, |g, _, _| g.transpose())
    }

    /// Affine map of token rows: `x (N,in) · wᵀ + b` with `w (out,in)`.
    pub fn linear(self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let y = self.matmul_nt(w);
        match b {
            Some(b) => y.add_row(b),
            None => y,
        }
    }

    /// Normalises each row of `(N,D)` and applies the per-feature affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let (n, d) = dims2(&x);
        let (gm, bt) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &x.data()[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        self.graph.push(Tensor::new(&[n, d], out), &[self, gamma, beta], move |g, p, _| {
            let gd = g.data();
            let gmv = p[1].data();
            let mut dx = vec![0.0; n * d];
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for i in 0..n {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    let gh = gd[i * d + j] * gmv[j];
                    m1 += gh;
                    m2 += gh * xhat[i * d + j];
                    dg[j] += gd[i * d + j] * xhat[i * d + j];
                    db[j] += gd[i * d + j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    let gh = gd[i * d + j] * gmv[j];
                    dx[i * d + j] = inv_std[i] * (gh - m1 - xhat[i * d + j] * m2);
                }
            }
            vec![Some(Tensor::new(&[n, d], dx)), Some(Tensor::new(&[d], dg)), Some(Tensor::new(&[d], db))]
        })
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'g> {
        let x = self.value();
        let (r, c) = dims2(&x);
        assert!(start < end && end <= c);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x.data()[i * c + start..i * c + end]);
        }
        self.unary(Tensor::new(&[r, w], out), move |g, _, _| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            Tensor::new(&[r, c], dx)
        })
    }

    /// Leading-dimension slice `start..end`.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let inner: usize = shape[1..].iter().product();
        assert!(start < end && end <= shape[0]);
        let mut oshape = shape.clone();
        oshape[0] = end - start;
        let v = Tensor::new(&oshape, x.data()[start * inner..end * inner].to_vec());
        self.unary(v, move |g, _, _| {
            let mut dx = Tensor::zeros(&shape);
            dx.data_mut()[start * inner..end * inner].copy_from_slice(g.data());
            dx
        })
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let r = vals[0].dim(0);
        let widths: Vec<usize> = vals.iter().map(|v| dims2(v).1).collect();
        assert!(vals.iter().all(|v| v.dim(0) == r), "concat_cols row mismatch");
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        parts[0].graph.push(Tensor::new(&[r, c], out), parts, move |g, _, _| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut d = Vec::with_capacity(r * w);
                    for i in 0..r {
                        d.extend_from_slice(&g.data()[i * c + off..i * c + off + w]);
                    }
                    off += w;
                    Some(Tensor::new(&[r, w], d))
                })
                .collect()
        })
    }

    /// Concatenation along the leading dimension.
    pub fn concat_rows(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let tail = vals[0].shape()[1..].to_vec();
        assert!(vals.iter().all(|v| v.shape()[1..] == tail[..]), "concat_rows trailing shape mismatch");
        let lens: Vec<usize> = vals.iter().map(|v| v.len()).collect();
        let rows: usize = vals.iter().map(|v| v.dim(0)).sum();
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let mut out = Vec::with_capacity(lens.iter().sum());
        for v in &vals {
            out.extend_from_slice(v.data());
        }
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        parts[0].graph.push(Tensor::new(&shape, out), parts, move |g, _, _| {
            let mut off = 0;
            shapes
                .iter()
                .zip(&lens)
                .map(|(s, &n)| {
                    let t = Tensor::new(s, g.data()[off..off + n].to_vec());
                    off += n;
                    Some(t)
                })
                .collect()
        })
    }

    /// 2-D convolution of `(Cin,H,W)` with weights `(Cout,Cin,kh,kw)`, zero padding `pad`.
    pub fn conv2d(self, w: Var<'g>, b: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let wt = w.value();
        let (cin, h, wd) = dims3(&x);
        assert_eq!(wt.ndim(), 4);
        let (cout, cin2, kh, kw) = (wt.dim(0), wt.dim(1), wt.dim(2), wt.dim(3));
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        let geo = ConvGeom { cin, h, w: wd, kh, kw, stride, pad };
        let (ho, wo) = geo.out_hw();
        let cols = geo.im2col(x.data());
        let kk = cin * kh * kw;
        let y = tensor::matmul(wt.data(), &cols, cout, kk, ho * wo);
        let out = self.graph.push(Tensor::new(&[cout, ho, wo], y), &[self, w], move |g, p, _| {
            let n = ho * wo;
            let gw = tensor::matmul_nt(g.data(), &geo.im2col(p[0].data()), cout, n, kk);
            let gcols = tensor::matmul_tn(p[1].data(), g.data(), cout, kk, n);
            vec![Some(Tensor::new(&[cin, h, wd], geo.col2im(&gcols))), Some(Tensor::new(&[cout, cin, kh, kw], gw))]
        });
        match b {
            Some(b) => out.reshape(&[cout, ho * wo]).add_col(b).reshape(&[cout, ho, wo]),
            None => out,
        }
    }

    /// Per-channel (depthwise) convolution with weights `(C,1,k,k)`, stride 1, "same" padding.
    pub fn depthwise_conv2d(self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let x = self.value();
        let wt = w.value();
        let (c, h, wd) = dims3(&x);
        let k = wt.dim(2);
        assert_eq!(wt.shape(), &[c, 1, k, k], "depthwise weight shape");
        let pad = (k / 2) as isize;
        let taps = move |xd: &[f64], wv: &[f64], ch: usize, out: &mut [f64]| {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = 0.0;
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - pad;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            s += wv[ch * k * k + ky * k + kx] * xd[ch * h * wd + iy as usize * wd + ix as usize];
                        }
                    }
                    out[y * wd + xx] = s;
                }
            }
        };
        let mut y = vec![0.0; c * h * wd];
        let (xd, wv) = (x.data(), wt.data());
        parallel::for_each_chunk(&mut y, h * wd, h * wd * k * k, |ch, o| taps(xd, wv, ch, o));
        let out = self.graph.push(Tensor::new(&[c, h, wd], y), &[self, w], move |g, p, _| {
            let (xd, wv, gd) = (p[0].data(), p[1].data(), g.data());
            let mut gx = vec![0.0; c * h * wd];
            let mut gw = vec![0.0; c * k * k];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..wd {
                        let gv = gd[ch * h * wd + y * wd + xx];
                        for ky in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = xx as isize + kx as isize - pad;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ch * h * wd + iy as usize * wd + ix as usize;
                                let wi = ch * k * k + ky * k + kx;
                                gx[xi] += gv * wv[wi];
                                gw[wi] += gv * xd[xi];
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&[c, h, wd], gx)), Some(Tensor::new(&[c, 1, k, k], gw))]
        });
        match b {
            Some(b) => out.reshape(&[c, h * wd]).add_col(b).reshape(&[c, h, wd]),
            None => out,
        }
    }

    /// Stride-2, kernel-2 transposed convolution: `(Cin,H,W)` → `(Cout,2H,2W)`, weights `(Cin,Cout,2,2)`.
    pub fn conv_transpose2x2(self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let x = self.value();
        let wt = w.value();
        let (cin, h, wd) = dims3(&x);
        assert_eq!(wt.ndim(), 4);
        let cout = wt.dim(1);
        assert_eq!(wt.shape(), &[cin, cout, 2, 2], "transposed conv weight shape");
        // Per kernel tap (dy,dx): out_tap (Cout, HW) = W_tapᵀ (Cout,Cin) · x (Cin,HW).
        let tap_w = move |wv: &[f64], t: usize| -> Vec<f64> {
            let mut m = vec![0.0; cout * cin];
            for co in 0..cout {
                for ci in 0..cin {
                    m[co * cin + ci] = wv[(ci * cout + co) * 4 + t];
                }
            }
            m
        };
        let n = h * wd;
        let mut y = vec![0.0; cout * 4 * n];
        for t in 0..4 {
            let r = tensor::matmul(&tap_w(wt.data(), t), x.data(), cout, cin, n);
            let (dy, dx) = (t / 2, t % 2);
            for co in 0..cout {
                for yy in 0..h {
                    for xx in 0..wd {
                        y[co * 4 * n + (2 * yy + dy) * 2 * wd + 2 * xx + dx] = r[co * n + yy * wd + xx];
                    }
                }
            }
        }
        let out = self.graph.push(Tensor::new(&[cout, 2 * h, 2 * wd], y), &[self, w], move |g, p, _| {
            let mut gx = vec![0.0; cin * n];
            let mut gw = vec![0.0; cin * cout * 4];
            for t in 0..4 {
                let (dy, dx) = (t / 2, t % 2);
                let mut gt = vec![0.0; cout * n];
                for co in 0..cout {
                    for yy in 0..h {
                        for xx in 0..wd {
                            gt[co * n + yy * wd + xx] = g.data()[co * 4 * n + (2 * yy + dy) * 2 * wd + 2 * xx + dx];
                        }
                    }
                }
                let wtap = tap_w(p[1].data(), t);
                let gxt = tensor::matmul_tn(&wtap, &gt, cout, cin, n);
                for (a, b) in gx.iter_mut().zip(gxt) {
                    *a += b;
                }
                let gwt = tensor::matmul_nt(&gt, p[0].data(), cout, n, cin);
                for co in 0..cout {
                    for ci in 0..cin {
                        gw[(ci * cout + co) * 4 + t] += gwt[co * cin + ci];
                    }
                }
            }
            vec![Some(Tensor::new(&[cin, h, wd], gx)), Some(Tensor::new(&[cin, cout, 2, 2], gw))]
        });
        match b {
            Some(b) => out.reshape(&[cout, 4 * n]).add_col(b).reshape(&[cout, 2 * h, 2 * wd]),
            None => out,
        }
    }

    /// Bilinear resampling of `(C,H,W)` to `(C,oh,ow)` (half-pixel centres, edge clamped).
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = dims3(&x);
        if (h, w) == (oh, ow) {
            return self;
        }
        let ry = crate::resample::axis_taps(h, oh);
        let rx = crate::resample::axis_taps(w, ow);
        let y = crate::resample::apply(x.data(), c, h, w, &ry, &rx);
        self.unary(Tensor::new(&[c, oh, ow], y), move |g, _, _| {
            Tensor::new(&[c, h, w], crate::resample::apply_adjoint(g.data(), c, h, w, &ry, &rx))
        })
    }

    /// Fourier high-pass filter of an `(H,W)` grid; self-adjoint, so the
    /// backward pass applies the same filter to the incoming gradient.
    pub fn hf_filter(self, mask_ratio: f64) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2);
        let (h, w) = (x.dim(0), x.dim(1));
        let v = crate::hf_extract::highpass(x.data(), h, w, mask_ratio);
        self.unary(Tensor::new(&[h, w], v), move |g, _, _| {
            Tensor::new(&[h, w], crate::hf_extract::highpass(g.data(), h, w, mask_ratio))
        })
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.kh) / self.stride + 1, (self.w + 2 * self.pad - self.kw) / self.stride + 1)
    }

    fn src(&self, oy: usize, ky: usize, limit: usize) -> Option<usize> {
        let i = (oy * self.stride + ky) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }

    /// `(Cin*kh*kw, Ho*Wo)` patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo) = self.out_hw();
        let n = ho * wo;
        let mut cols = vec![0.0; self.cin * self.kh * self.kw * n];
        let g = *self;
        parallel::for_each_chunk(&mut cols, n, n, |row, out| {
            let ci = row / (g.kh * g.kw);
            let ky = (row / g.kw) % g.kh;
            let kx = row % g.kw;
            for oy in 0..ho {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for ox in 0..wo {
                    if let Some(ix) = g.src(ox, kx, g.w) {
                        out[oy * wo + ox] = x[ci * g.h * g.w + iy * g.w + ix];
                    }
                }
            }
        });
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (ho, wo) = self.out_hw();
        let n = ho * wo;
        let mut x = vec![0.0; self.cin * self.h * self.w];
        let g = *self;
        parallel::for_each_chunk(&mut x, g.h * g.w, n * g.kh * g.kw, |ci, img| {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (ci * g.kh + ky) * g.kw + kx;
                    for oy in 0..ho {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for ox in 0..wo {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                img[iy * g.w + ix] += cols[row * n + oy * wo + ox];
                            }
                        }
                    }
                }
            }
        });
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_op;
    use crate::autograd::Graph;

    fn t(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin())
    }

    #[test]
    fn elementwise_and_reductions_match_finite_differences() {
        check_op(&[t(&[3, 4], 0.7), t(&[3, 4], 1.3)], |v| v[0].mul(v[1]).add(v[0].div(v[1].exp())).sum());
        check_op(&[t(&[3, 4], 0.7)], |v| v[0].gelu().sigmoid().softplus().ln().sum());
        check_op(&[t(&[3, 4], 0.4)], |v| v[0].max_axis(0).sum().add(v[0].max_axis(1).mean()));
        check_op(&[t(&[3, 4], 0.4)], |v| v[0].sum_axis(0).mul(v[0].mean_axis(0)).sum());
    }

    #[test]
    fn softmax_family_matches_finite_differences() {
        let w = t(&[3, 5], 2.1);
        check_op(&[t(&[3, 5], 0.9)], move |v| {
            let c = v[0].graph().constant(w.clone());
            v[0].softmax(0).mul(c).sum().add(v[0].log_softmax(1).mul(c).sum())
        });
    }

    #[test]
    fn linear_algebra_ops_match_finite_differences() {
        check_op(&[t(&[3, 4], 0.3), t(&[4, 2], 0.8)], |v| v[0].matmul(v[1]).exp().sum());
        check_op(&[t(&[3, 4], 0.3), t(&[5, 4], 0.8), t(&[5], 1.7)], |v| {
            v[0].linear(v[1], Some(v[2])).gelu().sum()
        });
        check_op(&[t(&[4, 6], 0.3), t(&[6], 0.5), t(&[6], 1.1)], |v| {
            let w = v[0].graph().constant(t(&[4, 6], 3.3));
            v[0].layer_norm(v[1], v[2], 1e-5).mul(w).sum()
        });
        check_op(&[t(&[3, 4], 0.3), t(&[4], 0.9), t(&[3], 0.2)], |v| {
            v[0].mul_row(v[1]).add_col(v[2]).mul_col(v[2]).add_row(v[1]).transpose().exp().sum()
        });
    }

    #[test]
    fn slicing_and_concat_match_finite_differences() {
        check_op(&[t(&[3, 4], 0.3), t(&[3, 2], 0.9)], |v| {
            let a = v[0].slice_cols(1, 3);
            Var::concat_cols(&[a, v[1], v[0]]).exp().sum()
        });
        check_op(&[t(&[2, 3, 2], 0.3), t(&[1, 3, 2], 0.9)], |v| {
            Var::concat_rows(&[v[0], v[1]]).slice_rows(1, 3).exp().sum()
        });
    }

    #[test]
    fn convolutions_match_finite_differences() {
        check_op(&[t(&[2, 5, 6], 0.3), t(&[3, 2, 3, 3], 0.7), t(&[3], 0.2)], |v| {
            v[0].conv2d(v[1], Some(v[2]), 1, 1).gelu().sum()
        });
        check_op(&[t(&[2, 6, 6], 0.3), t(&[3, 2, 2, 2], 0.7)], |v| v[0].conv2d(v[1], None, 2, 0).exp().sum());
        check_op(&[t(&[2, 4, 5], 0.3), t(&[2, 1, 3, 3], 0.7), t(&[2], 0.5)], |v| {
            v[0].depthwise_conv2d(v[1], Some(v[2])).exp().sum()
        });
        check_op(&[t(&[3, 2, 3], 0.3), t(&[3, 2, 2, 2], 0.7), t(&[2], 0.5)], |v| {
            v[0].conv_transpose2x2(v[1], Some(v[2])).exp().sum()
        });
        check_op(&[t(&[2, 3, 5], 0.3)], |v| {
            let w = v[0].graph().constant(t(&[2, 7, 4], 1.9));
            v[0].resize_bilinear(7, 4).mul(w).sum()
        });
    }

    #[test]
    fn conv_transpose_places_taps_on_output_grid() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 1], vec![2.0]));
        let w = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = x.conv_transpose2x2(w, None).value();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv2d_same_padding_keeps_size() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 9, 7], 0.1));
        let w = g.constant(t(&[1, 2, 7, 7], 0.2));
        assert_eq!(x.conv2d(w, None, 1, 3).shape(), vec![1, 9, 7]);
    }
}
