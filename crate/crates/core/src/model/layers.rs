//! Layer primitives with explicit forward/backward passes. Convolutions run
//! as im2col + GEMM; every layer caches what its backward pass needs and
//! accumulates parameter gradients until `zero_grad`.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Mutable view of one parameter array and its gradient accumulator.
pub struct ParamMut<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Read-only view of one parameter array.
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub value: &'a [f64],
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize, scale: f64) -> Vec<f64> {
    let bound = scale * (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Unfolds `x` (B, C, H, W) into a (C*k*k, B*H*W) matrix for a stride-1,
/// same-padded k x k convolution.
fn im2col(x: &Array4<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (bsz, c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, bsz * h * w));
    for b in 0..bsz {
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ci * k * k + ki * k + kj;
                    for u in 0..h {
                        let su = u + ki;
                        if su < pad || su >= h + pad {
                            continue;
                        }
                        let su = su - pad;
                        let col_base = b * h * w + u * w;
                        for v in 0..w {
                            let sv = v + kj;
                            if sv < pad || sv >= w + pad {
                                continue;
                            }
                            cols[[row, col_base + v]] = x[[b, ci, su, sv - pad]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-adds column gradients back to input layout.
fn col2im(gcols: &Array2<f64>, dim: (usize, usize, usize, usize), k: usize, pad: usize) -> Array4<f64> {
    let (bsz, c, h, w) = dim;
    let mut gx = Array4::<f64>::zeros(dim);
    for b in 0..bsz {
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ci * k * k + ki * k + kj;
                    for u in 0..h {
                        let su = u + ki;
                        if su < pad || su >= h + pad {
                            continue;
                        }
                        let su = su - pad;
                        let col_base = b * h * w + u * w;
                        for v in 0..w {
                            let sv = v + kj;
                            if sv < pad || sv >= w + pad {
                                continue;
                            }
                            gx[[b, ci, su, sv - pad]] += gcols[[row, col_base + v]];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Stride-1, same-padded convolution with an optional fused ReLU.
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub relu: bool,
    /// (cout, cin*k*k)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
    cache_x: Option<Array4<f64>>,
    cache_mask: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        Self::with_init_scale(name, cin, cout, k, relu, 1.0, rng)
    }

    /// `scale` shrinks the fan-in bound; the classifier head starts near
    /// zero so no class logit begins buried.
    pub fn with_init_scale(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        relu: bool,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = Array2::from_shape_vec((cout, fan_in), he_uniform(rng, fan_in, cout * fan_in, scale))
            .expect("weight shape");
        Conv2d {
            name: name.to_string(),
            cin,
            cout,
            k,
            relu,
            w,
            b: Array1::zeros(cout),
            gw: Array2::zeros((cout, fan_in)),
            gb: Array1::zeros(cout),
            cache_x: None,
            cache_mask: None,
        }
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, cin, h, w) = x.dim();
        debug_assert_eq!(cin, self.cin);
        let cols = im2col(x, self.k, self.pad());
        let mut out_mat = self.w.dot(&cols);
        for (co, mut row) in out_mat.rows_mut().into_iter().enumerate() {
            row += self.b[co];
        }
        // (cout, B*H*W) -> (B, cout, H, W)
        let mut y = Array4::<f64>::zeros((bsz, self.cout, h, w));
        for co in 0..self.cout {
            for b in 0..bsz {
                for u in 0..h {
                    for v in 0..w {
                        y[[b, co, u, v]] = out_mat[[co, b * h * w + u * w + v]];
                    }
                }
            }
        }
        if self.relu {
            let mask = y.mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
            y.zip_mut_with(&mask, |t, &m| *t *= m);
            self.cache_mask = Some(mask);
        }
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let x = self.cache_x.take().expect("forward before backward");
        let (bsz, _, h, w) = x.dim();
        let mut gy = gy.clone();
        if self.relu {
            let mask = self.cache_mask.take().expect("relu mask cached");
            gy.zip_mut_with(&mask, |t, &m| *t *= m);
        }
        // (B, cout, H, W) -> (cout, B*H*W)
        let mut gm = Array2::<f64>::zeros((self.cout, bsz * h * w));
        for co in 0..self.cout {
            for b in 0..bsz {
                for u in 0..h {
                    for v in 0..w {
                        gm[[co, b * h * w + u * w + v]] = gy[[b, co, u, v]];
                    }
                }
            }
        }
        let cols = im2col(&x, self.k, self.pad());
        self.gw += &gm.dot(&cols.t());
        self.gb += &gm.sum_axis(Axis(1));
        let gcols = self.w.t().dot(&gm);
        col2im(&gcols, x.dim(), self.k, self.pad())
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: &self.name,
                value: self.w.as_slice().expect("standard layout"),
            },
            ParamRef {
                name: &self.name,
                value: self.b.as_slice().expect("standard layout"),
            },
        ]
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                name: &self.name,
                value: self.w.as_slice_mut().expect("standard layout"),
                grad: self.gw.as_slice_mut().expect("standard layout"),
            },
            ParamMut {
                name: &self.name,
                value: self.b.as_slice_mut().expect("standard layout"),
                grad: self.gb.as_slice_mut().expect("standard layout"),
            },
        ]
    }
}

/// 2x2 max pooling, stride 2. Ties go to the first cell in scan order.
pub struct MaxPool2 {
    argmax: Option<Array4<u8>>,
    in_dim: (usize, usize, usize, usize),
}

impl MaxPool2 {
    pub fn new() -> Self {
        MaxPool2 {
            argmax: None,
            in_dim: (0, 0, 0, 0),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, c, h, w) = x.dim();
        debug_assert!(h % 2 == 0 && w % 2 == 0);
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Array4::<f64>::zeros((bsz, c, ho, wo));
        let mut arg = Array4::<u8>::zeros((bsz, c, ho, wo));
        for b in 0..bsz {
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut which = 0u8;
                        for (idx, (du, dv)) in
                            [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate()
                        {
                            let val = x[[b, ci, 2 * i + du, 2 * j + dv]];
                            if val > best {
                                best = val;
                                which = idx as u8;
                            }
                        }
                        y[[b, ci, i, j]] = best;
                        arg[[b, ci, i, j]] = which;
                    }
                }
            }
        }
        self.argmax = Some(arg);
        self.in_dim = x.dim();
        y
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let arg = self.argmax.take().expect("forward before backward");
        let (bsz, c, ho, wo) = gy.dim();
        let mut gx = Array4::<f64>::zeros(self.in_dim);
        for b in 0..bsz {
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let which = arg[[b, ci, i, j]] as usize;
                        let (du, dv) = [(0, 0), (0, 1), (1, 0), (1, 1)][which];
                        gx[[b, ci, 2 * i + du, 2 * j + dv]] += gy[[b, ci, i, j]];
                    }
                }
            }
        }
        gx
    }
}

/// 2x nearest-neighbor upsampling.
pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (bsz, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((bsz, c, 2 * h, 2 * w));
    for b in 0..bsz {
        for ci in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let t = x[[b, ci, u, v]];
                    y[[b, ci, 2 * u, 2 * v]] = t;
                    y[[b, ci, 2 * u, 2 * v + 1]] = t;
                    y[[b, ci, 2 * u + 1, 2 * v]] = t;
                    y[[b, ci, 2 * u + 1, 2 * v + 1]] = t;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &Array4<f64>) -> Array4<f64> {
    let (bsz, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f64>::zeros((bsz, c, h, w));
    for b in 0..bsz {
        for ci in 0..c {
            for u in 0..h {
                for v in 0..w {
                    gx[[b, ci, u, v]] = gy[[b, ci, 2 * u, 2 * v]]
                        + gy[[b, ci, 2 * u, 2 * v + 1]]
                        + gy[[b, ci, 2 * u + 1, 2 * v]]
                        + gy[[b, ci, 2 * u + 1, 2 * v + 1]];
                }
            }
        }
    }
    gx
}

/// Channel concatenation `[a | b]` and its split adjoint.
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (bsz, ca, h, w) = a.dim();
    let (_, cb, _, _) = b.dim();
    let mut y = Array4::<f64>::zeros((bsz, ca + cb, h, w));
    for bi in 0..bsz {
        for u in 0..h {
            for v in 0..w {
                for ci in 0..ca {
                    y[[bi, ci, u, v]] = a[[bi, ci, u, v]];
                }
                for ci in 0..cb {
                    y[[bi, ca + ci, u, v]] = b[[bi, ci, u, v]];
                }
            }
        }
    }
    y
}

pub fn split_channels(gy: &Array4<f64>, ca: usize) -> (Array4<f64>, Array4<f64>) {
    let (bsz, c, h, w) = gy.dim();
    let cb = c - ca;
    let mut ga = Array4::<f64>::zeros((bsz, ca, h, w));
    let mut gb = Array4::<f64>::zeros((bsz, cb, h, w));
    for bi in 0..bsz {
        for u in 0..h {
            for v in 0..w {
                for ci in 0..ca {
                    ga[[bi, ci, u, v]] = gy[[bi, ci, u, v]];
                }
                for ci in 0..cb {
                    gb[[bi, ci, u, v]] = gy[[bi, ca + ci, u, v]];
                }
            }
        }
    }
    (ga, gb)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for t in row.iter_mut() {
            *t = (*t - max).exp();
            sum += *t;
        }
        for t in row.iter_mut() {
            *t /= sum;
        }
    }
}

struct AttnSampleCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-softmaxed score matrix per head.
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
}

/// One residual self-attention block over flattened spatial positions:
/// `out = x + (softmax(Q K^T / sqrt(d_h)) V) W_o`.
pub struct SelfAttention {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bq: Array1<f64>,
    pub bk: Array1<f64>,
    pub bv: Array1<f64>,
    pub bo: Array1<f64>,
    pub gwq: Array2<f64>,
    pub gwk: Array2<f64>,
    pub gwv: Array2<f64>,
    pub gwo: Array2<f64>,
    pub gbq: Array1<f64>,
    pub gbk: Array1<f64>,
    pub gbv: Array1<f64>,
    pub gbo: Array1<f64>,
    cache: Vec<AttnSampleCache>,
}

impl SelfAttention {
    pub fn new(name: &str, channels: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads >= 1 && channels % heads == 0);
        let mk = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_vec(
                (channels, channels),
                he_uniform(rng, channels, channels * channels, 1.0),
            )
            .expect("projection shape")
        };
        SelfAttention {
            name: name.to_string(),
            channels,
            heads,
            wq: mk(rng),
            wk: mk(rng),
            wv: mk(rng),
            wo: mk(rng),
            bq: Array1::zeros(channels),
            bk: Array1::zeros(channels),
            bv: Array1::zeros(channels),
            bo: Array1::zeros(channels),
            gwq: Array2::zeros((channels, channels)),
            gwk: Array2::zeros((channels, channels)),
            gwv: Array2::zeros((channels, channels)),
            gwo: Array2::zeros((channels, channels)),
            gbq: Array1::zeros(channels),
            gbk: Array1::zeros(channels),
            gbv: Array1::zeros(channels),
            gbo: Array1::zeros(channels),
            cache: Vec::new(),
        }
    }

    fn project(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
        let mut y = x.dot(w);
        for mut row in y.rows_mut() {
            row += b;
        }
        y
    }

    pub fn forward(&mut self, x4: &Array4<f64>) -> Array4<f64> {
        let (bsz, c, h, w) = x4.dim();
        debug_assert_eq!(c, self.channels);
        let t = h * w;
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out4 = x4.clone();
        self.cache.clear();
        for b in 0..bsz {
            // Tokens are spatial positions: X is (T, C).
            let mut x = Array2::<f64>::zeros((t, c));
            for ci in 0..c {
                for u in 0..h {
                    for v in 0..w {
                        x[[u * w + v, ci]] = x4[[b, ci, u, v]];
                    }
                }
            }
            let q = Self::project(&x, &self.wq, &self.bq);
            let k = Self::project(&x, &self.wk, &self.bk);
            let v = Self::project(&x, &self.wv, &self.bv);
            let mut o = Array2::<f64>::zeros((t, c));
            let mut probs = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let cols = hd * dh..(hd + 1) * dh;
                let qh = q.slice(ndarray::s![.., cols.clone()]).to_owned();
                let kh = k.slice(ndarray::s![.., cols.clone()]).to_owned();
                let vh = v.slice(ndarray::s![.., cols.clone()]).to_owned();
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * scale);
                softmax_rows(&mut scores);
                let oh = scores.dot(&vh);
                o.slice_mut(ndarray::s![.., cols]).assign(&oh);
                probs.push(scores);
            }
            let y = Self::project(&o, &self.wo, &self.bo);
            for ci in 0..c {
                for u in 0..h {
                    for v in 0..w {
                        out4[[b, ci, u, v]] += y[[u * w + v, ci]];
                    }
                }
            }
            self.cache.push(AttnSampleCache { x, q, k, v, probs, o });
        }
        out4
    }

    pub fn backward(&mut self, gy4: &Array4<f64>) -> Array4<f64> {
        let (bsz, c, h, w) = gy4.dim();
        let t = h * w;
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gx4 = gy4.clone(); // residual path
        let cache = std::mem::take(&mut self.cache);
        assert_eq!(cache.len(), bsz, "forward before backward");
        for (b, s) in cache.iter().enumerate() {
            let mut gy = Array2::<f64>::zeros((t, c));
            for ci in 0..c {
                for u in 0..h {
                    for v in 0..w {
                        gy[[u * w + v, ci]] = gy4[[b, ci, u, v]];
                    }
                }
            }
            // Output projection.
            let go = gy.dot(&self.wo.t());
            self.gwo += &s.o.t().dot(&gy);
            self.gbo += &gy.sum_axis(Axis(0));
            // Heads.
            let mut gq = Array2::<f64>::zeros((t, c));
            let mut gk = Array2::<f64>::zeros((t, c));
            let mut gv = Array2::<f64>::zeros((t, c));
            for hd in 0..self.heads {
                let cols = hd * dh..(hd + 1) * dh;
                let p = &s.probs[hd];
                let qh = s.q.slice(ndarray::s![.., cols.clone()]).to_owned();
                let kh = s.k.slice(ndarray::s![.., cols.clone()]).to_owned();
                let vh = s.v.slice(ndarray::s![.., cols.clone()]).to_owned();
                let goh = go.slice(ndarray::s![.., cols.clone()]).to_owned();
                let gp = goh.dot(&vh.t());
                let gvh = p.t().dot(&goh);
                // Row-wise softmax adjoint.
                let mut gs = Array2::<f64>::zeros((t, t));
                for i in 0..t {
                    let pi = p.row(i);
                    let gpi = gp.row(i);
                    let dot = pi.dot(&gpi);
                    for j in 0..t {
                        gs[[i, j]] = pi[j] * (gpi[j] - dot);
                    }
                }
                gs.mapv_inplace(|x| x * scale);
                let gqh = gs.dot(&kh);
                let gkh = gs.t().dot(&qh);
                gq.slice_mut(ndarray::s![.., cols.clone()]).assign(&gqh);
                gk.slice_mut(ndarray::s![.., cols.clone()]).assign(&gkh);
                gv.slice_mut(ndarray::s![.., cols]).assign(&gvh);
            }
            // Input projections; all three feed the same x.
            self.gwq += &s.x.t().dot(&gq);
            self.gbq += &gq.sum_axis(Axis(0));
            self.gwk += &s.x.t().dot(&gk);
            self.gbk += &gk.sum_axis(Axis(0));
            self.gwv += &s.x.t().dot(&gv);
            self.gbv += &gv.sum_axis(Axis(0));
            let gx = gq.dot(&self.wq.t()) + gk.dot(&self.wk.t()) + gv.dot(&self.wv.t());
            for ci in 0..c {
                for u in 0..h {
                    for v in 0..w {
                        gx4[[b, ci, u, v]] += gx[[u * w + v, ci]];
                    }
                }
            }
        }
        gx4
    }

    pub fn zero_grad(&mut self) {
        for g in [&mut self.gwq, &mut self.gwk, &mut self.gwv, &mut self.gwo] {
            g.fill(0.0);
        }
        for g in [&mut self.gbq, &mut self.gbk, &mut self.gbv, &mut self.gbo] {
            g.fill(0.0);
        }
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let name = self.name.as_str();
        vec![
            ParamRef { name, value: self.wq.as_slice().unwrap() },
            ParamRef { name, value: self.bq.as_slice().unwrap() },
            ParamRef { name, value: self.wk.as_slice().unwrap() },
            ParamRef { name, value: self.bk.as_slice().unwrap() },
            ParamRef { name, value: self.wv.as_slice().unwrap() },
            ParamRef { name, value: self.bv.as_slice().unwrap() },
            ParamRef { name, value: self.wo.as_slice().unwrap() },
            ParamRef { name, value: self.bo.as_slice().unwrap() },
        ]
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let name = self.name.as_str();
        vec![
            ParamMut { name, value: self.wq.as_slice_mut().unwrap(), grad: self.gwq.as_slice_mut().unwrap() },
            ParamMut { name, value: self.bq.as_slice_mut().unwrap(), grad: self.gbq.as_slice_mut().unwrap() },
            ParamMut { name, value: self.wk.as_slice_mut().unwrap(), grad: self.gwk.as_slice_mut().unwrap() },
            ParamMut { name, value: self.bk.as_slice_mut().unwrap(), grad: self.gbk.as_slice_mut().unwrap() },
            ParamMut { name, value: self.wv.as_slice_mut().unwrap(), grad: self.gwv.as_slice_mut().unwrap() },
            ParamMut { name, value: self.bv.as_slice_mut().unwrap(), grad: self.gbv.as_slice_mut().unwrap() },
            ParamMut { name, value: self.wo.as_slice_mut().unwrap(), grad: self.gwo.as_slice_mut().unwrap() },
            ParamMut { name, value: self.bo.as_slice_mut().unwrap(), grad: self.gbo.as_slice_mut().unwrap() },
        ]
    }
}
