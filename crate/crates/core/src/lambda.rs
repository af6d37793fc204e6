//! Lambda+ layers: global, local, and inter-slice lambdas.
//!
//! Two routes compute the same function. `forward_naive` walks every pixel
//! and its context areas with plain loops and is the correctness oracle.
//! `forward_fast` parallelizes the same math with contractions and
//! sliding-window convolutions on the autodiff tape, so it is both fast and
//! differentiable.
//!
//! Layout convention: a feature volume is `(b, t, h, w, c)` with `b` batch,
//! `t` slices, `h`/`w` in-slice spatial, `c` channels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    TwoD,
    ThreeD,
    TwoPointFiveD,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(Variant::TwoD),
            "3d" => Ok(Variant::ThreeD),
            "2.5d" => Ok(Variant::TwoPointFiveD),
            other => Err(Error::usage(format!(
                "unknown variant '{other}' (expected 2d, 3d, or 2.5d)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::TwoD => "2d",
            Variant::ThreeD => "3d",
            Variant::TwoPointFiveD => "2.5d",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LambdaPlusConfig {
    /// input channels
    pub c: usize,
    /// query/key dimension
    pub k: usize,
    /// value (output) dimension
    pub v: usize,
    /// intra-depth
    pub u: usize,
    /// local kernel size (odd)
    pub r: usize,
    /// inter-slice kernel size (odd)
    pub t_k: usize,
    pub variant: Variant,
}

impl LambdaPlusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c < 1 || self.k < 1 || self.v < 1 || self.u < 1 {
            return Err(Error::config("c, k, v, u must all be >= 1"));
        }
        if self.r < 1 || self.r % 2 == 0 {
            return Err(Error::config(format!("local kernel R={} must be odd", self.r)));
        }
        if self.t_k < 1 || self.t_k % 2 == 0 {
            return Err(Error::config(format!(
                "inter-slice kernel T={} must be odd",
                self.t_k
            )));
        }
        Ok(())
    }

    /// Shape of the local position table E.
    pub fn e_shape(&self) -> Vec<usize> {
        match self.variant {
            Variant::ThreeD => vec![self.k, self.u, self.t_k, self.r, self.r],
            _ => vec![self.k, self.u, self.r, self.r],
        }
    }

    /// Shape of the inter-slice position table F (2.5D only).
    pub fn f_shape(&self) -> Option<Vec<usize>> {
        match self.variant {
            Variant::TwoPointFiveD => Some(vec![self.k, self.u, self.t_k]),
            _ => None,
        }
    }
}

/// Learnable parameters of one Lambda+ layer.
///
/// `e` holds one `k x u` block per relative offset of the local window;
/// `f` holds one per slice offset (present only for the 2.5D variant).
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPlusWeights {
    pub w_q: DenseTensor, // (c, k)
    pub w_k: DenseTensor, // (c, k, u)
    pub w_v: DenseTensor, // (c, v, u)
    pub e: DenseTensor,   // (k, u, R, R) or (k, u, T, R, R) for 3D
    pub f: Option<DenseTensor>, // (k, u, T)
}

/// Round to f32 precision so on-disk f32 checkpoints round-trip exactly.
fn q32(v: f64) -> f64 {
    v as f32 as f64
}

impl LambdaPlusWeights {
    pub fn init(cfg: &LambdaPlusConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let bound = 1.0 / (cfg.c as f64).sqrt();
        let mut r = rng::rng(seed, "lambda-weights");
        let mut uni = |shape: &[usize]| {
            DenseTensor::from_fn(shape, |_| q32(r.gen_range(-bound..bound)))
        };
        let w_q = uni(&[cfg.c, cfg.k]);
        let w_k = uni(&[cfg.c, cfg.k, cfg.u]);
        let w_v = uni(&[cfg.c, cfg.v, cfg.u]);
        drop(uni);
        let window: usize = cfg.e_shape()[2..].iter().product();
        let e_std = 1.0 / ((window * cfg.u) as f64).sqrt();
        let e_dist = Normal::new(0.0, e_std).map_err(|e| Error::config(e.to_string()))?;
        let e = DenseTensor::from_fn(&cfg.e_shape(), |_| q32(e_dist.sample(&mut r)));
        let f = match cfg.f_shape() {
            Some(shape) => {
                let f_std = 1.0 / ((cfg.t_k * cfg.u) as f64).sqrt();
                let f_dist = Normal::new(0.0, f_std).map_err(|e| Error::config(e.to_string()))?;
                Some(DenseTensor::from_fn(&shape, |_| q32(f_dist.sample(&mut r))))
            }
            None => None,
        };
        Ok(LambdaPlusWeights { w_q, w_k, w_v, e, f })
    }
}

fn check_input(x: &DenseTensor, cfg: &LambdaPlusConfig) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 5 {
        return Err(Error::dim(format!(
            "expected feature volume (b,t,h,w,c), got {:?}",
            x.shape()
        )));
    }
    let (b, t, h, w, c) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    if c != cfg.c {
        return Err(Error::dim(format!(
            "channel axis has length {c}, layer expects {}",
            cfg.c
        )));
    }
    Ok((b, t, h, w))
}

// ---------------------------------------------------------------------------
// Naive per-pixel reference path
// ---------------------------------------------------------------------------

/// Per-pixel linear projections: Q `(b,t,h,w,k)`, K `(b,t,h,w,k,u)`,
/// V `(b,t,h,w,v,u)`. The context equals the input (self-context).
pub fn project_qkv(
    x: &DenseTensor,
    w: &LambdaPlusWeights,
    cfg: &LambdaPlusConfig,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    let (b, t, h, wd) = check_input(x, cfg)?;
    let (c, k, v, u) = (cfg.c, cfg.k, cfg.v, cfg.u);
    let n = b * t * h * wd;
    let mut q = DenseTensor::zeros(&[b, t, h, wd, k]);
    let mut kk = DenseTensor::zeros(&[b, t, h, wd, k, u]);
    let mut vv = DenseTensor::zeros(&[b, t, h, wd, v, u]);
    let xd = x.data();
    for p in 0..n {
        let xc = &xd[p * c..(p + 1) * c];
        for ki in 0..k {
            let mut acc = 0.0;
            for ci in 0..c {
                acc += xc[ci] * w.w_q.data()[ci * k + ki];
            }
            q.data_mut()[p * k + ki] = acc;
        }
        for ki in 0..k {
            for ui in 0..u {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += xc[ci] * w.w_k.data()[(ci * k + ki) * u + ui];
                }
                kk.data_mut()[(p * k + ki) * u + ui] = acc;
            }
        }
        for vi in 0..v {
            for ui in 0..u {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += xc[ci] * w.w_v.data()[(ci * v + vi) * u + ui];
                }
                vv.data_mut()[(p * v + vi) * u + ui] = acc;
            }
        }
    }
    Ok((q, kk, vv))
}

/// Softmax of K across the context pixels of each slice, independently per
/// `(k, u)` coordinate. Cross-slice values never mix.
pub fn normalize_keys(k: &DenseTensor) -> Result<DenseTensor> {
    if k.ndim() != 6 {
        return Err(Error::dim(format!(
            "expected keys (b,t,h,w,k,u), got {:?}",
            k.shape()
        )));
    }
    let (b, t, h, w, kd, u) = (
        k.shape()[0],
        k.shape()[1],
        k.shape()[2],
        k.shape()[3],
        k.shape()[4],
        k.shape()[5],
    );
    let p = h * w;
    let ku = kd * u;
    let mut out = DenseTensor::zeros(k.shape());
    let src = k.data();
    let dst = out.data_mut();
    for slice in 0..b * t {
        let base = slice * p * ku;
        for lane in 0..ku {
            let mut max = f64::NEG_INFINITY;
            for pi in 0..p {
                max = max.max(src[base + pi * ku + lane]);
            }
            let mut sum = 0.0;
            for pi in 0..p {
                let e = (src[base + pi * ku + lane] - max).exp();
                dst[base + pi * ku + lane] = e;
                sum += e;
            }
            for pi in 0..p {
                dst[base + pi * ku + lane] /= sum;
            }
        }
    }
    Ok(out)
}

/// Global lambda per slice: sum over all pixels of the slice of
/// `K̄_m V_m^T`, one `(k, v)` matrix per `(b, t)`.
pub fn global_lambda(kbar: &DenseTensor, v: &DenseTensor) -> Result<DenseTensor> {
    let (b, t, h, w, kd, u) = (
        kbar.shape()[0],
        kbar.shape()[1],
        kbar.shape()[2],
        kbar.shape()[3],
        kbar.shape()[4],
        kbar.shape()[5],
    );
    let vd = v.shape()[4];
    let p = h * w;
    let mut out = DenseTensor::zeros(&[b, t, kd, vd]);
    let ks = kbar.data();
    let vs = v.data();
    for slice in 0..b * t {
        let kbase = slice * p * kd * u;
        let vbase = slice * p * vd * u;
        let obase = slice * kd * vd;
        for pi in 0..p {
            for ki in 0..kd {
                for vi in 0..vd {
                    let mut acc = 0.0;
                    for ui in 0..u {
                        acc += ks[kbase + (pi * kd + ki) * u + ui]
                            * vs[vbase + (pi * vd + vi) * u + ui];
                    }
                    out.data_mut()[obase + ki * vd + vi] += acc;
                }
            }
        }
    }
    Ok(out)
}

/// Local lambda per pixel: position-weighted sum over the local window,
/// zero-padded at slice borders. Output `(b,t,h,w,k,v)`.
pub fn local_lambda(
    v: &DenseTensor,
    e: &DenseTensor,
    cfg: &LambdaPlusConfig,
) -> Result<DenseTensor> {
    let (b, t, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    let (vd, u, kd, r) = (cfg.v, cfg.u, cfg.k, cfg.r);
    if e.shape() != cfg.e_shape().as_slice() {
        return Err(Error::dim(format!(
            "E table has shape {:?}, expected {:?}",
            e.shape(),
            cfg.e_shape()
        )));
    }
    let r2 = (r / 2) as isize;
    let tk2 = (cfg.t_k / 2) as isize;
    let depth = if cfg.variant == Variant::ThreeD { cfg.t_k } else { 1 };
    let mut out = DenseTensor::zeros(&[b, t, h, w, kd, vd]);
    let vs = v.data();
    let es = e.data();
    for bi in 0..b {
        for ti in 0..t as isize {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let obase =
                        ((((bi * t + ti as usize) * h + y as usize) * w + x as usize) * kd) * vd;
                    for dt in 0..depth as isize {
                        let st = if cfg.variant == Variant::ThreeD {
                            ti + dt - tk2
                        } else {
                            ti
                        };
                        if st < 0 || st >= t as isize {
                            continue;
                        }
                        for dy in -r2..=r2 {
                            let sy = y + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in -r2..=r2 {
                                let sx = x + dx;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let vbase = ((((bi * t + st as usize) * h + sy as usize) * w
                                    + sx as usize)
                                    * vd)
                                    * u;
                                // offset index into E
                                let ey = (dy + r2) as usize;
                                let ex = (dx + r2) as usize;
                                for ki in 0..kd {
                                    for vi in 0..vd {
                                        let mut acc = 0.0;
                                        for ui in 0..u {
                                            let ev = if cfg.variant == Variant::ThreeD {
                                                es[(((ki * u + ui) * cfg.t_k + dt as usize) * r
                                                    + ey)
                                                    * r
                                                    + ex]
                                            } else {
                                                es[((ki * u + ui) * r + ey) * r + ex]
                                            };
                                            acc += ev * vs[vbase + vi * u + ui];
                                        }
                                        out.data_mut()[obase + ki * vd + vi] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inter-slice lambda per pixel: position-weighted sum over the same 2D
/// location in the surrounding slice window. 2.5D variant only.
pub fn inter_slice_lambda(
    v: &DenseTensor,
    f: &DenseTensor,
    cfg: &LambdaPlusConfig,
) -> Result<DenseTensor> {
    if cfg.variant != Variant::TwoPointFiveD {
        return Err(Error::usage(
            "inter_slice_lambda is only defined for the 2.5D variant",
        ));
    }
    let (b, t, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    let (vd, u, kd, t_k) = (cfg.v, cfg.u, cfg.k, cfg.t_k);
    let tk2 = (t_k / 2) as isize;
    let mut out = DenseTensor::zeros(&[b, t, h, w, kd, vd]);
    let vs = v.data();
    let fs = f.data();
    for bi in 0..b {
        for ti in 0..t as isize {
            for y in 0..h {
                for x in 0..w {
                    let obase = ((((bi * t + ti as usize) * h + y) * w + x) * kd) * vd;
                    for dt in -tk2..=tk2 {
                        let st = ti + dt;
                        if st < 0 || st >= t as isize {
                            continue;
                        }
                        let vbase = ((((bi * t + st as usize) * h + y) * w + x) * vd) * u;
                        let foff = (dt + tk2) as usize;
                        for ki in 0..kd {
                            for vi in 0..vd {
                                let mut acc = 0.0;
                                for ui in 0..u {
                                    acc += fs[(ki * u + ui) * t_k + foff]
                                        * vs[vbase + vi * u + ui];
                                }
                                out.data_mut()[obase + ki * vd + vi] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Apply the summed lambdas to the queries: `y_n = q_n^T (λG + λL [+ λS])`.
/// `lambda_g` is per slice `(b,t,k,v)`; the others are per pixel.
pub fn apply_lambdas(
    q: &DenseTensor,
    lambda_g: &DenseTensor,
    lambda_l: &DenseTensor,
    lambda_s: Option<&DenseTensor>,
) -> Result<DenseTensor> {
    let (b, t, h, w, kd) = (
        q.shape()[0],
        q.shape()[1],
        q.shape()[2],
        q.shape()[3],
        q.shape()[4],
    );
    let vd = lambda_g.shape()[3];
    let mut out = DenseTensor::zeros(&[b, t, h, w, vd]);
    let qs = q.data();
    let gs = lambda_g.data();
    let ls = lambda_l.data();
    let ss = lambda_s.map(|s| s.data());
    for slice in 0..b * t {
        let gbase = slice * kd * vd;
        for pi in 0..h * w {
            let n = slice * h * w + pi;
            let qbase = n * kd;
            let lbase = n * kd * vd;
            let obase = n * vd;
            for vi in 0..vd {
                let mut acc = 0.0;
                for ki in 0..kd {
                    let mut lam = gs[gbase + ki * vd + vi] + ls[lbase + ki * vd + vi];
                    if let Some(ss) = ss {
                        lam += ss[lbase + ki * vd + vi];
                    }
                    acc += qs[qbase + ki] * lam;
                }
                out.data_mut()[obase + vi] = acc;
            }
        }
    }
    Ok(out)
}

/// Per-pixel reference forward pass; the correctness oracle for
/// `forward_fast`. O(pixels x context) time.
pub fn forward_naive(
    x: &DenseTensor,
    w: &LambdaPlusWeights,
    cfg: &LambdaPlusConfig,
) -> Result<DenseTensor> {
    cfg.validate()?;
    check_input(x, cfg)?;
    let (q, k, v) = project_qkv(x, w, cfg)?;
    let kbar = normalize_keys(&k)?;
    let lg = global_lambda(&kbar, &v)?;
    let ll = local_lambda(&v, &w.e, cfg)?;
    let ls = match cfg.variant {
        Variant::TwoPointFiveD => {
            let f = w
                .f
                .as_ref()
                .ok_or_else(|| Error::config("2.5D layer is missing the F table"))?;
            Some(inter_slice_lambda(&v, f, cfg)?)
        }
        _ => None,
    };
    apply_lambdas(&q, &lg, &ll, ls.as_ref())
}

// ---------------------------------------------------------------------------
// Fast path (convolution-parallelized, differentiable)
// ---------------------------------------------------------------------------

/// Lambda+ weights lifted onto an autodiff tape.
#[derive(Clone, Copy)]
pub struct LambdaVars<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub e: Var<'t>,
    pub f: Option<Var<'t>>,
}

impl<'t> LambdaVars<'t> {
    pub fn leaf(tape: &'t Tape, w: &LambdaPlusWeights, requires_grad: bool) -> Self {
        LambdaVars {
            w_q: tape.leaf(w.w_q.clone(), requires_grad),
            w_k: tape.leaf(w.w_k.clone(), requires_grad),
            w_v: tape.leaf(w.w_v.clone(), requires_grad),
            e: tape.leaf(w.e.clone(), requires_grad),
            f: w.f.as_ref().map(|f| tape.leaf(f.clone(), requires_grad)),
        }
    }
}

/// Convolution-parallelized forward pass on the tape. Input `(b,t,h,w,c)`,
/// output `(b,t,h,w,v)`. Matches `forward_naive` to 1e-10 in f64.
pub fn forward_fast_vars<'t>(
    x: Var<'t>,
    w: &LambdaVars<'t>,
    cfg: &LambdaPlusConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.len() != 5 || shape[4] != cfg.c {
        return Err(Error::dim(format!(
            "expected (b,t,h,w,{}), got {:?}",
            cfg.c, shape
        )));
    }
    let (b, t, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
    let (kd, vd, u) = (cfg.k, cfg.v, cfg.u);
    let bt = b * t;
    let p = h * wd;
    let r2 = cfg.r / 2;
    let tk2 = cfg.t_k / 2;

    // merge slices into batch; flatten in-slice pixels. Projections keep a
    // channels-first (B, channel, pixel) layout so every later step works on
    // contiguous pixel rows.
    let xf = x.reshape(&[bt, p, cfg.c])?;
    let q = xf.contract(w.w_q, "Bpc,ck->Bkp")?;
    let keys = xf.contract(w.w_k, "Bpc,cku->Bkup")?;
    let vals = xf.contract(w.w_v, "Bpc,cvu->Bvup")?;
    // normalize keys across the pixels of each slice
    let kbar = keys.softmax(3)?;

    // global lambda, one (k,v) matrix per slice, applied per slice
    let lam_g = kbar.contract(vals, "Bkup,Bvup->Bkv")?;
    let y_g = q.contract(lam_g, "Bkp,Bkv->Bpv")?;

    // local and inter-slice parts: the query is contracted with the tap
    // tables first, and the resulting per-pixel tap gains accumulate shifted
    // value windows directly. The (k, v) lambda matrices of those parts are
    // never materialized per pixel, which keeps this path fast.
    let y_loc = match cfg.variant {
        Variant::ThreeD => {
            let taps = u * cfg.t_k * cfg.r * cfg.r;
            let e2 = w.e.reshape(&[kd, taps])?;
            let g = q
                .reshape(&[b, t, kd, p])?
                .contract(e2, "btkP,kD->bDtP")?
                .reshape(&[b, taps, 1, t, h, wd])?;
            let vv = vals
                .reshape(&[b, t, vd, u, p])?
                .permute(&[0, 2, 3, 1, 4])? // (b, v, u, t, p)
                .reshape(&[b, vd, u, t, h, wd])?;
            vv.local_apply(g, &[u, cfg.t_k, cfg.r, cfg.r], &[0, tk2, r2, r2])? // (b, v, 1, t, h, w)
                .reshape(&[b, vd, t, p])?
                .permute(&[0, 2, 3, 1])?
                .reshape(&[bt, p, vd])?
        }
        _ => {
            let taps = u * cfg.r * cfg.r;
            let e2 = w.e.reshape(&[kd, taps])?;
            let g = q
                .contract(e2, "Bkp,kD->BDp")?
                .reshape(&[bt, taps, 1, h, wd])?;
            let vv = vals.reshape(&[bt, vd, u, h, wd])?;
            let mut y_l = vv
                .local_apply(g, &[u, cfg.r, cfg.r], &[0, r2, r2])? // (B, v, 1, h, w)
                .reshape(&[bt, vd, p])?;
            if cfg.variant == Variant::TwoPointFiveD {
                let f = w
                    .f
                    .ok_or_else(|| Error::config("2.5D layer is missing the F table"))?;
                let f2 = f.reshape(&[kd, u * cfg.t_k])?;
                let gs = q
                    .reshape(&[b, t, kd, p])?
                    .contract(f2, "btkP,kD->bDtP")?
                    .reshape(&[b, u * cfg.t_k, 1, t, p])?;
                let vvs = vals
                    .reshape(&[b, t, vd, u, p])?
                    .permute(&[0, 2, 3, 1, 4])?; // (b, v, u, t, p)
                let y_s = vvs
                    .local_apply(gs, &[u, cfg.t_k, 1], &[0, tk2, 0])? // (b, v, 1, t, p)
                    .reshape(&[b, vd, t, p])?
                    .permute(&[0, 2, 1, 3])?
                    .reshape(&[bt, vd, p])?;
                y_l = y_l.add(y_s)?;
            }
            y_l.permute(&[0, 2, 1])? // (B, p, v)
        }
    };

    let y = y_g.add(y_loc)?;
    y.reshape(&[b, t, h, wd, vd])
}

/// Convenience wrapper running the fast path outside any training graph.
pub fn forward_fast(
    x: &DenseTensor,
    w: &LambdaPlusWeights,
    cfg: &LambdaPlusConfig,
) -> Result<DenseTensor> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = LambdaVars::leaf(&tape, w, false);
    let y = forward_fast_vars(xv, &wv, cfg)?;
    Ok(y.value().as_ref().clone())
}
