//! Dense row-major tensor substrate: storage, axis manipulation, generalized
//! contraction, softmax, and sliding-window multiply-accumulate.
//!
//! Everything downstream (layers, the network, autodiff) is built on the
//! operations in this module. All math is f64; on-disk formats narrow to f32.

use crate::error::{Error, Result};
use std::rc::Rc;

/// N-dimensional dense array of f64, row-major (last axis fastest).
/// The buffer is reference-counted so that pure relabelings (reshape,
/// axis merge/split) and clones are free; mutation copies on write.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(DenseTensor {
            shape,
            data: Rc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![0.0; n]),
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: f64) -> Self {
        DenseTensor {
            shape: vec![],
            data: Rc::new(vec![v]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        let mut idx = vec![0usize; shape.len()];
        for slot in data.iter_mut() {
            *slot = f(&idx);
            inc_index(&mut idx, shape);
        }
        DenseTensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        self.data.as_slice()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Rc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Rc::try_unwrap(self.data).unwrap_or_else(|rc| (*rc).clone())
    }

    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut f = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            f = f * self.shape[d] + i;
        }
        f
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let f = self.flat_index(idx);
        Rc::make_mut(&mut self.data)[f] = v;
    }

    /// Scalar extraction; errors unless the tensor holds exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite value in {what}")))
        }
    }

    /// Reshape without moving data. Element count must be preserved.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        let n: usize = new_shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, new_shape
            )));
        }
        Ok(DenseTensor {
            shape: new_shape.to_vec(),
            data: Rc::clone(&self.data),
        })
    }

    /// Merge two adjacent axes into one; data order unchanged.
    pub fn merge_axes(&self, first: usize) -> Result<Self> {
        if first + 1 >= self.shape.len() {
            return Err(Error::dim(format!(
                "merge_axes({first}) out of range for shape {:?}",
                self.shape
            )));
        }
        let mut s = self.shape.clone();
        let merged = s[first] * s[first + 1];
        s.splice(first..=first + 1, [merged]);
        self.reshape(&s)
    }

    /// Split `axis` of length L into (L/factor, factor); inverse of merge.
    pub fn split_axis(&self, axis: usize, factor: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::dim(format!(
                "split_axis({axis}) out of range for shape {:?}",
                self.shape
            )));
        }
        let len = self.shape[axis];
        if factor == 0 || len % factor != 0 {
            return Err(Error::dim(format!(
                "axis {axis} of length {len} not divisible by factor {factor}"
            )));
        }
        let mut s = self.shape.clone();
        s.splice(axis..=axis, [len / factor, factor]);
        self.reshape(&s)
    }

    /// Materialized axis permutation. `perm[i]` is the source axis of
    /// output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        if perm.len() != nd {
            return Err(Error::dim(format!(
                "permutation {:?} has wrong arity for shape {:?}",
                perm, self.shape
            )));
        }
        let mut seen = vec![false; nd];
        for &p in perm {
            if p >= nd || seen[p] {
                return Err(Error::dim(format!("invalid permutation {:?}", perm)));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            let mut out = self.clone();
            out.shape = out_shape;
            return Ok(out);
        }
        // drop size-1 axes and merge runs that stay adjacent, then use a
        // cache-tiled transpose when the remainder is batched (M,N)->(N,M)
        let (rshape, rperm) = coalesce_perm(&self.shape, perm);
        if rperm.iter().enumerate().all(|(i, &p)| i == p) {
            // pure relabeling after coalescing: share the buffer
            return Ok(DenseTensor {
                shape: out_shape,
                data: Rc::clone(&self.data),
            });
        }
        let mut out_data = vec![0.0; self.data.len()];
        let nr = rperm.len();
        if nr >= 2
            && rperm[..nr - 2].iter().enumerate().all(|(i, &p)| i == p)
            && rperm[nr - 2] == nr - 1
            && rperm[nr - 1] == nr - 2
        {
            let m = rshape[nr - 2];
            let n = rshape[nr - 1];
            let batches = self.data.len() / (m * n);
            const TILE: usize = 32;
            for b in 0..batches {
                let src = &self.data[b * m * n..(b + 1) * m * n];
                let dst = &mut out_data[b * m * n..(b + 1) * m * n];
                for i0 in (0..m).step_by(TILE) {
                    for j0 in (0..n).step_by(TILE) {
                        for i in i0..(i0 + TILE).min(m) {
                            let row = &src[i * n..i * n + n];
                            for j in j0..(j0 + TILE).min(n) {
                                dst[j * m + i] = row[j];
                            }
                        }
                    }
                }
            }
        } else {
            let rstrides = row_major_strides(&rshape);
            let src_strides: Vec<usize> = rperm.iter().map(|&p| rstrides[p]).collect();
            let rout: Vec<usize> = rperm.iter().map(|&p| rshape[p]).collect();
            gather_rows(&self.data, &mut out_data, &rout, &src_strides);
        }
        Ok(DenseTensor {
            shape: out_shape,
            data: Rc::new(out_data),
        })
    }

    /// Broadcast to `target` shape: axes align from the right, each source
    /// axis must equal the target or be 1.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Self> {
        let nd = target.len();
        if self.shape.len() > nd {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape, target
            )));
        }
        let pad = nd - self.shape.len();
        let mut src_shape = vec![1usize; pad];
        src_shape.extend_from_slice(&self.shape);
        for d in 0..nd {
            if src_shape[d] != target[d] && src_shape[d] != 1 {
                return Err(Error::dim(format!(
                    "cannot broadcast {:?} to {:?} (axis {d})",
                    self.shape, target
                )));
            }
        }
        let src_strides_full = row_major_strides(&src_shape);
        let src_strides: Vec<usize> = (0..nd)
            .map(|d| if src_shape[d] == 1 { 0 } else { src_strides_full[d] })
            .collect();
        let mut out_data = vec![0.0; target.iter().product()];
        gather_rows(&self.data, &mut out_data, target, &src_strides);
        Ok(DenseTensor {
            shape: target.to_vec(),
            data: Rc::new(out_data),
        })
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::dim(format!(
                "sum_axis({axis}) out of range for shape {:?}",
                self.shape
            )));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut out_data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let ob = o * inner;
                for i in 0..inner {
                    out_data[ob + i] += self.data[base + i];
                }
            }
        }
        Ok(DenseTensor {
            shape: out_shape,
            data: Rc::new(out_data),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DenseTensor {
            shape: self.shape.clone(),
            data: Rc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data: Rc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.shape.len() || start + len > self.shape[axis] {
            return Err(Error::dim(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for shape {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let full = self.shape[axis];
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        DenseTensor::new(out_shape, data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// 2x2 mean pooling over the trailing two axes of `(B, C, H, W)`.
pub fn avg_pool2(x: &DenseTensor) -> Result<DenseTensor> {
    if x.ndim() != 4 || x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0 {
        return Err(Error::dim(format!(
            "avg_pool2 needs (B,C,2m,2n), got {:?}",
            x.shape()
        )));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = DenseTensor::zeros(&[b, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for bc in 0..b * c {
        let ib = bc * h * w;
        let ob = bc * oh * ow;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = ib + (2 * y) * w + 2 * xx;
                od[ob + y * ow + xx] =
                    0.25 * (xd[i0] + xd[i0 + 1] + xd[i0 + w] + xd[i0 + w + 1]);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor 2x upsampling over the trailing two axes of `(B, C, H, W)`.
pub fn upsample_nearest2(x: &DenseTensor) -> Result<DenseTensor> {
    if x.ndim() != 4 {
        return Err(Error::dim(format!(
            "upsample_nearest2 needs (B,C,H,W), got {:?}",
            x.shape()
        )));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = DenseTensor::zeros(&[b, c, 2 * h, 2 * w]);
    let xd = x.data();
    let od = out.data_mut();
    for bc in 0..b * c {
        let ib = bc * h * w;
        let ob = bc * 4 * h * w;
        for y in 0..h {
            for xx in 0..w {
                let v = xd[ib + y * w + xx];
                let o0 = ob + (2 * y) * 2 * w + 2 * xx;
                od[o0] = v;
                od[o0 + 1] = v;
                od[o0 + 2 * w] = v;
                od[o0 + 2 * w + 1] = v;
            }
        }
    }
    Ok(out)
}

/// Sum over each 2x2 block of the trailing two axes (adjoint of nearest
/// upsampling).
pub fn sum_pool2(x: &DenseTensor) -> Result<DenseTensor> {
    Ok(avg_pool2(x)?.scale(4.0))
}

/// Concatenate along one axis; all other axes must agree.
pub fn concat(parts: &[&DenseTensor], axis: usize) -> Result<DenseTensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::usage("concat of zero tensors"))?;
    let nd = first.ndim();
    let mut out_shape = first.shape().to_vec();
    for p in &parts[1..] {
        if p.ndim() != nd {
            return Err(Error::dim("concat rank mismatch"));
        }
        for d in 0..nd {
            if d != axis && p.shape()[d] != out_shape[d] {
                return Err(Error::dim(format!(
                    "concat shape mismatch on axis {d}: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        out_shape[axis] += p.shape()[axis];
    }
    let inner: usize = out_shape[axis + 1..].iter().product();
    let outer: usize = out_shape[..axis].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis];
            let base = o * len * inner;
            data.extend_from_slice(&p.data()[base..base + len * inner]);
        }
    }
    DenseTensor::new(out_shape, data)
}

/// Per-pixel matrix application in channels-first layout:
/// `y[b,v,n] = sum_k q[b,k,n] * m[b,k,v,n]` for `q (b,k,n)`, `m (b,k,v,n)`.
/// Every inner loop runs over the contiguous trailing axis `n`.
/// Shared shape bookkeeping for `local_apply_mac` and its gradients.
/// Returns `(b, cv, ksz, o, psp)` after validating operand shapes.
fn local_apply_dims(
    values_shape: &[usize],
    gains_shape: &[usize],
    win: &[usize],
    pad: &[usize],
) -> Result<(usize, usize, usize, Vec<usize>, Vec<usize>)> {
    let d = pad.len();
    if d == 0 || win.len() != d {
        return Err(Error::dim(
            "local_apply_mac needs matching window and pad ranks of at least one",
        ));
    }
    if values_shape.len() != d + 2 || gains_shape.len() != d + 2 {
        return Err(Error::dim(format!(
            "local_apply_mac expects rank {} operands for {} window axes, got {:?} and {:?}",
            d + 2,
            d,
            values_shape,
            gains_shape
        )));
    }
    let (b, cv) = (values_shape[0], values_shape[1]);
    let ksz: usize = win.iter().product();
    let s = &values_shape[2..];
    let mut o = vec![0usize; d];
    let mut psp = vec![0usize; d];
    for i in 0..d {
        psp[i] = s[i] + 2 * pad[i];
        if win[i] > psp[i] || win[i] == 0 {
            return Err(Error::dim(format!(
                "window length {} exceeds padded input length {} on axis {}",
                win[i], psp[i], i
            )));
        }
        o[i] = psp[i] - win[i] + 1;
    }
    if gains_shape[0] != b || gains_shape[1] != ksz || gains_shape[2..] != o {
        return Err(Error::dim(format!(
            "gains shape {:?} does not match (batch {}, taps {}, output {:?})",
            gains_shape, b, ksz, o
        )));
    }
    Ok((b, cv, ksz, o, psp))
}

/// Flat displacements of all window taps into a padded spatial block.
fn tap_offsets(win: &[usize], pstrides: &[usize]) -> Vec<usize> {
    let d = win.len();
    let ksz: usize = win.iter().product();
    let mut offsets = Vec::with_capacity(ksz);
    let mut kidx = vec![0usize; d];
    for _ in 0..ksz {
        offsets.push((0..d).map(|i| kidx[i] * pstrides[i]).sum());
        inc_index(&mut kidx, win);
    }
    offsets
}

/// Position-dependent windowed accumulation:
/// `y[b, c, pos] = sum_tap gains[b, tap, pos] * padded(values)[b, c, pos + disp(tap)]`.
/// `values` is `(b, c, s_1..s_d)` and is zero-padded by `pad` on every window
/// axis; `gains` is `(b, prod(win), o_1..o_d)` with `o_i = s_i + 2*pad_i - win_i + 1`.
/// Unlike `slide_window_mac`, the tap weights vary per output position.
pub fn local_apply_mac(
    values: &DenseTensor,
    gains: &DenseTensor,
    win: &[usize],
    pad: &[usize],
) -> Result<DenseTensor> {
    let (b, cv, ksz, o, psp) = local_apply_dims(values.shape(), gains.shape(), win, pad)?;
    let padded = pad_spatial(values, pad);
    let pstrides = row_major_strides(&psp);
    let offsets = tap_offsets(win, &pstrides);
    let osz: usize = o.iter().product();
    let psz: usize = psp.iter().product();
    let o_inner = *o.last().unwrap();
    let n_orows = osz / o_inner;
    let d = pad.len();

    let mut out_shape = vec![b, cv];
    out_shape.extend_from_slice(&o);
    let mut out = DenseTensor::zeros(&out_shape);
    let pd = padded.data();
    let gd = gains.data();
    let od = out.data_mut();
    for bi in 0..b {
        for c in 0..cv {
            let out_base = (bi * cv + c) * osz;
            let in_base = (bi * cv + c) * psz;
            let mut ridx = vec![0usize; d - 1];
            for r in 0..n_orows {
                let mut src0 = in_base;
                for i in 0..d - 1 {
                    src0 += ridx[i] * pstrides[i];
                }
                let dst = out_base + r * o_inner;
                let orow = &mut od[dst..dst + o_inner];
                for (kf, &disp) in offsets.iter().enumerate() {
                    let grow = &gd[(bi * ksz + kf) * osz + r * o_inner..][..o_inner];
                    let prow = &pd[src0 + disp..src0 + disp + o_inner];
                    for ((ov, gv), pv) in orow.iter_mut().zip(grow).zip(prow) {
                        *ov += gv * pv;
                    }
                }
                for i in (0..d - 1).rev() {
                    ridx[i] += 1;
                    if ridx[i] < o[i] {
                        break;
                    }
                    ridx[i] = 0;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `local_apply_mac` with respect to `gains`:
/// `dg[b, tap, pos] = sum_c grad_out[b, c, pos] * padded(values)[b, c, pos + disp(tap)]`.
pub fn local_apply_grad_gains(
    grad_out: &DenseTensor,
    values: &DenseTensor,
    win: &[usize],
    pad: &[usize],
) -> Result<DenseTensor> {
    let mut gains_shape = vec![values.shape()[0], win.iter().product()];
    gains_shape.extend_from_slice(&grad_out.shape()[2..]);
    let (b, cv, ksz, o, psp) = local_apply_dims(values.shape(), &gains_shape, win, pad)?;
    if grad_out.shape()[..2] != [b, cv] {
        return Err(Error::dim(format!(
            "grad shape {:?} does not match values {:?}",
            grad_out.shape(),
            values.shape()
        )));
    }
    let padded = pad_spatial(values, pad);
    let pstrides = row_major_strides(&psp);
    let offsets = tap_offsets(win, &pstrides);
    let osz: usize = o.iter().product();
    let psz: usize = psp.iter().product();
    let o_inner = *o.last().unwrap();
    let n_orows = osz / o_inner;
    let d = pad.len();

    let mut out = DenseTensor::zeros(&gains_shape);
    let pd = padded.data();
    let gy = grad_out.data();
    let od = out.data_mut();
    for bi in 0..b {
        for c in 0..cv {
            let gy_base = (bi * cv + c) * osz;
            let in_base = (bi * cv + c) * psz;
            let mut ridx = vec![0usize; d - 1];
            for r in 0..n_orows {
                let mut src0 = in_base;
                for i in 0..d - 1 {
                    src0 += ridx[i] * pstrides[i];
                }
                let grow = &gy[gy_base + r * o_inner..][..o_inner];
                for (kf, &disp) in offsets.iter().enumerate() {
                    let prow = &pd[src0 + disp..src0 + disp + o_inner];
                    let orow = &mut od[(bi * ksz + kf) * osz + r * o_inner..][..o_inner];
                    for ((ov, gv), pv) in orow.iter_mut().zip(grow).zip(prow) {
                        *ov += gv * pv;
                    }
                }
                for i in (0..d - 1).rev() {
                    ridx[i] += 1;
                    if ridx[i] < o[i] {
                        break;
                    }
                    ridx[i] = 0;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `local_apply_mac` with respect to `values`: the adjoint scatter
/// `dv[b, c, pos + disp(tap)] += gains[b, tap, pos] * grad_out[b, c, pos]`,
/// accumulated in padded coordinates and then cropped back to `values_shape`.
pub fn local_apply_grad_values(
    grad_out: &DenseTensor,
    gains: &DenseTensor,
    values_shape: &[usize],
    win: &[usize],
    pad: &[usize],
) -> Result<DenseTensor> {
    let (b, cv, ksz, o, psp) = local_apply_dims(values_shape, gains.shape(), win, pad)?;
    if grad_out.shape()[..2] != [b, cv] || grad_out.shape()[2..] != o {
        return Err(Error::dim(format!(
            "grad shape {:?} does not match output (batch {}, channels {}, {:?})",
            grad_out.shape(),
            b,
            cv,
            o
        )));
    }
    let pstrides = row_major_strides(&psp);
    let offsets = tap_offsets(win, &pstrides);
    let osz: usize = o.iter().product();
    let psz: usize = psp.iter().product();
    let o_inner = *o.last().unwrap();
    let n_orows = osz / o_inner;
    let d = pad.len();

    let mut pshape = vec![b, cv];
    pshape.extend_from_slice(&psp);
    let mut dpad = DenseTensor::zeros(&pshape);
    let gd = gains.data();
    let gy = grad_out.data();
    let od = dpad.data_mut();
    for bi in 0..b {
        for c in 0..cv {
            let gy_base = (bi * cv + c) * osz;
            let in_base = (bi * cv + c) * psz;
            let mut ridx = vec![0usize; d - 1];
            for r in 0..n_orows {
                let mut src0 = in_base;
                for i in 0..d - 1 {
                    src0 += ridx[i] * pstrides[i];
                }
                let grow = &gy[gy_base + r * o_inner..][..o_inner];
                for (kf, &disp) in offsets.iter().enumerate() {
                    let krow = &gd[(bi * ksz + kf) * osz + r * o_inner..][..o_inner];
                    let orow = &mut od[src0 + disp..src0 + disp + o_inner];
                    for ((ov, gv), kv) in orow.iter_mut().zip(grow).zip(krow) {
                        *ov += gv * kv;
                    }
                }
                for i in (0..d - 1).rev() {
                    ridx[i] += 1;
                    if ridx[i] < o[i] {
                        break;
                    }
                    ridx[i] = 0;
                }
            }
        }
    }
    Ok(crop_spatial(&dpad, pad, values_shape))
}

/// Inverse of `pad_spatial`: strip `pad` from each trailing window axis.
fn crop_spatial(padded: &DenseTensor, pad: &[usize], out_shape: &[usize]) -> DenseTensor {
    if pad.iter().all(|&p| p == 0) {
        return padded.clone();
    }
    let d = pad.len();
    let lead = out_shape.len() - d;
    let out_sp = &out_shape[lead..];
    let in_strides = padded.strides();
    let n_lead: usize = out_shape[..lead].iter().product();
    let lead_stride: usize = padded.shape()[lead..].iter().product();
    let inner = *out_sp.last().unwrap();
    let n_rows: usize = out_sp[..d - 1].iter().product::<usize>().max(1);
    let mut out = DenseTensor::zeros(out_shape);
    let pd = padded.data();
    let od = out.data_mut();
    for l in 0..n_lead {
        let mut row_idx = vec![0usize; d - 1];
        for r in 0..n_rows {
            let mut src = l * lead_stride + pad[d - 1];
            for i in 0..d - 1 {
                src += (row_idx[i] + pad[i]) * in_strides[lead + i];
            }
            let dst = (l * n_rows + r) * inner;
            od[dst..dst + inner].copy_from_slice(&pd[src..src + inner]);
            for i in (0..d - 1).rev() {
                row_idx[i] += 1;
                if row_idx[i] < out_sp[i] {
                    break;
                }
                row_idx[i] = 0;
            }
        }
    }
    out
}

/// Simplify a permutation: drop size-1 axes, then merge axis runs that are
/// adjacent in both the source and the destination. Returns the reduced
/// source shape and the permutation over it.
fn coalesce_perm(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<usize> = (0..shape.len()).filter(|&i| shape[i] != 1).collect();
    let remap: Vec<Option<usize>> = {
        let mut m = vec![None; shape.len()];
        for (new, &old) in keep.iter().enumerate() {
            m[old] = Some(new);
        }
        m
    };
    let shape1: Vec<usize> = keep.iter().map(|&i| shape[i]).collect();
    let perm1: Vec<usize> = perm.iter().filter_map(|&p| remap[p]).collect();
    // group consecutive source axes that appear consecutively in the perm
    let mut groups: Vec<(usize, usize)> = Vec::new(); // (first src axis, len)
    for &p in &perm1 {
        match groups.last_mut() {
            Some((first, len)) if *first + *len == p => *len += 1,
            _ => groups.push((p, 1)),
        }
    }
    // reduced source shape: groups ordered by source position
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&g| groups[g].0);
    let rshape: Vec<usize> = order
        .iter()
        .map(|&g| shape1[groups[g].0..groups[g].0 + groups[g].1].iter().product())
        .collect();
    let pos_of = |g: usize| order.iter().position(|&x| x == g).unwrap();
    let rperm: Vec<usize> = (0..groups.len()).map(pos_of).collect();
    (rshape, rperm)
}

/// Fill `out` (row-major over `out_shape`) by gathering from `src` with the
/// given per-axis source strides (0 repeats, as in broadcasting). Copies one
/// innermost-axis row at a time so contiguous and constant rows stay cheap.
fn gather_rows(src: &[f64], out: &mut [f64], out_shape: &[usize], src_strides: &[usize]) {
    if out.is_empty() {
        return;
    }
    if out_shape.is_empty() {
        out[0] = src[0];
        return;
    }
    let last = out_shape.len() - 1;
    let last_len = out_shape[last];
    let last_stride = src_strides[last];
    let mut idx = vec![0usize; last];
    let mut base = 0usize;
    for row in out.chunks_exact_mut(last_len) {
        match last_stride {
            1 => row.copy_from_slice(&src[base..base + last_len]),
            0 => row.fill(src[base]),
            s => {
                let mut off = base;
                for o in row.iter_mut() {
                    *o = src[off];
                    off += s;
                }
            }
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn inc_index(idx: &mut [usize], shape: &[usize]) {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < shape[d] {
            return;
        }
        idx[d] = 0;
    }
}

// ---------------------------------------------------------------------------
// Generalized contraction (binary einsum)
// ---------------------------------------------------------------------------

struct ContractPlan {
    a_labels: Vec<char>,
    b_labels: Vec<char>,
    out_labels: Vec<char>,
}

fn parse_spec(spec: &str) -> Result<ContractPlan> {
    let spec: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
    let (inputs, out) = spec
        .split_once("->")
        .ok_or_else(|| Error::usage(format!("contraction spec '{spec}' lacks '->'")))?;
    let (a, b) = inputs
        .split_once(',')
        .ok_or_else(|| Error::usage(format!("contraction spec '{spec}' needs two operands")))?;
    let plan = ContractPlan {
        a_labels: a.chars().collect(),
        b_labels: b.chars().collect(),
        out_labels: out.chars().collect(),
    };
    for labels in [&plan.a_labels, &plan.b_labels, &plan.out_labels] {
        for (i, c) in labels.iter().enumerate() {
            if labels[..i].contains(c) {
                return Err(Error::usage(format!(
                    "repeated axis label '{c}' within one operand of '{spec}'"
                )));
            }
        }
    }
    for c in &plan.out_labels {
        if !plan.a_labels.contains(c) && !plan.b_labels.contains(c) {
            return Err(Error::usage(format!(
                "output label '{c}' absent from inputs in '{spec}'"
            )));
        }
    }
    Ok(plan)
}

/// Generalized pairwise tensor contraction with an einsum-style spec, e.g.
/// `"ik,kj->ij"` or `"Bukm,Buvm->Bkv"`. Each label may appear at most once
/// per operand; labels present in both inputs and the output are batched,
/// labels present in both inputs only are summed, labels present in a single
/// input only are summed out of that input.
pub fn contract(a: &DenseTensor, b: &DenseTensor, spec: &str) -> Result<DenseTensor> {
    let plan = parse_spec(spec)?;
    if plan.a_labels.len() != a.ndim() || plan.b_labels.len() != b.ndim() {
        return Err(Error::dim(format!(
            "spec '{spec}' arity does not match operand ranks {} and {}",
            a.ndim(),
            b.ndim()
        )));
    }
    for (i, &c) in plan.a_labels.iter().enumerate() {
        if let Some(j) = plan.b_labels.iter().position(|&x| x == c) {
            if a.shape()[i] != b.shape()[j] {
                return Err(Error::dim(format!(
                    "axis '{c}' has length {} in the first operand but {} in the second",
                    a.shape()[i],
                    b.shape()[j]
                )));
            }
        }
    }

    let in_both = |c: char| plan.a_labels.contains(&c) && plan.b_labels.contains(&c);
    let in_out = |c: char| plan.out_labels.contains(&c);

    let batch: Vec<char> = plan
        .out_labels
        .iter()
        .copied()
        .filter(|&c| in_both(c))
        .collect();
    let contracted: Vec<char> = plan
        .a_labels
        .iter()
        .copied()
        .filter(|&c| in_both(c) && !in_out(c))
        .collect();
    let free_a: Vec<char> = plan
        .a_labels
        .iter()
        .copied()
        .filter(|&c| !in_both(c) && in_out(c))
        .collect();
    let free_b: Vec<char> = plan
        .b_labels
        .iter()
        .copied()
        .filter(|&c| !in_both(c) && in_out(c))
        .collect();

    // collapse labels appearing in exactly one operand and not in the output
    let collapse = |t: &DenseTensor, labels: &[char]| -> Result<(DenseTensor, Vec<char>)> {
        let mut t = t.clone();
        let mut labels: Vec<char> = labels.to_vec();
        loop {
            let pos = labels
                .iter()
                .position(|&c| !in_both(c) && !in_out(c));
            match pos {
                Some(p) => {
                    t = t.sum_axis(p)?;
                    labels.remove(p);
                }
                None => return Ok((t, labels)),
            }
        }
    };
    let (a, a_labels) = collapse(a, &plan.a_labels)?;
    let (b, b_labels) = collapse(b, &plan.b_labels)?;

    let pos_in = |labels: &[char], c: char| labels.iter().position(|&x| x == c).unwrap();

    // permute operands to (batch, free, contracted)
    let a_perm: Vec<usize> = batch
        .iter()
        .chain(free_a.iter())
        .chain(contracted.iter())
        .map(|&c| pos_in(&a_labels, c))
        .collect();
    let b_perm: Vec<usize> = batch
        .iter()
        .chain(free_b.iter())
        .chain(contracted.iter())
        .map(|&c| pos_in(&b_labels, c))
        .collect();
    let pa = a.permute(&a_perm)?;
    let pb = b.permute(&b_perm)?;

    let nb: usize = pa.shape()[..batch.len()].iter().product();
    let fa: usize = pa.shape()[batch.len()..batch.len() + free_a.len()]
        .iter()
        .product();
    let fb: usize = pb.shape()[batch.len()..batch.len() + free_b.len()]
        .iter()
        .product();
    let nc: usize = pa.shape()[batch.len() + free_a.len()..].iter().product();

    let mut tmp = vec![0.0f64; nb * fa * fb];
    let ad = pa.data();
    let bd = pb.data();
    for bi in 0..nb {
        let abase = bi * fa * nc;
        let bbase = bi * fb * nc;
        let obase = bi * fa * fb;
        for i in 0..fa {
            let arow = &ad[abase + i * nc..abase + (i + 1) * nc];
            let orow = &mut tmp[obase + i * fb..obase + (i + 1) * fb];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &bd[bbase + j * nc..bbase + (j + 1) * nc];
                let mut acc = 0.0;
                for (x, y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                *o = acc;
            }
        }
    }

    // reorder (batch, free_a, free_b) into the requested output label order
    let tmp_labels: Vec<char> = batch
        .iter()
        .chain(free_a.iter())
        .chain(free_b.iter())
        .copied()
        .collect();
    let tmp_shape: Vec<usize> = pa.shape()[..batch.len() + free_a.len()]
        .iter()
        .chain(&pb.shape()[batch.len()..batch.len() + free_b.len()])
        .copied()
        .collect();
    let tmp = DenseTensor::new(tmp_shape, tmp)?;
    let out_perm: Vec<usize> = plan
        .out_labels
        .iter()
        .map(|&c| pos_in(&tmp_labels, c))
        .collect();
    tmp.permute(&out_perm)
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Softmax along one axis with max-subtraction for overflow safety.
pub fn softmax_over_axis(x: &DenseTensor, axis: usize) -> Result<DenseTensor> {
    if axis >= x.ndim() {
        return Err(Error::dim(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = DenseTensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(xd[base + k * inner]);
            }
            let mut sum = 0.0;
            for k in 0..len {
                let e = (xd[base + k * inner] - max).exp();
                od[base + k * inner] = e;
                sum += e;
            }
            for k in 0..len {
                od[base + k * inner] /= sum;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sliding-window multiply-accumulate (cross-correlation, stride 1)
// ---------------------------------------------------------------------------

/// Zero-pad the trailing `pad.len()` spatial axes of `(B, C, S...)`.
fn pad_spatial(values: &DenseTensor, pad: &[usize]) -> DenseTensor {
    let d = pad.len();
    let nd = values.ndim();
    let lead = nd - d;
    let mut pshape: Vec<usize> = values.shape().to_vec();
    for i in 0..d {
        pshape[lead + i] += 2 * pad[i];
    }
    if pad.iter().all(|&p| p == 0) {
        return values.clone();
    }
    let mut out = DenseTensor::zeros(&pshape);
    let in_sp = &values.shape()[lead..];
    let out_strides = out.strides();
    let n_lead: usize = values.shape()[..lead].iter().product();
    let in_inner = *in_sp.last().unwrap();
    let n_rows: usize = in_sp[..d - 1].iter().product::<usize>().max(1);
    let in_sp = in_sp.to_vec();
    let vd = values.data();
    let od = out.data_mut();
    let lead_stride: usize = pshape[lead..].iter().product();
    for l in 0..n_lead {
        let mut row_idx = vec![0usize; d - 1];
        for r in 0..n_rows {
            let mut dst = l * lead_stride + pad[d - 1];
            for i in 0..d - 1 {
                dst += (row_idx[i] + pad[i]) * out_strides[lead + i];
            }
            let src = (l * n_rows + r) * in_inner;
            od[dst..dst + in_inner].copy_from_slice(&vd[src..src + in_inner]);
            for i in (0..d - 1).rev() {
                row_idx[i] += 1;
                if row_idx[i] < in_sp[i] {
                    break;
                }
                row_idx[i] = 0;
            }
        }
    }
    out
}

/// Sliding-window multiply-accumulate (cross-correlation), stride 1.
///
/// `values`: `(B, C_in, S_1..S_d)`; `kernel`: `(C_out, C_in, K_1..K_d)`;
/// `pad`: zero padding per spatial axis. Output `(B, C_out, O_1..O_d)` with
/// `O_i = S_i + 2*pad_i - K_i + 1`.
pub fn slide_window_mac(
    values: &DenseTensor,
    kernel: &DenseTensor,
    pad: &[usize],
) -> Result<DenseTensor> {
    let d = pad.len();
    if d == 0 {
        return Err(Error::dim("slide_window_mac needs at least one window axis"));
    }
    if values.ndim() != d + 2 || kernel.ndim() != d + 2 {
        return Err(Error::dim(format!(
            "slide_window_mac expects rank {} operands for {} window axes, got {:?} and {:?}",
            d + 2,
            d,
            values.shape(),
            kernel.shape()
        )));
    }
    let (b, cin) = (values.shape()[0], values.shape()[1]);
    let (cout, kcin) = (kernel.shape()[0], kernel.shape()[1]);
    if cin != kcin {
        return Err(Error::dim(format!(
            "channel-in axis mismatch: values have {cin}, kernel has {kcin}"
        )));
    }
    let s: Vec<usize> = values.shape()[2..].to_vec();
    let k: Vec<usize> = kernel.shape()[2..].to_vec();
    let mut o = vec![0usize; d];
    for i in 0..d {
        let padded = s[i] + 2 * pad[i];
        if k[i] > padded || k[i] == 0 {
            return Err(Error::dim(format!(
                "kernel length {} exceeds padded input length {} on window axis {}",
                k[i], padded, i
            )));
        }
        o[i] = padded - k[i] + 1;
    }

    let padded = pad_spatial(values, pad);
    let psp: Vec<usize> = padded.shape()[2..].to_vec();
    let pstrides = row_major_strides(&psp);
    let osz: usize = o.iter().product();
    let psz: usize = psp.iter().product();
    let ksz: usize = k.iter().product();

    let mut out_shape = vec![b, cout];
    out_shape.extend_from_slice(&o);
    let mut out = DenseTensor::zeros(&out_shape);

    // precompute kernel offsets as flat displacements into the padded input
    let mut koffsets = Vec::with_capacity(ksz);
    {
        let mut kidx = vec![0usize; d];
        for _ in 0..ksz {
            let mut disp = 0usize;
            for i in 0..d {
                disp += kidx[i] * pstrides[i];
            }
            koffsets.push(disp);
            inc_index(&mut kidx, &k);
        }
    }

    let o_inner = *o.last().unwrap();
    let n_orows = osz / o_inner;
    let pd = padded.data();
    let od = out.data_mut();
    let kd = kernel.data();
    for bi in 0..b {
        for co in 0..cout {
            let out_base = (bi * cout + co) * osz;
            for ci in 0..cin {
                let in_base = (bi * cin + ci) * psz;
                let k_base = (co * cin + ci) * ksz;
                // rows outer, taps inner: each output row accumulates all
                // taps while its input neighborhood is hot in cache
                let mut ridx = vec![0usize; d - 1];
                for r in 0..n_orows {
                    let mut src0 = in_base;
                    for i in 0..d - 1 {
                        src0 += ridx[i] * pstrides[i];
                    }
                    let dst = out_base + r * o_inner;
                    for (kf, &disp) in koffsets.iter().enumerate() {
                        let w = kd[k_base + kf];
                        if w == 0.0 {
                            continue;
                        }
                        let src = src0 + disp;
                        let prow = &pd[src..src + o_inner];
                        let orow = &mut od[dst..dst + o_inner];
                        for (ov, pv) in orow.iter_mut().zip(prow) {
                            *ov += w * pv;
                        }
                    }
                    for i in (0..d - 1).rev() {
                        ridx[i] += 1;
                        if ridx[i] < o[i] {
                            break;
                        }
                        ridx[i] = 0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `slide_window_mac` with respect to `values`.
pub fn slide_window_grad_values(
    grad_out: &DenseTensor,
    kernel: &DenseTensor,
    pad: &[usize],
) -> Result<DenseTensor> {
    let d = pad.len();
    let k: Vec<usize> = kernel.shape()[2..].to_vec();
    // swap channel axes and flip every window axis
    let (cout, cin) = (kernel.shape()[0], kernel.shape()[1]);
    let ksz: usize = k.iter().product();
    let mut flipped = DenseTensor::zeros(
        &[&[cin, cout][..], &k[..]].concat(),
    );
    let kstrides = row_major_strides(&k);
    {
        let kd = kernel.data();
        let fd = flipped.data_mut();
        let mut kidx = vec![0usize; d];
        for kf in 0..ksz {
            let mut rev = 0usize;
            for i in 0..d {
                rev += (k[i] - 1 - kidx[i]) * kstrides[i];
            }
            for co in 0..cout {
                for ci in 0..cin {
                    fd[(ci * cout + co) * ksz + rev] = kd[(co * cin + ci) * ksz + kf];
                }
            }
            inc_index(&mut kidx, &k);
        }
    }
    let grad_pad: Vec<usize> = (0..d)
        .map(|i| {
            // requires k-1 >= pad, which holds for "same" padding
            k[i] - 1 - pad[i]
        })
        .collect();
    slide_window_mac(grad_out, &flipped, &grad_pad)
}

/// Gradient of `slide_window_mac` with respect to `kernel`.
pub fn slide_window_grad_kernel(
    values: &DenseTensor,
    grad_out: &DenseTensor,
    pad: &[usize],
    kernel_shape: &[usize],
) -> Result<DenseTensor> {
    let d = pad.len();
    let (b, cin) = (values.shape()[0], values.shape()[1]);
    let cout = grad_out.shape()[1];
    let k: Vec<usize> = kernel_shape[2..].to_vec();
    let o: Vec<usize> = grad_out.shape()[2..].to_vec();
    let padded = pad_spatial(values, pad);
    let psp: Vec<usize> = padded.shape()[2..].to_vec();
    let pstrides = row_major_strides(&psp);
    let psz: usize = psp.iter().product();
    let osz: usize = o.iter().product();
    let ksz: usize = k.iter().product();
    let mut grad_k = DenseTensor::zeros(kernel_shape);

    let o_inner = *o.last().unwrap();
    let n_orows = osz / o_inner;
    let pd = padded.data();
    let gd = grad_out.data();
    let gk = grad_k.data_mut();
    let mut kidx = vec![0usize; d];
    for kf in 0..ksz {
        let mut disp = 0usize;
        for i in 0..d {
            disp += kidx[i] * pstrides[i];
        }
        for bi in 0..b {
            for co in 0..cout {
                let g_base = (bi * cout + co) * osz;
                for ci in 0..cin {
                    let in_base = (bi * cin + ci) * psz;
                    let mut acc = 0.0;
                    let mut ridx = vec![0usize; d.saturating_sub(1)];
                    for r in 0..n_orows {
                        let mut src = in_base + disp;
                        for i in 0..d - 1 {
                            src += ridx[i] * pstrides[i];
                        }
                        let grow = &gd[g_base + r * o_inner..g_base + (r + 1) * o_inner];
                        let prow = &pd[src..src + o_inner];
                        for (g, p) in grow.iter().zip(prow) {
                            acc += g * p;
                        }
                        for i in (0..d.saturating_sub(1)).rev() {
                            ridx[i] += 1;
                            if ridx[i] < o[i] {
                                break;
                            }
                            ridx[i] = 0;
                        }
                    }
                    gk[(co * cin + ci) * ksz + kf] += acc;
                }
            }
        }
        inc_index(&mut kidx, &k);
    }
    Ok(grad_k)
}
