//! Reverse-mode differentiation over the tensor operation set.
//!
//! A `Tape` records an acyclic graph of tensor-valued nodes as the forward
//! pass runs. `backward` walks the nodes once in reverse construction order
//! and accumulates gradients into every `requires_grad` leaf. The
//! `finite_diff_check` helper validates analytic gradients against central
//! differences.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{
    self, concat, contract, slide_window_grad_kernel, slide_window_grad_values,
    slide_window_mac, softmax_over_axis, DenseTensor,
};

type GradFn = Box<dyn Fn(&DenseTensor) -> Result<DenseTensor>>;

struct Parent {
    id: usize,
    grad_fn: GradFn,
}

struct Node {
    value: Rc<DenseTensor>,
    requires_grad: bool,
    parents: Vec<Parent>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    pub id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn leaf(&self, value: DenseTensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Vec::new())
    }

    pub fn constant(&self, value: DenseTensor) -> Var<'_> {
        self.push(value, false, Vec::new())
    }

    fn push(&self, value: DenseTensor, requires_grad: bool, parents: Vec<Parent>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Rc<DenseTensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&DenseTensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

/// Run reverse-mode accumulation from a scalar loss node.
pub fn backward(loss: Var<'_>) -> Result<Gradients> {
    if loss.value().numel() != 1 {
        return Err(Error::usage(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.value().shape()
        )));
    }
    let nodes = loss.tape.nodes.borrow();
    let mut grads: Vec<Option<DenseTensor>> = vec![None; nodes.len()];
    grads[loss.id] = Some(DenseTensor::full(loss.value().shape(), 1.0));
    for id in (0..=loss.id).rev() {
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = grads[id].clone() else { continue };
        for parent in &node.parents {
            if !nodes[parent.id].requires_grad {
                continue;
            }
            let pg = (parent.grad_fn)(&g)?;
            debug_assert_eq!(pg.shape(), nodes[parent.id].value.shape());
            grads[parent.id] = Some(match grads[parent.id].take() {
                Some(acc) => acc.add(&pg)?,
                None => pg,
            });
        }
    }
    Ok(Gradients { grads })
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<DenseTensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(
        &self,
        value: DenseTensor,
        grad_fn: impl Fn(&DenseTensor) -> Result<DenseTensor> + 'static,
    ) -> Var<'t> {
        let req = self.tape.requires(self.id);
        let parents = if req {
            vec![Parent {
                id: self.id,
                grad_fn: Box::new(grad_fn),
            }]
        } else {
            Vec::new()
        };
        self.tape.push(value, req, parents)
    }

    fn binary(
        &self,
        other: Var<'t>,
        value: DenseTensor,
        grad_a: impl Fn(&DenseTensor) -> Result<DenseTensor> + 'static,
        grad_b: impl Fn(&DenseTensor) -> Result<DenseTensor> + 'static,
    ) -> Var<'t> {
        let ra = self.tape.requires(self.id);
        let rb = self.tape.requires(other.id);
        let mut parents = Vec::new();
        if ra {
            parents.push(Parent {
                id: self.id,
                grad_fn: Box::new(grad_a),
            });
        }
        if rb {
            parents.push(Parent {
                id: other.id,
                grad_fn: Box::new(grad_b),
            });
        }
        self.tape.push(value, ra || rb, parents)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().add(&other.value())?;
        Ok(self.binary(other, v, |g| Ok(g.clone()), |g| Ok(g.clone())))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().sub(&other.value())?;
        Ok(self.binary(other, v, |g| Ok(g.clone()), |g| Ok(g.scale(-1.0))))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let v = a.mul(&b)?;
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        Ok(self.binary(
            other,
            v,
            move |g| g.mul(&bc),
            move |g| g.mul(&ac),
        ))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(self.value().scale(s), move |g| Ok(g.scale(s)))
    }

    pub fn relu(&self) -> Var<'t> {
        let x = self.value();
        let v = x.map(|v| v.max(0.0));
        self.unary(v, move |g| {
            g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let old = self.shape();
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, move |g| g.reshape(&old)))
    }

    pub fn merge_axes(&self, first: usize) -> Result<Var<'t>> {
        let old = self.shape();
        let v = self.value().merge_axes(first)?;
        Ok(self.unary(v, move |g| g.reshape(&old)))
    }

    pub fn split_axis(&self, axis: usize, factor: usize) -> Result<Var<'t>> {
        let old = self.shape();
        let v = self.value().split_axis(axis, factor)?;
        Ok(self.unary(v, move |g| g.reshape(&old)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.value().permute(perm)?;
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.unary(v, move |g| g.permute(&inv)))
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Result<Var<'t>> {
        let old = self.shape();
        let v = self.value().broadcast_to(target)?;
        let target = target.to_vec();
        Ok(self.unary(v, move |g| {
            // sum out broadcast axes, then restore the original rank
            let pad = target.len() - old.len();
            let mut g = g.clone();
            for _ in 0..pad {
                g = g.sum_axis(0)?;
            }
            for (d, &len) in old.iter().enumerate() {
                if len == 1 && g.shape()[d] != 1 {
                    let mut keep = g.shape().to_vec();
                    keep[d] = 1;
                    g = g.sum_axis(d)?.reshape(&keep)?;
                }
            }
            g.reshape(&old)
        }))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let shape = self.shape();
        let v = DenseTensor::scalar(self.value().sum());
        self.unary(v, move |g| {
            let gv = g.data()[0];
            Ok(DenseTensor::full(&shape, gv))
        })
    }

    pub fn contract(&self, other: Var<'t>, spec: &str) -> Result<Var<'t>> {
        let spec_clean: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (inputs, out_l) = spec_clean
            .split_once("->")
            .ok_or_else(|| Error::usage(format!("contraction spec '{spec}' lacks '->'")))?;
        let (a_l, b_l) = inputs
            .split_once(',')
            .ok_or_else(|| Error::usage(format!("spec '{spec}' needs two operands")))?;
        for c in a_l.chars() {
            if !b_l.contains(c) && !out_l.contains(c) {
                return Err(Error::usage(format!(
                    "label '{c}' of the first operand is summed out; not differentiable here"
                )));
            }
        }
        for c in b_l.chars() {
            if !a_l.contains(c) && !out_l.contains(c) {
                return Err(Error::usage(format!(
                    "label '{c}' of the second operand is summed out; not differentiable here"
                )));
            }
        }
        let a = self.value();
        let b = other.value();
        let v = contract(&a, &b, spec)?;
        let da_spec = format!("{out_l},{b_l}->{a_l}");
        let db_spec = format!("{out_l},{a_l}->{b_l}");
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        Ok(self.binary(
            other,
            v,
            move |g| contract(g, &bc, &da_spec),
            move |g| contract(g, &ac, &db_spec),
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let y = softmax_over_axis(&self.value(), axis)?;
        let yc = y.clone();
        let shape = y.shape().to_vec();
        Ok(self.unary(y, move |g| {
            // dx = y * (g - sum(g*y) along axis), Jacobian-vector form
            let gy = g.mul(&yc)?;
            let s = gy.sum_axis(axis)?;
            // re-insert the reduced axis for broadcasting
            let mut keep = shape.clone();
            keep[axis] = 1;
            let s = s.reshape(&keep)?.broadcast_to(&shape)?;
            yc.mul(&g.sub(&s)?)
        }))
    }

    /// Sliding-window multiply-accumulate; differentiable in both operands.
    pub fn slide_window(&self, kernel: Var<'t>, pad: &[usize]) -> Result<Var<'t>> {
        let values = self.value();
        let ker = kernel.value();
        let v = slide_window_mac(&values, &ker, pad)?;
        let pad_a = pad.to_vec();
        let pad_b = pad.to_vec();
        let kshape = ker.shape().to_vec();
        let (vc, kc) = (Rc::clone(&values), Rc::clone(&ker));
        Ok(self.binary(
            kernel,
            v,
            move |g| slide_window_grad_values(g, &kc, &pad_a),
            move |g| slide_window_grad_kernel(&vc, g, &pad_b, &kshape),
        ))
    }

    pub fn avg_pool2(&self) -> Result<Var<'t>> {
        let v = tensor::avg_pool2(&self.value())?;
        Ok(self.unary(v, |g| Ok(tensor::upsample_nearest2(g)?.scale(0.25))))
    }

    pub fn upsample_nearest2(&self) -> Result<Var<'t>> {
        let v = tensor::upsample_nearest2(&self.value())?;
        Ok(self.unary(v, |g| tensor::sum_pool2(g)))
    }

    /// Instance normalization over the trailing two axes of `(B, C, H, W)`,
    /// with per-channel scale and shift.
    pub fn instance_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 4 {
            return Err(Error::dim(format!(
                "instance_norm needs (B,C,H,W), got {:?}",
                x.shape()
            )));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let g_val = gamma.value();
        let b_val = beta.value();
        if g_val.shape() != [c] || b_val.shape() != [c] {
            return Err(Error::dim(format!(
                "instance_norm scale/shift must have shape [{c}]"
            )));
        }
        let n = (h * w) as f64;
        let mut xhat = DenseTensor::zeros(x.shape());
        let mut inv_std = vec![0.0f64; b * c];
        {
            let xd = x.data();
            let od = xhat.data_mut();
            for bc in 0..b * c {
                let base = bc * h * w;
                let row = &xd[base..base + h * w];
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[bc] = is;
                for (o, v) in od[base..base + h * w].iter_mut().zip(row) {
                    *o = (v - mean) * is;
                }
            }
        }
        let mut out = DenseTensor::zeros(x.shape());
        {
            let xh = xhat.data();
            let od = out.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    let (ga, be) = (g_val.data()[ci], b_val.data()[ci]);
                    for i in 0..h * w {
                        od[base + i] = ga * xh[base + i] + be;
                    }
                }
            }
        }

        let ra = self.tape.requires(self.id);
        let rg = gamma.tape.requires(gamma.id);
        let rb = beta.tape.requires(beta.id);
        let mut parents = Vec::new();
        if ra {
            let xhat_c = xhat.clone();
            let g_c = Rc::clone(&g_val);
            let inv = inv_std.clone();
            parents.push(Parent {
                id: self.id,
                grad_fn: Box::new(move |g: &DenseTensor| {
                    let mut dx = DenseTensor::zeros(g.shape());
                    let gd = g.data();
                    let xh = xhat_c.data();
                    let od = dx.data_mut();
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * w;
                            let ga = g_c.data()[ci];
                            let is = inv[bi * c + ci];
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for i in 0..h * w {
                                let dxh = gd[base + i] * ga;
                                sum_g += dxh;
                                sum_gx += dxh * xh[base + i];
                            }
                            let mg = sum_g / n;
                            let mgx = sum_gx / n;
                            for i in 0..h * w {
                                let dxh = gd[base + i] * ga;
                                od[base + i] = is * (dxh - mg - xh[base + i] * mgx);
                            }
                        }
                    }
                    Ok(dx)
                }),
            });
        }
        if rg {
            let xhat_c = xhat.clone();
            parents.push(Parent {
                id: gamma.id,
                grad_fn: Box::new(move |g: &DenseTensor| {
                    let mut dg = DenseTensor::zeros(&[c]);
                    let gd = g.data();
                    let xh = xhat_c.data();
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * w;
                            let mut acc = 0.0;
                            for i in 0..h * w {
                                acc += gd[base + i] * xh[base + i];
                            }
                            dg.data_mut()[ci] += acc;
                        }
                    }
                    Ok(dg)
                }),
            });
        }
        if rb {
            parents.push(Parent {
                id: beta.id,
                grad_fn: Box::new(move |g: &DenseTensor| {
                    let mut db = DenseTensor::zeros(&[c]);
                    let gd = g.data();
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * w;
                            db.data_mut()[ci] += gd[base..base + h * w].iter().sum::<f64>();
                        }
                    }
                    Ok(db)
                }),
            });
        }
        Ok(self.tape.push(out, ra || rg || rb, parents))
    }

    /// Per-pixel matrix application: self is `(b,k,n)`, `m` is `(b,k,v,n)`,
    /// result is `y[b,v,n] = sum_k self[b,k,n] * m[b,k,v,n]`.
    /// Windowed accumulation with position-dependent tap weights; `self` is
    /// the `(b, c, s..)` values operand of `tensor::local_apply_mac`.
    pub fn local_apply(&self, gains: Var<'t>, win: &[usize], pad: &[usize]) -> Result<Var<'t>> {
        let values = self.value();
        let g_val = gains.value();
        let out = tensor::local_apply_mac(&values, &g_val, win, pad)?;
        let vshape = values.shape().to_vec();
        let (win_a, pad_a) = (win.to_vec(), pad.to_vec());
        let (win_b, pad_b) = (win.to_vec(), pad.to_vec());
        let (vc, gc) = (Rc::clone(&values), Rc::clone(&g_val));
        Ok(self.binary(
            gains,
            out,
            move |g| tensor::local_apply_grad_values(g, &gc, &vshape, &win_a, &pad_a),
            move |g| tensor::local_apply_grad_gains(g, &vc, &win_b, &pad_b),
        ))
    }

    /// Numerically stable mean binary cross-entropy from logits.
    pub fn bce_with_logits(&self, labels: &DenseTensor) -> Result<Var<'t>> {
        self.bce_with_logits_weighted(labels, 1.0)
    }

    /// BCE with the positive class weighted by `pos_weight`: each element
    /// gets weight `1 + (pos_weight - 1) * y`, and the loss is the weighted
    /// mean. `pos_weight = 1` is the plain mean.
    pub fn bce_with_logits_weighted(
        &self,
        labels: &DenseTensor,
        pos_weight: f64,
    ) -> Result<Var<'t>> {
        let z = self.value();
        if z.shape() != labels.shape() {
            return Err(Error::dim(format!(
                "bce shapes differ: {:?} vs {:?}",
                z.shape(),
                labels.shape()
            )));
        }
        if !(pos_weight > 0.0 && pos_weight.is_finite()) {
            return Err(Error::config(format!(
                "pos_weight {pos_weight} must be a positive finite number"
            )));
        }
        z.assert_finite("bce logits")?;
        let mut loss = 0.0;
        let mut wsum = 0.0;
        for (&zv, &y) in z.data().iter().zip(labels.data()) {
            // max(z,0) - z*y + ln(1 + e^{-|z|})
            let w = 1.0 + (pos_weight - 1.0) * y;
            loss += w * (zv.max(0.0) - zv * y + (-zv.abs()).exp().ln_1p());
            wsum += w;
        }
        loss /= wsum;
        let zc = Rc::clone(&z);
        let labels = labels.clone();
        Ok(self.unary(DenseTensor::scalar(loss), move |g| {
            let gv = g.data()[0];
            zc.zip_map(&labels, |zv, y| {
                let s = 1.0 / (1.0 + (-zv).exp());
                let w = 1.0 + (pos_weight - 1.0) * y;
                gv * w * (s - y) / wsum
            })
        }))
    }
}

/// Concatenate along one axis; differentiable in every part.
pub fn concat_vars<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = *parts
        .first()
        .ok_or_else(|| Error::usage("concat of zero vars"))?;
    let values: Vec<Rc<DenseTensor>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&DenseTensor> = values.iter().map(|v| v.as_ref()).collect();
    let out = concat(&refs, axis)?;
    let mut parents = Vec::new();
    let mut start = 0usize;
    let mut any = false;
    for (p, v) in parts.iter().zip(&values) {
        let len = v.shape()[axis];
        if first.tape.requires(p.id) {
            any = true;
            let s = start;
            parents.push(Parent {
                id: p.id,
                grad_fn: Box::new(move |g: &DenseTensor| g.narrow(axis, s, len)),
            });
        }
        start += len;
    }
    Ok(first.tape.push(out, any, parents))
}

/// Max over sampled coordinates of the relative error between analytic
/// gradients and central finite differences.
///
/// `f` evaluates the scalar objective from the current leaf values. `leaves`
/// and `analytic` run in parallel; up to `coords_per_leaf` coordinates are
/// sampled per tensor, deterministically from `seed`.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[DenseTensor]) -> Result<f64>,
    leaves: &[DenseTensor],
    analytic: &[DenseTensor],
    eps: f64,
    coords_per_leaf: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    if eps <= 0.0 {
        return Err(Error::usage("finite_diff_check needs eps > 0"));
    }
    if leaves.len() != analytic.len() {
        return Err(Error::usage("leaves/analytic arity mismatch"));
    }
    let mut rng = crate::rng::rng(seed, "finite-diff");
    let mut worst: f64 = 0.0;
    let mut work: Vec<DenseTensor> = leaves.to_vec();
    for (li, grad) in analytic.iter().enumerate() {
        let n = leaves[li].numel();
        let picks: Vec<usize> = if n <= coords_per_leaf {
            (0..n).collect()
        } else {
            (0..coords_per_leaf).map(|_| rng.gen_range(0..n)).collect()
        };
        for ci in picks {
            let orig = work[li].data()[ci];
            work[li].data_mut()[ci] = orig + eps;
            let fp = f(&work)?;
            work[li].data_mut()[ci] = orig - eps;
            let fm = f(&work)?;
            work[li].data_mut()[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::numeric("non-finite objective in finite_diff_check"));
            }
            let fd = (fp - fm) / (2.0 * eps);
            let a = grad.data()[ci];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
