//! U-Net segmentation model with Lambda+ encoder layers.
//!
//! Encoder level `i` maps `c_in -> base*2^i` channels with one Lambda+ layer
//! followed by instance norm and ReLU; levels are joined by 2x average
//! pooling. The decoder mirrors the encoder with nearest-neighbor upsampling,
//! skip concatenation, and a 3x3 convolution per level. A 1x1 convolution
//! head produces one logit per voxel.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_vars, Tape, Var};
use crate::error::{Error, Result};
use crate::lambda::{forward_fast_vars, LambdaPlusConfig, LambdaPlusWeights, LambdaVars, Variant};
use crate::rng;
use crate::tensor::DenseTensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub k: usize,
    pub u: usize,
    pub r: usize,
    pub t_k: usize,
    pub variant: Variant,
    pub threshold: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 3,
            base_channels: 16,
            in_channels: 2,
            k: 8,
            u: 1,
            r: 3,
            t_k: 3,
            variant: Variant::TwoPointFiveD,
            threshold: 0.5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config("need at least 2 levels"));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::config("channel counts must be >= 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!(
                "threshold {} must lie strictly inside (0,1)",
                self.threshold
            )));
        }
        for i in 0..self.levels {
            self.lambda_cfg(i).validate()?;
        }
        Ok(())
    }

    fn lambda_cfg(&self, level: usize) -> LambdaPlusConfig {
        let c_in = if level == 0 {
            self.in_channels
        } else {
            self.base_channels << (level - 1)
        };
        LambdaPlusConfig {
            c: c_in,
            k: self.k,
            v: self.base_channels << level,
            u: self.u,
            r: self.r,
            t_k: self.t_k,
            variant: self.variant,
        }
    }

    /// Spatial dims must survive `levels-1` rounds of 2x pooling.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << (self.levels - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::dim(format!(
                "spatial dims {h}x{w} must be divisible by {div} for {} levels",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Model parameters as a flat, deterministically ordered name -> tensor list.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel {
    pub config: UNetConfig,
    params: Vec<(String, DenseTensor)>,
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

impl UNetModel {
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params: Vec<(String, DenseTensor)> = Vec::new();
        for i in 0..config.levels {
            let cfg = config.lambda_cfg(i);
            let w = LambdaPlusWeights::init(&cfg, rng::derive_idx(seed, "enc", i as u64))?;
            let c_out = cfg.v;
            params.push((format!("enc{i}.wq"), w.w_q));
            params.push((format!("enc{i}.wk"), w.w_k));
            params.push((format!("enc{i}.wv"), w.w_v));
            params.push((format!("enc{i}.e"), w.e));
            if let Some(f) = w.f {
                params.push((format!("enc{i}.f"), f));
            }
            params.push((format!("enc{i}.gamma"), DenseTensor::full(&[c_out], 1.0)));
            params.push((format!("enc{i}.beta"), DenseTensor::zeros(&[c_out])));
        }
        for i in (0..config.levels - 1).rev() {
            let c_skip = config.base_channels << i;
            let c_in = (config.base_channels << (i + 1)) + c_skip;
            let bound = 1.0 / ((c_in * 9) as f64).sqrt();
            let mut r = rng::rng(rng::derive_idx(seed, "dec", i as u64), "conv");
            params.push((
                format!("dec{i}.w"),
                DenseTensor::from_fn(&[c_skip, c_in, 3, 3], |_| q32(r.gen_range(-bound..bound))),
            ));
            params.push((format!("dec{i}.b"), DenseTensor::zeros(&[c_skip])));
            params.push((format!("dec{i}.gamma"), DenseTensor::full(&[c_skip], 1.0)));
            params.push((format!("dec{i}.beta"), DenseTensor::zeros(&[c_skip])));
        }
        let c = config.base_channels;
        let bound = 1.0 / (c as f64).sqrt();
        let mut r = rng::rng(rng::derive(seed, "head"), "conv");
        params.push((
            "head.w".to_string(),
            DenseTensor::from_fn(&[1, c, 1, 1], |_| q32(r.gen_range(-bound..bound))),
        ));
        params.push(("head.b".to_string(), DenseTensor::zeros(&[1])));
        Ok(UNetModel { config, params })
    }

    pub fn params(&self) -> &[(String, DenseTensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, DenseTensor)] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter on a tape, in declaration order.
    pub fn vars<'t>(&self, tape: &'t Tape, requires_grad: bool) -> UNetVars<'t> {
        UNetVars {
            config: self.config,
            entries: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Forward pass without gradient bookkeeping. Input `(b,t,h,w,c_in)`,
    /// logits `(b,t,h,w)`.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let tape = Tape::new();
        let vars = self.vars(&tape, false);
        let xv = tape.constant(x.clone());
        let logits = forward_unet(xv, &vars)?;
        Ok((*logits.value()).clone())
    }

    /// Binary mask `(t,h,w)` from a single case input `(t,h,w,c_in)`:
    /// sigmoid(logit) >= threshold.
    pub fn predict_mask(&self, input: &DenseTensor) -> Result<DenseTensor> {
        if input.ndim() != 4 {
            return Err(Error::dim(format!(
                "expected case input (t,h,w,c), got {:?}",
                input.shape()
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        let logits = self.forward(&input.clone().reshape(&shape)?)?;
        let thr = self.config.threshold;
        let mask = logits.map(|z| {
            let p = 1.0 / (1.0 + (-z).exp());
            if p >= thr {
                1.0
            } else {
                0.0
            }
        });
        mask.reshape(input.shape()[..3].to_vec().as_slice())
    }
}

/// Tape-registered parameters for one training step.
pub struct UNetVars<'t> {
    pub config: UNetConfig,
    entries: Vec<(String, Var<'t>)>,
}

impl<'t> UNetVars<'t> {
    pub fn entries(&self) -> &[(String, Var<'t>)] {
        &self.entries
    }

    fn get(&self, name: &str) -> Var<'t> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing"))
            .1
    }

    fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
            .copied()
    }
}

fn conv2<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, pad: usize) -> Result<Var<'t>> {
    let out = x.slide_window(w, &[pad, pad])?;
    let shape = out.shape();
    let bias = b
        .reshape(&[1, shape[1], 1, 1])?
        .broadcast_to(&shape)?;
    out.add(bias)
}

/// Full model forward on the tape: `x` is `(b,t,h,w,c_in)`, result is
/// per-voxel logits `(b,t,h,w)`.
pub fn forward_unet<'t>(x: Var<'t>, vars: &UNetVars<'t>) -> Result<Var<'t>> {
    let cfg = &vars.config;
    let shape = x.shape();
    if shape.len() != 5 || shape[4] != cfg.in_channels {
        return Err(Error::dim(format!(
            "expected (b,t,h,w,{}), got {:?}",
            cfg.in_channels, shape
        )));
    }
    let (b, t) = (shape[0], shape[1]);
    cfg.check_spatial(shape[2], shape[3])?;

    // encoder: lambda layers see (b,t,h,w,c); norm/pool see (bt,c,h,w)
    let mut feat = x;
    let mut skips: Vec<Var<'t>> = Vec::new();
    let mut img = feat; // reassigned every level
    for i in 0..cfg.levels {
        let lcfg = cfg.lambda_cfg(i);
        let lw = LambdaVars {
            w_q: vars.get(&format!("enc{i}.wq")),
            w_k: vars.get(&format!("enc{i}.wk")),
            w_v: vars.get(&format!("enc{i}.wv")),
            e: vars.get(&format!("enc{i}.e")),
            f: vars.try_get(&format!("enc{i}.f")),
        };
        let y = forward_fast_vars(feat, &lw, &lcfg)?; // (b,t,h,w,c_out)
        img = y
            .merge_axes(0)?
            .permute(&[0, 3, 1, 2])?
            .instance_norm(
                vars.get(&format!("enc{i}.gamma")),
                vars.get(&format!("enc{i}.beta")),
                NORM_EPS,
            )?
            .relu();
        if i + 1 < cfg.levels {
            skips.push(img);
            feat = img
                .avg_pool2()?
                .permute(&[0, 2, 3, 1])?
                .split_axis(0, t)?;
        }
    }

    // decoder on (bt,c,h,w)
    let mut d = img;
    for i in (0..cfg.levels - 1).rev() {
        let up = d.upsample_nearest2()?;
        let cat = concat_vars(&[up, skips[i]], 1)?;
        d = conv2(
            cat,
            vars.get(&format!("dec{i}.w")),
            vars.get(&format!("dec{i}.b")),
            1,
        )?
        .instance_norm(
            vars.get(&format!("dec{i}.gamma")),
            vars.get(&format!("dec{i}.beta")),
            NORM_EPS,
        )?
        .relu();
    }

    let logits = conv2(d, vars.get("head.w"), vars.get("head.b"), 0)?;
    let s = logits.shape(); // (bt,1,h,w)
    logits.reshape(&[b * t, s[2], s[3]])?.split_axis(0, t)
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic line, JSON manifest line, raw little-endian f32
// blob holding all parameters in declaration order.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &str = "LUC1";

#[derive(Serialize, Deserialize)]
struct CkptManifest {
    config: UNetConfig,
    params: Vec<(String, Vec<usize>)>,
}

pub fn save_model(model: &UNetModel, path: &Path) -> Result<()> {
    let manifest = CkptManifest {
        config: model.config,
        params: model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect(),
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CKPT_MAGIC.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(serde_json::to_string(&manifest).unwrap().as_bytes());
    bytes.push(b'\n');
    for (_, t) in &model.params {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_model(path: &Path) -> Result<UNetModel> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let m = CKPT_MAGIC.len();
    if buf.len() < m + 1 || &buf[..m] != CKPT_MAGIC.as_bytes() || buf[m] != b'\n' {
        return Err(Error::format(0, format!("missing '{CKPT_MAGIC}' magic")));
    }
    let hstart = m + 1;
    let rel = buf[hstart..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(buf.len() as u64, "unterminated manifest"))?;
    let hend = hstart + rel;
    let manifest: CkptManifest = serde_json::from_slice(&buf[hstart..hend])
        .map_err(|e| Error::format(hstart as u64, format!("bad manifest JSON: {e}")))?;
    manifest.config.validate()?;
    let total: usize = manifest.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let blob_start = hend + 1;
    if buf.len() != blob_start + total * 4 {
        return Err(Error::format(
            buf.len() as u64,
            format!(
                "manifest implies {} bytes total, file has {}",
                blob_start + total * 4,
                buf.len()
            ),
        ));
    }
    let mut params = Vec::with_capacity(manifest.params.len());
    let mut off = blob_start;
    for (name, shape) in manifest.params {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let o = off + i * 4;
            data.push(f32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]) as f64);
        }
        off += n * 4;
        params.push((name, DenseTensor::new(shape, data)?));
    }
    let model = UNetModel {
        config: manifest.config,
        params,
    };
    // reject checkpoints whose parameter list does not match the config
    let expected = UNetModel::build(manifest.config, 0)?;
    if expected.params.len() != model.params.len()
        || expected
            .params
            .iter()
            .zip(&model.params)
            .any(|((an, at), (bn, bt))| an != bn || at.shape() != bt.shape())
    {
        return Err(Error::format(
            hstart as u64,
            "parameter list does not match config",
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, finite_diff_check};

    fn small_cfg() -> UNetConfig {
        UNetConfig {
            levels: 2,
            base_channels: 4,
            in_channels: 2,
            k: 3,
            u: 1,
            r: 3,
            t_k: 3,
            variant: Variant::TwoPointFiveD,
            threshold: 0.5,
        }
    }

    fn rand_input(shape: &[usize], seed: u64) -> DenseTensor {
        let mut r = rng::rng(seed, "unet-test-input");
        DenseTensor::from_fn(shape, |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let a = UNetModel::build(small_cfg(), 5).unwrap();
        let b = UNetModel::build(small_cfg(), 5).unwrap();
        assert_eq!(a, b);
        let c = UNetModel::build(small_cfg(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // enc0 (c=2,k=3,v=4): 6+6+8+27+9 weights, 4+4 norm  = 64
        // enc1 (c=4,k=3,v=8): 12+12+32+27+9, 8+8            = 108
        // dec0 (12->4, 3x3): 432+4 conv, 4+4 norm           = 444
        // head (4->1, 1x1): 4+1                             = 5
        let model = UNetModel::build(small_cfg(), 0).unwrap();
        assert_eq!(model.param_count(), 64 + 108 + 444 + 5);
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let model = UNetModel::build(small_cfg(), 1).unwrap();
        let x = rand_input(&[1, 3, 8, 8, 2], 2);
        let logits = model.forward(&x).unwrap();
        assert_eq!(logits.shape(), &[1, 3, 8, 8]);
        logits.assert_finite("logits").unwrap();
        let mask = model
            .predict_mask(&rand_input(&[3, 8, 8, 2], 3))
            .unwrap();
        assert_eq!(mask.shape(), &[3, 8, 8]);
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn rejects_indivisible_spatial_dims() {
        let cfg = UNetConfig {
            levels: 3,
            ..small_cfg()
        };
        let model = UNetModel::build(cfg, 0).unwrap();
        let x = rand_input(&[1, 2, 6, 8, 2], 0);
        assert!(matches!(model.forward(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = UNetModel::build(small_cfg(), 9).unwrap();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
        let x = rand_input(&[1, 2, 8, 8, 2], 4);
        let ya = model.forward(&x).unwrap();
        let yb = back.forward(&x).unwrap();
        let bits = |t: &DenseTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ya), bits(&yb));
    }

    #[test]
    fn checkpoint_save_is_stable_after_load() {
        // a trained parameter is generally not f32-exact; a loaded one is
        let dir = tempfile::tempdir().unwrap();
        let mut model = UNetModel::build(small_cfg(), 9).unwrap();
        model.params_mut()[0].1.data_mut()[0] = 0.1234567890123456789;
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_model(&model, &p1).unwrap();
        let back = load_model(&p1).unwrap();
        save_model(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_rejects_corrupt_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = UNetModel::build(small_cfg(), 0).unwrap();
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[2] = b'X';
        std::fs::write(&path, &bad).unwrap();
        match load_model(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn two_d_variant_treats_slices_independently() {
        let cfg = UNetConfig {
            variant: Variant::TwoD,
            ..small_cfg()
        };
        let model = UNetModel::build(cfg, 3).unwrap();
        let x = rand_input(&[1, 4, 8, 8, 2], 7);
        let y = model.forward(&x).unwrap();
        // reverse the slice order of the input
        let perm = [3usize, 2, 1, 0];
        let xp = DenseTensor::from_fn(x.shape(), |idx| {
            x.at(&[idx[0], perm[idx[1]], idx[2], idx[3], idx[4]])
        });
        let yp = model.forward(&xp).unwrap();
        for ti in 0..4 {
            for yy in 0..8 {
                for xx in 0..8 {
                    assert_eq!(
                        y.at(&[0, perm[ti], yy, xx]).to_bits(),
                        yp.at(&[0, ti, yy, xx]).to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = UNetConfig {
            base_channels: 2,
            k: 2,
            ..small_cfg()
        };
        let model = UNetModel::build(cfg, 11).unwrap();
        let x = rand_input(&[1, 2, 4, 4, 2], 12);
        let labels = rand_input(&[1, 2, 4, 4], 13).map(|v| if v > 0.5 { 1.0 } else { 0.0 });

        let tape = Tape::new();
        let vars = model.vars(&tape, true);
        let logits = forward_unet(tape.constant(x.clone()), &vars).unwrap();
        let loss = logits.bce_with_logits(&labels).unwrap();
        let grads = backward(loss).unwrap();
        let leaves: Vec<DenseTensor> =
            model.params().iter().map(|(_, t)| t.clone()).collect();
        let analytic: Vec<DenseTensor> = vars
            .entries()
            .iter()
            .map(|(n, v)| {
                grads
                    .get(*v)
                    .unwrap_or_else(|| panic!("no grad for {n}"))
                    .clone()
            })
            .collect();

        let mut f = |work: &[DenseTensor]| -> Result<f64> {
            let mut m = model.clone();
            for (slot, t) in m.params_mut().iter_mut().zip(work) {
                slot.1 = t.clone();
            }
            let z = m.forward(&x)?;
            // independent stable mean-BCE
            let mut acc = 0.0;
            for (zi, yi) in z.data().iter().zip(labels.data()) {
                acc += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
            }
            Ok(acc / z.numel() as f64)
        };
        let err = finite_diff_check(&mut f, &leaves, &analytic, 1e-5, 3, 21).unwrap();
        assert!(err < 1e-4, "max rel grad error {err}");
    }
}
