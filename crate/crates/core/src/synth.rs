//! Synthetic anisotropic volume generation and the V25D1 on-disk format.
//!
//! The generator targets one geometric property: dense, smooth structure
//! within each slice combined with abrupt change across slices. Lesions are
//! per-slice ellipses whose centers and radii jitter independently per slice
//! and persist over a short contiguous slice range. Single-slice distractor
//! blobs share the lesions' in-slice appearance but never persist, so
//! cross-slice context is the one signal that separates them.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenParams {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// inclusive lesion count range
    pub lesion_count: (usize, usize),
    /// in-slice lesion radius range in pixels
    pub radius: (f64, f64),
    /// inclusive range of contiguous slices a lesion spans
    pub slice_extent: (usize, usize),
    /// per-slice center jitter amplitude in pixels
    pub jitter: f64,
    /// additive Gaussian noise sigma
    pub noise: f64,
    /// inclusive count range of single-slice distractor blobs
    pub distractor_count: (usize, usize),
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            t: 8,
            h: 64,
            w: 64,
            lesion_count: (1, 3),
            radius: (3.0, 10.0),
            slice_extent: (1, 3),
            jitter: 4.0,
            noise: 0.05,
            distractor_count: (4, 8),
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.t < 1 || self.h < 1 || self.w < 1 {
            return Err(Error::config("volume dims must be >= 1"));
        }
        if self.lesion_count.0 > self.lesion_count.1
            || self.radius.0 > self.radius.1
            || self.slice_extent.0 > self.slice_extent.1
            || self.distractor_count.0 > self.distractor_count.1
        {
            return Err(Error::config("empty parameter range"));
        }
        if self.slice_extent.1 > self.t {
            return Err(Error::config(format!(
                "slice extent max {} exceeds slice count {}",
                self.slice_extent.1, self.t
            )));
        }
        if self.slice_extent.0 < 1 && self.lesion_count.1 > 0 {
            return Err(Error::config("slice extent must be >= 1"));
        }
        if self.radius.0 <= 0.0 || self.jitter < 0.0 || self.noise < 0.0 {
            return Err(Error::config("radius must be positive; jitter/noise nonnegative"));
        }
        Ok(())
    }
}

/// One synthetic case: two-channel input volume plus binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeCase {
    pub id: String,
    /// (t, h, w, 2), values in [0,1], exactly representable in f32
    pub input: DenseTensor,
    /// (t, h, w), values in {0,1}
    pub truth: DenseTensor,
    pub params: GenParams,
    pub seed: u64,
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Deterministic synthetic case. Channel 0 is smooth anatomy plus lesion
/// hyperintensity plus noise; channel 1 is a correlated variant with its own
/// noise.
pub fn generate_case(params: &GenParams, seed: u64, id: &str) -> Result<VolumeCase> {
    params.validate()?;
    let (t, h, w) = (params.t, params.h, params.w);
    let mut r = rng::rng(seed, "case");

    // smooth anatomy: a few broad bumps drifting slowly across slices
    let n_bumps = r.gen_range(3..=5);
    let bumps: Vec<(f64, f64, f64, f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            (
                r.gen_range(0.0..w as f64),      // cx
                r.gen_range(0.0..h as f64),      // cy
                r.gen_range(0.15..0.35),         // amplitude
                r.gen_range(8.0..22.0),          // sigma
                r.gen_range(-1.0..1.0),          // per-slice drift x
                r.gen_range(-1.0..1.0),          // per-slice drift y
            )
        })
        .collect();

    // lesions: jittered ellipses over a short contiguous slice range
    let n_lesions = r.gen_range(params.lesion_count.0..=params.lesion_count.1);
    let margin = params.radius.1 + params.jitter;
    let mut lesion_blobs: Vec<Vec<Blob>> = vec![Vec::new(); t];
    for _ in 0..n_lesions {
        let cx = r.gen_range(margin..(w as f64 - margin).max(margin + 1e-9));
        let cy = r.gen_range(margin..(h as f64 - margin).max(margin + 1e-9));
        let rx = r.gen_range(params.radius.0..=params.radius.1);
        let ry = r.gen_range(params.radius.0..=params.radius.1);
        let extent = r.gen_range(params.slice_extent.0..=params.slice_extent.1);
        let t0 = r.gen_range(0..=t - extent);
        for ti in t0..t0 + extent {
            let j = params.jitter;
            let (jx, jy) = if j > 0.0 {
                (r.gen_range(-j..=j), r.gen_range(-j..=j))
            } else {
                (0.0, 0.0)
            };
            let scale = if j > 0.0 { r.gen_range(0.75..=1.25) } else { 1.0 };
            lesion_blobs[ti].push(Blob {
                cx: cx + jx,
                cy: cy + jy,
                rx: rx * scale,
                ry: ry * scale,
            });
        }
    }

    // distractors: lesion-like blobs confined to a single slice, not labeled
    let n_distractors = r.gen_range(params.distractor_count.0..=params.distractor_count.1);
    let mut distractor_blobs: Vec<Vec<Blob>> = vec![Vec::new(); t];
    for _ in 0..n_distractors {
        let ti = r.gen_range(0..t);
        let rad_hi = params.radius.1.min(6.0).max(params.radius.0);
        distractor_blobs[ti].push(Blob {
            cx: r.gen_range(margin..(w as f64 - margin).max(margin + 1e-9)),
            cy: r.gen_range(margin..(h as f64 - margin).max(margin + 1e-9)),
            rx: r.gen_range(params.radius.0..=rad_hi),
            ry: r.gen_range(params.radius.0..=rad_hi),
        });
    }

    let noise = Normal::new(0.0, params.noise.max(1e-300)).unwrap();
    let mut input = DenseTensor::zeros(&[t, h, w, 2]);
    let mut truth = DenseTensor::zeros(&[t, h, w]);
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let mut anatomy = 0.12;
                for &(cx, cy, amp, sigma, dx, dy) in &bumps {
                    let ddx = xf - (cx + dx * ti as f64);
                    let ddy = yf - (cy + dy * ti as f64);
                    anatomy += amp * (-(ddx * ddx + ddy * ddy) / (2.0 * sigma * sigma)).exp();
                }
                let lesion = lesion_blobs[ti].iter().any(|b| b.contains(xf, yf));
                let distractor = distractor_blobs[ti].iter().any(|b| b.contains(xf, yf));
                let bump = if lesion || distractor { 0.35 } else { 0.0 };
                let n0 = if params.noise > 0.0 { noise.sample(&mut r) } else { 0.0 };
                let n1 = if params.noise > 0.0 { noise.sample(&mut r) } else { 0.0 };
                let ch0 = (anatomy + bump + n0).clamp(0.0, 1.0);
                let ch1 = (0.6 * anatomy + 1.2 * bump + 0.05 + n1).clamp(0.0, 1.0);
                input.set(&[ti, y, x, 0], q32(ch0));
                input.set(&[ti, y, x, 1], q32(ch1));
                if lesion {
                    truth.set(&[ti, y, x], 1.0);
                }
            }
        }
    }
    Ok(VolumeCase {
        id: id.to_string(),
        input,
        truth,
        params: params.clone(),
        seed,
    })
}

// ---------------------------------------------------------------------------
// V25D1 file format
// ---------------------------------------------------------------------------

const MAGIC: &str = "V25D1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    id: String,
    t: usize,
    h: usize,
    w: usize,
    channels: usize,
    dtype: String,
    channel_names: Vec<String>,
    params: GenParams,
    seed: u64,
}

/// Write a case: magic line, one-line JSON header, raw little-endian f32
/// input, then one byte per mask voxel, row-major.
pub fn save_case(case: &VolumeCase, path: &Path) -> Result<()> {
    let header = Header {
        id: case.id.clone(),
        t: case.params.t,
        h: case.params.h,
        w: case.params.w,
        channels: 2,
        dtype: "f32le".to_string(),
        channel_names: vec!["eadc".to_string(), "dwi".to_string()],
        params: case.params.clone(),
        seed: case.seed,
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(serde_json::to_string(&header).unwrap().as_bytes());
    bytes.push(b'\n');
    for &v in case.input.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in case.truth.data() {
        bytes.push(v as u8);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_case(path: &Path) -> Result<VolumeCase> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let magic_end = MAGIC.len();
    if buf.len() < magic_end + 1 || &buf[..magic_end] != MAGIC.as_bytes() || buf[magic_end] != b'\n'
    {
        return Err(Error::format(0, format!("missing '{MAGIC}' magic")));
    }
    let header_start = magic_end + 1;
    let rel = buf[header_start..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(buf.len() as u64, "unterminated header"))?;
    let header_end = header_start + rel;
    let header: Header = serde_json::from_slice(&buf[header_start..header_end])
        .map_err(|e| Error::format(header_start as u64, format!("bad header JSON: {e}")))?;
    let payload_start = header_end + 1;
    let voxels = header.t * header.h * header.w;
    let input_bytes = voxels * header.channels * 4;
    let expected = payload_start + input_bytes + voxels;
    if buf.len() != expected {
        return Err(Error::format(
            buf.len() as u64,
            format!(
                "header dims imply {} bytes total, file has {}",
                expected,
                buf.len()
            ),
        ));
    }
    let mut input = Vec::with_capacity(voxels * header.channels);
    for i in 0..voxels * header.channels {
        let o = payload_start + i * 4;
        let v = f32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]);
        input.push(v as f64);
    }
    let mask_start = payload_start + input_bytes;
    let mut truth = Vec::with_capacity(voxels);
    for i in 0..voxels {
        let b = buf[mask_start + i];
        if b > 1 {
            return Err(Error::format(
                (mask_start + i) as u64,
                format!("mask byte {b} is not 0 or 1"),
            ));
        }
        truth.push(f64::from(b));
    }
    Ok(VolumeCase {
        id: header.id,
        input: DenseTensor::new(vec![header.t, header.h, header.w, header.channels], input)?,
        truth: DenseTensor::new(vec![header.t, header.h, header.w], truth)?,
        params: header.params,
        seed: header.seed,
    })
}

// ---------------------------------------------------------------------------
// Dataset splits and manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::usage(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub file: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub params: GenParams,
    pub cases: Vec<CaseEntry>,
}

/// Deterministic disjoint split assignment for `n_cases` cases.
pub fn make_dataset(n_cases: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios sum to {sum}, expected 1")));
    }
    let n_val = (n_cases as f64 * ratios.1).round() as usize;
    let n_test = (n_cases as f64 * ratios.2).round() as usize;
    if n_val + n_test >= n_cases || n_val == 0 || n_test == 0 {
        return Err(Error::config(format!(
            "{n_cases} cases cannot fill nonempty {ratios:?} splits"
        )));
    }
    let mut order: Vec<usize> = (0..n_cases).collect();
    let mut r = rng::rng(seed, "splits");
    for i in (1..n_cases).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut out = vec![Split::Train; n_cases];
    for &i in order.iter().take(n_val) {
        out[i] = Split::Val;
    }
    for &i in order.iter().skip(n_val).take(n_test) {
        out[i] = Split::Test;
    }
    Ok(out)
}

/// Generate `n_cases` cases into `dir` with a manifest file.
pub fn generate_dataset(
    dir: &Path,
    n_cases: usize,
    params: &GenParams,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    if n_cases == 0 {
        return Err(Error::usage("cannot generate a dataset of 0 cases"));
    }
    params.validate()?;
    let splits = make_dataset(n_cases, ratios, seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut cases = Vec::with_capacity(n_cases);
    for (i, &split) in splits.iter().enumerate() {
        let id = format!("case_{i:04}");
        let case = generate_case(params, rng::derive_idx(seed, "case", i as u64), &id)?;
        let file = format!("{id}.v25d");
        save_case(&case, &dir.join(&file))?;
        cases.push(CaseEntry { id, file, split });
    }
    let manifest = DatasetManifest {
        seed,
        params: params.clone(),
        cases,
    };
    let mpath = dir.join("manifest.json");
    let mut f = fs::File::create(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    f.write_all(serde_json::to_string_pretty(&manifest).unwrap().as_bytes())
        .map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(0, format!("bad manifest: {e}")))
}

pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<VolumeCase>> {
    manifest
        .cases
        .iter()
        .filter(|c| c.split == split)
        .map(|c| load_case(&dir.join(&c.file)))
        .collect()
}
