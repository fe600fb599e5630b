//! Synthetic event-camera re-identification data.
//!
//! Each identity is an articulated stick-and-capsule walker with its own
//! shape, shading, torso texture and gait. Frames are soft-rendered
//! luminance maps, camera effects are applied, and [`simulate_dvs`] turns
//! them into events.
//!
//! Gait frequency and shape attributes come from evenly spaced grids that are
//! shuffled independently, so no two identities share a gait frequency and
//! shape alone does not predict it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::events::{simulate_dvs, write_event_file, EventStream};
use crate::rng::{derive_seed, stream, Rng};
use crate::tensor::Tensor;

const BACKGROUND: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    /// Torso width relative to body height.
    pub aspect: f64,
    /// Body height relative to frame height.
    pub height: f64,
    /// Gait cycles per frame.
    pub gait_freq: f64,
    /// Arm swing phase relative to the legs, radians.
    pub limb_phase: f64,
    /// Peak leg angle, radians. Arm swing and vertical bob scale with it.
    pub stride_amp: f64,
    /// Body luminance.
    pub shade: f64,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    pub id: usize,
    pub mirror: bool,
    /// Contrast gain around the background level.
    pub gain: f64,
    /// Std of multiplicative per-pixel luminance noise.
    pub noise: f64,
}

pub fn default_cameras() -> [CameraParams; 2] {
    [
        CameraParams {
            id: 1,
            mirror: false,
            gain: 1.0,
            noise: 0.02,
        },
        CameraParams {
            id: 2,
            mirror: true,
            gain: 0.8,
            noise: 0.03,
        },
    ]
}

fn grid(n: usize, lo: f64, hi: f64, rng: &mut Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect();
    v.shuffle(rng);
    v
}

pub fn gen_identity_params(seed: u64, n_ids: usize) -> Result<Vec<IdentityParams>> {
    if n_ids < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 identities, got {n_ids}")));
    }
    let mut rng = stream(seed, "synth.identities");
    let freq = grid(n_ids, 0.015, 0.05, &mut rng);
    let aspect = grid(n_ids, 0.16, 0.4, &mut rng);
    let height = grid(n_ids, 0.6, 0.92, &mut rng);
    let shade = grid(n_ids, 0.2, 0.33, &mut rng);
    let phase = grid(n_ids, 0.0, std::f64::consts::PI, &mut rng);
    let stride = grid(n_ids, 0.25, 0.5, &mut rng);
    Ok((0..n_ids)
        .map(|i| IdentityParams {
            aspect: aspect[i],
            height: height[i],
            gait_freq: freq[i],
            limb_phase: phase[i],
            stride_amp: stride[i],
            shade: shade[i],
            texture_seed: rng.random(),
        })
        .collect())
}

/// Signed distance to a capsule around segment `a`-`b`.
fn capsule(px: f64, py: f64, a: (f64, f64), b: (f64, f64), r: f64) -> f64 {
    let (bax, bay) = (b.0 - a.0, b.1 - a.1);
    let (pax, pay) = (px - a.0, py - a.1);
    let len2 = bax * bax + bay * bay;
    let h = if len2 > 0.0 { ((pax * bax + pay * bay) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (pax - bax * h, pay - bay * h);
    (dx * dx + dy * dy).sqrt() - r
}

fn coverage(sdf: f64) -> f64 {
    (0.5 - sdf).clamp(0.0, 1.0)
}

/// Luminance frames `[n, H, W]`, all values positive.
pub fn render_sequence(
    id: &IdentityParams,
    cam: &CameraParams,
    n_frames: usize,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<Tensor<f64>> {
    if n_frames < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 frames, got {n_frames}")));
    }
    let mut rng = stream(seed, "synth.sequence");
    let x_offset = rng.random_range(-2.0..2.0);
    let drift = rng.random_range(0.04..0.12) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
    let freq = id.gait_freq * rng.random_range(0.95..1.05);
    let noise_rng = &mut stream(seed, "synth.noise");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let (w, h) = (width as f64, height as f64);
    let body = id.height * h;
    let head_r = 0.1 * body;
    let limb_r = 0.045 * body;
    let torso_r = 0.5 * id.aspect * body;
    let leg_len = 0.45 * body;
    let arm_len = 0.32 * body;
    let mut tex = stream(id.texture_seed, "synth.texture");
    let stripe_period = tex.random_range(3.0..7.0);
    let stripe_phase = tex.random_range(0.0..std::f64::consts::TAU);
    let stripe_amp = tex.random_range(0.1..0.3);

    let mut out = Vec::with_capacity(n_frames * width * height);
    for f in 0..n_frames {
        let t = f as f64;
        let ph = std::f64::consts::TAU * freq * t + phase0;
        let swing = id.stride_amp * ph.sin();
        let arm = 0.8 * id.stride_amp * (ph + id.limb_phase).sin();
        let bob = 0.3 * id.stride_amp * (2.0 * ph).cos();
        let cx = w / 2.0 + x_offset + drift * (t - n_frames as f64 / 2.0);
        let top = (h - body) / 2.0 + bob;
        let head = (cx, top + head_r);
        let shoulder = (cx, top + 2.2 * head_r);
        let hip = (cx, top + body - leg_len);
        let foot = |a: f64| (hip.0 + leg_len * a.sin(), hip.1 + leg_len * a.cos());
        let hand = |a: f64| (shoulder.0 + arm_len * a.sin(), shoulder.1 + arm_len * a.cos());
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let torso = coverage(capsule(px, py, shoulder, hip, torso_r));
                let limbs = [
                    capsule(px, py, head, head, head_r),
                    capsule(px, py, hip, foot(swing), limb_r),
                    capsule(px, py, hip, foot(-swing), limb_r),
                    capsule(px, py, shoulder, hand(arm), limb_r),
                    capsule(px, py, shoulder, hand(-arm), limb_r),
                ]
                .into_iter()
                .map(coverage)
                .fold(0.0, f64::max);
                let torso_lum = id.shade * (1.0 + stripe_amp * (std::f64::consts::TAU * (py - top) / stripe_period + stripe_phase).sin());
                let mut lum = BACKGROUND;
                lum = lum * (1.0 - limbs) + id.shade * limbs;
                lum = lum * (1.0 - torso) + torso_lum * torso;
                out.push(lum);
            }
        }
    }
    // camera: contrast gain, mirroring, multiplicative noise
    let plane = width * height;
    for fr in out.chunks_mut(plane) {
        for v in fr.iter_mut() {
            *v = BACKGROUND + cam.gain * (*v - BACKGROUND);
        }
        if cam.mirror {
            for row in fr.chunks_mut(width) {
                row.reverse();
            }
        }
        if cam.noise > 0.0 {
            for v in fr.iter_mut() {
                *v *= (cam.noise * normal.sample(noise_rng)).exp();
            }
        }
    }
    Tensor::new(vec![n_frames, height, width], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_ids: usize,
    pub seqs_per_cam: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub frame_dt_us: u64,
    pub threshold: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_ids: 8,
            seqs_per_cam: 6,
            frames: 64,
            width: 24,
            height: 48,
            frame_dt_us: 10_000,
            threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: usize,
    pub cam: usize,
    pub seq: usize,
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub n_events: usize,
}

pub const MANIFEST: &str = "manifest.csv";

/// Event stream of one `(identity, camera, sequence)`.
pub fn synth_stream(cfg: &SynthConfig, ids: &[IdentityParams], id: usize, cam: &CameraParams, seq: usize) -> Result<EventStream> {
    let key = format!("synth.{id}.{}.{seq}", cam.id);
    let frames = render_sequence(&ids[id], cam, cfg.frames, derive_seed(cfg.seed, &key), cfg.width, cfg.height)?;
    simulate_dvs(&frames, cfg.threshold, cfg.frame_dt_us)
}

/// Writes `<root>/<id>/<cam>/<seq>.events` for every combination, plus
/// `manifest.csv`.
pub fn make_dataset(root: &Path, cfg: &SynthConfig) -> Result<Vec<ManifestEntry>> {
    let ids = gen_identity_params(cfg.seed, cfg.n_ids)?;
    let mut entries = Vec::new();
    for id in 0..cfg.n_ids {
        for cam in default_cameras() {
            let dir = root.join(id.to_string()).join(cam.id.to_string());
            fs::create_dir_all(&dir)?;
            for seq in 0..cfg.seqs_per_cam {
                let s = synth_stream(cfg, &ids, id, &cam, seq)?;
                let rel = PathBuf::from(id.to_string()).join(cam.id.to_string()).join(format!("{seq}.events"));
                let header = format!("synthetic id={id} cam={} seq={seq} seed={}", cam.id, cfg.seed);
                write_event_file(&root.join(&rel), &s, Some(&header))?;
                entries.push(ManifestEntry {
                    id,
                    cam: cam.id,
                    seq,
                    path: rel,
                    n_events: s.len(),
                });
            }
        }
    }
    fs::write(root.join(MANIFEST), manifest_csv(cfg, &entries))?;
    Ok(entries)
}

pub fn manifest_csv(cfg: &SynthConfig, entries: &[ManifestEntry]) -> String {
    let mut out = format!(
        "# seed={} ids={} seqs_per_cam={} frames={} size={}x{} frame_dt_us={} threshold={}\nid,cam,seq,path,n_events\n",
        cfg.seed, cfg.n_ids, cfg.seqs_per_cam, cfg.frames, cfg.width, cfg.height, cfg.frame_dt_us, cfg.threshold
    );
    for e in entries {
        let _ = writeln!(out, "{},{},{},{},{}", e.id, e.cam, e.seq, e.path.display(), e.n_events);
    }
    out
}
