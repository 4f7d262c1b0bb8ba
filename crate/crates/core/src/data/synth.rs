//! Procedural patch generator.
//!
//! Each identity is a smooth random texture defined on a continuous plane
//! (a sum of sinusoids, soft oriented edges and Gaussian blobs). Its patches
//! sample that plane through a random similarity warp and then receive a
//! brightness gain and additive Gaussian noise. Patch coordinates span 32
//! texture units regardless of pixel size, so a 64-px patch box-averaged to
//! 32 px approximates the 32-px rendering.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::PatchBatch;
use crate::error::{Error, Result};
use crate::seed;

const SPAN: f64 = 32.0;

/// Nuisance ranges applied to every rendered patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub max_translation: f64,
    pub gain_range: (f64, f64),
    pub max_noise_sigma: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            max_rotation_deg: 25.0,
            scale_range: (0.8, 1.25),
            max_translation: 3.0,
            gain_range: (0.7, 1.4),
            max_noise_sigma: 0.03,
        }
    }
}

impl Jitter {
    /// Degenerate warp: every patch of an identity renders identically.
    pub fn none() -> Self {
        Jitter {
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            max_translation: 0.0,
            gain_range: (1.0, 1.0),
            max_noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_identities: usize,
    pub patches_per_identity: usize,
    pub size: usize,
    pub jitter: Jitter,
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

struct Edge {
    nx: f64,
    ny: f64,
    offset: f64,
    width: f64,
    amp: f64,
}

struct Blob {
    cx: f64,
    cy: f64,
    inv_two_var: f64,
    amp: f64,
}

struct Texture {
    waves: Vec<Wave>,
    edges: Vec<Edge>,
    blobs: Vec<Blob>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen::<bool>() {
        1.0
    } else {
        -1.0
    }
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n_waves = rng.gen_range(5..=8);
        let waves = (0..n_waves)
            .map(|_| {
                let freq = uniform(rng, 0.03, 0.12);
                let dir = uniform(rng, 0.0, PI);
                Wave {
                    kx: 2.0 * PI * freq * dir.cos(),
                    ky: 2.0 * PI * freq * dir.sin(),
                    phase: uniform(rng, 0.0, 2.0 * PI),
                    amp: uniform(rng, 0.3, 1.0) / n_waves as f64 * 2.0,
                }
            })
            .collect();
        let n_edges = rng.gen_range(1..=3);
        let edges = (0..n_edges)
            .map(|_| {
                let dir = uniform(rng, 0.0, 2.0 * PI);
                Edge {
                    nx: dir.cos(),
                    ny: dir.sin(),
                    offset: uniform(rng, -10.0, 10.0),
                    width: uniform(rng, 0.5, 2.5),
                    amp: sign(rng) * uniform(rng, 0.5, 1.2),
                }
            })
            .collect();
        let n_blobs = rng.gen_range(2..=4);
        let blobs = (0..n_blobs)
            .map(|_| {
                let sigma = uniform(rng, 2.0, 6.0);
                Blob {
                    cx: uniform(rng, -12.0, 12.0),
                    cy: uniform(rng, -12.0, 12.0),
                    inv_two_var: 1.0 / (2.0 * sigma * sigma),
                    amp: sign(rng) * uniform(rng, 0.5, 1.2),
                }
            })
            .collect();
        Texture { waves, edges, blobs }
    }

    /// Base intensity in `(0.2, 0.7)`.
    fn eval(&self, x: f64, y: f64) -> f64 {
        let mut t = 0.0;
        for w in &self.waves {
            t += w.amp * (w.kx * x + w.ky * y + w.phase).sin();
        }
        for e in &self.edges {
            t += e.amp * ((e.nx * x + e.ny * y - e.offset) / e.width).tanh();
        }
        for b in &self.blobs {
            let (dx, dy) = (x - b.cx, y - b.cy);
            t += b.amp * (-(dx * dx + dy * dy) * b.inv_two_var).exp();
        }
        0.45 + 0.25 * t.tanh()
    }
}

fn render(tex: &Texture, size: usize, jitter: &Jitter, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let rot = uniform(rng, -jitter.max_rotation_deg, jitter.max_rotation_deg).to_radians();
    let scale = uniform(rng, jitter.scale_range.0, jitter.scale_range.1);
    let tx = uniform(rng, -jitter.max_translation, jitter.max_translation);
    let ty = uniform(rng, -jitter.max_translation, jitter.max_translation);
    let gain = uniform(rng, jitter.gain_range.0, jitter.gain_range.1);
    let sigma = uniform(rng, 0.0, jitter.max_noise_sigma);
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("positive sigma"));
    let (c, s) = (rot.cos() * scale, rot.sin() * scale);
    let step = SPAN / size as f64;
    for i in 0..size {
        let qy = (i as f64 + 0.5) * step - SPAN / 2.0;
        for j in 0..size {
            let qx = (j as f64 + 0.5) * step - SPAN / 2.0;
            let x = c * qx - s * qy + tx;
            let y = s * qx + c * qy + ty;
            let mut v = gain * tex.eval(x, y);
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
}

/// Generator with the default nuisance ranges.
pub fn synth_generate(seed: u64, num_identities: usize, patches_per_identity: usize, size: usize) -> Result<PatchBatch> {
    synth_generate_with(&SynthConfig {
        seed,
        num_identities,
        patches_per_identity,
        size,
        jitter: Jitter::default(),
    })
}

pub fn synth_generate_with(cfg: &SynthConfig) -> Result<PatchBatch> {
    if cfg.num_identities < 2 || cfg.patches_per_identity < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 identities with 2 patches each, got {} x {}",
            cfg.num_identities, cfg.patches_per_identity
        )));
    }
    if cfg.size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if cfg.num_identities > u32::MAX as usize {
        return Err(Error::invalid("too many identities"));
    }
    let base = seed::derive(cfg.seed, "synth");
    let total = cfg.num_identities * cfg.patches_per_identity;
    let mut patches = Vec::with_capacity(total * cfg.size * cfg.size);
    let mut identity = Vec::with_capacity(total);
    for id in 0..cfg.num_identities {
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        rng.set_stream(id as u64);
        let tex = Texture::random(&mut rng);
        for _ in 0..cfg.patches_per_identity {
            render(&tex, cfg.size, &cfg.jitter, &mut rng, &mut patches);
            identity.push(id as u32);
        }
    }
    PatchBatch::new(
        cfg.size,
        patches,
        identity,
        format!(
            "synthetic seed={} identities={} per_identity={}",
            cfg.seed, cfg.num_identities, cfg.patches_per_identity
        ),
    )
}
