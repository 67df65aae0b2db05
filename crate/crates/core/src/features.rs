//! Procedural multi-channel features anchored to scene geometry.
//!
//! The channel budget is split in two. Wave channels evaluate
//! `sin(k_c . X + phi_c)` at the surface point `X` a pixel observed, with a
//! separate bank of seeded random waves per rigid construction (the static
//! world, and every mover). Static surfaces use world points, so their wave
//! responses are view-consistent by construction; movers use body-frame
//! points with a per-frame corruption mode that models the appearance
//! instability of moving content. The last `channels / 4` channels are
//! identity channels: wave-free constants that encode which construction a
//! pixel belongs to, the synthetic stand-in for the semantic component of
//! learned features that makes movable content recognizable from a single
//! view. Identity codes of different constructions are mutually orthogonal
//! (cosine rows), so they separate bodies without biasing the cross-body
//! cosine, and they carry no spatial variance, so a linear head can read
//! them without picking up wave noise.
//!
//! Features are stored raw, without per-pixel normalization. Cosine
//! similarity normalizes internally, so the similarity energy is unaffected,
//! but the affine uncertainty head reads the raw vectors, where the identity
//! code survives as a clean mean shift instead of being folded into every
//! channel by a projection onto the unit sphere.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::field::FeatureMap;
use crate::scene::SyntheticSequence;
use crate::seed::SeedSplitter;

/// How mover features behave across frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DynamicFeatureMode {
    /// Movers are as view-consistent as the static world.
    Consistent,
    /// Fresh waves every frame; only the channel offsets persist.
    Decorrelated,
    /// The wave response rotates in channel pairs by `drift_rate` radians
    /// per frame.
    Drifting,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureNoiseSpec {
    /// Standard deviation of per-pixel, per-frame channel noise added to the
    /// stored features.
    pub static_sigma: f64,
    pub dynamic_mode: DynamicFeatureMode,
    /// Radians per frame, used by `Drifting`.
    pub drift_rate: f64,
}

impl FeatureNoiseSpec {
    pub fn clean() -> Self {
        Self { static_sigma: 0.0, dynamic_mode: DynamicFeatureMode::Decorrelated, drift_rate: 0.0 }
    }
}

/// Number of identity channels for a given channel budget.
fn identity_channels(channels: usize) -> usize {
    channels / 4
}

/// Amplitude of the identity code. Its square sets the identity share of a
/// mover's cross-frame cosine when the wave response decorrelates, so it
/// must stay well below the wave-channel norm for similarity to keep
/// reacting to appearance instability.
const IDENTITY_AMPLITUDE: f64 = 0.8;

/// Orthogonal identity code of one construction: row `construction` of the
/// cosine basis over `id` channels, unit-normalized and scaled. Rows 0..id
/// are mutually orthogonal; later constructions alias, which only matters
/// for scenes with more rigid bodies than identity channels.
fn identity_code(construction: usize, id: usize) -> Vec<f64> {
    let mut code: Vec<f64> = (0..id)
        .map(|c| {
            (std::f64::consts::PI * construction as f64 * (c as f64 + 0.5) / id as f64).cos()
        })
        .collect();
    let norm = code.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-9 {
        for v in &mut code {
            *v *= IDENTITY_AMPLITUDE / norm;
        }
    }
    code
}

struct WaveBank {
    wave: Vec<Vector3<f64>>,
    phase: Vec<f64>,
    identity: Vec<f64>,
}

impl WaveBank {
    /// Draws the wave channels for one construction and attaches its
    /// identity code. `construction` 0 is the static world; mover `m` is
    /// construction `m + 1`.
    fn draw<R: Rng>(rng: &mut R, channels: usize, construction: usize) -> Self {
        let id = identity_channels(channels);
        let wave_channels = channels - id;
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut wave = Vec::with_capacity(wave_channels);
        let mut phase = Vec::with_capacity(wave_channels);
        for _ in 0..wave_channels {
            let mut dir = Vector3::new(
                unit.sample(rng),
                unit.sample(rng),
                unit.sample(rng),
            );
            if dir.norm() < 1e-9 {
                dir = Vector3::x();
            }
            // Low spatial frequencies keep the field smooth relative to the
            // pixel footprint, which is what makes static features nearly
            // view-consistent after bilinear resampling.
            let magnitude = rng.gen_range(0.3..1.5);
            wave.push(dir.normalize() * magnitude);
            phase.push(rng.gen_range(0.0..std::f64::consts::TAU));
        }
        Self { wave, phase, identity: identity_code(construction, id) }
    }

    /// Raw (unnormalized) feature vector at a surface point. `drift` rotates
    /// the wave response in consecutive wave-channel pairs; identity
    /// channels never drift.
    fn eval(&self, point: &Vector3<f64>, drift: f64, out: &mut [f64]) {
        let wave_channels = self.wave.len();
        for c in 0..wave_channels {
            out[c] = (self.wave[c].dot(point) + self.phase[c]).sin();
        }
        if drift != 0.0 {
            let (s, co) = drift.sin_cos();
            let mut c = 0;
            while c + 1 < wave_channels {
                let (a, b) = (out[c], out[c + 1]);
                out[c] = co * a - s * b;
                out[c + 1] = s * a + co * b;
                c += 2;
            }
        }
        out[wave_channels..].copy_from_slice(&self.identity);
    }
}

/// Synthesizes the feature map of one frame. Streams are keyed by
/// `(seed, construction, frame)`, so maps are reproducible and independent
/// of generation order.
pub fn synth_features(
    seq: &SyntheticSequence,
    frame: usize,
    channels: usize,
    noise: &FeatureNoiseSpec,
    seed: u64,
) -> FeatureMap {
    assert!(channels > 0, "feature maps need at least one channel");
    let (h, w) = (seq.config.grid_h, seq.config.grid_w);
    let splitter = SeedSplitter::new(seed);
    let world_bank = WaveBank::draw(&mut splitter.rng("feat.world", &[]), channels, 0);
    let mover_banks: Vec<WaveBank> = (0..seq.config.movers.len())
        .map(|m| {
            let mut bank =
                WaveBank::draw(&mut splitter.rng("feat.mover", &[m as u64]), channels, m + 1);
            if matches!(noise.dynamic_mode, DynamicFeatureMode::Decorrelated) {
                let fresh = WaveBank::draw(
                    &mut splitter.rng("feat.mover.frame", &[m as u64, frame as u64]),
                    channels,
                    m + 1,
                );
                bank.wave = fresh.wave;
                bank.phase = fresh.phase;
            }
            bank
        })
        .collect();
    let drift = match noise.dynamic_mode {
        DynamicFeatureMode::Drifting => noise.drift_rate * frame as f64,
        _ => 0.0,
    };

    let mut map = FeatureMap::zeros(h, w, channels);
    let mut raw = vec![0.0; channels];
    for row in 0..h {
        for col in 0..w {
            let hit = seq.attribution[frame].at(row, col);
            if hit.mover < 0 {
                world_bank.eval(&hit.anchor, 0.0, &mut raw);
            } else {
                mover_banks[hit.mover as usize].eval(&hit.anchor, drift, &mut raw);
            }
            map.pixel_mut(row, col).copy_from_slice(&raw);
        }
    }

    if noise.static_sigma > 0.0 {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut rng = splitter.rng("feat.noise", &[frame as u64]);
        for v in map.as_mut_slice() {
            *v += noise.static_sigma * unit.sample(&mut rng);
        }
    }
    map
}

/// Per-pixel cosine similarity between two aligned feature maps. Pixels
/// where either vector has near-zero norm are masked out and report zero.
pub fn cosine_field(a: &FeatureMap, b: &FeatureMap) -> (crate::field::ScalarField, crate::field::BoolField) {
    assert_eq!(a.height(), b.height());
    assert_eq!(a.width(), b.width());
    assert_eq!(a.channels(), b.channels());
    let (h, w) = (a.height(), a.width());
    let mut cos = crate::field::ScalarField::filled(h, w, 0.0);
    let mut valid = crate::field::BoolField::filled(h, w, false);
    for row in 0..h {
        for col in 0..w {
            let fa = a.pixel(row, col);
            let fb = b.pixel(row, col);
            let na = fa.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = fb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na < 1e-12 || nb < 1e-12 {
                continue;
            }
            let dot: f64 = fa.iter().zip(fb).map(|(x, y)| x * y).sum();
            cos.set(row, col, dot / (na * nb));
            valid.set(row, col, true);
        }
    }
    (cos, valid)
}
