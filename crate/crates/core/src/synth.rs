//! Synthetic pedestrian videos with exact keypoints.
//!
//! A person is three stacked bands (head, body, leg), each painted in one
//! palette color with a shared stripe texture; an identity is the ordered
//! triple of colors. Every frame moves the person vertically, fills the rest
//! of the image with clutter bands drawn from the same palette, may cover the
//! bottom of the image with an occluder, and adds pixel noise. Each camera has
//! its own color response (a cyclic permutation of the RGB channels), so the
//! same person looks different across cameras.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rapa_tensor::Tensor;

use crate::config::SynthConfig;
use crate::dataset::{ClipRecord, Dataset, IdentityRecord, Keypoints, Manifest, Split, VideoClip};
use crate::error::{Error, Result};
use crate::rng::{Rng, Streams};

const PERSON_FRACTION: f64 = 0.75;
const SEPARATOR_LEVEL: f32 = 0.05;

/// Palette colors whose channels spread at least this much, so a channel
/// permutation never maps a color onto itself.
const MIN_CHANNEL_SPREAD: f64 = 0.3;

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    let streams = Streams::new(seed);
    let palette = sample_palette(cfg, &mut streams.get("synth/palette"))?;
    let identities = sample_identities(cfg, &mut streams.get("synth/identities"))?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let mut clips = Vec::new();
    let mut records = Vec::new();
    for (id, parts) in identities.iter().enumerate() {
        for cam in 0..cfg.cameras {
            for m in 0..cfg.clips_per_identity_per_cam {
                let split = match (m, cam) {
                    (0, 0) => Split::Query,
                    (0, _) => Split::Gallery,
                    _ => Split::Train,
                };
                let mut rng = streams.get(&format!("synth/clip/{id}/{cam}/{m}"));
                let mut clip = VideoClip {
                    identity: id,
                    camera: cam,
                    index: m,
                    split,
                    frames: Vec::with_capacity(cfg.frames_per_clip),
                    keypoints: Vec::with_capacity(cfg.frames_per_clip),
                };
                for _ in 0..cfg.frames_per_clip {
                    let (frame, kp) = render_frame(cfg, &palette, *parts, cam, &noise, &mut rng);
                    clip.frames.push(frame);
                    clip.keypoints.push(kp);
                }
                records.push(ClipRecord {
                    split,
                    identity: id,
                    camera: cam,
                    clip: m,
                    keypoints: clip.keypoints.iter().map(Keypoints::rows).collect(),
                });
                clips.push(clip);
            }
        }
    }
    let manifest = Manifest {
        seed,
        generator: cfg.clone(),
        palette,
        identities: identities
            .iter()
            .enumerate()
            .map(|(id, &parts)| IdentityRecord { id, parts })
            .collect(),
        clips: records,
    };
    Ok(Dataset { manifest, clips })
}

fn sample_palette(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<[f64; 3]>> {
    let mut palette: Vec<[f64; 3]> = Vec::with_capacity(cfg.palette_size);
    for _ in 0..100_000 {
        if palette.len() == cfg.palette_size {
            break;
        }
        let c = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let spread = c.iter().cloned().fold(f64::MIN, f64::max) - c.iter().cloned().fold(f64::MAX, f64::min);
        if spread < MIN_CHANNEL_SPREAD {
            continue;
        }
        if palette.iter().all(|p| color_distance(p, &c) >= cfg.min_separation) {
            palette.push(c);
        }
    }
    if palette.len() < cfg.palette_size {
        return Err(Error::Config(format!(
            "cannot place {} palette colors {} apart",
            cfg.palette_size, cfg.min_separation
        )));
    }
    Ok(palette)
}

fn sample_identities(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<[usize; 3]>> {
    let n = cfg.palette_size;
    let mut all: Vec<[usize; 3]> = (0..n * n * n).map(|i| [i / (n * n), (i / n) % n, i % n]).collect();
    if cfg.num_identities > all.len() {
        return Err(Error::Config(format!(
            "{} identities requested but a palette of {n} gives only {} distinct part triples",
            cfg.num_identities,
            all.len()
        )));
    }
    all.shuffle(rng);
    all.truncate(cfg.num_identities);
    Ok(all)
}

pub fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Band layout of a person whose head starts at `top`.
pub fn person_keypoints(top: usize, height: usize) -> Keypoints {
    let person = (PERSON_FRACTION * height as f64).round() as usize;
    let neck = top + person / 4;
    let hip = neck + person / 3;
    let ankle = top + person - 1;
    Keypoints::new(top, neck, hip, ankle, height).expect("person fits the image")
}

/// Largest vertical offset of the person for this configuration.
pub fn max_shift(cfg: &SynthConfig) -> usize {
    let person = (PERSON_FRACTION * cfg.image_height as f64).round() as usize;
    ((cfg.vertical_shift_range * cfg.image_height as f64).floor() as usize).min(cfg.image_height - person)
}

fn render_frame(
    cfg: &SynthConfig,
    palette: &[[f64; 3]],
    parts: [usize; 3],
    camera: usize,
    noise: &Normal<f64>,
    rng: &mut Rng,
) -> (Tensor<f32>, Keypoints) {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut rgb = vec![[0.0f64; 3]; h * w];

    // Clutter bands behind everything.
    let (band_min, band_max) = ((h / 32).max(1), (h / 6).max(2));
    let mut r = 0;
    while r < h {
        let band = rng.gen_range(band_min..=band_max);
        let color = palette[rng.gen_range(0..palette.len())];
        let shade = rng.gen_range(0.5..1.0);
        for row in r..(r + band).min(h) {
            rgb[row * w..(row + 1) * w].fill(color.map(|c| c * shade));
        }
        r += band;
    }

    let kp = person_keypoints(rng.gen_range(0..=max_shift(cfg)), h);
    let sep = (h / 32).max(1);
    let (left, right) = (w / 8, w - w / 8);
    let stripe = (w / 16).max(1);
    for row in kp.head_top..=kp.ankle {
        let (part, boundary) = if row < kp.neck {
            (0, false)
        } else if row < kp.hip {
            (1, row < kp.neck + sep)
        } else {
            (2, row < kp.hip + sep)
        };
        for col in left..right {
            rgb[row * w + col] = if boundary {
                [SEPARATOR_LEVEL as f64; 3]
            } else {
                let t = if (col / stripe) % 2 == 0 { 1.15 } else { 0.85 };
                palette[parts[part]].map(|c| c * t)
            };
        }
    }

    if rng.gen_bool(cfg.occlusion_probability) {
        let occ = rng.gen_range((h / 5).max(1)..=(2 * h / 5).max(1));
        let color = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        rgb[(h - occ) * w..].fill(color);
    }

    let mut data = vec![0.0f32; 3 * h * w];
    for ch in 0..3 {
        let src = (ch + camera) % 3;
        for (i, px) in rgb.iter().enumerate() {
            let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            data[ch * h * w + i] = (px[src] + n).clamp(0.0, 1.0) as f32;
        }
    }
    (Tensor::new(&[3, h, w], data).expect("frame shape"), kp)
}

/// Fills a random rectangle covering 2–20% of the frame with uniform noise.
pub fn random_erasing(frame: &mut Tensor<f32>, rng: &mut Rng) {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let area = rng.gen_range(0.02..0.2) * (h * w) as f64;
    let aspect: f64 = rng.gen_range(0.3..3.3);
    let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    let top = rng.gen_range(0..=h - eh);
    let left = rng.gen_range(0..=w - ew);
    let data = frame.data_mut();
    for ch in 0..3 {
        for r in top..top + eh {
            for c in left..left + ew {
                data[(ch * h + r) * w + c] = rng.gen();
            }
        }
    }
}

/// Crop of the zero-padded frame whose origin is moved by `(dy, dx)`:
/// output pixel `(r, c)` is input pixel `(r + dy, c + dx)`.
pub fn crop_with_offset(frame: &Tensor<f32>, kp: &Keypoints, dy: isize, dx: isize) -> (Tensor<f32>, Keypoints) {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let src = frame.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..3 {
        for r in 0..h {
            let sr = r as isize + dy;
            if sr < 0 || sr >= h as isize {
                continue;
            }
            for c in 0..w {
                let sc = c as isize + dx;
                if sc >= 0 && sc < w as isize {
                    out[(ch * h + r) * w + c] = src[(ch * h + sr as usize) * w + sc as usize];
                }
            }
        }
    }
    (Tensor::new(frame.shape(), out).expect("same shape"), kp.shifted(dy, h))
}

/// Pads by `pad` pixels on every side and crops back at a random position.
pub fn random_crop(frame: &Tensor<f32>, kp: &Keypoints, pad: usize, rng: &mut Rng) -> (Tensor<f32>, Keypoints) {
    let p = pad as isize;
    let dy = rng.gen_range(-p..=p);
    let dx = rng.gen_range(-p..=p);
    crop_with_offset(frame, kp, dy, dx)
}
