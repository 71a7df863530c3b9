//! Invariants of the synthetic generator.

use proptest::prelude::*;
use rapa::config::SynthConfig;
use rapa::synth::{self, max_shift};

fn config(ids: usize, h: usize, w: usize, noise: f64, occlusion: f64) -> SynthConfig {
    SynthConfig {
        num_identities: ids,
        clips_per_identity_per_cam: 2,
        frames_per_clip: 3,
        image_height: h,
        image_width: w,
        noise_std: noise,
        occlusion_probability: occlusion,
        ..SynthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn keypoints_ordered_and_shift_bounded(seed in any::<u64>(), hs in 2usize..6, shift in 0.0f64..0.4) {
        let (h, w) = (32 * hs, 16 * hs);
        let mut cfg = config(3, h, w, 0.02, 0.3);
        cfg.vertical_shift_range = shift;
        let ds = synth::generate(&cfg, seed).unwrap();
        let limit = (shift * h as f64).floor() as usize;
        prop_assert!(max_shift(&cfg) <= limit);
        for clip in &ds.clips {
            for kp in &clip.keypoints {
                prop_assert!(kp.head_top < kp.neck && kp.neck < kp.hip && kp.hip < kp.ankle && kp.ankle < h);
                prop_assert!(kp.head_top <= limit);
            }
            let tops: Vec<usize> = clip.keypoints.iter().map(|k| k.head_top).collect();
            let spread = tops.iter().max().unwrap() - tops.iter().min().unwrap();
            prop_assert!(spread as f64 <= shift * h as f64);
            for f in &clip.frames {
                prop_assert_eq!(f.shape(), &[3, h, w]);
                prop_assert!(f.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn part_colors_follow_the_signature(seed in any::<u64>(), noise in 0.0f64..0.05) {
        let (h, w) = (64, 32);
        let cfg = config(4, h, w, noise, 0.0);
        let ds = synth::generate(&cfg, seed).unwrap();
        let sep = (h / 32).max(1);
        for clip in &ds.clips {
            let parts = ds.manifest.identities[clip.identity].parts;
            for (frame, kp) in clip.frames.iter().zip(&clip.keypoints) {
                let bands = [
                    (kp.head_top, kp.neck),
                    (kp.neck + sep, kp.hip),
                    (kp.hip + sep, kp.ankle + 1),
                ];
                for (p, (top, bottom)) in bands.into_iter().enumerate() {
                    let color = ds.manifest.palette[parts[p]];
                    for ch in 0..3 {
                        // Stripes scale the color by 1.15 and 0.85 in equal shares,
                        // and pixels saturate at 1.
                        let c = color[(ch + clip.camera) % 3];
                        let expected = ((1.15 * c).min(1.0) + 0.85 * c) / 2.0;
                        let mut sum = 0.0;
                        let mut n = 0.0;
                        for row in top..bottom {
                            for col in w / 8..w - w / 8 {
                                sum += frame.data()[(ch * h + row) * w + col] as f64;
                                n += 1.0;
                            }
                        }
                        let mean = sum / n;
                        prop_assert!((mean - expected).abs() <= 3.0 * noise + 1e-6,
                            "part {} channel {}: {} vs {}", p, ch, mean, expected);
                    }
                }
            }
        }
    }
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let cfg = config(4, 64, 32, 0.02, 0.3);
    let a = synth::generate(&cfg, 11).unwrap();
    let b = synth::generate(&cfg, 11).unwrap();
    let c = synth::generate(&cfg, 12).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert!(a.clips.iter().zip(&b.clips).all(|(x, y)| x.frames == y.frames));
    assert!(a.clips.iter().zip(&c.clips).any(|(x, y)| x.frames != y.frames));
}

#[test]
fn splits_cover_every_identity() {
    let cfg = config(5, 64, 32, 0.02, 0.0);
    let ds = synth::generate(&cfg, 1).unwrap();
    for split in [rapa::dataset::Split::Query, rapa::dataset::Split::Gallery, rapa::dataset::Split::Train] {
        let mut ids: Vec<usize> = ds.split(split).map(|c| c.identity).collect();
        ids.dedup();
        assert_eq!(ids, (0..5).collect::<Vec<_>>(), "{split:?}");
    }
    // Query clips come from camera 0 only, gallery clips never do.
    assert!(ds.split(rapa::dataset::Split::Query).all(|c| c.camera == 0));
    assert!(ds.split(rapa::dataset::Split::Gallery).all(|c| c.camera != 0));
}

#[test]
fn too_many_identities_is_an_error() {
    let mut cfg = config(4, 64, 32, 0.02, 0.0);
    cfg.palette_size = 2;
    cfg.num_identities = 9;
    assert!(synth::generate(&cfg, 0).is_err());
}
