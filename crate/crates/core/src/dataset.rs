//! Video clips, keypoints and the on-disk dataset layout.
//!
//! ```text
//! root/manifest.json
//! root/{train,query,gallery}/id_<n>/cam_<c>/clip_<m>/frame_<k>.rapt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rapa_tensor::{io, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::error::{Error, Result};

/// Image rows of the four body landmarks that bound head, body and leg.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keypoints {
    pub head_top: usize,
    pub neck: usize,
    pub hip: usize,
    pub ankle: usize,
}

impl Keypoints {
    /// Validated keypoints for an image with `height` rows.
    pub fn new(head_top: usize, neck: usize, hip: usize, ankle: usize, height: usize) -> Result<Self> {
        if !(head_top < neck && neck < hip && hip < ankle && ankle < height) {
            return Err(Error::Data(format!(
                "keypoint rows ({head_top}, {neck}, {hip}, {ankle}) must be strictly increasing below {height}"
            )));
        }
        Ok(Keypoints { head_top, neck, hip, ankle })
    }

    pub fn rows(&self) -> [usize; 4] {
        [self.head_top, self.neck, self.hip, self.ankle]
    }

    /// Keypoints after the image content moves up by `dy` rows, clamped into
    /// the image while keeping the rows strictly increasing.
    pub fn shifted(&self, dy: isize, height: usize) -> Self {
        let mut rows = self.rows().map(|r| (r as isize - dy).clamp(0, height as isize - 1) as usize);
        for i in 1..4 {
            rows[i] = rows[i].max(rows[i - 1] + 1);
        }
        rows[3] = rows[3].min(height - 1);
        for i in (0..3).rev() {
            rows[i] = rows[i].min(rows[i + 1] - 1);
        }
        Keypoints { head_top: rows[0], neck: rows[1], hip: rows[2], ankle: rows[3] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// A tracklet: consecutive frames of one identity seen by one camera.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub identity: usize,
    pub camera: usize,
    /// Clip number within the identity and camera.
    pub index: usize,
    pub split: Split,
    /// Each frame is `(3, H, W)`.
    pub frames: Vec<Tensor<f32>>,
    pub keypoints: Vec<Keypoints>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn rel_dir(&self) -> PathBuf {
        PathBuf::from(self.split.dir_name())
            .join(format!("id_{}", self.identity))
            .join(format!("cam_{}", self.camera))
            .join(format!("clip_{}", self.index))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub id: usize,
    /// Palette index of the head, body and leg appearance.
    pub parts: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub split: Split,
    pub identity: usize,
    pub camera: usize,
    pub clip: usize,
    pub keypoints: Vec<[usize; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub generator: SynthConfig,
    pub palette: Vec<[f64; 3]>,
    pub identities: Vec<IdentityRecord>,
    pub clips: Vec<ClipRecord>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub clips: Vec<VideoClip>,
}

impl Dataset {
    pub fn num_identities(&self) -> usize {
        self.manifest.identities.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.manifest.generator.image_height, self.manifest.generator.image_width)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoClip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let parent = root.parent().filter(|p| !p.as_os_str().is_empty());
        if let Some(p) = parent {
            if !p.is_dir() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
                ));
            }
        }
        for clip in &self.clips {
            let dir = root.join(clip.rel_dir());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (k, frame) in clip.frames.iter().enumerate() {
                let path = dir.join(format!("frame_{k}.rapt"));
                io::save(frame, &path).map_err(|e| Error::format(&path, e.to_string()))?;
            }
        }
        let path = root.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let (h, w) = (manifest.generator.image_height, manifest.generator.image_width);
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for rec in &manifest.clips {
            let mut clip = VideoClip {
                identity: rec.identity,
                camera: rec.camera,
                index: rec.clip,
                split: rec.split,
                frames: Vec::with_capacity(rec.keypoints.len()),
                keypoints: Vec::with_capacity(rec.keypoints.len()),
            };
            let dir = root.join(clip.rel_dir());
            for (k, kp) in rec.keypoints.iter().enumerate() {
                let path = dir.join(format!("frame_{k}.rapt"));
                let frame: Tensor<f32> = io::load(&path).map_err(|e| Error::format(&path, e.to_string()))?;
                if frame.shape() != [3, h, w] {
                    return Err(Error::format(&path, format!("expected frame [3, {h}, {w}], found {:?}", frame.shape())));
                }
                clip.frames.push(frame);
                clip.keypoints.push(Keypoints::new(kp[0], kp[1], kp[2], kp[3], h)?);
            }
            clips.push(clip);
        }
        Ok(Dataset { manifest, clips })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keypoint_ordering_is_enforced() {
        assert!(Keypoints::new(0, 64, 160, 255, 256).is_ok());
        assert!(Keypoints::new(0, 64, 64, 255, 256).is_err());
        assert!(Keypoints::new(0, 64, 160, 256, 256).is_err());
    }

    #[test]
    fn shifting_clamps_and_keeps_order() {
        let kp = Keypoints::new(10, 64, 160, 250, 256).unwrap();
        assert_eq!(kp.shifted(8, 256).rows(), [2, 56, 152, 242]);
        assert_eq!(kp.shifted(-8, 256).rows(), [18, 72, 168, 255]);
        assert_eq!(kp.shifted(0, 256), kp);
        let squeezed = kp.shifted(-300, 256);
        assert_eq!(squeezed.rows(), [252, 253, 254, 255]);
    }
}
