//! Convolutional backbone producing per-frame feature maps, and the file
//! format for feature maps computed elsewhere.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rapa_tensor::nn::{BatchNorm, Conv2d, Ctx};
use rapa_tensor::{io, Conv2dSpec, ParamStore, Real, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// He-uniform gain for layers followed by a rectifier.
pub const RELU_GAIN: f64 = 2.449_489_742_783_178; // √6

/// Stacked `conv3×3 → batch norm → relu` stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm>,
    pub channels: usize,
    pub downsampling: usize,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 3;
        for (i, (&cout, &stride)) in cfg.stages.iter().zip(&cfg.strides).enumerate() {
            let spec = Conv2dSpec { stride, padding: 1 };
            convs.push(Conv2d::new_unbiased(store, &format!("backbone.conv{i}"), cin, cout, 3, spec, RELU_GAIN, rng));
            norms.push(BatchNorm::new(store, &format!("backbone.bn{i}"), cout, true));
            cin = cout;
        }
        Backbone {
            convs,
            norms,
            channels: cin,
            downsampling: cfg.downsampling(),
        }
    }

    /// Maps `(N, 3, H, W)` frames to `(N, C, H/f, W/f)` feature maps.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, frames: Var) -> Result<Var> {
        let s = ctx.g.shape(frames).to_vec();
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(self.downsampling) || !s[3].is_multiple_of(self.downsampling) {
            return Err(Error::Data(format!(
                "backbone expects (N, 3, H, W) frames with H and W divisible by {}, got {s:?}",
                self.downsampling
            )));
        }
        let mut x = frames;
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            x = conv.forward(ctx, x)?;
            x = bn.forward(ctx, x)?;
            x = ctx.g.relu(x);
        }
        Ok(x)
    }
}

/// Per-clip feature maps `(T, C, H, W)` with the image-to-map scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapStack<T> {
    pub maps: Tensor<T>,
    /// Image rows per map row.
    pub scale_rows: f64,
    /// Image columns per map column.
    pub scale_cols: f64,
}

impl<T: Real> FeatureMapStack<T> {
    pub fn new(maps: Tensor<T>, scale_rows: f64, scale_cols: f64) -> Result<Self> {
        if maps.ndim() != 4 {
            return Err(Error::Data(format!("expected 4-D tensor, got shape {:?}", maps.shape())));
        }
        if !(scale_rows > 0.0 && scale_cols > 0.0) {
            return Err(Error::Data("map scales must be positive".into()));
        }
        Ok(FeatureMapStack { maps, scale_rows, scale_cols })
    }

    pub fn frames(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn map_size(&self) -> (usize, usize) {
        (self.maps.shape()[2], self.maps.shape()[3])
    }

    /// Writes the tensor to `path` and the scale record next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::save(&self.maps, path).map_err(|e| Error::format(path, e.to_string()))?;
        let meta = sidecar_path(path);
        let text = format!(
            "scale_rows={}\nscale_cols={}\nchannels={}\n",
            self.scale_rows,
            self.scale_cols,
            self.channels()
        );
        fs::write(&meta, text).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let maps: Tensor<T> = io::load(path).map_err(|e| Error::format(path, e.to_string()))?;
        if maps.ndim() != 4 {
            return Err(Error::format(path, format!("expected 4-D tensor, found shape {:?}", maps.shape())));
        }
        let meta = sidecar_path(path);
        let text = fs::read_to_string(&meta).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::format(&meta, "missing feature-map metadata file"),
            _ => Error::io(&meta, e),
        })?;
        let (mut rows, mut cols, mut channels) = (None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&meta, format!("expected key=value, found {line:?}")))?;
            let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| Error::format(&meta, format!("{key}: {e}")));
            match key.trim() {
                "scale_rows" => rows = Some(parse(value)?),
                "scale_cols" => cols = Some(parse(value)?),
                "channels" => channels = Some(parse(value)? as usize),
                other => return Err(Error::format(&meta, format!("unknown key {other:?}"))),
            }
        }
        let (Some(rows), Some(cols)) = (rows, cols) else {
            return Err(Error::format(&meta, "scale_rows and scale_cols are required"));
        };
        if let Some(c) = channels {
            if c != maps.shape()[1] {
                return Err(Error::format(&meta, format!("channels={c} but the tensor has {}", maps.shape()[1])));
            }
        }
        FeatureMapStack::new(maps, rows, cols)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}
