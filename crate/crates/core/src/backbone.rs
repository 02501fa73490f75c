//! Frozen vision-language backbone.
//!
//! [`FrozenBackbone`] is the encoder contract the adapter and the classifier
//! consume. The shipped implementation is a small randomly initialized ViT
//! pair, deterministic in its seed, standing in for pretrained weights.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_schema::{CxrImage, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::nn::{Block, Init, LayerNorm, Linear, ParamStore};

/// Backbone layers whose outputs are exposed to the adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tap {
    Stem,
    Layer3,
    Layer6,
    Layer9,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::Stem, Tap::Layer3, Tap::Layer6, Tap::Layer9];

    /// Number of transformer layers applied before this tap is read.
    pub fn depth(self) -> usize {
        match self {
            Tap::Stem => 0,
            Tap::Layer3 => 3,
            Tap::Layer6 => 6,
            Tap::Layer9 => 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub seed: u64,
    /// Visual channel width (`C_b`).
    pub channels: usize,
    /// Text embedding width (`E`).
    pub text_dim: usize,
    /// Visual transformer layers; at least 9 so every tap exists.
    pub layers: usize,
    pub heads: usize,
    pub text_layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            channels: 64,
            text_dim: 64,
            layers: 10,
            heads: 4,
            text_layers: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 9 {
            return Err(Error::Config(format!(
                "backbone needs at least 9 layers for the layer-9 tap, got {}",
                self.layers
            )));
        }
        if self.heads == 0
            || self.channels == 0
            || self.text_dim == 0
            || !self.channels.is_multiple_of(self.heads)
            || !self.text_dim.is_multiple_of(self.heads)
        {
            return Err(Error::Config(format!(
                "backbone widths {} / {} must be positive multiples of {} heads",
                self.channels, self.text_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Multi-tap patch features, each `(grid_h * grid_w) x C_b`, row-major over
/// the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub grid_h: usize,
    pub grid_w: usize,
    pub(crate) taps: [Array2<f64>; 4],
}

impl VisualFeatures {
    pub fn tap(&self, tap: Tap) -> &Array2<f64> {
        &self.taps[Tap::ALL.iter().position(|&t| t == tap).expect("known tap")]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(pub Array1<f64>);

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Splits an image into `PATCH_SIZE`-square patches: one row per patch,
/// patches and pixels both in row-major order.
pub fn patchify(image: &CxrImage) -> Array2<f64> {
    let px = image.pixels();
    let (gh, gw) = (image.height() / PATCH_SIZE, image.width() / PATCH_SIZE);
    let mut out = Array2::zeros((gh * gw, PATCH_SIZE * PATCH_SIZE));
    for (n, mut row) in out.rows_mut().into_iter().enumerate() {
        let (py, pxi) = (n / gw * PATCH_SIZE, n % gw * PATCH_SIZE);
        for dy in 0..PATCH_SIZE {
            for dx in 0..PATCH_SIZE {
                row[dy * PATCH_SIZE + dx] = px[[py + dy, pxi + dx]];
            }
        }
    }
    out
}

fn sinusoid(pos: f64, dim: usize, out: &mut [f64]) {
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
}

/// Fixed 2-D sinusoidal position code: first half of the channels encode
/// the patch row, second half the column.
pub fn position_code(grid_h: usize, grid_w: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((grid_h * grid_w, dim));
    for (n, mut row) in out.rows_mut().into_iter().enumerate() {
        let row = row.as_slice_mut().expect("contiguous row");
        sinusoid((n / grid_w) as f64, half, &mut row[..half]);
        sinusoid((n % grid_w) as f64, dim - half, &mut row[half..]);
    }
    out
}

/// Lowercase alphanumeric words.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub struct FrozenBackbone {
    config: BackboneConfig,
    params: ParamStore,
    patch: Linear,
    visual: Vec<Block>,
    visual_norm: LayerNorm,
    text: Vec<Block>,
    text_norm: LayerNorm,
}

impl FrozenBackbone {
    /// Seed-deterministic toy encoders.
    pub fn toy(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let patch = Linear::new(
            &mut params,
            &mut rng,
            "visual.patch",
            PATCH_SIZE * PATCH_SIZE,
            config.channels,
            Init::FanIn,
        );
        let visual = (0..config.layers)
            .map(|i| {
                Block::new(
                    &mut params,
                    &mut rng,
                    &format!("visual.{i}"),
                    config.channels,
                    config.heads,
                    Init::FanIn,
                )
            })
            .collect();
        let visual_norm = LayerNorm::new(&mut params, "visual.norm", config.channels);
        let text = (0..config.text_layers)
            .map(|i| {
                Block::new(
                    &mut params,
                    &mut rng,
                    &format!("text.{i}"),
                    config.text_dim,
                    config.heads,
                    Init::FanIn,
                )
            })
            .collect();
        let text_norm = LayerNorm::new(&mut params, "text.norm", config.text_dim);
        Ok(Self {
            config,
            params,
            patch,
            visual,
            visual_norm,
            text,
            text_norm,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn text_dim(&self) -> usize {
        self.config.text_dim
    }

    /// Read-only view of the weights, e.g. for freeze checksums.
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn run_visual(&self, image: &CxrImage, keep_taps: bool) -> (Vec<Array2<f64>>, Array2<f64>) {
        let (gh, gw) = (image.height() / PATCH_SIZE, image.width() / PATCH_SIZE);
        let patches = patchify(image);
        let mut x = self.patch.forward(&self.params, &patches.view());
        x += &position_code(gh, gw, self.config.channels);
        let mut taps = Vec::with_capacity(4);
        if keep_taps {
            taps.push(x.clone());
        }
        for (i, block) in self.visual.iter().enumerate() {
            x = block.forward(&self.params, &x.view()).0;
            if keep_taps && matches!(i + 1, 3 | 6 | 9) {
                taps.push(x.clone());
            }
        }
        (taps, x)
    }

    /// Patch features at the stem and after layers 3, 6 and 9.
    pub fn visual_encode(&self, image: &CxrImage) -> VisualFeatures {
        let (taps, _) = self.run_visual(image, true);
        let taps: [Array2<f64>; 4] = taps.try_into().expect("four taps");
        VisualFeatures {
            grid_h: image.height() / PATCH_SIZE,
            grid_w: image.width() / PATCH_SIZE,
            taps,
        }
    }

    /// Final normalized patch tokens, mean-pooled to one `C_b` vector.
    pub fn pooled_encode(&self, image: &CxrImage) -> Array1<f64> {
        let (_, x) = self.run_visual(image, false);
        let (n, _) = self.visual_norm.forward(&self.params, &x.view());
        n.mean_axis(Axis(0)).expect("at least one patch")
    }

    fn token_embedding(&self, token: &str) -> Array1<f64> {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array1::from_shape_simple_fn(self.config.text_dim, || StandardNormal.sample(&mut rng))
    }

    /// Final-position embedding of the prompt.
    pub fn text_encode(&self, prompt: &str) -> Result<TextEmbedding> {
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::Invalid("prompt is empty".into()));
        }
        let e = self.config.text_dim;
        let mut x = Array2::zeros((tokens.len(), e));
        for (i, t) in tokens.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.token_embedding(t));
            let mut pos = vec![0.0; e];
            sinusoid(i as f64, e, &mut pos);
            row += &Array1::from(pos);
        }
        for block in &self.text {
            x = block.forward(&self.params, &x.view()).0;
        }
        let last: ArrayView2<f64> = x.slice(ndarray::s![tokens.len() - 1.., ..]);
        let (n, _) = self.text_norm.forward(&self.params, &last);
        Ok(TextEmbedding(n.row(0).to_owned()))
    }
}
