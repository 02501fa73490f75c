//! Prompt-conditioned ViT adapter and intensity decoder.
//!
//! Token field layout: rows `0..N` are patch tokens in row-major grid order,
//! row `N` is the scaling-vector token. Fusion blocks add projected backbone
//! taps and the broadcast text projection to the patch rows only.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, FrozenBackbone, Tap, TextEmbedding, VisualFeatures};
use crate::data_schema::{CxrImage, Heatmap, HeatmapRole, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::nn::{init_tensor, Block, BlockCache, Grads, Init, Linear, Mlp, MlpCache, ParamId, ParamStore};

/// How decoded tokens become per-patch logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Inner product of each decoded patch token with the decoded scaling vector.
    #[default]
    ScalingVector,
    /// Mean over decoded patch-token channels; the scaling vector is unused.
    ChannelMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub decoder_depth: usize,
    pub decoder_hidden: usize,
    pub decoder_out: usize,
    pub decoder: DecoderMode,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            dim: 240,
            heads: 6,
            decoder_depth: 3,
            decoder_hidden: 256,
            decoder_out: 256,
            decoder: DecoderMode::ScalingVector,
            init_std: 0.02,
            seed: 0,
        }
    }
}

/// Backbone tap fused before each of the first four adapter layers.
pub const FUSION_TAPS: [Tap; 4] = Tap::ALL;

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < FUSION_TAPS.len() {
            return Err(Error::Config(format!(
                "adapter depth {} is below the {} fused layers",
                self.depth,
                FUSION_TAPS.len()
            )));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "adapter dim {} must be a positive multiple of {} heads",
                self.dim, self.heads
            )));
        }
        if self.decoder_depth == 0 || self.decoder_hidden == 0 || self.decoder_out == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Fusion {
    visual: Linear,
    text: Linear,
}

/// Patch tokens plus the trailing scaling-vector token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenField {
    pub tokens: Array2<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenField {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_tokens(&self) -> ArrayView2<'_, f64> {
        self.tokens.slice(s![..self.num_patches(), ..])
    }

    pub fn alpha_token(&self) -> Array1<f64> {
        self.tokens.row(self.num_patches()).to_owned()
    }
}

/// Separable bilinear resampling weights, `dst x src`, with pixel centers
/// at `(i + 0.5) * src / dst - 0.5` and edge clamping.
pub fn resize_matrix(src: usize, dst: usize) -> Array2<f64> {
    let mut m = Array2::zeros((dst, src));
    if src == dst {
        m.diag_mut().fill(1.0);
        return m;
    }
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let w = c - lo as f64;
        m[[i, lo]] += 1.0 - w;
        m[[i, hi]] += w;
    }
    m
}

/// Bilinear upsampling of patch-grid logits to the `height x width` image grid.
pub fn upsample_logits(a_l: &Array2<f64>, width: usize, height: usize) -> Array2<f64> {
    let ry = resize_matrix(a_l.nrows(), height);
    let rx = resize_matrix(a_l.ncols(), width);
    ry.dot(a_l).dot(&rx.t())
}

/// Continuous bilinear interpolant of `grid` at (fractional) grid
/// coordinates, clamped at the border.
pub fn bilinear_at(grid: &Array2<f64>, gy: f64, gx: f64) -> f64 {
    let (h, w) = grid.dim();
    let gy = gy.clamp(0.0, (h - 1) as f64);
    let gx = gx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
    (1.0 - fy) * ((1.0 - fx) * grid[[y0, x0]] + fx * grid[[y0, x1]])
        + fy * ((1.0 - fx) * grid[[y1, x0]] + fx * grid[[y1, x1]])
}

/// Everything one forward pass retains for the backward pass.
pub struct ForwardPass {
    grid_h: usize,
    grid_w: usize,
    patches: Array2<f64>,
    /// Resampled tap features per fusion (input of the visual projection).
    fusion_visual_in: Vec<Array2<f64>>,
    text_in: Array2<f64>,
    blocks: Vec<BlockCache>,
    dec_patch: MlpCache,
    dec_alpha: MlpCache,
    decoded_patch: Array2<f64>,
    decoded_alpha: Array2<f64>,
    /// Final token field (patch rows plus scaling-vector row).
    pub output: TokenField,
    /// Patch-grid logits `grid_h x grid_w`.
    pub a_l: Array2<f64>,
    /// Full-resolution logits `height x width`.
    pub logits: Array2<f64>,
}

/// Trainable adapter parameters and their layout.
#[derive(Clone, Debug)]
pub struct AdapterState {
    config: AdapterConfig,
    params: ParamStore,
    patch: Linear,
    alpha: ParamId,
    fusions: Vec<Fusion>,
    blocks: Vec<Block>,
    dec_patch: Mlp,
    dec_alpha: Mlp,
    channels: usize,
    text_dim: usize,
}

impl AdapterState {
    /// Fresh parameters for a backbone with `channels` visual and
    /// `text_dim` text widths.
    pub fn new(config: AdapterConfig, channels: usize, text_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let init = Init::TruncNormal(config.init_std);
        let d = config.dim;
        let mut params = ParamStore::new();
        let patch = Linear::new(&mut params, &mut rng, "adapter.patch", PATCH_SIZE * PATCH_SIZE, d, init);
        let alpha = params.add("adapter.alpha", init_tensor(&mut rng, 1, d, Init::Ones));
        let fusions = (0..FUSION_TAPS.len())
            .map(|k| Fusion {
                visual: Linear::new(&mut params, &mut rng, &format!("fusion.{k}.visual"), channels, d, init),
                text: Linear::new(&mut params, &mut rng, &format!("fusion.{k}.text"), text_dim, d, init),
            })
            .collect();
        let blocks = (0..config.depth)
            .map(|i| Block::new(&mut params, &mut rng, &format!("adapter.{i}"), d, config.heads, init))
            .collect();
        let mut dims = vec![d];
        dims.extend(std::iter::repeat_n(config.decoder_hidden, config.decoder_depth - 1));
        dims.push(config.decoder_out);
        let dec_patch = Mlp::new(&mut params, &mut rng, "decoder.patch", &dims, init);
        let dec_alpha = Mlp::new(&mut params, &mut rng, "decoder.alpha", &dims, init);
        Ok(Self {
            config,
            params,
            patch,
            alpha,
            fusions,
            blocks,
            dec_patch,
            dec_alpha,
            channels,
            text_dim,
        })
    }

    pub fn for_backbone(config: AdapterConfig, backbone: &FrozenBackbone) -> Result<Self> {
        Self::new(config, backbone.channels(), backbone.text_dim())
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn alpha_id(&self) -> ParamId {
        self.alpha
    }

    /// Parameter ids of fusion block `k`: visual weight/bias, text weight/bias.
    pub fn fusion_ids(&self, k: usize) -> [ParamId; 4] {
        let f = &self.fusions[k];
        [f.visual.w, f.visual.b, f.text.w, f.text.b]
    }

    /// Last layer of the scaling-vector decoder MLP (weight, bias).
    pub fn alpha_decoder_output_ids(&self) -> (ParamId, ParamId) {
        let last = self.dec_alpha.layers.last().expect("non-empty decoder");
        (last.w, last.b)
    }

    /// Last layer of the patch decoder MLP (weight, bias).
    pub fn patch_decoder_output_ids(&self) -> (ParamId, ParamId) {
        let last = self.dec_patch.layers.last().expect("non-empty decoder");
        (last.w, last.b)
    }

    pub fn patch_projection_bias(&self) -> Array1<f64> {
        self.params.get(self.patch.b).row(0).to_owned()
    }

    fn check_inputs(&self, image: &CxrImage, features: &VisualFeatures, text: &TextEmbedding) -> Result<()> {
        if features.tap(Tap::Stem).ncols() != self.channels {
            return Err(Error::Shape(format!(
                "backbone features have {} channels, adapter expects {}",
                features.tap(Tap::Stem).ncols(),
                self.channels
            )));
        }
        if text.dim() != self.text_dim {
            return Err(Error::Shape(format!(
                "text embedding has {} dims, adapter expects {}",
                text.dim(),
                self.text_dim
            )));
        }
        if !image.width().is_multiple_of(PATCH_SIZE) || !image.height().is_multiple_of(PATCH_SIZE) {
            return Err(Error::Shape("image not divisible into patches".into()));
        }
        Ok(())
    }

    /// Linear patch projection with the scaling-vector token appended.
    pub fn patch_embed(&self, image: &CxrImage) -> TokenField {
        self.patch_embed_from(
            &patchify(image),
            image.height() / PATCH_SIZE,
            image.width() / PATCH_SIZE,
        )
    }

    fn patch_embed_from(&self, patches: &Array2<f64>, grid_h: usize, grid_w: usize) -> TokenField {
        let projected = self.patch.forward(&self.params, &patches.view());
        let tokens = ndarray::concatenate(Axis(0), &[projected.view(), self.params.get(self.alpha).view()])
            .expect("matching widths");
        TokenField { tokens, grid_h, grid_w }
    }

    /// Resampling operator from the tap grid to the token grid, if they differ.
    fn tap_resize(features: &VisualFeatures, grid_h: usize, grid_w: usize) -> Option<Array2<f64>> {
        if (features.grid_h, features.grid_w) == (grid_h, grid_w) {
            return None;
        }
        let ry = resize_matrix(features.grid_h, grid_h);
        let rx = resize_matrix(features.grid_w, grid_w);
        let mut k = Array2::zeros((grid_h * grid_w, features.grid_h * features.grid_w));
        for ((i, j), v) in k.indexed_iter_mut() {
            let (oy, ox) = (i / grid_w, i % grid_w);
            let (sy, sx) = (j / features.grid_w, j % features.grid_w);
            *v = ry[[oy, sy]] * rx[[ox, sx]];
        }
        Some(k)
    }

    /// Fusion block `k`: adds `conv(f_v)` resampled to the patch grid and the
    /// broadcast `linear(f_t)` to the patch tokens. The scaling-vector token
    /// is left untouched.
    pub fn fuse(
        &self,
        k: usize,
        field: &mut TokenField,
        features: &VisualFeatures,
        text: &TextEmbedding,
    ) -> Result<()> {
        if k >= self.fusions.len() {
            return Err(Error::Invalid(format!("no fusion block {k}")));
        }
        let resize = Self::tap_resize(features, field.grid_h, field.grid_w);
        let text_in = text.0.view().insert_axis(Axis(0)).to_owned();
        self.fuse_inner(k, field, features, &resize, &text_in);
        Ok(())
    }

    fn fuse_inner(
        &self,
        k: usize,
        field: &mut TokenField,
        features: &VisualFeatures,
        resize: &Option<Array2<f64>>,
        text_in: &Array2<f64>,
    ) -> Array2<f64> {
        let f = &self.fusions[k];
        let tap = features.tap(FUSION_TAPS[k]);
        let visual_in = match resize {
            Some(r) => r.dot(tap),
            None => tap.clone(),
        };
        let v = f.visual.forward(&self.params, &visual_in.view());
        let t = f.text.forward(&self.params, &text_in.view());
        let n = field.num_patches();
        let mut patch_rows = field.tokens.slice_mut(s![..n, ..]);
        patch_rows += &v;
        patch_rows += &t.row(0);
        visual_in
    }

    /// Runs the fused transformer stack, decoder and upsampling.
    pub fn forward(&self, image: &CxrImage, features: &VisualFeatures, text: &TextEmbedding) -> Result<ForwardPass> {
        self.check_inputs(image, features, text)?;
        let (grid_h, grid_w) = (image.height() / PATCH_SIZE, image.width() / PATCH_SIZE);
        let patches = patchify(image);
        let mut field = self.patch_embed_from(&patches, grid_h, grid_w);
        let text_in = text.0.view().insert_axis(Axis(0)).to_owned();
        let mut fusion_visual_in = Vec::with_capacity(FUSION_TAPS.len());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            if i < self.fusions.len() {
                let resize = Self::tap_resize(features, grid_h, grid_w);
                fusion_visual_in.push(self.fuse_inner(i, &mut field, features, &resize, &text_in));
            }
            let (y, cache) = block.forward(&self.params, &field.tokens.view());
            field.tokens = y;
            blocks.push(cache);
        }

        let n = field.num_patches();
        let (decoded_patch, dec_patch) = self.dec_patch.forward(&self.params, &field.tokens.slice(s![..n, ..]));
        let (decoded_alpha, dec_alpha) = self.dec_alpha.forward(&self.params, &field.tokens.slice(s![n.., ..]));
        let a_flat = self.combine(&decoded_patch, &decoded_alpha);
        let a_l = a_flat
            .into_shape_with_order((grid_h, grid_w))
            .expect("grid-sized logits");
        let logits = upsample_logits(&a_l, image.width(), image.height());
        Ok(ForwardPass {
            grid_h,
            grid_w,
            patches,
            fusion_visual_in,
            text_in,
            blocks,
            dec_patch,
            dec_alpha,
            decoded_patch,
            decoded_alpha,
            output: field,
            a_l,
            logits,
        })
    }

    fn combine(&self, decoded_patch: &Array2<f64>, decoded_alpha: &Array2<f64>) -> Array1<f64> {
        match self.config.decoder {
            DecoderMode::ScalingVector => decoded_patch.dot(&decoded_alpha.row(0)),
            DecoderMode::ChannelMean => decoded_patch.mean_axis(Axis(1)).expect("non-empty decoder output"),
        }
    }

    /// Patch-grid logits from final patch tokens (`N x D`) and the final
    /// scaling-vector token (`D`).
    pub fn decode_intensity(&self, patch_tokens: &ArrayView2<f64>, alpha_token: &Array1<f64>) -> Result<Array1<f64>> {
        let d = self.config.dim;
        if patch_tokens.ncols() != d || alpha_token.len() != d {
            return Err(Error::Shape(format!(
                "decoder expects width {d}, got {} and {}",
                patch_tokens.ncols(),
                alpha_token.len()
            )));
        }
        let (p, _) = self.dec_patch.forward(&self.params, patch_tokens);
        let (q, _) = self
            .dec_alpha
            .forward(&self.params, &alpha_token.view().insert_axis(Axis(0)));
        Ok(self.combine(&p, &q))
    }

    /// Decoded scaling vector (output of the scaling-vector MLP).
    pub fn decoded_alpha(pass: &ForwardPass) -> Array1<f64> {
        pass.decoded_alpha.row(0).to_owned()
    }

    /// Gradients of a scalar loss with respect to every adapter parameter,
    /// given its gradient with respect to the full-resolution logits.
    pub fn backward(&self, pass: &ForwardPass, d_logits: &Array2<f64>) -> Grads {
        let mut g = self.params.zero_grads();
        let (h, w) = pass.logits.dim();
        let ry = resize_matrix(pass.grid_h, h);
        let rx = resize_matrix(pass.grid_w, w);
        let d_grid = ry.t().dot(d_logits).dot(&rx);
        let n = pass.grid_h * pass.grid_w;
        let da = d_grid.into_shape_with_order(n).expect("flat grid");

        let (d_patch_out, d_alpha_out) = match self.config.decoder {
            DecoderMode::ScalingVector => {
                let q = pass.decoded_alpha.row(0);
                let dp = da.view().insert_axis(Axis(1)).dot(&q.insert_axis(Axis(0)));
                let dq = da.view().insert_axis(Axis(0)).dot(&pass.decoded_patch);
                (dp, Some(dq))
            }
            DecoderMode::ChannelMean => {
                let dout = pass.decoded_patch.ncols();
                let dp = Array2::from_shape_fn((n, dout), |(i, _)| da[i] / dout as f64);
                (dp, None)
            }
        };

        let mut d_tokens = Array2::zeros(pass.output.tokens.raw_dim());
        let d_patch_tokens = self
            .dec_patch
            .backward(&self.params, &mut g, &pass.dec_patch, &d_patch_out.view());
        d_tokens.slice_mut(s![..n, ..]).assign(&d_patch_tokens);
        if let Some(dq) = d_alpha_out {
            let d_alpha_token = self
                .dec_alpha
                .backward(&self.params, &mut g, &pass.dec_alpha, &dq.view());
            d_tokens.slice_mut(s![n.., ..]).assign(&d_alpha_token);
        }

        for (i, block) in self.blocks.iter().enumerate().rev() {
            d_tokens = block.backward(&self.params, &mut g, &pass.blocks[i], &d_tokens.view());
            if i < self.fusions.len() {
                let f = &self.fusions[i];
                let d_patch_rows = d_tokens.slice(s![..n, ..]);
                f.visual
                    .accumulate(&mut g, &pass.fusion_visual_in[i].view(), &d_patch_rows);
                let d_text = d_patch_rows.sum_axis(Axis(0)).insert_axis(Axis(0));
                f.text.accumulate(&mut g, &pass.text_in.view(), &d_text.view());
            }
        }

        self.patch
            .accumulate(&mut g, &pass.patches.view(), &d_tokens.slice(s![..n, ..]));
        *g.get_mut(self.alpha) += &d_tokens.slice(s![n.., ..]);
        g
    }

    /// Sigmoid heatmap for an image and prompt.
    pub fn predict_heatmap(&self, backbone: &FrozenBackbone, image: &CxrImage, prompt: &str) -> Result<Heatmap> {
        let features = backbone.visual_encode(image);
        let text = backbone.text_encode(prompt)?;
        self.predict_from(image, &features, &text)
    }

    /// Sigmoid heatmap from precomputed backbone outputs.
    pub fn predict_from(&self, image: &CxrImage, features: &VisualFeatures, text: &TextEmbedding) -> Result<Heatmap> {
        let pass = self.forward(image, features, text)?;
        Heatmap::new(pass.logits.mapv(crate::losses::sigmoid), HeatmapRole::Predicted)
    }
}
