//! Heatmap-masked finding classification.
//!
//! The frozen backbone's pooled feature of `image ⊙ heatmap` feeds a single
//! linear layer with a two-way softmax. Only that head is trainable.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::FrozenBackbone;
use crate::data_schema::{CxrImage, Heatmap};
use crate::error::{Error, Result};
use crate::losses::{classifier_ce_grad, softmax};
use crate::nn::{Grads, Init, Linear, ParamStore};

pub const NUM_CLASSES: usize = 2;

/// Elementwise product of an image and a heatmap of the same size.
pub fn mask_image(image: &CxrImage, heatmap: &Heatmap) -> Result<CxrImage> {
    if image.pixels().dim() != heatmap.values().dim() {
        return Err(Error::Shape(format!(
            "image {}x{} vs heatmap {}x{}",
            image.width(),
            image.height(),
            heatmap.width(),
            heatmap.height()
        )));
    }
    CxrImage::new(image.pixels() * heatmap.values())
}

/// Linear head over pooled backbone features.
#[derive(Clone, Debug)]
pub struct ClassifierState {
    params: ParamStore,
    head: Linear,
}

impl ClassifierState {
    /// Small random head weights from `seed`.
    pub fn new(channels: usize, seed: u64) -> Self {
        Self::with_init(channels, seed, Init::TruncNormal(0.02))
    }

    /// All-zero head: uniform predictions.
    pub fn zeros(channels: usize) -> Self {
        Self::with_init(channels, 0, Init::Zeros)
    }

    fn with_init(channels: usize, seed: u64, init: Init) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let head = Linear::new(&mut params, &mut rng, "classifier.head", channels, NUM_CLASSES, init);
        Self { params, head }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn channels(&self) -> usize {
        self.params.get(self.head.w).nrows()
    }

    fn check(&self, features: &Array1<f64>) -> Result<()> {
        if features.len() != self.channels() {
            return Err(Error::Shape(format!(
                "pooled feature has {} dims, head expects {}",
                features.len(),
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, features: &Array1<f64>) -> Result<Array1<f64>> {
        self.check(features)?;
        let x = features.view().insert_axis(Axis(0));
        Ok(self.head.forward(&self.params, &x).index_axis_move(Axis(0), 0))
    }

    /// Class probabilities `(negative, positive)` from a pooled feature.
    pub fn classify_features(&self, features: &Array1<f64>) -> Result<Array1<f64>> {
        Ok(softmax(&self.logits(features)?))
    }

    /// Class probabilities for an already-masked image.
    pub fn classify(&self, backbone: &FrozenBackbone, masked: &CxrImage) -> Result<Array1<f64>> {
        self.classify_features(&backbone.pooled_encode(masked))
    }

    /// Cross-entropy and head gradients for one pooled feature.
    pub fn loss_grad(&self, features: &Array1<f64>, label: usize) -> Result<(f64, Grads)> {
        let logits = self.logits(features)?;
        let (loss, dlogits) = classifier_ce_grad(&logits, label)?;
        let mut g = self.params.zero_grads();
        let x: Array2<f64> = features.view().insert_axis(Axis(0)).to_owned();
        let dy = dlogits.view().insert_axis(Axis(0)).to_owned();
        self.head.accumulate(&mut g, &x.view(), &dy.view());
        Ok((loss, g))
    }
}

/// Per-channel affine map `(x - mean) / scale` fitted to training features.
///
/// Masked images share most of their pixels, so pooled features carry a large
/// common component and small between-image spread; training the head on
/// standardized features keeps the problem well conditioned.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureScaler {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl FeatureScaler {
    /// Mean and population standard deviation per channel; constant channels
    /// get scale 1.
    pub fn fit(features: &[Array1<f64>]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::Invalid("no features to standardize".into()))?;
        if let Some(f) = features.iter().find(|f| f.len() != first.len()) {
            return Err(Error::Shape(format!(
                "feature of {} dims among {}-dim features",
                f.len(),
                first.len()
            )));
        }
        let n = features.len() as f64;
        let mean = features.iter().fold(Array1::zeros(first.len()), |acc, f| acc + f) / n;
        let var = features
            .iter()
            .fold(Array1::zeros(first.len()), |acc, f| acc + (f - &mean).mapv(|v| v * v))
            / n;
        let scale = var.mapv(|v: f64| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, features: &Array1<f64>) -> Array1<f64> {
        (features - &self.mean) / &self.scale
    }
}

impl ClassifierState {
    /// Rewrites a head trained on `scaler`-standardized features into one
    /// that takes raw features: `W' = W / s`, `b' = b - (m / s) W`.
    pub fn fold_scaler(&mut self, scaler: &FeatureScaler) -> Result<()> {
        if scaler.mean.len() != self.channels() {
            return Err(Error::Shape(format!(
                "scaler has {} channels, head expects {}",
                scaler.mean.len(),
                self.channels()
            )));
        }
        let w = self.params.get(self.head.w).clone();
        let folded = &w / &scaler.scale.view().insert_axis(Axis(1));
        let shift = (&scaler.mean / &scaler.scale).dot(&w);
        *self.params.get_mut(self.head.w) = folded;
        let b = self.params.get_mut(self.head.b);
        let shift = shift
            .into_shape_with_order(b.raw_dim())
            .map_err(|e| Error::Shape(e.to_string()))?;
        *b -= &shift;
        Ok(())
    }
}

/// Index of the larger probability (ties go to the negative class).
pub fn predicted_class(probs: &Array1<f64>) -> usize {
    usize::from(probs[1] > probs[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_schema::HeatmapRole;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn masking_identities() {
        let px = Array2::from_shape_fn((16, 16), |(y, x)| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let img = CxrImage::new(px.clone()).unwrap();
        let ones = Heatmap::new(Array2::ones((16, 16)), HeatmapRole::GroundTruth).unwrap();
        assert_eq!(mask_image(&img, &ones).unwrap().pixels(), &px);
        let zeros = Heatmap::zeros(16, 16, HeatmapRole::GroundTruth);
        assert!(mask_image(&img, &zeros).unwrap().pixels().iter().all(|&v| v == 0.0));
        let bad = Heatmap::zeros(32, 16, HeatmapRole::GroundTruth);
        assert!(mask_image(&img, &bad).is_err());
    }

    #[test]
    fn folded_scaler_matches_standardized_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats: Vec<Array1<f64>> = (0..6)
            .map(|_| Array1::from_shape_fn(4, |k| 3.0 + k as f64 + 0.01 * rng.random_range(-1.0..1.0)))
            .chain(std::iter::once(Array1::from_elem(4, 2.0)))
            .collect();
        let scaler = FeatureScaler::fit(&feats).unwrap();
        let mut head = ClassifierState::new(4, 3);
        let expected: Vec<Array1<f64>> = feats.iter().map(|f| head.logits(&scaler.apply(f)).unwrap()).collect();
        head.fold_scaler(&scaler).unwrap();
        for (f, e) in feats.iter().zip(&expected) {
            let got = head.logits(f).unwrap();
            assert!(got.iter().zip(e).all(|(a, b)| (a - b).abs() < 1e-9));
        }
        assert!(FeatureScaler::fit(&[]).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let c = ClassifierState::zeros(8);
        let p = c.classify_features(&Array1::linspace(-1.0, 1.0, 8)).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, 0.5]);
        assert!(c.classify_features(&Array1::zeros(3)).is_err());
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut c = ClassifierState::new(5, 3);
        let f = Array1::from(vec![0.3, -1.0, 0.5, 2.0, -0.2]);
        let (_, g) = c.loss_grad(&f, 1).unwrap();
        let w = c.head.w;
        for k in 0..5 {
            for j in 0..2 {
                let orig = c.params.get(w)[[k, j]];
                c.params.get_mut(w)[[k, j]] = orig + 1e-6;
                let up = c.loss_grad(&f, 1).unwrap().0;
                c.params.get_mut(w)[[k, j]] = orig - 1e-6;
                let down = c.loss_grad(&f, 1).unwrap().0;
                c.params.get_mut(w)[[k, j]] = orig;
                assert!(((up - down) / 2e-6 - g.get(w)[[k, j]]).abs() < 1e-8);
            }
        }
    }
}
