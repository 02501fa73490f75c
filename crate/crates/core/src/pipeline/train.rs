use std::collections::BTreeMap;

use log::{debug, info};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{MaskSource, PipelineConfig};
use super::prepare::PreparedEntry;
use crate::adapter::AdapterState;
use crate::backbone::{FrozenBackbone, TextEmbedding, VisualFeatures};
use crate::classifier::{mask_image, predicted_class, ClassifierState, FeatureScaler};
use crate::data_schema::Heatmap;
use crate::error::{Error, Result};
use crate::losses::{combined_loss_grad, LossComponents};
use crate::metrics::{fw_iou, heatmap_mask};
use crate::nn::{AdamW, Grads};

// Stream tags mixed into the master seed so batch orders of the two stages
// are independent of each other.
const HEATMAP_ORDER_STREAM: u64 = 0x6865_6174;
const CLASSIFIER_ORDER_STREAM: u64 = 0x636c_7366;

/// Seeded epoch-wise shuffled index stream.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One optimizer step of either stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub batch: Vec<String>,
    pub loss: LossComponents,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub iteration: usize,
    /// Mean fwIoU for stage 1, accuracy for stage 2.
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterationLog>,
    pub validations: Vec<ValidationLog>,
}

impl TrainLog {
    /// JSON lines: every iteration record, then every validation record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.iterations {
            out += &serde_json::to_string(r).expect("log serializes");
            out.push('\n');
        }
        for r in &self.validations {
            out += &serde_json::to_string(r).expect("log serializes");
            out.push('\n');
        }
        out
    }

    /// Every entry id that appeared in a training batch.
    pub fn seen_ids(&self) -> std::collections::BTreeSet<&str> {
        self.iterations
            .iter()
            .flat_map(|r| r.batch.iter().map(String::as_str))
            .collect()
    }
}

/// Result of a training stage: last and best-by-validation states.
#[derive(Clone, Debug)]
pub struct Trained<S> {
    pub last: S,
    pub best: S,
    pub best_iteration: usize,
    pub best_score: Option<f64>,
    pub iterations: usize,
    pub log: TrainLog,
}

/// Precomputed frozen-encoder outputs for a set of entries.
pub struct EncodedEntries<'a> {
    pub entries: Vec<&'a PreparedEntry>,
    pub features: Vec<VisualFeatures>,
    pub texts: Vec<usize>,
    pub text_bank: Vec<TextEmbedding>,
}

impl<'a> EncodedEntries<'a> {
    pub fn new(backbone: &FrozenBackbone, entries: &[&'a PreparedEntry]) -> Result<Self> {
        let features = entries.par_iter().map(|e| backbone.visual_encode(&e.image)).collect();
        let mut prompts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut text_bank = Vec::new();
        let mut texts = Vec::with_capacity(entries.len());
        for e in entries {
            let idx = match prompts.get(e.prompt.as_str()) {
                Some(&i) => i,
                None => {
                    text_bank.push(backbone.text_encode(&e.prompt)?);
                    prompts.insert(&e.prompt, text_bank.len() - 1);
                    text_bank.len() - 1
                }
            };
            texts.push(idx);
        }
        Ok(Self {
            entries: entries.to_vec(),
            features,
            texts,
            text_bank,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn text(&self, i: usize) -> &TextEmbedding {
        &self.text_bank[self.texts[i]]
    }

    /// Predicted heatmaps, keyed by entry id.
    pub fn predict(&self, adapter: &AdapterState) -> Result<BTreeMap<String, Heatmap>> {
        let preds = (0..self.len())
            .into_par_iter()
            .map(|i| adapter.predict_from(&self.entries[i].image, &self.features[i], self.text(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.entries.iter().map(|e| e.id.clone()).zip(preds).collect())
    }

    /// Loss and adapter gradients of entry `i`.
    fn loss_grad(&self, adapter: &AdapterState, config: &PipelineConfig, i: usize) -> Result<(LossComponents, Grads)> {
        let e = self.entries[i];
        let pass = adapter.forward(&e.image, &self.features[i], self.text(i))?;
        let (loss, d_logits) =
            combined_loss_grad(&pass.logits, e.heatmap.values(), &config.loss.weights, config.loss.eps)?;
        Ok((loss, adapter.backward(&pass, &d_logits)))
    }
}

/// Mean fwIoU of predictions against ground truth.
pub fn mean_fw_iou(encoded: &EncodedEntries, preds: &BTreeMap<String, Heatmap>) -> Result<f64> {
    let scores = encoded
        .entries
        .iter()
        .map(|e| fw_iou(&heatmap_mask(&preds[&e.id]), &heatmap_mask(&e.heatmap)))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

fn clip(grads: &mut Grads, max_norm: Option<f64>) -> f64 {
    let norm = grads.global_norm();
    if let Some(m) = max_norm {
        if norm > m {
            grads.scale(m / norm);
        }
    }
    norm
}

fn mean_components(parts: &[LossComponents]) -> LossComponents {
    let n = parts.len() as f64;
    let mut m = LossComponents::default();
    for p in parts {
        m.l2 += p.l2 / n;
        m.ce += p.ce / n;
        m.dice += p.dice / n;
        m.total += p.total / n;
    }
    m
}

fn non_finite(iteration: usize, batch: &[String], loss: &LossComponents) -> Error {
    Error::NonFinite(format!(
        "iteration {iteration}, batch [{}]: l2={} ce={} dice={} total={}",
        batch.join(", "),
        loss.l2,
        loss.ce,
        loss.dice,
        loss.total
    ))
}

fn should_validate(it: usize, every: usize, total: usize) -> bool {
    it == total || (every > 0 && it.is_multiple_of(every))
}

/// Stage 1: minimizes the combined heatmap loss over `train`, keeping the
/// state with the best mean validation fwIoU (the last state when `val` is
/// empty). Per-sample gradients are computed in parallel and summed in
/// batch order, so results do not depend on the thread count.
pub fn train_heatmap(
    config: &PipelineConfig,
    backbone: &FrozenBackbone,
    train: &[&PreparedEntry],
    val: &[&PreparedEntry],
) -> Result<Trained<AdapterState>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training entries".into()));
    }
    let train_set = EncodedEntries::new(backbone, train)?;
    let val_set = EncodedEntries::new(backbone, val)?;
    let mut adapter = AdapterState::for_backbone(config.adapter.clone(), backbone)?;
    let mut optim = AdamW::new(config.optimizer.clone(), adapter.params());
    let mut sampler = BatchSampler::new(train_set.len(), config.seed ^ HEATMAP_ORDER_STREAM);
    let mut log = TrainLog::default();
    let total = config.train.iterations;
    let mut best: Option<(f64, usize, AdapterState)> = None;

    for it in 1..=total {
        let batch = sampler.next_batch(config.train.batch_size);
        let ids: Vec<String> = batch.iter().map(|&i| train_set.entries[i].id.clone()).collect();
        let results = batch
            .par_iter()
            .map(|&i| train_set.loss_grad(&adapter, config, i))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = adapter.params().zero_grads();
        let mut parts = Vec::with_capacity(results.len());
        for (loss, g) in &results {
            grads.add_assign(g);
            parts.push(*loss);
        }
        grads.scale(1.0 / batch.len() as f64);
        let loss = mean_components(&parts);
        if !loss.is_finite() || !grads.all_finite() {
            return Err(non_finite(it, &ids, &loss));
        }
        let grad_norm = clip(&mut grads, config.train.clip_grad_norm);
        optim.step(adapter.params_mut(), &grads);
        debug!(
            "heatmap it {it}: total {:.5} l2 {:.5} ce {:.5} dice {:.5}",
            loss.total, loss.l2, loss.ce, loss.dice
        );
        log.iterations.push(IterationLog {
            iteration: it,
            batch: ids,
            loss,
            grad_norm,
        });

        if !val_set.is_empty() && should_validate(it, config.train.eval_every, total) {
            let score = mean_fw_iou(&val_set, &val_set.predict(&adapter)?)?;
            info!("heatmap it {it}: val fwIoU {score:.4}");
            log.validations.push(ValidationLog { iteration: it, score });
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, it, adapter.clone()));
            }
        }
    }
    let (best_score, best_iteration, best_state) = match best {
        Some((s, i, st)) => (Some(s), i, st),
        None => (None, total, adapter.clone()),
    };
    Ok(Trained {
        last: adapter,
        best: best_state,
        best_iteration,
        best_score,
        iterations: total,
        log,
    })
}

/// Heatmaps used to mask each entry's image for the classifier.
pub fn masking_heatmaps(
    backbone: &FrozenBackbone,
    adapter: Option<&AdapterState>,
    entries: &[&PreparedEntry],
    source: MaskSource,
) -> Result<Vec<Heatmap>> {
    match source {
        MaskSource::GroundTruth => Ok(entries.iter().map(|e| e.heatmap.clone()).collect()),
        MaskSource::Predicted => {
            let adapter = adapter.ok_or_else(|| Error::Invalid("predicted masking needs a heatmap model".into()))?;
            let encoded = EncodedEntries::new(backbone, entries)?;
            let preds = encoded.predict(adapter)?;
            Ok(entries.iter().map(|e| preds[&e.id].clone()).collect())
        }
    }
}

/// Pooled frozen features of `image ⊙ heatmap` per entry.
pub fn masked_features(
    backbone: &FrozenBackbone,
    entries: &[&PreparedEntry],
    heatmaps: &[Heatmap],
) -> Result<Vec<Array1<f64>>> {
    entries
        .par_iter()
        .zip(heatmaps)
        .map(|(e, h)| Ok(backbone.pooled_encode(&mask_image(&e.image, h)?)))
        .collect()
}

/// Fraction of entries whose predicted class matches the label.
pub fn head_accuracy(head: &ClassifierState, features: &[Array1<f64>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for (f, &y) in features.iter().zip(labels) {
        correct += usize::from(predicted_class(&head.classify_features(f)?) == y);
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Stage 2: trains only the linear head on pooled features of masked
/// images, keeping the best-by-validation-accuracy state. The head is
/// optimized on features standardized with training statistics and folded
/// back afterwards, so the returned heads take raw features.
pub fn train_classifier(
    config: &PipelineConfig,
    train_features: &[Array1<f64>],
    train_labels: &[usize],
    train_ids: &[String],
    val_features: &[Array1<f64>],
    val_labels: &[usize],
    channels: usize,
) -> Result<Trained<ClassifierState>> {
    if train_features.is_empty() {
        return Err(Error::Invalid("no training entries".into()));
    }
    let cc = &config.classifier;
    let scaler = FeatureScaler::fit(train_features)?;
    let train_features: Vec<Array1<f64>> = train_features.iter().map(|f| scaler.apply(f)).collect();
    let val_features: Vec<Array1<f64>> = val_features.iter().map(|f| scaler.apply(f)).collect();
    let mut head = ClassifierState::new(channels, config.seed);
    let mut optim = AdamW::new(cc.optimizer.clone(), head.params());
    let mut sampler = BatchSampler::new(train_features.len(), config.seed ^ CLASSIFIER_ORDER_STREAM);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ClassifierState)> = None;
    for it in 1..=cc.iterations {
        let batch = sampler.next_batch(cc.batch_size);
        let ids: Vec<String> = batch.iter().map(|&i| train_ids[i].clone()).collect();
        let mut grads = head.params().zero_grads();
        let mut total = 0.0;
        for &i in &batch {
            let (l, g) = head.loss_grad(&train_features[i], train_labels[i])?;
            total += l;
            grads.add_assign(&g);
        }
        grads.scale(1.0 / batch.len() as f64);
        let loss = LossComponents {
            total: total / batch.len() as f64,
            ..Default::default()
        };
        if !loss.total.is_finite() || !grads.all_finite() {
            return Err(non_finite(it, &ids, &loss));
        }
        let grad_norm = clip(&mut grads, config.train.clip_grad_norm);
        optim.step(head.params_mut(), &grads);
        log.iterations.push(IterationLog {
            iteration: it,
            batch: ids,
            loss,
            grad_norm,
        });
        if !val_features.is_empty() && should_validate(it, cc.eval_every, cc.iterations) {
            let score = head_accuracy(&head, &val_features, val_labels)?;
            info!("classifier it {it}: val accuracy {score:.4}");
            log.validations.push(ValidationLog { iteration: it, score });
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, it, head.clone()));
            }
        }
    }
    let (best_score, best_iteration, mut best_state) = match best {
        Some((s, i, st)) => (Some(s), i, st),
        None => (None, cc.iterations, head.clone()),
    };
    head.fold_scaler(&scaler)?;
    best_state.fold_scaler(&scaler)?;
    Ok(Trained {
        last: head,
        best: best_state,
        best_iteration,
        best_score,
        iterations: cc.iterations,
        log,
    })
}
