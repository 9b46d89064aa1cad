//! Optimization loop: Adam with cosine learning-rate annealing, global-norm
//! gradient clipping, shuffled seeded minibatches, and validation-based
//! checkpoint selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{four_circles, load_csv_tabular, load_idx_images, synthetic_tabular, DatasetSplit};
use crate::data::idx::{dequantize, reduce_bits};
use crate::error::{FunnelError, Result};
use crate::graph::Graph;
use crate::model::{FlowModel, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Where training data comes from; resolved by [`load_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Four-annulus 2-D mixture.
    FourCircles { n: usize, seed: u64 },
    /// Bundled 6-feature tabular generator.
    SyntheticTabular { n: usize, seed: u64 },
    /// Numeric CSV file on disk.
    Csv { path: String, standardize: bool },
    /// IDX image file, reduced to `bits` depth and uniformly dequantized.
    Idx {
        path: String,
        bits: u8,
        #[serde(default)]
        dequantize_seed: u64,
    },
}

/// Resolve a dataset spec into standard 80/10/10 splits (shuffle seeded by
/// `split_seed` except for CSV, which uses the loader's fixed seed).
pub fn load_dataset(spec: &DatasetSpec, split_seed: u64) -> Result<DatasetSplit> {
    match spec {
        DatasetSpec::FourCircles { n, seed } => {
            DatasetSplit::from_rows(four_circles(*n, *seed), 0.1, 0.1, split_seed)
        }
        DatasetSpec::SyntheticTabular { n, seed } => {
            let mut s = DatasetSplit::from_rows(synthetic_tabular(*n, *seed), 0.1, 0.1, split_seed)?;
            s.standardize()?;
            Ok(s)
        }
        DatasetSpec::Csv { path, standardize } => load_csv_tabular(path, *standardize),
        DatasetSpec::Idx { path, bits, dequantize_seed } => {
            let mut images = load_idx_images(path)?;
            if *bits < 8 {
                images = reduce_bits(&images, 8, *bits)?;
            }
            let x = dequantize(&images, *bits, *dequantize_seed)?;
            DatasetSplit::from_rows(x, 0.1, 0.1, split_seed)
        }
    }
}

fn default_clip_norm() -> f64 {
    5.0
}

/// Full training configuration; the JSON on-disk form rejects unknown keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    pub seed: u64,
    pub validation_interval: usize,
    #[serde(default)]
    pub dropout: f64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(FunnelError::Config("total_steps must be > 0".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(FunnelError::Config("base_lr must be > 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(FunnelError::Config("clip_norm must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(FunnelError::Config("batch_size must be > 0".into()));
        }
        if self.validation_interval == 0 {
            return Err(FunnelError::Config("validation_interval must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FunnelError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| FunnelError::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// base_lr · ½(1 + cos(π·step/total)); zero beyond the schedule's end.
pub fn cosine_lr(base_lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        if step == 0 {
            return base_lr;
        }
        return 0.0;
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// One line of the append-only metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_ll: Option<f64>,
}

/// Training result: the metrics log plus the best-validation parameter
/// snapshot (the store itself is left at its final state).
pub struct TrainResult {
    pub metrics: Vec<MetricsRow>,
    pub best_val_ll: f64,
    pub best_step: usize,
    pub best_params: BTreeMap<String, Tensor>,
}

pub fn snapshot(store: &ParamStore) -> BTreeMap<String, Tensor> {
    store
        .names()
        .map(|n| (n.to_string(), store.get(n).unwrap().clone()))
        .collect::<BTreeMap<_, _>>()
}

pub fn restore(store: &mut ParamStore, snap: &BTreeMap<String, Tensor>) {
    for (name, value) in snap {
        store.set_value(name, value.clone());
    }
}

/// Mean model log-likelihood over `data`, scored in bounded chunks.
pub fn mean_log_likelihood(model: &FlowModel, store: &ParamStore, data: &Tensor) -> Result<f64> {
    let rows = data.row_count();
    if rows == 0 {
        return Err(FunnelError::Config("cannot score an empty split".into()));
    }
    let dim = data.last_dim();
    let chunk = 1024usize;
    let mut acc = 0.0;
    let mut at = 0;
    while at < rows {
        let take = chunk.min(rows - at);
        let batch = Tensor::matrix(take, dim, data.data[at * dim..(at + take) * dim].to_vec());
        let parts = model.log_prob(store, &batch)?;
        acc += parts.total().sum();
        at += take;
    }
    Ok(acc / rows as f64)
}

/// Run `total_steps` minibatch steps of Adam on the negative mean
/// log-likelihood. Validation is scored every `validation_interval` steps and
/// at the final step; the best-scoring snapshot is returned. A non-finite
/// training loss aborts, restoring the last validated snapshot.
pub fn train(config: &TrainConfig, model: &FlowModel, data: &DatasetSplit, store: &mut ParamStore) -> Result<TrainResult> {
    if data.dim != model.in_dim {
        return Err(FunnelError::ShapeMismatch(format!(
            "dataset dimension {} vs model input {}",
            data.dim, model.in_dim
        )));
    }
    let rows = data.train.row_count();
    if rows == 0 {
        return Err(FunnelError::Config("training split is empty".into()));
    }
    let dim = data.dim;
    let batch_size = config.batch_size.min(rows);

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;

    let mut metrics = Vec::new();
    let mut best_val_ll = mean_log_likelihood(model, store, &data.val)?;
    let mut best_step = 0;
    let mut best_params = snapshot(store);
    let mut last_good = best_params.clone();
    metrics.push(MetricsRow { step: 0, lr: cosine_lr(config.base_lr, 0, config.total_steps), train_loss: f64::NAN, val_ll: Some(best_val_ll) });

    for step in 1..=config.total_steps {
        if cursor + batch_size > rows {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let mut batch_data = Vec::with_capacity(batch_size * dim);
        for &r in &order[cursor..cursor + batch_size] {
            batch_data.extend_from_slice(&data.train.data[r * dim..(r + 1) * dim]);
        }
        cursor += batch_size;
        let batch = Tensor::matrix(batch_size, dim, batch_data);

        let lr = cosine_lr(config.base_lr, step - 1, config.total_steps);
        let drop_rng = if config.dropout > 0.0 { Some(&mut dropout_rng) } else { None };
        let (loss, grads) = {
            let mut g = Graph::new(store);
            let xn = g.constant(batch);
            let nodes = model.log_prob_graph(&mut g, xn, drop_rng)?;
            let total = nodes.total(&mut g);
            let mean_ll = g.mean_all(total);
            let loss = g.neg(mean_ll);
            let loss_v = g.value(loss).item();
            (loss_v, g.backward(loss).into_params())
        };
        if !loss.is_finite() {
            restore(store, &last_good);
            return Err(FunnelError::Training(format!(
                "non-finite loss {loss} at step {step}; parameters restored to step {best_step} snapshot"
            )));
        }
        store.zero_grads();
        store.accumulate_grads(&grads);
        store.clip_gradients(config.clip_norm);
        store.adam_step(lr, 0.9, 0.999, 1e-8);

        let validate_now = step % config.validation_interval == 0 || step == config.total_steps;
        let val_ll = if validate_now {
            let v = mean_log_likelihood(model, store, &data.val)?;
            if v.is_finite() {
                last_good = snapshot(store);
                if v > best_val_ll {
                    best_val_ll = v;
                    best_step = step;
                    best_params = last_good.clone();
                }
            }
            Some(v)
        } else {
            None
        };
        metrics.push(MetricsRow { step, lr, train_loss: loss, val_ll });
    }

    Ok(TrainResult { metrics, best_val_ll, best_step, best_params })
}

/// Serialize the metrics log as JSON lines (one row per line, append-only).
pub fn metrics_to_jsonl(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("metrics row serializes"));
        out.push('\n');
    }
    out
}
