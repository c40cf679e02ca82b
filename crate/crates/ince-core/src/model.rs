//! Model assembly (embedder + contextual encoder + decoder), the training
//! loop, evaluation metrics and cross-validation.

use crate::adam::{AdamState, ParamStore};
use crate::columnar::ColumnarEmbedder;
use crate::dataset::{
    fit_statistics, fold_split, preprocess, split_kfold, FitStatistics, PreparedDataset, RawTable,
    Targets,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, FeatureGraph};
use crate::in_encoder::{InEncoder, InForwardStates};
use crate::mat::Mat;
use crate::mlp::Mlp;
use crate::rng::{derive_seed, rng_for_stream, shuffled_indices};
use crate::schema::TaskKind;
use crate::tape::{NodeId, ParamId, Tape};
use crate::transformer::TransformerEncoder;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    In,
    Transformer,
}

/// All hyperparameters of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InceConfig {
    /// Latent space width.
    pub latent: usize,
    /// Number of stacked encoder layers; 0 bypasses the contextual encoder
    /// entirely (the context-free ablation: columnar embedder + decoder).
    pub stack: usize,
    /// Depth (number of linear layers) of MLP_E / MLP_N.
    pub depth: usize,
    pub encoder: EncoderKind,
    /// Transformer only: attention heads and feed-forward width.
    pub heads: usize,
    pub ff: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub task: TaskKind,
}

impl InceConfig {
    /// The recommended baseline: d=3, n=2, l=32.
    pub fn default_for(task: TaskKind) -> Self {
        InceConfig {
            latent: 32,
            stack: 2,
            depth: 3,
            encoder: EncoderKind::In,
            heads: 1,
            ff: 512,
            lr: 1e-3,
            batch: 256,
            epochs: 200,
            seed: 42,
            task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 {
            return Err(Error::contract("latent size must be >= 1"));
        }
        if self.stack > 0 && self.depth == 0 {
            return Err(Error::contract("mlp depth must be >= 1"));
        }
        if self.encoder == EncoderKind::Transformer && (self.heads == 0 || self.ff == 0) {
            return Err(Error::contract("transformer needs heads >= 1 and ff >= 1"));
        }
        if self.batch == 0 {
            return Err(Error::contract("batch size must be >= 1"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            TaskKind::Regression => 1,
            TaskKind::Binary => 2,
            TaskKind::Multiclass(c) => c as usize,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum EncoderStack {
    /// Context-free ablation: decoder consumes the mean columnar embedding.
    Bypass,
    In(InEncoder),
    Transformer(TransformerEncoder),
}

/// A fully assembled model: parameters plus the preprocessing statistics it
/// was fitted with.
#[derive(Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: InceConfig,
    pub n_numerical: usize,
    pub cardinalities: Vec<usize>,
    pub embedder: ColumnarEmbedder,
    /// Learnable initial CLS state (1 x l); present iff an encoder is.
    pub cls: Option<ParamId>,
    pub encoder: EncoderStack,
    pub decoder: Mlp,
    pub store: ParamStore,
    pub stats: FitStatistics,
}

/// Tape handles produced by one forward pass.
pub struct ForwardStates {
    /// Logits (B x C) or regression output (B x 1, standardized space).
    pub output: NodeId,
    /// CLS embedding (B x l) when an encoder ran.
    pub cls: Option<NodeId>,
    /// Final node states ((B*(M+1)) x l).
    pub nodes: Option<NodeId>,
    /// Final (post-residual) edge states ((B*E) x l); interaction encoder only.
    pub edges: Option<NodeId>,
    /// Raw last-layer edge messages; interaction encoder only.
    pub last_messages: Option<NodeId>,
}

impl Model {
    /// Build a model with freshly initialized parameters for data shaped
    /// like `stats` (feature counts and cardinalities are read from it).
    pub fn new(config: &InceConfig, stats: &FitStatistics) -> Result<Model> {
        config.validate()?;
        let n_numerical = stats.numerical.len();
        let cardinalities: Vec<usize> = stats.categorical.iter().map(|v| v.len() + 1).collect();
        let m = n_numerical + cardinalities.len();
        if m == 0 {
            return Err(Error::contract("model needs at least one feature"));
        }
        if config.task.is_classification() && stats.class_labels.is_none() {
            return Err(Error::contract("classification task requires fitted class labels"));
        }

        let mut store = ParamStore::new();
        let mut rng = rng_for_stream(config.seed, 0x1217);
        let embedder =
            ColumnarEmbedder::init(&mut store, &mut rng, config.latent, n_numerical, &cardinalities);

        let (cls, encoder) = if config.stack == 0 {
            (None, EncoderStack::Bypass)
        } else {
            let mut cls_init = Mat::zeros(1, config.latent);
            for v in cls_init.data_mut() {
                *v = crate::rng::standard_normal(&mut rng) * 0.02;
            }
            let cls = store.add("cls", cls_init);
            let enc = match config.encoder {
                EncoderKind::In => EncoderStack::In(InEncoder::init(
                    &mut store,
                    &mut rng,
                    config.latent,
                    config.depth,
                    config.stack,
                )),
                EncoderKind::Transformer => EncoderStack::Transformer(TransformerEncoder::init(
                    &mut store,
                    &mut rng,
                    config.latent,
                    config.heads,
                    config.ff,
                    config.stack,
                )),
            };
            (Some(cls), enc)
        };

        // Decoder: two hidden layers of width l, task-adapted head.
        let l = config.latent;
        let decoder = Mlp::init(
            &mut store,
            &mut rng,
            "decoder",
            &[l, l, l, config.output_dim()],
        );

        Ok(Model {
            config: config.clone(),
            n_numerical,
            cardinalities,
            embedder,
            cls,
            encoder,
            decoder,
            store,
            stats: stats.clone(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_numerical + self.cardinalities.len()
    }

    pub fn graph(&self) -> Result<FeatureGraph> {
        build_graph(self.n_features())
    }

    /// Parameter count of the contextual encoder alone (what the closed-form
    /// formulas cover).
    pub fn encoder_param_count(&self) -> usize {
        match &self.encoder {
            EncoderStack::Bypass => 0,
            EncoderStack::In(e) => e.param_count(&self.store),
            EncoderStack::Transformer(t) => t.param_count(&self.store),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.store
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(p.value.clone(), i))
            .collect()
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.store.params.iter().map(|p| tape.input(p.value.clone())).collect()
    }

    /// Forward a batch through embedder, encoder and decoder.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        numerical: &Mat,
        cat_codes: &[u32],
    ) -> Result<ForwardStates> {
        let batch = numerical.rows();
        if batch == 0 {
            return Err(Error::contract("empty batch"));
        }
        let features = self.embedder.embed_batch(tape, bound, numerical, cat_codes, batch)?;
        let m = features.len();

        if matches!(self.encoder, EncoderStack::Bypass) {
            // feature-major stack -> batch-major interleave -> mean pool
            let stacked = tape.concat_rows(&features)?;
            let mut interleave = Vec::with_capacity(batch * m);
            for b in 0..batch {
                for j in 0..m {
                    interleave.push((j * batch + b) as u32);
                }
            }
            let ordered = tape.gather_rows(stacked, Arc::new(interleave))?;
            let pooled = tape.group_mean_rows(ordered, m)?;
            let output = self.decoder.forward(tape, bound, pooled)?;
            return Ok(ForwardStates {
                output,
                cls: None,
                nodes: None,
                edges: None,
                last_messages: None,
            });
        }

        let graph = self.graph()?;
        let idx = graph.batch_indices(batch);
        let cls_param = bound[self.cls.expect("encoder implies cls param")];
        let cls_rows = tape.gather_rows(cls_param, Arc::new(vec![0u32; batch]))?;

        let mut parts = features.clone();
        parts.push(cls_rows);
        let stacked = tape.concat_rows(&parts)?;
        let nodes0 = tape.gather_rows(stacked, idx.interleave.clone())?;

        let (nodes, edges, last_messages) = match &self.encoder {
            EncoderStack::In(enc) => {
                let InForwardStates { nodes, edges, last_messages } =
                    enc.forward(tape, bound, nodes0, &idx)?;
                (nodes, Some(edges), Some(last_messages))
            }
            EncoderStack::Transformer(enc) => {
                let nodes = enc.forward(tape, bound, nodes0, graph.n_nodes())?;
                (nodes, None, None)
            }
            EncoderStack::Bypass => unreachable!(),
        };

        let cls_out = tape.gather_rows(nodes, idx.cls_rows.clone())?;
        let output = self.decoder.forward(tape, bound, cls_out)?;
        Ok(ForwardStates {
            output,
            cls: Some(cls_out),
            nodes: Some(nodes),
            edges,
            last_messages,
        })
    }

    /// Attach the task loss for a batch; regression targets must already be
    /// standardized.
    pub fn loss_for(
        &self,
        tape: &mut Tape,
        states: &ForwardStates,
        targets: &BatchTargets,
    ) -> Result<NodeId> {
        match targets {
            BatchTargets::Classes(labels) => tape.cross_entropy_loss(states.output, labels.clone()),
            BatchTargets::Values(vals) => tape.mse_loss(states.output, vals.clone()),
        }
    }

    /// Standardize natural-unit regression targets with the fitted stats.
    pub fn standardize_targets(&self, values: &[f64]) -> Vec<f64> {
        match self.stats.target_stats {
            Some(ts) => values.iter().map(|v| (v - ts.mean) / ts.std).collect(),
            None => values.to_vec(),
        }
    }

    pub fn unstandardize(&self, standardized: f64) -> f64 {
        match self.stats.target_stats {
            Some(ts) => standardized * ts.std + ts.mean,
            None => standardized,
        }
    }
}

#[derive(Clone)]
pub enum BatchTargets {
    Classes(Arc<Vec<u32>>),
    Values(Arc<Vec<f64>>),
}

/// Per-epoch training log entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone)]
pub struct TrainedModel {
    /// Model holding the final-epoch parameters.
    pub model: Model,
    /// Parameters of the best-validation epoch (equal to final when no
    /// validation split was given).
    pub best_params: ParamStore,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochRecord>,
}

impl TrainedModel {
    /// A model using the best-validation parameters.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        m.store = self.best_params.clone();
        m
    }
}

/// Model predictions in task-native form.
pub enum Predictions {
    /// Row-wise class probabilities (n x C).
    Probs(Mat),
    /// Natural-unit regression predictions.
    Values(Vec<f64>),
}

/// Evaluation record: headline metric plus per-class counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// "accuracy" or "mse".
    pub metric_kind: String,
    pub metric: f64,
    pub n_rows: usize,
    /// True-label counts per class (classification only).
    pub per_class_true: Vec<usize>,
    /// Predicted-label counts per class (classification only).
    pub per_class_pred: Vec<usize>,
}

pub fn higher_is_better(task: TaskKind) -> bool {
    task.is_classification()
}

fn batch_view(data: &PreparedDataset, rows: &[usize]) -> (Mat, Vec<u32>) {
    let nn = data.numerical.cols();
    let mut num = Mat::zeros(rows.len(), nn);
    for (i, &r) in rows.iter().enumerate() {
        num.row_mut(i).copy_from_slice(data.numerical.row(r));
    }
    let mut codes = Vec::with_capacity(rows.len() * data.n_categorical);
    for &r in rows {
        for c in 0..data.n_categorical {
            codes.push(data.cat_code(r, c));
        }
    }
    (num, codes)
}

fn batch_targets(model: &Model, data: &PreparedDataset, rows: &[usize]) -> BatchTargets {
    match &data.targets {
        Targets::Classes(all) => {
            BatchTargets::Classes(Arc::new(rows.iter().map(|&r| all[r]).collect()))
        }
        Targets::Values(all) => {
            let natural: Vec<f64> = rows.iter().map(|&r| all[r]).collect();
            BatchTargets::Values(Arc::new(model.standardize_targets(&natural)))
        }
    }
}

/// Forward the whole split in inference chunks and produce predictions.
pub fn predict(model: &Model, data: &PreparedDataset) -> Result<Predictions> {
    let n = data.n_rows();
    let chunk = model.config.batch.max(256);
    let classification = model.config.task.is_classification();
    let mut probs: Option<Mat> = None;
    let mut values = Vec::new();

    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let (num, codes) = batch_view(data, &rows);
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let states = model.forward_batch(&mut tape, &bound, &num, &codes)?;
        if classification {
            let soft = tape.softmax_rows(states.output)?;
            let sv = tape.value(soft);
            let p = probs.get_or_insert_with(|| Mat::zeros(n, sv.cols()));
            for (i, r) in (start..end).enumerate() {
                p.row_mut(r).copy_from_slice(sv.row(i));
            }
        } else {
            let ov = tape.value(states.output);
            for i in 0..ov.rows() {
                values.push(model.unstandardize(ov.at(i, 0)));
            }
        }
        start = end;
    }
    Ok(if classification { Predictions::Probs(probs.expect("nonempty split")) } else { Predictions::Values(values) })
}

/// Accuracy (argmax, ties to the lowest class index) or natural-unit MSE.
pub fn evaluate(model: &Model, data: &PreparedDataset) -> Result<MetricsRecord> {
    let n = data.n_rows();
    if n == 0 {
        return Err(Error::contract("evaluate: empty split"));
    }
    match (predict(model, data)?, &data.targets) {
        (Predictions::Probs(probs), Targets::Classes(labels)) => {
            let c = probs.cols();
            let mut correct = 0usize;
            let mut per_true = vec![0usize; c];
            let mut per_pred = vec![0usize; c];
            for (r, &y) in labels.iter().enumerate() {
                let row = probs.row(r);
                let mut arg = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[arg] {
                        arg = j;
                    }
                }
                per_true[y as usize] += 1;
                per_pred[arg] += 1;
                if arg == y as usize {
                    correct += 1;
                }
            }
            Ok(MetricsRecord {
                metric_kind: "accuracy".to_string(),
                metric: correct as f64 / n as f64,
                n_rows: n,
                per_class_true: per_true,
                per_class_pred: per_pred,
            })
        }
        (Predictions::Values(pred), Targets::Values(actual)) => {
            let mse = pred
                .iter()
                .zip(actual.iter())
                .map(|(p, a)| (p - a) * (p - a))
                .sum::<f64>()
                / n as f64;
            Ok(MetricsRecord {
                metric_kind: "mse".to_string(),
                metric: mse,
                n_rows: n,
                per_class_true: Vec::new(),
                per_class_pred: Vec::new(),
            })
        }
        _ => Err(Error::contract("evaluate: task kind does not match targets")),
    }
}

/// Supervised training: Adam, task loss, fixed epoch budget, per-epoch
/// reshuffling, optional per-epoch validation tracking.
pub fn train(
    config: &InceConfig,
    train_data: &PreparedDataset,
    val_data: Option<&PreparedDataset>,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainedModel> {
    config.validate()?;
    let model = Model::new(config, &train_data.stats)?;
    train_from(model, train_data, val_data, &mut progress)
}

/// Training loop over an already-constructed model (used by tests that need
/// custom initialization).
pub fn train_from(
    mut model: Model,
    train_data: &PreparedDataset,
    val_data: Option<&PreparedDataset>,
    progress: &mut Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainedModel> {
    let config = model.config.clone();
    let n = train_data.n_rows();
    if n == 0 {
        return Err(Error::contract("train: empty training split"));
    }
    let mut adam = AdamState::new(config.lr, &model.store);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best_params = model.store.clone();
    let mut best_epoch = None;
    let mut best_metric = f64::NAN;
    let hib = higher_is_better(config.task);

    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let mut rng = rng_for_stream(config.seed, 0xE90C ^ derive_seed(epoch as u64, 1));
        let order = shuffled_indices(&mut rng, n);
        let mut loss_sum = 0.0;
        for (batch_no, rows) in order.chunks(config.batch).enumerate() {
            let (num, codes) = batch_view(train_data, rows);
            let targets = batch_targets(&model, train_data, rows);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let states = model.forward_batch(&mut tape, &bound, &num, &codes)?;
            let loss = model.loss_for(&mut tape, &states, &targets)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!(
                    "loss diverged (non-finite) at epoch {} batch {}",
                    epoch, batch_no
                )));
            }
            loss_sum += loss_value * rows.len() as f64;
            let mut grads = tape.backward(loss)?;
            let param_grads = tape.param_grads(&mut grads, model.store.len());
            adam.step(&mut model.store, &param_grads)?;
        }
        let train_loss = loss_sum / n as f64;

        let val_metric = match val_data {
            Some(v) => Some(evaluate(&model, v)?.metric),
            None => None,
        };
        if let Some(metric) = val_metric {
            let improved = match (best_metric.is_nan(), hib) {
                (true, _) => true,
                (false, true) => metric > best_metric,
                (false, false) => metric < best_metric,
            };
            if improved {
                best_metric = metric;
                best_params = model.store.clone();
                best_epoch = Some(epoch);
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_metric,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&record);
        }
        log.push(record);
    }

    if best_epoch.is_none() {
        best_params = model.store.clone();
    }
    Ok(TrainedModel { model, best_params, best_epoch, log })
}

/// One fold's outcome inside cross-validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub seed: u64,
    pub fold: u32,
    /// Metric of the final-epoch model on the held-out fold.
    pub metric_final: f64,
    /// Metric of the best-validation checkpoint on the held-out fold.
    pub metric_best: f64,
    pub n_test: usize,
    pub log: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub metric_kind: String,
    /// Mean of `metric_final` over all (seed, fold) runs.
    pub mean: f64,
    /// Sample standard deviation over all runs (0 when only one run).
    pub std: f64,
    pub folds: Vec<FoldResult>,
}

impl CvReport {
    pub fn from_folds(metric_kind: String, folds: Vec<FoldResult>) -> CvReport {
        let xs: Vec<f64> = folds.iter().map(|f| f.metric_final).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        CvReport { metric_kind, mean, std, folds }
    }
}

/// Class/value view of the raw target used for stratified fold assignment.
pub fn targets_for_split(raw: &RawTable) -> Result<Targets> {
    match raw.schema.task {
        TaskKind::Regression => {
            let mut vals = Vec::with_capacity(raw.n_rows);
            for (r, cell) in raw.target.iter().enumerate() {
                let s = cell
                    .as_deref()
                    .ok_or_else(|| Error::parse(format!("row {}: missing target", r)))?;
                vals.push(s.parse::<f64>().map_err(|_| {
                    Error::parse(format!("row {}: bad regression target `{}`", r, s))
                })?);
            }
            Ok(Targets::Values(vals))
        }
        _ => {
            let mut labels: Vec<String> = raw.target.iter().flatten().cloned().collect();
            if labels.len() != raw.n_rows {
                return Err(Error::parse("missing class labels in target column"));
            }
            labels.sort_unstable();
            labels.dedup();
            let mut classes = Vec::with_capacity(raw.n_rows);
            for cell in raw.target.iter().flatten() {
                classes.push(labels.binary_search(cell).expect("label observed") as u32);
            }
            Ok(Targets::Classes(classes))
        }
    }
}

/// K-fold cross-validation: for each seed a fresh fold assignment; per fold,
/// preprocessing is refit on the training folds only, the model trains with
/// the held-out fold as validation, and the final model is scored on it.
pub fn cross_validate(
    config: &InceConfig,
    raw: &RawTable,
    k: usize,
    seeds: &[u64],
    mut progress: Option<&mut dyn FnMut(u64, u32, &EpochRecord)>,
) -> Result<CvReport> {
    if seeds.is_empty() {
        return Err(Error::contract("cross_validate: at least one seed required"));
    }
    let split_targets = targets_for_split(raw)?;
    let mut folds_out = Vec::with_capacity(seeds.len() * k);
    for &seed in seeds {
        let (assignment, _warnings) = split_kfold(&split_targets, k, seed)?;
        for fold in 0..k as u32 {
            let (train_rows, test_rows) = fold_split(&assignment, fold);
            let train_raw = raw.select_rows(&train_rows);
            let test_raw = raw.select_rows(&test_rows);
            let stats = fit_statistics(&train_raw)?;
            let train_prep = preprocess(&train_raw, Some(&stats), false)?;
            let test_prep = preprocess(&test_raw, Some(&stats), false)?;

            let mut fold_config = config.clone();
            fold_config.seed = derive_seed(seed, 0xF0_1D ^ fold as u64);
            let mut cb = progress.as_deref_mut().map(|cb| {
                let seed_copy = seed;
                move |rec: &EpochRecord| cb(seed_copy, fold, rec)
            });
            let mut cb_dyn: Option<&mut dyn FnMut(&EpochRecord)> =
                cb.as_mut().map(|c| c as &mut dyn FnMut(&EpochRecord));
            let trained = train(
                &fold_config,
                &train_prep,
                Some(&test_prep),
                cb_dyn.take(),
            )?;
            let metric_final = evaluate(&trained.model, &test_prep)?.metric;
            let metric_best = evaluate(&trained.best_model(), &test_prep)?.metric;
            folds_out.push(FoldResult {
                seed,
                fold,
                metric_final,
                metric_best,
                n_test: test_rows.len(),
                log: trained.log,
            });
        }
    }
    let metric_kind =
        if config.task.is_classification() { "accuracy" } else { "mse" }.to_string();
    Ok(CvReport::from_folds(metric_kind, folds_out))
}
