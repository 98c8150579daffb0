//! End-to-end training: configuration, the warm-up / multi-label / joint
//! schedule, the epoch loop, checkpointing, and final retrieval metrics.
//!
//! An epoch is one shuffled pass over the dataset. Warm-up epochs treat
//! each sample as its own class to seed the memory bank; multi-label
//! epochs predict positive sets from the bank; joint epochs additionally
//! recluster the features once at epoch start and interleave PK-sampled
//! batches carrying the classification and triplet losses. Everything is
//! seeded and sequential, so a fixed config and seed reproduce a run
//! byte for byte.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clusterer::{self, ClusterMethod, PseudoLabeling};
use crate::data::{read_embeddings, write_embeddings, Dataset};
use crate::error::{Error, Result};
use crate::evaluator::{cmc_map, EvalProtocol, EvalSet, RetrievalMetrics};
use crate::extractor::{learning_rate, sgd_update, ExtractorModel, ModelGradients, SgdOptimizer};
use crate::losses::{ce_label_smoothing, triplet_hard, ClassifierHead, LossWeights};
use crate::matrix::Matrix;
use crate::memory_bank::{alpha_schedule, MemoryBank};
use crate::multilabel::{cycle_consistent_positives, mmcl_loss, predict_label};
use crate::rerank::{jaccard_matrix, pairwise_euclidean, RerankParams};

/// All training hyperparameters. Config-file keys match the field names,
/// except the capitalized neighborhood sizes `K1`, `K2` and `K_sample`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub joint_start_epoch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    /// Similarity threshold for positive-set prediction.
    pub t: f64,
    /// Positive-term weight inside the multi-label loss.
    pub delta: f64,
    /// Hard-negative percentage.
    pub r: f64,
    pub k1: usize,
    pub k2: usize,
    /// DBSCAN min_samples.
    pub k_sample: usize,
    pub eps_dbscan: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon_smooth: f64,
    pub margin: f64,
    /// "dbscan" or "kmeans:<k>".
    pub cluster_method: String,
    pub seed: u64,
    /// Output width of each extractor branch; features are 3x this.
    pub branch_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 60,
            warmup_epochs: 5,
            joint_start_epoch: 15,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_every: 30,
            batch_size: 128,
            t: 0.6,
            delta: 5.0,
            r: 1.0,
            k1: 20,
            k2: 6,
            k_sample: 4,
            eps_dbscan: 0.6,
            lambda1: 0.3,
            lambda2: 1.0,
            epsilon_smooth: 0.1,
            margin: 0.0,
            cluster_method: "dbscan".into(),
            seed: 0,
            branch_dim: 16,
        }
    }
}

impl TrainConfig {
    /// Defaults with the three phase lengths rescaled to `total_epochs`,
    /// keeping the default 5:10:45 split, rounding down, at least one
    /// epoch per phase.
    pub fn scaled(total_epochs: usize) -> Result<Self> {
        let warmup = (total_epochs * 5 / 60).max(1);
        let ml = (total_epochs * 10 / 60).max(1);
        let cfg = TrainConfig {
            total_epochs,
            warmup_epochs: warmup,
            joint_start_epoch: warmup + ml,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs == 0 {
            return Err(Error::ConfigError(
                "warmup_epochs must be >= 1; the memory bank needs a seeding pass".into(),
            ));
        }
        if !(self.warmup_epochs < self.joint_start_epoch
            && self.joint_start_epoch < self.total_epochs)
        {
            return Err(Error::ConfigError(format!(
                "schedule must satisfy warmup_epochs < joint_start_epoch < total_epochs, \
                 got {} / {} / {}",
                self.warmup_epochs, self.joint_start_epoch, self.total_epochs
            )));
        }
        crate::extractor::validate_sgd_params(self.lr, self.momentum, self.weight_decay)?;
        if self.lr_decay_every == 0 {
            return Err(Error::ConfigError("lr_decay_every must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::ConfigError("batch_size must be >= 1".into()));
        }
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::ConfigError(format!(
                "t must be in (0,1], got {}",
                self.t
            )));
        }
        if !(self.delta > 0.0) {
            return Err(Error::ConfigError(format!(
                "delta must be > 0, got {}",
                self.delta
            )));
        }
        if !(self.r > 0.0 && self.r <= 100.0) {
            return Err(Error::ConfigError(format!(
                "r must be in (0,100], got {}",
                self.r
            )));
        }
        RerankParams::new(self.k1, self.k2, 0.0)?;
        LossWeights::new(self.lambda1, self.lambda2, self.epsilon_smooth, self.margin)?;
        if self.branch_dim == 0 {
            return Err(Error::ConfigError("branch_dim must be >= 1".into()));
        }
        let method = self.cluster_method_parsed()?;
        crate::clusterer::ClusterParams::new(self.eps_dbscan, self.k_sample, method, self.seed)?;
        Ok(())
    }

    /// Parses the `cluster_method` string: "dbscan" or "kmeans:<k>".
    pub fn cluster_method_parsed(&self) -> Result<ClusterMethod> {
        if self.cluster_method == "dbscan" {
            return Ok(ClusterMethod::Dbscan);
        }
        if let Some(k_text) = self.cluster_method.strip_prefix("kmeans:") {
            let k: usize = k_text.parse().map_err(|_| {
                Error::ConfigError(format!(
                    "invalid k-means cluster count '{k_text}' in cluster_method"
                ))
            })?;
            return Ok(ClusterMethod::KMeans { k });
        }
        Err(Error::ConfigError(format!(
            "cluster_method must be 'dbscan' or 'kmeans:<k>', got '{}'",
            self.cluster_method
        )))
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::ConfigError(format!("invalid value '{}' for key '{key}'", value.trim()))
    })
}

/// Parses a flat `key = value` config text. Blank lines and `#` comments
/// are allowed; unknown keys are rejected. The result is validated.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::ConfigError(format!(
                "line {}: expected 'key = value', got '{line}'",
                idx + 1
            )));
        };
        let key = key.trim();
        match key {
            "total_epochs" => cfg.total_epochs = parse_value(key, value)?,
            "warmup_epochs" => cfg.warmup_epochs = parse_value(key, value)?,
            "joint_start_epoch" => cfg.joint_start_epoch = parse_value(key, value)?,
            "lr" => cfg.lr = parse_value(key, value)?,
            "momentum" => cfg.momentum = parse_value(key, value)?,
            "weight_decay" => cfg.weight_decay = parse_value(key, value)?,
            "lr_decay_every" => cfg.lr_decay_every = parse_value(key, value)?,
            "batch_size" => cfg.batch_size = parse_value(key, value)?,
            "t" => cfg.t = parse_value(key, value)?,
            "delta" => cfg.delta = parse_value(key, value)?,
            "r" => cfg.r = parse_value(key, value)?,
            "K1" => cfg.k1 = parse_value(key, value)?,
            "K2" => cfg.k2 = parse_value(key, value)?,
            "K_sample" => cfg.k_sample = parse_value(key, value)?,
            "eps_dbscan" => cfg.eps_dbscan = parse_value(key, value)?,
            "lambda1" => cfg.lambda1 = parse_value(key, value)?,
            "lambda2" => cfg.lambda2 = parse_value(key, value)?,
            "epsilon_smooth" => cfg.epsilon_smooth = parse_value(key, value)?,
            "margin" => cfg.margin = parse_value(key, value)?,
            "cluster_method" => cfg.cluster_method = value.trim().to_string(),
            "seed" => cfg.seed = parse_value(key, value)?,
            "branch_dim" => cfg.branch_dim = parse_value(key, value)?,
            _ => {
                return Err(Error::ConfigError(format!(
                    "unknown config key '{key}'"
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Which kind of epoch the schedule prescribes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    MultiLabel,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::MultiLabel => "ml",
            Phase::Joint => "joint",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Phase for an epoch: warm-up for `[0, warmup)`, multi-label for
/// `[warmup, joint_start)`, joint from there on.
pub fn phase(epoch: usize, config: &TrainConfig) -> Phase {
    if epoch < config.warmup_epochs {
        Phase::Warmup
    } else if epoch < config.joint_start_epoch {
        Phase::MultiLabel
    } else {
        Phase::Joint
    }
}

/// One line of the epoch log. Fields that only exist in the joint phase
/// serialize as null elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: String,
    pub loss_mmcl: f64,
    pub loss_ce: Option<f64>,
    pub loss_tri: Option<f64>,
    pub alpha: f64,
    #[serde(rename = "C")]
    pub c: Option<usize>,
    pub noise_frac: Option<f64>,
}

/// Everything that evolves across epochs.
#[derive(Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ExtractorModel,
    pub optimizer: SgdOptimizer,
    pub bank: MemoryBank,
    pub head: Option<ClassifierHead>,
    head_velocity: Option<Matrix>,
    /// The next epoch `run_epoch` will execute.
    pub next_epoch: usize,
    /// Raw labels from the most recent joint-phase clustering.
    pub last_clustering: Option<Vec<i64>>,
}

/// Result of a full training run.
#[derive(Debug)]
pub struct RunSummary {
    pub logs: Vec<EpochLog>,
    /// Present when the dataset carries ground truth.
    pub metrics: Option<RetrievalMetrics>,
    pub state: TrainState,
}

/// Distinct, deterministic seed per (run seed, epoch, purpose) triple.
fn derive_seed(seed: u64, epoch: usize, purpose: u64) -> u64 {
    let mut x = seed
        ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (purpose + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

impl TrainState {
    /// Fresh state: seeded model, zeroed optimizer and bank, no head.
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let model = ExtractorModel::init(data.dim(), config.branch_dim, config.seed)?;
        let optimizer =
            SgdOptimizer::new(&model, config.lr, config.momentum, config.weight_decay)?;
        let bank = MemoryBank::init(data.len(), model.feature_dim())?;
        Ok(TrainState {
            config,
            model,
            optimizer,
            bank,
            head: None,
            head_velocity: None,
            next_epoch: 0,
            last_clustering: None,
        })
    }

    /// Writes the checkpoint directory: one embedding file per matrix plus
    /// a full-precision sidecar, a JSON index, and the epoch cursor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        let mut write_one = |name: &str, m: &Matrix| -> Result<()> {
            let file = format!("{name}.emb");
            write_embeddings(&dir.join(&file), m)?;
            write_f64_raw(&dir.join(format!("{name}.f64")), m)?;
            entries.push(IndexEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                file,
            });
            Ok(())
        };
        for (name, m) in self.model.weights() {
            write_one(name, m)?;
        }
        for (name, m) in self.optimizer.velocities() {
            write_one(name, m)?;
        }
        write_one("bank", self.bank.matrix())?;
        if let (Some(head), Some(vel)) = (&self.head, &self.head_velocity) {
            write_one("head_w", head.weights())?;
            write_one("head_vel", vel)?;
        }
        let index = serde_json::to_string_pretty(&entries).expect("serializable");
        fs::write(dir.join("index.json"), index).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::to_string(&StateMeta { next_epoch: self.next_epoch })
            .expect("serializable");
        fs::write(dir.join("state.json"), meta).map_err(|e| Error::io(dir, e))
    }

    /// Restores a checkpoint written by `save`. Full-precision sidecars
    /// are preferred so a resumed run continues bit-exactly; without them
    /// the single-precision embedding files are widened.
    pub fn load(dir: &Path, config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let index_text = fs::read_to_string(dir.join("index.json"))
            .map_err(|e| Error::io(&dir.join("index.json"), e))?;
        let entries: Vec<IndexEntry> = serde_json::from_str(&index_text)
            .map_err(|e| Error::FormatError(format!("bad checkpoint index: {e}")))?;
        let read_one = |name: &str| -> Result<Matrix> {
            let entry = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::FormatError(format!("checkpoint lacks '{name}'")))?;
            read_matrix_pair(dir, entry)
        };

        let model = ExtractorModel::from_weights(
            read_one("w_g")?,
            read_one("w_up")?,
            read_one("w_low")?,
        )?;
        if model.input_dim() != data.dim() {
            return Err(Error::ShapeError(format!(
                "checkpoint expects input dim {}, dataset has {}",
                model.input_dim(),
                data.dim()
            )));
        }
        let mut optimizer =
            SgdOptimizer::new(&model, config.lr, config.momentum, config.weight_decay)?;
        let vels = [read_one("vel_g")?, read_one("vel_up")?, read_one("vel_low")?];
        for (slot, loaded) in optimizer.velocities_mut().into_iter().zip(vels) {
            if loaded.rows() != slot.rows() || loaded.cols() != slot.cols() {
                return Err(Error::ShapeError(format!(
                    "velocity checkpoint has shape {}x{}, expected {}x{}",
                    loaded.rows(),
                    loaded.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            *slot = loaded;
        }

        let bank_m = read_one("bank")?;
        if bank_m.rows() != data.len() {
            return Err(Error::ShapeError(format!(
                "bank checkpoint has {} rows, dataset has {}",
                bank_m.rows(),
                data.len()
            )));
        }
        let exact = dir.join("bank.f64").exists();
        let bank = if exact {
            MemoryBank::from_checkpoint_exact(bank_m)?
        } else {
            MemoryBank::from_checkpoint(bank_m)?
        };

        let (head, head_velocity) = if entries.iter().any(|e| e.name == "head_w") {
            let head = ClassifierHead::from_weights(read_one("head_w")?)?;
            let vel = read_one("head_vel")?;
            (Some(head), Some(vel))
        } else {
            (None, None)
        };

        let meta_text = fs::read_to_string(dir.join("state.json"))
            .map_err(|e| Error::io(&dir.join("state.json"), e))?;
        let meta: StateMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::FormatError(format!("bad checkpoint state: {e}")))?;

        Ok(TrainState {
            config,
            model,
            optimizer,
            bank,
            head,
            head_velocity,
            next_epoch: meta.next_epoch,
            last_clustering: None,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    next_epoch: usize,
}

fn write_f64_raw(path: &Path, m: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + m.data().len() * 8);
    bytes.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64_raw(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::FormatError(format!(
            "{}: too short for a matrix header",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expect = 8 + rows * cols * 8;
    if bytes.len() != expect {
        return Err(Error::FormatError(format!(
            "{}: {} bytes for a {rows}x{cols} matrix, expected {expect}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::DataError(format!(
            "{}: non-finite value",
            path.display()
        )));
    }
    Matrix::from_vec(rows, cols, data)
}

fn read_matrix_pair(dir: &Path, entry: &IndexEntry) -> Result<Matrix> {
    let sidecar = dir.join(format!("{}.f64", entry.name));
    let m = if sidecar.exists() {
        read_f64_raw(&sidecar)?
    } else {
        read_embeddings(&dir.join(&entry.file))?
    };
    if m.rows() != entry.rows || m.cols() != entry.cols {
        return Err(Error::FormatError(format!(
            "checkpoint '{}' has shape {}x{}, index says {}x{}",
            entry.name,
            m.rows(),
            m.cols(),
            entry.rows,
            entry.cols
        )));
    }
    Ok(m)
}

/// Extracts the combined feature for every dataset row.
pub fn extract_features(model: &ExtractorModel, data: &Dataset) -> Result<Matrix> {
    let mut out = Matrix::zeros(data.len(), model.feature_dim());
    for i in 0..data.len() {
        let f = model.extract(data.input(i))?;
        out.row_mut(i).copy_from_slice(&f.f_all);
    }
    Ok(out)
}

/// Joint-phase clustering context for one epoch.
struct JointContext {
    /// Dense pseudo labels; None when the epoch falls back to plain
    /// multi-label behavior (all noise, or fewer than 2 clusters).
    pseudo: Option<PseudoLabeling>,
    /// Dataset rows per dense cluster id.
    members: Vec<Vec<usize>>,
    noise_frac: f64,
    c_logged: Option<usize>,
}

fn prepare_joint(state: &mut TrainState, data: &Dataset, epoch: usize) -> Result<JointContext> {
    let cfg = state.config.clone();
    let features = extract_features(&state.model, data)?;
    let labels = match cfg.cluster_method_parsed()? {
        ClusterMethod::Dbscan => {
            let distances = pairwise_euclidean(&features);
            let params = RerankParams::new(cfg.k1, cfg.k2, 0.0)?;
            let reranked = jaccard_matrix(&distances, &params)?;
            clusterer::dbscan(&reranked.jaccard, cfg.eps_dbscan, cfg.k_sample)?
        }
        ClusterMethod::KMeans { k } => {
            clusterer::kmeans(&features, k, derive_seed(cfg.seed, epoch, 3))?
        }
    };
    state.last_clustering = Some(labels.clone());

    let n = data.len();
    match clusterer::select_clean(&labels) {
        Ok(pseudo) => {
            let noise_frac = (n - pseudo.kept_indices.len()) as f64 / n as f64;
            let c_logged = Some(pseudo.c);
            if pseudo.c < 2 {
                return Ok(JointContext {
                    pseudo: None,
                    members: Vec::new(),
                    noise_frac,
                    c_logged,
                });
            }
            let mut members = vec![Vec::new(); pseudo.c];
            for (pos, &row) in pseudo.kept_indices.iter().enumerate() {
                members[pseudo.y[pos]].push(row);
            }
            if state.head.as_ref().map(ClassifierHead::num_classes) != Some(pseudo.c) {
                state.head = Some(ClassifierHead::init(
                    pseudo.c,
                    state.model.feature_dim(),
                    derive_seed(cfg.seed, epoch, 2),
                )?);
                state.head_velocity =
                    Some(Matrix::zeros(pseudo.c, state.model.feature_dim()));
            }
            Ok(JointContext {
                pseudo: Some(pseudo),
                members,
                noise_frac,
                c_logged,
            })
        }
        Err(Error::EmptyCleanSet) => Ok(JointContext {
            pseudo: None,
            members: Vec::new(),
            noise_frac: 1.0,
            c_logged: None,
        }),
        Err(e) => Err(e),
    }
}

/// One multi-label batch: positives per phase, loss against the live
/// feature's bank scores, SGD step, then per-occurrence bank updates.
/// Returns the summed raw loss over the batch.
fn run_mmcl_batch(
    state: &mut TrainState,
    data: &Dataset,
    rows: &[usize],
    ph: Phase,
    alpha: f64,
) -> Result<f64> {
    let cfg = state.config.clone();
    let mut grads = ModelGradients::zeros_like(&state.model);
    let mut batch_feats = Vec::with_capacity(rows.len());
    let mut loss_sum = 0.0;
    for &i in rows {
        let feat = state.model.extract(data.input(i))?;
        let positives = if ph == Phase::Warmup {
            vec![i]
        } else {
            cycle_consistent_positives(&state.bank, i, cfg.t)?.positives
        };
        let bank_scores = state.bank.similarity_row(state.bank.row(i))?;
        let label = predict_label(&bank_scores, &positives, cfg.r)?;
        let live_scores = state.bank.similarity_row(&feat.f_all)?;
        let out = mmcl_loss(
            &state.bank,
            &live_scores,
            &label.y,
            &positives,
            &label.negatives,
            cfg.delta,
        )?;
        loss_sum += out.loss;
        let scaled: Vec<f64> = out.grad_f.iter().map(|g| g * cfg.lambda1).collect();
        grads.accumulate(&state.model.backward(data.input(i), &scaled)?)?;
        batch_feats.push((i, feat));
    }
    grads.scale(1.0 / rows.len() as f64);
    state.optimizer.step(&mut state.model, &grads)?;
    for (i, feat) in &batch_feats {
        state.bank.update(*i, &feat.f_all, alpha)?;
    }
    Ok(loss_sum)
}

/// One PK-sampled batch in the joint phase: the combined objective over
/// P pseudo-identities with K instances each (sampled with replacement).
/// Returns the raw CE and triplet means.
fn run_pk_batch(
    state: &mut TrainState,
    data: &Dataset,
    ctx: &JointContext,
    pk_rng: &mut ChaCha8Rng,
    alpha: f64,
) -> Result<(f64, f64)> {
    let cfg = state.config.clone();
    let c = ctx.members.len();
    let p_count = c.min(8);
    // At least two instances per identity so the triplet term always has
    // a positive pair.
    let k_draw = cfg.k_sample.max(2);
    let chosen = rand::seq::index::sample(pk_rng, c, p_count);
    let mut rows = Vec::with_capacity(p_count * k_draw);
    let mut pseudo_ids = Vec::with_capacity(p_count * k_draw);
    for cid in chosen {
        let pool = &ctx.members[cid];
        for _ in 0..k_draw {
            rows.push(pool[pk_rng.gen_range(0..pool.len())]);
            pseudo_ids.push(cid);
        }
    }
    let b = rows.len();
    let inv_b = 1.0 / b as f64;

    let feats: Vec<_> = rows
        .iter()
        .map(|&i| state.model.extract(data.input(i)))
        .collect::<Result<_>>()?;
    let feat_rows: Vec<Vec<f64>> = feats.iter().map(|f| f.f_all.clone()).collect();
    let fmat = Matrix::from_rows(&feat_rows)?;

    let head = state.head.as_ref().expect("joint context built the head");
    let mut dw_sum = Matrix::zeros(head.num_classes(), head.feature_dim());
    let mut feat_grads: Vec<Vec<f64>> = vec![vec![0.0; state.model.feature_dim()]; b];
    let mut ce_sum = 0.0;
    for idx in 0..b {
        let logits = head.logits(&feat_rows[idx])?;
        let ce = ce_label_smoothing(&logits, pseudo_ids[idx], cfg.epsilon_smooth)?;
        ce_sum += ce.loss;
        let (dw, df) = head.backward(&feat_rows[idx], &ce.grad_logits)?;
        dw_sum.add_assign(&dw)?;
        for (acc, g) in feat_grads[idx].iter_mut().zip(&df) {
            *acc += g * inv_b;
        }
    }
    let ce_mean = ce_sum * inv_b;

    let tri = triplet_hard(&fmat, &pseudo_ids, cfg.margin)?;

    let mut grads = ModelGradients::zeros_like(&state.model);
    for idx in 0..b {
        let i = rows[idx];
        let live_scores = state.bank.similarity_row(&feat_rows[idx])?;
        let positives = cycle_consistent_positives(&state.bank, i, cfg.t)?.positives;
        let bank_scores = state.bank.similarity_row(state.bank.row(i))?;
        let label = predict_label(&bank_scores, &positives, cfg.r)?;
        let mmcl = mmcl_loss(
            &state.bank,
            &live_scores,
            &label.y,
            &positives,
            &label.negatives,
            cfg.delta,
        )?;
        let total: Vec<f64> = (0..state.model.feature_dim())
            .map(|k| {
                cfg.lambda1 * inv_b * mmcl.grad_f[k]
                    + cfg.lambda2 * (feat_grads[idx][k] + tri.grad_f.get(idx, k))
            })
            .collect();
        grads.accumulate(&state.model.backward(data.input(i), &total)?)?;
    }
    state.optimizer.step(&mut state.model, &grads)?;

    dw_sum.scale(cfg.lambda2 * inv_b);
    let head = state.head.as_mut().expect("checked above");
    let vel = state.head_velocity.as_mut().expect("paired with head");
    sgd_update(
        head.weights_mut(),
        vel,
        &dw_sum,
        state.optimizer.lr,
        cfg.momentum,
        cfg.weight_decay,
    )?;

    for (idx, &i) in rows.iter().enumerate() {
        state.bank.update(i, &feats[idx].f_all, alpha)?;
    }
    Ok((ce_mean, tri.loss))
}

/// Runs the epoch `state.next_epoch` and advances the cursor.
pub fn run_epoch(state: &mut TrainState, data: &Dataset) -> Result<EpochLog> {
    let cfg = state.config.clone();
    let epoch = state.next_epoch;
    if epoch >= cfg.total_epochs {
        return Err(Error::ConfigError(format!(
            "epoch {epoch} is past the configured {} total epochs",
            cfg.total_epochs
        )));
    }
    if data.is_empty() {
        return Err(Error::DataError("empty dataset".into()));
    }
    let ph = phase(epoch, &cfg);
    let alpha = alpha_schedule(epoch, cfg.total_epochs);
    state.optimizer.lr = learning_rate(cfg.lr, epoch, cfg.total_epochs, cfg.lr_decay_every);

    let joint = if ph == Phase::Joint {
        Some(prepare_joint(state, data, epoch)?)
    } else {
        None
    };
    let sc_active = joint.as_ref().is_some_and(|j| j.pseudo.is_some());

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, 0));
    order.shuffle(&mut shuffle_rng);
    let mut pk_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, 1));

    let mut mmcl_sum = 0.0;
    let mut ce_sum = 0.0;
    let mut tri_sum = 0.0;
    let mut pk_batches = 0_usize;
    for chunk in order.chunks(cfg.batch_size) {
        mmcl_sum += run_mmcl_batch(state, data, chunk, ph, alpha)?;
        if sc_active {
            let ctx = joint.as_ref().expect("sc_active implies joint");
            let (ce, tri) = run_pk_batch(state, data, ctx, &mut pk_rng, alpha)?;
            ce_sum += ce;
            tri_sum += tri;
            pk_batches += 1;
        }
    }

    let log = EpochLog {
        epoch,
        phase: ph.as_str().to_string(),
        loss_mmcl: mmcl_sum / data.len() as f64,
        loss_ce: (pk_batches > 0).then(|| ce_sum / pk_batches as f64),
        loss_tri: (pk_batches > 0).then(|| tri_sum / pk_batches as f64),
        alpha,
        c: joint.as_ref().and_then(|j| j.c_logged),
        noise_frac: joint.as_ref().map(|j| j.noise_frac),
    };
    state.next_epoch += 1;
    Ok(log)
}

/// Retrieval metrics on a 1-in-5 query split of the dataset, cross-camera
/// protocol. Returns None when the dataset has no ground truth.
pub fn evaluate_split(model: &ExtractorModel, data: &Dataset) -> Result<Option<RetrievalMetrics>> {
    let Some(truth) = data.truth_ids() else {
        return Ok(None);
    };
    let features = extract_features(model, data)?;
    let mut q_rows = Vec::new();
    let mut g_rows = Vec::new();
    for i in 0..data.len() {
        if truth[i] >= 0 && i % 5 == 0 {
            q_rows.push(i);
        } else {
            g_rows.push(i);
        }
    }
    let build = |rows: &[usize]| -> Result<EvalSet> {
        let feats: Vec<Vec<f64>> = rows.iter().map(|&i| features.row(i).to_vec()).collect();
        EvalSet::new(
            Matrix::from_rows(&feats)?,
            rows.iter().map(|&i| truth[i]).collect(),
            rows.iter().map(|&i| data.cam(i) as i64).collect(),
        )
    };
    let metrics = cmc_map(
        &build(&q_rows)?,
        &build(&g_rows)?,
        &EvalProtocol { exclude_same_camera: true },
    )?;
    Ok(Some(metrics))
}

/// Trains for the full schedule, writing `epoch_log.jsonl`, a final
/// `checkpoint/` directory, and `metrics.json` when ground truth exists.
/// Sequential and seeded throughout: identical config and dataset give
/// byte-identical outputs.
pub fn run_train(config: &TrainConfig, data: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = TrainState::new(config.clone(), data)?;
    let mut logs = Vec::with_capacity(config.total_epochs);
    let mut log_text = String::new();
    while state.next_epoch < config.total_epochs {
        let log = run_epoch(&mut state, data)?;
        log_text.push_str(&serde_json::to_string(&log).expect("serializable"));
        log_text.push('\n');
        logs.push(log);
    }
    let log_path = out_dir.join("epoch_log.jsonl");
    fs::write(&log_path, log_text).map_err(|e| Error::io(&log_path, e))?;

    state.save(&out_dir.join("checkpoint"))?;

    let metrics = evaluate_split(&state.model, data)?;
    if let Some(m) = &metrics {
        let path = out_dir.join("metrics.json");
        let mut text = serde_json::to_string(m).expect("serializable");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(RunSummary { logs, metrics, state })
}

/// Output directory file names.
pub const EPOCH_LOG_FILE: &str = "epoch_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
