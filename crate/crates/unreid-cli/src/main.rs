//! Command-line frontend: synthetic data generation, training, one-shot
//! clustering and re-ranking, and retrieval evaluation.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use unreid::clusterer::{self, ClusterMethod};
use unreid::data::{generate_synthetic, read_embeddings, write_embeddings, Dataset, SynthConfig};
use unreid::evaluator::{cmc_map, EvalProtocol, EvalSet};
use unreid::pipeline::{load_config, run_train, TrainConfig};
use unreid::rerank::{jaccard_matrix, pairwise_euclidean, RerankParams};

#[derive(Parser)]
#[command(
    name = "unreid",
    version,
    about = "Unsupervised re-identification: memory-bank training, \
             re-ranking, clustering, retrieval evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic identity dataset into a directory.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of identities.
        #[arg(long, default_value_t = 20)]
        ids: usize,
        /// Samples per identity.
        #[arg(long, default_value_t = 15)]
        samples: usize,
        /// Input dimension (must be even).
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Per-coordinate noise scale around each identity center.
        #[arg(long, default_value_t = 0.3)]
        sigma: f64,
        /// Number of cameras.
        #[arg(long, default_value_t = 2)]
        cameras: usize,
        /// Per-coordinate scale of the per-camera systematic offset.
        #[arg(long, default_value_t = 0.1)]
        camera_offset: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset directory and write logs, checkpoint, metrics.
    Train {
        /// Flat `key = value` config file; missing keys use defaults.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (from `synth` or external).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for epoch_log.jsonl, checkpoint/, metrics.json.
        #[arg(long)]
        out: PathBuf,
        /// Assert reproducibility; runs are seeded and sequential either
        /// way, so this flag only documents intent.
        #[arg(long)]
        deterministic: bool,
    },
    /// Cluster an embedding file once and write pseudo labels as JSONL.
    Cluster {
        /// Embedding file (EMB1 format).
        #[arg(long)]
        embeddings: PathBuf,
        /// Output JSONL file of {"row", "label"} records (-1 = noise).
        #[arg(long)]
        out: PathBuf,
        /// "dbscan" or "kmeans:<k>".
        #[arg(long, default_value = "dbscan")]
        method: String,
        /// Density radius on the re-ranked distance (dbscan).
        #[arg(long, default_value_t = 0.6)]
        eps: f64,
        /// Neighbors (self included) required of a core point (dbscan).
        #[arg(long, default_value_t = 4)]
        min_samples: usize,
        /// Reciprocal-neighborhood size for the re-ranked distance.
        #[arg(long, default_value_t = 20)]
        k1: usize,
        /// Local-expansion neighborhood size.
        #[arg(long, default_value_t = 6)]
        k2: usize,
        /// Seed for k-means center initialization.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-rank an embedding file and write the distance matrix (EMB1).
    Rerank {
        /// Embedding file (EMB1 format).
        #[arg(long)]
        embeddings: PathBuf,
        /// Output distance matrix file (EMB1 format, N x N).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        k1: usize,
        #[arg(long, default_value_t = 6)]
        k2: usize,
        /// Blend weight on the original distance: 0 = pure re-ranked
        /// distance, 1 = (scaled) original.
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
    },
    /// Score retrieval of a query dataset against a gallery dataset.
    Eval {
        /// Query dataset directory (must carry identity labels).
        #[arg(long)]
        query: PathBuf,
        /// Gallery dataset directory.
        #[arg(long)]
        gallery: PathBuf,
        /// Keep same-camera matches instead of excluding them.
        #[arg(long)]
        include_same_camera: bool,
        /// Also write the metrics JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn eval_set_from_dir(dir: &PathBuf) -> anyhow::Result<EvalSet> {
    let data = Dataset::load_dir(dir)
        .with_context(|| format!("loading dataset from {}", dir.display()))?;
    let Some(truth) = data.truth_ids() else {
        bail!(
            "dataset in {} has no identity labels; retrieval cannot be scored",
            dir.display()
        );
    };
    let ids = truth.to_vec();
    let cams = data.camera_ids().iter().map(|&c| c as i64).collect();
    Ok(EvalSet::new(data.inputs().clone(), ids, cams)?)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            out,
            ids,
            samples,
            dim,
            sigma,
            cameras,
            camera_offset,
            seed,
        } => {
            let cfg = SynthConfig {
                num_identities: ids,
                samples_per_identity: samples,
                input_dim: dim,
                identity_sigma: sigma,
                num_cameras: cameras,
                camera_offset_scale: camera_offset,
                seed,
            };
            let data = generate_synthetic(&cfg)?;
            data.save_dir(&out)?;
            println!(
                "wrote {} samples ({} identities x {}, dim {}) to {}",
                data.len(),
                ids,
                samples,
                dim,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            deterministic: _,
        } => {
            let cfg: TrainConfig = load_config(&config)?;
            let dataset = Dataset::load_dir(&data)
                .with_context(|| format!("loading dataset from {}", data.display()))?;
            let summary = run_train(&cfg, &dataset, &out)?;
            for log in &summary.logs {
                println!("{}", serde_json::to_string(log).expect("serializable"));
            }
            match &summary.metrics {
                Some(m) => println!("{}", serde_json::to_string(m).expect("serializable")),
                None => println!("dataset carries no identity labels; metrics skipped"),
            }
            println!("outputs in {}", out.display());
        }
        Command::Cluster {
            embeddings,
            out,
            method,
            eps,
            min_samples,
            k1,
            k2,
            seed,
        } => {
            let features = read_embeddings(&embeddings)?;
            let parsed = TrainConfig {
                cluster_method: method,
                ..TrainConfig::default()
            }
            .cluster_method_parsed()?;
            let labels = match parsed {
                ClusterMethod::Dbscan => {
                    let distances = pairwise_euclidean(&features);
                    let params = RerankParams::new(k1, k2, 0.0)?;
                    let reranked = jaccard_matrix(&distances, &params)?;
                    clusterer::dbscan(&reranked.jaccard, eps, min_samples)?
                }
                ClusterMethod::KMeans { k } => clusterer::kmeans(&features, k, seed)?,
            };
            clusterer::write_pseudo_labels(&out, &labels)?;
            let clusters = labels
                .iter()
                .filter(|&&l| l >= 0)
                .collect::<std::collections::BTreeSet<_>>()
                .len();
            let noise = labels.iter().filter(|&&l| l < 0).count();
            println!(
                "{} rows -> {} clusters, {} noise; labels in {}",
                labels.len(),
                clusters,
                noise,
                out.display()
            );
        }
        Command::Rerank {
            embeddings,
            out,
            k1,
            k2,
            lambda,
        } => {
            let features = read_embeddings(&embeddings)?;
            let params = RerankParams::new(k1, k2, lambda)?;
            let distances = pairwise_euclidean(&features);
            let reranked = jaccard_matrix(&distances, &params)?;
            write_embeddings(&out, &reranked.blended)?;
            println!(
                "re-ranked {} points -> {}",
                features.rows(),
                out.display()
            );
        }
        Command::Eval {
            query,
            gallery,
            include_same_camera,
            out,
        } => {
            let q = eval_set_from_dir(&query)?;
            let g = eval_set_from_dir(&gallery)?;
            let protocol = EvalProtocol {
                exclude_same_camera: !include_same_camera,
            };
            let metrics = cmc_map(&q, &g, &protocol)?;
            let mut text = serde_json::to_string(&metrics).expect("serializable");
            text.push('\n');
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, text)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}
