//! End-to-end runs: data, embedding (or bypass), partitioner, guide
//! verification, GAN training, sampling and metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_partitioner, save_json, save_partitioner, PartitionerCheckpoint};
use crate::config::ExperimentConfig;
use crate::embed::{knn_graph, train_pretext, write_embeddings_csv, NeighborGraph};
use crate::error::{Error, Result};
use crate::ganmix::{
    sample_mixture, train_gan, write_samples_csv, GanCheckpoint, GanTraining, GeneratorMixture, MixtureSample,
};
use crate::guide::{points_box, verify_model, verify_model_uncertified, VerificationReport};
use crate::io::fmt17;
use crate::metrics::{mode_report, nmi, verify_thm1_empirically, CappedGanReport, ModeReport};
use crate::partitioner::{LipschitzCertificate, PartitionerModel, PartitionerTraining, TrunkKind};
use crate::plot::scatter_svg;
use crate::synthdata::{points_matrix, read_csv, sample, write_csv, GaussianMixtureSpec, LabeledSample, Point};

pub const DATASET_FILE: &str = "dataset.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const KNN_FILE: &str = "knn.csv";
pub const PARTITIONER_FILE: &str = "partitioner.json";
pub const VERIFICATION_FILE: &str = "verification.json";
pub const GAN_FILE: &str = "ganmix.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const SCATTER_FILE: &str = "samples.svg";

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub dataset: String,
    pub k: usize,
    pub lambda_start: f64,
    pub seed: u64,
    pub recovered_modes: usize,
    pub hq_fraction: f64,
    pub reverse_kl: f64,
    pub nmi: f64,
    pub delta_bound: Option<f64>,
    pub empirical_tv: Option<f64>,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "run_id,dataset,k,lambda_start,seed,recovered_modes,hq_fraction,reverse_kl,nmi,delta_bound,empirical_tv";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt17).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.dataset,
            self.k,
            fmt17(self.lambda_start),
            self.seed,
            self.recovered_modes,
            fmt17(self.hq_fraction),
            fmt17(self.reverse_kl),
            fmt17(self.nmi),
            opt(self.delta_bound),
            opt(self.empirical_tv)
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", MetricsRow::HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()?;
    Ok(())
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<(GaussianMixtureSpec, Vec<LabeledSample>)> {
    let spec = cfg.dataset.spec()?;
    let data = sample(&spec, cfg.dataset.n_train, cfg.dataset.seed)?;
    Ok((spec, data))
}

pub fn write_dataset(path: &Path, data: &[LabeledSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledSample>> {
    read_csv(BufReader::new(File::open(path)?))
}

/// Output of the representation stage.
pub struct EmbedOutput {
    pub graph: NeighborGraph,
    /// Pretext embeddings; `None` in bypass mode.
    pub embeddings: Option<crate::numcore::Matrix>,
    pub trunk: Option<crate::partitioner::ResidualTrunk>,
}

pub fn embed_stage(cfg: &ExperimentConfig, data: &[LabeledSample]) -> Result<EmbedOutput> {
    let x = points_matrix(data);
    if cfg.embed.bypass {
        return Ok(EmbedOutput {
            graph: knn_graph(&x, cfg.embed.knn_k)?,
            embeddings: None,
            trunk: None,
        });
    }
    let shape = cfg.partitioner.shape(2);
    let enc = train_pretext(&x, shape, &cfg.embed.pretext(), cfg.dataset.seed)?;
    let e = enc.embed(&x);
    Ok(EmbedOutput {
        graph: knn_graph(&e, cfg.embed.knn_k)?,
        embeddings: Some(e),
        trunk: Some(enc.trunk),
    })
}

pub fn partition_nmi(model: &PartitionerModel, data: &[LabeledSample]) -> Result<f64> {
    let assigned: Vec<i64> = model
        .assign_batch(&points_matrix(data))
        .into_iter()
        .map(|a| a as i64)
        .collect();
    let truth: Vec<i64> = data.iter().map(|s| s.mode_id).collect();
    nmi(&assigned, &truth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutput {
    /// `None` for trunks outside the theorem's hypothesis.
    pub certificate: Option<LipschitzCertificate>,
    pub report: VerificationReport,
    pub all_pass: bool,
}

/// Runs the guide verifiers. A compliant trunk must pass its
/// certificate; an unconstrained control is verified without one and
/// its outcome is only recorded.
pub fn verify_stage(
    cfg: &ExperimentConfig,
    model: &PartitionerModel,
    data: &[LabeledSample],
) -> Result<VerificationOutput> {
    let b = points_box(&points_matrix(data));
    let seed = cfg.dataset.seed;
    let (certificate, report) = match cfg.partitioner.trunk {
        TrunkKind::Residual => {
            let c = model.lipschitz_certificate()?;
            (Some(c), verify_model(model, b, &cfg.verify, seed)?)
        }
        TrunkKind::Unconstrained => (None, verify_model_uncertified(model, b, &cfg.verify, seed, 0.0)?),
    };
    let all_pass = report.all_pass();
    Ok(VerificationOutput {
        certificate,
        report,
        all_pass,
    })
}

pub fn verification_failures(v: &VerificationReport) -> Vec<String> {
    let mut out = Vec::new();
    for p in &v.partitions {
        if p.components > 1 {
            out.push(format!("partition {} has {} components", p.partition, p.components));
        }
        if p.descent.successes < p.descent.starts {
            out.push(format!(
                "partition {}: descent reached zero from {}/{} starts",
                p.partition, p.descent.successes, p.descent.starts
            ));
        }
        if let Some(f) = p.grad_floor.filter(|&f| f < v.grad_floor_bound) {
            out.push(format!(
                "partition {}: gradient floor {f} below bound {}",
                p.partition, v.grad_floor_bound
            ));
        }
    }
    out
}

pub struct Evaluation {
    pub metrics: MetricsRow,
    pub modes: ModeReport,
    pub samples: Vec<MixtureSample>,
    pub bound: Option<CappedGanReport>,
}

/// Samples the mixture and scores it against the known modes.
pub fn evaluate(
    cfg: &ExperimentConfig,
    partitioner: &PartitionerModel,
    generator: &GeneratorMixture,
    data: &[LabeledSample],
) -> Result<Evaluation> {
    let spec = cfg.dataset.spec()?;
    let samples = sample_mixture(
        generator,
        partitioner,
        cfg.eval.n_samples,
        cfg.dataset.seed,
        cfg.verify.max_tries,
    )?;
    let pts: Vec<Point> = samples.iter().map(|s| s.x).collect();
    let modes = mode_report(&pts, &spec, cfg.eval.hq_radius_sigmas, cfg.eval.hq_threshold_count)?;
    let bound = if cfg.bound.enabled {
        Some(stage(
            "bound",
            verify_thm1_empirically(
                cfg.bound.d,
                cfg.bound.c,
                cfg.bound.pi,
                &cfg.bound.train,
                cfg.dataset.seed,
            ),
        )?)
    } else {
        None
    };
    let metrics = MetricsRow {
        run_id: cfg.run_id(),
        dataset: cfg.dataset.kind.name().into(),
        k: cfg.partitioner.k,
        lambda_start: cfg.gan.lambda_start,
        seed: cfg.dataset.seed,
        recovered_modes: modes.recovered,
        hq_fraction: modes.hq_fraction,
        reverse_kl: modes.reverse_kl,
        nmi: partition_nmi(partitioner, data)?,
        delta_bound: bound.as_ref().map(|b| b.delta),
        empirical_tv: bound.as_ref().map(|b| b.empirical_tv),
    };
    Ok(Evaluation {
        metrics,
        modes,
        samples,
        bound,
    })
}

pub struct RunOutput {
    pub out_dir: PathBuf,
    pub partitioner: PartitionerTraining,
    pub verification: VerificationOutput,
    pub gan: GanTraining,
    pub evaluation: Evaluation,
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_scatter(path: &Path, data: &[LabeledSample], samples: &[MixtureSample]) -> Result<()> {
    let real: Vec<Point> = data.iter().map(|s| s.x).collect();
    let gen: Vec<Point> = samples.iter().map(|s| s.x).collect();
    std::fs::write(path, scatter_svg(&real, &gen)?)?;
    Ok(())
}

/// The full `train` pipeline. Every artifact is written under
/// `cfg.out_dir`; a failed verifier on a compliant trunk aborts the run
/// before GAN training.
pub fn run_train(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_json_pretty())?;

    let (_, data) = stage("gen-data", generate_dataset(cfg))?;
    stage("gen-data", write_dataset(&out.join(DATASET_FILE), &data))?;

    let emb = stage("embed", embed_stage(cfg, &data))?;
    if let Some(e) = &emb.embeddings {
        stage(
            "embed",
            write_with(&out.join(EMBEDDINGS_FILE), |w| write_embeddings_csv(w, e)),
        )?;
    }
    stage("embed", write_with(&out.join(KNN_FILE), |w| emb.graph.write_csv(w)))?;

    let x = points_matrix(&data);
    let part = stage(
        "partitioner",
        crate::partitioner::train_partitioner(&x, &emb.graph, &cfg.partitioner, cfg.dataset.seed, emb.trunk),
    )?;
    stage(
        "partitioner",
        save_partitioner(&out.join(PARTITIONER_FILE), &part.model),
    )?;

    let verification = stage("verify-guide", verify_stage(cfg, &part.model, &data))?;
    stage("verify-guide", save_json(&out.join(VERIFICATION_FILE), &verification))?;
    if cfg.partitioner.trunk == TrunkKind::Residual && !verification.all_pass {
        return Err(Error::Stage {
            stage: "verify-guide",
            source: Box::new(Error::Verification(
                verification_failures(&verification.report).join("; "),
            )),
        });
    }

    let gan = stage("gan", train_gan(&x, &part.model, &cfg.gan, cfg.dataset.seed))?;
    let ck = GanCheckpoint::from_models(&gan.generator, &gan.discriminator, gan.shape);
    stage("gan", save_json(&out.join(GAN_FILE), &ck))?;

    let evaluation = stage("eval", evaluate(cfg, &part.model, &gan.generator, &data))?;
    stage(
        "eval",
        write_with(&out.join(SAMPLES_FILE), |w| write_samples_csv(w, &evaluation.samples)),
    )?;
    stage(
        "eval",
        write_metrics_csv(&out.join(METRICS_FILE), std::slice::from_ref(&evaluation.metrics)),
    )?;
    stage(
        "plot",
        write_scatter(&out.join(SCATTER_FILE), &data, &evaluation.samples),
    )?;

    Ok(RunOutput {
        out_dir: out,
        partitioner: part,
        verification,
        gan,
        evaluation,
    })
}

/// Loads a partitioner checkpoint without requiring the certificate, so
/// unconstrained controls can be evaluated too.
pub fn load_partitioner_any(path: &Path) -> Result<PartitionerModel> {
    match load_partitioner(path) {
        Err(Error::Hypothesis(_)) => {
            let ck: PartitionerCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| Error::Checkpoint(format!("parse error: {e}")))?;
            ck.to_model_unchecked()
        }
        r => r,
    }
}

pub fn load_gan(path: &Path) -> Result<GeneratorMixture> {
    let text = std::fs::read_to_string(path)?;
    let ck: GanCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("parse error: {e}")))?;
    Ok(ck.to_models()?.0)
}

/// Metrics from the checkpoints of a finished run in `cfg.out_dir`.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<Evaluation> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    let data = stage("eval", read_dataset(&out.join(DATASET_FILE)))?;
    let part = stage("eval", load_partitioner_any(&out.join(PARTITIONER_FILE)))?;
    let gen = stage("eval", load_gan(&out.join(GAN_FILE)))?;
    let ev = stage("eval", evaluate(cfg, &part, &gen, &data))?;
    stage(
        "eval",
        write_metrics_csv(&out.join(METRICS_FILE), std::slice::from_ref(&ev.metrics)),
    )?;
    Ok(ev)
}
