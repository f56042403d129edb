//! `secap`: synthetic data, training, evaluation, gradient checks and
//! feature export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use secap_core::autodiff::Fault;
use secap_core::checkpoint::{Checkpoint, CheckpointMeta};
use secap_core::data::{generate_synthetic, load_image, manifest_root, select_queries, Manifest, ProtocolName, SampleRecord, SynthConfig};
use secap_core::eval::{evaluate_protocols, extract_features};
use secap_core::model::{Ablation, EncoderConfig, ModelConfig, PrmVariant};
use secap_core::objectives::LossWeights;
use secap_core::train::{model_grad_check, train, GradCheckOptions, TrainConfig, TrainData};
use secap_core::Error;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_USAGE: u8 = 64;

const CHECKPOINT_EVERY: usize = 20;
const GRAD_TOLERANCE: f64 = 1e-4;
const QUERIES_PER_VIEW: usize = 2;
const EVAL_BATCH: usize = 64;

#[derive(Parser)]
#[command(name = "secap", version, about = "Aerial-ground person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two- or three-view corpus and its manifest.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Compare analytic and numeric gradients of the full loss.
    GradCheck(GradCheckArgs),
    /// Dump retrieval features with row-aligned metadata.
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    ids: usize,
    /// Images per identity and view.
    #[arg(long, default_value_t = 4)]
    per_view: usize,
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    distractors: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 120)]
    epochs: usize,
    #[arg(long, default_value_t = 8e-3)]
    lr_max: f64,
    #[arg(long, default_value_t = 1.6e-6)]
    lr_min: f64,
    #[arg(long, default_value_t = 16)]
    p: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.001)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    warmup_steps: usize,
    #[arg(long)]
    no_augment: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,
    #[arg(long, alias = "variant", default_value = "attn")]
    prm_variant: PrmVariant,
    #[arg(long)]
    olp: bool,
    /// `none`, `baseline`, or a comma list of `no-prm`, `no-vdt`, `no-lfrm`.
    #[arg(long, default_value = "none")]
    ablate: Ablation,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// `a2g`, `g2a`, `g2ag` or `all`.
    #[arg(long, default_value = "all")]
    protocol: String,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, alias = "prm-variant", default_value = "attn")]
    variant: PrmVariant,
    #[arg(long)]
    olp: bool,
    #[arg(long, default_value = "none")]
    ablate: Ablation,
    #[arg(long, default_value_t = 4)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupts the GELU backward rule; the check must then fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Feature tensor path; metadata goes next to it with a `.tsv` extension.
    #[arg(long)]
    out: PathBuf,
    /// `train`, `test` or `all`.
    #[arg(long, default_value = "all")]
    split: String,
}

/// Raised when a check ran to completion and failed.
#[derive(Debug)]
struct CheckFailed;

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("check failed")
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::ExportFeatures(a) => export_features(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.is::<CheckFailed>() {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.is::<CheckFailed>() {
        return EXIT_CHECK_FAILED;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. } | Error::Diverged { .. }) => EXIT_NUMERIC,
        Some(Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

/// `SECAP_THREADS` caps the worker pool; unset means one per core.
fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("SECAP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().with_context(|| format!("SECAP_THREADS={v:?} is not a count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        num_ids: a.ids,
        images_per_id_per_view: a.per_view,
        num_views: a.views,
        seed: a.seed,
        distractors: a.distractors,
        ..SynthConfig::default()
    };
    let path = generate_synthetic(&cfg, &a.out)?;
    println!("{}", path.display());
    Ok(())
}

fn load_all(root: &Path, records: &[SampleRecord], h: usize, w: usize) -> secap_core::Result<Vec<secap_core::Tensor<f32>>> {
    records.par_iter().map(|r| load_image(root, r, h, w)).collect()
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let manifest = Manifest::read(&a.manifest)?;
    let root = manifest_root(&a.manifest);
    let m = &a.model;
    let encoder = EncoderConfig {
        image_height: manifest.image_height,
        image_width: manifest.image_width,
        embed_dim: m.embed_dim,
        depth: m.depth,
        heads: m.heads,
        ..EncoderConfig::default()
    }
    .with_olp(m.olp);
    let mut model_cfg = ModelConfig::new(encoder, 1, manifest.num_views);
    model_cfg.prompt_len = m.prompt_len;
    model_cfg.prm_variant = m.prm_variant;
    model_cfg.ablation = m.ablate;
    let mut cfg = TrainConfig {
        epochs: a.epochs,
        lr_max: a.lr_max,
        lr_min: a.lr_min,
        p: a.p,
        k: a.k,
        seed: a.seed,
        warmup_steps: a.warmup_steps,
        augment: !a.no_augment,
        loss: LossWeights {
            alpha: a.alpha,
            beta: a.beta,
            lambda: a.lambda,
        },
        ..TrainConfig::default()
    };
    cfg.validate()?;

    let records = manifest.train();
    if records.is_empty() {
        bail!(Error::Format(format!("{}: no training records", a.manifest.display())));
    }
    let images = load_all(&root, &records, manifest.image_height, manifest.image_width)?;
    let data = TrainData::new(records, images, manifest.num_views)?;
    if cfg.p > data.num_classes {
        eprintln!("note: only {} training identities, using P={}", data.num_classes, data.num_classes);
        cfg.p = data.num_classes;
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let save = |epoch: usize, model: &secap_core::model::SeCap, store: &secap_core::ParamStore<f32>, name: &str| {
        let meta = CheckpointMeta {
            model: model.cfg.clone(),
            loss: cfg.loss,
            epoch,
            seed: cfg.seed,
        };
        let path = a.out.join(name);
        Checkpoint::from_store(meta, store).save(&path).map(|()| path)
    };
    let outcome = train(&model_cfg, &cfg, &data, |log, model, store| {
        println!("{}", log.line());
        if log.epoch % CHECKPOINT_EVERY == 0 && log.epoch < cfg.epochs {
            save(log.epoch, model, store, &format!("epoch_{:04}.ckpt", log.epoch))?;
        }
        Ok(())
    })?;
    let path = save(cfg.epochs, &outcome.model, &outcome.store, "model.ckpt")?;
    println!("checkpoint={}", path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let protocols = ProtocolName::parse_list(&a.protocol)?;
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let (model, store) = ck.restore().with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let manifest = Manifest::read(&a.manifest)?;
    let root = manifest_root(&a.manifest);
    let e = &model.cfg.encoder;
    let test = manifest.test();
    let images = load_all(&root, &test, e.image_height, e.image_width)?;
    let by_path: std::collections::HashMap<&str, usize> = test.iter().enumerate().map(|(i, r)| (r.path.as_str(), i)).collect();
    let load = |r: &SampleRecord| Ok(images[by_path[r.path.as_str()]].clone());
    let queries = select_queries(&test, QUERIES_PER_VIEW, load)?;
    for report in evaluate_protocols(&model, &store, &test, &queries, &protocols, EVAL_BATCH, load)? {
        println!("{}", report.to_json());
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> anyhow::Result<()> {
    let opts = GradCheckOptions {
        variant: a.variant,
        olp: a.olp,
        ablation: a.ablate,
        coords_per_param: a.coords,
        seed: a.seed,
        fault: a.inject_fault.then_some(Fault::GeluBackward),
        ..GradCheckOptions::default()
    };
    let r = model_grad_check(&opts)?;
    let pass = r.max_rel_error < GRAD_TOLERANCE;
    println!(
        "max_rel_error={:.3e} params={} coords={} result={}",
        r.max_rel_error,
        r.params_checked,
        r.coords_checked,
        if pass { "pass" } else { "fail" }
    );
    if !pass {
        println!(
            "worst_param={} coord={} analytic={:.6e} numeric={:.6e}",
            r.worst_param, r.worst_coord, r.analytic, r.numeric
        );
        return Err(CheckFailed.into());
    }
    Ok(())
}

fn export_features(a: ExportArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let (model, store) = ck.restore().with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let manifest = Manifest::read(&a.manifest)?;
    let root = manifest_root(&a.manifest);
    let records = match a.split.as_str() {
        "all" => manifest.records.clone(),
        "train" => manifest.train(),
        "test" => manifest.test(),
        other => bail!(Error::Config(format!("unknown split {other:?}, expected train, test or all"))),
    };
    let e = &model.cfg.encoder;
    let (h, w) = (e.image_height, e.image_width);
    let feats = extract_features(&model, &store, &records, EVAL_BATCH, |r| load_image(&root, r, h, w))?;
    feats.features.write_rten(&a.out)?;

    let mut tsv = String::from("id\tcamera\tview\tpath\n");
    for r in &records {
        writeln!(tsv, "{}\t{}\t{}\t{}", r.id, r.camera, r.view, r.path).expect("writing to a String");
    }
    let meta_path = a.out.with_extension("tsv");
    std::fs::write(&meta_path, tsv).map_err(|e| Error::io(&meta_path, e))?;
    println!("features={} shape={:?} metadata={}", a.out.display(), feats.features.shape(), meta_path.display());
    Ok(())
}
