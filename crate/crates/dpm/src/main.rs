//! Single binary exposing the full workflow: dataset generation, training,
//! retrieval evaluation, gradient checking, and diagnostics export. All
//! knobs live in one JSON config; flags only pick paths.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dpm::config::RunConfig;
use dpm::data::{self, Dataset, Split};
use dpm::encoder::{self, Binding, EncoderConfig};
use dpm::eval::{self, BankEntry, FeatureBank};
use dpm::hem;
use dpm::hmg::{MaskGeneratorConfig, MaskVariant};
use dpm::losses::LossWeights;
use dpm::model::{self, Component, ModelConfig, Sample};
use dpm::trainer::{self, Trainer};
use dpm::{DpmError, Graph, ParamStore, Tensor};

#[derive(Parser)]
#[command(name = "dpm", version, about = "Occlusion-robust embedding learning workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic occluded-identity dataset
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the two-step freeze schedule
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract features and compute CMC/mAP
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the mask variant (P, F, Pn, Fn)
        #[arg(long)]
        variant: Option<String>,
    },
    /// Finite-difference check of every loss component on a fixed micro
    /// model (the configured model is usually too large to difference)
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export head cross-correlation matrices and per-block similarity gaps
    Diag {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen { config, out } => cmd_gen(&config, &out),
        Cmd::Train { config, data, out } => cmd_train(&config, &data, &out),
        Cmd::Eval { config, checkpoint, data, out, variant } => {
            cmd_eval(&config, &checkpoint, &data, &out, variant.as_deref())
        }
        Cmd::Gradcheck { config } => cmd_gradcheck(&config),
        Cmd::Diag { config, checkpoint, data, out } => cmd_diag(&config, &checkpoint, &data, &out),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn cmd_gen(config: &Path, out: &Path) -> Result<(), DpmError> {
    let cfg = RunConfig::load(config)?;
    let ds = data::generate(&cfg.synth)?;
    data::store(&ds, out)?;
    cfg.save(&out.join("config.json"))?;
    println!(
        "generated {} samples ({} identities) into {}",
        ds.samples.len(),
        cfg.synth.classes,
        out.display()
    );
    println!("dataset checksum: {:016x}", ds.checksum());
    Ok(())
}

fn load_dataset_for(cfg: &mut RunConfig, data_dir: &Path) -> Result<Dataset, DpmError> {
    let ds = data::load(data_dir)?;
    // the dataset on disk wins over the config's synth section
    cfg.synth = ds.spec.clone();
    cfg.validate()?;
    Ok(ds)
}

fn cmd_train(config: &Path, data_dir: &Path, out: &Path) -> Result<(), DpmError> {
    let mut cfg = RunConfig::load(config)?;
    let ds = load_dataset_for(&mut cfg, data_dir)?;
    fs::create_dir_all(out)?;
    cfg.save(&out.join("config.json"))?;

    let mut t = Trainer::new(cfg.train.clone(), cfg.model_config())?;
    let ckpt_path = out.join("checkpoint.ckpt");
    t.store.save(&ckpt_path)?; // last-good from the start
    let mut metrics = fs::File::create(out.join("metrics.csv"))?;
    writeln!(metrics, "{}", trainer::METRICS_HEADER)?;

    let interval = cfg.train.checkpoint_interval;
    let total = cfg.train.iterations;
    let run_result = t.run(&ds, |m, store| {
        for row in trainer::metrics_rows(m) {
            writeln!(metrics, "{row}")?;
        }
        if interval > 0 && (m.iter + 1) % interval == 0 {
            store.save(&ckpt_path)?;
        }
        if total >= 10 && (m.iter + 1) % (total / 10).max(1) == 0 {
            println!(
                "iter {}/{} total {:.4} (cls {:.4} mcls {:.4} hem {:.4} tri {:.4}) lr {:.5}",
                m.iter + 1,
                total,
                m.step1.total,
                m.step1.cls,
                m.step1.masked_cls,
                m.step1.hem,
                m.step1.triplet,
                m.lr
            );
        }
        Ok(())
    });
    match run_result {
        Ok(()) => {
            t.store.save(&ckpt_path)?;
            println!("final checkpoint: {} (checksum {:016x})", ckpt_path.display(), t.store.checksum());
            Ok(())
        }
        Err(e) => {
            eprintln!("training aborted; last-good checkpoint kept at {}", ckpt_path.display());
            Err(e)
        }
    }
}

fn parse_variant(s: &str) -> Result<MaskVariant, DpmError> {
    serde_json::from_str(&format!("\"{s}\""))
        .map_err(|_| DpmError::invalid("variant", format!("{s} not one of P, F, Pn, Fn")))
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<ParamStore<f32>, DpmError> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    model::init_params(&cfg.model_config(), &mut rng, &mut store)?;
    store.load_into(path)?;
    Ok(store)
}

fn extract_bank(
    store: &ParamStore<f32>,
    mcfg: &ModelConfig,
    ds: &Dataset,
    split: Split,
) -> Result<FeatureBank, DpmError> {
    let mut bank = FeatureBank::new(mcfg.encoder.dim);
    for s in ds.split(split) {
        let mut g = Graph::no_grad();
        let b = Binding::bind(store, &mut g, |_| false);
        let (feature, mask) = model::embed(&mut g, &b, mcfg, &s.image, s.camera)?;
        bank.push(BankEntry {
            id: s.id,
            camera: s.camera,
            feature: feature.into_data(),
            mask: mask.into_data(),
        })?;
    }
    Ok(bank)
}

#[derive(Serialize)]
struct EvalReport {
    variant: MaskVariant,
    cmc: Vec<f64>,
    map: f64,
    excluded_queries: usize,
    queries: usize,
    gallery: usize,
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
    variant: Option<&str>,
) -> Result<(), DpmError> {
    let mut cfg = RunConfig::load(config)?;
    let ds = load_dataset_for(&mut cfg, data_dir)?;
    let variant = match variant {
        Some(v) => parse_variant(v)?,
        None => cfg.hmg.variant,
    };
    let store = load_checkpoint(&cfg, checkpoint)?;
    let mcfg = cfg.model_config();
    fs::create_dir_all(out)?;
    let query = extract_bank(&store, &mcfg, &ds, Split::Query)?;
    let gallery = extract_bank(&store, &mcfg, &ds, Split::Gallery)?;
    query.save(&out.join("query.fea"))?;
    gallery.save(&out.join("gallery.fea"))?;
    let r = eval::evaluate(&query, &gallery, variant, cfg.eval)?;
    let report = EvalReport {
        variant,
        cmc: r.cmc.clone(),
        map: r.map,
        excluded_queries: r.excluded_queries,
        queries: query.entries.len(),
        gallery: gallery.entries.len(),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| DpmError::Format(e.to_string()))?;
    fs::write(out.join("metrics.json"), json + "\n")?;
    println!("rank-1 {:.4}  mAP {:.4}  ({} queries, {} excluded)", r.cmc[0], r.map, query.entries.len(), r.excluded_queries);
    Ok(())
}

/// Fixed micro model for finite differencing: small enough that central
/// differences over whole parameter tensors finish in seconds.
fn micro_model(weights: &LossWeights) -> ModelConfig {
    let mut weights = weights.clone();
    // large cosine scales push softmax tails below FD resolution
    weights.scale_s = weights.scale_s.min(8.0);
    ModelConfig {
        encoder: EncoderConfig {
            image_h: 16,
            image_w: 16,
            channels: 2,
            patch: 8,
            stride: 8,
            dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            cameras: 2,
            lambda_cam: 3.0,
        },
        hmg: MaskGeneratorConfig { gate: vec![1, 2], kernel: 3, hidden: 4, variant: MaskVariant::Pn },
        weights,
        classes: 4,
    }
}

fn random_micro_batch(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<Sample<f64>> {
    let e = &cfg.encoder;
    (0..4)
        .map(|i| {
            let n = e.image_h * e.image_w * e.channels;
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Sample {
                image: Tensor::new(vec![e.image_h, e.image_w, e.channels], data).unwrap(),
                camera: i % e.cameras,
                label: i % 2,
            }
        })
        .collect()
}

fn cmd_gradcheck(config: &Path) -> Result<(), DpmError> {
    let cfg = RunConfig::load(config)?;
    let mcfg = micro_model(&cfg.weights);
    let step = 1e-5;
    let tol = 1e-4;
    let batches = 5;
    let params = model::default_gradcheck_params(&mcfg);

    // aggregate worst error per (component, group) across batches
    let mut worst: Vec<(Component, dpm::FreezeGroup, f64, usize)> = Vec::new();
    for b in 0..batches {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(b));
        let mut store = ParamStore::<f64>::new();
        model::init_params(&mcfg, &mut rng, &mut store)?;
        model::randomize_mask_output_conv(&mut store, &mut rng)?;
        let batch = random_micro_batch(&mcfg, &mut rng);
        for row in model::gradcheck_components(&mcfg, &store, &batch, &params, step, tol)? {
            match worst.iter_mut().find(|(c, g, _, _)| *c == row.component && *g == row.group) {
                Some(w) => {
                    w.2 = w.2.max(row.max_rel_err);
                    w.3 += row.checked;
                }
                None => worst.push((row.component, row.group, row.max_rel_err, row.checked)),
            }
        }
    }
    println!("component  group      max_rel_err  entries  status");
    let mut failed = false;
    for (c, g, err, n) in &worst {
        let ok = *err < tol;
        failed |= !ok;
        println!(
            "{:<10} {:<10} {:<12.3e} {:<8} {}",
            c.name(),
            g.name(),
            err,
            n,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed {
        return Err(DpmError::non_finite(format!(
            "gradient check exceeded tolerance {tol}"
        )));
    }
    println!("all components within {tol} over {batches} micro-batches");
    Ok(())
}

fn cmd_diag(config: &Path, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<(), DpmError> {
    let mut cfg = RunConfig::load(config)?;
    let ds = load_dataset_for(&mut cfg, data_dir)?;
    let store = load_checkpoint(&cfg, checkpoint)?;
    let mcfg = cfg.model_config();
    fs::create_dir_all(out)?;

    let mut cross = String::from("sample,row,col,value\n");
    let mut gaps = String::from("sample,block,min_pair_cosine\n");
    let mut off_sum = 0.0;
    let mut count = 0usize;
    for (si, s) in ds.split(Split::Query).take(50).enumerate() {
        let mut g = Graph::no_grad();
        let b = Binding::bind(&store, &mut g, |_| false);
        let patches = encoder::patchify(&s.image, mcfg.encoder.patch, mcfg.encoder.stride)?;
        let pv = g.constant(patches);
        let z0 = encoder::assemble_input(&mut g, &b, &mcfg.encoder, pv, s.camera)?;
        let state = encoder::forward(&mut g, &b, &mcfg.encoder, z0)?;
        let a = hem::class_attention(&mut g, state.class_query, state.patch_keys, mcfg.encoder.heads)?;
        let m = hem::diag_head_crosscorr(&mut g, a)?;
        let n = m.shape()[0];
        for i in 0..n {
            for j in 0..n {
                cross.push_str(&format!("{si},{i},{j},{:.6}\n", m.data()[i * n + j]));
            }
        }
        off_sum += hem::mean_off_diagonal(&m);
        count += 1;
        for (block, v) in encoder::diag_block_similarity_gap(&g, &state).iter().enumerate() {
            gaps.push_str(&format!("{si},{},{v:.6}\n", block + 1));
        }
    }
    if count == 0 {
        return Err(DpmError::invalid("diag", "dataset has no query samples".to_string()));
    }
    fs::write(out.join("head_crosscorr.csv"), cross)?;
    fs::write(out.join("block_simgap.csv"), gaps)?;
    println!("mean off-diagonal head cross-correlation over {count} queries: {:.4}", off_sum / count as f64);
    Ok(())
}
