use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pvrf::config::{require_hash, RunConfig};
use pvrf::degradations::{mock_oracle, DegradationSpec, Manifest, SampleFiles, Split};
use pvrf::experiments::{self, Anchors};
use pvrf::flow::FlowModel;
use pvrf::image::ImagePatch;
use pvrf::numcore::Checkpoint;
use pvrf::perception::{self, ingest_logit_dump, write_logit_dump, PerceptionBundle};
use pvrf::posterior::PosteriorModel;

/// Perception-conditioned weather restoration with residual rectified-flow refinement.
#[derive(Parser, Debug)]
#[command(name = "pvrf", version, about)]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration; missing keys take their defaults
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: default, desk or smoke
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one leaf, e.g. `--set flow.sampler.steps=20`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic dataset and write its manifest
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Also write every clean/degraded pair as PGM/PPM
        #[arg(long)]
        images: bool,
    },
    /// Quantize yes/no logits into perception bundles
    Perceive(PerceiveArgs),
    /// Train the stage-1 posterior-mean network
    TrainPosterior {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV (default: next to the checkpoint)
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the stage-2 correction network on frozen anchors
    TrainFlow {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Use one global source scale instead of the perception-adaptive one
        #[arg(long)]
        delta_fixed: Option<f64>,
    },
    /// Refine anchors with the flow and write images plus JSON sidecars
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Only the first N items of the split
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score restored images against the clean split
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `sample`
        #[arg(long, required_unless_present = "posterior", conflicts_with = "posterior")]
        restored: Option<PathBuf>,
        /// Score the stage-1 anchors of this checkpoint instead
        #[arg(long)]
        posterior: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Set-level summary JSON (default: next to the CSV)
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the 2x2x2 grid over source scale, conditioning and velocity form
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Append the fixed-scale absolute-state baseline as a ninth row
        #[arg(long)]
        baseline: bool,
    },
}

#[derive(Args, Debug)]
struct PerceiveArgs {
    /// Comma-separated severities for blur, low-light, snow, rain, haze
    #[arg(long, conflicts_with_all = ["dump", "data"])]
    from_spec: Option<String>,
    /// Standard deviation of the mock oracle noise
    #[arg(long, default_value_t = 0.0, requires = "from_spec")]
    noise: f64,
    /// JSON-lines logit dump with `id`, `type_logits`, `attr_logits`
    #[arg(long, conflicts_with = "data")]
    dump: Option<PathBuf>,
    /// Dataset directory; writes one CSV row per sample
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file (default: standard output)
    #[arg(long)]
    out: Option<PathBuf>,
}

const MANIFEST: &str = "manifest.json";

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let base = match (&args.config, &args.preset) {
        (Some(path), _) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    let cfg = base.with_overrides(&args.sets)?.with_env_seed()?;
    log::info!("resolved config {}:\n{}", cfg.hash(), cfg.to_json_pretty());
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_data(cfg: &RunConfig, dir: &Path) -> Result<pvrf::degradations::Dataset> {
    Ok(experiments::load_data(cfg, &read_manifest(dir)?)?)
}

fn load_posterior(cfg: &RunConfig, path: &Path) -> Result<PosteriorModel> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    ckpt.require_hash(&cfg.posterior_hash())?;
    Ok(PosteriorModel::from_checkpoint(&ckpt)?)
}

fn parse_split(name: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .with_context(|| format!("unknown split `{name}`"))
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn image_ext(img: &ImagePatch) -> &'static str {
    if img.channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn bundle_json(bundle: &PerceptionBundle, cfg: &RunConfig) -> serde_json::Value {
    let d = perception::difficulty(bundle, &cfg.perception);
    json!({
        "type_prior": bundle.type_prior.probs,
        "normalized_type": bundle.normalized_type.weights,
        "attr_prior": bundle.attr_prior.scores,
        "entropy": d.entropy_h,
        "severity": d.severity_s,
        "difficulty": d.difficulty_u,
        "delta": d.delta,
    })
}

fn gen_data(cfg: &RunConfig, out: &Path, images: bool) -> Result<()> {
    let data = experiments::generate_data(cfg)?;
    let mut manifest = data.manifest.clone();
    if images {
        let all = data.train.iter().chain(&data.val).chain(&data.test);
        for (rec, sample) in manifest.samples.iter_mut().zip(all) {
            let ext = image_ext(&sample.clean);
            let files = SampleFiles {
                clean: format!("images/{}_clean.{ext}", sample.id),
                degraded: format!("images/{}_degraded.{ext}", sample.id),
            };
            write(&out.join(&files.clean), sample.clean.to_pnm())?;
            write(&out.join(&files.degraded), sample.degraded.to_pnm())?;
            rec.files = Some(files);
        }
    }
    let logits: Vec<_> = data
        .train
        .iter()
        .chain(&data.val)
        .chain(&data.test)
        .map(|s| s.logits.clone())
        .collect();
    fs::create_dir_all(out)?;
    write_logit_dump(out.join("logits.jsonl"), &logits)?;
    write(&out.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    log::info!(
        "wrote {} samples to {} (data hash {})",
        manifest.samples.len(),
        out.display(),
        manifest.config_hash
    );
    Ok(())
}

fn perceive(cfg: &RunConfig, args: &PerceiveArgs) -> Result<()> {
    let text = if let Some(spec) = &args.from_spec {
        let sev: Vec<f64> = spec
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .context("--from-spec expects comma-separated numbers")?;
        let sev: [f64; 5] = sev
            .try_into()
            .map_err(|v: Vec<f64>| anyhow::anyhow!("--from-spec needs 5 severities, got {}", v.len()))?;
        let spec = DegradationSpec::new(sev)?;
        let rec = mock_oracle("spec", &spec, args.noise, cfg.seeds.data, &cfg.data.degradation)?;
        let bundle = rec.bundle(&cfg.perception)?;
        let mut v = bundle_json(&bundle, cfg);
        v["logits"] = serde_json::to_value(&rec)?;
        serde_json::to_string_pretty(&v)? + "\n"
    } else if let Some(dump) = &args.dump {
        let mut out = String::new();
        for rec in ingest_logit_dump(dump, &cfg.perception)? {
            let mut v = bundle_json(&rec.bundle, cfg);
            v["id"] = json!(rec.id);
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        out
    } else if let Some(dir) = &args.data {
        let data = load_data(cfg, dir)?;
        let mut out = String::from("id,split");
        for name in perception::TYPE_NAMES {
            out.push_str(&format!(",p_{name},w_{name}"));
        }
        for name in perception::ATTR_NAMES {
            out.push_str(&format!(",a_{name}"));
        }
        out.push_str(",entropy,severity,delta\n");
        for split in Split::ALL {
            for s in data.split(split) {
                let b = &s.bundle;
                let d = perception::difficulty(b, &cfg.perception);
                out.push_str(&format!("{},{}", s.id, split.name()));
                for (p, w) in b.type_prior.probs.iter().zip(&b.normalized_type.weights) {
                    out.push_str(&format!(",{p:.9},{w:.9}"));
                }
                for a in &b.attr_prior.scores {
                    out.push_str(&format!(",{a:.9}"));
                }
                out.push_str(&format!(",{:.9},{:.9},{:.9}\n", d.entropy_h, d.severity_s, d.delta));
            }
        }
        out
    } else {
        bail!("perceive needs one of --from-spec, --dump or --data");
    };
    match &args.out {
        Some(path) => write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train_posterior(cfg: &RunConfig, data_dir: &Path, out: &Path, log_path: Option<&Path>) -> Result<()> {
    let data = load_data(cfg, data_dir)?;
    let (model, log) = experiments::train_posterior_stage(cfg, &data)?;
    write(out, model.to_checkpoint(&cfg.posterior_hash()).to_bytes()?)?;
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, "csv"));
    write(&log_path, log.to_csv())?;
    log::info!("best val loss {:.6e} at epoch {}", log.best_val, log.best_epoch);
    Ok(())
}

fn train_flow(cfg: &RunConfig, data_dir: &Path, post: &Path, out: &Path, log_path: Option<&Path>) -> Result<()> {
    let data = load_data(cfg, data_dir)?;
    let posterior = load_posterior(cfg, post)?;
    let anchors = Anchors::compute(&posterior, &data, cfg.eval.chunk)?;
    let mode = cfg.delta_mode();
    let (model, log, deltas) = experiments::train_flow_stage(cfg, cfg.flow.arch, &mode, &data, &anchors)?;
    write(out, model.to_checkpoint(&cfg.flow_hash()).to_bytes()?)?;
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, "csv"));
    write(&log_path, log.to_csv())?;
    write(&sibling(&log_path, "deltas.csv"), deltas)?;
    log::info!("best val loss {:.6e} at epoch {}", log.best_val, log.best_epoch);
    Ok(())
}

struct SampleArgs<'a> {
    data: &'a Path,
    posterior: &'a Path,
    flow: &'a Path,
    out: &'a Path,
    split: &'a str,
    limit: Option<usize>,
}

fn sample(cfg: &RunConfig, a: SampleArgs<'_>) -> Result<()> {
    let data = load_data(cfg, a.data)?;
    let posterior = load_posterior(cfg, a.posterior)?;
    let ckpt = Checkpoint::load(a.flow).with_context(|| format!("reading {}", a.flow.display()))?;
    let flow_hash = cfg.flow_hash();
    ckpt.require_hash(&flow_hash)?;
    let model = FlowModel::from_checkpoint(&ckpt)?;
    let split = parse_split(a.split)?;
    let samples = data.split(split);
    let samples = &samples[..a.limit.unwrap_or(samples.len()).min(samples.len())];
    let mus = experiments::anchors(&posterior, samples, cfg.eval.chunk)?;
    let mode = cfg.delta_mode();
    let restored = experiments::refine(cfg, &model, &mode, samples, &mus)?;
    fs::create_dir_all(a.out)?;
    for (i, (s, img)) in samples.iter().zip(&restored).enumerate() {
        let file = format!("{}.{}", s.id, image_ext(img));
        write(&a.out.join(&file), img.to_pnm())?;
        let sidecar = json!({
            "id": s.id,
            "image": file,
            "delta": mode.delta(&s.bundle),
            "steps": cfg.flow.sampler.steps,
            "scheme": cfg.flow.sampler.scheme,
            "seed": cfg.seeds.sample,
            "noise_index": i,
            "checkpoint_hash": flow_hash,
        });
        write(
            &a.out.join(format!("{}.json", s.id)),
            serde_json::to_string_pretty(&sidecar)? + "\n",
        )?;
    }
    log::info!("wrote {} refined images to {}", restored.len(), a.out.display());
    Ok(())
}

fn read_restored(cfg: &RunConfig, dir: &Path, ids: &[&str]) -> Result<Vec<ImagePatch>> {
    let expected = cfg.flow_hash();
    ids.iter()
        .map(|id| {
            let side_path = dir.join(format!("{id}.json"));
            let side: serde_json::Value = serde_json::from_str(
                &fs::read_to_string(&side_path).with_context(|| format!("reading {}", side_path.display()))?,
            )?;
            let found = side["checkpoint_hash"].as_str().unwrap_or_default();
            require_hash(&format!("restored image {id}"), &expected, found)?;
            let file = side["image"].as_str().context("sidecar lacks `image`")?;
            Ok(ImagePatch::load_pnm(dir.join(file))?)
        })
        .collect()
}

fn eval(
    cfg: &RunConfig,
    data_dir: &Path,
    restored_dir: Option<&Path>,
    post: Option<&Path>,
    out: &Path,
    summary: Option<&Path>,
    split: &str,
) -> Result<()> {
    let data = load_data(cfg, data_dir)?;
    let split = parse_split(split)?;
    let all = data.split(split);
    let restored = match (restored_dir, post) {
        (Some(dir), _) => {
            let present: Vec<&str> = all
                .iter()
                .map(|s| s.id.as_str())
                .filter(|id| dir.join(format!("{id}.json")).exists())
                .collect();
            if present.is_empty() {
                bail!("no restored images for split `{}` in {}", split.name(), dir.display());
            }
            read_restored(cfg, dir, &present)?
        }
        (None, Some(p)) => experiments::anchors(&load_posterior(cfg, p)?, all, cfg.eval.chunk)?,
        (None, None) => bail!("eval needs --restored or --posterior"),
    };
    let samples = &all[..restored.len()];
    let report = experiments::evaluate(cfg, samples, &restored)?;
    if !report.mean_mse.is_finite() || !report.energy_distance.is_finite() {
        bail!("non-finite evaluation result");
    }
    write(out, report.to_csv())?;
    let mut s = report.summary_json();
    s["config_hash"] = json!(cfg.hash());
    s["split"] = json!(split.name());
    let summary = summary.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, "json"));
    write(&summary, serde_json::to_string_pretty(&s)? + "\n")?;
    log::info!(
        "psnr {:.3} ssim {:.4} energy distance {:.5}",
        report.mean_psnr,
        report.mean_ssim,
        report.energy_distance
    );
    Ok(())
}

fn ablate(cfg: &RunConfig, data_dir: &Path, post: &Path, out: &Path, baseline: bool) -> Result<()> {
    let data = load_data(cfg, data_dir)?;
    let posterior = load_posterior(cfg, post)?;
    let anchors = Anchors::compute(&posterior, &data, cfg.eval.chunk)?;
    let mut rows = experiments::ablate(cfg, &data, &anchors)?;
    if baseline {
        rows.push(experiments::pmrf_baseline(cfg, &data, &anchors)?);
    }
    write(out, experiments::ablation_csv(&rows))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.run)?;
    match cli.command {
        Command::GenData { out, images } => gen_data(&cfg, &out, images),
        Command::Perceive(args) => perceive(&cfg, &args),
        Command::TrainPosterior { data, out, log } => train_posterior(&cfg, &data, &out, log.as_deref()),
        Command::TrainFlow {
            data,
            posterior,
            out,
            log,
            delta_fixed,
        } => {
            let mut cfg = cfg;
            if delta_fixed.is_some() {
                cfg.flow.delta_fixed = delta_fixed;
                cfg.validate()?;
            }
            train_flow(&cfg, &data, &posterior, &out, log.as_deref())
        }
        Command::Sample {
            data,
            posterior,
            flow,
            out,
            split,
            limit,
        } => sample(
            &cfg,
            SampleArgs {
                data: &data,
                posterior: &posterior,
                flow: &flow,
                out: &out,
                split: &split,
                limit,
            },
        ),
        Command::Eval {
            data,
            restored,
            posterior,
            out,
            summary,
            split,
        } => eval(
            &cfg,
            &data,
            restored.as_deref(),
            posterior.as_deref(),
            &out,
            summary.as_deref(),
            &split,
        ),
        Command::Ablate {
            data,
            posterior,
            out,
            baseline,
        } => ablate(&cfg, &data, &posterior, &out, baseline),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
