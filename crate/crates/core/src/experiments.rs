//! End-to-end recipes shared by the command line and the acceptance harness.

use serde::Serialize;

use crate::config::{require_hash, RunConfig};
use crate::degradations::{build_dataset, rebuild, Dataset, Manifest, PairedSample, Split};
use crate::flow::{sample_batch, train_flow, DeltaMode, FlowArch, FlowExample, FlowModel, StateInput, Velocity};
use crate::image::ImagePatch;
use crate::metrics::EvalReport;
use crate::posterior::{train_posterior, Example, PosteriorModel, TrainLog};
use crate::{Error, Result};

/// Fixed source scale of the non-adaptive ablation cells: the midpoint of the
/// adaptive range, i.e. the value reached by a uniform type prior.
pub const ABLATION_FIXED_DELTA: f64 = 0.0625;

pub fn generate_data(cfg: &RunConfig) -> Result<Dataset> {
    build_dataset(&cfg.data, cfg.seeds.data, &cfg.perception, &cfg.data_hash())
}

/// Rebuilds the images behind a manifest after checking it matches `cfg`.
pub fn load_data(cfg: &RunConfig, manifest: &Manifest) -> Result<Dataset> {
    require_hash("dataset manifest", &cfg.data_hash(), &manifest.config_hash)?;
    rebuild(manifest, &cfg.perception)
}

pub fn train_posterior_stage(cfg: &RunConfig, data: &Dataset) -> Result<(PosteriorModel, TrainLog)> {
    let train: Vec<Example<'_>> = data.train.iter().map(Example::from).collect();
    let val: Vec<Example<'_>> = data.val.iter().map(Example::from).collect();
    train_posterior(cfg.posterior.arch, &cfg.posterior_train(), &train, &val)
}

/// Posterior means for one split.
pub fn anchors(model: &PosteriorModel, samples: &[PairedSample], chunk: usize) -> Result<Vec<ImagePatch>> {
    let ys: Vec<&ImagePatch> = samples.iter().map(|s| &s.degraded).collect();
    let bundles: Vec<_> = samples.iter().map(|s| &s.bundle).collect();
    model.predict_all(&ys, &bundles, chunk)
}

/// Anchors for every split, computed once per posterior.
#[derive(Debug, Clone)]
pub struct Anchors {
    pub train: Vec<ImagePatch>,
    pub val: Vec<ImagePatch>,
    pub test: Vec<ImagePatch>,
}

impl Anchors {
    pub fn compute(model: &PosteriorModel, data: &Dataset, chunk: usize) -> Result<Self> {
        Ok(Self {
            train: anchors(model, &data.train, chunk)?,
            val: anchors(model, &data.val, chunk)?,
            test: anchors(model, &data.test, chunk)?,
        })
    }

    pub fn split(&self, split: Split) -> &[ImagePatch] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn flow_examples<'a>(samples: &'a [PairedSample], mus: &'a [ImagePatch], mode: &DeltaMode) -> Vec<FlowExample<'a>> {
    samples
        .iter()
        .zip(mus)
        .map(|(s, mu)| FlowExample {
            id: &s.id,
            mu,
            clean: &s.clean,
            bundle: &s.bundle,
            delta: mode.delta(&s.bundle),
        })
        .collect()
}

/// Per-sample δ of the training split, `id,delta`.
pub fn deltas_csv(examples: &[FlowExample<'_>]) -> String {
    let mut out = String::from("id,delta\n");
    for e in examples {
        out.push_str(&format!("{},{:.9}\n", e.id, e.delta));
    }
    out
}

pub fn train_flow_stage(
    cfg: &RunConfig,
    arch: FlowArch,
    mode: &DeltaMode,
    data: &Dataset,
    anchors: &Anchors,
) -> Result<(FlowModel, TrainLog, String)> {
    let train = flow_examples(&data.train, &anchors.train, mode);
    let val = flow_examples(&data.val, &anchors.val, mode);
    let (model, log) = train_flow(arch, &cfg.flow_train(), &train, &val)?;
    Ok((model, log, deltas_csv(&train)))
}

/// Samples every item of `samples`; item `i` draws its source from noise index `i`.
pub fn refine(
    cfg: &RunConfig,
    model: &FlowModel,
    mode: &DeltaMode,
    samples: &[PairedSample],
    mus: &[ImagePatch],
) -> Result<Vec<ImagePatch>> {
    if samples.len() != mus.len() {
        return Err(Error::invalid("one anchor per sample required"));
    }
    let chunk = cfg.eval.chunk;
    let mut out = Vec::with_capacity(samples.len());
    for (c, (ss, ms)) in samples.chunks(chunk).zip(mus.chunks(chunk)).enumerate() {
        let mr: Vec<&ImagePatch> = ms.iter().collect();
        let br: Vec<_> = ss.iter().map(|s| &s.bundle).collect();
        let deltas: Vec<f64> = ss.iter().map(|s| mode.delta(&s.bundle)).collect();
        out.extend(sample_batch(
            model,
            &mr,
            &br,
            &deltas,
            &cfg.flow.sampler,
            cfg.seeds.sample,
            (c * chunk) as u64,
        )?);
    }
    Ok(out)
}

pub fn evaluate(cfg: &RunConfig, samples: &[PairedSample], restored: &[ImagePatch]) -> Result<EvalReport> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let clean: Vec<ImagePatch> = samples.iter().map(|s| s.clean.clone()).collect();
    EvalReport::compute(&ids, restored, &clean, &cfg.eval.energy, cfg.seeds.eval)
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub adaptive_delta: bool,
    pub conditioned: bool,
    pub velocity: Velocity,
}

impl Cell {
    pub const FULL: Cell = Cell {
        adaptive_delta: true,
        conditioned: true,
        velocity: Velocity::Tc,
    };

    pub fn grid() -> Vec<Cell> {
        let mut cells = Vec::with_capacity(8);
        for adaptive_delta in [false, true] {
            for conditioned in [false, true] {
                for velocity in [Velocity::Direct, Velocity::Tc] {
                    cells.push(Cell {
                        adaptive_delta,
                        conditioned,
                        velocity,
                    });
                }
            }
        }
        cells
    }

    pub fn name(&self) -> String {
        format!(
            "{}-{}-{}",
            if self.adaptive_delta { "adaptive" } else { "fixed" },
            if self.conditioned { "cond" } else { "uncond" },
            match self.velocity {
                Velocity::Tc => "tc",
                Velocity::Direct => "direct",
            }
        )
    }

    pub fn arch(&self, base: FlowArch) -> FlowArch {
        FlowArch {
            conditioned: self.conditioned,
            velocity: self.velocity,
            state: StateInput::Residual,
            ..base
        }
    }

    pub fn delta_mode(&self, cfg: &RunConfig) -> DeltaMode {
        if self.adaptive_delta {
            DeltaMode::Adaptive(cfg.perception)
        } else {
            DeltaMode::Fixed(ABLATION_FIXED_DELTA)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub name: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub energy_distance: f64,
    pub best_val_loss: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

/// Trains, samples and scores one flow variant on the test split.
pub fn run_variant(
    cfg: &RunConfig,
    name: &str,
    arch: FlowArch,
    mode: &DeltaMode,
    data: &Dataset,
    anchors: &Anchors,
) -> Result<(CellResult, Vec<ImagePatch>)> {
    let (model, log, _) = train_flow_stage(cfg, arch, mode, data, anchors)?;
    let restored = refine(cfg, &model, mode, &data.test, &anchors.test)?;
    let report = evaluate(cfg, &data.test, &restored)?;
    let deltas: Vec<f64> = data.train.iter().map(|s| mode.delta(&s.bundle)).collect();
    let result = CellResult {
        name: name.to_string(),
        mean_psnr: report.mean_psnr,
        mean_ssim: report.mean_ssim,
        energy_distance: report.energy_distance,
        best_val_loss: log.best_val,
        delta_min: deltas.iter().copied().fold(f64::INFINITY, f64::min),
        delta_max: deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    log::info!(
        "{name}: psnr {:.3} ssim {:.4} energy distance {:.5}",
        result.mean_psnr,
        result.mean_ssim,
        result.energy_distance
    );
    Ok((result, restored))
}

/// The 2×2×2 grid over δ source, Φ conditioning and velocity form. Every
/// cell shares the anchors, data, seeds and network width of `cfg`.
pub fn ablate(cfg: &RunConfig, data: &Dataset, anchors: &Anchors) -> Result<Vec<CellResult>> {
    Cell::grid()
        .into_iter()
        .map(|cell| {
            run_variant(
                cfg,
                &cell.name(),
                cell.arch(cfg.flow.arch),
                &cell.delta_mode(cfg),
                data,
                anchors,
            )
            .map(|(r, _)| r)
        })
        .collect()
}

/// Unconstrained velocity on absolute states from a fixed-scale source.
pub fn pmrf_baseline(cfg: &RunConfig, data: &Dataset, anchors: &Anchors) -> Result<CellResult> {
    let arch = FlowArch {
        conditioned: false,
        velocity: Velocity::Direct,
        state: StateInput::Absolute,
        ..cfg.flow.arch
    };
    run_variant(
        cfg,
        "pmrf",
        arch,
        &DeltaMode::Fixed(ABLATION_FIXED_DELTA),
        data,
        anchors,
    )
    .map(|(r, _)| r)
}

pub fn ablation_csv(rows: &[CellResult]) -> String {
    let mut out = String::from("cell,mean_psnr,mean_ssim,energy_distance,best_val_loss,delta_min,delta_max\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.9e},{:.9e},{:.6},{:.6}\n",
            r.name, r.mean_psnr, r.mean_ssim, r.energy_distance, r.best_val_loss, r.delta_min, r.delta_max
        ));
    }
    out
}

/// Index of the lowest energy distance, and whether `target` is within
/// `rel_tol` of it.
pub fn best_or_tied(rows: &[CellResult], target: &str, rel_tol: f64) -> Option<(usize, bool)> {
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.energy_distance.total_cmp(&b.1.energy_distance))?
        .0;
    let t = rows.iter().find(|r| r.name == target)?;
    let floor = rows[best].energy_distance;
    Some((best, t.energy_distance <= floor + rel_tol * floor.abs()))
}
