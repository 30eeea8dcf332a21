use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::checkpoint::{self, FusionHeader};
use super::config::FusionConfig;
use super::{fuse_pairs, interleave_tasks, CurveSummary, FusedPair, RunContext, RunManifest};
use crate::data::{load_pairs, write_phantom_dataset, DatasetLayout, SourcePair, Split, Task};
use crate::error::{Error, Result};
use crate::fusionnet::{train_stage2, FusionWeights, Stage2Curves, Stage2Setup};
use crate::imaging::{GrayImage, Plane, SourceImage};
use crate::metrics::{
    evaluate_batch, format_csv, format_table, mean_report, EvalItem, MetricReport, TableRow,
};
use crate::reconstructor::{train_stage1, LossCurve, ReconstructorWeights};

pub const RECON_CKPT: &str = "recon.ckpt";
pub const FUSION_CKPT: &str = "fusion.ckpt";

/// Generate the phantom dataset under the configured data root.
pub fn cmd_phantom(ctx: &RunContext) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let mut m = ctx.start("phantom");
    let root = cfg.data_root(&ctx.out_dir);
    let layout = DatasetLayout {
        train_per_task: cfg.data.train_per_task,
        test_per_task: cfg.data.test_per_task,
        size: cfg.resolution,
    };
    let manifest_path = write_phantom_dataset(&root, &layout, cfg.seed)?;
    let listing = crate::data::PairManifest::read(&manifest_path)?;
    m.artifacts.push(ctx.artifact(&manifest_path)?);
    for e in &listing.entries {
        m.artifacts.push(ctx.artifact(&root.join(&e.path_a))?);
        m.artifacts.push(ctx.artifact(&root.join(&e.path_b))?);
    }
    ctx.finish(m, "phantom")
}

/// Every pair of the configured dataset, in manifest order.
fn load_all(ctx: &RunContext) -> Result<(Vec<SourcePair>, PathBuf)> {
    let path = ctx.config.manifest_path(&ctx.out_dir);
    if !path.exists() {
        return Err(Error::Manifest(format!(
            "dataset manifest {} not found (run `dmfuse phantom` first)",
            path.display()
        )));
    }
    let pairs = load_pairs(&path)?;
    let r = ctx.config.resolution;
    for p in &pairs {
        if p.a.dims() != (r, r) {
            return Err(Error::shape(format!(
                "pair {} is {:?}, config resolution is {r}x{r}",
                p.id,
                p.a.dims()
            )));
        }
    }
    Ok((pairs, path))
}

/// Pairs of one split, tasks interleaved.
pub(super) fn load_split(ctx: &RunContext, split: Split) -> Result<(Vec<SourcePair>, PathBuf)> {
    let (pairs, path) = load_all(ctx)?;
    let pairs = pairs.into_iter().filter(|p| p.split == split).collect();
    Ok((interleave_tasks(pairs), path))
}

/// Stage I images: the luma of both modalities of every training pair.
pub(super) fn stage1_images(pairs: &[SourcePair], max_images: usize) -> Vec<GrayImage> {
    let mut images: Vec<GrayImage> = pairs
        .iter()
        .flat_map(|p| [p.a.clone(), p.b_luma()])
        .collect();
    if max_images > 0 {
        images.truncate(max_images);
    }
    images
}

pub(super) fn stage2_pairs(pairs: &[SourcePair], max_pairs: usize) -> Vec<(GrayImage, GrayImage)> {
    let n = if max_pairs > 0 {
        max_pairs.min(pairs.len())
    } else {
        pairs.len()
    };
    pairs[..n]
        .iter()
        .map(|p| (p.a.clone(), p.b_luma()))
        .collect()
}

pub(super) fn recon_curve_csv(curve: &LossCurve) -> String {
    let mut s = String::from("step,loss\n");
    for (i, v) in curve.values.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}

pub(super) fn fusion_curve_csv(curves: &Stage2Curves) -> String {
    let mut s = String::from("step,l_int,l_ssim,l_grad,total\n");
    for (i, b) in curves.steps.iter().enumerate() {
        s.push_str(&format!(
            "{i},{},{},{},{}\n",
            b.l_int, b.l_ssim, b.l_grad, b.total
        ));
    }
    s
}

fn head_tail(values: &[f64]) -> (f64, f64) {
    let n = values.len().clamp(1, 100);
    let mean = |it: &[f64]| it.iter().sum::<f64>() / it.len().max(1) as f64;
    (
        mean(&values[..n.min(values.len())]),
        mean(&values[values.len().saturating_sub(n)..]),
    )
}

/// Stage I: train the reconstructor on training-split luma images.
pub fn cmd_train_recon(ctx: &RunContext) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let mut m = ctx.start("train-recon");
    let (pairs, manifest_path) = load_split(ctx, Split::Train)?;
    m.inputs.push(ctx.artifact(&manifest_path)?);
    let images = stage1_images(&pairs, cfg.stage1.max_images);
    if images.is_empty() {
        return Err(Error::EmptyDataset(
            "no training images in the manifest".into(),
        ));
    }
    let schedule = cfg.noise_schedule()?;
    log::info!(
        "stage I: {} images, {} steps",
        images.len(),
        cfg.stage1.steps
    );
    let (weights, curve) = train_stage1(
        &images,
        &cfg.recon,
        &schedule,
        &cfg.stage1(),
        cfg.stage1.mode,
    )?;
    let ckpt = ctx.out_dir.join(RECON_CKPT);
    m.artifacts.push(ctx.write(
        &ckpt,
        checkpoint::encode_recon(&weights, &cfg.recon_digest()),
    )?);
    let csv = ctx.out_dir.join("recon_loss.csv");
    m.artifacts.push(ctx.write(&csv, recon_curve_csv(&curve))?);
    let (head, tail) = head_tail(&curve.values);
    m.curves.push(CurveSummary {
        name: "stage1".into(),
        csv: ctx.rel(&csv),
        steps: curve.values.len(),
        head_mean_100: head,
        tail_mean_100: tail,
    });
    ctx.finish(m, "train-recon")
}

/// Load a reconstructor and check it fits the config.
fn load_recon_for(ctx: &RunContext, path: &Path) -> Result<(ReconstructorWeights, String)> {
    load_recon_checked(&ctx.config, path)
}

fn load_recon_checked(cfg: &FusionConfig, path: &Path) -> Result<(ReconstructorWeights, String)> {
    let (w, header, digest) = checkpoint::load_recon(path)?;
    let expected = cfg.recon_digest();
    if header.config_digest != expected {
        return Err(Error::DigestMismatch {
            path: path.to_path_buf(),
            expected,
            found: header.config_digest,
        });
    }
    Ok((w, digest))
}

/// Load a reconstructor/fusion checkpoint pair, checking the reconstructor
/// against `cfg` and the fusion network against the reconstructor.
pub fn load_models(
    cfg: &FusionConfig,
    recon_path: &Path,
    fusion_path: &Path,
) -> Result<(ReconstructorWeights, FusionWeights, FusionHeader)> {
    let (recon, recon_digest) = load_recon_checked(cfg, recon_path)?;
    let (fusion, header) = checkpoint::load_fusion_for(fusion_path, &recon_digest)?;
    Ok((recon, fusion, header))
}

/// Stage II: train the fusion network over the frozen reconstructor.
pub fn cmd_train_fusion(ctx: &RunContext, recon_path: &Path) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let mut m = ctx.start("train-fusion");
    let (recon, recon_digest) = load_recon_for(ctx, recon_path)?;
    m.inputs.push(ctx.artifact(recon_path)?);
    let (pairs, manifest_path) = load_split(ctx, Split::Train)?;
    m.inputs.push(ctx.artifact(&manifest_path)?);
    let train = stage2_pairs(&pairs, cfg.stage2.max_pairs);
    let schedule = cfg.noise_schedule()?;
    let setup = Stage2Setup {
        schedule: &schedule,
        time_steps: &cfg.fusion.time_steps,
        loss: cfg.loss.weights(),
        patch: cfg.loss.patch(),
        variant: cfg.fusion.variant,
        train: cfg.stage2(),
    };
    log::info!(
        "stage II: {} pairs, {} steps",
        train.len(),
        cfg.stage2.steps
    );
    let (fusion, curves) = train_stage2(&recon, &train, &setup)?;
    let bytes = checkpoint::encode_fusion(
        &fusion,
        &cfg.fusion.time_steps,
        &cfg.digest(),
        &recon_digest,
    );
    m.artifacts
        .push(ctx.write(&ctx.out_dir.join(FUSION_CKPT), bytes)?);
    let csv = ctx.out_dir.join("fusion_loss.csv");
    m.artifacts
        .push(ctx.write(&csv, fusion_curve_csv(&curves))?);
    let (head, tail) = head_tail(&curves.totals());
    m.curves.push(CurveSummary {
        name: "stage2".into(),
        csv: ctx.rel(&csv),
        steps: curves.steps.len(),
        head_mean_100: head,
        tail_mean_100: tail,
    });
    ctx.finish(m, "train-fusion")
}

/// What `cmd_fuse` should fuse.
#[derive(Clone, Debug)]
pub enum FuseInput {
    /// Every pair of a split of the configured dataset.
    Split(Split),
    /// One explicit pair of PNG files.
    Pair { a: PathBuf, b: PathBuf },
}

#[derive(Clone, Debug)]
pub struct FuseOutput {
    pub manifest: RunManifest,
    pub fused: Vec<FusedPair>,
    pub dir: PathBuf,
}

/// Fuse pairs; outputs go to `<out>/fused/<pair_id>.png`.
pub fn cmd_fuse(
    ctx: &RunContext,
    recon_path: &Path,
    fusion_path: &Path,
    input: &FuseInput,
) -> Result<FuseOutput> {
    let cfg = &ctx.config;
    let mut m = ctx.start("fuse");
    let (recon, fusion, header) = load_models(&ctx.config, recon_path, fusion_path)?;
    m.inputs.push(ctx.artifact(recon_path)?);
    m.inputs.push(ctx.artifact(fusion_path)?);
    let pairs = match input {
        FuseInput::Split(split) => {
            let (pairs, path) = load_split(ctx, *split)?;
            m.inputs.push(ctx.artifact(&path)?);
            pairs
        }
        FuseInput::Pair { a, b } => {
            let ia = SourceImage::load_png(a)?.luma();
            let ib = SourceImage::load_png(b)?;
            if ia.dims() != ib.dims() {
                return Err(Error::shape(format!(
                    "{} is {:?} but {} is {:?}",
                    a.display(),
                    ia.dims(),
                    b.display(),
                    ib.dims()
                )));
            }
            m.inputs.push(ctx.artifact(a)?);
            m.inputs.push(ctx.artifact(b)?);
            let id = a
                .file_stem()
                .map(|s| s.to_string_lossy().trim_end_matches("_A").to_string())
                .unwrap_or_else(|| "pair".into());
            // The task tag is only metadata here; routing follows B's color.
            let task = if ib.is_color() {
                Task::MriPet
            } else {
                Task::MriCt
            };
            vec![SourcePair {
                id,
                task,
                split: Split::Test,
                a: ia,
                b: ib,
            }]
        }
    };
    let schedule = cfg.noise_schedule()?;
    let fused = fuse_pairs(
        &recon,
        &fusion,
        &header.time_steps,
        &schedule,
        &pairs,
        cfg.seed,
        ctx.threads()?,
    )?;
    let dir = ctx.out_dir.join("fused");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for f in &fused {
        let path = dir.join(format!("{}.png", f.id));
        f.image.save_png(&path)?;
        m.artifacts.push(ctx.artifact(&path)?);
    }
    let manifest = ctx.finish(m, "fuse")?;
    Ok(FuseOutput {
        manifest,
        fused,
        dir,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub manifest: RunManifest,
    /// Per-pair reports in manifest order, tagged by task.
    pub reports: Vec<(Task, MetricReport)>,
    /// Mean rows: one per task, the functional tasks pooled, and all pairs.
    pub means: Vec<MetricReport>,
    pub table: String,
}

/// Score fused images in `fused_dir` against the pairs of `split`.
pub fn cmd_eval(ctx: &RunContext, fused_dir: &Path, split: Split) -> Result<EvalOutput> {
    let mut m = ctx.start("eval");
    let (all, manifest_path) = load_all(ctx)?;
    m.inputs.push(ctx.artifact(&manifest_path)?);
    let all_ids: BTreeSet<String> = all.iter().map(|p| p.id.clone()).collect();
    let pairs: Vec<SourcePair> = all.into_iter().filter(|p| p.split == split).collect();

    let mut missing = Vec::new();
    let mut items = Vec::new();
    for p in &pairs {
        let path = fused_dir.join(format!("{}.png", p.id));
        if !path.exists() {
            missing.push(path.display().to_string());
            continue;
        }
        m.inputs.push(ctx.artifact(&path)?);
        items.push((
            p.task,
            EvalItem {
                id: p.id.clone(),
                a: p.a.clone(),
                b: p.b.clone(),
                fused: SourceImage::load_png(&path)?,
            },
        ));
    }
    let mut unknown = Vec::new();
    let entries = std::fs::read_dir(fused_dir).map_err(|e| Error::io(fused_dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(fused_dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            let stem = path
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            if !all_ids.contains(&stem) {
                unknown.push(path.display().to_string());
            }
        }
    }
    unknown.sort();
    if !missing.is_empty() || !unknown.is_empty() {
        let mut msg = String::new();
        if !missing.is_empty() {
            msg.push_str(&format!("missing fused images: {}", missing.join(", ")));
        }
        if !unknown.is_empty() {
            if !msg.is_empty() {
                msg.push_str("; ");
            }
            msg.push_str(&format!(
                "fused images without a pair: {}",
                unknown.join(", ")
            ));
        }
        return Err(Error::Manifest(msg));
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no {} pairs to evaluate",
            split.as_str()
        )));
    }

    let eval_items: Vec<EvalItem> = items.iter().map(|(_, it)| it.clone()).collect();
    let reports = evaluate_batch(&eval_items, ctx.threads()?)?;
    let tagged: Vec<(Task, MetricReport)> = items
        .iter()
        .map(|(t, _)| *t)
        .zip(reports.iter().cloned())
        .collect();

    let eval_dir = ctx.out_dir.join("eval");
    let mut means = Vec::new();
    for task in Task::ALL {
        let subset: Vec<MetricReport> = tagged
            .iter()
            .filter(|(t, _)| *t == task)
            .map(|(_, r)| r.clone())
            .collect();
        if subset.is_empty() {
            continue;
        }
        let csv = eval_dir.join(format!("{task}.csv"));
        m.artifacts.push(ctx.write(&csv, format_csv(&subset)?)?);
        means.push(mean_report(task.as_str(), &subset)?);
    }
    let functional: Vec<MetricReport> = tagged
        .iter()
        .filter(|(t, _)| t.is_functional())
        .map(|(_, r)| r.clone())
        .collect();
    if !functional.is_empty() {
        means.push(mean_report("mri-pet+mri-spect", &functional)?);
    }
    means.push(mean_report("all", &reports)?);
    m.artifacts
        .push(ctx.write(&eval_dir.join("all.csv"), format_csv(&reports)?)?);

    let rows: Vec<TableRow> = means
        .iter()
        .map(|r| TableRow {
            label: r.pair_id.clone(),
            extra: Vec::new(),
            report: r.clone(),
        })
        .collect();
    let table = format_table(
        &format!(
            "Objective evaluation ({} split, mean per group)",
            split.as_str()
        ),
        &[],
        &rows,
    );
    m.artifacts
        .push(ctx.write(&eval_dir.join("table.txt"), &table)?);
    let manifest = ctx.finish(m, "eval")?;
    Ok(EvalOutput {
        manifest,
        reports: tagged,
        means,
        table,
    })
}
