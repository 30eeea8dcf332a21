//! Ablation harness: loss-weight grid, time-step sets, and the three
//! structural ablations, each trained and scored at the configured scale.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::commands::{load_split, stage1_images, stage2_pairs};
use super::{fuse_pairs, RunContext, RunManifest};
use crate::data::{SourcePair, Split};
use crate::diffusion::{NoiseSchedule, TimeStepSet};
use crate::error::{Error, Result};
use crate::fusionnet::{train_stage2, FusionVariant, Stage2Setup};
use crate::losses::LossWeights;
use crate::metrics::{
    evaluate_batch, format_table, mean_report, EvalItem, MetricReport, TableRow, METRIC_NAMES,
};
use crate::reconstructor::{train_stage1, ReconstructorWeights, Stage1Mode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    LossGrid,
    TimeSteps,
    NoDiffusion,
    NoAmff,
    NoMsff,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::LossGrid,
        AblationMode::TimeSteps,
        AblationMode::NoDiffusion,
        AblationMode::NoAmff,
        AblationMode::NoMsff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::LossGrid => "loss-grid",
            AblationMode::TimeSteps => "time-steps",
            AblationMode::NoDiffusion => "no-diffusion",
            AblationMode::NoAmff => "no-amff",
            AblationMode::NoMsff => "no-msff",
        }
    }

    fn title(self) -> &'static str {
        match self {
            AblationMode::LossGrid => "Objective evaluation for different values of alpha and beta",
            AblationMode::TimeSteps => "Objective evaluation for different time-step combinations",
            AblationMode::NoDiffusion => {
                "Ablation: diffusion features vs plain reconstruction features"
            }
            AblationMode::NoAmff => "Ablation: AMFF vs elementwise addition",
            AblationMode::NoMsff => "Ablation: MSFF vs finest-level features only",
        }
    }

    fn has_param_column(self) -> bool {
        matches!(self, AblationMode::NoAmff | AblationMode::NoMsff)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = AblationMode::ALL.iter().map(|m| m.as_str()).collect();
                Error::InvalidArgument(format!(
                    "unknown ablation mode '{s}' (known: {})",
                    known.join(", ")
                ))
            })
    }
}

/// One trained-and-scored configuration.
#[derive(Clone, Debug, PartialEq)]
struct Variant {
    label: String,
    loss: LossWeights,
    steps: TimeStepSet,
    arch: FusionVariant,
    stage1: Stage1Mode,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub fusion_params: usize,
    pub time_steps: Vec<usize>,
    pub variant: FusionVariant,
    pub mean: MetricReport,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub rows: Vec<AblationRow>,
    pub table: String,
    pub manifest: RunManifest,
}

fn loss(alpha: f64, beta: f64, grad_weight: f64) -> LossWeights {
    LossWeights {
        alpha,
        beta,
        grad_weight,
    }
}

fn steps(v: &[usize]) -> TimeStepSet {
    TimeStepSet::new(v.to_vec()).expect("literal step sets are increasing")
}

fn variants(ctx: &RunContext, mode: AblationMode) -> Vec<Variant> {
    let cfg = &ctx.config;
    let base = Variant {
        label: "DM-FNet".into(),
        loss: cfg.loss.weights(),
        steps: cfg.fusion.time_steps.clone(),
        arch: FusionVariant::Full,
        stage1: Stage1Mode::Diffusion,
    };
    let with = |label: &str, f: &dyn Fn(&mut Variant)| {
        let mut v = base.clone();
        v.label = label.to_string();
        f(&mut v);
        v
    };
    match mode {
        AblationMode::LossGrid => [
            ("Only L_int", loss(1.0, 0.0, 0.0)),
            ("Only L_ssim", loss(0.0, 1.0, 0.0)),
            ("L_int + L_ssim", loss(1.0, 1.0, 0.0)),
            ("alpha=1.0, beta=1.0", loss(1.0, 1.0, 1.0)),
            ("alpha=1.5, beta=1.0", loss(1.5, 1.0, 1.0)),
            ("alpha=2.0, beta=1.0", loss(2.0, 1.0, 1.0)),
            ("alpha=1.5, beta=0.5", loss(1.5, 0.5, 1.0)),
        ]
        .into_iter()
        .map(|(label, w)| with(label, &|v| v.loss = w))
        .collect(),
        AblationMode::TimeSteps => [
            &[5][..],
            &[10],
            &[20],
            &[50],
            &[5, 10],
            &[5, 10, 20],
            &[5, 10, 20, 50],
        ]
        .into_iter()
        .map(|s| {
            let label = format!(
                "({})",
                s.iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            );
            with(&label, &|v| v.steps = steps(s))
        })
        .collect(),
        AblationMode::NoDiffusion => vec![
            base.clone(),
            with("w/o diffusion", &|v| {
                v.stage1 = Stage1Mode::Reconstruction;
                v.steps = steps(&[0]);
            }),
        ],
        AblationMode::NoAmff => vec![
            base.clone(),
            with("w/o AMFF", &|v| v.arch = FusionVariant::NoAmff),
        ],
        AblationMode::NoMsff => vec![
            base.clone(),
            with("w/o MSFF", &|v| v.arch = FusionVariant::NoMsff),
        ],
    }
}

/// Trains what a mode needs, reusing reconstructors and identical variants.
struct Harness<'a> {
    ctx: &'a RunContext,
    schedule: NoiseSchedule,
    train: Vec<SourcePair>,
    test: Vec<SourcePair>,
    recons: HashMap<Stage1Mode, ReconstructorWeights>,
    done: Vec<(Variant, AblationRow)>,
}

impl<'a> Harness<'a> {
    fn recon(&mut self, mode: Stage1Mode) -> Result<&ReconstructorWeights> {
        if !self.recons.contains_key(&mode) {
            let cfg = &self.ctx.config;
            let images = stage1_images(&self.train, cfg.stage1.max_images);
            log::info!("ablation stage I ({mode:?}): {} images", images.len());
            let (w, _) = train_stage1(&images, &cfg.recon, &self.schedule, &cfg.stage1(), mode)?;
            self.recons.insert(mode, w);
        }
        Ok(&self.recons[&mode])
    }

    fn run(&mut self, v: &Variant) -> Result<AblationRow> {
        if let Some((_, row)) = self.done.iter().find(|(d, _)| {
            d.loss == v.loss && d.steps == v.steps && d.arch == v.arch && d.stage1 == v.stage1
        }) {
            let mut row = row.clone();
            row.label = v.label.clone();
            row.mean.pair_id = v.label.clone();
            return Ok(row);
        }
        let cfg = &self.ctx.config;
        let threads = self.ctx.threads()?;
        let schedule = self.schedule.clone();
        let train = stage2_pairs(&self.train, cfg.stage2.max_pairs);
        let test = self.test.clone();
        let recon = self.recon(v.stage1)?.clone();
        let setup = Stage2Setup {
            schedule: &schedule,
            time_steps: &v.steps,
            loss: v.loss,
            patch: cfg.loss.patch(),
            variant: v.arch,
            train: cfg.stage2(),
        };
        log::info!("ablation stage II: {}", v.label);
        let (fusion, _) = train_stage2(&recon, &train, &setup)?;
        let fused = fuse_pairs(
            &recon, &fusion, &v.steps, &schedule, &test, cfg.seed, threads,
        )?;
        let items: Vec<EvalItem> = test
            .iter()
            .zip(&fused)
            .map(|(p, f)| EvalItem {
                id: p.id.clone(),
                a: p.a.clone(),
                b: p.b.clone(),
                fused: f.image.clone(),
            })
            .collect();
        let reports = evaluate_batch(&items, threads)?;
        let row = AblationRow {
            label: v.label.clone(),
            fusion_params: fusion.param_count(),
            time_steps: v.steps.steps().to_vec(),
            variant: v.arch,
            mean: mean_report(&v.label, &reports)?,
        };
        self.done.push((v.clone(), row.clone()));
        Ok(row)
    }
}

fn rows_csv(mode: AblationMode, rows: &[AblationRow]) -> String {
    let mut s = String::from("experiment");
    if mode.has_param_column() {
        s.push_str(",params");
    }
    s.push(',');
    s.push_str(&METRIC_NAMES.join(","));
    s.push('\n');
    for r in rows {
        s.push_str(&format!("\"{}\"", r.label));
        if mode.has_param_column() {
            s.push_str(&format!(",{}", r.fusion_params));
        }
        for v in r.mean.values() {
            s.push_str(&format!(",{v:.6}"));
        }
        s.push('\n');
    }
    s
}

/// Run the given ablation modes; each writes `<out>/ablate/<mode>.{txt,csv}`.
pub fn cmd_ablate(ctx: &RunContext, modes: &[AblationMode]) -> Result<Vec<AblationReport>> {
    let (train, manifest_path) = load_split(ctx, Split::Train)?;
    let (test, _) = load_split(ctx, Split::Test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset(
            "ablation needs train and test pairs".into(),
        ));
    }
    let mut h = Harness {
        ctx,
        schedule: ctx.config.noise_schedule()?,
        train,
        test,
        recons: HashMap::new(),
        done: Vec::new(),
    };
    let mut out = Vec::new();
    for &mode in modes {
        let mut m = ctx.start(&format!("ablate {mode}"));
        m.inputs.push(ctx.artifact(&manifest_path)?);
        let mut rows = Vec::new();
        for v in variants(ctx, mode) {
            rows.push(h.run(&v)?);
        }
        let table_rows: Vec<TableRow> = rows
            .iter()
            .map(|r| TableRow {
                label: r.label.clone(),
                extra: if mode.has_param_column() {
                    vec![r.fusion_params.to_string()]
                } else {
                    Vec::new()
                },
                report: r.mean.clone(),
            })
            .collect();
        let headers: &[&str] = if mode.has_param_column() {
            &["Params"]
        } else {
            &[]
        };
        let table = format_table(
            &format!("{} (mean over {} test pairs)", mode.title(), h.test.len()),
            headers,
            &table_rows,
        );
        let dir = ctx.out_dir.join("ablate");
        m.artifacts
            .push(ctx.write(&dir.join(format!("{mode}.txt")), &table)?);
        m.artifacts
            .push(ctx.write(&dir.join(format!("{mode}.csv")), rows_csv(mode, &rows))?);
        let manifest = ctx.finish(m, &format!("ablate-{mode}"))?;
        out.push(AblationReport {
            mode,
            rows,
            table,
            manifest,
        });
    }
    Ok(out)
}
