use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    average_gradient, fmi_wt, msssim_pair, q_abf, q_w, scd, spatial_frequency, standard_deviation,
    viff,
};
use crate::error::{Error, Result};
use crate::imaging::{same_dims, GrayImage, SourceImage};

/// Column order of every results table.
pub const METRIC_NAMES: [&str; 9] = [
    "SF", "SD", "AG", "Q_W", "SCD", "VIFF", "Q_AB/F", "MSSSIM", "FMI_WT",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pair_id: String,
    pub sf: f64,
    pub sd: f64,
    pub ag: f64,
    pub q_w: f64,
    pub scd: f64,
    pub viff: f64,
    pub q_abf: f64,
    pub msssim: f64,
    pub fmi_wt: f64,
}

impl MetricReport {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 9] {
        [
            self.sf,
            self.sd,
            self.ag,
            self.q_w,
            self.scd,
            self.viff,
            self.q_abf,
            self.msssim,
            self.fmi_wt,
        ]
    }

    fn from_values(pair_id: String, v: [f64; 9]) -> Self {
        Self {
            pair_id,
            sf: v[0],
            sd: v[1],
            ag: v[2],
            q_w: v[3],
            scd: v[4],
            viff: v[5],
            q_abf: v[6],
            msssim: v[7],
            fmi_wt: v[8],
        }
    }
}

/// All nine metrics on luma. Color sources and outputs are reduced to luma.
pub fn evaluate_pair(
    pair_id: &str,
    a: &GrayImage,
    b: &SourceImage,
    f: &SourceImage,
) -> Result<MetricReport> {
    let b = b.luma();
    let f = f.luma();
    same_dims(a, &b)?;
    same_dims(a, &f)?;
    let report = MetricReport {
        pair_id: pair_id.to_string(),
        sf: spatial_frequency(&f)?,
        sd: standard_deviation(&f),
        ag: average_gradient(&f)?,
        q_w: q_w(a, &b, &f)?,
        scd: scd(a, &b, &f)?,
        viff: viff(a, &b, &f)?,
        q_abf: q_abf(a, &b, &f)?,
        msssim: msssim_pair(a, &b, &f)?,
        fmi_wt: fmi_wt(a, &b, &f)?,
    };
    if report.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("metric of pair {pair_id}"),
        });
    }
    Ok(report)
}

/// One pair to score.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub a: GrayImage,
    pub b: SourceImage,
    pub fused: SourceImage,
}

/// Score many pairs on up to `threads` workers; results keep input order.
pub fn evaluate_batch(items: &[EvalItem], threads: usize) -> Result<Vec<MetricReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        items
            .par_iter()
            .map(|it| evaluate_pair(&it.id, &it.a, &it.b, &it.fused))
            .collect()
    })
}

/// Arithmetic mean of reports, summed in input order.
pub fn mean_report(label: &str, reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::EmptyDataset("no reports to average".into()));
    }
    let mut acc = [0.0; 9];
    for r in reports {
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += v;
        }
    }
    let n = reports.len() as f64;
    Ok(MetricReport::from_values(
        label.to_string(),
        acc.map(|s| s / n),
    ))
}

/// Per-pair CSV followed by the mean row.
pub fn format_csv(reports: &[MetricReport]) -> Result<String> {
    let mut out = format!("pair_id,{}\n", METRIC_NAMES.join(","));
    for r in reports {
        out.push_str(&csv_row(r));
    }
    out.push_str(&csv_row(&mean_report("mean", reports)?));
    Ok(out)
}

fn csv_row(r: &MetricReport) -> String {
    let vals: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
    format!("{},{}\n", r.pair_id, vals.join(","))
}

/// A labelled table row with optional leading columns (e.g. parameter count).
#[derive(Clone, Debug)]
pub struct TableRow {
    pub label: String,
    pub extra: Vec<String>,
    pub report: MetricReport,
}

/// Fixed-width text table; the best value of each metric column is starred.
pub fn format_table(title: &str, extra_headers: &[&str], rows: &[TableRow]) -> String {
    let label_w = rows
        .iter()
        .map(|r| r.label.len())
        .chain([6])
        .max()
        .unwrap_or(6);
    let mut best = [f64::NEG_INFINITY; 9];
    for r in rows {
        for (b, v) in best.iter_mut().zip(r.report.values()) {
            *b = b.max(v);
        }
    }
    let mut out = format!("{title}\n");
    out.push_str(&format!("{:<label_w$}", "Method"));
    for h in extra_headers {
        out.push_str(&format!(" {h:>12}"));
    }
    for name in METRIC_NAMES {
        out.push_str(&format!(" {name:>10}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<label_w$}", r.label));
        for e in &r.extra {
            out.push_str(&format!(" {e:>12}"));
        }
        for (v, b) in r.report.values().iter().zip(best) {
            let mark = if rows.len() > 1 && *v == b { "*" } else { " " };
            out.push_str(&format!(" {:>9.4}{mark}", v));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::testutil::{rand_img, structured};
    use crate::rng::SeededRng;

    #[test]
    fn identity_battery() {
        let x = structured(1, 64);
        let r = evaluate_pair(
            "id",
            &x,
            &SourceImage::Gray(x.clone()),
            &SourceImage::Gray(x.clone()),
        )
        .unwrap();
        assert!((r.msssim - 1.0).abs() < 1e-6);
        assert!((r.q_w - 1.0).abs() < 1e-9);
        assert!((r.viff - 1.0).abs() < 1e-6);
        assert_eq!(r.scd, 0.0);
    }

    #[test]
    fn batch_mean_and_order() {
        let mut rng = SeededRng::new(2);
        let items: Vec<EvalItem> = (0..4)
            .map(|i| EvalItem {
                id: format!("p{i}"),
                a: rand_img(&mut rng, 32, 32),
                b: SourceImage::Gray(rand_img(&mut rng, 32, 32)),
                fused: SourceImage::Gray(rand_img(&mut rng, 32, 32)),
            })
            .collect();
        let par = evaluate_batch(&items, 3).unwrap();
        let seq = evaluate_batch(&items, 1).unwrap();
        assert_eq!(par, seq);
        assert_eq!(
            par.iter().map(|r| r.pair_id.as_str()).collect::<Vec<_>>(),
            ["p0", "p1", "p2", "p3"]
        );
        let m = mean_report("mean", &par).unwrap();
        for k in 0..9 {
            let want = par.iter().map(|r| r.values()[k]).sum::<f64>() / 4.0;
            assert!((m.values()[k] - want).abs() < 1e-12);
        }
        let csv = format_csv(&par).unwrap();
        assert!(csv.starts_with("pair_id,SF,SD,AG,Q_W,SCD,VIFF,Q_AB/F,MSSSIM,FMI_WT\n"));
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
        assert!(mean_report("m", &[]).is_err());
    }

    #[test]
    fn table_layout() {
        let mut rng = SeededRng::new(3);
        let a = rand_img(&mut rng, 32, 32);
        let r1 = evaluate_pair(
            "x",
            &a,
            &SourceImage::Gray(a.clone()),
            &SourceImage::Gray(a.clone()),
        )
        .unwrap();
        let r2 = evaluate_pair(
            "y",
            &a,
            &SourceImage::Gray(rand_img(&mut rng, 32, 32)),
            &SourceImage::Gray(a.clone()),
        )
        .unwrap();
        let rows = vec![
            TableRow {
                label: "full".into(),
                extra: vec!["100".into()],
                report: r1,
            },
            TableRow {
                label: "w/o AMFF".into(),
                extra: vec!["80".into()],
                report: r2,
            },
        ];
        let t = format_table("Ablation", &["Params"], &rows);
        let header = t.lines().nth(1).unwrap();
        let pos: Vec<usize> = METRIC_NAMES
            .iter()
            .map(|n| header.find(n).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(header.find("Params").unwrap() < pos[0]);
        assert!(t.contains('*'));
    }
}
