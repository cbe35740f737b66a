//! Loss-variant and γ sweeps over the full pipeline.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{csv_error, GazeSample};
use crate::error::Result;
use crate::losses::LossVariant;
use crate::train::run_pipeline;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationAxis {
    #[value(name = "loss_variant", alias = "loss-variant")]
    LossVariant,
    Gamma,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub mae_deg: f64,
}

/// The settings visited along `axis`, as (label, config) pairs.
pub fn grid(cfg: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    match axis {
        AblationAxis::LossVariant => LossVariant::ALL
            .iter()
            .map(|&v| {
                let mut c = cfg.clone();
                c.loss_variant = v;
                (v.name().to_string(), c)
            })
            .collect(),
        AblationAxis::Gamma => cfg
            .ablation_gammas
            .iter()
            .map(|&gamma| {
                let mut c = cfg.clone();
                c.loss_variant = LossVariant::Combined;
                c.gamma = gamma;
                (format!("gamma={gamma}"), c)
            })
            .collect(),
    }
}

/// One full pipeline run per grid point and seed. Each seed sets both the
/// model and the training seed; data and split stay fixed.
pub fn run_ablation(
    train: &[GazeSample],
    test: &[GazeSample],
    cfg: &RunConfig,
    axis: AblationAxis,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (variant, base) in grid(cfg, axis) {
        for &seed in &cfg.ablation_seeds {
            let mut c = base.clone();
            c.model_seed = seed;
            c.train_seed = seed;
            c.scratch = false;
            let run = run_pipeline(train, test, &c)?;
            log::info!("{variant} seed {seed}: MAE {:.4} deg", run.mae_deg);
            rows.push(AblationRow {
                variant: variant.clone(),
                seed,
                mae_deg: run.mae_deg,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// Aligned text table with one row per run and a median per setting.
pub fn format_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max("variant".len());
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>6}  {:>10}", "variant", "seed", "MAE (deg)");
    for r in rows {
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>10.4}", r.variant, r.seed, r.mae_deg);
    }
    for (variant, median) in medians(rows) {
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>10.4}", variant, "median", median);
    }
    s
}

/// Median MAE per setting, in first-appearance order.
pub fn medians(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant) {
            order.push(r.variant.clone());
        }
    }
    order
        .into_iter()
        .map(|v| {
            let mut xs: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.mae_deg).collect();
            xs.sort_by(f64::total_cmp);
            let n = xs.len();
            let m = if n % 2 == 1 { xs[n / 2] } else { (xs[n / 2 - 1] + xs[n / 2]) / 2.0 };
            (v, m)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trend {
    /// Error falls as γ grows.
    Decreasing,
    Increasing,
    NonMonotonic,
}

/// Direction of median MAE as γ increases, over rows labelled `gamma=<value>`.
pub fn gamma_trend(rows: &[AblationRow]) -> Option<Trend> {
    let mut points: Vec<(f64, f64)> = medians(rows)
        .into_iter()
        .filter_map(|(v, m)| v.strip_prefix("gamma=")?.parse::<f64>().ok().map(|g| (g, m)))
        .collect();
    if points.len() < 2 {
        return None;
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let steps: Vec<f64> = points.windows(2).map(|w| w[1].1 - w[0].1).collect();
    Some(if steps.iter().all(|&d| d < 0.0) {
        Trend::Decreasing
    } else if steps.iter().all(|&d| d > 0.0) {
        Trend::Increasing
    } else {
        Trend::NonMonotonic
    })
}
