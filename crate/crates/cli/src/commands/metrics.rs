use serde::Serialize;

use nucdiff_core::metrics::{extract_roi, gcnr, ks_statistic};
use nucdiff_core::{CasoratiMatrix, RoiLabel, RoiMask};

use crate::args::MetricsArgs;
use crate::commands::{read_mask, read_video};
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, RunOutputs};
use crate::plot::{LinePlot, Series};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameMetrics {
    /// Ventricle against septum on the denoised frame.
    pub gcnr: f64,
    /// Septum of the original against septum of the denoised frame.
    pub ks: f64,
}

pub fn frame_metrics(
    original: &CasoratiMatrix,
    denoised: &CasoratiMatrix,
    ventricle: &RoiMask,
    septum: &RoiMask,
    bins: usize,
) -> Result<Vec<FrameMetrics>> {
    if !original.same_shape(denoised) {
        return Err(CliError::Input(format!(
            "original is {}x{}, denoised is {}x{}",
            original.n(),
            original.p(),
            denoised.n(),
            denoised.p()
        )));
    }
    (0..original.p())
        .map(|t| {
            let (orig, den) = (original.frame(t), denoised.frame(t));
            let sep = extract_roi(&den, septum)?;
            let g = gcnr(&extract_roi(&den, ventricle)?, &sep, bins)?;
            let ks = ks_statistic(&extract_roi(&orig, septum)?, &sep)?;
            Ok(FrameMetrics { gcnr: g.value, ks })
        })
        .collect::<nucdiff_core::Result<Vec<_>>>()
        .map_err(CliError::from)
}

pub fn mean_metrics(rows: &[FrameMetrics]) -> FrameMetrics {
    let n = rows.len() as f64;
    FrameMetrics {
        gcnr: rows.iter().map(|r| r.gcnr).sum::<f64>() / n,
        ks: rows.iter().map(|r| r.ks).sum::<f64>() / n,
    }
}

#[derive(Debug, Serialize)]
struct Row {
    metric: &'static str,
    frame: String,
    value: f64,
}

#[derive(Serialize)]
struct Echo {
    bins: usize,
    plot: bool,
}

pub fn run(args: &MetricsArgs) -> Result<RunManifest> {
    if args.bins < 2 {
        return Err(CliError::Usage(format!("--bins must be at least 2, got {}", args.bins)));
    }
    let mut outputs = RunOutputs::create(&args.out)?;
    let original = read_video(&args.original, &mut outputs)?;
    let denoised = read_video(&args.denoised, &mut outputs)?;
    let ventricle = read_mask(&args.ventricle, RoiLabel::Ventricle, &mut outputs)?;
    let septum = read_mask(&args.septum, RoiLabel::Septum, &mut outputs)?;

    let per_frame = frame_metrics(&original, &denoised, &ventricle, &septum, args.bins)?;
    let mean = mean_metrics(&per_frame);
    let mut rows = Vec::with_capacity(2 * per_frame.len() + 2);
    for (t, m) in per_frame.iter().enumerate() {
        rows.push(Row { metric: "gcnr", frame: t.to_string(), value: m.gcnr });
        rows.push(Row { metric: "ks", frame: t.to_string(), value: m.ks });
    }
    rows.push(Row { metric: "gcnr", frame: "mean".into(), value: mean.gcnr });
    rows.push(Row { metric: "ks", frame: "mean".into(), value: mean.ks });
    outputs.write_csv("metrics.csv", &rows)?;

    if args.plot {
        let series = |name: &str, f: fn(&FrameMetrics) -> f64| Series {
            name: name.into(),
            points: per_frame.iter().enumerate().map(|(t, m)| (t as f64, f(m))).collect(),
        };
        let plot = LinePlot {
            title: "Per-frame metrics".into(),
            x_label: "frame".into(),
            y_label: "value".into(),
            series: vec![series("gCNR", |m| m.gcnr), series("KS (septum)", |m| m.ks)],
        };
        outputs.write("metrics.svg", plot.render().as_bytes())?;
    }
    outputs.finish(
        "metrics",
        &Echo {
            bins: args.bins,
            plot: args.plot,
        },
        None,
    )
}
