// SPDX-License-Identifier: MIT OR Apache-2.0

use rotatelab::channels::{explained_norm_curve, per_channel_cosine, quantile_sorted};
use rotatelab::modelio::read_archive;

use crate::args::ReconstructArgs;
use crate::error::UsageError;
use crate::output::{self, num, Series};

/// Per-neuron curves: explained norm after each channel and each channel's cosine with w.
struct Curves {
    explained: Vec<f64>,
    cosine: Vec<f64>,
}

fn quartiles(mut xs: Vec<f64>) -> [Option<f64>; 3] {
    xs.sort_by(f64::total_cmp);
    [0.25, 0.5, 0.75].map(|q| quantile_sorted(&xs, q))
}

pub fn run(args: ReconstructArgs) -> anyhow::Result<()> {
    let archive = read_archive(&args.archive)?;
    let bundle = output::open_bundle(&args.bundle)?;

    let mut curves = Vec::with_capacity(archive.records.len());
    for d in &archive.records {
        let id = d.neuron;
        output::check_layer(&bundle, id.layer, id.role)?;
        let w = bundle
            .neuron(id.layer, id.role, id.index)
            .map_err(|e| UsageError(format!("archived neuron {id} not in bundle: {e}")))?;
        if let Some(c) = d.channels.iter().find(|c| c.v.len() != w.values.len()) {
            return Err(UsageError(format!(
                "neuron {id}: archived channel has dimension {}, bundle has {}",
                c.v.len(),
                w.values.len()
            ))
            .into());
        }
        let vs = d.channel_vectors();
        curves.push(Curves {
            explained: explained_norm_curve(&w.values, &vs)?,
            cosine: vs
                .iter()
                .map(|v| per_channel_cosine(&w.values, v))
                .collect::<rotatelab::Result<_>>()?,
        });
    }

    let depth = curves.iter().map(|c| c.explained.len()).max().unwrap_or(0);
    let mut out = output::csv_writer(&args.out)?;
    out.write_record([
        "iteration",
        "neurons",
        "explained_q1",
        "explained_median",
        "explained_q3",
        "cosine_q1",
        "cosine_median",
        "cosine_q3",
    ])?;
    let mut median_en = Vec::new();
    let mut median_cos = Vec::new();
    for t in 0..depth {
        // A neuron that stopped early keeps its final explained norm.
        let en: Vec<f64> = curves
            .iter()
            .filter_map(|c| c.explained.get(t).or(c.explained.last()).copied())
            .collect();
        let cos: Vec<f64> = curves.iter().filter_map(|c| c.cosine.get(t).copied()).collect();
        let active = cos.len();
        let [e1, e2, e3] = quartiles(en);
        let [c1, c2, c3] = quartiles(cos);
        out.write_record([
            (t + 1).to_string(),
            active.to_string(),
            num(e1),
            num(e2),
            num(e3),
            num(c1),
            num(c2),
            num(c3),
        ])?;
        let x = (t + 1) as f64;
        median_en.extend(e2.map(|y| (x, y)));
        median_cos.extend(c2.map(|y| (x, y)));
    }
    out.flush()?;

    if let Some(svg) = &args.svg {
        let chart = output::line_chart(
            "Reconstruction",
            "channels",
            "median",
            &[
                Series {
                    name: "explained norm",
                    points: median_en.clone(),
                },
                Series {
                    name: "cos(v, w)",
                    points: median_cos,
                },
            ],
        );
        output::write_svg(svg, &chart)?;
    }
    match median_en.last() {
        Some(&(_, y)) => println!(
            "{} neurons, {depth} iterations; median explained norm {y:.4}",
            curves.len()
        ),
        None => println!("empty archive; wrote header only"),
    }
    Ok(())
}
