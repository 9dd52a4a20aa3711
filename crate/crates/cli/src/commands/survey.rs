// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use anyhow::Context;
use rotatelab::channels::{layer_kurtosis_survey, SurveyReport};
use rotatelab::rotate::init_mask;
use rotatelab::Role;

use crate::args::SurveyArgs;
use crate::error::UsageError;
use crate::output::{self, num, Series};

/// `layer:index` pairs, one per line; blank lines and `#` comments skipped.
fn read_focus(path: &std::path::Path) -> anyhow::Result<Vec<(u32, u32)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = line
            .split_once(':')
            .and_then(|(l, i)| Some((l.trim().parse().ok()?, i.trim().parse().ok()?)));
        out.push(parsed.ok_or_else(|| {
            UsageError(format!("{} line {}: expected layer:index, got {line:?}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

pub fn run(args: SurveyArgs) -> anyhow::Result<()> {
    let bundle = output::open_bundle(&args.bundle)?;
    let role = Role::from(args.role);
    let layers: Vec<u32> = if args.layers.is_empty() {
        bundle
            .layers()
            .into_iter()
            .filter(|&l| bundle.neuron_count(l, role).is_ok())
            .collect()
    } else {
        args.layers.clone()
    };
    if layers.is_empty() {
        return Err(UsageError(format!("bundle has no {role} weights")).into());
    }
    for &l in &layers {
        output::check_layer(&bundle, l, role)?;
    }
    let glitch = output::glitch_ids(&bundle, args.glitch.as_deref())?;
    let mask = init_mask(bundle.vocab_size(), &glitch)?;
    let focus = args.focus.as_deref().map(read_focus).transpose()?;

    let mut out = output::csv_writer(&args.out)?;
    out.write_record(["layer", "neuron", "kurtosis"])?;
    let mut reports = BTreeMap::new();
    for &layer in &layers {
        let rows: Vec<Vec<f64>> = bundle.neurons(layer, role)?.into_iter().map(|w| w.values).collect();
        let report = layer_kurtosis_survey(&rows, &bundle.unembedding, mask.admissible())?;
        for (i, k) in report.kurtosis.iter().enumerate() {
            out.write_record([layer.to_string(), i.to_string(), num(*k)])?;
        }
        if let Some(s) = report.summary() {
            println!(
                "layer {layer:>3}: n={} median={:.3} q1={:.3} q3={:.3} max={:.3}",
                s.count, s.median, s.q1, s.q3, s.max
            );
        }
        reports.insert(layer, report);
    }
    out.flush()?;

    if let Some(path) = &args.summary {
        let mut s = output::csv_writer(path)?;
        s.write_record(["layer", "count", "missing", "min", "q1", "median", "q3", "max"])?;
        for (layer, report) in &reports {
            let q = report.summary();
            let field = |f: fn(&rotatelab::channels::QuantileSummary) -> f64| num(q.as_ref().map(f));
            s.write_record([
                layer.to_string(),
                report.kurtosis.iter().flatten().count().to_string(),
                report.kurtosis.iter().filter(|k| k.is_none()).count().to_string(),
                field(|q| q.min),
                field(|q| q.q1),
                field(|q| q.median),
                field(|q| q.q3),
                field(|q| q.max),
            ])?;
        }
        s.flush()?;
    }

    if let Some(focus) = focus {
        for (layer, index) in focus {
            let report: &SurveyReport = reports
                .get(&layer)
                .ok_or_else(|| UsageError(format!("focus neuron {layer}:{index}: layer {layer} was not surveyed")))?;
            let k = report
                .kurtosis
                .get(index as usize)
                .ok_or_else(|| UsageError(format!("focus neuron {layer}:{index} out of range")))?;
            match k {
                Some(k) => println!(
                    "focus {layer}:{index} kurtosis={k:.3} percentile={:.1}",
                    report.percentile_of(*k).unwrap_or(f64::NAN)
                ),
                None => println!("focus {layer}:{index} kurtosis undefined (zero variance)"),
            }
        }
    }

    if let Some(svg) = &args.svg {
        let curve = |q: f64| -> Vec<(f64, f64)> {
            reports
                .iter()
                .filter_map(|(&l, r)| Some((f64::from(l), r.quantile(q)?)))
                .collect()
        };
        let chart = output::line_chart(
            "Vocabulary kurtosis by layer",
            "layer",
            "excess kurtosis",
            &[
                Series { name: "q3", points: curve(0.75) },
                Series { name: "median", points: curve(0.5) },
                Series { name: "q1", points: curve(0.25) },
            ],
        );
        output::write_svg(svg, &chart)?;
    }
    Ok(())
}
