// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rotatelab::modelio::{self, load_bundle};
use rotatelab::{ModelBundle, Role};

use crate::args::NeuronSelector;
use crate::error::UsageError;

pub fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))
}

/// Shortest string that round-trips; empty for missing values.
pub fn num(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

pub fn open_bundle(dir: &Path) -> anyhow::Result<ModelBundle> {
    load_bundle(dir).with_context(|| format!("loading bundle {}", dir.display()))
}

/// Fail with the valid range when `layer` has no `role` matrix.
pub fn check_layer(bundle: &ModelBundle, layer: u32, role: Role) -> anyhow::Result<usize> {
    if let Ok(n) = bundle.neuron_count(layer, role) {
        return Ok(n);
    }
    let layers = bundle.layers();
    let range = match (layers.first(), layers.last()) {
        (Some(a), Some(b)) => format!("{a}..={b}"),
        _ => "none".to_string(),
    };
    Err(UsageError(format!("layer {layer} has no {role} weights (bundle layers: {range})")).into())
}

/// The bundle's glitch list plus an optional extra file, sorted and deduplicated.
pub fn glitch_ids(bundle: &ModelBundle, extra: Option<&Path>) -> anyhow::Result<Vec<usize>> {
    let mut ids = bundle.glitch_ids.clone();
    if let Some(path) = extra {
        ids.extend(modelio::load_glitch_list(path)?);
    }
    ids.sort_unstable();
    ids.dedup();
    if let Some(&bad) = ids.iter().find(|&&id| id >= bundle.vocab_size()) {
        return Err(UsageError(format!(
            "glitch token id {bad} out of range for vocabulary of size {}",
            bundle.vocab_size()
        ))
        .into());
    }
    Ok(ids)
}

/// Resolve a selector against `count` neurons; random samples are sorted.
pub fn select_neurons(selector: &NeuronSelector, count: usize, seed: u64) -> anyhow::Result<Vec<u32>> {
    let out: Vec<u32> = match selector {
        NeuronSelector::All => (0..count as u32).collect(),
        NeuronSelector::Random(n) => {
            if *n > count {
                return Err(UsageError(format!("cannot sample {n} of {count} neurons")).into());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<u32> = rand::seq::index::sample(&mut rng, count, *n)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            picked.sort_unstable();
            picked
        }
        NeuronSelector::Indices(ids) => {
            if let Some(&bad) = ids.iter().find(|&&i| i as usize >= count) {
                return Err(UsageError(format!("neuron {bad} out of range (0..{count})")).into());
            }
            ids.clone()
        }
    };
    if out.is_empty() {
        return Err(UsageError("no neurons selected".into()).into());
    }
    Ok(out)
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Minimal standalone SVG line chart.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 150.0, 36.0, 48.0);
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = f64::from(i) / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            w - right + 10.0,
            w - right + 30.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - right + 36.0, ly + 4.0, escape(ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_svg(path: &Path, svg: &str) -> anyhow::Result<()> {
    std::fs::write(path, svg).with_context(|| format!("cannot write {}", path.display()))
}
