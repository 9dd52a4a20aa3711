// SPDX-License-Identifier: MIT OR Apache-2.0

use anyhow::{bail, Context};
use rotatelab::modelio::ArchiveWriter;
use rotatelab::rotate::decompose_batch;
use rotatelab::{ArchiveHeader, Role, RotateConfig, WeightVector};

use crate::args::DecomposeArgs;
use crate::output::{self, num};

pub fn run(args: DecomposeArgs, jobs: usize) -> anyhow::Result<()> {
    let config = args.config.resolve(RotateConfig::default())?;
    let bundle = output::open_bundle(&args.bundle)?;
    let role = Role::from(args.role);
    let count = output::check_layer(&bundle, args.layer, role)?;
    let glitch = output::glitch_ids(&bundle, args.glitch.as_deref())?;
    let indices = output::select_neurons(&args.neurons, count, config.seed)?;
    log::info!(
        "decomposing {} of {count} neurons in layer {} ({role}) with {jobs} workers",
        indices.len(),
        args.layer
    );

    let header = ArchiveHeader::new(bundle.model_id.clone(), Some(args.layer), Some(role), config);
    let mut writer = ArchiveWriter::create(&args.out, &header, Some(&bundle.vocab))?;
    let mut summary = args.summary.as_deref().map(output::csv_writer).transpose()?;
    if let Some(s) = summary.as_mut() {
        s.write_record([
            "neuron",
            "channels",
            "explained_norm",
            "span_explained_norm",
            "orthogonality",
            "stop",
        ])?;
    }

    let (mut done, mut failed) = (0usize, 0usize);
    // Chunks keep memory bounded and let the archive grow while the run is in progress.
    for chunk in indices.chunks(jobs.max(1) * 4) {
        let neurons: Vec<WeightVector> = chunk
            .iter()
            .map(|&i| bundle.neuron(args.layer, role, i))
            .collect::<rotatelab::Result<_>>()?;
        let outcome = decompose_batch(&neurons, &bundle.unembedding, &config, &glitch, jobs)?;
        for f in &outcome.failures {
            eprintln!("warning: neuron {} skipped: {}", f.neuron, f.error);
        }
        failed += outcome.failures.len();
        for d in &outcome.decompositions {
            writer.append(d)?;
            let orth = d.orthogonality();
            println!(
                "{}  channels={:<3} explained_norm={:.4} orthogonality={}",
                d.neuron,
                d.channels.len(),
                d.explained_norm(),
                orth.map_or_else(|| "n/a".to_string(), |o| format!("{o:.4}"))
            );
            if let Some(s) = summary.as_mut() {
                let span = d.reconstruction.last().map(|p| p.span_explained_norm);
                s.write_record([
                    d.neuron.to_string(),
                    d.channels.len().to_string(),
                    d.explained_norm().to_string(),
                    num(span),
                    num(orth),
                    serde_json::to_value(d.stop)?.as_str().unwrap_or_default().to_string(),
                ])?;
            }
        }
        done += outcome.decompositions.len();
    }
    writer.finish()?;
    if let Some(mut s) = summary {
        s.flush().context("flushing summary")?;
    }
    eprintln!("{done} decomposed, {failed} failed; archive {}", args.out.display());
    if done == 0 {
        bail!("every selected neuron failed");
    }
    Ok(())
}
