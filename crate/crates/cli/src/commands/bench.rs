// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;
use rotatelab::modelio::ArchiveWriter;
use rotatelab::rotate::decompose;
use rotatelab::synthbench::{plant, recovery_score, DirectionRecovery, PlantSpec};
use rotatelab::{ArchiveHeader, Decomposition, NeuronId, Role, RotateConfig, Vocab, WeightVector};

use crate::args::BenchArgs;
use crate::error::UsageError;
use crate::output;

pub fn run(args: BenchArgs) -> anyhow::Result<()> {
    let config = args.config.resolve(RotateConfig::default())?;
    if args.plant_seeds.is_empty() {
        return Err(UsageError("--plant-seeds is empty".into()).into());
    }
    let runs: Vec<(u64, Decomposition, Vec<DirectionRecovery>)> = args
        .plant_seeds
        .par_iter()
        .enumerate()
        .map(|(position, &seed)| -> anyhow::Result<_> {
            let spec = PlantSpec::new(args.d, args.vocab_size, args.k, args.sparsity, args.noise, seed);
            let (planted, u) = plant(&spec).map_err(|e| UsageError(format!("planted instance: {e}")))?;
            let id = NeuronId {
                layer: 0,
                role: Role::Gate,
                index: position as u32,
            };
            let d = decompose(&WeightVector { id, values: planted.w.clone() }, &u, &config, &[])?;
            let rec = recovery_score(&d, &planted)?;
            Ok((seed, d, rec))
        })
        .collect::<anyhow::Result<_>>()?;

    let mut out = output::csv_writer(&args.out)?;
    out.write_record([
        "plant_seed",
        "direction",
        "best_channel",
        "abs_cosine",
        "support_jaccard",
        "explained_norm",
    ])?;
    for (seed, d, rec) in &runs {
        for r in rec {
            out.write_record([
                seed.to_string(),
                r.direction.to_string(),
                r.best_channel.to_string(),
                r.abs_cosine.to_string(),
                r.support_jaccard.to_string(),
                d.explained_norm().to_string(),
            ])?;
        }
        let min_cos = rec.iter().map(|r| r.abs_cosine).fold(f64::INFINITY, f64::min);
        let mean_j = rec.iter().map(|r| r.support_jaccard).sum::<f64>() / rec.len() as f64;
        println!(
            "plant seed {seed}: {} channels, min |cos| {min_cos:.4}, mean support jaccard {mean_j:.4}, explained norm {:.4}",
            d.channels.len(),
            d.explained_norm()
        );
    }
    out.flush()?;

    if let Some(path) = &args.archive {
        let header = ArchiveHeader::new("planted", None, None, config);
        let vocab = Vocab::synthetic(args.vocab_size);
        let mut writer = ArchiveWriter::create(path, &header, Some(&vocab))?;
        for (_, d, _) in &runs {
            writer.append(d)?;
        }
        writer.finish()?;
    }
    Ok(())
}
