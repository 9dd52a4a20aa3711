// SPDX-License-Identifier: MIT OR Apache-2.0

use rotatelab::synthbench::{consistency_experiment, plant, PlantSpec};
use rotatelab::{NeuronId, Role, RotateConfig, WeightVector};

use crate::args::MatchArgs;
use crate::output;

pub fn run(args: MatchArgs) -> anyhow::Result<()> {
    let config = args.config.resolve(RotateConfig::default())?;
    let (w, unembedding, glitch) = match &args.bundle {
        Some(dir) => {
            let bundle = output::open_bundle(dir)?;
            let role = Role::from(args.role);
            let layer = args.layer.expect("clap enforces --layer with --bundle");
            output::check_layer(&bundle, layer, role)?;
            let glitch = output::glitch_ids(&bundle, None)?;
            let w = bundle.neuron(layer, role, args.neuron)?;
            (w, bundle.unembedding, glitch)
        }
        None => {
            let (planted, u) = plant(&PlantSpec::standard(args.plant_seed))?;
            let id = NeuronId {
                layer: 0,
                role: Role::Gate,
                index: 0,
            };
            (WeightVector { id, values: planted.w }, u, Vec::new())
        }
    };

    let report = consistency_experiment(&w, &unembedding, &config, &glitch, &args.seeds, args.topk)?;
    let mut out = output::csv_writer(&args.out)?;
    out.write_record(["seed_a", "seed_b", "channel_a", "channel_b", "cosine", "topk_jaccard"])?;
    for (i, j, m) in &report.pairs {
        println!(
            "seeds {} vs {}: {} pairs, mean cosine {:.4}, mean jaccard {:.4}",
            report.seeds[*i],
            report.seeds[*j],
            m.pairs.len(),
            m.mean_cosine,
            m.mean_jaccard
        );
        for p in &m.pairs {
            out.write_record([
                report.seeds[*i].to_string(),
                report.seeds[*j].to_string(),
                p.a.to_string(),
                p.b.to_string(),
                p.cosine.to_string(),
                p.topk_jaccard.to_string(),
            ])?;
        }
    }
    out.flush()?;
    println!(
        "neuron {}: mean cosine {:.4}, mean top-{} jaccard {:.4}",
        w.id, report.mean_cosine, args.topk, report.mean_jaccard
    );
    Ok(())
}
