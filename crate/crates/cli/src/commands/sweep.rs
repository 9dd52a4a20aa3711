// SPDX-License-Identifier: MIT OR Apache-2.0

use rotatelab::synthbench::{plant, rank, sweep, PlantSpec, SweepGrid, SweepResult, SWEEP_N_STEP};
use rotatelab::{NeuronId, Role, RotateConfig, WeightVector};

use crate::args::SweepArgs;
use crate::error::UsageError;
use crate::output;

pub fn run(args: SweepArgs) -> anyhow::Result<()> {
    let base = RotateConfig {
        n_step: SWEEP_N_STEP,
        ..RotateConfig::default()
    };
    let config = args.config.resolve(base)?;
    let grid = SweepGrid {
        lambdas: args.lambdas.clone(),
        etas: args.etas.clone(),
        k_sigmas: args.k_sigmas.clone(),
    };
    let points = grid.points();
    if points.is_empty() {
        return Err(UsageError("empty grid".into()).into());
    }
    for p in &points {
        RotateConfig {
            lambda: p.lambda,
            eta: p.eta,
            k_sigma: p.k_sigma,
            ..config
        }
        .validate()?;
    }

    // Per grid point: summed scores and how many instances contributed.
    let mut totals = vec![(0.0, 0.0, 0usize); points.len()];
    let mut failed = vec![None; points.len()];
    let mut absorb = |outcome: rotatelab::synthbench::SweepOutcome| {
        for r in outcome.ranked {
            let i = points.iter().position(|p| *p == r.point).expect("grid point");
            totals[i].0 += r.explained_norm;
            totals[i].1 += r.orthogonality;
            totals[i].2 += 1;
        }
        for (p, e) in outcome.failed {
            let i = points.iter().position(|q| *q == p).expect("grid point");
            failed[i].get_or_insert(e.to_string());
        }
    };
    let instances = match &args.bundle {
        Some(dir) => {
            let bundle = output::open_bundle(dir)?;
            let role = Role::from(args.role);
            let layer = args.layer.expect("clap enforces --layer with --bundle");
            let count = output::check_layer(&bundle, layer, role)?;
            let glitch = output::glitch_ids(&bundle, None)?;
            let neurons: Vec<WeightVector> = output::select_neurons(&args.neurons, count, config.seed)?
                .into_iter()
                .map(|i| bundle.neuron(layer, role, i))
                .collect::<rotatelab::Result<_>>()?;
            absorb(sweep(&neurons, &bundle.unembedding, &grid, &config, &glitch)?);
            1
        }
        None => {
            if args.plant_seeds.is_empty() {
                return Err(UsageError("--plant-seeds is empty".into()).into());
            }
            for &seed in &args.plant_seeds {
                let (planted, u) = plant(&PlantSpec::standard(seed))?;
                let id = NeuronId {
                    layer: 0,
                    role: Role::Gate,
                    index: 0,
                };
                absorb(sweep(&[WeightVector { id, values: planted.w }], &u, &grid, &config, &[])?);
            }
            args.plant_seeds.len()
        }
    };

    let mut results = Vec::new();
    for (i, p) in points.iter().enumerate() {
        match &failed[i] {
            Some(reason) => eprintln!(
                "warning: lambda={} eta={} k_sigma={} dropped: {reason}",
                p.lambda, p.eta, p.k_sigma
            ),
            None => {
                let (en, orth, n) = totals[i];
                debug_assert_eq!(n, instances);
                results.push(SweepResult::new(*p, en / n as f64, orth / n as f64));
            }
        }
    }
    let ranked = rank(results);

    let mut out = output::csv_writer(&args.out)?;
    out.write_record(["rank", "lambda", "eta", "k_sigma", "explained_norm", "orthogonality", "harmonic_mean"])?;
    for (r, res) in ranked.iter().enumerate() {
        out.write_record([
            (r + 1).to_string(),
            res.point.lambda.to_string(),
            res.point.eta.to_string(),
            res.point.k_sigma.to_string(),
            res.explained_norm.to_string(),
            res.orthogonality.to_string(),
            res.harmonic_mean.to_string(),
        ])?;
    }
    out.flush()?;
    match ranked.first() {
        Some(b) => println!(
            "best: lambda={} eta={} k_sigma={} harmonic_mean={:.4} (explained {:.4}, orthogonality {:.4})",
            b.point.lambda, b.point.eta, b.point.k_sigma, b.harmonic_mean, b.explained_norm, b.orthogonality
        ),
        None => anyhow::bail!("every grid point failed"),
    }
    Ok(())
}
