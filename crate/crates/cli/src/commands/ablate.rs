// SPDX-License-Identifier: MIT OR Apache-2.0

use anyhow::Context;
use rotatelab::channels::ablate;
use rotatelab::linstats::{dot, norm};
use rotatelab::modelio::read_archive;

use crate::args::AblateArgs;
use crate::error::UsageError;
use crate::output;

pub fn run(args: AblateArgs) -> anyhow::Result<()> {
    let archive = read_archive(&args.archive)?;
    let record = archive
        .records
        .iter()
        .find(|d| d.neuron.index == args.neuron)
        .ok_or_else(|| UsageError(format!("neuron {} is not in {}", args.neuron, args.archive.display())))?;
    let channel = record.channels.get(args.channel).ok_or_else(|| {
        UsageError(format!(
            "neuron {} has {} channels; --channel {} is out of range",
            record.neuron,
            record.channels.len(),
            args.channel
        ))
    })?;
    let bundle = output::open_bundle(&args.bundle)?;
    let id = record.neuron;
    output::check_layer(&bundle, id.layer, id.role)?;
    let w = bundle.neuron(id.layer, id.role, id.index)?.values;
    if w.len() != channel.v.len() {
        return Err(UsageError(format!(
            "archived channel has dimension {}, bundle has {}",
            channel.v.len(),
            w.len()
        ))
        .into());
    }

    let ablated = ablate(&w, &channel.v, args.mode.into())?;
    let v_norm = norm(&channel.v);
    let unit: Vec<f64> = channel.v.iter().map(|x| x / v_norm).collect();
    println!("neuron {id} channel {}", args.channel);
    println!("dot before: {:.6e}", dot(&w, &unit));
    println!("dot after:  {:.6e}", dot(&ablated, &unit));
    println!("norm ratio: {:.6}", norm(&ablated) / norm(&w));
    if let Some(path) = &args.out {
        let json = serde_json::to_string(&ablated)?;
        std::fs::write(path, json + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}
