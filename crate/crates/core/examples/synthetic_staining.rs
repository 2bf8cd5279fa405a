//! Trains the desk-scale network on the default synthetic cohort, then
//! reports leave-one-marker-out error against a per-marker mean predictor
//! and the calibration of the predicted variance.
//!
//!     cargo run --release --example synthetic_staining -- [seed]

use std::collections::BTreeMap;
use std::time::Instant;

use mxvis::data::Dataset;
use mxvis::eval::{masked_modeling_eval, uncertainty_correlation, virtual_stain_loo, ChannelMeanModel};
use mxvis::rng::stream;
use mxvis::synth::{generate_cohort, CohortSpec};
use mxvis::trainer::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let spec = CohortSpec::default();
    let cohort = generate_cohort(&spec, seed)?;
    let data = Dataset::new(
        spec.vocab()?,
        spec.manifest().panel_sets()?,
        cohort.iter().map(|(_, img, _)| img.clone()).collect(),
        cohort.iter().map(|(name, _, _)| name.clone()).collect(),
    )?;

    let cfg = TrainConfig { seed, ..TrainConfig::desk() };
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone(), data.vocab.clone())?;
    trainer.run(&data)?;
    println!("trained {} epochs in {:.0}s", cfg.epochs, start.elapsed().as_secs_f64());
    let net = trainer.network();

    let baseline = ChannelMeanModel::fit(&data)?;
    let mut totals: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for (name, img, truth) in &cohort {
        let rows = virtual_stain_loo(net, img, name, Some(&truth.clean))?;
        let base_rows = virtual_stain_loo(&baseline, img, name, Some(&truth.clean))?;
        for (r, b) in rows.iter().zip(&base_rows) {
            let t = totals.entry(r.marker.clone()).or_default();
            t.0 += r.mse;
            t.1 += b.mse;
        }
    }
    println!("{:<6} {:>10} {:>10} {:>6}", "marker", "model", "baseline", "ratio");
    for (marker, (model, base)) in &totals {
        println!("{marker:<6} {model:>10.4} {base:>10.4} {:>6.3}", model / base);
    }

    let mut rows = Vec::new();
    for (i, (name, img, _)) in cohort.iter().enumerate() {
        rows.extend(masked_modeling_eval(net, img, name, None, &cfg.mask, &mut stream(seed, &[i as u64]))?);
    }
    let cal = uncertainty_correlation(&rows)?;
    println!(
        "uncertainty/error correlation: active {:.3}, masked {:.3}; 95% coverage {:.3}",
        cal.active.r, cal.masked.r, cal.coverage
    );
    Ok(())
}
