//! Ablation harness: trains variants A / E / F under a shared seed set and
//! tabulates held-out L1 of the fused output per variant.

use std::time::Instant;

use crate::data::LoadedTriplet;
use crate::generator::{GeneratorConfig, Variant};
use crate::trainer::{TrainOutcome, TrainSettings, Trainer};
use crate::Result;

pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub wall_secs: f64,
}

impl AblationRun {
    pub fn final_l1_fused(&self) -> f64 {
        self.outcome.eval_history.last().map(|e| e.l1_fused).unwrap_or(f64::NAN)
    }

    pub fn final_l1_direct(&self) -> f64 {
        self.outcome.eval_history.last().map(|e| e.l1_direct).unwrap_or(f64::NAN)
    }

    pub fn first_l1_fused(&self) -> f64 {
        self.outcome.eval_history.first().map(|e| e.l1_fused).unwrap_or(f64::NAN)
    }
}

/// Trains one variant from scratch and evaluates it every epoch.
pub fn train_variant(
    train: &[LoadedTriplet],
    test: &[LoadedTriplet],
    base: &GeneratorConfig,
    settings: &TrainSettings,
    variant: Variant,
    seed: u64,
) -> Result<AblationRun> {
    let cfg = GeneratorConfig { seed, ..base.clone() }.with_variant(variant);
    let mut trainer = Trainer::new(cfg, settings.clone())?;
    let started = Instant::now();
    let outcome = trainer.run(train, test, |_, _| Ok(()))?;
    Ok(AblationRun {
        variant,
        seed,
        outcome,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// All variants × all seeds, sequentially.
pub fn run_ablation(
    train: &[LoadedTriplet],
    test: &[LoadedTriplet],
    base: &GeneratorConfig,
    settings: &TrainSettings,
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for variant in [Variant::A, Variant::E, Variant::F] {
            let run = train_variant(train, test, base, settings, variant, seed)?;
            progress(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn median_for(runs: &[AblationRun], variant: Variant) -> f64 {
    let vals: Vec<f64> = runs
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| r.final_l1_fused())
        .collect();
    median(&vals)
}

/// Text table: one row per variant, per-seed held-out L1 plus the median.
pub fn render_table(runs: &[AblationRun], seeds: &[u64]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<10}", "variant"));
    for s in seeds {
        out.push_str(&format!(" {:>14}", format!("seed {s}")));
    }
    out.push_str(&format!(" {:>14}\n", "median"));
    for variant in [Variant::A, Variant::E, Variant::F] {
        out.push_str(&format!("{:<10}", variant.code()));
        for &s in seeds {
            let v = runs
                .iter()
                .find(|r| r.variant == variant && r.seed == s)
                .map(|r| r.final_l1_fused())
                .unwrap_or(f64::NAN);
            out.push_str(&format!(" {:>14.6}", v));
        }
        out.push_str(&format!(" {:>14.6}\n", median_for(runs, variant)));
    }
    out
}

/// CSV rows: `variant,seed,final_l1_fused,final_l1_direct,wall_secs`.
pub fn render_csv(runs: &[AblationRun]) -> String {
    let mut out = String::from("variant,seed,final_l1_fused,final_l1_direct,wall_secs\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.1}\n",
            r.variant.code(),
            r.seed,
            r.final_l1_fused(),
            r.final_l1_direct(),
            r.wall_secs
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_sets() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
