use rayon::prelude::*;

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::seg::{evaluate_segmenter, train_segmenter, SegTrainConfig, DEFAULT_THRESHOLD};

use super::{MetricReport, MixingPlan, ReportRow};

/// Trains on `train` and scores on `test`. Every row uses the same seed, so
/// rows differ only in their data.
fn run_row(experiment: String, real_n: usize, synth_n: usize, train: &PairedDataset, test: &PairedDataset, scfg: &SegTrainConfig) -> Result<ReportRow> {
    log::info!("{experiment}: training on {real_n} real + {synth_n} synthetic pairs");
    let trained = train_segmenter(train, scfg)?;
    let eval = evaluate_segmenter(&trained.best, test, DEFAULT_THRESHOLD)?;
    Ok(ReportRow {
        experiment,
        model: scfg.model.name().to_string(),
        real_n,
        synth_n,
        micro: eval.micro,
        imagewise: eval.imagewise,
    })
}

fn need(requested: usize, ds: &PairedDataset) -> Result<()> {
    if requested > ds.len() {
        return Err(Error::InsufficientData {
            requested,
            available: ds.len(),
        });
    }
    Ok(())
}

/// Mixes `prefix(a, real_n)` with `prefix(b, synth_n)`.
fn mix(real: &PairedDataset, real_n: usize, synth: &PairedDataset, synth_n: usize) -> Result<PairedDataset> {
    let r = real.prefix(real_n)?;
    let s = synth.prefix(synth_n)?;
    match (real_n, synth_n) {
        (_, 0) => Ok(r),
        (0, _) => Ok(s),
        _ => r.concat(&s),
    }
}

/// Training sets of a sweep, one per synthetic count, in plan order.
pub fn mixing_subsets(real: &PairedDataset, synth: &PairedDataset, plan: &MixingPlan) -> Result<Vec<PairedDataset>> {
    plan.validate()?;
    need(plan.real_count, real)?;
    need(plan.max_synthetic(), synth)?;
    plan.synthetic_counts
        .iter()
        .map(|&k| mix(real, plan.real_count, synth, k))
        .collect()
}

/// One row per synthetic count. Synthetic subsets are prefixes of `synth`,
/// so each is contained in the next. With `parallel` the points train
/// concurrently; results do not depend on it.
pub fn run_mixing_sweep(
    real: &PairedDataset,
    synth: &PairedDataset,
    plan: &MixingPlan,
    scfg: &SegTrainConfig,
    test: &PairedDataset,
    parallel: bool,
) -> Result<MetricReport> {
    let sets = mixing_subsets(real, synth, plan)?;
    test.require_non_empty()?;
    let point = |(train, &k): (&PairedDataset, &usize)| {
        run_row(format!("mix_r{}_s{}", plan.real_count, k), plan.real_count, k, train, test, scfg)
    };
    let rows = if parallel {
        sets.par_iter().zip(plan.synthetic_counts.par_iter()).map(point).collect::<Result<Vec<_>>>()?
    } else {
        sets.iter().zip(&plan.synthetic_counts).map(point).collect::<Result<Vec<_>>>()?
    };
    let mut report = MetricReport {
        rows,
        ..Default::default()
    };
    report.best_row = report.best_imagewise_iou();
    Ok(report)
}

/// Real only, synthetic only, then both; the best image-wise IoU row is flagged.
pub fn run_three_way(real: &PairedDataset, synth: &PairedDataset, test: &PairedDataset, scfg: &SegTrainConfig) -> Result<MetricReport> {
    real.require_non_empty()?;
    synth.require_non_empty()?;
    test.require_non_empty()?;
    let (r, s) = (real.len(), synth.len());
    let mut rows = Vec::with_capacity(3);
    for (name, rn, sn) in [("real_only", r, 0), ("synthetic_only", 0, s), ("combined", r, s)] {
        rows.push(run_row(name.to_string(), rn, sn, &mix(real, rn, synth, sn)?, test, scfg)?);
    }
    let mut report = MetricReport {
        rows,
        ..Default::default()
    };
    report.best_row = report.best_imagewise_iou();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use crate::experiment::toy::{toy_dataset, ToyCorpus};
    use crate::seg::SegArch;

    fn cfg() -> SegTrainConfig {
        SegTrainConfig {
            model: SegArch::FpnSmall,
            encoder_width: 4,
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        }
    }

    fn data() -> (PairedDataset, PairedDataset, PairedDataset) {
        let spec = ToyCorpus {
            side: 8,
            ..Default::default()
        };
        let real = toy_dataset(&spec, 6, 1, "real", Provenance::Real).unwrap();
        let synth = toy_dataset(&spec, 6, 2, "synth", Provenance::Synthetic).unwrap();
        let test = toy_dataset(&spec, 3, 3, "test", Provenance::Real).unwrap();
        (real, synth, test)
    }

    #[test]
    fn sweep_rows_follow_the_plan() {
        let (real, synth, test) = data();
        let plan = MixingPlan::stepped(2, 2, 3);
        let a = run_mixing_sweep(&real, &synth, &plan, &cfg(), &test, false).unwrap();
        assert_eq!(a.rows.len(), 4);
        let synth_n: Vec<_> = a.rows.iter().map(|r| r.synth_n).collect();
        assert_eq!(synth_n, [0, 2, 4, 6]);
        assert_eq!(a, run_mixing_sweep(&real, &synth, &plan, &cfg(), &test, true).unwrap());
        assert!(a.best_row.is_some());
    }

    #[test]
    fn zero_synthetic_equals_plain_real_training() {
        let (real, synth, test) = data();
        let plan = MixingPlan {
            real_count: 4,
            synthetic_counts: vec![0],
        };
        let rep = run_mixing_sweep(&real, &synth, &plan, &cfg(), &test, false).unwrap();
        let plain = train_segmenter(&real.prefix(4).unwrap(), &cfg()).unwrap();
        let eval = evaluate_segmenter(&plain.best, &test, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(rep.rows[0].micro, eval.micro);
        assert_eq!(rep.rows[0].imagewise, eval.imagewise);
    }

    #[test]
    fn insufficient_data_is_reported() {
        let (real, synth, test) = data();
        let plan = MixingPlan::stepped(2, 5, 2);
        assert!(matches!(
            run_mixing_sweep(&real, &synth, &plan, &cfg(), &test, false),
            Err(Error::InsufficientData { requested: 10, available: 6 })
        ));
    }

    #[test]
    fn three_way_shape() {
        let (real, synth, test) = data();
        let rep = run_three_way(&real, &synth, &test, &cfg()).unwrap();
        let shape: Vec<_> = rep.rows.iter().map(|r| (r.real_n, r.synth_n)).collect();
        assert_eq!(shape, [(6, 0), (0, 6), (6, 6)]);
        assert_eq!(rep, run_three_way(&real, &synth, &test, &cfg()).unwrap());
    }
}
