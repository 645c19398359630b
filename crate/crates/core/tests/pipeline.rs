use std::fs;
use std::path::Path;

use polypdiff::data::Provenance;
use polypdiff::experiment::toy::{toy_dataset, write_toy_dataset, ToyCorpus};
use polypdiff::experiment::{load_report, read_masks, run_pipeline, run_stage, ExperimentConfig, MixingPlan, Stage};
use polypdiff::Error;

fn tiny_config(data: &Path, out: &Path, run: &str, latent: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        data_root: data.to_path_buf(),
        test_count: 6,
        resolution: 16,
        output_root: out.to_path_buf(),
        run_id: run.into(),
        seed: 11,
        latent_mode: latent,
        generate_count: 12,
        eval_samples: 4,
        mixing: MixingPlan::stepped(4, 4, 2),
        ..Default::default()
    };
    for d in [&mut cfg.mask_diffusion, &mut cfg.image_diffusion] {
        d.timesteps = 10;
    }
    for t in [&mut cfg.mask_train, &mut cfg.image_train] {
        t.base_channels = 4;
        t.depth = 2;
        t.embed_dim = 8;
        t.batch_size = 4;
        t.total_steps = 20;
        t.checkpoint_every = 10;
        t.learning_rate = 1e-3;
    }
    cfg.autoencoder.factor = 2;
    cfg.autoencoder.width = 4;
    cfg.autoencoder.total_steps = 10;
    cfg.autoencoder.batch_size = 4;
    cfg.segmentation.encoder_width = 4;
    cfg.segmentation.epochs = 1;
    cfg.segmentation.batch_size = 4;
    cfg
}

fn toy_root(dir: &Path) -> std::path::PathBuf {
    let root = dir.join("toy");
    let ds = toy_dataset(&ToyCorpus { side: 16, ..Default::default() }, 24, 5, "real", Provenance::Real).unwrap();
    write_toy_dataset(&ds, &root).unwrap();
    root
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn check_rerun_identical(latent: bool) {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_root(dir.path());
    let a = run_pipeline(&tiny_config(&data, dir.path(), "a", latent)).unwrap();
    let b = run_pipeline(&tiny_config(&data, dir.path(), "b", latent)).unwrap();
    for f in ["sweep.csv", "sweep.json", "three_way.csv", "three_way.json", "mask_checkpoints.json", "image_checkpoints.json"] {
        assert_eq!(read(&a.reports().join(f)), read(&b.reports().join(f)), "{f} differs");
    }
    let (ma, _) = read_masks(&a.samples().join("masks")).unwrap();
    let (mb, _) = read_masks(&b.samples().join("masks")).unwrap();
    assert_eq!(ma.len(), 12);
    assert_eq!(ma, mb);
    for (x, y) in [("masks_gallery.png", "masks_gallery.png"), ("pairs_gallery.png", "pairs_gallery.png")] {
        assert_eq!(read(&a.reports().join(x)), read(&b.reports().join(y)));
    }

    let sweep = load_report(&a.reports().join("sweep.json")).unwrap();
    assert_eq!(sweep.rows.len(), 3);
    assert_eq!(sweep.checkpoints.len(), 2);
    assert_eq!(sweep.checkpoints[0].records.len(), 2);
    let three = load_report(&a.reports().join("three_way.json")).unwrap();
    let shape: Vec<_> = three.rows.iter().map(|r| (r.real_n, r.synth_n)).collect();
    assert_eq!(shape, [(18, 0), (0, 12), (18, 12)]);
    assert!(a.root().join("config").is_file());
    let back = ExperimentConfig::load(&a.root().join("config")).unwrap();
    assert_eq!(back, tiny_config(&data, dir.path(), "a", latent));
}

#[test]
fn pixel_pipeline_is_reproducible() {
    check_rerun_identical(false);
}

#[test]
fn latent_pipeline_is_reproducible() {
    check_rerun_identical(true);
}

#[test]
fn stages_run_separately_and_respect_the_lock() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_root(dir.path());
    let cfg = tiny_config(&data, dir.path(), "s", false);
    // selection needs scores first
    assert!(run_stage(&cfg, Stage::GenMasks).is_err());
    let rd = run_stage(&cfg, Stage::TrainMask).unwrap();
    run_stage(&cfg, Stage::EvalMasks).unwrap();
    let _held = rd.lock("someone-else").unwrap();
    assert!(matches!(run_stage(&cfg, Stage::GenMasks), Err(Error::Locked(_))));
    drop(_held);
    run_stage(&cfg, Stage::GenMasks).unwrap();
    let (masks, manifest) = read_masks(&rd.samples().join("masks")).unwrap();
    assert_eq!(masks.len(), cfg.generate_count);
    assert_eq!(manifest.ids.len(), masks.len());
}
