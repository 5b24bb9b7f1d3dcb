use pkcam_core::complexity::{count_flops, count_params, Convention};
use pkcam_core::harness::{
    ablate, ablation_csv, evaluate, gradcheck, learning_rate, load_dataset, load_path, train,
    AblationMatrix, Bundle, Checkpoint, RunConfig, SyntheticSpec,
};
use pkcam_core::Error;
use std::fs;

fn quick(extra: &str) -> RunConfig {
    let mut cfg = RunConfig::parse(
        "train.epochs = 3\ntrain.batch_size = 8\ndata.classes = 4\ndata.per_class = 8\ndata.height = 8\ndata.width = 8\n",
    )
    .unwrap();
    for line in extra.lines() {
        let (k, v) = line.split_once('=').unwrap();
        cfg.set(k.trim(), v.trim()).unwrap();
    }
    cfg
}

fn synth(classes: usize, per_class: usize, side: usize, seed: u64) -> Bundle {
    Bundle::synthetic(&SyntheticSpec {
        classes,
        per_class,
        height: side,
        width: side,
        seed,
    })
    .unwrap()
}

#[test]
fn synthetic_generator_is_pinned() {
    let a = synth(4, 32, 16, 7);
    assert_eq!(a.len(), 128);
    assert_eq!((a.channels, a.height, a.width, a.classes), (3, 16, 16, 4));
    for c in 0..4 {
        assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 32);
    }
    assert_eq!(
        a.digest(),
        "864d9a5599b0f43e64ed1270d27bfc1a13f4e6d9a1e613e126c99e4cf0ff7677"
    );
    assert_eq!(a.digest(), synth(4, 32, 16, 7).digest());
    assert_ne!(a.digest(), synth(4, 32, 16, 8).digest());
}

#[test]
fn raw_bundle_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.pkds");
    let a = synth(3, 5, 6, 1);
    a.write_raw(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let b = Bundle::read_raw(&path).unwrap();
    assert_eq!(a, b);
    assert_eq!(b.to_bytes(), bytes);
}

#[test]
fn malformed_bundles_report_offsets() {
    match Bundle::from_bytes(&[]) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("{other:?}"),
    }
    let mut bytes = synth(2, 2, 4, 1).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Bundle::from_bytes(&bad),
        Err(Error::Format { offset: 0, .. })
    ));
    bytes.truncate(bytes.len() - 3);
    match Bundle::from_bytes(&bytes) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
        other => panic!("{other:?}"),
    }
    let mut long = synth(2, 2, 4, 1).to_bytes();
    long.push(0);
    assert!(matches!(
        Bundle::from_bytes(&long),
        Err(Error::Format { .. })
    ));
}

#[test]
fn image_directory_ingest() {
    let dir = tempfile::tempdir().unwrap();
    for (class, colour) in [("cat", [200u8, 10, 10]), ("dog", [10, 200, 10])] {
        fs::create_dir(dir.path().join(class)).unwrap();
        for i in 0..3u8 {
            let img = image::RgbImage::from_fn(5, 4, |x, _| {
                image::Rgb([colour[0], colour[1], colour[2].wrapping_add(i + x as u8)])
            });
            img.save(dir.path().join(class).join(format!("{i}.png")))
                .unwrap();
        }
    }
    let b = load_path(dir.path()).unwrap();
    assert_eq!(
        (b.len(), b.classes, b.channels, b.height, b.width),
        (6, 2, 3, 4, 5)
    );
    assert_eq!(b.labels, [0, 0, 0, 1, 1, 1]);
    // Planar storage: the first pixel's channels sit one plane apart.
    assert_eq!([b.pixels[0], b.pixels[20], b.pixels[40]], [200, 10, 10]);

    image::RgbImage::new(3, 3)
        .save(dir.path().join("dog").join("odd.png"))
        .unwrap();
    assert!(Bundle::from_image_dir(dir.path()).is_err());
}

#[test]
fn checkpoint_round_trip_evaluates_identically() {
    let cfg = quick("");
    let data = load_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &data, Some(dir.path())).unwrap();
    let loaded = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(loaded, out.checkpoint);
    assert_eq!(Checkpoint::from_bytes(&loaded.to_bytes()).unwrap(), loaded);

    let eval = evaluate(&loaded, &data).unwrap();
    let last = out.last();
    assert_eq!(
        (eval.loss, eval.top1, eval.top5),
        (last.loss, last.top1, last.top5)
    );
    assert_eq!(eval.split, "eval");

    let written = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(written, out.csv);
    assert_eq!(written.lines().count(), 4);
    let echoed =
        RunConfig::parse(&fs::read_to_string(dir.path().join("config.txt")).unwrap()).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn scheduled_checkpoints_are_written() {
    let cfg = quick("train.checkpoint_every = 2\ntrain.epochs = 4\n");
    let data = load_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &data, Some(dir.path())).unwrap();
    for name in ["epoch-0002.ckpt", "epoch-0004.ckpt", "final.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert!(!dir.path().join("epoch-0001.ckpt").exists());
    assert_eq!(
        Checkpoint::load(&dir.path().join("epoch-0002.ckpt"))
            .unwrap()
            .epoch,
        2
    );
}

#[test]
fn training_is_byte_reproducible() {
    let cfg = quick("attention = se:2\n");
    let data = load_dataset(&cfg).unwrap();
    let a = train(&cfg, &data, None).unwrap();
    let b = train(&cfg, &data, None).unwrap();
    assert_eq!(a.csv, b.csv);
    assert_eq!(a.checkpoint, b.checkpoint);
    let other = RunConfig { seed: 2, ..cfg };
    assert_ne!(train(&other, &data, None).unwrap().checkpoint, a.checkpoint);
}

#[test]
fn step_schedule_decays_tenfold_at_step() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.train.lr_step, 30);
    assert_eq!(learning_rate(&cfg.train, 29), cfg.train.lr);
    assert_eq!(learning_rate(&cfg.train, 30), cfg.train.lr * 0.1);
    assert_eq!(learning_rate(&cfg.train, 60), cfg.train.lr * 0.1 * 0.1);
}

#[test]
fn top5_is_one_with_at_most_five_classes() {
    let cfg = quick("train.epochs = 1\n");
    let data = load_dataset(&cfg).unwrap();
    let out = train(&cfg, &data, None).unwrap();
    assert_eq!(out.last().top5, 1.0);
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let cfg = quick("model.classes = 7\n");
    let data = synth(4, 4, 8, 1);
    assert!(matches!(train(&cfg, &data, None), Err(Error::Config(_))));

    let trained = train(&quick("train.epochs = 1\n"), &data, None).unwrap();
    assert!(matches!(
        evaluate(&trained.checkpoint, &synth(5, 2, 8, 1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn divergence_keeps_the_last_good_parameters() {
    let cfg = quick("train.lr = 1e200\ntrain.epochs = 5\n");
    let data = load_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let e = train(&cfg, &data, Some(dir.path())).unwrap_err();
    assert!(matches!(e, Error::Divergence(_)), "{e}");
    let good = Checkpoint::load(&dir.path().join("last-good.ckpt")).unwrap();
    assert!(good.params.iter().all(|(_, t)| t.all_finite()));
}

#[test]
fn gradcheck_passes_on_the_default_network() {
    let report = gradcheck(&RunConfig::default()).unwrap();
    assert!(report.passed(), "{}", report.to_text());
    assert!(report.modules.iter().any(|m| m.module.contains("attn")));
}

#[test]
fn gradcheck_reports_parameterless_modules_as_vacuous() {
    let cfg = RunConfig::parse("pkcam.interaction = sum\npkcam.fusion = sum\n").unwrap();
    let report = gradcheck(&cfg).unwrap();
    assert!(report.passed());
    assert!(report.modules.iter().any(|m| m.max_rel_err.is_none()));
    assert!(report.to_text().contains("vacuous pass (no parameters)"));
}

#[test]
fn ablation_rows_match_standalone_costs() {
    let m = AblationMatrix::parse(
        "ablate.interactions = conv1d, sum, fullfc\nablate.fusions = conv1d, sum, fullfc\nablate.paths = both, local, global\n",
    )
    .unwrap();
    let rows = ablate(&m).unwrap();
    assert_eq!(rows.len(), 12);
    for r in &rows {
        let cfg = m.cell_config((r.interaction, r.fusion, r.paths));
        let g = cfg.build().unwrap();
        assert_eq!(r.params, count_params(&g).total_params());
        let f = count_flops(
            &g,
            [1, 3, cfg.data.height, cfg.data.width],
            Convention::Mac1,
        )
        .unwrap();
        assert_eq!(r.flops, f.total_flops());
        assert!(r.top1.is_none());
    }
    let csv = ablation_csv(&rows);
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn empty_ablation_is_a_usage_error() {
    assert!(matches!(AblationMatrix::parse(""), Err(Error::Usage(_))));
    assert!(matches!(
        AblationMatrix::parse("ablate.interactions = sum\n"),
        Err(Error::Usage(_))
    ));
}
