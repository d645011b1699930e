//! Config parsing, CSV round trips and checkpoint behavior.

use invdyn::checkpoint;
use invdyn::config::{apply_overrides, load_run_file, load_sweep_file, ConfigError};
use invdyn::io::{
    plot_file_name, read_aggregate_csv, read_metrics_csv, write_aggregate_csv, write_metrics_csv,
    write_plot_data,
};
use invdyn_core::data::{AccelKind, DataSource, Dataset, InputPoint, TrainingSample};
use invdyn_core::experiment::{aggregate, GroupField};
use invdyn_core::experiment::{ExperimentConfig, IterationRecord, RunMetrics};
use invdyn_core::model::{train, ErrorModel, MlpSpec, TrainParams};
use invdyn_core::rng::Rng;

fn write_tmp(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn empty_config_resolves_to_documented_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tmp(&dir, "empty.toml", "");
    let file = load_run_file(Some(&path), &[]).unwrap();
    let (cell, tuning) = file.validate().unwrap();
    assert_eq!(cell, ExperimentConfig::default());
    assert_eq!(tuning, invdyn_core::experiment::Tuning::default());
    // the echo of an empty config lists every resolved value
    let echo = invdyn::config::echo_toml(&file);
    assert!(echo.contains("noise_level = \"low\""));
    assert!(echo.contains("policy_kp = 25.0"));
}

#[test]
fn noise_levels_resolve_to_paper_amplitudes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, tuning) = load_run_file(Some(&write_tmp(&dir, "n.toml", "noise_level = \"very_high\"")), &[])
        .unwrap()
        .validate()
        .unwrap();
    use invdyn_core::experiment::NoiseLevel;
    assert_eq!(tuning.noise_amplitude(NoiseLevel::Low), 0.0001);
    assert_eq!(tuning.noise_amplitude(NoiseLevel::Medium), 0.0005);
    assert_eq!(tuning.noise_amplitude(NoiseLevel::High), 0.007);
    assert_eq!(tuning.noise_amplitude(NoiseLevel::VeryHigh), 0.008);
}

#[test]
fn out_of_enum_noise_level_names_the_valid_choices() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tmp(&dir, "bad.toml", "noise_level = \"extreme\"");
    let err = load_run_file(Some(&path), &[]).unwrap_err();
    let msg = err.to_string();
    for name in ["low", "medium", "high", "very_high"] {
        assert!(msg.contains(name), "error should list `{name}`: {msg}");
    }
}

#[test]
fn unknown_keys_are_hard_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tmp(&dir, "typo.toml", "noise_levle = \"low\"");
    assert!(matches!(
        load_run_file(Some(&path), &[]),
        Err(ConfigError::Parse(_))
    ));
    let path = write_tmp(&dir, "typo2.toml", "[tuning]\npolicy_pk = 1.0");
    assert!(load_run_file(Some(&path), &[]).is_err());
}

#[test]
fn mismatched_dimension_override_is_a_config_error() {
    let text = apply_overrides("", &["tuning.q_init=[0.0, 0.0, 0.0]".into()]).unwrap();
    let file: invdyn::config::RunFile = toml::from_str(&text).unwrap();
    let err = file.validate().unwrap_err();
    assert!(err.to_string().contains("same length"), "{err}");
}

#[test]
fn invalid_epochs_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tmp(&dir, "ep.toml", "epochs = 37");
    let err = load_run_file(Some(&path), &[]).unwrap().validate().unwrap_err();
    assert!(err.to_string().contains("20 or 50"));
}

#[test]
fn overrides_reach_nested_tables() {
    let text = apply_overrides("", &["tuning.policy_kp=30.5".into(), "seed=9".into()]).unwrap();
    let file: invdyn::config::RunFile = toml::from_str(&text).unwrap();
    assert_eq!(file.tuning.policy_kp, 30.5);
    assert_eq!(file.seed, 9);
    // a typo through --set is still caught by deny_unknown_fields
    let text = apply_overrides("", &["tuning.polcy_kp=30.5".into()]).unwrap();
    assert!(toml::from_str::<invdyn::config::RunFile>(&text).is_err());
}

#[test]
fn sweep_grid_shares_seeds_across_sources_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tmp(
        &dir,
        "sweep.toml",
        "repetitions = 2\nnoise_levels = [\"low\", \"very_high\"]\ncontrollers = [\"pid\"]\n",
    );
    let file = load_sweep_file(Some(&path), &[]).unwrap();
    let (grid, _) = file.grid().unwrap();
    // 2 noise x 1 friction x 1 stiction x 1 controller x 1 gain x 1 epochs
    //   x 2 reps x 3 sources
    assert_eq!(grid.len(), 12);
    for chunk in grid.chunks(3) {
        assert_eq!(chunk[0].seed, chunk[1].seed);
        assert_eq!(chunk[0].seed, chunk[2].seed);
        assert_eq!(chunk[0].data_source, DataSource::Indirect);
        assert_eq!(chunk[1].data_source, DataSource::Direct);
        assert_eq!(chunk[2].data_source, DataSource::Joint);
    }
    let mut seeds: Vec<u64> = grid.iter().map(|c| c.seed).collect();
    seeds.dedup();
    assert_eq!(seeds.len(), 4, "4 distinct (noise, rep) seeds");
}

fn sample_records(n: usize) -> Vec<IterationRecord> {
    (0..n)
        .map(|i| IterationRecord {
            iteration: (i + 1) as u32,
            pos_err_mean: 0.5 / (i + 1) as f64,
            fb_mag_mean: 1.25 / (i + 1) as f64,
            accel_err_mean: 3.0 / (i + 1) as f64,
            converged: i > 2,
            steps_used: 5000 - 100 * i,
            aborted: false,
            dataset_size: 0,
            train_loss_before: None,
            train_loss_after: None,
        })
        .collect()
}

#[test]
fn metrics_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let records = sample_records(5);
    write_metrics_csv(&path, &records).unwrap();
    let back = read_metrics_csv(&path).unwrap();
    assert_eq!(back.len(), 5);
    for (a, b) in records.iter().zip(&back) {
        assert_eq!(a.iteration, b.iteration);
        assert_eq!(a.pos_err_mean, b.pos_err_mean);
        assert_eq!(a.fb_mag_mean, b.fb_mag_mean);
        assert_eq!(a.accel_err_mean, b.accel_err_mean);
        assert_eq!(a.converged, b.converged);
        assert_eq!(a.steps_used, b.steps_used);
    }
}

#[test]
fn plot_data_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<RunMetrics> = [DataSource::Indirect, DataSource::Direct, DataSource::Joint]
        .into_iter()
        .flat_map(|source| {
            (0..2).map(move |rep| RunMetrics {
                cell: Some(ExperimentConfig {
                    data_source: source,
                    seed: rep,
                    ..ExperimentConfig::default()
                }),
                records: sample_records(20),
                aborted: false,
            })
        })
        .collect();
    let groups = aggregate(&runs, &[GroupField::DataSource]).unwrap();
    assert_eq!(groups.len(), 3);

    let agg_path = dir.path().join("aggregate.csv");
    write_aggregate_csv(&agg_path, &groups).unwrap();
    let reread = read_aggregate_csv(&agg_path).unwrap();
    assert_eq!(reread.len(), 3);
    for (a, b) in groups.iter().zip(&reread) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.pos_err_mean, rb.pos_err_mean);
            assert_eq!(ra.pos_err_std, rb.pos_err_std);
        }
    }

    // 3 groups x 20 iterations -> 3 files x 20 rows, mean+std >= mean
    let plot_dir = dir.path().join("plots");
    std::fs::create_dir_all(&plot_dir).unwrap();
    let files = write_plot_data(&plot_dir, &groups).unwrap();
    assert_eq!(files.len(), 3);
    let mut contents = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(plot_dir.join(f)).unwrap();
        assert_eq!(text.lines().count(), 21, "header plus 20 rows in {f}");
        for line in text.lines().skip(1) {
            let cols: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
            assert!(cols[1] >= cols[0]);
            assert!(cols[3] >= cols[2]);
        }
        contents.push(text);
    }
    // byte-identical on re-run
    let files2 = write_plot_data(&plot_dir, &groups).unwrap();
    assert_eq!(files, files2);
    for (f, old) in files.iter().zip(&contents) {
        assert_eq!(&std::fs::read_to_string(plot_dir.join(f)).unwrap(), old);
    }
}

#[test]
fn plot_file_names_are_path_safe() {
    assert_eq!(
        plot_file_name("controller=pid,gain=low,source=joint"),
        "plot_controller-pid_gain-low_source-joint.csv"
    );
}

fn trained_toy_model(seed: u64) -> (ErrorModel, Dataset) {
    let mut rng = Rng::from_seed(seed);
    let samples = (0..80)
        .map(|_| {
            let x = InputPoint::new(
                vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
                vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
                vec![rng.uniform(-9.0, 9.0), rng.uniform(-9.0, 9.0)],
                AccelKind::Desired,
            );
            let y = vec![4.5 * x.qdd[0], 4.5 * x.qdd[1]];
            TrainingSample {
                x,
                y,
                source: DataSource::Direct,
            }
        })
        .collect();
    let data = Dataset {
        samples,
        source_label: DataSource::Direct,
        iteration: 1,
    };
    let spec = MlpSpec {
        hidden: vec![16, 8],
        alpha_init: 0.25,
    };
    let model0 = ErrorModel::initial(2, spec, 50.0);
    let (model, _) = train(&model0, &data, 3, &mut rng, &TrainParams::default());
    (model, data)
}

#[test]
fn checkpoint_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = trained_toy_model(3);
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &model).unwrap();
    let restored = checkpoint::load(&path).unwrap();
    assert_eq!(restored, model);
    for s in &data.samples {
        assert_eq!(model.predict(&s.x), restored.predict(&s.x));
    }
}

#[test]
fn untrained_model_checkpoints_too() {
    let model = ErrorModel::initial(2, MlpSpec::default(), 200.0);
    let mut buf = Vec::new();
    checkpoint::write_model(&mut buf, &model).unwrap();
    let restored = checkpoint::read_model(&mut buf.as_slice()).unwrap();
    assert_eq!(restored, model);
    assert!(restored.is_untrained());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (model, _) = trained_toy_model(4);
    let mut buf = Vec::new();
    checkpoint::write_model(&mut buf, &model).unwrap();

    let mut wrong_magic = buf.clone();
    wrong_magic[0] = b'X';
    assert!(checkpoint::read_model(&mut wrong_magic.as_slice()).is_err());

    let mut wrong_version = buf.clone();
    wrong_version[4] = 99;
    assert!(checkpoint::read_model(&mut wrong_version.as_slice()).is_err());

    let truncated = &buf[..buf.len() / 2];
    assert!(checkpoint::read_model(&mut &truncated[..]).is_err());
}
