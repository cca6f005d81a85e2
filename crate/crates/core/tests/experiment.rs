use sata_core::data::{make_synthetic, Dataset, Split};
use sata_core::experiment::{
    attention_report, evaluate, evaluate_state, export_attention_report, grid_search_on, head_file,
    hist_file, train_on, Cell, DatasetKind, RunConfig, CHECKPOINT_FILE, REPORT_FILE,
    RUN_CONFIG_FILE, S_TRAJECTORY_FILE,
};
use sata_core::tensor::Tensor;
use sata_core::vit::{load_checkpoint, save_checkpoint, ModelState};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.kind = DatasetKind::Synthetic;
    cfg.data.synthetic_image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    cfg.depth = 2;
    cfg.batch_size = 16;
    cfg.epochs = 2;
    cfg.augment = false;
    cfg.t = 0.5;
    cfg.lr2 = Some(1e-2);
    cfg.seed = 3;
    cfg
}

fn data() -> (Dataset, Dataset) {
    let train = make_synthetic(48, 2, 8, 1).unwrap();
    let val = make_synthetic(32, 2, 8, 2).unwrap().with_split(Split::Test);
    (train, val)
}

#[test]
fn zero_epochs_leaves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.epochs = 0;
    cfg.out_dir = Some(dir.path().to_path_buf());
    let (train, val) = data();
    let report = train_on(&cfg, &train, &val).unwrap();
    assert!(report.epochs.is_empty());
    assert!(report.s_trajectory.is_empty());
    assert!(report.step_losses.is_empty());
    let init = ModelState::init(&report.model, cfg.seed).unwrap();
    let (_, saved) = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved, init);
}

#[test]
fn identical_configs_train_identically() {
    let (train, val) = data();
    let mut cfg = small_config();
    cfg.augment = true;
    let a = train_on(&cfg, &train, &val).unwrap();
    let b = train_on(&cfg, &train, &val).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.state, b.state);
    assert_eq!(a.s_trajectory, b.s_trajectory);
    cfg.seed += 1;
    assert_ne!(
        train_on(&cfg, &train, &val).unwrap().step_losses,
        a.step_losses
    );
}

#[test]
fn trajectory_and_output_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.out_dir = Some(dir.path().to_path_buf());
    let (train, val) = data();
    let report = train_on(&cfg, &train, &val).unwrap();
    assert_eq!(report.s_trajectory.len(), cfg.epochs);
    assert!(report.s_trajectory.iter().all(|row| row.len() == cfg.depth));
    assert_eq!(
        report.checkpoint.as_deref(),
        Some(dir.path().join(CHECKPOINT_FILE).as_path())
    );

    let csv = std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,train_loss,train_acc,val_acc,lr1,lr2,wall_time_secs")
    );
    assert_eq!(lines.count(), cfg.epochs);
    let s = std::fs::read_to_string(dir.path().join(S_TRAJECTORY_FILE)).unwrap();
    assert_eq!(s.lines().next(), Some("epoch,layer0,layer1"));
    assert_eq!(s.lines().count(), cfg.epochs + 1);

    let saved = RunConfig::load(&dir.path().join(RUN_CONFIG_FILE)).unwrap();
    assert_eq!(saved.lr2(), 1e-2);
    assert!(saved.normalization.is_none());
}

#[test]
fn learning_rate_groups_are_isolated() {
    let (train, val) = data();
    let mut cfg = small_config();
    cfg.lr2 = Some(0.0);
    let frozen_s = train_on(&cfg, &train, &val).unwrap();
    let init = ModelState::init(&frozen_s.model, cfg.seed).unwrap();
    assert!(frozen_s.s_trajectory.iter().flatten().all(|&s| s == 0.5));
    assert_ne!(frozen_s.state.head_weight, init.head_weight);

    cfg.lr2 = Some(1e-2);
    cfg.lr1 = 0.0;
    let frozen_model = train_on(&cfg, &train, &val).unwrap();
    let names = init.named();
    for ((name, before), (_, after)) in names.iter().zip(frozen_model.state.named()) {
        if name.ends_with("sata_scale") {
            continue;
        }
        assert_eq!(*before, after, "{name} moved with lr1 = 0");
    }
    assert!(frozen_model.state.sata_scales().iter().any(|&s| s != 0.5));
}

#[test]
fn non_finite_training_aborts_with_the_op() {
    let (_, val) = data();
    let images = vec![1e308; 16 * 3 * 64];
    let labels = (0..16).map(|i| i % 2).collect();
    let train = Dataset::new(images, labels, 2, 3, 8, Split::Train).unwrap();
    let err = train_on(&small_config(), &train, &val).unwrap_err();
    assert_eq!(err.category(), "numeric");
    assert!(err.to_string().contains("matmul"), "{err}");
}

#[test]
fn grid_has_the_configured_shape_and_baseline() {
    let (train, val) = data();
    let mut cfg = small_config();
    cfg.out_dir = None;
    let s_values = [1.0, 0.5, 0.0];
    let t_values = [0.5, 0.0];
    let grid = grid_search_on(&cfg, &s_values, &t_values, &train, &val).unwrap();
    assert_eq!(grid.cells.len(), 2);
    assert!(grid.cells.iter().all(|row| row.len() == 3));
    let Cell::Done {
        val_acc,
        final_loss,
    } = &grid.baseline
    else {
        panic!("{:?}", grid.baseline)
    };
    for cell in &grid.cells[1] {
        let Cell::Done {
            val_acc: a,
            final_loss: l,
        } = cell
        else {
            panic!("{cell:?}")
        };
        assert_eq!(a.to_bits(), val_acc.to_bits());
        assert_eq!(l.to_bits(), final_loss.to_bits());
    }
    let csv = grid.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "t\\s,1,0.5,0");
    assert!(lines[1].starts_with("0.5,"));
    assert!(lines[3].starts_with("baseline,"));
    assert_eq!(lines[3].split(',').count(), 4);

    assert_eq!(
        grid_search_on(&cfg, &[], &t_values, &train, &val)
            .unwrap_err()
            .category(),
        "config"
    );
}

#[test]
fn failed_cells_do_not_stop_the_grid() {
    let (train, val) = data();
    let cfg = small_config();
    // A relative threshold of 1 is invalid, so that row fails.
    let grid = grid_search_on(&cfg, &[0.5], &[1.0, 0.0], &train, &val).unwrap();
    assert!(matches!(grid.cells[0][0], Cell::Failed(_)));
    assert!(matches!(grid.cells[1][0], Cell::Done { .. }));
    assert!(grid
        .to_csv()
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .ends_with("failed"));
}

#[test]
fn evaluation_examples() {
    let cfg = small_config();
    let model = cfg.model_config(3, 8, 4).unwrap();
    let mut state = ModelState::init(&model, 0).unwrap();

    // Balanced 4-class set, untrained model: near chance.
    let balanced = make_synthetic(400, 4, 8, 5).unwrap();
    let acc = evaluate_state(&state, &model, &balanced, 64).unwrap();
    assert!((acc - 0.25).abs() <= 0.05 + 1e-12, "{acc}");

    // Head wired to always answer class 2 on a set whose labels are all 2.
    state.head_weight = Tensor::zeros(state.head_weight.shape());
    state.head_bias = Tensor::vector(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let images = make_synthetic(20, 1, 8, 6).unwrap();
    let only_two =
        Dataset::new(images.images().to_vec(), vec![2; 20], 4, 3, 8, Split::Test).unwrap();
    assert_eq!(evaluate_state(&state, &model, &only_two, 7).unwrap(), 1.0);

    let bigger = make_synthetic(4, 2, 16, 0).unwrap();
    assert_eq!(
        evaluate_state(&state, &model, &bigger, 4)
            .unwrap_err()
            .category(),
        "checkpoint"
    );
}

#[test]
fn saved_checkpoint_evaluates_identically() {
    let (train, val) = data();
    let report = train_on(&small_config(), &train, &val).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    save_checkpoint(&path, &report.model, &report.state).unwrap();
    let in_memory = evaluate_state(&report.state, &report.model, &val, 9).unwrap();
    assert_eq!(evaluate(&path, &val).unwrap(), in_memory);
    assert_eq!(report.final_val_acc(), Some(in_memory));
}

fn report_model() -> (sata_core::vit::ViTConfig, ModelState, Tensor) {
    let mut cfg = small_config();
    cfg.depth = 2;
    let model = cfg.model_config(3, 32, 10).unwrap();
    let state = ModelState::init(&model, 1).unwrap();
    let images = make_synthetic(2, 2, 32, 3).unwrap();
    let (batch, _) = images.batch(&[0, 1]).unwrap();
    (model, state, batch)
}

#[test]
fn attention_report_rows_are_consistent() {
    let (model, state, batch) = report_model();
    let report = attention_report(&state, &model, &batch, 0.01, 0.005).unwrap();
    assert_eq!(report.tables.len(), model.depth * model.num_heads());
    for table in &report.tables {
        assert_eq!(table.rows.len(), 2 * 65);
        for row in &table.rows {
            assert!((row.trivial_mass - row.hist_trivial_mass).abs() <= 1e-9);
            assert!(row.suppressed_trivial_mass <= row.s.abs() * row.max_weight + 1e-12);
            assert!(row.lemma_ok);
        }
    }
    assert!(report.all_rows_within_bound());

    let zero = attention_report(&state, &model, &batch, 0.0, 0.005).unwrap();
    assert!(zero
        .tables
        .iter()
        .flat_map(|t| &t.rows)
        .all(|r| r.trivial_count == 0));
    assert_eq!(
        attention_report(&state, &model, &batch, 0.012, 0.005)
            .unwrap_err()
            .category(),
        "parameter"
    );
}

#[test]
fn attention_report_files() {
    let (model, state, batch) = report_model();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.json");
    save_checkpoint(&ckpt, &model, &state).unwrap();
    let out = dir.path().join("attn");
    let single = Tensor::new(vec![1, 3, 32, 32], batch.data()[..3 * 1024].to_vec()).unwrap();
    export_attention_report(&ckpt, &single, 0.01, 0.005, Some(&out)).unwrap();
    for layer in 0..model.depth {
        for head in 0..model.num_heads() {
            let rows = std::fs::read_to_string(out.join(head_file(layer, head))).unwrap();
            assert_eq!(rows.lines().count(), 1 + 65);
            assert!(rows.starts_with("image,row,max_weight,trivial_count,trivial_mass"));
            let hist = std::fs::read_to_string(out.join(hist_file(layer, head))).unwrap();
            assert!(hist.starts_with("stage,bin_lower,bin_upper,count,mass"));
            assert!(!rows.contains(",-0,"));
        }
    }
}

#[test]
fn config_files_parse_and_round_trip() {
    let text = "# tiny run\nembed_dim = 32\nt = 0.05   # threshold\nsata = off\nlr2 = 0.0005\ndataset = cifar10\ngrid_s = 1, 0.5\n\n";
    let cfg = RunConfig::parse_str(text).unwrap();
    assert_eq!(cfg.embed_dim, 32);
    assert_eq!(cfg.t, 0.05);
    assert!(!cfg.sata);
    assert_eq!(cfg.lr2(), 5e-4);
    assert_eq!(cfg.grid_s, vec![1.0, 0.5]);
    assert_eq!(RunConfig::parse_str(&cfg.to_config_string()).unwrap(), cfg);

    let err = RunConfig::parse_str("depth = 2\nwidth = 3\n").unwrap_err();
    assert_eq!(err.category(), "config");
    assert!(err.to_string().contains("line 2"), "{err}");
    assert!(RunConfig::parse_str("depth: 2").is_err());

    // Paper defaults.
    let d = RunConfig::default();
    assert_eq!(
        (d.lr1, d.s, d.t, d.batch_size, d.epochs),
        (0.003, 0.5, 0.1, 128, 100)
    );
    assert_eq!(d.lr2(), 7e-5);
    let tiny = RunConfig {
        data: sata_core::experiment::DataSpec {
            kind: DatasetKind::TinyImageNet,
            ..d.data.clone()
        },
        ..d
    };
    assert_eq!(tiny.lr2(), 1e-3);
}
