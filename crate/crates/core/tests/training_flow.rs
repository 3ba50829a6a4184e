use safemark_core::codec::{Codec, WatermarkKey};
use safemark_core::converge::phase_tracker;
use safemark_core::distort::{default_grid, wfr_heatmap, HeatmapReport};
use safemark_core::editor::{Editor, EditorGeometry, PromptTable};
use safemark_core::grad::ImageTensor;
use safemark_core::synth::DatasetSpec;
use safemark_core::trainer::{evaluate, minibatch, objective, run_training, TrainConfig};

fn setup(count: usize) -> (Editor, Codec, Vec<ImageTensor>) {
    let editor = Editor::reference(PromptTable::desk_default(), EditorGeometry::new(3), 0).unwrap();
    let codec = Codec::new(WatermarkKey::new(0), (32, 32, 3)).unwrap();
    let data = DatasetSpec {
        count,
        ..DatasetSpec::default()
    }
    .generate()
    .unwrap();
    (editor, codec, data)
}

#[test]
fn short_run_keeps_its_invariants() {
    let (editor, codec, data) = setup(16);
    let cfg = TrainConfig {
        steps: 60,
        batch: 4,
        ..TrainConfig::default()
    };
    let a = run_training(&editor, &codec, &data, &cfg).unwrap();
    let b = run_training(&editor, &codec, &data, &cfg).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.records, b.records);
    for r in &a.records {
        let lhs = cfg.lambda_sem * r.loss_sem + cfg.lambda_wm * r.loss_wm;
        assert!((lhs - r.loss_total).abs() <= 1e-10);
        assert_eq!(r.hinge_active, r.soft_acc < cfg.tau);
    }
    // τ = 1 with a degrading reference editor starts active.
    assert!(a.records[0].hinge_active && a.records[0].loss_wm > 0.0);
    assert_eq!(a.theta0_fingerprint, editor.theta0().fingerprint());
    assert!(a.records.last().unwrap().loss_wm < a.records[0].loss_wm);
}

#[test]
fn inactive_steps_follow_the_semantic_gradient_alone() {
    let (editor, codec, data) = setup(8);
    let cfg = TrainConfig {
        tau: 0.5,
        steps: 10,
        batch: 4,
        ..TrainConfig::default()
    };
    let run = run_training(&editor, &codec, &data, &cfg).unwrap();
    assert!(run.records.iter().all(|r| !r.hinge_active));
    assert!(run.max_inactive_gradient_gap.unwrap() <= 1e-12);
    let phases = phase_tracker(&run.records).unwrap();
    assert_eq!(phases.first_inactive_step, Some(0));
    assert_eq!(phases.reactivation_count, 0);
    // θ0 is stationary: L_sem = 0 and the hinge is silent.
    assert_eq!(run.theta, *editor.theta0());
}

#[test]
fn untrained_editor_matches_direct_edits() {
    let (editor, codec, data) = setup(8);
    let report = evaluate(&editor, &codec, editor.theta0(), &data, 3).unwrap();
    assert_eq!(report.safemark_acc, report.mani_acc);
    assert_eq!(report.sem_gap_l1, 0.0);
    let heat = wfr_heatmap(&editor, &codec, editor.theta0(), &data, 3, &default_grid()).unwrap();
    let base = heat.column(HeatmapReport::BASELINE).unwrap();
    for (row, p) in heat.cells.iter().zip(&report.per_prompt) {
        assert_eq!(row[base], 1.0 - p.safemark_acc);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn identity_prompt_keeps_baseline_accuracy() {
    let table = PromptTable::new(vec![PromptTable::identity_entry(0)]).unwrap();
    let editor = Editor::reference(table, EditorGeometry::new(3), 0).unwrap();
    let codec = Codec::new(WatermarkKey::new(0), (32, 32, 3)).unwrap();
    let data = DatasetSpec {
        count: 8,
        ..DatasetSpec::default()
    }
    .generate()
    .unwrap();
    let r = evaluate(&editor, &codec, editor.theta0(), &data, 1).unwrap();
    assert_eq!(r.mani_acc, r.original_acc);
    assert_eq!(r.safemark_acc, r.original_acc);
}

#[test]
fn minibatches_are_seeded() {
    let (editor, codec, data) = setup(8);
    let cfg = TrainConfig::default();
    let a = minibatch(&codec, &data, editor.prompts(), &cfg, 7).unwrap();
    let b = minibatch(&codec, &data, editor.prompts(), &cfg, 7).unwrap();
    let oa = objective(&editor, &codec, editor.theta0(), &a, &cfg).unwrap();
    let ob = objective(&editor, &codec, editor.theta0(), &b, &cfg).unwrap();
    assert_eq!(oa.value(oa.total).to_bits(), ob.value(ob.total).to_bits());
    assert_eq!(oa.value(oa.sem), 0.0);
}
