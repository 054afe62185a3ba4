use moodshift_core::attention::{AttentionConfig, AttentionKind};
use moodshift_core::data::ChunkDataset;
use moodshift_core::graph::Graph;
use moodshift_core::labels::{make_chunks, ChunkingConfig};
use moodshift_core::models::{Architecture, ModelConfig, Network};
use moodshift_core::synth::{generate_synthetic, SyntheticDatasetSpec};
use moodshift_core::train::{
    plan_folds, run_grid, subject_majorities, HyperGrid, Hyperparams, TrainOptions,
};
use moodshift_core::Tensor;
use proptest::prelude::*;

const SIDE: usize = 8;

fn dataset(seed: u64) -> ChunkDataset {
    let spec = SyntheticDatasetSpec {
        num_subjects: 5,
        videos_per_subject: 3,
        frames_per_video: 10,
        valence_walk_step: 3,
        seed,
        frame_height: SIDE,
        frame_width: SIDE,
        ..Default::default()
    };
    let (tracks, frames) = generate_synthetic(&spec).unwrap();
    let cfg = ChunkingConfig::default();
    let chunks = tracks.iter().flat_map(|t| make_chunks(t, &cfg).unwrap().chunks).collect();
    ChunkDataset::new(frames, chunks, cfg.window_k).unwrap()
}

fn small(arch: Architecture, kind: AttentionKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(arch, AttentionConfig::of(kind));
    cfg.branch.input_shape = [5, SIDE, SIDE, 3];
    cfg.branch.dense_units = 8;
    cfg.attention.lstm_hidden = 4;
    cfg.fusion.fused_feature_width = 16;
    cfg.fusion.mlp_hidden = 8;
    cfg
}

#[test]
fn two_rate_grid_selects_the_same_point_on_rerun() {
    let data = dataset(11);
    let cfg = small(Architecture::OneCnn, AttentionKind::None);
    let plan = plan_folds(&subject_majorities(data.chunks()), 5, 11).unwrap();
    let grid = HyperGrid {
        learning_rates: vec![1e-2, 1e-3],
        ..HyperGrid::singleton(&Hyperparams {
            batch_size: 16,
            ..Default::default()
        })
    };
    let opts = TrainOptions {
        epochs: 3,
        ..Default::default()
    };
    let go = || {
        let mut seen = Vec::new();
        let out = run_grid(&cfg, &data, &grid, &plan, 11, &opts, &mut |r| {
            seen.push((r.hyper.learning_rate, r.fold));
            Ok(())
        })
        .unwrap();
        (out, seen)
    };
    let (a, seen) = go();
    let (b, _) = go();
    assert_eq!(seen.len(), 2 * 5);
    assert_eq!(a.records.len(), 2);
    assert_eq!(a.best, b.best);
    assert_eq!(a.records, b.records);
    let best = a.best_record();
    assert!(a.records.iter().all(|r| r.mean <= best.mean));
}

#[test]
fn predictions_are_distributions_for_every_architecture() {
    let data = dataset(3);
    let batch = data.batch(&[0, 1, 2]);
    for arch in [Architecture::OneCnn, Architecture::TwoCnn, Architecture::TwoCnnMlp] {
        let net = Network::new(&small(arch, AttentionKind::Sst), 5).unwrap();
        for row in net.predict_batch(&batch).unwrap() {
            assert!(row.iter().all(|p| *p > 0.0 && *p < 1.0), "{arch:?}: {row:?}");
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn kind() -> impl Strategy<Value = AttentionKind> {
    prop::sample::select(vec![
        AttentionKind::Spatial,
        AttentionKind::Temporal,
        AttentionKind::Sst,
        AttentionKind::Pst,
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gates_stay_strictly_inside_unit_interval(
        k in kind(),
        init in any::<u64>(),
        pixels in prop::collection::vec(0.0f64..=1.0, 2 * 5 * SIDE * SIDE * 3),
    ) {
        let net = Network::new(&small(Architecture::OneCnn, k), init).unwrap();
        let mut g = Graph::inference();
        let x = g.input(Tensor::from_vec(&[2, 5, SIDE, SIDE, 3], pixels).unwrap());
        let f = net.forward(&mut g, x);
        let gates = f.mood_branch.gates.expect("attention configured");
        for v in [gates.spatial_gate, gates.temporal_gate].into_iter().flatten() {
            for &s in g.value(v).data() {
                prop_assert!(s > 0.0 && s < 1.0, "{k:?} gate {s}");
            }
        }
    }
}
