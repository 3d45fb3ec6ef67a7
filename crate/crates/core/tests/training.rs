use flattenet::head::{FlattenConfig, Target};
use flattenet::tape::Tape;
use flattenet::toylab::task::render_heatmap;
use flattenet::toylab::{
    decode_plane, gen_task, toy_model, train, OptimConfig, OptimKind, Schedule, SyntheticTask, ToyBackboneSpec, TrainOptions,
};
use flattenet::{FlatteNet, Formulation, Tensor};

fn tiny_head() -> FlattenConfig {
    FlattenConfig::from_json(
        r#"{"name":"tiny","c_in":8,"layers":[{"k":3,"s":1,"g1":2,"g2":2,"g3":2}],"s2":2,"predictor":{"classes":1,"mode":"affine-after-R"}}"#,
    )
    .unwrap()
}

fn tiny_backbone() -> ToyBackboneSpec {
    ToyBackboneSpec {
        widths: vec![8, 8],
        ..Default::default()
    }
}

// backbone stride 4, head ×2 up: heatmaps at stride 2
fn tiny_task(kind_seg: bool) -> SyntheticTask {
    let mut t = if kind_seg {
        SyntheticTask::segmentation(16, 3, 5)
    } else {
        SyntheticTask::keypoints(16, 2, 5)
    };
    t.stride = 2;
    t
}

fn opts(kind: OptimKind, form: Formulation, dataset_batches: Option<u64>) -> TrainOptions {
    TrainOptions {
        epochs: 3,
        steps_per_epoch: 4,
        batch_size: 4,
        optim: OptimConfig {
            kind,
            schedule: Schedule::Constant,
        },
        formulation: form,
        dataset_batches,
        eval_size: 4,
    }
}

fn model(task: &SyntheticTask) -> FlatteNet<f64> {
    let mut m = toy_model::<f64>(&tiny_head(), task, &tiny_backbone(), 9).unwrap();
    // a zero predictor would hide the head's contribution to the trajectory
    let w = m.predictor.linear.weight;
    let dims = m.store.get(w).value.dims();
    m.store.get_mut(w).value = Tensor::uniform(dims, 0.3, 17);
    m
}

fn max_param_diff(a: &FlatteNet<f64>, b: &FlatteNet<f64>) -> f64 {
    a.store
        .iter()
        .zip(b.store.iter())
        .map(|((_, p), (_, q))| {
            assert_eq!(p.name, q.name);
            p.value.max_abs_diff(&q.value).unwrap()
        })
        .fold(0.0, f64::max)
}

#[test]
fn folded_training_tracks_unfolded_trajectory() {
    for seg in [false, true] {
        let task = tiny_task(seg);
        for kind in [OptimKind::adam(1e-2), OptimKind::sgd(0.05, 0.9, 1e-4)] {
            let mut a = model(&task);
            let mut b = model(&task);
            let ha = train(&mut a, &task, &opts(kind, Formulation::Unfolded, None)).unwrap();
            let hb = train(&mut b, &task, &opts(kind, Formulation::Folded, None)).unwrap();
            let d = max_param_diff(&a, &b);
            assert!(d <= 1e-8, "seg={seg} {kind:?}: params differ by {d:e}");
            assert!(max_param_diff(&a, &model(&task)) > 1e-3, "parameters did not move");
            for (ra, rb) in ha.records.iter().zip(&hb.records) {
                assert!((ra.loss - rb.loss).abs() <= 1e-8 * ra.loss.abs().max(1.0));
            }
        }
    }
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let task = tiny_task(false);
    let mut m = model(&task);
    let before = m.clone();
    let h = train(&mut m, &task, &opts(OptimKind::sgd(0.0, 0.0, 0.0), Formulation::Unfolded, Some(1))).unwrap();
    for r in &h.records {
        assert_eq!(r.loss, h.initial_loss, "epoch {}", r.epoch);
    }
    assert_eq!(max_param_diff(&m, &before), 0.0);
}

#[test]
fn same_seed_same_history() {
    let task = tiny_task(false);
    let o = opts(OptimKind::adam(1e-2), Formulation::Unfolded, None);
    let (mut a, mut b) = (model(&task), model(&task));
    assert_eq!(train(&mut a, &task, &o).unwrap(), train(&mut b, &task, &o).unwrap());
}

#[test]
fn heatmap_argmax_recovers_generator_centres() {
    let task = SyntheticTask::keypoints(64, 3, 11);
    let batch = gen_task::<f64>(&task, 6, 0).unwrap();
    let Target::Continuous(heat) = &batch.target else { panic!() };
    let grid = task.grid_side();
    let s = task.stride as f64;
    for (n, pts) in batch.keypoints.iter().enumerate() {
        for (k, &(iy, ix)) in pts.iter().enumerate() {
            let plane = heat.plane(n, k);
            let best = (0..plane.len()).fold(0, |b, i| if plane[i] > plane[b] { i } else { b });
            // image pixel back to heatmap pixel
            let (gy, gx) = ((iy + 0.5) / s - 0.5, (ix + 0.5) / s - 0.5);
            assert_eq!((best / grid, best % grid), (gy.round() as usize, gx.round() as usize));
            let (dy, dx) = decode_plane(plane, grid, grid).unwrap();
            assert!((dy - gy).abs() <= 0.25 && (dx - gx).abs() <= 0.25, "({dy},{dx}) vs ({gy},{gx})");
        }
    }
}

#[test]
fn rendered_heatmap_peaks_at_centre() {
    let h = render_heatmap(8, 3.0, 5.0, 0.5);
    assert_eq!(h[3 * 8 + 5], 1.0);
    assert!(h.iter().all(|&v| v <= 1.0));
    let one_hot = render_heatmap(8, 2.4, 6.6, 0.0);
    assert_eq!(one_hot.iter().sum::<f64>(), 1.0);
    assert_eq!(one_hot[2 * 8 + 7], 1.0);
}

#[test]
fn gradients_add_across_backward_calls() {
    let task = tiny_task(false);
    let mut m = model(&task);
    let batch = gen_task::<f64>(&task, 2, 0).unwrap();
    let target = batch.grid_target().unwrap();
    let run = |m: &mut FlatteNet<f64>| {
        let tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let loss = m.loss(&tape, x, &target, Formulation::Unfolded).unwrap();
        tape.backward(loss, &mut m.store).unwrap();
    };
    m.store.zero_grad();
    run(&mut m);
    let once: Vec<Tensor<f64>> = m.store.iter().map(|(_, p)| p.grad.clone()).collect();
    run(&mut m);
    for ((_, p), g) in m.store.iter().zip(&once) {
        assert_eq!(p.grad, g.scale(2.0), "{}", p.name);
    }
    m.store.zero_grad();
    assert!(m.store.iter().all(|(_, p)| p.grad.max_abs() == 0.0));
}
