use nirvana_core::model::{read_checkpoint, write_checkpoint, Model, ModelConfig};
use nirvana_harness::ablate::{ablate, trigger_free_reference, Variant};
use nirvana_harness::tasks::{TaskKind, TaskSpec};
use nirvana_harness::train::{eval_set, loss_and_grads, train_batch, train_toy, train_with, TrainOptions};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        vocab: 20,
        d_model: 16,
        n_layers: 3,
        n_prelude: 1,
        heads: 2,
        window: 4,
        d_trig: 4,
        k: 3,
        rank: 2,
        ..ModelConfig::default()
    }
}

fn tiny_task() -> TaskSpec {
    TaskSpec {
        kind: TaskKind::AssocRecall,
        vocab: 20,
        seq_len: 24,
        n_pairs: 3,
        filler_entropy: 2.0,
        seed: 5,
    }
}

fn opts(steps: usize) -> TrainOptions {
    TrainOptions {
        steps,
        lr: 1e-2,
        batch: 2,
        eval_every: 2,
        eval_size: 4,
        ..TrainOptions::default()
    }
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let mut m = Model::init(tiny_model()).unwrap();
    let before = m.params.clone();
    let o = TrainOptions { lr: 0.0, ..opts(6) };
    let r = train_toy(&mut m, &tiny_task(), &o, None, |_| Ok(())).unwrap();
    assert_eq!(r.metrics.len(), 3);
    let l0 = r.metrics[0].loss;
    assert!(r.metrics.iter().all(|x| (x.loss - l0).abs() < 1e-12));
    assert_eq!(m.params, before);
}

#[test]
fn tiny_step_does_not_increase_loss_on_a_fixed_batch() {
    let mut m = Model::init(tiny_model()).unwrap();
    let batch = train_batch(&tiny_task(), 0, 2).unwrap();
    let (l0, _) = loss_and_grads(&m, &batch).unwrap();
    let o = TrainOptions {
        lr: 1e-6,
        eval_every: 1,
        ..opts(1)
    };
    train_with(&mut m, |_| Ok(batch.clone()), &batch, &o, None, |_| Ok(())).unwrap();
    let (l1, _) = loss_and_grads(&m, &batch).unwrap();
    assert!(l1 <= l0, "{l1} > {l0}");
    assert!(l1 < l0);
}

#[test]
fn masked_out_batches_give_zero_gradient_and_no_update() {
    let mut m = Model::init(tiny_model()).unwrap();
    let before = m.params.clone();
    let unmask = |step: usize| {
        let mut b = train_batch(&tiny_task(), step, 2)?;
        for t in &mut b {
            t.answer_mask.iter_mut().for_each(|x| *x = false);
        }
        Ok(b)
    };
    let (loss, grads) = loss_and_grads(&m, &unmask(0).unwrap()).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.iter().all(|g| g.data().iter().all(|x| *x == 0.0)));
    let evals = eval_set(&tiny_task(), 2).unwrap();
    train_with(&mut m, unmask, &evals, &opts(3), None, |_| Ok(())).unwrap();
    assert_eq!(m.params, before);
}

#[test]
fn training_reduces_loss_on_a_tiny_task() {
    let mut m = Model::init(tiny_model()).unwrap();
    let r = train_toy(&mut m, &tiny_task(), &TrainOptions { eval_every: 20, ..opts(40) }, None, |_| Ok(())).unwrap();
    let first = r.metrics.first().unwrap().loss;
    let last = r.metrics.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_aborts_with_a_trace_dump() {
    let mut m = Model::init(tiny_model()).unwrap();
    let w = m.params.get_mut("layers.1.w_q").unwrap();
    w.data_mut()[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump.jsonl");
    let err = train_toy(&mut m, &tiny_task(), &opts(3), Some(&dump), |_| Ok(())).unwrap_err();
    assert!(err.to_string().contains("non-finite"), "{err}");
    let text = std::fs::read_to_string(&dump).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // one record per post-prelude layer at the last position
    assert_eq!(lines.len(), 2);
    let rec: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(rec["position"], 23);
    assert_eq!(rec["layer"], 2);
}

#[test]
fn no_trigger_keeps_bank_zero_and_p_all_ones() {
    let spec = tiny_task();
    let runs = ablate(&tiny_model(), &spec, &[Variant::NoTrigger], &opts(4), |_, _| Ok(())).unwrap();
    for p in &runs[0].sweep {
        assert!(p.p_all_ones);
        assert!(p.loss.is_finite());
        assert!(p.state_size <= p.state_bound);
    }
    let mut m = Variant::NoTrigger.model(&tiny_model()).unwrap();
    train_toy(&mut m, &spec, &TrainOptions { freeze_bank: true, ..opts(4) }, None, |_| Ok(())).unwrap();
    assert!(m.params.get("bank").unwrap().data().iter().all(|x| *x == 0.0));
    let (_, traces) = m.forward_traced(&eval_set(&spec, 1).unwrap()[0].tokens, None).unwrap();
    assert!(traces.iter().all(|t| t.p_out.iter().all(|v| *v == 1.0) && t.p_in.iter().all(|v| *v == 1.0)));
}

#[test]
fn zero_bank_model_equals_trigger_free_hybrid() {
    for rope in [false, true] {
        let cfg = ModelConfig {
            rope_enabled: rope,
            ..tiny_model()
        };
        let mut m = Model::init(cfg).unwrap();
        // move every zero-initialized tensor off zero, then drop the bank
        let mut rng = nirvana_core::Rng::new(3);
        for t in m.params.tensors.values_mut() {
            *t = t.add(&rng.normal_tensor(t.shape(), 0.3)).unwrap();
        }
        m.params.zero_bank();
        let tokens: Vec<usize> = (0..15).map(|_| rng.below(20)).collect();
        let got = m.forward_sequence(&tokens).unwrap();
        let want = trigger_free_reference(&m, &tokens).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12, "rope {rope}: {:e}", got.max_abs_diff(&want));
    }
}

#[test]
fn full_and_no_trigger_differ_once_bank_is_nonzero() {
    let mut full = Variant::Full.model(&tiny_model()).unwrap();
    // θ and u start at zero, which hides the bank; open both paths
    let mut rng = nirvana_core::Rng::new(9);
    for (name, t) in full.params.tensors.iter_mut() {
        if name.ends_with("theta") || name.ends_with(".u") {
            *t = rng.normal_tensor(t.shape(), 1.0);
        }
    }
    let mut none = full.clone();
    none.params.zero_bank();
    let tokens = [1, 5, 7, 2, 9, 3];
    assert_ne!(full.forward_sequence(&tokens).unwrap(), none.forward_sequence(&tokens).unwrap());
}

#[test]
fn checkpoint_round_trips_byte_identically() {
    let mut m = Model::init(tiny_model()).unwrap();
    train_toy(&mut m, &tiny_task(), &opts(2), None, |_| Ok(())).unwrap();
    let mut a = Vec::new();
    write_checkpoint(&mut a, &m).unwrap();
    let back = read_checkpoint(a.as_slice()).unwrap();
    assert_eq!(back, m);
    let mut b = Vec::new();
    write_checkpoint(&mut b, &back).unwrap();
    assert_eq!(a, b);
}
