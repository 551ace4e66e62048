use nirvana_core::numerics::Rng;
use nirvana_core::rules::{
    self, chunkwise_gated_delta, init_state, oracle, read, sample, scan, scan_with, step, Decay,
    GateValues, MemoryState, RuleId, RuleOptions, Sequence,
};

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn with_gates(seq: &Sequence, f: impl Fn(&GateValues) -> GateValues) -> Sequence {
    Sequence {
        gates: seq.gates.iter().map(f).collect(),
        ..seq.clone()
    }
}

fn dims(rng: &mut Rng) -> (usize, usize, usize) {
    (1 + rng.below(32), 1 + rng.below(8), 1 + rng.below(8))
}

#[test]
fn naive_linear_matches_quadratic_oracle_exactly_on_integers() {
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let (t, dk, dv) = dims(&mut rng);
        let seq = sample::integer_sequence(t, dk, dv, &mut rng);
        let out = scan(RuleId::NaiveLinear, &seq).unwrap();
        let want = oracle::quadratic_linear_attention(&seq.keys, &seq.values, &seq.queries);
        assert_eq!(out, want, "seed {seed}");
    }
}

#[test]
fn naive_linear_matches_quadratic_oracle_on_floats() {
    for seed in 0..50 {
        let mut rng = Rng::new(1000 + seed);
        let (t, dk, dv) = dims(&mut rng);
        let seq = sample::sequence(RuleId::NaiveLinear, t, dk, dv, &mut rng);
        let out = scan(RuleId::NaiveLinear, &seq).unwrap();
        let want = oracle::quadratic_linear_attention(&seq.keys, &seq.values, &seq.queries);
        assert!(max_abs_diff(&out, &want) < 1e-12);
    }
}

#[test]
fn swa_with_large_capacity_is_attention() {
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let (t, dk, dv) = dims(&mut rng);
        let seq = sample::sequence(RuleId::Swa, t, dk, dv, &mut rng);
        let swa = scan_with(RuleId::Swa, &seq, &RuleOptions::window(t + rng.below(4))).unwrap();
        let att = scan(RuleId::Attention, &seq).unwrap();
        assert_eq!(swa, att);
        let want = oracle::causal_attention(&seq.keys, &seq.values, &seq.queries, None);
        assert!(max_abs_diff(&att, &want) < 1e-12);
    }
}

#[test]
fn swa_matches_windowed_attention_oracle() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let (t, dk, dv) = dims(&mut rng);
        let w = 1 + rng.below(6);
        let seq = sample::sequence(RuleId::Swa, t, dk, dv, &mut rng);
        let swa = scan_with(RuleId::Swa, &seq, &RuleOptions::window(w)).unwrap();
        let want = oracle::causal_attention(&seq.keys, &seq.values, &seq.queries, Some(w));
        assert!(max_abs_diff(&swa, &want) < 1e-12);
    }
}

#[test]
fn exact_write_for_delta_and_longhorn() {
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let (t, dk, dv) = dims(&mut rng);
        for rule in [RuleId::DeltaNet, RuleId::Longhorn] {
            let seq = sample::sequence(rule, t, dk, dv, &mut rng);
            let mut s = init_state(rule, dk, dv, None).unwrap();
            for i in 0..t {
                s = step(&s, rule, &seq.keys[i], &seq.values[i], &seq.gates[i]).unwrap();
            }
            let k = rng.unit_vector(dk);
            let v = rng.normal_vec(dv, 1.0);
            let g = if rule == RuleId::DeltaNet {
                GateValues::none().beta(1.0)
            } else {
                GateValues::none().delta(1.0)
            };
            let s = step(&s, rule, &k, &v, &g).unwrap();
            let r = read(&s, rule, &k).unwrap();
            for (a, b) in r.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12, "{rule} seed {seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn reduction_lattice() {
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let (t, dk, dv) = dims(&mut rng);
        let base = sample::sequence(RuleId::DeltaNet, t, dk, dv, &mut rng);
        let delta = scan(RuleId::DeltaNet, &base).unwrap();
        let naive = scan(RuleId::NaiveLinear, &base).unwrap();

        let gdn = with_gates(&base, |g| g.clone().alpha(1.0));
        assert!(max_abs_diff(&scan(RuleId::GatedDeltaNet, &gdn).unwrap(), &delta) < 1e-12);

        let rwkv = with_gates(&base, |g| g.clone().alpha_vec(vec![1.0; dk]));
        assert!(max_abs_diff(&scan(RuleId::Rwkv7, &rwkv).unwrap(), &delta) < 1e-12);

        let gla = with_gates(&base, |_| GateValues::none().alpha_vec(vec![1.0; dk]));
        assert!(max_abs_diff(&scan(RuleId::Gla, &gla).unwrap(), &naive) < 1e-12);

        let poly = with_gates(&base, |_| GateValues::none().p_degree(1));
        assert!(max_abs_diff(&scan(RuleId::PolySketch, &poly).unwrap(), &naive) < 1e-12);

        let mamba = with_gates(&base, |_| GateValues::none().alpha(1.0).beta(1.0));
        assert!(max_abs_diff(&scan(RuleId::Mamba2, &mamba).unwrap(), &naive) < 1e-12);
    }
}

#[test]
fn matrix_rules_are_linear_in_values() {
    for rule in RuleId::ALL.into_iter().filter(|r| !r.is_set_rule()) {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let (t, dk, _) = dims(&mut rng);
            let dv = if rule == RuleId::Hgrn2 { dk } else { 1 + rng.below(8) };
            let seq = sample::sequence(rule, t, dk, dv, &mut rng);
            let c = rng.uniform_range(-3.0, 3.0);
            let scaled = Sequence {
                values: seq.values.iter().map(|v| v.iter().map(|x| c * x).collect()).collect(),
                ..seq.clone()
            };
            let a = scan(rule, &seq).unwrap();
            let b = scan(rule, &scaled).unwrap();
            let ca: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| c * x).collect()).collect();
            assert!(max_abs_diff(&b, &ca) < 1e-12, "{rule} seed {seed}");
        }
    }
}

#[test]
fn every_rule_is_causal() {
    for rule in RuleId::ALL {
        for seed in 0..50 {
            let mut rng = Rng::new(seed);
            let t = 2 + rng.below(20);
            let dk = 1 + rng.below(6);
            let dv = if rule == RuleId::Hgrn2 { dk } else { 1 + rng.below(6) };
            let seq = sample::sequence(rule, t, dk, dv, &mut rng);
            let j = 1 + rng.below(t - 1);
            let mut other = seq.clone();
            for s in j..t {
                other.keys[s] = rng.unit_vector(dk);
                other.values[s] = rng.normal_vec(dv, 1.0);
                other.gates[s] = sample::gates(rule, dk, dv, &mut rng);
                other.queries[s] = rng.unit_vector(dk);
            }
            let opts = RuleOptions::window(3);
            let a = scan_with(rule, &seq, &opts).unwrap();
            let b = scan_with(rule, &other, &opts).unwrap();
            assert_eq!(a[..j], b[..j], "{rule} seed {seed} j {j}");
        }
    }
}

#[test]
fn retnet_decay_contracts_geometrically() {
    let mut rng = Rng::new(5);
    let (dk, dv) = (5, 4);
    let mut s = init_state(RuleId::RetNet, dk, dv, None).unwrap();
    let alpha = 0.8;
    for _ in 0..6 {
        let g = GateValues::none().alpha(alpha);
        s = step(&s, RuleId::RetNet, &rng.normal_vec(dk, 1.0), &rng.normal_vec(dv, 1.0), &g).unwrap();
    }
    let n0 = s.matrix().unwrap().frobenius_norm();
    for n in 1..=20 {
        let g = GateValues::none().alpha(alpha);
        s = step(&s, RuleId::RetNet, &rng.normal_vec(dk, 1.0), &vec![0.0; dv], &g).unwrap();
        let want = alpha.powi(n) * n0;
        let got = s.matrix().unwrap().frobenius_norm();
        assert!((got - want).abs() <= 1e-12 * want.max(1.0), "step {n}: {got} vs {want}");
    }
}

#[test]
fn no_write_gates_leave_memory_empty() {
    let cases: Vec<(RuleId, GateValues)> = vec![
        (RuleId::DeltaNet, GateValues::none().beta(0.0)),
        (RuleId::Longhorn, GateValues::none().delta(0.0)),
        (RuleId::Mamba2, GateValues::none().alpha(0.7).beta(0.0)),
        (RuleId::GatedDeltaNet, GateValues::none().alpha(0.7).beta(0.0)),
        (RuleId::Rwkv7, GateValues::none().alpha_vec(vec![0.7; 3]).beta(0.0)),
        (RuleId::Hgrn2, GateValues::none().a_vec(vec![1.0; 3])),
        (RuleId::Ttt, GateValues::none().eta(0.0)),
        (RuleId::Titans, GateValues::none().alpha(0.9).eta(0.0)),
    ];
    let mut rng = Rng::new(1);
    for (rule, g) in cases {
        let mut seq = sample::sequence(rule, 10, 3, 3, &mut rng);
        seq.gates = vec![g; 10];
        for o in scan(rule, &seq).unwrap() {
            assert_eq!(o, vec![0.0; 3], "{rule}");
        }
    }
}

#[test]
fn titans_two_line_update_matches_hand_unroll() {
    let mut rng = Rng::new(9);
    let (dk, dv) = (3, 2);
    let seq = sample::sequence(RuleId::Titans, 6, dk, dv, &mut rng);
    let mut m = vec![vec![0.0; dk]; dv];
    let mut s = vec![vec![0.0; dk]; dv];
    let out = scan(RuleId::Titans, &seq).unwrap();
    for t in 0..6 {
        let (k, v) = (&seq.keys[t], &seq.values[t]);
        let (alpha, eta) = match (&seq.gates[t].alpha, seq.gates[t].eta) {
            (Some(Decay::Scalar(a)), Some(e)) => (*a, e),
            _ => unreachable!(),
        };
        let mk: Vec<f64> = m.iter().map(|r| r.iter().zip(k).map(|(a, b)| a * b).sum()).collect();
        for i in 0..dv {
            for j in 0..dk {
                s[i][j] = eta * s[i][j] - eta * 2.0 * (mk[i] - v[i]) * k[j];
                m[i][j] = alpha * m[i][j] + s[i][j];
            }
        }
        let want: Vec<f64> = m
            .iter()
            .map(|r| r.iter().zip(&seq.queries[t]).map(|(a, b)| a * b).sum())
            .collect();
        for (a, b) in out[t].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn ttt_step_is_gradient_descent_on_squared_error() {
    use nirvana_core::autodiff::finite_diff;
    use nirvana_core::Tensor;
    let mut rng = Rng::new(4);
    let (dk, dv) = (3, 2);
    let m0 = rng.normal_tensor(&[dv, dk], 1.0);
    let k = rng.normal_vec(dk, 1.0);
    let v = rng.normal_vec(dv, 1.0);
    let eta = 0.05;
    let loss = |m: &Tensor| -> f64 {
        (0..dv)
            .map(|i| {
                let u: f64 = m.row(i).iter().zip(&k).map(|(a, b)| a * b).sum();
                (u - v[i]) * (u - v[i])
            })
            .sum()
    };
    let grad = finite_diff(loss, &m0, 1e-6);
    let next = step(&MemoryState::Matrix(m0.clone()), RuleId::Ttt, &k, &v, &GateValues::none().eta(eta)).unwrap();
    let next = next.matrix().unwrap();
    for ((n, m), g) in next.data().iter().zip(m0.data()).zip(grad.data()) {
        assert!((n - (m - eta * g)).abs() < 1e-8);
    }
}

#[test]
fn normalized_keys_only_for_delta_family() {
    let opts = RuleOptions {
        normalize_keys: true,
        ..Default::default()
    };
    let k = [3.0, 4.0];
    let v = [1.0];
    let s = init_state(RuleId::DeltaNet, 2, 1, None).unwrap();
    let s = rules::step_with(&s, RuleId::DeltaNet, &k, &v, &GateValues::none().beta(1.0), &opts).unwrap();
    // unit key [0.6, 0.8] written with β = 1 → M = v kᵀ
    let m = s.matrix().unwrap();
    assert!((m.data()[0] - 0.6).abs() < 1e-15 && (m.data()[1] - 0.8).abs() < 1e-15);
    let s = init_state(RuleId::NaiveLinear, 2, 1, None).unwrap();
    let s = rules::step_with(&s, RuleId::NaiveLinear, &k, &v, &GateValues::none(), &opts).unwrap();
    assert_eq!(s.matrix().unwrap().data(), &[3.0, 4.0]);
}

fn gated_delta_seq(rng: &mut Rng, t: usize, dk: usize, dv: usize) -> Sequence {
    sample::sequence(RuleId::GatedDeltaNet, t, dk, dv, rng)
}

fn rel_err_per_token(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            x.iter().zip(y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs())) / scale
        })
        .fold(0.0, f64::max)
}

#[test]
fn chunkwise_matches_recurrent() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let seq = gated_delta_seq(&mut rng, 64, 8, 6);
        let rec = scan(RuleId::GatedDeltaNet, &seq).unwrap();
        for chunk in [1, 8, 64] {
            let ch = chunkwise_gated_delta(&seq, chunk).unwrap();
            let e = rel_err_per_token(&ch, &rec);
            let tol = if chunk == 1 { 1e-12 } else { 1e-10 };
            assert!(e < tol, "seed {seed} chunk {chunk}: {e}");
        }
        let ragged = chunkwise_gated_delta(&seq, 7).unwrap();
        assert!(rel_err_per_token(&ragged, &rec) < 1e-10);
    }
}

#[test]
fn recurrent_gated_delta_matches_dense_unroll() {
    let mut rng = Rng::new(3);
    let seq = gated_delta_seq(&mut rng, 16, 4, 3);
    let alphas: Vec<f64> = seq
        .gates
        .iter()
        .map(|g| match g.alpha {
            Some(Decay::Scalar(a)) => a,
            _ => unreachable!(),
        })
        .collect();
    let betas: Vec<f64> = seq.gates.iter().map(|g| g.beta.unwrap()).collect();
    let dense = oracle::dense_gated_delta(&seq.keys, &seq.values, &alphas, &betas, &seq.queries);
    let rec = scan(RuleId::GatedDeltaNet, &seq).unwrap();
    assert!(max_abs_diff(&dense, &rec) < 1e-12);
}

#[test]
fn chunk_zero_is_rejected() {
    let mut rng = Rng::new(0);
    let seq = gated_delta_seq(&mut rng, 4, 2, 2);
    assert!(chunkwise_gated_delta(&seq, 0).is_err());
}
