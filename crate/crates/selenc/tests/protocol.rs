mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use selenc::data::synthetic;
use selenc::protocol::{
    handle_dropout, mask_plan, open, run_protocol, seal, server_aggregate, Action, ClientContext, DpSettings,
    GlobalView, Party, PartialModel, ProtocolError, RoundConfig,
};
use selenc_core::mask::{select_mask, EncryptionMask};
use selenc_core::model::{Dataset, ModelShape};
use selenc_core::rng;

use common::{mock_keys, oracle_fedavg, paillier_keys};

fn setup(shape: &ModelShape, n: usize, seed: u64) -> Vec<Dataset> {
    synthetic(shape, n, 6, 0.05, seed).unwrap()
}

fn oracle(cfg: &RoundConfig, shape: &ModelShape, data: &[Dataset]) -> Vec<f64> {
    oracle_fedavg(shape, data, &cfg.weights, cfg.rounds, cfg.local_steps, cfg.lr, cfg.seed, &cfg.dropout)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn p_zero_is_plain_fedavg_bit_for_bit() {
    let shape = ModelShape::mlp(3, 4, 2).unwrap();
    let data = setup(&shape, 3, 1);
    let cfg = RoundConfig::new(vec![0.5, 0.3, 0.2], 3, 0.0, 4);
    let want = oracle(&cfg, &shape, &data);
    for keys in [mock_keys(), paillier_keys().clone()] {
        let out = run_protocol(&cfg, &shape, &data, &keys).unwrap();
        assert_eq!(out.final_model, want);
        assert_eq!(out.mask.encrypted_count(), 0);
    }
}

#[test]
fn p_one_mock_is_exact() {
    let shape = ModelShape::mlp(3, 4, 2).unwrap();
    let data = setup(&shape, 3, 2);
    let cfg = RoundConfig::new(vec![0.2, 0.3, 0.5], 2, 1.0, 9);
    let out = run_protocol(&cfg, &shape, &data, &mock_keys()).unwrap();
    assert_eq!(out.final_model, oracle(&cfg, &shape, &data));
    assert_eq!(out.mask.encrypted_count(), shape.total_params());
}

#[test]
fn p_one_paillier_linear_twenty_params() {
    let shape = ModelShape::linear(4, 4).unwrap();
    assert_eq!(shape.total_params(), 20);
    let data = setup(&shape, 3, 3);
    let cfg = RoundConfig::new(vec![0.5, 0.25, 0.25], 2, 1.0, 5);
    let out = run_protocol(&cfg, &shape, &data, paillier_keys()).unwrap();
    let err = max_abs_diff(&out.final_model, &oracle(&cfg, &shape, &data));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn paillier_partial_masks_stay_within_fixed_point_tolerance() {
    let shape = ModelShape::mlp(2, 3, 1).unwrap();
    for (n, rounds, p) in [(2, 1, 0.25), (4, 2, 0.5), (5, 3, 0.25)] {
        let data = setup(&shape, n, n as u64);
        let w = common::simplex(n, {
            let mut s = rng::seeded(n as u64);
            move || rng::unit_f64(&mut s)
        });
        let cfg = RoundConfig::new(w, rounds, p, 13);
        let out = run_protocol(&cfg, &shape, &data, paillier_keys()).unwrap();
        let want = oracle(&cfg, &shape, &data);
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = n as f64 * (-20f64).exp2() * scale + (-40f64).exp2();
        let err = max_abs_diff(&out.final_model, &want);
        assert!(err <= tol, "n={n} T={rounds} p={p}: {err} > {tol}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mock_matches_fedavg_exactly(
        n in 1usize..=8,
        rounds in 1usize..=3,
        p_idx in 0usize..4,
        seed in any::<u64>(),
    ) {
        let p = [0.0, 0.25, 0.5, 1.0][p_idx];
        let shape = ModelShape::mlp(2, 3, 2).unwrap();
        let data = setup(&shape, n, seed);
        let mut s = rng::seeded(seed);
        let w = common::simplex(n, || rng::unit_f64(&mut s));
        let cfg = RoundConfig::new(w, rounds, p, seed);
        let out = run_protocol(&cfg, &shape, &data, &mock_keys()).unwrap();
        prop_assert_eq!(out.final_model, oracle(&cfg, &shape, &data));
    }
}

#[test]
fn server_never_decrypts() {
    let shape = ModelShape::mlp(3, 4, 2).unwrap();
    let data = setup(&shape, 3, 4);
    let cfg = RoundConfig::new(vec![0.4, 0.4, 0.2], 2, 0.3, 1);
    let out = run_protocol(&cfg, &shape, &data, paillier_keys()).unwrap();
    assert!(!out.audit.is_empty());
    assert!(out.audit.iter().all(|e| !(e.party == Party::Server && e.action == Action::Decrypt)));
    assert!(out.audit.iter().any(|e| matches!(e.party, Party::Client(_)) && e.action == Action::Decrypt));
    assert!(out.audit.iter().filter(|e| e.action == Action::Aggregate).all(|e| e.party == Party::Server));
    // one mask selection, by the lowest client present in round 1
    let picks: Vec<_> = out.audit.iter().filter(|e| e.action == Action::SelectMask).collect();
    assert_eq!(picks.len(), 1);
    assert_eq!(picks[0].party, Party::Client(0));
}

#[test]
fn agreed_mask_is_top_p_of_the_aggregate_map() {
    let shape = ModelShape::mlp(3, 4, 2).unwrap();
    let data = setup(&shape, 3, 5);
    let cfg = RoundConfig::new(vec![0.5, 0.3, 0.2], 1, 0.3, 2);
    let keys = paillier_keys();
    let plan = mask_plan(&cfg, &shape, &data, keys).unwrap();
    let out = run_protocol(&cfg, &shape, &data, keys).unwrap();
    assert_eq!(out.mask, plan.mask);
    // aggregate of the clear maps, selected in the clear
    let n = shape.total_params();
    let plain: Vec<f64> =
        (0..n).map(|i| plan.local.iter().map(|(c, m)| cfg.weights[*c] * m[i]).sum()).collect();
    // weights are fixed-point at 2^-20 under Paillier
    let tol = 3.0 * (-20f64).exp2() * plain.iter().fold(0.0f64, |m, v| m.max(*v)) + (-40f64).exp2();
    assert!(max_abs_diff(&plain, &plan.aggregate) <= tol);
    assert_eq!(select_mask(&plan.aggregate, 0.3).unwrap(), plan.mask);
}

#[test]
fn upload_bytes_are_ciphertext_plus_clear() {
    let shape = ModelShape::mlp(3, 4, 2).unwrap();
    let data = setup(&shape, 2, 6);
    let cfg = RoundConfig::new(vec![0.5, 0.5], 2, 0.5, 3);
    let keys = paillier_keys();
    let out = run_protocol(&cfg, &shape, &data, keys).unwrap();
    let n = shape.total_params();
    let hidden = out.mask.encrypted_count();
    // what the wire actually carries for one sealed model
    let sealed = seal(keys.public(), &vec![0.25; n], &out.mask, 1, &mut rng::seeded(0)).unwrap();
    let wire = keys.public().serialize(sealed.encrypted.as_ref().unwrap()).len() as u64 + 8 * (n - hidden) as u64;
    assert_eq!(sealed.reported_bytes(keys.public()), wire);
    let train: Vec<_> = out.metrics.iter().filter(|r| r.phase == "train").collect();
    assert_eq!(train.len(), 4);
    for r in &train {
        assert_eq!(r.bytes_up, wire);
        assert_eq!(r.bytes_down, if r.round == 1 { 0 } else { wire });
    }
}

#[test]
fn dp_noise_touches_only_clear_coordinates() {
    let shape = ModelShape::mlp(3, 4, 2).unwrap();
    let data = setup(&shape, 1, 7);
    let keys = mock_keys();
    let mask = select_mask(&(0..shape.total_params()).map(|i| (i % 7) as f64).collect::<Vec<_>>(), 0.4).unwrap();
    let start = shape.init(3).into_vec();
    let mut plain_cfg = RoundConfig::new(vec![1.0], 1, 0.4, 8);
    plain_cfg.threads = 1;
    let dp_cfg = RoundConfig { dp: Some(DpSettings { b: 0.1, clip: 1.0 }), ..plain_cfg.clone() };
    let run = |cfg: &RoundConfig| {
        let ctx = ClientContext { id: 0, data: &data[0], shape: &shape, keys: &keys, cfg };
        ctx.update(GlobalView::Initial(&start), &mask, 1).unwrap()
    };
    let (a, b) = (run(&plain_cfg), run(&dp_cfg));
    assert_eq!(a.epsilon, f64::INFINITY);
    assert!(b.epsilon.is_finite() && b.epsilon > 0.0);
    let (wa, wb) = (open(&keys, &a.model, &mask).unwrap(), open(&keys, &b.model, &mask).unwrap());
    for i in 0..wa.len() {
        if mask.contains(i) {
            assert_eq!(wa[i].to_bits(), wb[i].to_bits(), "masked coordinate {i}");
        } else {
            assert_ne!(wa[i], wb[i], "clear coordinate {i}");
        }
    }
}

#[test]
fn zero_local_steps_return_the_global_model() {
    let shape = ModelShape::mlp(2, 3, 1).unwrap();
    let data = setup(&shape, 1, 8);
    let keys = paillier_keys();
    let mut cfg = RoundConfig::new(vec![1.0], 1, 0.5, 1);
    cfg.local_steps = 0;
    let mask = select_mask(&vec![1.0; shape.total_params()], 0.5).unwrap();
    let w = shape.init(4).into_vec();
    let global = seal(keys.public(), &w, &mask, 1, &mut rng::seeded(1)).unwrap();
    let ctx = ClientContext { id: 0, data: &data[0], shape: &shape, keys, cfg: &cfg };
    let up = ctx.update(GlobalView::Partial(&global), &mask, 2).unwrap();
    let back = open(keys, &up.model, &mask).unwrap();
    assert!(max_abs_diff(&back, &w) < 1e-11);
    for i in mask.complement_indices() {
        assert_eq!(back[i], w[i]);
    }
}

#[test]
fn server_aggregate_examples() {
    let keys = paillier_keys();
    let pk = keys.public();
    let mask = EncryptionMask::from_indices(4, &[1, 2], 0.5).unwrap();

    // a single upload at weight one comes back unchanged
    let w = [0.5, -1.25, 3.0, 7.5];
    let one = seal(pk, &w, &mask, 1, &mut rng::seeded(2)).unwrap();
    let agg = server_aggregate(pk, &[&one], &[1.0], 1).unwrap();
    assert!(max_abs_diff(&open(keys, &agg, &mask).unwrap(), &w) < 1e-11);

    // clear parts average in the clear
    let a = seal(pk, &[1.0, 0.0, 0.0, 3.0], &mask, 1, &mut rng::seeded(3)).unwrap();
    let b = seal(pk, &[3.0, 0.0, 0.0, 5.0], &mask, 1, &mut rng::seeded(4)).unwrap();
    assert_eq!(server_aggregate(pk, &[&a, &b], &[0.5, 0.5], 1).unwrap().clear, vec![2.0, 4.0]);

    // decrypted merge equals the plain weighted average of full models
    let models = [[0.1, 0.2, 0.3, 0.4], [-1.0, 2.0, -3.0, 4.0], [9.0, 8.0, 7.0, 6.0]];
    let alphas = [0.2, 0.5, 0.3];
    let ups: Vec<PartialModel> =
        models.iter().enumerate().map(|(i, m)| seal(pk, m, &mask, 1, &mut rng::seeded(i as u64)).unwrap()).collect();
    let refs: Vec<&PartialModel> = ups.iter().collect();
    let got = open(keys, &server_aggregate(pk, &refs, &alphas, 1).unwrap(), &mask).unwrap();
    let want: Vec<f64> = (0..4).map(|i| models.iter().zip(alphas).map(|(m, a)| a * m[i]).sum()).collect();
    assert!(max_abs_diff(&got, &want) < 1e-5, "{got:?} vs {want:?}");
}

#[test]
fn server_aggregate_rejects_foreign_masks() {
    let keys = mock_keys();
    let pk = keys.public();
    let m1 = EncryptionMask::from_indices(3, &[0], 0.3).unwrap();
    let m2 = EncryptionMask::from_indices(3, &[1], 0.3).unwrap();
    let a = seal(pk, &[1.0, 2.0, 3.0], &m1, 1, &mut rng::seeded(0)).unwrap();
    let b = seal(pk, &[1.0, 2.0, 3.0], &m2, 1, &mut rng::seeded(0)).unwrap();
    assert!(matches!(server_aggregate(pk, &[&a, &b], &[0.5, 0.5], 1), Err(ProtocolError::MaskMismatch { .. })));
    assert!(matches!(server_aggregate(pk, &[], &[], 3), Err(ProtocolError::AllDropped { round: 3 })));
    assert!(open(&keys, &a, &m2).is_err());
}

#[test]
fn dropout_renormalizes() {
    let w = handle_dropout(&[0, 1, 2], &[0, 1], &[0.5, 0.3, 0.2]).unwrap();
    assert!(max_abs_diff(&w, &[0.625, 0.375]) < 1e-15);
    assert_eq!(handle_dropout(&[0, 1, 2], &[0, 1, 2], &[0.5, 0.3, 0.2]).unwrap(), vec![0.5, 0.3, 0.2]);
    assert_eq!(handle_dropout(&[0, 1, 2], &[1], &[0.5, 0.3, 0.2]).unwrap(), vec![1.0]);
    assert!(handle_dropout(&[0, 1, 2], &[], &[0.5, 0.3, 0.2]).is_err());
}

#[test]
fn a_dropped_client_has_no_influence() {
    let shape = ModelShape::mlp(3, 4, 2).unwrap();
    let data = setup(&shape, 3, 9);
    let keys = mock_keys();
    let mut cfg = RoundConfig::new(vec![0.5, 0.3, 0.2], 2, 0.3, 6);
    cfg.dropout = BTreeMap::from([(1, BTreeSet::from([2])), (2, BTreeSet::from([2]))]);
    let with = run_protocol(&cfg, &shape, &data, &keys).unwrap();

    let never = RoundConfig::new(vec![0.625, 0.375], 2, 0.3, 6);
    let without = run_protocol(&never, &shape, &data[..2], &keys).unwrap();
    assert_eq!(with.mask, without.mask);
    assert!(max_abs_diff(&with.final_model, &without.final_model) < 1e-12);

    // dropping out of one round only
    let mut once = RoundConfig::new(vec![0.5, 0.3, 0.2], 3, 0.3, 6);
    once.dropout = BTreeMap::from([(2, BTreeSet::from([1]))]);
    let out = run_protocol(&once, &shape, &data, &keys).unwrap();
    assert!(max_abs_diff(&out.final_model, &oracle(&once, &shape, &data)) < 1e-12);
    assert!(!out.metrics.iter().any(|r| r.round == 2 && r.client == Some(1)));
}

#[test]
fn everyone_dropping_is_an_error() {
    let shape = ModelShape::linear(2, 1).unwrap();
    let data = setup(&shape, 2, 1);
    let mut cfg = RoundConfig::new(vec![0.5, 0.5], 2, 0.0, 0);
    cfg.dropout = BTreeMap::from([(2, BTreeSet::from([0, 1]))]);
    assert!(matches!(run_protocol(&cfg, &shape, &data, &mock_keys()), Err(ProtocolError::AllDropped { round: 2 })));
    let cfg = RoundConfig::new(vec![0.5, 0.5], 1, 0.0, 0);
    assert!(run_protocol(&cfg, &shape, &data[..1], &mock_keys()).is_err());
    assert!(run_protocol(&RoundConfig::new(vec![0.5, 0.6], 1, 0.0, 0), &shape, &data, &mock_keys()).is_err());
}

#[test]
fn thread_count_does_not_change_results() {
    let shape = ModelShape::mlp(3, 4, 2).unwrap();
    let data = setup(&shape, 4, 10);
    let mut cfg = RoundConfig::new(vec![0.25; 4], 2, 0.3, 11);
    cfg.dp = Some(DpSettings { b: 0.5, clip: 1.0 });
    cfg.threads = 1;
    let inline = run_protocol(&cfg, &shape, &data, paillier_keys()).unwrap();
    cfg.threads = 4;
    let pooled = run_protocol(&cfg, &shape, &data, paillier_keys()).unwrap();
    assert_eq!(inline.final_model, pooled.final_model);
    assert_eq!(inline.metrics, pooled.metrics);
    assert_eq!(inline.epsilon_total, pooled.epsilon_total);
    assert!(inline.epsilon_total.is_finite());
}

#[test]
fn epsilon_bookkeeping() {
    let shape = ModelShape::linear(3, 1).unwrap();
    let data = setup(&shape, 2, 12);
    // no DP and clear coordinates: nothing bounds the leak
    let open_cfg = RoundConfig::new(vec![0.5, 0.5], 2, 0.5, 1);
    assert_eq!(run_protocol(&open_cfg, &shape, &data, &mock_keys()).unwrap().epsilon_total, f64::INFINITY);
    // everything encrypted costs nothing
    let sealed_cfg = RoundConfig::new(vec![0.5, 0.5], 2, 1.0, 1);
    let out = run_protocol(&sealed_cfg, &shape, &data, &mock_keys()).unwrap();
    assert_eq!(out.epsilon_total, 0.0);
    // with DP, totals compose over rounds
    let dp_cfg = RoundConfig { dp: Some(DpSettings { b: 1.0, clip: 1.0 }), ..open_cfg };
    let out = run_protocol(&dp_cfg, &shape, &data, &mock_keys()).unwrap();
    let per_round: f64 = (1..=2)
        .map(|r| out.metrics.iter().find(|m| m.round == r && m.phase == "aggregate").unwrap().epsilon_round)
        .sum();
    assert!((out.epsilon_total - per_round).abs() < 1e-12);
}
