//! Brute-force oracles for pruning scores, routing and the fixed-point
//! dataflow simulator.

use std::collections::BTreeSet;

use capsbeam_core::accel::{sim_network, AccelConfig, WeightPolicy};
use capsbeam_core::capsnet::{random_bundle, route, CapsConfig};
use capsbeam_core::pruning::{
    apply_mask, kernel_l1, lakp_ml_score, lakp_score, plan_prune, prune_report, ConvNetDescription, KernelLayer,
    PruneMethod,
};
use capsbeam_core::quant::{calibrate, QuantizedNet, ReluBiasOrder};
use capsbeam_core::{PixelGrid, RfVolume, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_net(rng: &mut ChaCha8Rng, integer: bool) -> ConvNetDescription {
    let chans: Vec<usize> = (0..4).map(|_| rng.random_range(1..6)).collect();
    let layers = (0..3)
        .map(|i| {
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let n = k * k * chans[i] * chans[i + 1];
            let w = (0..n)
                .map(|_| if integer { rng.random_range(-3i32..=3) as f32 } else { rng.random_range(-1.0f32..1.0) })
                .collect();
            KernelLayer::new(format!("l{i}"), [k, k, chans[i], chans[i + 1]], w).unwrap()
        })
        .collect();
    ConvNetDescription::new(layers).unwrap()
}

/// Connected kernel sets `(cin, cout)` per distance, straight from the
/// definition: filter `q` of the layer above, channel `p` of the layer
/// below, then every kernel touching the previous set's channels.
fn connected(
    net: &ConvNetDescription,
    i: usize,
    q: usize,
    p: usize,
    r: usize,
) -> Vec<(usize, BTreeSet<(usize, usize)>)> {
    let mut out = Vec::new();
    let mut set: BTreeSet<(usize, usize)> = BTreeSet::new();
    for t in 1..=r {
        let Some(j) = i.checked_sub(t) else { break };
        let lay = &net.layers[j];
        let outs: BTreeSet<usize> = if t == 1 { [q].into() } else { set.iter().map(|&(ci, _)| ci).collect() };
        set = (0..lay.cin)
            .flat_map(|ci| (0..lay.cout).map(move |co| (ci, co)))
            .filter(|(_, co)| outs.contains(co))
            .collect();
        out.push((j, set.clone()));
    }
    for t in 1..=r {
        let j = i + t;
        if j >= net.layers.len() {
            break;
        }
        let lay = &net.layers[j];
        let ins: BTreeSet<usize> = if t == 1 { [p].into() } else { set.iter().map(|&(_, co)| co).collect() };
        set = (0..lay.cin)
            .flat_map(|ci| (0..lay.cout).map(move |co| (ci, co)))
            .filter(|(ci, _)| ins.contains(ci))
            .collect();
        out.push((j, set.clone()));
    }
    out
}

fn oracle_score(net: &ConvNetDescription, i: usize, q: usize, p: usize, r: usize) -> f64 {
    let (mut up, mut down) = (1.0, 1.0);
    for (j, set) in connected(net, i, q, p, r) {
        let sum = set.iter().map(|&(ci, co)| kernel_l1(&net.layers[j], ci, co).unwrap()).sum::<f64>();
        if j < i {
            up *= sum
        } else {
            down *= sum
        }
    }
    up * kernel_l1(&net.layers[i], q, p).unwrap() * down
}

#[test]
fn lakp_ml_matches_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for n in 0..100 {
        // even nets use integer weights, where every partial sum is exact
        let net = random_net(&mut rng, n % 2 == 0);
        for (i, lay) in net.layers.iter().enumerate() {
            for q in 0..lay.cin {
                for p in 0..lay.cout {
                    for r in [1, 2] {
                        assert_eq!(
                            lakp_ml_score(&net, i, q, p, r).unwrap(),
                            oracle_score(&net, i, q, p, r),
                            "net {n} layer {i} ({q},{p}) r={r}"
                        );
                    }
                    assert_eq!(lakp_ml_score(&net, i, q, p, 1).unwrap(), lakp_score(&net, i, q, p).unwrap());
                }
            }
        }
    }
}

#[test]
fn default_stack_prunes_to_quota() {
    let cfg = CapsConfig::default_capsbeam();
    let bundle = random_bundle(&cfg, 7).unwrap();
    let net = ConvNetDescription::conv_stack(&cfg, &bundle).unwrap();
    let mask = plan_prune(&net, 0.85, PruneMethod::LakpMl, 2).unwrap();
    let rep = prune_report(&net, &mask, 0.85, &PixelGrid::default()).unwrap();
    assert!((rep.kept_param_fraction() - 0.15).abs() <= 0.01, "{}", rep.kept_param_fraction());
    assert!(rep.flop_fraction() <= 0.25);
}

/// Routing by agreement written out with nested vectors, updating logits
/// after every iteration.
fn routing_transliteration(u: &[Vec<Vec<f64>>], iters: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (n_in, n_out, d) = (u.len(), u[0].len(), u[0][0].len());
    let mut b = vec![vec![0.0; n_out]; n_in];
    let mut v = vec![vec![0.0; d]; n_out];
    let mut cs = Vec::new();
    for _ in 0..iters {
        let c: Vec<Vec<f64>> = b
            .iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect()
            })
            .collect();
        for j in 0..n_out {
            let s: Vec<f64> = (0..d).map(|k| (0..n_in).map(|i| c[i][j] * u[i][j][k]).sum()).collect();
            let n2: f64 = s.iter().map(|x| x * x).sum();
            v[j] = if n2 == 0.0 { vec![0.0; d] } else { s.iter().map(|x| n2 / (1.0 + n2) * x / n2.sqrt()).collect() };
        }
        for i in 0..n_in {
            for j in 0..n_out {
                b[i][j] += (0..d).map(|k| u[i][j][k] * v[j][k]).sum::<f64>();
            }
        }
        cs.push(c);
    }
    (v, cs)
}

#[test]
fn routing_invariants_and_transliteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..10_000 {
        let (n_in, n_out, d) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let iters = rng.random_range(1..5);
        let amp = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let flat: Vec<f64> = (0..n_in * n_out * d).map(|_| rng.random_range(-amp..amp)).collect();
        let st = route(&flat, n_in, n_out, d, iters).unwrap();
        for c in &st.coupling_history {
            for row in c.chunks(n_out) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
        for vj in st.output_v.chunks(d) {
            assert!(vj.iter().map(|x| x * x).sum::<f64>().sqrt() < 1.0);
        }
        let u: Vec<Vec<Vec<f64>>> =
            (0..n_in).map(|i| (0..n_out).map(|j| flat[(i * n_out + j) * d..][..d].to_vec()).collect()).collect();
        let (v, cs) = routing_transliteration(&u, iters);
        for (a, b) in st.output_v.iter().zip(v.iter().flatten()) {
            assert!((a - b).abs() <= 1e-6);
        }
        for (a, b) in st.coupling_history.iter().zip(&cs) {
            for (x, y) in a.iter().zip(b.iter().flatten()) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}

fn random_rf(rows: usize, cols: usize, ch: usize, rng: &mut ChaCha8Rng) -> RfVolume {
    let grid = PixelGrid { num_rows: rows, num_cols: cols, ..Default::default() };
    let data = (0..rows * cols * ch).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    RfVolume::new(grid, ch, Tensor::from_f32(vec![rows, cols, ch], data).unwrap()).unwrap()
}

#[test]
fn simulated_network_is_bit_exact_on_toy_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cfg = CapsConfig::toy(4);
    let dense = random_bundle(&cfg, 43).unwrap();
    let net = ConvNetDescription::conv_stack(&cfg, &dense).unwrap();
    let pruned = apply_mask(&dense, &plan_prune(&net, 0.5, PruneMethod::LakpMl, 2).unwrap()).unwrap();
    let accel = AccelConfig { pe_rows: 3, pe_cols: 2, ..Default::default() };
    for bundle in [&dense, &pruned] {
        let plan = calibrate(bundle, &[random_rf(8, 8, 4, &mut rng)], &cfg).unwrap();
        let qnet = QuantizedNet::build(&cfg, bundle, &plan).unwrap();
        for rows in 1..=8 {
            for cols in 1..=8 {
                let rf = random_rf(rows, cols, 4, &mut rng);
                let want = qnet.forward_observed(&rf, &mut |_, _| {}).unwrap();
                for policy in [WeightPolicy::ReloadPerBlock, WeightPolicy::WeightsResident] {
                    let (got, _) = sim_network(&qnet, &rf, &accel, policy, ReluBiasOrder::BiasThenRelu).unwrap();
                    assert_eq!(got, want, "{rows}x{cols}");
                }
            }
        }
    }
}

#[test]
fn simulated_network_matches_on_sampled_full_shape_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let cfg = CapsConfig::default_capsbeam();
    let bundle = random_bundle(&cfg, 45).unwrap();
    let plan = calibrate(&bundle, &[random_rf(4, 16, 128, &mut rng)], &cfg).unwrap();
    let qnet = QuantizedNet::build(&cfg, &bundle, &plan).unwrap();
    let full = PixelGrid::default();
    let (rows, cols) = (full.num_rows, full.num_cols);
    let rf = random_rf(rows, cols, 128, &mut rng);
    // Three 3x3 layers: a 7-row window reproduces the centre row exactly.
    let reach = (cfg.receptive_field().0 - 1) / 2;
    let mut picks = vec![0, rows - 1];
    picks.extend((0..18).map(|_| rng.random_range(1..rows - 1)));
    for r in picks {
        let (lo, hi) = (r.saturating_sub(reach), (r + reach).min(rows - 1));
        let n = hi - lo + 1;
        let grid = PixelGrid { num_rows: n, ..full.clone() };
        let data = rf.data()[lo * cols * 128..(hi + 1) * cols * 128].to_vec();
        let win = RfVolume::new(grid, 128, Tensor::from_f32(vec![n, cols, 128], data).unwrap()).unwrap();
        let want = qnet.forward_observed(&win, &mut |_, _| {}).unwrap();
        let (got, _) = sim_network(
            &qnet,
            &win,
            &AccelConfig::default(),
            WeightPolicy::WeightsResident,
            ReluBiasOrder::BiasThenRelu,
        )
        .unwrap();
        let row = (r - lo) * cols..(r - lo + 1) * cols;
        assert_eq!(got.i()[row.clone()], want.i()[row.clone()], "row {r}");
        assert_eq!(got.q()[row.clone()], want.q()[row], "row {r}");
    }
}
