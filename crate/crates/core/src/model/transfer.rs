//! Transfer components: approximate the target's encoder state from the
//! retrieved stations' states and location embeddings.
//!
//! Every kind maps `states [k, T, d]` to a single state `[T, d]`.

use rand::Rng;

use super::blocks::{init_linear, linear};
use super::config::{ModelConfig, TransferKind};
use crate::diff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) fn init_transfer<R: Rng>(
    p: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    ctx_len: usize,
    rng: &mut R,
) -> Result<()> {
    let (d, dl) = (cfg.d_model, cfg.d_loc);
    match cfg.transfer.kind {
        TransferKind::LocAttn => {
            init_linear(p, &format!("{prefix}.p"), dl, ctx_len * cfg.d_k, true, rng)?;
            init_linear(p, &format!("{prefix}.k"), dl, cfg.d_k, false, rng)
        }
        TransferKind::Fc => {
            init_linear(p, &format!("{prefix}.e"), d, d, true, rng)?;
            init_linear(p, &format!("{prefix}.l"), dl, d, false, rng)?;
            init_linear(p, &format!("{prefix}.t"), dl, d, false, rng)?;
            init_linear(p, &format!("{prefix}.out"), d, d, true, rng)
        }
        TransferKind::Gnn => {
            init_linear(p, &format!("{prefix}.e1"), d, d, false, rng)?;
            init_linear(p, &format!("{prefix}.l1"), dl, d, false, rng)?;
            p.insert_const(format!("{prefix}.b1"), &[d], 0.0)?;
            init_linear(p, &format!("{prefix}.w2"), d, d, true, rng)
        }
    }
}

fn check_states(g: &Graph, states: Var) -> Result<(usize, usize, usize)> {
    let s = g.shape(states);
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "transfer",
            left: s.to_vec(),
            right: vec![],
        });
    }
    if s[0] == 0 {
        return Err(Error::Retrieval("transfer needs at least one retrieved station".into()));
    }
    Ok((s[0], s[1], s[2]))
}

/// Location attention. Returns the transferred state and the attention
/// matrix `alpha [T, k]` whose rows sum to one.
pub fn loc_attn(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    states: Var,
    loc_ret: Var,
    loc_tar: Var,
) -> Result<(Var, Var)> {
    let (k, t, d) = check_states(g, states)?;
    let w = g.param(p, &format!("{prefix}.p.w"))?;
    let dk_t = g.shape(w)[1];
    if t == 0 || dk_t % t != 0 {
        return Err(Error::Shape {
            op: "loc_attn",
            left: vec![k, t, d],
            right: g.shape(w).to_vec(),
        });
    }
    let dk = dk_t / t;
    let q = linear(g, p, &format!("{prefix}.p"), loc_tar)?;
    let q = g.reshape(q, &[t, dk])?;
    let keys = linear(g, p, &format!("{prefix}.k"), loc_ret)?;
    let kt = g.transpose_last2(keys)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (dk as f64).sqrt());
    let alpha = g.softmax(s);
    let a3 = g.reshape(alpha, &[t, 1, k])?;
    let per_time = g.permute01(states)?;
    let out = g.batch_matmul(a3, per_time)?;
    Ok((g.reshape(out, &[t, d])?, alpha))
}

/// Fixed averaging weights: `softmax(-2 ln(1 + d))`, i.e. inverse squared
/// distance normalized to one, or uniform when `idw` is off.
pub fn idw_weights(dists: &[f64], idw: bool) -> Vec<f64> {
    let n = dists.len();
    if !idw {
        return vec![1.0 / n as f64; n];
    }
    let logits: Vec<f64> = dists.iter().map(|d| -2.0 * (1.0 + d.max(0.0)).ln()).collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-station MLP on `[E_i; l_i; l_tar]`, then a weighted average.
pub fn fc(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    states: Var,
    loc_ret: Var,
    loc_tar: Var,
    weights: &[f64],
) -> Result<Var> {
    let (k, t, d) = check_states(g, states)?;
    if weights.len() != k {
        return Err(Error::Shape {
            op: "fc",
            left: vec![k],
            right: vec![weights.len()],
        });
    }
    // The concatenated input times one weight matrix equals the sum of the
    // three blocks times their row slices.
    let he = linear(g, p, &format!("{prefix}.e"), states)?;
    let hl = linear(g, p, &format!("{prefix}.l"), loc_ret)?;
    let hl = g.reshape(hl, &[k, 1, d])?;
    let ht = linear(g, p, &format!("{prefix}.t"), loc_tar)?;
    let ht = g.reshape(ht, &[1, 1, d])?;
    let h = g.add(he, hl)?;
    let h = g.add(h, ht)?;
    let h = g.relu(h);
    let y = linear(g, p, &format!("{prefix}.out"), h)?;
    let y = g.reshape(y, &[k, t * d])?;
    let w = g.input(&[1, k], weights.to_vec())?;
    let out = g.matmul(w, y)?;
    g.reshape(out, &[t, d])
}

/// Symmetric-normalized adjacency `D^-1/2 W D^-1/2` with
/// `W_ij = exp(-d_ij / tau)` (so `W_ii = 1`).
pub fn gnn_adjacency(dist: &[f64], n: usize, tau: f64) -> Vec<f64> {
    let w: Vec<f64> = dist.iter().map(|d| (-d / tau).exp()).collect();
    let deg: Vec<f64> = (0..n).map(|i| w[i * n..(i + 1) * n].iter().sum()).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = w[i * n + j] / (deg[i] * deg[j]).sqrt();
        }
    }
    a
}

/// Two graph-convolution rounds over retrieved nodes plus the target node
/// (last), reading out the target. `adjacency` is `[(k+1) × (k+1)]`.
pub fn gnn(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    states: Var,
    loc_ret: Var,
    loc_tar: Var,
    adjacency: &[f64],
) -> Result<Var> {
    let (k, t, d) = check_states(g, states)?;
    let n = k + 1;
    if adjacency.len() != n * n {
        return Err(Error::Shape {
            op: "gnn",
            left: vec![n, n],
            right: vec![adjacency.len()],
        });
    }
    let xe = linear(g, p, &format!("{prefix}.e1"), states)?;
    let xl = linear(g, p, &format!("{prefix}.l1"), loc_ret)?;
    let xl = g.reshape(xl, &[k, 1, d])?;
    let x_ret = g.add(xe, xl)?;
    // The target node has no encoder state; only its location enters.
    let xt = linear(g, p, &format!("{prefix}.l1"), loc_tar)?;
    let xt = g.reshape(xt, &[1, 1, d])?;
    let xt = g.broadcast_to(xt, &[1, t, d])?;
    let x = g.concat(&[x_ret, xt], 0)?;
    let x = g.reshape(x, &[n, t * d])?;
    let a = g.input(&[n, n], adjacency.to_vec())?;
    let h = g.matmul(a, x)?;
    let h = g.reshape(h, &[n, t, d])?;
    let b1 = g.param(p, &format!("{prefix}.b1"))?;
    let h = g.add(h, b1)?;
    let h = g.relu(h);
    let w2 = g.param(p, &format!("{prefix}.w2.w"))?;
    let h = g.matmul(h, w2)?;
    let h = g.reshape(h, &[n, t * d])?;
    let a_tar = g.input(&[1, n], adjacency[(n - 1) * n..].to_vec())?;
    let out = g.matmul(a_tar, h)?;
    let out = g.reshape(out, &[t, d])?;
    let b2 = g.param(p, &format!("{prefix}.w2.b"))?;
    g.add(out, b2)
}

/// Everything a transfer call needs about one target and its retrieved set.
pub struct TransferInput<'a> {
    pub states: Var,
    pub loc_ret: Var,
    pub loc_tar: Var,
    /// Distances from the target to each retrieved station.
    pub dist_to_target: &'a [f64],
    /// Pairwise distances over retrieved stations plus the target (last),
    /// required by the GNN kind.
    pub pairwise: Option<&'a [f64]>,
}

pub fn apply(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    input: &TransferInput<'_>,
) -> Result<Var> {
    match cfg.transfer.kind {
        TransferKind::LocAttn => {
            loc_attn(g, p, prefix, input.states, input.loc_ret, input.loc_tar).map(|r| r.0)
        }
        TransferKind::Fc => {
            let w = idw_weights(input.dist_to_target, cfg.transfer.idw);
            fc(g, p, prefix, input.states, input.loc_ret, input.loc_tar, &w)
        }
        TransferKind::Gnn => {
            let n = input.dist_to_target.len() + 1;
            let dist = input
                .pairwise
                .ok_or_else(|| Error::Retrieval("gnn transfer needs pairwise distances".into()))?;
            let a = gnn_adjacency(dist, n, cfg.transfer.tau_km);
            gnn(g, p, prefix, input.states, input.loc_ret, input.loc_tar, &a)
        }
    }
}

pub(crate) fn init_gate<R: Rng>(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    init_linear(p, &format!("{prefix}.z"), d, d, true, rng)?;
    init_linear(p, &format!("{prefix}.e"), d, d, false, rng)
}

/// `Z + sigmoid(W_z Z + W_e E + b) ⊙ E` for the target's own state `E`.
pub fn gate(g: &mut Graph, p: &ParamStore, prefix: &str, z: Var, own: Var) -> Result<Var> {
    let a = linear(g, p, &format!("{prefix}.z"), z)?;
    let b = linear(g, p, &format!("{prefix}.e"), own)?;
    let s = g.add(a, b)?;
    let s = g.sigmoid(s);
    let m = g.mul(s, own)?;
    g.add(z, m)
}

/// Zero rows in front of `own [c, d]` up to `[t, d]`.
pub fn pad_front(g: &mut Graph, own: Var, t: usize) -> Result<Var> {
    let s = g.shape(own).to_vec();
    let (c, d) = (s[0], s[1]);
    if c == t {
        return Ok(own);
    }
    let z = g.constant(Tensor::zeros(&[t - c, d]));
    if c == 0 {
        return Ok(z);
    }
    g.concat(&[z, own], 0)
}

#[cfg(test)]
mod tests {
    use super::super::config::TransferConfig;
    use super::*;
    use crate::diff::check_gradients;
    use crate::rng::rng_for;
    use rand::Rng;

    const D: usize = 4;
    const DL: usize = 3;
    const T: usize = 5;

    fn cfg(kind: TransferKind) -> ModelConfig {
        ModelConfig {
            d_model: D,
            d_loc: DL,
            d_k: 2,
            transfer: TransferConfig {
                kind,
                ..TransferConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    struct Case {
        p: ParamStore,
        states: Vec<f64>,
        loc_ret: Vec<f64>,
        loc_tar: Vec<f64>,
        dist: Vec<f64>,
        pairwise: Vec<f64>,
        k: usize,
    }

    fn case(kind: TransferKind, k: usize, seed: u64) -> Case {
        let mut p = ParamStore::new();
        let mut rng = rng_for(seed, "transfer-test");
        init_transfer(&mut p, "tr", &cfg(kind), T, &mut rng).unwrap();
        // Nonzero biases so their gradients are exercised.
        let names: Vec<String> = p.names().filter(|n| n.ends_with(".b") || n.ends_with("b1")).cloned().collect();
        for n in names {
            let len = p.tensor(&n).unwrap().numel();
            p.set_data(&n, (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        }
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let states = r(k * T * D);
        let loc_ret = r(k * DL);
        let loc_tar = r(DL);
        let dist: Vec<f64> = r(k).into_iter().map(|v| 50.0 * (v + 1.5)).collect();
        let n = k + 1;
        let mut pairwise = vec![0.0; n * n];
        let raw = r(n * n);
        for i in 0..n {
            for j in i + 1..n {
                let v = 40.0 * (raw[i * n + j] + 1.2);
                pairwise[i * n + j] = v;
                pairwise[j * n + i] = v;
            }
        }
        Case {
            p,
            states,
            loc_ret,
            loc_tar,
            dist,
            pairwise,
            k,
        }
    }

    fn run(kind: TransferKind, c: &Case, g: &mut Graph, p: &ParamStore) -> Result<Var> {
        let states = g.input(&[c.k, T, D], c.states.clone())?;
        let loc_ret = g.input(&[c.k, DL], c.loc_ret.clone())?;
        let loc_tar = g.input(&[1, DL], c.loc_tar.clone())?;
        let input = TransferInput {
            states,
            loc_ret,
            loc_tar,
            dist_to_target: &c.dist,
            pairwise: Some(&c.pairwise),
        };
        apply(g, p, "tr", &cfg(kind), &input)
    }

    fn output(kind: TransferKind, c: &Case) -> Vec<f64> {
        let mut g = Graph::new();
        let v = run(kind, c, &mut g, &c.p).unwrap();
        assert_eq!(g.shape(v), &[T, D]);
        g.data(v).to_vec()
    }

    const KINDS: [TransferKind; 3] = [TransferKind::Fc, TransferKind::Gnn, TransferKind::LocAttn];

    #[test]
    fn gradients_match_finite_differences() {
        for kind in KINDS {
            for seed in 0..5 {
                let c = case(kind, 4, seed);
                let w: Vec<f64> = (0..T * D).map(|i| (i as f64 * 0.7 + 0.3).sin()).collect();
                let r = check_gradients(
                    &c.p,
                    |g, p| {
                        let y = run(kind, &c, g, p)?;
                        let w = g.input(&[T, D], w.clone())?;
                        let m = g.mul(y, w)?;
                        Ok(g.sum(m))
                    },
                    1e-5,
                    64,
                    seed,
                )
                .unwrap();
                assert!(r.worst < 1e-4, "{kind:?} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn output_shape_matches_a_single_state() {
        for kind in KINDS {
            for k in [1, 3, 7] {
                output(kind, &case(kind, k, 1));
            }
        }
    }

    #[test]
    fn empty_set_is_an_error() {
        for kind in KINDS {
            let c = case(kind, 2, 0);
            let mut g = Graph::new();
            let states = g.input(&[0, T, D], vec![]).unwrap();
            let loc_ret = g.input(&[0, DL], vec![]).unwrap();
            let loc_tar = g.input(&[1, DL], c.loc_tar.clone()).unwrap();
            let input = TransferInput {
                states,
                loc_ret,
                loc_tar,
                dist_to_target: &[],
                pairwise: Some(&[0.0]),
            };
            let e = apply(&mut g, &c.p, "tr", &cfg(kind), &input).unwrap_err();
            assert_eq!(e.category(), "retrieval");
        }
    }

    fn attention(c: &Case) -> Vec<f64> {
        let mut g = Graph::new();
        let states = g.input(&[c.k, T, D], c.states.clone()).unwrap();
        let loc_ret = g.input(&[c.k, DL], c.loc_ret.clone()).unwrap();
        let loc_tar = g.input(&[1, DL], c.loc_tar.clone()).unwrap();
        let (_, a) = loc_attn(&mut g, &c.p, "tr", states, loc_ret, loc_tar).unwrap();
        assert_eq!(g.shape(a), &[T, c.k]);
        g.data(a).to_vec()
    }

    #[test]
    fn loc_attn_rows_are_probabilities() {
        for seed in 0..10 {
            let c = case(TransferKind::LocAttn, 6, seed);
            let a = attention(&c);
            for row in a.chunks(6) {
                assert!(row.iter().all(|v| *v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loc_attn_identical_locations_average_states() {
        let mut c = case(TransferKind::LocAttn, 4, 3);
        let first = c.loc_ret[..DL].to_vec();
        c.loc_ret = first.repeat(4);
        let a = attention(&c);
        assert!(a.iter().all(|v| (v - 0.25).abs() < 1e-12));
        let out = output(TransferKind::LocAttn, &c);
        for t in 0..T {
            for j in 0..D {
                let mean: f64 = (0..4).map(|i| c.states[(i * T + t) * D + j]).sum::<f64>() / 4.0;
                assert!((out[t * D + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loc_attn_key_offset_leaves_weights_unchanged() {
        let mut c = case(TransferKind::LocAttn, 5, 7);
        let before = attention(&c);
        // A key bias adds the same vector to every key.
        c.p.insert("tr.k.b", Tensor::from_vec(vec![0.8, -1.3])).unwrap();
        let after = attention(&c);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fc_weights() {
        let w = idw_weights(&[3.0, 3.0, 3.0], true);
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let mut rng = rng_for(5, "idw");
        for _ in 0..50 {
            let d: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..500.0)).collect();
            let w = idw_weights(&d, true);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Inverse squared distance, up to normalization.
            let raw: Vec<f64> = d.iter().map(|x| 1.0 / (1.0 + x).powi(2)).collect();
            let s: f64 = raw.iter().sum();
            for (a, b) in w.iter().zip(&raw) {
                assert!((a - b / s).abs() < 1e-12);
            }
        }
        assert_eq!(idw_weights(&[1.0, 9.0], false), vec![0.5, 0.5]);
    }

    #[test]
    fn fc_single_station_is_its_transformed_state() {
        let c = case(TransferKind::Fc, 1, 2);
        let out = output(TransferKind::Fc, &c);
        // Direct evaluation of the per-station MLP.
        let t = |n: &str| c.p.tensor(n).unwrap().data.clone();
        let (we, be, wl, wt, wo, bo) = (t("tr.e.w"), t("tr.e.b"), t("tr.l.w"), t("tr.t.w"), t("tr.out.w"), t("tr.out.b"));
        for s in 0..T {
            let mut h = vec![0.0; D];
            for j in 0..D {
                let mut v = be[j];
                for i in 0..D {
                    v += c.states[s * D + i] * we[i * D + j];
                }
                for i in 0..DL {
                    v += c.loc_ret[i] * wl[i * D + j] + c.loc_tar[i] * wt[i * D + j];
                }
                h[j] = v.max(0.0);
            }
            for j in 0..D {
                let y = bo[j] + (0..D).map(|i| h[i] * wo[i * D + j]).sum::<f64>();
                assert!((out[s * D + j] - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gnn_infinite_temperature_is_uniform() {
        let c = case(TransferKind::Gnn, 4, 0);
        let a = gnn_adjacency(&c.pairwise, 5, 1e9);
        assert!(a.iter().all(|v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn gnn_depends_on_distance_over_temperature() {
        let c = case(TransferKind::Gnn, 4, 9);
        let base = output(TransferKind::Gnn, &c);
        let mut doubled = case(TransferKind::Gnn, 4, 9);
        doubled.pairwise.iter_mut().for_each(|d| *d *= 2.0);
        let mut g = Graph::new();
        let mut conf = cfg(TransferKind::Gnn);
        conf.transfer.tau_km *= 2.0;
        let states = g.input(&[4, T, D], doubled.states.clone()).unwrap();
        let loc_ret = g.input(&[4, DL], doubled.loc_ret.clone()).unwrap();
        let loc_tar = g.input(&[1, DL], doubled.loc_tar.clone()).unwrap();
        let input = TransferInput {
            states,
            loc_ret,
            loc_tar,
            dist_to_target: &doubled.dist,
            pairwise: Some(&doubled.pairwise),
        };
        let v = apply(&mut g, &doubled.p, "tr", &conf, &input).unwrap();
        for (a, b) in base.iter().zip(g.data(v)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gnn_single_station_depends_on_that_station() {
        let c = case(TransferKind::Gnn, 1, 4);
        let a = output(TransferKind::Gnn, &c);
        let b = output(TransferKind::Gnn, &c);
        assert_eq!(a, b);
        let mut other = case(TransferKind::Gnn, 1, 4);
        other.states.iter_mut().for_each(|v| *v += 0.1);
        assert_ne!(output(TransferKind::Gnn, &other), a);
    }

    #[test]
    fn gate_with_zero_own_state_is_identity() {
        let mut p = ParamStore::new();
        init_gate(&mut p, "g", D, &mut rng_for(0, "gate")).unwrap();
        let mut g = Graph::new();
        let z = g.input(&[T, D], (0..T * D).map(|i| i as f64).collect()).unwrap();
        let own = g.input(&[0, D], vec![]).unwrap();
        let own = pad_front(&mut g, own, T).unwrap();
        let y = gate(&mut g, &p, "g", z, own).unwrap();
        assert_eq!(g.data(y), g.data(z));
    }
}
