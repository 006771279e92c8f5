//! Location embedding, encoder, decoder and output heads.

use rand::Rng;

use super::blocks::{
    ffn, init_ffn, init_layer_norm, init_linear, init_mha, layer_norm, linear, mha,
    positional_encoding,
};
use super::config::{BandLayout, HeadKind, ModelConfig};
use crate::diff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) fn init_location<R: Rng>(p: &mut ParamStore, d_loc: usize, rng: &mut R) -> Result<()> {
    init_linear(p, "loc.1", 3, d_loc, true, rng)?;
    init_linear(p, "loc.2", d_loc, d_loc, true, rng)
}

/// Two-layer tanh MLP on standardized `(lat, lon, elevation)`: `[n, 3] -> [n, d_loc]`.
pub fn embed_location(g: &mut Graph, p: &ParamStore, coords: Var) -> Result<Var> {
    let h = linear(g, p, "loc.1", coords)?;
    let h = g.tanh(h);
    linear(g, p, "loc.2", h)
}

pub(crate) fn init_encoder<R: Rng>(
    p: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    band: &BandLayout,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.d_model;
    init_linear(p, &format!("{prefix}.in"), band.in_channels, d, true, rng)?;
    for l in 0..cfg.layers {
        init_layer_norm(p, &format!("{prefix}.l{l}.ln1"), d)?;
        init_mha(p, &format!("{prefix}.l{l}.attn"), d, rng)?;
        init_layer_norm(p, &format!("{prefix}.l{l}.ln2"), d)?;
        init_ffn(p, &format!("{prefix}.l{l}.ff"), d, cfg.d_ff, rng)?;
    }
    init_layer_norm(p, &format!("{prefix}.lnf"), d)
}

/// Pre-norm self-attention encoder over `x [B, T, n]`. Positions count
/// back from the end of a `full_len` context so that a truncated context
/// shares the encodings of the most recent hours.
pub fn encode(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    x: Var,
    full_len: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "encode",
            left: s,
            right: vec![],
        });
    }
    let (b, t) = (s[0], s[1]);
    let d = cfg.d_model;
    if t == 0 {
        return Ok(g.constant(Tensor::zeros(&[b, 0, d])));
    }
    if t > full_len {
        return Err(Error::Shape {
            op: "encode",
            left: s,
            right: vec![full_len],
        });
    }
    let h = linear(g, p, &format!("{prefix}.in"), x)?;
    let pe = g.input(&[t, d], positional_encoding(full_len - t, t, d))?;
    let mut h = g.add(h, pe)?;
    for l in 0..cfg.layers {
        let n = layer_norm(g, p, &format!("{prefix}.l{l}.ln1"), h)?;
        let a = mha(g, p, &format!("{prefix}.l{l}.attn"), cfg.heads, n, n)?;
        h = g.add(h, a)?;
        let n = layer_norm(g, p, &format!("{prefix}.l{l}.ln2"), h)?;
        let f = ffn(g, p, &format!("{prefix}.l{l}.ff"), n)?;
        h = g.add(h, f)?;
    }
    layer_norm(g, p, &format!("{prefix}.lnf"), h)
}

pub(crate) fn init_decoder<R: Rng>(
    p: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    band: &BandLayout,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.d_model;
    p.insert_normal(format!("{prefix}.query"), &[band.horizon_len, d], 0.5, rng)?;
    p.insert_const(format!("{prefix}.mix"), &[band.horizon_len, band.ctx_len], 0.0)?;
    init_layer_norm(p, &format!("{prefix}.ln1"), d)?;
    init_mha(p, &format!("{prefix}.xattn"), d, rng)?;
    init_layer_norm(p, &format!("{prefix}.ln2"), d)?;
    init_ffn(p, &format!("{prefix}.ff"), d, cfg.d_ff, rng)?;
    init_layer_norm(p, &format!("{prefix}.lnf"), d)
}

/// Learned horizon queries cross-attending to `memory [B, T, d]`; returns
/// `[B, H, d]`. An empty memory leaves only the queries' own path.
pub fn decode(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    memory: Var,
) -> Result<Var> {
    let ms = g.shape(memory).to_vec();
    let (b, t) = (ms[0], ms[1]);
    let d = cfg.d_model;
    let q = g.param(p, &format!("{prefix}.query"))?;
    let h_len = g.shape(q)[0];
    let q = g.reshape(q, &[1, h_len, d])?;
    let mut h = g.broadcast_to(q, &[b, h_len, d])?;
    if t > 0 {
        let mix = g.param(p, &format!("{prefix}.mix"))?;
        let full = g.shape(mix)[1];
        let mix = g.slice(mix, 1, full - t, t)?;
        let mt = g.permute01(memory)?;
        let mt = g.reshape(mt, &[t, b * d])?;
        let mixed = g.matmul(mix, mt)?;
        let mixed = g.reshape(mixed, &[h_len, b, d])?;
        let mixed = g.permute01(mixed)?;
        h = g.add(h, mixed)?;
    }
    let n = layer_norm(g, p, &format!("{prefix}.ln1"), h)?;
    let a = mha(g, p, &format!("{prefix}.xattn"), cfg.heads, n, memory)?;
    h = g.add(h, a)?;
    let n = layer_norm(g, p, &format!("{prefix}.ln2"), h)?;
    let f = ffn(g, p, &format!("{prefix}.ff"), n)?;
    h = g.add(h, f)?;
    layer_norm(g, p, &format!("{prefix}.lnf"), h)
}

pub(crate) fn init_head<R: Rng>(
    p: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    band: &BandLayout,
    rng: &mut R,
) -> Result<()> {
    let c = band.out_channels();
    init_linear(p, &format!("{prefix}.mu"), cfg.d_model, c, true, rng)?;
    if cfg.has_highway() {
        // Start from the highway forecast alone.
        p.set_data(&format!("{prefix}.mu.w"), vec![0.0; cfg.d_model * c])?;
    }
    if cfg.head == HeadKind::Gaussian {
        init_linear(p, &format!("{prefix}.var"), cfg.d_model, c, true, rng)?;
    }
    Ok(())
}

/// Variance floor of the Gaussian head.
pub const VAR_FLOOR: f64 = 1e-6;

/// Mean `[B, H, C]` and, for the Gaussian head, variance
/// `softplus(.) + VAR_FLOOR`.
pub fn head(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    h: Var,
) -> Result<(Var, Option<Var>)> {
    let mu = linear(g, p, &format!("{prefix}.mu"), h)?;
    let var = match cfg.head {
        HeadKind::Deterministic => None,
        HeadKind::Gaussian => {
            let r = linear(g, p, &format!("{prefix}.var"), h)?;
            let s = g.softplus(r);
            Some(g.add_scalar(s, VAR_FLOOR)?)
        }
    };
    Ok((mu, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::check_gradients;
    use crate::rng::rng_for;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_loc: 4,
            heads: 2,
            layers: 2,
            d_ff: 12,
            ..ModelConfig::default()
        }
    }

    fn layout(t: usize, h: usize, ch: usize) -> BandLayout {
        BandLayout {
            name: "b".into(),
            seqs: (0..ch).collect(),
            ctx_len: t,
            horizon_len: h,
            in_channels: 5,
            k: 1,
        }
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, "net-input");
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Perturbs every parameter (including unit gains and zero biases) so
    /// all gradient paths are exercised.
    fn jitter(p: &mut ParamStore, seed: u64) {
        let mut rng = rng_for(seed, "net-jitter");
        let names: Vec<String> = p.names().cloned().collect();
        for n in names {
            let t = p.tensor(&n).unwrap().clone();
            let data = t.data.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            p.set_data(&n, data).unwrap();
        }
    }

    fn weighted(g: &mut Graph, y: Var) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w = g.input(&shape, (0..n).map(|i| (0.3 * i as f64 + 0.1).cos()).collect())?;
        let m = g.mul(y, w)?;
        Ok(g.sum(m))
    }

    #[test]
    fn location_mlp_gradients() {
        for seed in 0..5 {
            let mut p = ParamStore::new();
            init_location(&mut p, 4, &mut rng_for(seed, "loc")).unwrap();
            jitter(&mut p, seed);
            let x = rand_vec(9, seed);
            let r = check_gradients(
                &p,
                |g, p| {
                    let x = g.input(&[3, 3], x.clone())?;
                    let e = embed_location(g, p, x)?;
                    weighted(g, e)
                },
                1e-5,
                64,
                seed,
            )
            .unwrap();
            assert!(r.worst < 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn location_embedding_is_deterministic_and_degenerates_to_bias() {
        let mut p = ParamStore::new();
        init_location(&mut p, 4, &mut rng_for(1, "loc")).unwrap();
        let run = |p: &ParamStore, x: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.input(&[2, 3], x).unwrap();
            let e = embed_location(&mut g, p, x).unwrap();
            g.data(e).to_vec()
        };
        let x = vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0];
        let a = run(&p, x.clone());
        assert_eq!(a, run(&p, x));
        assert_eq!(a[..4], a[4..]);
        for n in ["loc.1.w", "loc.2.w"] {
            let len = p.tensor(n).unwrap().numel();
            p.set_data(n, vec![0.0; len]).unwrap();
        }
        p.set_data("loc.2.b", vec![0.5, -0.5, 1.0, 2.0]).unwrap();
        let e = run(&p, rand_vec(6, 3));
        assert_eq!(e, vec![0.5, -0.5, 1.0, 2.0, 0.5, -0.5, 1.0, 2.0]);
    }

    #[test]
    fn encoder_gradients() {
        let cfg = small();
        let band = layout(6, 3, 1);
        for seed in 0..5 {
            let mut p = ParamStore::new();
            init_encoder(&mut p, "enc", &cfg, &band, &mut rng_for(seed, "enc")).unwrap();
            jitter(&mut p, seed);
            let x = rand_vec(2 * 6 * 5, seed);
            let r = check_gradients(
                &p,
                |g, p| {
                    let x = g.input(&[2, 6, 5], x.clone())?;
                    let e = encode(g, p, "enc", &cfg, x, 6)?;
                    weighted(g, e)
                },
                1e-5,
                48,
                seed,
            )
            .unwrap();
            assert!(r.worst < 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn encoder_shapes_and_cold_start() {
        let cfg = small();
        let band = layout(48, 6, 1);
        let mut p = ParamStore::new();
        init_encoder(&mut p, "enc", &cfg, &band, &mut rng_for(0, "enc")).unwrap();
        for t in [6, 12, 24, 48] {
            let mut g = Graph::new();
            let x = g.input(&[1, t, 5], rand_vec(t * 5, t as u64)).unwrap();
            let e = encode(&mut g, &p, "enc", &cfg, x, 48).unwrap();
            assert_eq!(g.shape(e), &[1, t, 8]);
            assert!(g.data(e).iter().all(|v| v.is_finite()));
        }
        let mut g = Graph::new();
        let x = g.input(&[3, 0, 5], vec![]).unwrap();
        let e = encode(&mut g, &p, "enc", &cfg, x, 48).unwrap();
        assert_eq!(g.shape(e), &[3, 0, 8]);
    }

    #[test]
    fn encoder_feature_permutation_invariance() {
        let cfg = small();
        let band = layout(6, 3, 1);
        let mut p = ParamStore::new();
        init_encoder(&mut p, "enc", &cfg, &band, &mut rng_for(2, "enc")).unwrap();
        let x = rand_vec(6 * 5, 11);
        let perm = [3, 0, 4, 1, 2];
        let mut xp = vec![0.0; 30];
        for t in 0..6 {
            for (j, &src) in perm.iter().enumerate() {
                xp[t * 5 + j] = x[t * 5 + src];
            }
        }
        let w = p.tensor("enc.in.w").unwrap().data.clone();
        let mut wp = vec![0.0; w.len()];
        for (j, &src) in perm.iter().enumerate() {
            wp[j * 8..(j + 1) * 8].copy_from_slice(&w[src * 8..(src + 1) * 8]);
        }
        let run = |p: &ParamStore, x: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.input(&[1, 6, 5], x).unwrap();
            let e = encode(&mut g, p, "enc", &cfg, x, 6).unwrap();
            g.data(e).to_vec()
        };
        let a = run(&p, x);
        let mut q = p.clone();
        q.set_data("enc.in.w", wp).unwrap();
        let b = run(&q, xp);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    fn decoder_store(cfg: &ModelConfig, band: &BandLayout, seed: u64) -> ParamStore {
        let mut p = ParamStore::new();
        let mut rng = rng_for(seed, "dec");
        init_decoder(&mut p, "dec", cfg, band, &mut rng).unwrap();
        init_head(&mut p, "head", cfg, band, &mut rng).unwrap();
        jitter(&mut p, seed);
        p
    }

    #[test]
    fn decoder_heads_shapes_and_positive_variance() {
        let mut cfg = small();
        cfg.head = HeadKind::Gaussian;
        let band = layout(6, 7, 2);
        let p = decoder_store(&cfg, &band, 0);
        for t in [0, 6] {
            let mut g = Graph::new();
            let m = g.input(&[3, t, 8], rand_vec(3 * t * 8, 5)).unwrap();
            let h = decode(&mut g, &p, "dec", &cfg, m).unwrap();
            let (mu, var) = head(&mut g, &p, "head", &cfg, h).unwrap();
            assert_eq!(g.shape(mu), &[3, 7, 2]);
            let var = var.unwrap();
            assert!(g.data(var).iter().all(|v| *v >= VAR_FLOOR));
        }
    }

    #[test]
    fn head_gradients_for_both_kinds() {
        for kind in [HeadKind::Deterministic, HeadKind::Gaussian] {
            let mut cfg = small();
            cfg.head = kind;
            let band = layout(6, 4, 1);
            for seed in 0..5 {
                let p = decoder_store(&cfg, &band, seed);
                let mem = rand_vec(2 * 6 * 8, seed);
                let y = rand_vec(8, seed + 100);
                let r = check_gradients(
                    &p,
                    |g, p| {
                        let m = g.input(&[2, 6, 8], mem.clone())?;
                        let h = decode(g, p, "dec", &cfg, m)?;
                        let (mu, var) = head(g, p, "head", &cfg, h)?;
                        let mu = g.reshape(mu, &[2, 4])?;
                        let y = g.input(&[2, 4], y.clone())?;
                        let r = g.sub(mu, y)?;
                        let r2 = g.square(r);
                        match var {
                            None => Ok(g.mean(r2)),
                            Some(v) => {
                                // Gaussian negative log-likelihood.
                                let v = g.reshape(v, &[2, 4])?;
                                let lv = g.log(v);
                                let q = g.div(r2, v)?;
                                let s = g.add(lv, q)?;
                                let s = g.sum(s);
                                Ok(g.scale(s, 0.25))
                            }
                        }
                    },
                    1e-5,
                    48,
                    seed,
                )
                .unwrap();
                assert!(r.worst < 1e-4, "{kind:?} seed {seed}: {r:?}");
            }
        }
    }
}
