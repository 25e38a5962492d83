//! Transformer encoder building blocks: pre-norm multi-head attention
//! layers and the patch embedding front end.
//!
//! A layer computes, for a token sequence `x` of shape `[n, d]`:
//!
//! ```text
//! h  = LN1(x);  attn = MHA(h);   x1 = x + attn
//! h2 = LN2(x1); mlp  = GELU(h2 W1 + b1) W2 + b2;  out = x1 + mlp
//! ```
//!
//! with `MHA` splitting queries/keys/values into equal head slices, scaling
//! scores by `1/sqrt(d_head)`, and projecting the concatenated head outputs.
//! Layers are length-agnostic: prompt tokens, patch tokens, and readout
//! tokens all flow through the same block.

use std::sync::Arc;

use crate::error::{MmptError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::render::CHANNELS;
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;
/// MLP hidden width multiplier.
const MLP_RATIO: usize = 4;

// ── Layer parameters ─────────────────────────────────────────────────────────

/// Registers one layer's tensors under `prefix` (e.g. `vision.layer03`).
pub fn init_layer<S: Scalar>(store: &mut ParamStore<S>, seed: u64, prefix: &str, dim: usize) {
    let hidden = MLP_RATIO * dim;
    let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
    store.init_const(&format!("{prefix}.ln1.gain"), 1, dim, 1.0);
    store.init_const(&format!("{prefix}.ln1.bias"), 1, dim, 0.0);
    for w in ["wq", "wk", "wv", "wo"] {
        store.init_uniform(seed, &format!("{prefix}.attn.{w}"), dim, dim, xavier(dim, dim));
        store.init_const(&format!("{prefix}.attn.{}", w.replace('w', "b")), 1, dim, 0.0);
    }
    store.init_const(&format!("{prefix}.ln2.gain"), 1, dim, 1.0);
    store.init_const(&format!("{prefix}.ln2.bias"), 1, dim, 0.0);
    store.init_uniform(seed, &format!("{prefix}.mlp.w1"), dim, hidden, xavier(dim, hidden));
    store.init_const(&format!("{prefix}.mlp.b1"), 1, hidden, 0.0);
    store.init_uniform(seed, &format!("{prefix}.mlp.w2"), hidden, dim, xavier(hidden, dim));
    store.init_const(&format!("{prefix}.mlp.b2"), 1, dim, 0.0);
}

/// One layer's tensors bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub dim: usize,
    pub heads: usize,
    ln1_gain: Var,
    ln1_bias: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub fn bind_layer<S: Scalar>(
    store: &ParamStore<S>,
    g: &mut Graph<S>,
    prefix: &str,
    heads: usize,
) -> LayerVars {
    let b = |g: &mut Graph<S>, field: &str| store.bind(g, &format!("{prefix}.{field}"));
    let dim = store.get(&format!("{prefix}.ln1.gain")).cols();
    LayerVars {
        dim,
        heads,
        ln1_gain: b(g, "ln1.gain"),
        ln1_bias: b(g, "ln1.bias"),
        wq: b(g, "attn.wq"),
        bq: b(g, "attn.bq"),
        wk: b(g, "attn.wk"),
        bk: b(g, "attn.bk"),
        wv: b(g, "attn.wv"),
        bv: b(g, "attn.bv"),
        wo: b(g, "attn.wo"),
        bo: b(g, "attn.bo"),
        ln2_gain: b(g, "ln2.gain"),
        ln2_bias: b(g, "ln2.bias"),
        w1: b(g, "mlp.w1"),
        b1: b(g, "mlp.b1"),
        w2: b(g, "mlp.w2"),
        b2: b(g, "mlp.b2"),
    }
}

// ── Forward ──────────────────────────────────────────────────────────────────

fn multi_head_attention<S: Scalar>(g: &mut Graph<S>, l: &LayerVars, h: Var) -> Var {
    let d_head = l.dim / l.heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let qm = g.matmul(h, l.wq);
    let q = g.add_row(qm, l.bq);
    let km = g.matmul(h, l.wk);
    let k = g.add_row(km, l.bk);
    let vm = g.matmul(h, l.wv);
    let v = g.add_row(vm, l.bv);

    let mut head_outs = Vec::with_capacity(l.heads);
    for head in 0..l.heads {
        let start = head * d_head;
        let qh = g.slice_cols(q, start, d_head);
        let kh = g.slice_cols(k, start, d_head);
        let vh = g.slice_cols(v, start, d_head);
        let kt = g.transpose(kh);
        let raw = g.matmul(qh, kt);
        let scaled = g.scale(raw, scale);
        let probs = g.softmax_rows(scaled);
        head_outs.push(g.matmul(probs, vh));
    }
    let cat = g.concat_cols(&head_outs);
    let proj = g.matmul(cat, l.wo);
    g.add_row(proj, l.bo)
}

/// Pre-norm transformer block. Token count in, token count out.
/// Rejects inputs whose width disagrees with the layer or that contain
/// non-finite values.
pub fn transformer_layer<S: Scalar>(g: &mut Graph<S>, l: &LayerVars, x: Var) -> Result<Var> {
    if g.cols(x) != l.dim {
        return Err(MmptError::shape(format!(
            "layer width {} but input tokens have width {}",
            l.dim,
            g.cols(x)
        )));
    }
    if !g.value(x).all_finite() {
        return Err(MmptError::non_finite("transformer layer input contains NaN or infinity"));
    }
    let h = g.layer_norm(x, l.ln1_gain, l.ln1_bias, LN_EPS);
    let attn = multi_head_attention(g, l, h);
    let x1 = g.add(x, attn);
    let h2 = g.layer_norm(x1, l.ln2_gain, l.ln2_bias, LN_EPS);
    let m1 = g.matmul(h2, l.w1);
    let m1b = g.add_row(m1, l.b1);
    let act = g.gelu(m1b);
    let m2 = g.matmul(act, l.w2);
    let mlp = g.add_row(m2, l.b2);
    Ok(g.add(x1, mlp))
}

// ── Patch embedding ──────────────────────────────────────────────────────────

/// Flat gather indices rearranging a row-major `(y, x, c)` image into
/// `[n_patches, patch_size^2 * channels]`, patches in row-major order.
pub fn patch_index_map(image_size: usize, patch_size: usize) -> Arc<Vec<usize>> {
    let side = image_size / patch_size;
    let mut idx = Vec::with_capacity(side * side * patch_size * patch_size * CHANNELS);
    for py in 0..side {
        for px in 0..side {
            for y in 0..patch_size {
                for x in 0..patch_size {
                    let gy = py * patch_size + y;
                    let gx = px * patch_size + x;
                    for c in 0..CHANNELS {
                        idx.push((gy * image_size + gx) * CHANNELS + c);
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

/// Registers the patch projection and learned positional table.
pub fn init_patch_embed<S: Scalar>(
    store: &mut ParamStore<S>,
    seed: u64,
    patch_dim: usize,
    d_v: usize,
    n_patches: usize,
) {
    let bound = (6.0 / (patch_dim + d_v) as f64).sqrt();
    store.init_uniform(seed, "patch.proj.weight", patch_dim, d_v, bound);
    store.init_const("patch.proj.bias", 1, d_v, 0.0);
    store.init_normal(seed, "patch.pos", n_patches, d_v, 0.02);
}

#[derive(Debug, Clone, Copy)]
pub struct PatchEmbedVars {
    pub weight: Var,
    pub bias: Var,
    pub pos: Var,
}

pub fn bind_patch_embed<S: Scalar>(store: &ParamStore<S>, g: &mut Graph<S>) -> PatchEmbedVars {
    PatchEmbedVars {
        weight: store.bind(g, "patch.proj.weight"),
        bias: store.bind(g, "patch.proj.bias"),
        pos: store.bind(g, "patch.pos"),
    }
}

/// Projects a flattened image into patch tokens plus positions.
pub fn patch_embed<S: Scalar>(
    g: &mut Graph<S>,
    image: Var,
    vars: PatchEmbedVars,
    index_map: &Arc<Vec<usize>>,
) -> Result<Var> {
    let patch_dim = g.value(vars.weight).rows();
    let n_patches = g.value(vars.pos).rows();
    let expected = n_patches * patch_dim;
    if g.value(image).len() != expected {
        return Err(MmptError::shape(format!(
            "image has {} values but the patch table expects {} ({} patches x {})",
            g.value(image).len(),
            expected,
            n_patches,
            patch_dim
        )));
    }
    let patches = g.gather(image, index_map.clone(), n_patches, patch_dim);
    let proj = g.matmul(patches, vars.weight);
    let biased = g.add_row(proj, vars.bias);
    Ok(g.add(biased, vars.pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn test_store(dim: usize, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        init_layer(&mut store, seed, "test.layer", dim);
        // Randomize the affine norms and biases so oracles see general values.
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x55);
        for name in
            ["test.layer.ln1.gain", "test.layer.ln1.bias", "test.layer.ln2.gain",
             "test.layer.ln2.bias", "test.layer.attn.bq", "test.layer.attn.bk",
             "test.layer.attn.bv", "test.layer.attn.bo", "test.layer.mlp.b1",
             "test.layer.mlp.b2"]
        {
            for v in store.get_mut(name).data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        store
    }

    fn rand_tokens(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn run_layer(store: &ParamStore<f64>, heads: usize, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let vars = bind_layer(store, &mut g, "test.layer", heads);
        let xv = g.input(x.clone());
        let out = transformer_layer(&mut g, &vars, xv).unwrap();
        g.value(out).clone()
    }

    // Plain-loop reimplementation of the full layer used as an oracle.
    mod oracle {
        use super::super::{LN_EPS, MLP_RATIO};
        use crate::params::ParamStore;

        fn rows(t: &crate::tensor::Tensor<f64>) -> Vec<Vec<f64>> {
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
        }

        fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
            let d = x.len() as f64;
            let mean = x.iter().sum::<f64>() / d;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            x.iter().enumerate().map(|(i, v)| (v - mean) * inv * gain[i] + bias[i]).collect()
        }

        fn affine(x: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
            let out_dim = b.len();
            (0..out_dim)
                .map(|j| x.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>() + b[j])
                .collect()
        }

        fn gelu(x: f64) -> f64 {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }

        pub fn full_layer(
            store: &ParamStore<f64>,
            heads: usize,
            x: &crate::tensor::Tensor<f64>,
        ) -> Vec<Vec<f64>> {
            let p = |n: &str| rows(store.get(&format!("test.layer.{n}")));
            let pv = |n: &str| store.get(&format!("test.layer.{n}")).row(0).to_vec();
            let (wq, wk, wv, wo) = (p("attn.wq"), p("attn.wk"), p("attn.wv"), p("attn.wo"));
            let (bq, bk, bv, bo) =
                (pv("attn.bq"), pv("attn.bk"), pv("attn.bv"), pv("attn.bo"));
            let (w1, w2) = (p("mlp.w1"), p("mlp.w2"));
            let (b1, b2) = (pv("mlp.b1"), pv("mlp.b2"));
            let (g1, c1) = (pv("ln1.gain"), pv("ln1.bias"));
            let (g2, c2) = (pv("ln2.gain"), pv("ln2.bias"));

            let xs = rows(x);
            let n = xs.len();
            let d = xs[0].len();
            let dh = d / heads;
            let h: Vec<Vec<f64>> = xs.iter().map(|r| layer_norm(r, &g1, &c1)).collect();
            let q: Vec<Vec<f64>> = h.iter().map(|r| affine(r, &wq, &bq)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|r| affine(r, &wk, &bk)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|r| affine(r, &wv, &bv)).collect();

            let mut attn = vec![vec![0.0; d]; n];
            for head in 0..heads {
                let s = head * dh;
                for i in 0..n {
                    let mut scores: Vec<f64> = (0..n)
                        .map(|j| {
                            (0..dh).map(|t| q[i][s + t] * k[j][s + t]).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    for sc in scores.iter_mut() {
                        *sc /= z;
                    }
                    for t in 0..dh {
                        attn[i][s + t] =
                            (0..n).map(|j| scores[j] * v[j][s + t]).sum::<f64>();
                    }
                }
            }
            let x1: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let proj = affine(&attn[i], &wo, &bo);
                    (0..d).map(|c| xs[i][c] + proj[c]).collect()
                })
                .collect();
            x1.iter()
                .map(|r| {
                    let h2 = layer_norm(r, &g2, &c2);
                    let hidden: Vec<f64> =
                        affine(&h2, &w1, &b1).into_iter().map(gelu).collect();
                    assert_eq!(hidden.len(), MLP_RATIO * d);
                    let m = affine(&hidden, &w2, &b2);
                    (0..d).map(|c| r[c] + m[c]).collect()
                })
                .collect()
        }
    }

    #[test]
    fn layer_preserves_token_count_and_width() {
        let store = test_store(8, 1);
        for n in [1usize, 5, 20] {
            let out = run_layer(&store, 2, &rand_tokens(n, 8, n as u64));
            assert_eq!(out.shape(), (n, 8));
        }
    }

    #[test]
    fn attention_softmax_rows_sum_to_one() {
        let store = test_store(8, 2);
        let mut g = Graph::new();
        let vars = bind_layer(&store, &mut g, "test.layer", 2);
        let x = g.input(rand_tokens(6, 8, 9));
        transformer_layer(&mut g, &vars, x).unwrap();
        let softmaxes = g.softmax_outputs();
        assert_eq!(softmaxes.len(), 2, "one softmax per head");
        for sm in softmaxes {
            for r in 0..sm.rows() {
                let sum: f64 = sm.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_matches_plain_loop_oracle() {
        for (dim, heads, n, seed) in [(6, 1, 3, 10u64), (8, 2, 5, 11), (12, 4, 7, 12)] {
            let store = test_store(dim, seed);
            let x = rand_tokens(n, dim, seed ^ 0xf00);
            let ours = run_layer(&store, heads, &x);
            let reference = oracle::full_layer(&store, heads, &x);
            for r in 0..n {
                for c in 0..dim {
                    let diff = (ours.at(r, c) - reference[r][c]).abs();
                    assert!(diff < 1e-12, "({r},{c}): {} vs {}", ours.at(r, c), reference[r][c]);
                }
            }
        }
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let store = test_store(8, 3);
        let x = rand_tokens(5, 8, 21);
        let base = run_layer(&store, 2, &x);
        // Swap tokens 1 and 3.
        let perm = [0usize, 3, 2, 1, 4];
        let mut xp = Tensor::zeros(5, 8);
        for (dst, &src) in perm.iter().enumerate() {
            xp.row_mut(dst).copy_from_slice(x.row(src));
        }
        let permuted = run_layer(&store, 2, &xp);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((permuted.at(dst, c) - base.at(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_rejects_nan_input() {
        let store = test_store(8, 4);
        let mut g = Graph::new();
        let vars = bind_layer(&store, &mut g, "test.layer", 2);
        let mut bad = rand_tokens(3, 8, 5);
        *bad.at_mut(1, 2) = f64::NAN;
        let x = g.input(bad);
        let err = transformer_layer(&mut g, &vars, x).unwrap_err();
        assert!(err.to_string().contains("NaN"));
    }

    #[test]
    fn layer_rejects_width_mismatch() {
        let store = test_store(8, 5);
        let mut g = Graph::new();
        let vars = bind_layer(&store, &mut g, "test.layer", 2);
        let x = g.input(rand_tokens(3, 6, 5));
        assert!(transformer_layer(&mut g, &vars, x).is_err());
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        // End-to-end check through one full block, f64, gradient wrt input.
        let store = test_store(6, 6);
        let x = rand_tokens(4, 6, 33);
        let eval = |t: &Tensor<f64>| -> (Graph<f64>, Var, Var) {
            let mut g = Graph::new();
            let leaf = g.leaf(t.clone(), true);
            let vars = bind_layer(&store, &mut g, "test.layer", 2);
            let out = transformer_layer(&mut g, &vars, leaf).unwrap();
            let mut wrng = ChaCha12Rng::seed_from_u64(0x0ddba11);
            let left = g.input(rand_tokens(1, 4, wrng.gen()));
            let right = g.input(rand_tokens(6, 1, wrng.gen()));
            let c1 = g.matmul(left, out);
            let loss = g.matmul(c1, right);
            (g, leaf, loss)
        };
        let (mut g0, leaf0, loss0) = eval(&x);
        g0.backward(loss0).unwrap();
        let analytic = g0.grad(leaf0).unwrap().clone();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let (gp, _, lp) = eval(&xp);
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let (gm, _, lm) = eval(&xm);
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!((a - numeric).abs() / denom < 1e-5, "entry {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn patch_count_matches_grid() {
        assert_eq!(patch_index_map(224, 16).len(), 196 * 16 * 16 * CHANNELS);
        assert_eq!(patch_index_map(32, 8).len(), 16 * 8 * 8 * CHANNELS);
    }

    #[test]
    fn patch_embed_produces_expected_tokens() {
        let mut store = ParamStore::<f64>::new();
        init_patch_embed(&mut store, 7, 4 * 4 * CHANNELS, 10, 4);
        let mut g = Graph::new();
        let vars = bind_patch_embed(&store, &mut g);
        let img = g.input(rand_tokens(1, 8 * 8 * CHANNELS, 2));
        let idx = patch_index_map(8, 4);
        let tokens = patch_embed(&mut g, img, vars, &idx).unwrap();
        assert_eq!(g.value(tokens).shape(), (4, 10));
    }

    #[test]
    fn zero_image_zero_pos_zero_bias_gives_zero_tokens() {
        let mut store = ParamStore::<f64>::new();
        init_patch_embed(&mut store, 7, 4 * 4 * CHANNELS, 10, 4);
        for v in store.get_mut("patch.pos").data_mut() {
            *v = 0.0;
        }
        let mut g = Graph::new();
        let vars = bind_patch_embed(&store, &mut g);
        let img = g.input(Tensor::zeros(1, 8 * 8 * CHANNELS));
        let idx = patch_index_map(8, 4);
        let tokens = patch_embed(&mut g, img, vars, &idx).unwrap();
        assert!(g.value(tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_rejects_wrong_image_size() {
        let mut store = ParamStore::<f64>::new();
        init_patch_embed(&mut store, 7, 4 * 4 * CHANNELS, 10, 4);
        let mut g = Graph::new();
        let vars = bind_patch_embed(&store, &mut g);
        let img = g.input(Tensor::zeros(1, 100));
        let idx = patch_index_map(8, 4);
        assert!(patch_embed(&mut g, img, vars, &idx).is_err());
    }

    #[test]
    fn patch_gather_reorders_exactly() {
        // First patch of a 4x4 image with patch 2: pixels (0,0),(0,1),(1,0),(1,1).
        let idx = patch_index_map(4, 2);
        let img: Vec<f64> = (0..4 * 4 * CHANNELS).map(|i| i as f64).collect();
        let first_patch: Vec<f64> = idx[..2 * 2 * CHANNELS].iter().map(|&i| img[i]).collect();
        let expected: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .flat_map(|&(y, x)| (0..CHANNELS).map(move |c| ((y * 4 + x) * CHANNELS + c) as f64))
            .collect();
        assert_eq!(first_patch, expected);
    }
}
