//! Straight-line reference implementation of the micro model.
//!
//! A self-contained, tape-free forward pass for a single-layer single-head
//! configuration, written directly against the architecture definition. The
//! production forward must agree with it to 1e-10 on random parameters.

use mmt_core::model::{LanguageId, Model, ModelConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RMS_EPS: f64 = 1e-6;

/// Raw parameter access by name.
struct Params<'a> {
    model: &'a Model,
}

impl<'a> Params<'a> {
    fn get(&self, name: &str) -> (&[usize], &[f64]) {
        let id = self
            .model
            .store()
            .find(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        let p = self.model.store().get(id);
        (p.value.shape(), p.value.data())
    }

    fn mat(&self, name: &str) -> (usize, usize, Vec<f64>) {
        let (shape, data) = self.get(name);
        assert_eq!(shape.len(), 2);
        (shape[0], shape[1], data.to_vec())
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        let (shape, data) = self.get(name);
        assert_eq!(shape.len(), 1);
        data.to_vec()
    }
}

fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn rms_norm(x: &[f64], rows: usize, d: usize, gain: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for j in 0..d {
            y[r * d + j] = gain[j] * row[j] * inv;
        }
    }
    y
}

fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Single-head attention; `causal` masks strictly-future key positions.
#[allow(clippy::too_many_arguments)]
fn attention(
    p: &Params,
    prefix: &str,
    q_in: &[f64],
    t_q: usize,
    kv_in: &[f64],
    t_k: usize,
    d: usize,
    causal: bool,
) -> Vec<f64> {
    let (_, _, wq) = p.mat(&format!("{prefix}.wq"));
    let (_, _, wk) = p.mat(&format!("{prefix}.wk"));
    let (_, _, wv) = p.mat(&format!("{prefix}.wv"));
    let (_, _, wo) = p.mat(&format!("{prefix}.wo"));
    let q = matmul(q_in, t_q, d, &wq, d);
    let k = matmul(kv_in, t_k, d, &wk, d);
    let v = matmul(kv_in, t_k, d, &wv, d);
    let scale = 1.0 / (d as f64).sqrt();
    let kt = transpose(&k, t_k, d);
    let mut scores = matmul(&q, t_q, d, &kt, t_k);
    for s in scores.iter_mut() {
        *s *= scale;
    }
    if causal {
        for i in 0..t_q {
            for j in (i + 1)..t_k {
                scores[i * t_k + j] += -1e30;
            }
        }
    }
    softmax_rows(&mut scores, t_q, t_k);
    let ctx = matmul(&scores, t_q, t_k, &v, d);
    matmul(&ctx, t_q, d, &wo, d)
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn ffn(p: &Params, prefix: &str, x: &[f64], t: usize, d: usize, d_ff: usize) -> Vec<f64> {
    let (_, _, w1) = p.mat(&format!("{prefix}.w1"));
    let (_, _, w2) = p.mat(&format!("{prefix}.w2"));
    let mut mid = matmul(x, t, d, &w1, d_ff);
    for v in mid.iter_mut() {
        *v = v.max(0.0);
    }
    matmul(&mid, t, d_ff, &w2, d)
}

fn adapter(p: &Params, prefix: &str, h: &[f64], t: usize, d: usize, d_b: usize) -> Vec<f64> {
    let (_, _, down_w) = p.mat(&format!("{prefix}.down.w")); // [d_b x d]
    let down_b = p.vec(&format!("{prefix}.down.b"));
    let (_, _, up_w) = p.mat(&format!("{prefix}.up.w")); // [d x d_b]
    let up_b = p.vec(&format!("{prefix}.up.b"));
    let down_t = transpose(&down_w, d_b, d); // [d x d_b]
    let mut mid = matmul(h, t, d, &down_t, d_b);
    for r in 0..t {
        for j in 0..d_b {
            mid[r * d_b + j] = (mid[r * d_b + j] + down_b[j]).max(0.0);
        }
    }
    let up_t = transpose(&up_w, d, d_b); // [d_b x d]
    let mut out = matmul(&mid, t, d_b, &up_t, d);
    for r in 0..t {
        for j in 0..d {
            out[r * d + j] += up_b[j] + h[r * d + j];
        }
    }
    out
}

fn embed(p: &Params, tokens: &[usize], d: usize) -> Vec<f64> {
    let (_, _, emb) = p.mat("emb.token");
    let (_, _, pos) = p.mat("emb.pos");
    let mut h = vec![0.0; tokens.len() * d];
    for (t, &tok) in tokens.iter().enumerate() {
        for j in 0..d {
            h[t * d + j] = emb[tok * d + j] + pos[t * d + j];
        }
    }
    h
}

fn reference_encode(model: &Model, tokens: &[usize], lang: usize) -> Vec<f64> {
    let p = Params { model };
    let c = model.config();
    let (d, d_ff, d_b, t) = (c.d_model, c.d_ff, c.d_bottleneck, tokens.len());
    let mut h = embed(&p, tokens, d);

    let normed = rms_norm(&h, t, d, &p.vec("enc.0.ln_attn.gain"));
    let attn = attention(&p, "enc.0.attn", &normed, t, &normed, t, d, false);
    add_assign(&mut h, &attn);

    let normed = rms_norm(&h, t, d, &p.vec("enc.0.ln_ffn.gain"));
    let f = ffn(&p, "enc.0.ffn", &normed, t, d, d_ff);
    add_assign(&mut h, &f);

    adapter(&p, &format!("mod.enc.0.lang{lang}"), &h, t, d, d_b)
}

fn reference_forward(model: &Model, src: &[usize], tgt_in: &[usize], lang: usize) -> Vec<f64> {
    let p = Params { model };
    let c = model.config();
    let (d, d_ff, d_b) = (c.d_model, c.d_ff, c.d_bottleneck);
    let enc = reference_encode(model, src, lang);
    let (t_s, t_t) = (src.len(), tgt_in.len());

    let mut h = embed(&p, tgt_in, d);

    let normed = rms_norm(&h, t_t, d, &p.vec("dec.0.ln_attn.gain"));
    let attn = attention(&p, "dec.0.attn", &normed, t_t, &normed, t_t, d, true);
    add_assign(&mut h, &attn);

    let normed = rms_norm(&h, t_t, d, &p.vec("dec.0.ln_cross.gain"));
    let cross = attention(&p, "dec.0.cross", &normed, t_t, &enc, t_s, d, false);
    add_assign(&mut h, &cross);

    let normed = rms_norm(&h, t_t, d, &p.vec("dec.0.ln_ffn.gain"));
    let f = ffn(&p, "dec.0.ffn", &normed, t_t, d, d_ff);
    add_assign(&mut h, &f);

    h = adapter(&p, &format!("mod.dec.1.lang{lang}"), &h, t_t, d, d_b);

    let final_h = rms_norm(&h, t_t, d, &p.vec("dec.final_ln.gain"));
    let (v, _, emb) = p.mat("emb.token");
    let emb_t = transpose(&emb, v, d);
    matmul(&final_h, t_t, d, &emb_t, v)
}

fn micro_model(seed: u64) -> Model {
    let config = ModelConfig {
        n_languages: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_model: 6,
        n_heads: 1,
        d_ff: 10,
        d_bottleneck: 3,
        vocab_size: 15,
        max_len: 9,
    };
    let mut model = Model::new(config, Variant::Modular, seed).unwrap();
    // give every parameter a random value so nothing cancels structurally
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        for v in model.store_mut().get_mut(id).value.data_mut() {
            *v += rng.random_range(-0.6..0.6);
        }
    }
    model
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn encode_matches_straight_line_reference() {
    for seed in 0..5u64 {
        let model = micro_model(seed);
        let tokens = [1usize, 7, 3, 12, 0];
        for lang in 0..2 {
            let ours = model.encode(&tokens, LanguageId(lang)).unwrap();
            let reference = reference_encode(&model, &tokens, lang);
            let diff = max_abs_diff(ours.data(), &reference);
            assert!(diff < 1e-10, "seed {seed} lang {lang}: encode diff {diff}");
        }
    }
}

#[test]
fn forward_matches_straight_line_reference() {
    for seed in 0..5u64 {
        let model = micro_model(seed);
        let src = [4usize, 2, 9, 14];
        let tgt_in = [13usize, 5, 8];
        for lang in 0..2 {
            let ours = model.forward(&src, &tgt_in, LanguageId(lang)).unwrap();
            let reference = reference_forward(&model, &src, &tgt_in, lang);
            let diff = max_abs_diff(ours.data(), &reference);
            assert!(diff < 1e-10, "seed {seed} lang {lang}: forward diff {diff}");
        }
    }
}
