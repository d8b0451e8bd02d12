use eager_nn::gradcheck::check;
use eager_nn::{ConvGeom, ParamStore, Tape, Tensor, Var, NO_INDEX};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

/// Weighted sum of all entries so every output element carries a distinct gradient.
fn probe(t: &mut Tape<'_, f64>, x: Var) -> Var {
    let n = t.value(x).len();
    let w = Tensor::from_fn(t.shape(x), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4 + 0.01 * (i % n) as f64);
    let w = t.constant(w);
    let y = t.mul(x, w);
    t.sum(y)
}

fn assert_ok(name: &str, p: &ParamStore<f64>, f: impl Fn(&mut Tape<'_, f64>) -> Var) {
    let r = check(p, 1e-5, 1e-8, f);
    assert!(r.max_rel_error < TOL, "{name}: rel error {} at {}[{}]", r.max_rel_error, r.worst_param, r.worst_index);
}

#[test]
fn affine_and_matmul() {
    let mut r = rng();
    let mut p = ParamStore::new();
    let x = p.uniform("x", &[3, 4], 1.0, &mut r);
    let w = p.uniform("w", &[4, 5], 1.0, &mut r);
    let b = p.uniform("b", &[5], 1.0, &mut r);
    let w2 = p.uniform("w2", &[5, 2], 1.0, &mut r);
    assert_ok("affine", &p, |t| {
        let (xv, wv, bv, w2v) = (t.param(x), t.param(w), t.param(b), t.param(w2));
        let h = t.affine(xv, wv, Some(bv));
        let h = t.tanh(h);
        let o = t.matmul(h, w2v);
        probe(t, o)
    });
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let mut p = ParamStore::new();
    let a = p.uniform("a", &[2, 6], 1.5, &mut r);
    let b = p.uniform("b", &[2, 6], 1.5, &mut r);
    let c = p.uniform("c", &[6], 1.0, &mut r);
    assert_ok("elementwise", &p, |t| {
        let (a, b, c) = (t.param(a), t.param(b), t.param(c));
        let s = t.add(a, b);
        let d = t.sub(s, b);
        let m = t.mul(d, b);
        let e = t.exp(m);
        let sg = t.sigmoid(e);
        let sq = t.square(sg);
        let r = t.add_row(sq, c);
        let rs = t.row_scale(r, vec![0.5, -2.0]);
        let sc = t.scale(rs, 1.7);
        probe(t, sc)
    });
}

#[test]
fn relu_min_clamp_away_from_kinks() {
    // Values are kept off the non-differentiable points.
    let mut p = ParamStore::new();
    let a = p.insert("a", Tensor::new(&[6], vec![-1.0, 0.3, 1.4, -0.2, 0.9, 2.0]));
    let b = p.insert("b", Tensor::new(&[6], vec![0.5, -0.6, 1.1, 0.4, 1.3, 0.1]));
    assert_ok("relu/min/clamp", &p, |t| {
        let (a, b) = (t.param(a), t.param(b));
        let r = t.relu(a);
        let m = t.minimum(r, b);
        let c = t.clamp(a, -0.5, 1.2);
        let s = t.add(m, c);
        probe(t, s)
    });
}

#[test]
fn embed_sum_with_skips() {
    let mut r = rng();
    let mut p = ParamStore::new();
    let table = p.uniform("table", &[5, 3], 1.0, &mut r);
    assert_ok("embed_sum", &p, |t| {
        let tv = t.param(table);
        let e = t.embed_sum(tv, vec![0, 4, 4, NO_INDEX, 2, 1], 2);
        let e = t.tanh(e);
        probe(t, e)
    });
}

#[test]
fn conv2d_with_stride_and_padding() {
    let mut r = rng();
    let mut p = ParamStore::new();
    let x = p.uniform("x", &[2, 5, 4, 2], 1.0, &mut r);
    let w = p.uniform("w", &[3 * 3 * 2, 3], 0.5, &mut r);
    let b = p.uniform("b", &[3], 0.5, &mut r);
    for geom in [ConvGeom { kernel: 3, stride: 1, pad: 1 }, ConvGeom { kernel: 3, stride: 2, pad: 1 }] {
        assert_ok("conv2d", &p, |t| {
            let (x, w, b) = (t.param(x), t.param(w), t.param(b));
            let y = t.conv2d(x, w, b, geom);
            let y = t.tanh(y);
            probe(t, y)
        });
    }
}

#[test]
fn film_and_segment_mean() {
    let mut r = rng();
    let mut p = ParamStore::new();
    let x = p.uniform("x", &[2, 3, 4], 1.0, &mut r);
    let g = p.uniform("g", &[2, 4], 1.0, &mut r);
    let b = p.uniform("b", &[2, 4], 1.0, &mut r);
    assert_ok("film", &p, |t| {
        let (x, g, b) = (t.param(x), t.param(g), t.param(b));
        let y = t.film(x, g, b);
        let y = t.tanh(y);
        let y = t.reshape(y, &[6, 4]);
        let m = t.segment_mean(y, vec![(0, 2), (2, 4), (5, 1)]);
        probe(t, m)
    });
}

#[test]
fn layer_norm_rows() {
    let mut r = rng();
    let mut p = ParamStore::new();
    let x = p.uniform("x", &[3, 5], 2.0, &mut r);
    let g = p.uniform("g", &[5], 1.0, &mut r);
    let b = p.uniform("b", &[5], 1.0, &mut r);
    assert_ok("layer_norm", &p, |t| {
        let (x, g, b) = (t.param(x), t.param(g), t.param(b));
        let y = t.layer_norm(x, g, b);
        probe(t, y)
    });
}

#[test]
fn segmented_attention() {
    let mut r = rng();
    let mut p = ParamStore::new();
    let q = p.uniform("q", &[7, 4], 1.0, &mut r);
    let k = p.uniform("k", &[7, 4], 1.0, &mut r);
    let v = p.uniform("v", &[7, 4], 1.0, &mut r);
    assert_ok("attention", &p, |t| {
        let (q, k, v) = (t.param(q), t.param(k), t.param(v));
        let y = t.attention(q, k, v, vec![(0, 3), (3, 4)], 2);
        probe(t, y)
    });
    // Shared input for q, k and v exercises gradient accumulation.
    assert_ok("self-attention", &p, |t| {
        let q = t.param(q);
        let y = t.attention(q, q, q, vec![(0, 7)], 1);
        probe(t, y)
    });
}

#[test]
fn row_layout_ops() {
    let mut r = rng();
    let mut p = ParamStore::new();
    let a = p.uniform("a", &[2, 5], 1.0, &mut r);
    let b = p.uniform("b", &[3, 5], 1.0, &mut r);
    assert_ok("concat/slice", &p, |t| {
        let (a, b) = (t.param(a), t.param(b));
        let c = t.concat_rows(&[a, b, a]);
        let s = t.slice_rows(c, 1, 5);
        let s = t.slice_cols(s, 1, 3);
        let s = t.tanh(s);
        let rs = t.row_sum(s);
        probe(t, rs)
    });
}

#[test]
fn softmax_family() {
    let mut r = rng();
    let mut p = ParamStore::new();
    let logits = p.uniform("logits", &[4, 6], 2.0, &mut r);
    assert_ok("cross_entropy", &p, |t| {
        let l = t.param(logits);
        t.cross_entropy(l, vec![0, 5, 2, 2])
    });
    assert_ok("log_softmax/pick/entropy", &p, |t| {
        let l = t.param(logits);
        let lp = t.log_softmax(l);
        let picked = t.pick(lp, vec![1, 3, 0, 5]);
        let pr = t.exp(lp);
        let plp = t.mul(pr, lp);
        let ent = t.row_sum(plp);
        let a = t.mean(picked);
        let b = t.mean(ent);
        let s = t.add(a, b);
        t.scale(s, -1.0)
    });
}

#[test]
fn cross_entropy_matches_manual_value() {
    let mut p = ParamStore::<f64>::new();
    let l = p.insert("l", Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]));
    let mut t = Tape::new(&p);
    let lv = t.param(l);
    let loss = t.cross_entropy(lv, vec![2]);
    let expected = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
    assert!((t.value(loss).item() - expected).abs() < 1e-12);
}
