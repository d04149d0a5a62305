use case_autograd::gradcheck::{all_coords, check_gradients};
use case_autograd::{Graph, Matrix, ParamStore};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn assert_grads(store: &mut ParamStore, f: impl Fn(&mut Graph<'_>) -> case_autograd::Var) {
    let coords = all_coords(store);
    let report = check_gradients(store, &coords, 1e-5, 1e-7, f);
    assert!(
        report.max_rel_error < 1e-6,
        "gradient mismatch: {report:?}"
    );
}

#[test]
fn matmul_transpose_and_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, 3, 4));
    let b = store.add("b", random(&mut rng, 4, 2));
    let row = store.add("row", random(&mut rng, 1, 2));
    let col = store.add("col", random(&mut rng, 3, 1));
    let w = store.add("w", random(&mut rng, 3, 2));
    assert_grads(&mut store, |g| {
        let (a, b, row, col, w) = (g.param(a), g.param(b), g.param(row), g.param(col), g.param(w));
        let ab = g.matmul(a, b);
        let x = g.add(ab, row);
        let x = g.sub(x, col);
        let x = g.mul(x, w);
        let bt = g.transpose(b);
        let y = g.matmul(x, bt);
        let y = g.scale(y, 0.7);
        let y = g.mul(y, col);
        g.sum_all(y)
    });
}

#[test]
fn pointwise_nonlinearities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, 2, 5));
    let b = store.add("b", random(&mut rng, 2, 5).mapv(|x| x.abs() + 0.5));
    assert_grads(&mut store, |g| {
        let (a, b) = (g.param(a), g.param(b));
        let t = g.tanh(a);
        let s = g.sigmoid(a);
        let ge = g.gelu(a);
        let e = g.exp(a);
        let l = g.log(b);
        let d = g.div(t, b);
        let c = g.clamp_min(a, -0.3);
        let parts = [t, s, ge, e, l, d, c];
        let mut acc = parts[0];
        for (i, &p) in parts.iter().enumerate().skip(1) {
            let scaled = g.scale(p, 1.0 + i as f64 * 0.1);
            let m = g.mul(scaled, acc);
            acc = g.add(acc, m);
        }
        g.mean_all(acc)
    });
}

#[test]
fn softmax_layernorm_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, 4, 6));
    let w = store.add("w", random(&mut rng, 4, 6));
    let denom = store.add("denom", random(&mut rng, 4, 1).mapv(|x| x.abs() + 1.0));
    assert_grads(&mut store, |g| {
        let (a, w, denom) = (g.param(a), g.param(w), g.param(denom));
        let s = g.softmax_rows(a);
        let n = g.layer_norm_rows(a, 1e-5);
        let sw = g.mul(s, w);
        let nw = g.mul(n, w);
        let rs = g.row_sums(sw);
        let cs = g.col_sums(nw);
        let q = g.div(sw, denom);
        let qs = g.sum_all(q);
        let x = g.matmul(rs, cs);
        let xs = g.sum_all(x);
        g.add(xs, qs)
    });
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, 3, 4));
    let b = store.add("b", random(&mut rng, 3, 2));
    let table = store.add("table", random(&mut rng, 5, 4));
    let w = store.add("w", random(&mut rng, 6, 4));
    assert_grads(&mut store, |g| {
        let (a, b, table, w) = (g.param(a), g.param(b), g.param(table), g.param(w));
        let cat = g.concat_cols(&[a, b]);
        let rows = g.gather_rows(table, &[4, 0, 4, 2]);
        let left = g.slice_cols(cat, 0, 4);
        let stacked = g.concat_rows(&[left, rows]);
        let top = g.slice_rows(stacked, 1, 7);
        let mx = g.max_of(&[top, w]);
        let sc = g.scatter_cols(mx, &[0, 2, 2, 1], 3);
        let sm = g.softmax_rows(sc);
        let picked = g.pick(sm, &[0, 1, 2, 2, 0, 1]);
        let r = g.reshape(top, 4, 6);
        let rs = g.sum_all(r);
        let lp = g.log(picked);
        let ls = g.sum_all(lp);
        g.add(ls, rs)
    });
}

#[test]
fn gather_rows_on_a_parameter_gives_sparse_rows() {
    let mut store = ParamStore::new();
    let table = store.add("table", Array2::from_shape_fn((4, 2), |(r, c)| (r * 2 + c) as f64));
    let mut g = Graph::new(&store);
    let t = g.param(table);
    let rows = g.gather_rows(t, &[1, 1, 3]);
    let loss = g.sum_all(rows);
    let grads = g.backward(loss);
    let dense = grads.get(table, (4, 2)).unwrap();
    assert_eq!(dense.row(0).to_vec(), vec![0.0, 0.0]);
    assert_eq!(dense.row(1).to_vec(), vec![2.0, 2.0]);
    assert_eq!(dense.row(3).to_vec(), vec![1.0, 1.0]);

    let mut buffers = store.zeros_like();
    grads.accumulate_into(&mut buffers, 0.5);
    assert_eq!(buffers[0][[1, 0]], 1.0);
}

#[test]
fn reachability_excludes_unused_parameters() {
    let mut store = ParamStore::new();
    let used = store.add("used", Array2::ones((1, 1)));
    let unused = store.add("unused", Array2::ones((1, 1)));
    let mut g = Graph::new(&store);
    let u = g.param(used);
    let v = g.param(unused);
    let y = g.scale(u, 3.0);
    let _ = g.scale(v, 2.0);
    let reach = g.reachable_params(y);
    assert!(reach.contains(&used));
    assert!(!reach.contains(&unused));
    let grads = g.backward(y);
    assert_eq!(grads.touched(), vec![used]);
}

#[test]
fn softmax_with_large_negative_mask_is_exactly_zero() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Array2::from_shape_vec((1, 3), vec![0.3, -1e9, 0.1]).unwrap());
    let s = g.softmax_rows(x);
    let v = g.value(s);
    assert_eq!(v[[0, 1]], 0.0);
    assert!((v.sum() - 1.0).abs() < 1e-15);
}

#[test]
fn stencils_across_a_max_switch_are_flagged() {
    let mut store = ParamStore::new();
    // 0.5 + 1e-6 sits inside a 1e-4 stencil of the switch at 0.5
    let a = store.add("a", Array2::from_shape_vec((1, 2), vec![0.5 + 1e-6, 2.0]).unwrap());
    let b = store.add("b", Array2::from_shape_vec((1, 2), vec![0.5, -1.0]).unwrap());
    let coords = all_coords(&store);
    let report = check_gradients(&mut store, &coords, 1e-4, 1e-6, |g| {
        let (x, y) = (g.param(a), g.param(b));
        let m = g.max_of(&[x, y]);
        let sq = g.mul(m, m);
        g.sum_all(sq)
    });
    assert_eq!(report.non_smooth, 2);
    assert_eq!(report.checked, 2);
    assert!(report.max_rel_error < 1e-8, "{report:?}");
    let mut g = Graph::new(&store);
    let x = g.param(a);
    g.clamp_min(x, 1.0);
    assert_eq!(g.branch_signature(), &[1, 0]);
}
