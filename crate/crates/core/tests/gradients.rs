use multiquant::engine::gradcheck::finite_diff_check;
use multiquant::engine::{Graph, ParamGroup, ParamId, ParamStore, Var};
use multiquant::quant::QuantSpec;
use multiquant::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Net {
    store: ParamStore,
    x: ParamId,
    w1: ParamId,
    wl: ParamId,
    wu: ParamId,
    al: ParamId,
    au: ParamId,
    w2: ParamId,
    labels: Vec<usize>,
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn net(seed: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, vec![4, 5], 1.0), ParamGroup::Weight);
    let w1 = store.add("w1", random(&mut rng, vec![6, 5], 0.8), ParamGroup::Weight);
    let wl = store.add("wl", Tensor::scalar(-0.7), ParamGroup::Quantizer);
    let wu = store.add("wu", Tensor::scalar(0.65), ParamGroup::Quantizer);
    let al = store.add("al", Tensor::scalar(-0.1), ParamGroup::Quantizer);
    let au = store.add("au", Tensor::scalar(1.2), ParamGroup::Quantizer);
    let w2 = store.add("w2", random(&mut rng, vec![3, 6], 0.8), ParamGroup::Weight);
    Net {
        store,
        x,
        w1,
        wl,
        wu,
        al,
        au,
        w2,
        labels: vec![0, 2, 1, 2],
    }
}

/// x -> quantized linear -> relu -> quantized activation -> linear -> CE.
fn build(n: &Net, bits: u8, s: &ParamStore, g: &mut Graph) -> Result<Var> {
    let p = |g: &mut Graph, id| g.param(id, s.value(id));
    let (x, w1, wl, wu, al, au, w2) = (
        p(g, n.x),
        p(g, n.w1),
        p(g, n.wl),
        p(g, n.wu),
        p(g, n.al),
        p(g, n.au),
        p(g, n.w2),
    );
    let wq = g.fake_quantize(w1, wl, wu, QuantSpec::weight(bits), "w1")?;
    let h = g.linear(x, wq, None)?;
    let h = g.relu(h);
    let hq = g.fake_quantize(h, al, au, QuantSpec::activation(bits), "a1")?;
    let z = g.linear(hq, w2, None)?;
    g.softmax_cross_entropy(z, &n.labels)
}

#[test]
fn quantized_two_layer_matches_finite_differences() {
    for bits in [2u8, 3, 4, 8] {
        let mut n = net(bits as u64);
        let mut store = std::mem::take(&mut n.store);
        for (name, id) in [
            ("input", n.x),
            ("w1", n.w1),
            ("weight l", n.wl),
            ("weight u", n.wu),
            ("act l", n.al),
            ("act u", n.au),
            ("w2", n.w2),
        ] {
            let rep = finite_diff_check(&mut store, id, 1e-6, |s, g| build(&n, bits, s, g))
                .unwrap_or_else(|e| panic!("b={bits} {name}: {e}"));
            assert!(rep.max_rel_error <= 1e-4, "b={bits} {name}: {rep:?}");
        }
    }
}

#[test]
fn clip_bounds_receive_gradient() {
    let n = net(7);
    let s = &n.store;
    let mut g = Graph::new();
    let x = g.input(s.value(n.x).clone());
    let w1 = g.param(n.w1, s.value(n.w1));
    let bounds: Vec<Var> = [n.wl, n.wu, n.al, n.au]
        .iter()
        .map(|&id| g.param(id, s.value(id)))
        .collect();
    let wq = g
        .fake_quantize(w1, bounds[0], bounds[1], QuantSpec::weight(4), "w1")
        .unwrap();
    let h = g.linear(x, wq, None).unwrap();
    let h = g.relu(h);
    let hq = g
        .fake_quantize(h, bounds[2], bounds[3], QuantSpec::activation(4), "a1")
        .unwrap();
    let loss = g.sum(hq);
    let grads = g.backward(loss).unwrap();
    for (i, &v) in bounds.iter().enumerate() {
        let d = grads.get(v).unwrap()[0];
        assert!(d.is_finite() && d != 0.0, "bound {i}: {d}");
    }
}
