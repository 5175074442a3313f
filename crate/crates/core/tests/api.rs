use metatrans::autodiff::{Graph, Tensor, Var};
use metatrans::learner::{optimizer, Objective};
use metatrans::metalearn::{estimator, MetaSets};
use metatrans::params::{ParamSet, ParamVars, Partition, TrainableSet};
use metatrans::Result;
use proptest::prelude::*;

fn vec_in(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, n)
}

struct Net {
    x: Tensor,
    onehot: Tensor,
}

impl Net {
    fn loss(&self, g: &mut Graph, p: &ParamSet, trainable: bool) -> Result<Var> {
        let names: TrainableSet = if trainable { p.all_names() } else { TrainableSet::new() };
        let v = p.register(g, &names);
        let x = g.constant(self.x.clone());
        let h = g.matmul(x, v["w"])?;
        let n = g.layer_norm_affine(h, v["gain"], v["bias"], 1e-5)?;
        let ls = g.log_softmax(n)?;
        let oh = g.constant(self.onehot.clone());
        let picked = g.mul(ls, oh)?;
        let nll = g.sum(picked)?;
        let nll = g.scale(nll, -1.0)?;
        let small = g.scale(h, 0.1)?;
        let e = g.exp(small)?;
        let e2 = g.powf(e, 2.0)?;
        let reg = g.mean(e2)?;
        g.add(nll, reg)
    }

    fn value(&self, p: &ParamSet) -> f64 {
        let mut g = Graph::new();
        let l = self.loss(&mut g, p, false).unwrap();
        g.value(l).item()
    }
}

fn net_params(w: Vec<f64>, gain: Vec<f64>, bias: Vec<f64>) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Partition::Encoder, Tensor::matrix(4, 5, w).unwrap());
    p.insert("gain", Partition::Encoder, Tensor::matrix(1, 5, gain).unwrap());
    p.insert("bias", Partition::Encoder, Tensor::matrix(1, 5, bias).unwrap());
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn graph_gradients_match_central_differences(
        x in vec_in(12, -1.0, 1.0),
        w in vec_in(20, -1.0, 1.0),
        gain in vec_in(5, 0.5, 1.5),
        bias in vec_in(5, -0.5, 0.5),
        targets in proptest::collection::vec(0usize..5, 3),
    ) {
        let mut onehot = vec![0.0; 15];
        for (r, t) in targets.iter().enumerate() {
            onehot[r * 5 + t] = 1.0;
        }
        let net = Net {
            x: Tensor::matrix(3, 4, x).unwrap(),
            onehot: Tensor::matrix(3, 5, onehot).unwrap(),
        };
        let p = net_params(w, gain, bias);
        let mut g = Graph::new();
        let l = net.loss(&mut g, &p, true).unwrap();
        let grads = g.backward(l).unwrap();
        let h = 1e-5;
        for name in ["w", "gain", "bias"] {
            let analytic = grads.get(name).unwrap();
            for i in 0..p.get(name).unwrap().numel() {
                let mut plus = p.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += h;
                let mut minus = p.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= h;
                let fd = (net.value(&plus) - net.value(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                prop_assert!(err < 1e-4, "{name}[{i}]: analytic {a} fd {fd}");
            }
        }
    }

    // f(w) = Σ cᵢ exp(wᵢ) + (Σ wᵢ²)², so H = diag(c·eʷ) + 4‖w‖²I + 8wwᵀ.
    #[test]
    fn double_backward_gives_hessian_vector_products(
        w in vec_in(6, -1.0, 1.0),
        c in vec_in(6, 0.1, 2.0),
        v in vec_in(6, -1.0, 1.0),
    ) {
        let mut g = Graph::new();
        let wv = g.param("w", Tensor::vector(w.clone()));
        let cv = g.constant(Tensor::vector(c.clone()));
        let e = g.exp(wv).unwrap();
        let ce = g.mul(cv, e).unwrap();
        let s1 = g.sum(ce).unwrap();
        let sq = g.mul(wv, wv).unwrap();
        let n2 = g.sum(sq).unwrap();
        let q = g.mul(n2, n2).unwrap();
        let f = g.add(s1, q).unwrap();
        let gw = g.grad_graph(f, &[wv]).unwrap()[0].unwrap();
        let vv = g.constant(Tensor::vector(v.clone()));
        let gv = g.mul(gw, vv).unwrap();
        let dot = g.sum(gv).unwrap();
        let hv = g.backward(dot).unwrap();
        let hv = hv.get("w").unwrap().data();

        let norm2: f64 = w.iter().map(|a| a * a).sum();
        let wdotv: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        for i in 0..6 {
            let want = c[i] * w[i].exp() * v[i] + 4.0 * norm2 * v[i] + 8.0 * w[i] * wdotv;
            prop_assert!((hv[i] - want).abs() < 1e-10 * (1.0 + want.abs()), "{i}: {} vs {want}", hv[i]);
        }
    }

    #[test]
    fn sgd_step_is_a_plain_axpy(theta in vec_in(5, -2.0, 2.0), grad in vec_in(5, -2.0, 2.0), lr in 0.0f64..1.0) {
        let mut p = ParamSet::new();
        p.insert("w", Partition::Decoder, Tensor::vector(theta.clone()));
        let grads = [("w".to_string(), Tensor::vector(grad.clone()))].into_iter().collect();
        optimizer("sgd").unwrap().step(&mut p, &grads, lr).unwrap();
        for (i, got) in p.get("w").unwrap().data().iter().enumerate() {
            prop_assert_eq!(*got, theta[i] - lr * grad[i]);
        }
    }

    // L_t(θ) = ½‖θ − t‖², so θ′ = θ − η(θ − t_D) and the exact
    // meta-gradient is (1 − η)(θ′ − t_D′).
    #[test]
    fn estimators_match_the_isotropic_quadratic(
        theta in vec_in(4, -2.0, 2.0),
        td in vec_in(4, -2.0, 2.0),
        tdp in vec_in(4, -2.0, 2.0),
        eta in 0.0f64..0.5,
    ) {
        let mut p = ParamSet::new();
        p.insert("w", Partition::Encoder, Tensor::vector(theta.clone()));
        let sets = MetaSets::same(p.all_names());
        let adapted: Vec<f64> = (0..4).map(|i| theta[i] - eta * (theta[i] - td[i])).collect();
        let first: Vec<f64> = (0..4).map(|i| adapted[i] - tdp[i]).collect();
        let exact: Vec<f64> = first.iter().map(|x| (1.0 - eta) * x).collect();
        for (name, want, tol) in [("first_order", &first, 1e-12), ("exact", &exact, 1e-12), ("hvp", &exact, 1e-6)] {
            let est = estimator::<Vec<f64>>(name, "sgd", 1e-4, 1000).unwrap();
            let mg = est.meta_gradient(&Centre, &p, &sets, &td, &tdp, eta).unwrap();
            for (i, got) in mg.grads["w"].data().iter().enumerate() {
                prop_assert!((got - want[i]).abs() < tol, "{name}[{i}]: {got} vs {}", want[i]);
            }
        }
    }
}

struct Centre;

impl Objective<Vec<f64>> for Centre {
    fn loss(&self, g: &mut Graph, vars: &ParamVars, t: &Vec<f64>) -> Result<Var> {
        let c = g.constant(Tensor::vector(t.clone()));
        let d = g.sub(vars["w"], c)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq)?;
        g.scale(s, 0.5)
    }
}
