use autodiff::{AdamW, AdamWConfig, Gradients, Graph, ParamId, ParamStore, Tensor};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 2usize..12).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), prop::collection::vec(-50.0f64..50.0, r * c))
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c, data) in matrix()) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[r, c], data).unwrap());
        let y = g.softmax(x);
        for i in 0..r {
            let row = g.value(y).row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized((r, c, data) in matrix()) {
        // Skip nearly-constant rows where the epsilon dominates.
        let t = Tensor::new(&[r, c], data).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t.clone());
        let y = g.layer_norm(x, 1e-6);
        for i in 0..r {
            let src = t.row(i);
            let m = src.iter().sum::<f64>() / c as f64;
            let v = src.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / c as f64;
            prop_assume!(v > 1e-2);
            let row = g.value(y).row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn adamw_without_decay_is_adam(
        theta in prop::collection::vec(-3.0f64..3.0, 1..8),
        grads in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 8), 1..5),
        lr in 1e-5f64..1e-2,
    ) {
        let n = theta.len();
        let mut store = ParamStore::new();
        store.insert("p", Tensor::new(&[n], theta.clone()).unwrap()).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&store, cfg);
        // Textbook Adam, written independently.
        let (mut m, mut v, mut p) = (vec![0.0; n], vec![0.0; n], theta);
        for (step, g) in grads.iter().enumerate() {
            let g = &g[..n];
            let mut gr = Gradients::empty(1);
            gr.insert(ParamId(0), Tensor::new(&[n], g.to_vec()).unwrap());
            opt.step(&mut store, &gr, lr).unwrap();
            let t = (step + 1) as i32;
            for i in 0..n {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / (1.0 - cfg.beta1.powi(t));
                let vh = v[i] / (1.0 - cfg.beta2.powi(t));
                p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
            prop_assert_eq!(store.get(ParamId(0)).data(), &p[..]);
        }
    }
}
