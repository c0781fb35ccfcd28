//! Finite-difference checks of the hand-written backward paths.

use bamm::nn::Conv1d;
use bamm::trainer::{batch_loss, prepare_sample, TokenRecord, TrainConfig};
use bamm::transformer::{MainTransformer, TransformerConfig};
use bamm_core::loss::LossReduction;
use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn conv_gradients_match_finite_differences() {
    let dev = Device::Cpu;
    for (k, stride, pad, dil) in [(3usize, 1usize, 1usize, 1usize), (3, 1, 0, 1), (1, 1, 0, 1), (4, 2, 1, 1), (3, 1, 3, 3)] {
        let x = Var::from_vec((0..48).map(|i| ((i * 7 % 11) as f64 * 0.3).sin()).collect::<Vec<_>>(), (2, 8, 3), &dev).unwrap();
        let w = Var::from_vec((0..6 * k).map(|i| ((i * 5 % 7) as f64 * 0.2).cos()).collect::<Vec<_>>(), (2, 3, k), &dev).unwrap();
        let f = |x: &Tensor, w: &Tensor| {
            let conv = Conv1d::from_parts(w.clone(), Tensor::zeros(2, DType::F64, &dev).unwrap(), pad, stride, dil);
            conv.forward(x).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let conv = Conv1d::from_parts(w.as_tensor().clone(), Tensor::zeros(2, DType::F64, &dev).unwrap(), pad, stride, dil);
        let grads = conv.forward(x.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let h = 1e-6;
        for (var, shape, other_is_w) in [(&w, (2, 3, k), true), (&x, (2, 8, 3), false)] {
            let g = flat(grads.get(var.as_tensor()).unwrap());
            let v = flat(var.as_tensor());
            for i in 0..v.len() {
                let mut a = v.clone();
                a[i] += h;
                let mut b = v.clone();
                b[i] -= h;
                let (ta, tb) = (Tensor::from_vec(a, shape, &dev).unwrap(), Tensor::from_vec(b, shape, &dev).unwrap());
                let fd = if other_is_w {
                    (f(x.as_tensor(), &ta) - f(x.as_tensor(), &tb)) / (2.0 * h)
                } else {
                    (f(&ta, w.as_tensor()) - f(&tb, w.as_tensor())) / (2.0 * h)
                };
                assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "k{k} s{stride} p{pad} d{dil} entry {i}: {} vs {fd}", g[i]);
            }
        }
    }
}

#[test]
fn hybrid_loss_gradient_matches_finite_differences() {
    let cfg = TransformerConfig { codebook_size: 6, num_labels: 2, n_layers: 2, n_heads: 2, d_model: 8, max_len: 10, dropout: 0.0, ff_mult: 2 };
    let model = MainTransformer::new(cfg, 5, DType::F64).unwrap();
    let tc = TrainConfig { lambda: 0.5, corrupt_prob: 0.3, ..TrainConfig::toy() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let records = [
        TokenRecord { label: 0, tokens: vec![1, 2, 3, 4, 5] },
        TokenRecord { label: 1, tokens: vec![0, 5, 2] },
        TokenRecord { label: 0, tokens: vec![3, 3, 1, 0, 2, 4, 1, 5] },
        TokenRecord { label: 1, tokens: vec![4, 1] },
    ];
    let samples: Vec<_> = records.iter().map(|r| prepare_sample(r, 6, &tc, &mut rng).unwrap()).collect();
    let loss = |m: &MainTransformer| batch_loss(m, &samples, 0.5, LossReduction::TokenMean, None).unwrap().loss.to_scalar::<f64>().unwrap();
    let grads = batch_loss(&model, &samples, 0.5, LossReduction::TokenMean, None).unwrap().loss.backward().unwrap();
    let dev = Device::Cpu;
    let mut checked = 0;
    for (name, var) in model.params().named() {
        let g = flat(grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name}: no gradient")));
        let orig = flat(var.as_tensor());
        for idx in [0, orig.len() / 3, orig.len() - 1] {
            let h = 1e-5;
            let mut p = orig.clone();
            p[idx] += h;
            var.set(&Tensor::from_vec(p, var.dims(), &dev).unwrap()).unwrap();
            let lp = loss(&model);
            let mut m = orig.clone();
            m[idx] -= h;
            var.set(&Tensor::from_vec(m, var.dims(), &dev).unwrap()).unwrap();
            let lm = loss(&model);
            var.set(&Tensor::from_vec(orig.clone(), var.dims(), &dev).unwrap()).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((g[idx] - fd).abs() <= 1e-6 + 1e-4 * fd.abs(), "{name}[{idx}]: {} vs {fd}", g[idx]);
            checked += 1;
        }
    }
    assert!(checked > 30);
}
