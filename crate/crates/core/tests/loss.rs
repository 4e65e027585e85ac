use candle_core::{DType, Device, Tensor, Var};
use damnet::fusion::loss::{contrastive_loss, dice_loss, total_loss, total_loss_map, ContrastiveForm, LossConfig};
use damnet::ProbabilityMap;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn t(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

/// Direct evaluation of the per-pixel terms, one batch item at a time.
fn reference_total(p: &[f64], y: &[f64], b: usize, cfg: &LossConfig) -> f64 {
    let con: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let gap = match cfg.contrastive_form {
                ContrastiveForm::StandardHinge => (cfg.margin - p).max(0.0),
                ContrastiveForm::Overshoot => (p - cfg.margin).max(0.0),
            };
            0.5 * ((1.0 - y) * p * p + y * gap * gap)
        })
        .sum::<f64>()
        / p.len() as f64;
    let n = p.len() / b;
    let dice: f64 = (0..b)
        .map(|i| {
            let (pp, yy) = (&p[i * n..(i + 1) * n], &y[i * n..(i + 1) * n]);
            let inter: f64 = pp.iter().zip(yy).map(|(a, b)| a * b).sum();
            1.0 - (2.0 * inter + 1.0) / (pp.iter().sum::<f64>() + yy.iter().sum::<f64>() + 1.0)
        })
        .sum::<f64>()
        / b as f64;
    con + cfg.lambda * dice
}

#[test]
fn composite_example() {
    let cfg = LossConfig::default();
    // contrastive 0.245 from one pixel, dice 0.25 from four pixels
    let con = contrastive_loss(&t(&[0.3], &[1, 1]), &t(&[1.0], &[1, 1]), &cfg).unwrap();
    assert!((scalar(&con) - 0.245).abs() < 1e-12);
    let dice = dice_loss(&t(&[1.0, 1.0, 0.0, 0.0], &[1, 4]), &t(&[1.0, 0.0, 0.0, 0.0], &[1, 4])).unwrap();
    assert!((scalar(&dice) - 0.25).abs() < 1e-12);
    assert!((scalar(&con) + cfg.lambda * scalar(&dice) - 0.345).abs() < 1e-9);
}

#[test]
fn perfect_predictions_have_zero_contrastive_loss() {
    let cfg = LossConfig::default();
    let zeros = Tensor::zeros((2, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
    let ones = Tensor::ones((2, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
    assert_eq!(scalar(&contrastive_loss(&zeros, &zeros, &cfg).unwrap()), 0.0);
    assert_eq!(scalar(&contrastive_loss(&ones, &ones, &cfg).unwrap()), 0.0);
}

#[test]
fn dice_of_a_label_against_itself_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask = Array2::from_shape_simple_fn((64, 64), || u8::from(rng.random::<f64>() < 0.3));
    assert!(mask.iter().filter(|&&v| v == 1).count() >= 100);
    let y = mask.mapv(f64::from);
    let yt = t(y.as_slice().unwrap(), &[1, 64, 64]);
    assert!(scalar(&dice_loss(&yt, &yt).unwrap()) <= 1e-3);
    let inv = t(y.mapv(|v| 1.0 - v).as_slice().unwrap(), &[1, 64, 64]);
    assert!(scalar(&dice_loss(&inv, &yt).unwrap()) > 0.99);
}

#[test]
fn map_wrapper_agrees_with_tensor_form() {
    let probs = ProbabilityMap::new(Array2::from_shape_fn((4, 4), |(r, c)| ((r * 4 + c) as f32) / 16.0)).unwrap();
    let label = Array2::from_shape_fn((4, 4), |(r, c)| u8::from((r + c) % 2 == 0));
    let cfg = LossConfig::default();
    let p: Vec<f64> = probs.view().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = label.iter().map(|&v| v as f64).collect();
    let got = total_loss_map(&probs, label.view(), &cfg).unwrap();
    assert!((got - reference_total(&p, &y, 1, &cfg)).abs() < 1e-12);
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = [2usize, 1, 3, 4];
    let n: usize = shape.iter().product();
    let h = 1e-6;
    for point in 0..100 {
        let cfg = LossConfig {
            contrastive_form: if point % 4 == 3 { ContrastiveForm::Overshoot } else { ContrastiveForm::StandardHinge },
            margin: if point % 4 == 3 { 0.5 } else { 1.0 },
            ..LossConfig::default()
        };
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
        // keep away from the hinge kink at p = margin
        let p: Vec<f64> = (0..n)
            .map(|_| loop {
                let v = rng.random_range(0.01..0.99);
                if (v - cfg.margin).abs() > 1e-3 {
                    break v;
                }
            })
            .collect();
        let var = Var::from_tensor(&t(&p, &shape)).unwrap();
        let yt = t(&y, &shape);
        let loss = total_loss(var.as_tensor(), &yt, &cfg).unwrap();
        assert!((scalar(&loss) - reference_total(&p, &y, 2, &cfg)).abs() < 1e-12);
        let grads = loss.backward().unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..n {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (reference_total(&plus, &y, 2, &cfg) - reference_total(&minus, &y, 2, &cfg)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-3, "point {point} pixel {i}: analytic {} numeric {fd}", g[i]);
        }
    }
}

#[test]
fn non_binary_labels_are_rejected() {
    let cfg = LossConfig::default();
    assert!(total_loss(&t(&[0.5, 0.5], &[1, 2]), &t(&[0.5, 1.0], &[1, 2]), &cfg).is_err());
}

fn map_and_label() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (1usize..40).prop_flat_map(|n| {
        (proptest::collection::vec(0.0f64..=1.0, n), proptest::collection::vec(0u8..2, n))
            .prop_map(move |(p, y)| (p, y.into_iter().map(f64::from).collect(), n))
    })
}

proptest! {
    #[test]
    fn total_loss_is_non_negative((p, y, n) in map_and_label(), lambda in 0.0f64..2.0) {
        let cfg = LossConfig { lambda, ..LossConfig::default() };
        let v = scalar(&total_loss(&t(&p, &[1, n]), &t(&y, &[1, n]), &cfg).unwrap());
        prop_assert!(v >= 0.0);
        prop_assert!((v - reference_total(&p, &y, 1, &cfg)).abs() < 1e-12);
    }

    #[test]
    fn dice_ignores_joint_permutation((p, y, n) in map_and_label(), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let a = scalar(&dice_loss(&t(&p, &[1, n]), &t(&y, &[1, n])).unwrap());
        let b = scalar(&dice_loss(&t(&pp, &[1, n]), &t(&yp, &[1, n])).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_reduces_to_contrastive((p, y, n) in map_and_label()) {
        let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let (pt, yt) = (t(&p, &[1, n]), t(&y, &[1, n]));
        prop_assert_eq!(scalar(&total_loss(&pt, &yt, &cfg).unwrap()), scalar(&contrastive_loss(&pt, &yt, &cfg).unwrap()));
    }
}
