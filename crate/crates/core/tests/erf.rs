use gridattn::autodiff::ParamStore;
use gridattn::erf::*;
use gridattn::nn::ConvLayer;
use gridattn::rng::seeded;
use gridattn::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

fn layer(store: &mut ParamStore, name: &str, kernels: Tensor, stride: usize, pad: usize) -> ConvLayer {
    let out = kernels.shape()[0];
    ConvLayer {
        kernels: store.insert(format!("{name}.kernels"), kernels),
        bias: store.insert(format!("{name}.bias"), Tensor::vector(vec![0.1; out])),
        stride,
        pad,
    }
}

fn random(rng: &mut gridattn::rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn one_by_one_conv_is_single_tap() {
    let mut store = ParamStore::new();
    let w = 0.7;
    let l = layer(&mut store, "c", Tensor::new(&[1, 1, 1, 1], vec![w]).unwrap(), 1, 0);
    let image = Tensor::new(&[1, 5, 5], vec![1.0; 25]).unwrap();
    let map = erf_single(&[l], &store, &image, (2, 3), 0).unwrap();
    for (i, &v) in map.iter().enumerate() {
        let expect = if i == 2 * 5 + 3 { w * w } else { 0.0 };
        assert!((v - expect).abs() < 1e-15);
    }
}

#[test]
fn stacked_three_by_three_support_is_five_by_five() {
    let mut rng = seeded(1);
    let mut store = ParamStore::new();
    // positive weights, inputs and biases keep every ReLU active
    let a = layer(&mut store, "a", random(&mut rng, &[2, 1, 3, 3], 0.1, 1.0), 1, 1);
    let b = layer(&mut store, "b", random(&mut rng, &[2, 2, 3, 3], 0.1, 1.0), 1, 1);
    let image = random(&mut rng, &[1, 9, 9], 0.1, 1.0);
    let map = erf_aggregate(&[a, b], &store, &[image.clone()], (4, 4), &[0, 1]).unwrap();
    assert_eq!(map.support(), Some((2, 6, 2, 6)));
    assert!(map.values.iter().enumerate().all(|(i, &v)| {
        let (r, c) = (i / 9, i % 9);
        ((2..=6).contains(&r) && (2..=6).contains(&c)) == (v > 0.0)
    }));
    assert_eq!(theoretical_field(&[a, b], &store, image.shape(), (4, 4)).unwrap(), (2, 6, 2, 6));
    assert_eq!(theoretical_field(&[a, b], &store, image.shape(), (0, 8)).unwrap(), (0, 2, 6, 8));
}

#[test]
fn zero_second_layer_gives_zero_map() {
    let mut rng = seeded(2);
    let mut store = ParamStore::new();
    let a = layer(&mut store, "a", random(&mut rng, &[2, 3, 3, 3], -1.0, 1.0), 1, 1);
    let b = layer(&mut store, "b", Tensor::zeros(&[2, 2, 3, 3]), 1, 1);
    let image = random(&mut rng, &[3, 6, 6], 0.0, 1.0);
    let map = erf_single(&[a, b], &store, &image, (3, 3), 1).unwrap();
    assert!(map.iter().all(|&v| v == 0.0));
}

#[test]
fn aggregation_identities() {
    let mut rng = seeded(3);
    let mut store = ParamStore::new();
    let a = layer(&mut store, "a", random(&mut rng, &[4, 3, 4, 4], -1.0, 1.0), 2, 1);
    let b = layer(&mut store, "b", random(&mut rng, &[3, 4, 2, 2], -1.0, 1.0), 2, 0);
    let layers = [a, b];
    let img = random(&mut rng, &[3, 12, 12], 0.0, 1.0);
    let other = random(&mut rng, &[3, 12, 12], 0.0, 1.0);
    let single = erf_single(&layers, &store, &img, (1, 1), 2).unwrap();
    let agg = erf_aggregate(&layers, &store, &[img.clone()], (1, 1), &[2]).unwrap();
    assert_eq!(agg.values, single);
    let triple = erf_aggregate(&layers, &store, &[img.clone(), img.clone(), img.clone()], (1, 1), &[2]).unwrap();
    for (a, b) in triple.values.iter().zip(&single) {
        assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
    }
    let all = erf_aggregate(&layers, &store, &[img.clone()], (1, 1), &[0, 1, 2]).unwrap();
    for ch in 0..3 {
        let one = erf_single(&layers, &store, &img, (1, 1), ch).unwrap();
        assert!(all.values.iter().zip(&one).all(|(a, b)| a >= b));
    }
    let ab = erf_aggregate(&layers, &store, &[img.clone(), other.clone()], (1, 1), &[0, 2]).unwrap();
    let ba = erf_aggregate(&layers, &store, &[other, img.clone()], (1, 1), &[0, 2]).unwrap();
    for (x, y) in ab.values.iter().zip(&ba.values) {
        assert!((x - y).abs() <= 1e-15 * x.abs().max(1e-300));
    }
    assert!(erf_aggregate(&layers, &store, &[], (1, 1), &[0]).is_err());
    assert!(erf_aggregate(&layers, &store, &[img.clone()], (1, 1), &[]).is_err());
    assert!(erf_single(&layers, &store, &img, (3, 0), 0).is_err());
    assert!(erf_single(&layers, &store, &img, (0, 0), 3).is_err());
}

#[test]
fn default_channel_subset() {
    assert_eq!(default_channels(16, 32), (0..16).collect::<Vec<_>>());
    assert_eq!(default_channels(64, 32), (0..32).map(|i| 2 * i).collect::<Vec<_>>());
    assert_eq!(default_channels(50, 5), vec![0, 10, 20, 30, 40]);
}

#[test]
fn gaussian_smoothing() {
    let mut delta = vec![0.0; 41 * 41];
    delta[20 * 41 + 20] = 1.0;
    assert_eq!(gaussian_smooth(&delta, 41, 41, 0.0).unwrap(), delta);
    for sigma in [1.0, 2.5, 4.0] {
        let s = gaussian_smooth(&delta, 41, 41, sigma).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let ratio = s[20 * 41 + 20] / s[20 * 41 + 21];
        assert!((ratio - (1.0 / (2.0 * sigma * sigma)).exp()).abs() < 1e-6);
        assert!(s.iter().all(|&v| v >= 0.0));
    }
    assert_eq!(gaussian_kernel(4.0).len(), 25);
    assert!((gaussian_kernel(4.0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!(gaussian_smooth(&delta, 41, 41, -1.0).is_err());
}

#[test]
fn heatmap_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pgm");
    write_pgm(&p, &[0.0, 1.0, 1.0, 0.0], 2, 2).unwrap();
    assert_eq!(read_pnm(&p).unwrap(), (1, 2, 2, vec![0, 255, 255, 0]));
    write_pgm(&p, &[3.0; 6], 2, 3).unwrap();
    assert_eq!(read_pnm(&p).unwrap().3, vec![0; 6]);

    let mut rng = seeded(4);
    let values: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..5.0)).collect();
    write_pgm(&p, &values, 5, 6).unwrap();
    assert_eq!(read_pnm(&p).unwrap().3, to_gray(&values).unwrap());
    assert!(write_pgm(&p, &[f64::NAN, 1.0], 1, 2).is_err());

    let image = random(&mut rng, &[3, 5, 6], 0.0, 1.0);
    let q = dir.path().join("o.ppm");
    write_overlay_ppm(&q, &values, &image).unwrap();
    let (ch, h, w, px) = read_pnm(&q).unwrap();
    assert_eq!((ch, h, w, px.len()), (3, 5, 6, 90));
    write_ppm_image(&q, &image).unwrap();
    let back = read_ppm_image(&q).unwrap();
    assert!(back.max_abs_diff(&image) <= 0.5 / 255.0 + 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn support_inside_theoretical_field(
        seed in any::<u64>(),
        k1 in 1usize..5, s1 in 1usize..3, p1 in 0usize..2,
        k2 in 1usize..4, s2 in 1usize..3,
    ) {
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let a = layer(&mut store, "a", random(&mut rng, &[3, 2, k1, k1], -1.0, 1.0), s1, p1.min(k1 - 1));
        let b = layer(&mut store, "b", random(&mut rng, &[2, 3, k2, k2], -1.0, 1.0), s2, 0);
        let image = random(&mut rng, &[2, 14, 14], -1.0, 1.0);
        let layers = [a, b];
        prop_assume!(theoretical_field(&layers, &store, image.shape(), (0, 0)).is_ok());
        let out = {
            let g1 = (14 + 2 * p1.min(k1 - 1) - k1) / s1 + 1;
            (g1 - k2) / s2 + 1
        };
        let loc = (rng.random_range(0..out), rng.random_range(0..out));
        let map = erf_aggregate(&layers, &store, &[image.clone()], loc, &[0, 1]).unwrap();
        let (r0, r1, c0, c1) = theoretical_field(&layers, &store, image.shape(), loc).unwrap();
        prop_assert!(map.values.iter().all(|&v| v >= 0.0));
        for (i, &v) in map.values.iter().enumerate() {
            let (r, c) = (i / 14, i % 14);
            if !((r0..=r1).contains(&r) && (c0..=c1).contains(&c)) {
                prop_assert_eq!(v, 0.0);
            }
        }
    }
}
