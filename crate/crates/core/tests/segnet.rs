use medcl_core::grid::Image;
use medcl_core::rng::rng_from;
use medcl_core::segnet::{
    backward, forward, init, Checkpoint, CheckpointError, ModelParams, ModelSpec, OutputGrad, SegnetError,
    REFERENCE_PARAM_COUNT,
};
use rand::Rng;

fn tiny(m: usize, seed: u64) -> ModelSpec {
    ModelSpec {
        input_size: 16,
        base_width: 4,
        depth: 2,
        num_classes: m,
        seed,
    }
}

fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = rng_from(seed);
    Image::from_fn(size, size, |_, _| rng.random::<f64>())
}

/// Counts parameters level by level, independently of the layout code.
fn count_by_hand(width: usize, depth: usize, m: usize) -> usize {
    let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let mut total = 0;
    let mut cin = 1;
    for level in 0..=depth {
        let c = width << level;
        total += conv(cin, c) + conv(c, c);
        cin = c;
    }
    for level in 0..depth {
        let c = width << level;
        total += conv(3 * c, c) + conv(c, c);
    }
    total + (width * (m + 1) + m + 1) + (width * (m - 1) + m - 1)
}

#[test]
fn reference_parameter_count() {
    let spec = ModelSpec::default();
    assert_eq!(count_by_hand(8, 3, 3), REFERENCE_PARAM_COUNT);
    assert_eq!(spec.param_count(), REFERENCE_PARAM_COUNT);
    assert_eq!(init(&spec).unwrap().len(), REFERENCE_PARAM_COUNT);
    assert_eq!(tiny(2, 0).param_count(), count_by_hand(4, 2, 2));
}

#[test]
fn init_is_deterministic_and_validates() {
    let spec = tiny(3, 9);
    assert_eq!(init(&spec).unwrap(), init(&spec).unwrap());
    assert_ne!(init(&spec).unwrap(), init(&tiny(3, 10)).unwrap());
    let bad = ModelSpec {
        input_size: 60,
        depth: 3,
        ..ModelSpec::default()
    };
    assert_eq!(init(&bad).unwrap_err(), SegnetError::Indivisible { size: 60, depth: 3 });
}

#[test]
fn flatten_round_trips() {
    let p = init(&tiny(3, 1)).unwrap();
    let back = ModelParams::flatten(*p.spec(), &p.unflatten()).unwrap();
    assert_eq!(back, p);
}

#[test]
fn forward_contract() {
    let p = init(&tiny(3, 2)).unwrap();
    let img = random_image(16, 3);
    let out = forward(&p, &img).unwrap();
    let n = 256;
    for px in 0..n {
        let s: f64 = (0..4).map(|c| out.softmax.data()[c * n + px]).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!(out
        .softmax
        .data()
        .iter()
        .chain(out.sigmoid.data())
        .all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(out.prediction().channels(), 5);
    let again = forward(&p, &img).unwrap();
    assert_eq!(out.softmax, again.softmax);
    assert_eq!(out.sigmoid, again.sigmoid);
    assert!(matches!(
        forward(&p, &random_image(8, 1)),
        Err(SegnetError::ShapeMismatch { .. })
    ));
}

#[test]
fn zero_model_is_uniform() {
    let p = ModelParams::zeros(tiny(3, 0)).unwrap();
    let out = forward(&p, &random_image(16, 4)).unwrap();
    assert!(out.softmax.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    assert!(out.sigmoid.data().iter().all(|&v| v == 0.5));
}

fn random_output_grad(spec: &ModelSpec, seed: u64) -> OutputGrad {
    let mut rng = rng_from(seed);
    let mut g = OutputGrad::zeros(spec);
    g.softmax.iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
    g.sigmoid.iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
    g
}

fn scalar(p: &ModelParams, img: &Image, g: &OutputGrad) -> f64 {
    let out = forward(p, img).unwrap();
    let a: f64 = out.softmax.data().iter().zip(&g.softmax).map(|(x, y)| x * y).sum();
    let b: f64 = out.sigmoid.data().iter().zip(&g.sigmoid).map(|(x, y)| x * y).sum();
    a + b
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

#[test]
fn backward_matches_finite_differences() {
    for m in [2usize, 3] {
        let spec = tiny(m, 11 + m as u64);
        let mut p = init(&spec).unwrap();
        let img = random_image(16, 5);
        let g = random_output_grad(&spec, 6);
        let out = forward(&p, &img).unwrap();
        let analytic = backward(&p, &out, &g).unwrap();
        let mut rng = rng_from(7);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let i = rng.random_range(0..p.len());
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let up = scalar(&p, &img, &g);
            p.data_mut()[i] = orig - h;
            let down = scalar(&p, &img, &g);
            p.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(fd, analytic[i]));
        }
        assert!(worst <= 1e-4, "m={m}: worst relative error {worst:e}");
    }
}

#[test]
fn backward_linearity() {
    let spec = tiny(3, 3);
    let p = init(&spec).unwrap();
    let a = random_image(16, 1);
    let b = random_image(16, 2);
    let oa = forward(&p, &a).unwrap();
    let ob = forward(&p, &b).unwrap();
    let zero = backward(&p, &oa, &OutputGrad::zeros(&spec)).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));

    let g = random_output_grad(&spec, 3);
    let ga = backward(&p, &oa, &g).unwrap();
    let gb = backward(&p, &ob, &g).unwrap();
    let mut acc = vec![0.0; p.len()];
    medcl_core::segnet::backward_into(&p, &oa, &g, &mut acc).unwrap();
    medcl_core::segnet::backward_into(&p, &ob, &g, &mut acc).unwrap();
    for ((s, x), y) in acc.iter().zip(&ga).zip(&gb) {
        assert!((s - (x + y)).abs() <= 1e-12 * (1.0 + s.abs()));
    }
}

#[test]
fn stale_cache_is_rejected() {
    let spec = tiny(2, 1);
    let mut p = init(&spec).unwrap();
    let out = forward(&p, &random_image(16, 1)).unwrap();
    p.data_mut()[0] += 1.0;
    let err = backward(&p, &out, &OutputGrad::zeros(&spec)).unwrap_err();
    assert_eq!(err, SegnetError::StaleCache);
    let copy = p.clone();
    let out = forward(&p, &random_image(16, 1)).unwrap();
    assert_eq!(
        backward(&copy, &out, &OutputGrad::zeros(&spec)).unwrap_err(),
        SegnetError::StaleCache
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let p = init(&tiny(3, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::from_params(&p).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().params().unwrap();
    assert!(loaded
        .data()
        .iter()
        .zip(p.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(CheckpointError::Truncated(_))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));

    let text = String::from_utf8_lossy(&bytes[16..]).into_owned();
    let version_at = text.find("\"version\": 1").unwrap();
    let mut bumped = bytes.clone();
    bumped[16 + version_at + "\"version\": ".len()] = b'9';
    assert!(matches!(
        Checkpoint::from_bytes(&bumped),
        Err(CheckpointError::UnsupportedVersion(9))
    ));
}
