use std::sync::Arc;

use cochstream_numerics::gradcheck::grad_check_sampled;
use cochstream_numerics::tape::attention_probs;
use cochstream_numerics::{
    grad_check, AdamW, AdamWConfig, Array, FrameSpec, FramedDft, NumericsError, SpectrumMode, Tape, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Array<f64> {
    let n: usize = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).unwrap()
}

/// Runs `build` on a fresh tape with every tensor in `point` as a param.
fn objective<F>(build: F) -> impl Fn(&[Array<f64>]) -> cochstream_numerics::Result<(f64, Vec<Array<f64>>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> cochstream_numerics::Result<Var>,
{
    move |p: &[Array<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.iter().map(|a| tape.param(a.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let mut g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(p)
            .map(|(v, a)| g.take(*v).unwrap_or_else(|| Array::zeros(a.shape())))
            .collect();
        Ok((tape.value(loss).item(), grads))
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, y: Var) -> cochstream_numerics::Result<Var> {
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    let w = tape.constant(Array::new(tape.shape(y), w)?);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn check<F>(point: Vec<Array<f64>>, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> cochstream_numerics::Result<Var>,
{
    grad_check(objective(build), &point, 1e-5).unwrap()
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Array::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let sq = tape.pow(w, 2.0);
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn relu_sum_gradient() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Array::from_f64(&[2], &[-1.0, 3.0]).unwrap());
    let r = tape.relu(w);
    let loss = tape.sum(r);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn sign_without_estimator_is_unsupported() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Array::from_f64(&[2], &[-1.0, 3.0]).unwrap());
    let s = tape.sign(w);
    let loss = tape.sum(s);
    assert!(matches!(tape.backward(loss), Err(NumericsError::Unsupported(_))));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Array::from_f64(&[2], &[-1.0, 3.0]).unwrap());
    assert!(tape.backward(w).is_err());
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng, 1.0);
    let b = random(&[3, 4], &mut rng, 1.0);
    let pos = a.map(|x| x.abs() + 0.5);

    assert!(check(vec![a.clone(), b.clone()], |t, v| { let y = t.add(v[0], v[1])?; probe(t, y) }) < 1e-8);
    assert!(check(vec![a.clone(), b.clone()], |t, v| { let y = t.sub(v[0], v[1])?; probe(t, y) }) < 1e-8);
    assert!(check(vec![a.clone(), b.clone()], |t, v| { let y = t.mul(v[0], v[1])?; probe(t, y) }) < 1e-8);
    assert!(check(vec![a.clone()], |t, v| { let y = t.scale(v[0], -1.7); probe(t, y) }) < 1e-8);
    assert!(check(vec![a.clone()], |t, v| { let y = t.add_scalar(v[0], 0.3); probe(t, y) }) < 1e-8);
    assert!(check(vec![a.clone()], |t, v| { let y = t.relu(v[0]); probe(t, y) }) < 1e-6);
    assert!(check(vec![a.clone()], |t, v| { let y = t.silu(v[0]); probe(t, y) }) < 1e-6);
    assert!(check(vec![a.clone()], |t, v| { let y = t.sigmoid(v[0]); probe(t, y) }) < 1e-6);
    assert!(check(vec![a.clone()], |t, v| { let y = t.exp(v[0]); probe(t, y) }) < 1e-6);
    assert!(check(vec![pos.clone()], |t, v| { let y = t.log(v[0]); probe(t, y) }) < 1e-6);
    assert!(check(vec![pos.clone()], |t, v| { let y = t.pow(v[0], 0.3); probe(t, y) }) < 1e-6);
    assert!(check(vec![a.clone()], |t, v| { let y = t.pow(v[0], 2.0); probe(t, y) }) < 1e-6);
}

#[test]
fn reductions_and_normalizers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 5], &mut rng, 2.0);
    let g = random(&[5], &mut rng, 1.0);
    let row = random(&[5], &mut rng, 1.0);

    assert!(check(vec![a.clone()], |t, v| { let y = t.mean(v[0]); probe(t, y) }) < 1e-8);
    assert!(check(vec![a.clone()], |t, v| { let y = t.sum(v[0]); probe(t, y) }) < 1e-8);
    assert!(check(vec![a.clone()], |t, v| { let y = t.mean_rows(v[0]); probe(t, y) }) < 1e-8);
    assert!(check(vec![a.clone()], |t, v| { let y = t.softmax(v[0]); probe(t, y) }) < 1e-6);
    assert!(check(vec![a.clone()], |t, v| { let y = t.log_softmax(v[0]); probe(t, y) }) < 1e-6);
    assert!(check(vec![a.clone(), row.clone()], |t, v| { let y = t.add_row(v[0], v[1])?; probe(t, y) }) < 1e-8);
    assert!(check(vec![a.clone(), g.clone()], |t, v| { let y = t.rms_norm(v[0], v[1], 1e-6)?; probe(t, y) }) < 1e-6);
    assert!(check(vec![a.clone()], |t, v| { let y = t.reshape(v[0], &[6, 5])?; probe(t, y) }) < 1e-8);
}

#[test]
fn indexing_and_linear_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = random(&[7, 4], &mut rng, 1.0);
    assert!(check(vec![table.clone()], |t, v| { let y = t.gather(v[0], &[3, 0, 3, 6])?; probe(t, y) }) < 1e-8);
    let x = random(&[4, 7], &mut rng, 1.0);
    assert!(check(vec![x.clone()], |t, v| { let y = t.pick(v[0], &[1, 6, 0, 1])?; probe(t, y) }) < 1e-8);

    let a = random(&[2, 3, 4], &mut rng, 1.0);
    let b = random(&[4, 5], &mut rng, 1.0);
    assert!(check(vec![a, b], |t, v| { let y = t.matmul(v[0], v[1])?; probe(t, y) }) < 1e-8);

    let x = random(&[2, 6, 3], &mut rng, 1.0);
    let w = random(&[4, 3, 5], &mut rng, 1.0);
    let bias = random(&[5], &mut rng, 1.0);
    assert!(check(vec![x, w, bias], |t, v| { let y = t.conv1d_causal(v[0], v[1], v[2])?; probe(t, y) }) < 1e-8);
}

#[test]
fn conv_kernel_longer_than_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = random(&[1, 3, 2], &mut rng, 1.0);
    let w = random(&[9, 2, 2], &mut rng, 1.0);
    let bias = random(&[2], &mut rng, 1.0);
    assert!(check(vec![x, w, bias], |t, v| { let y = t.conv1d_causal(v[0], v[1], v[2])?; probe(t, y) }) < 1e-8);
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random(&[2, 5, 6], &mut rng, 1.0);
    let k = random(&[2, 5, 6], &mut rng, 1.0);
    let v = random(&[2, 5, 6], &mut rng, 1.0);
    let err = check(vec![q, k, v], |t, vars| {
        let y = t.causal_attention(vars[0], vars[1], vars[2], 2, 3)?;
        probe(t, y)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = random(&[3, 16, 8], &mut rng, 3.0).cast::<f32>();
    let k = random(&[3, 16, 8], &mut rng, 3.0).cast::<f32>();
    let probs = attention_probs(&q, &k, 3, 2);
    for (r, row) in probs.chunks(16).enumerate() {
        let i = r % 16;
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(row[i + 1..].iter().all(|&p| p == 0.0));
    }
}

#[test]
fn spectrum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[90], &mut rng, 1.0);
    for mode in [SpectrumMode::Magnitude, SpectrumMode::Complex] {
        let dft = Arc::new(FramedDft::<f64>::new(FrameSpec::new(31, 10, mode)).unwrap());
        let err = check(vec![x.clone()], |t, v| {
            let y = t.spectrum(v[0], dft.clone())?;
            probe(t, y)
        });
        assert!(err < 1e-6, "{mode:?}: {err}");
    }
}

#[test]
fn bit_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[6, 4], &mut rng, 2.0);
    let err = check(vec![x], |t, v| Ok(t.bit_entropy(v[0])));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn bit_entropy_fixed_points() {
    let ln2 = std::f64::consts::LN_2;
    let mut tape = Tape::<f64>::new();
    let zero = tape.constant(Array::zeros(&[10, 13]));
    let e = tape.bit_entropy(zero);
    assert!(tape.value(e).item().abs() < 1e-12);

    // 4 frames covering all 2-bit patterns with saturated logits.
    let sat = Array::from_f64(&[4, 2], &[-50.0, -50.0, 50.0, -50.0, -50.0, 50.0, 50.0, 50.0]).unwrap();
    let s = tape.constant(sat);
    let e = tape.bit_entropy(s);
    assert!((tape.value(e).item() + 2.0 * ln2).abs() < 1e-6);
}

/// Three-layer MLP with 10 parameters, checked in 64-bit mode.
#[test]
fn mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[5, 2], &mut rng, 1.0);
    let point = vec![
        random(&[2, 2], &mut rng, 1.0),
        random(&[2], &mut rng, 0.5),
        random(&[2, 1], &mut rng, 1.0),
        random(&[1], &mut rng, 0.5),
        random(&[1, 1], &mut rng, 1.0),
    ];
    assert_eq!(point.iter().map(|p| p.len()).sum::<usize>(), 10);
    let err = check(point, |t, v| {
        let xi = t.constant(x.clone());
        let h = t.matmul(xi, v[0])?;
        let h = t.add_row(h, v[1])?;
        let h = t.silu(h);
        let h = t.matmul(h, v[2])?;
        let h = t.add_row(h, v[3])?;
        let h = t.sigmoid(h);
        let h = t.matmul(h, v[4])?;
        let sq = t.pow(h, 2.0);
        Ok(t.mean(sq))
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn sampled_check_covers_large_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random(&[40, 30], &mut rng, 1.0);
    let f = objective(|t: &mut Tape<f64>, v: &[Var]| {
        let y = t.pow(v[0], 2.0);
        Ok(t.mean(y))
    });
    assert!(grad_check_sampled(f, &[w], 1e-5, 50).unwrap() < 1e-7);
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut w: Array<f32> = random(&[8, 4], &mut rng, 1.0).cast();
        let x: Array<f32> = random(&[16, 8], &mut rng, 1.0).cast();
        let mut opt = AdamW::new(AdamWConfig::default(), [&w]);
        for _ in 0..20 {
            let mut t = Tape::<f32>::new();
            let wv = t.param(w.clone());
            let xv = t.constant(x.clone());
            let y = t.matmul(xv, wv).unwrap();
            let y = t.silu(y);
            let sq = t.pow(y, 2.0);
            let loss = t.mean(sq);
            let mut g = t.backward(loss).unwrap();
            let gw = g.take(wv).unwrap();
            opt.step(&mut [&mut w], &[&gw], 1e-2).unwrap();
        }
        w
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
