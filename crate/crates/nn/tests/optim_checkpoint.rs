use eager_nn::checkpoint::{read_params, write_params, CheckpointError};
use eager_nn::{Adam, ParamStore, StepDecay, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn adam_minimises_a_quadratic() {
    let mut p = ParamStore::<f64>::new();
    let x = p.insert("x", Tensor::new(&[3], vec![3.0, -2.0, 0.5]));
    let target = Tensor::new(&[3], vec![1.0, 1.0, 1.0]);
    let mut opt = Adam::new(&p, 0.05);
    for _ in 0..2000 {
        let grads = {
            let mut t = Tape::new(&p);
            let xv = t.param(x);
            let c = t.constant(target.clone());
            let d = t.sub(xv, c);
            let sq = t.square(d);
            let loss = t.sum(sq);
            t.backward(loss)
        };
        opt.step(&mut p, &grads);
    }
    for &v in p.get(x).data() {
        assert!((v - 1.0).abs() < 1e-3, "{v}");
    }
}

#[test]
fn first_adam_step_moves_by_lr() {
    // Bias-corrected first step is lr * sign(g) for |g| >> eps.
    let mut p = ParamStore::<f64>::new();
    let x = p.insert("x", Tensor::new(&[2], vec![0.0, 0.0]));
    let mut opt = Adam::new(&p, 0.1);
    let grads = {
        let mut t = Tape::new(&p);
        let xv = t.param(x);
        let c = t.constant(Tensor::new(&[2], vec![3.0, -0.5]));
        let m = t.mul(xv, c);
        let loss = t.sum(m);
        t.backward(loss)
    };
    opt.step(&mut p, &grads);
    assert!((p.get(x).data()[0] + 0.1).abs() < 1e-7);
    assert!((p.get(x).data()[1] - 0.1).abs() < 1e-7);
}

#[test]
fn step_decay_schedule() {
    let s = StepDecay { initial: 1e-4, every: 5, factor: 0.1 };
    assert_eq!(s.lr_at(0), 1e-4);
    assert_eq!(s.lr_at(4), 1e-4);
    assert!((s.lr_at(5) - 1e-5).abs() < 1e-18);
    assert!((s.lr_at(12) - 1e-6).abs() < 1e-18);
}

#[test]
fn bumped_version_is_rejected() {
    let mut p = ParamStore::<f32>::new();
    p.insert("w", Tensor::new(&[2], vec![1.0, 2.0]));
    let mut buf = Vec::new();
    write_params(&mut buf, "{}", &p).unwrap();
    buf[8] += 1;
    assert!(matches!(read_params::<f32>(&buf[..]), Err(CheckpointError::Version { .. })));
    let truncated = &buf[..buf.len() - 3];
    assert!(read_params::<f32>(truncated).is_err());
}

#[test]
fn dtype_mismatch_is_reported() {
    let mut p = ParamStore::<f64>::new();
    p.insert("w", Tensor::new(&[1], vec![1.0]));
    let mut buf = Vec::new();
    write_params(&mut buf, "", &p).unwrap();
    assert!(matches!(read_params::<f32>(&buf[..]), Err(CheckpointError::DType { .. })));
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        arrays in prop::collection::vec(
            (1usize..4, 1usize..5, prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 20)),
            1..5
        ),
        meta in "[a-z{}\":0-9]{0,24}",
    ) {
        let mut p = ParamStore::<f32>::new();
        for (i, (r, c, vals)) in arrays.iter().enumerate() {
            let data: Vec<f32> = vals.iter().cycle().take(r * c).copied().collect();
            p.insert(format!("a{i}"), Tensor::new(&[*r, *c], data));
        }
        let mut buf = Vec::new();
        write_params(&mut buf, &meta, &p).unwrap();
        let (m2, p2) = read_params::<f32>(&buf[..]).unwrap();
        prop_assert_eq!(m2, meta);
        prop_assert_eq!(p2, p);
    }
}
