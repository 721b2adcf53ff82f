use fedlora_dp::fedsim::{loss_and_grads, Proximal};
use fedlora_dp::lora::LoraAdapter;
use fedlora_dp::{sample_gaussian, Matrix, RngStream};

const H: f64 = 1e-5;

struct Instance {
    w: Matrix,
    b: Matrix,
    a: Matrix,
    xs: Matrix,
    ys: Matrix,
    scale: f64,
    anchor: (Matrix, Matrix),
    correction: Matrix,
}

fn instance(seed: u64) -> Instance {
    let mut rng = RngStream::new(seed, &[77]);
    let (m, n, r, batch) = (2 + rng.below(5), 2 + rng.below(5), 1 + rng.below(3), 3 + rng.below(6));
    Instance {
        w: sample_gaussian(m, n, 0.5, &mut rng).unwrap(),
        b: sample_gaussian(m, r, 0.5, &mut rng).unwrap(),
        a: sample_gaussian(r, n, 0.5, &mut rng).unwrap(),
        xs: sample_gaussian(batch, n, 1.0, &mut rng).unwrap(),
        ys: sample_gaussian(batch, m, 1.0, &mut rng).unwrap(),
        scale: 0.5 + 2.0 * rng.uniform(),
        anchor: (
            sample_gaussian(m, r, 0.5, &mut rng).unwrap(),
            sample_gaussian(r, n, 0.5, &mut rng).unwrap(),
        ),
        correction: sample_gaussian(m, n, 0.3, &mut rng).unwrap(),
    }
}

/// Max |analytic - central difference| over every entry of B and A.
fn max_error(inst: &Instance, mu: f64, with_correction: bool) -> f64 {
    let prox = Proximal {
        mu,
        b0: &inst.anchor.0,
        a0: &inst.anchor.1,
    };
    let prox = (mu > 0.0).then_some(&prox);
    let corr = with_correction.then_some(&inst.correction);
    let objective = |b: &Matrix, a: &Matrix| {
        let ad = LoraAdapter::new(b.clone(), a.clone(), inst.scale * b.cols() as f64).unwrap();
        loss_and_grads(&inst.w, &ad, &inst.xs, &inst.ys, prox, corr).unwrap().objective
    };
    let ad = LoraAdapter::new(inst.b.clone(), inst.a.clone(), inst.scale * inst.b.cols() as f64).unwrap();
    let g = loss_and_grads(&inst.w, &ad, &inst.xs, &inst.ys, prox, corr).unwrap();

    let mut worst = 0f64;
    for i in 0..inst.b.len() {
        let (mut bp, mut bm) = (inst.b.clone(), inst.b.clone());
        bp.as_mut_slice()[i] += H;
        bm.as_mut_slice()[i] -= H;
        let fd = (objective(&bp, &inst.a) - objective(&bm, &inst.a)) / (2.0 * H);
        worst = worst.max((fd - g.grad_b.as_slice()[i]).abs());
    }
    for i in 0..inst.a.len() {
        let (mut ap, mut am) = (inst.a.clone(), inst.a.clone());
        ap.as_mut_slice()[i] += H;
        am.as_mut_slice()[i] -= H;
        let fd = (objective(&inst.b, &ap) - objective(&inst.b, &am)) / (2.0 * H);
        worst = worst.max((fd - g.grad_a.as_slice()[i]).abs());
    }
    worst
}

#[test]
fn data_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let err = max_error(&instance(seed), 0.0, false);
        assert!(err <= 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn proximal_and_corrected_gradients_match_finite_differences() {
    for seed in 10..20 {
        let err = max_error(&instance(seed), 0.3, true);
        assert!(err <= 1e-6, "seed {seed}: {err:e}");
    }
}
