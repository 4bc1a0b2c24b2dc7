use normadapt::autograd::Tape;
use normadapt::normmath::{
    check_projection, ln_backward_closed_form, ln_stats, variance_bound_check,
    variance_scaling_study, ProjectionW1, SamplerSpec, Upstream,
};
use normadapt::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale
}

fn autodiff_backward(x: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut tape = Tape::new();
    let xv = tape.leaf(
        &Tensor::new(vec![n], x.to_vec())
            .unwrap()
            .with_requires_grad(true),
    );
    let gain = tape.leaf(&Tensor::full(vec![n], 1.0));
    let bias = tape.leaf(&Tensor::zeros(vec![n]));
    let y = tape.layer_norm(xv, gain, bias, 0.0).unwrap();
    let w = tape.constant(vec![n], b.to_vec()).unwrap();
    let p = tape.mul(y, w).unwrap();
    let s = tape.sum(p, None).unwrap();
    tape.backward(s).unwrap();
    tape.grad(xv).unwrap().to_vec()
}

fn finite_difference(x: &[f64], b: &[f64], h: f64) -> Vec<f64> {
    let f = |x: &[f64]| {
        let inst = ln_stats(x).unwrap();
        inst.y.iter().zip(b).map(|(y, b)| y * b).sum::<f64>()
    };
    (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn closed_form_agrees_with_autodiff_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sampler = SamplerSpec::new(Upstream::Iid, 5);
    for n in [3, 8, 31, 128] {
        for _ in 0..10 {
            let (inst, b) = sampler.draw(n, &mut rng).unwrap();
            let closed = ln_backward_closed_form(&inst, &b).unwrap();
            assert!(
                rel(&closed, &autodiff_backward(&inst.x, &b)) <= 1e-10,
                "autodiff N={n}"
            );
            assert!(
                rel(&closed, &finite_difference(&inst.x, &b, 1e-5)) <= 1e-6,
                "finite differences N={n}"
            );
        }
    }
}

#[test]
fn closed_form_output_is_orthogonal_to_ones_and_y() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sampler = SamplerSpec::new(Upstream::Iid, 6);
    for n in [3, 16, 512] {
        let (inst, b) = sampler.draw(n, &mut rng).unwrap();
        let a = ln_backward_closed_form(&inst, &b).unwrap();
        let scale = (n as f64).sqrt() * a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot1: f64 = a.iter().sum();
        let doty: f64 = a.iter().zip(&inst.y).map(|(a, y)| a * y).sum();
        assert!(
            dot1.abs() / scale <= 1e-10 && doty.abs() / scale <= 1e-10,
            "N={n}"
        );
    }
}

#[test]
fn matrix_free_projection_matches_an_explicit_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (inst, _) = SamplerSpec::new(Upstream::Iid, 7)
        .draw(16, &mut rng)
        .unwrap();
    let n = 16;
    let explicit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| f64::from(u8::from(i == j)) - (inst.y[i] * inst.y[j] + 1.0) / n as f64)
                .collect()
        })
        .collect();
    let w = ProjectionW1::new(&inst);
    for (j, col) in (0..n).map(|j| (j, w.column(j))) {
        for i in 0..n {
            assert!((col[i] - explicit[i][j]).abs() < 1e-15);
        }
    }
    let mut defect = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let sq: f64 = (0..n).map(|k| explicit[i][k] * explicit[k][j]).sum();
            defect = defect.max((sq - explicit[i][j]).abs());
        }
    }
    assert!(defect <= 1e-10);
    let diag = check_projection(&inst).unwrap();
    assert!((diag.idempotency_defect - defect).abs() <= 1e-14);
}

#[test]
fn projection_is_idempotent_across_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sampler = SamplerSpec::new(Upstream::Iid, 8);
    for n in (3..=512).step_by(7).chain([512]) {
        let (inst, _) = sampler.draw(n, &mut rng).unwrap();
        let d = check_projection(&inst).unwrap();
        assert!(d.max_defect() <= 1e-10, "N={n}: {d:?}");
    }
}

#[test]
fn contraction_holds_for_a_thousand_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for upstream in [Upstream::Iid, Upstream::MeanReduced] {
        let sampler = SamplerSpec {
            x_scale: 3.0,
            upstream,
            seed: 9,
        };
        for n in [8, 64, 512] {
            let violations = (0..1000)
                .filter(|_| {
                    let (inst, b) = sampler.draw(n, &mut rng).unwrap();
                    !variance_bound_check(&inst, &b).unwrap().holds
                })
                .count();
            assert_eq!(violations, 0, "{upstream:?} N={n}");
        }
    }
}

#[test]
fn shadow_variance_slopes() {
    let grid = [16, 64, 256, 1024];
    let iid = variance_scaling_study(&grid, SamplerSpec::new(Upstream::Iid, 42), 200).unwrap();
    let reduced =
        variance_scaling_study(&grid, SamplerSpec::new(Upstream::MeanReduced, 42), 200).unwrap();
    let (s_iid, s_red) = (iid.log_log_slope.unwrap(), reduced.log_log_slope.unwrap());
    assert!(s_iid.abs() < 0.2, "iid slope {s_iid}");
    assert!((s_red + 2.0).abs() < 0.1, "mean-reduced slope {s_red}");
    assert!(reduced.strictly_decreasing);
    assert_eq!(
        iid,
        variance_scaling_study(&grid, SamplerSpec::new(Upstream::Iid, 42), 200).unwrap()
    );
}
