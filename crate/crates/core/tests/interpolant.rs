use diffkit::{AdamW, AdamWConfig, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use zigma::interpolant::{
    sample, time_grid, CfmLoss, Denoiser, DiracField, Draw, GaussianField, InterpolantSchedule, Objective,
    ObjectiveRegistry, SamplerConfig, SamplerRegistry, ScoreLoss, TrajectoryRecorder, VelocityField, VelocityLoss,
    EPS_CLIP,
};
use zigma::Result;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn lin() -> InterpolantSchedule {
    InterpolantSchedule::linear()
}

#[test]
fn interpolate_endpoints_and_midpoint() {
    let s = lin();
    let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let e = Tensor::from_vec(&[2, 2], vec![-1.0, 0.5, 0.0, 9.0]).unwrap();
    assert!(s.interpolate(&x, &e, &[0.0, 0.0]).unwrap().bit_eq(&x));
    assert!(s.interpolate(&x, &e, &[1.0, 1.0]).unwrap().bit_eq(&e));
    let mixed = s.interpolate(&x, &e, &[0.0, 1.0]).unwrap();
    assert_eq!(mixed.data(), &[1.0, 2.0, 0.0, 9.0]);
    let half = s.interpolate(&Tensor::full(&[1, 1], 2.0), &Tensor::zeros(&[1, 1]), &[0.5]).unwrap();
    assert_eq!(half.item(), 1.0);
    assert!(s.interpolate(&x, &e, &[1.5, 0.0]).is_err());
    assert!(s.interpolate(&x, &e, &[0.5]).is_err());
}

#[test]
fn velocity_target_on_linear_path() {
    let s = lin();
    let one = Tensor::full(&[1, 1], 1.0);
    assert_eq!(s.velocity_target(&one, &Tensor::zeros(&[1, 1]), &[0.3]).unwrap().item(), -1.0);
    assert_eq!(s.velocity_target(&one, &one, &[0.7]).unwrap().item(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (x, e) = (normal(&mut rng, &[1, 5]), normal(&mut rng, &[1, 5]));
    let first = s.velocity_target(&x, &e, &[0.0]).unwrap();
    for k in 1..=10 {
        assert!(s.velocity_target(&x, &e, &[k as f64 / 10.0]).unwrap().bit_eq(&first));
    }
}

#[test]
fn velocity_to_score_values() {
    let s = lin();
    let v = Tensor::full(&[1], 0.4);
    let x = Tensor::full(&[1], 0.2);
    assert!((s.velocity_to_score(&v, &x, 0.5).unwrap().item() + 0.8).abs() < 1e-15);
    assert_eq!(s.velocity_to_score(&v, &x, 1.0).unwrap().item(), -0.2);
    assert!(s.velocity_to_score(&v, &x, EPS_CLIP).is_err());
    assert!(s.velocity_to_score(&v, &x, 0.0).is_err());
}

#[test]
fn score_velocity_round_trip() {
    let s = lin();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let t = rng.random_range(0.01..0.99);
        let (v, x) = (normal(&mut rng, &[8]), normal(&mut rng, &[8]));
        let back = s.score_to_velocity(&s.velocity_to_score(&v, &x, t).unwrap(), &x, t).unwrap();
        assert!(back.max_abs_diff(&v) < 1e-12, "t={t}");
    }
}

/// `x · a + b` elementwise with two scalar parameters.
struct Affine {
    a: ParamId,
    b: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, a: f64, b: f64) -> Self {
        Affine {
            a: store.add("a", Tensor::full(&[1, 1], a)),
            b: store.add("b", Tensor::full(&[1], b)),
        }
    }
}

impl Denoiser for Affine {
    fn predict<'t>(&self, p: &Bound<'t>, x: Var<'t>, _: &[f64], _: Option<&[usize]>) -> Result<Var<'t>> {
        let shape = x.shape();
        let flat = x.reshape(&[shape.iter().product(), 1])?;
        Ok(flat.linear(p.var(self.a), Some(p.var(self.b)))?.reshape(&shape)?)
    }
}

/// Returns a fixed tensor regardless of input.
struct Fixed(Tensor);

impl Denoiser for Fixed {
    fn predict<'t>(&self, _: &Bound<'t>, x: Var<'t>, _: &[f64], _: Option<&[usize]>) -> Result<Var<'t>> {
        Ok(x.tape().constant(self.0.clone()))
    }
}

fn loss_value(obj: &dyn Objective, net: &dyn Denoiser, store: &ParamStore, s: &InterpolantSchedule, d: &Draw) -> f64 {
    let tape = Tape::no_grad();
    let p = store.bind(&tape);
    obj.loss(&tape, net, &p, s, d, None).unwrap().value().item()
}

#[test]
fn oracle_predictors_have_zero_loss() {
    let s = lin();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = Draw::sample(normal(&mut rng, &[6, 3]), EPS_CLIP, &mut rng);
    let store = ParamStore::new();

    let v = Fixed(s.velocity_target(&d.x_star, &d.eps, &d.t).unwrap());
    assert_eq!(loss_value(&VelocityLoss, &v, &store, &s, &d), 0.0);

    let score = Fixed(Tensor::from_fn(d.eps.shape(), |i| -d.eps.data()[i] / s.sigma(d.t[i / 3])));
    assert!(loss_value(&ScoreLoss, &score, &store, &s, &d) < 1e-28);

    let u = CfmLoss::target(&d.eps, &d.x_star, s.sigma_min);
    let flipped = Fixed(u.map(|v| -v));
    assert_eq!(loss_value(&CfmLoss, &flipped, &store, &s, &d), 0.0);
}

#[test]
fn zero_predictor_on_standard_normal_data() {
    let s = lin();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = Draw::sample(normal(&mut rng, &[4000, 5]), 0.0, &mut rng);
    let zero = Fixed(Tensor::zeros(&[4000, 5]));
    let l = loss_value(&VelocityLoss, &zero, &ParamStore::new(), &s, &d);
    // Per-element variance of (ε − x*)² is 8, so the standard error is 0.02.
    assert!((l - 2.0).abs() < 0.1, "{l}");
}

#[test]
fn score_loss_minimum_on_gaussian_data() {
    let s = lin();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 20000;
    let d = Draw::sample(normal(&mut rng, &[n, 1]), ScoreLoss.t_min(), &mut rng);
    let xt = s.interpolate(&d.x_star, &d.eps, &d.t).unwrap();
    let analytic = |scale: f64| {
        Fixed(Tensor::from_fn(&[n, 1], |i| {
            let (a, sg) = (s.alpha(d.t[i]), s.sigma(d.t[i]));
            -scale * xt.data()[i] / (a * a + sg * sg)
        }))
    };
    let store = ParamStore::new();
    let best = loss_value(&ScoreLoss, &analytic(1.0), &store, &s, &d);
    let expected: f64 = d.t.iter().map(|&t| s.alpha(t).powi(2) / (s.alpha(t).powi(2) + t * t)).sum::<f64>() / n as f64;
    assert!((best - expected).abs() < 0.02, "{best} vs {expected}");
    for scale in [0.8, 1.2] {
        assert!(loss_value(&ScoreLoss, &analytic(scale), &store, &s, &d) > best);
    }
}

#[test]
fn score_objective_never_draws_below_clamp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = Draw::sample(Tensor::zeros(&[10000, 1]), ScoreLoss.t_min(), &mut rng);
    assert!(d.t.iter().all(|&t| (EPS_CLIP..=1.0).contains(&t)));
    let bad = Draw {
        x_star: Tensor::zeros(&[1, 1]),
        eps: Tensor::zeros(&[1, 1]),
        t: vec![1e-4],
    };
    let tape = Tape::no_grad();
    let store = ParamStore::new();
    assert!(ScoreLoss.loss(&tape, &Fixed(Tensor::zeros(&[1, 1])), &store.bind(&tape), &lin(), &bad, None).is_err());
}

#[test]
fn flow_matching_matches_velocity_under_time_reversal() {
    let exact = InterpolantSchedule {
        sigma_min: 0.0,
        ..lin()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let d = Draw::sample(normal(&mut rng, &[7, 4]), 0.0, &mut rng);
        // The flow-matching target at s = 1 − τ is the negated velocity target.
        let s: Vec<f64> = d.t.iter().map(|t| 1.0 - t).collect();
        let u = CfmLoss::target(&d.eps, &d.x_star, 0.0);
        let v = exact.velocity_target(&d.x_star, &d.eps, &d.t).unwrap();
        assert!(u.max_abs_diff(&v.map(|v| -v)) < 1e-15);
        let psi = CfmLoss::psi(&d.eps, &d.x_star, &s, 0.0).unwrap();
        assert!(psi.max_abs_diff(&exact.interpolate(&d.x_star, &d.eps, &d.t).unwrap()) < 1e-12);

        let mut store = ParamStore::new();
        let net = Affine::new(&mut store, rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
        let lv = loss_value(&VelocityLoss, &net, &store, &exact, &d);
        let lc = loss_value(&CfmLoss, &net, &store, &exact, &d);
        assert!((lv - lc).abs() < 1e-10, "{lv} vs {lc}");
    }
}

#[test]
fn flow_matching_endpoint_centres_on_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x0, x1) = (normal(&mut rng, &[3, 2]), normal(&mut rng, &[3, 2]));
    let psi = CfmLoss::psi(&x0, &x1, &[1.0; 3], 1e-5).unwrap();
    let want = x0.zip_map(&x1, |a, b| 1e-5 * a + b);
    assert!(psi.max_abs_diff(&want) < 1e-15);
    assert!(psi.max_abs_diff(&x1) < 1e-4);
}

#[test]
fn objective_registry_lists_builtins() {
    let r = ObjectiveRegistry::builtin();
    assert_eq!(r.names(), ["cfm", "score", "velocity"]);
    assert!(r.get("ddpm").is_err());
}

struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn new(store: &mut ParamStore, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            w1: store.add("w1", Tensor::from_fn(&[2, hidden], |_| rng.random_range(-0.7..0.7))),
            b1: store.add("b1", Tensor::from_fn(&[hidden], |_| rng.random_range(-0.7..0.7))),
            w2: store.add("w2", Tensor::from_fn(&[hidden, 1], |_| rng.random_range(-0.2..0.2))),
            b2: store.add("b2", Tensor::zeros(&[1])),
        }
    }
}

impl Denoiser for Mlp {
    fn predict<'t>(&self, p: &Bound<'t>, x: Var<'t>, t: &[f64], _: Option<&[usize]>) -> Result<Var<'t>> {
        let tt = x.tape().constant(Tensor::from_vec(&[t.len(), 1], t.to_vec())?);
        let h = x.concat_last(tt)?.linear(p.var(self.w1), Some(p.var(self.b1)))?.tanh();
        Ok(h.linear(p.var(self.w2), Some(p.var(self.b2)))?)
    }
}

fn train_step(
    obj: &dyn Objective,
    net: &dyn Denoiser,
    store: &mut ParamStore,
    opt: &mut AdamW,
    d: &Draw,
) -> f64 {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let loss = obj.loss(&tape, net, &p, &lin(), d, None).unwrap();
    let grads = p.grads(&tape.backward(loss).unwrap());
    let value = loss.value().item();
    opt.step(store, grads).unwrap();
    value
}

#[test]
fn mlp_velocity_training_decreases_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let net = Mlp::new(&mut store, 32, &mut rng);
    let cfg = AdamWConfig {
        lr: 3e-3,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    let mut losses = Vec::new();
    for _ in 0..2000 {
        let x = Tensor::from_fn(&[64, 1], |_| 3.0 + rng.sample::<f64, _>(StandardNormal));
        let d = Draw::sample(x, 0.0, &mut rng);
        losses.push(train_step(&VelocityLoss, &net, &mut store, &mut opt, &d));
    }
    let blocks: Vec<f64> = losses.chunks(200).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let slack = 0.05 * blocks[0];
    for w in blocks.windows(2) {
        assert!(w[1] <= w[0] + slack, "{blocks:?}");
    }
    let optimum = GaussianField::scalar(3.0, 1.0).unwrap().optimal_loss(1000);
    let start = losses[..20].iter().sum::<f64>() / 20.0;
    assert!(blocks[9] < start * 0.5, "{start} -> {blocks:?}");
    assert!(blocks[9] > optimum * 0.9, "{blocks:?} below optimum {optimum}");
}

#[test]
fn affine_fit_reaches_conditional_expectation() {
    // At fixed t the Gaussian posterior velocity is affine in x.
    let (mu, sd, t) = (0.5, 1.5, 0.4);
    let field = GaussianField::scalar(mu, sd).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let net = Affine::new(&mut store, 0.0, 0.0);
    let cfg = AdamWConfig {
        lr: 2e-2,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    let draw = |rng: &mut ChaCha8Rng, n: usize| Draw {
        x_star: Tensor::from_fn(&[n, 1], |_| mu + sd * rng.sample::<f64, _>(StandardNormal)),
        eps: normal(rng, &[n, 1]),
        t: vec![t; n],
    };
    for _ in 0..1500 {
        let d = draw(&mut rng, 256);
        train_step(&VelocityLoss, &net, &mut store, &mut opt, &d);
    }
    let test = draw(&mut rng, 200_000);
    let fitted = loss_value(&VelocityLoss, &net, &store, &lin(), &test);
    let optimum = field.optimal_loss_at(t);
    assert!(fitted < optimum * 1.01, "fitted {fitted}, optimum {optimum}");
    // Coefficients agree with the closed form.
    let xs = Tensor::from_vec(&[2, 1], vec![0.0, 1.0]).unwrap();
    let want = field.velocity(&xs, t).unwrap();
    let tape = Tape::no_grad();
    let got = net.predict(&store.bind(&tape), tape.constant(xs), &[t, t], None).unwrap().to_tensor();
    assert!(got.max_abs_diff(&want) < 0.05, "{:?} vs {:?}", got.data(), want.data());
}

#[test]
fn gaussian_loss_bounds_are_consistent() {
    let f = GaussianField::new(vec![0.0, 2.0], vec![1.0, 0.5]).unwrap();
    let opt = f.optimal_loss(2000);
    assert!(opt > 0.0 && opt < f.zero_predictor_loss());
    // Standard-normal data: at t = 0.5 the conditional variance of ε − x* is 2.
    let g = GaussianField::scalar(0.0, 1.0).unwrap();
    assert!((g.optimal_loss_at(0.5) - 2.0).abs() < 1e-12);
    assert_eq!(g.zero_predictor_loss(), 2.0);
}

struct Constant(f64);

impl VelocityField for Constant {
    fn velocity(&self, x: &Tensor, _: f64) -> Result<Tensor> {
        Ok(Tensor::full(x.shape(), self.0))
    }
}

#[test]
fn single_euler_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let eps = normal(&mut rng, &[3, 2]);
    let out = sample(&Constant(0.7), &lin(), &SamplerConfig::new("ode_euler", 1), eps.clone(), &mut rng, None).unwrap();
    assert!(out.max_abs_diff(&eps.map(|e| e + 0.7 * (EPS_CLIP - 1.0))) < 1e-15);
}

#[test]
fn grid_runs_from_one_to_clamp() {
    let g = time_grid(4, EPS_CLIP);
    assert_eq!(g.len(), 5);
    assert_eq!((g[0], g[4]), (1.0, EPS_CLIP));
    assert!(g.windows(2).all(|w| w[1] < w[0]));
    assert!(SamplerConfig::new("ode_euler", 0).validate().is_err());
}

#[test]
fn dirac_target_is_reached() {
    let field = DiracField::new(vec![0.7]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x1 = normal(&mut rng, &[16, 1]);
    let to_zero = SamplerConfig {
        t_end: 0.0,
        ..SamplerConfig::new("ode_euler", 50)
    };
    let out = sample(&field, &lin(), &to_zero, x1.clone(), &mut rng, None).unwrap();
    assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-6), "{:?}", out.data());
    // Stopping at the clamp leaves exactly the flow's residual t·(X₁ − x*).
    let out = sample(&field, &lin(), &SamplerConfig::new("ode_euler", 50), x1.clone(), &mut rng, None).unwrap();
    let want = x1.map(|x| 0.7 + EPS_CLIP * (x - 0.7));
    assert!(out.max_abs_diff(&want) < 1e-12);
}

#[test]
fn analytic_gaussian_sampling_matches_moments() {
    let (mu, sd) = (0.8, 0.6);
    let field = GaussianField::scalar(mu, sd).unwrap();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x1 = normal(&mut rng, &[n, 1]);
    let out = sample(&field, &lin(), &SamplerConfig::new("ode_euler", 250), x1, &mut rng, None).unwrap();
    let mean = out.mean();
    let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - mu).abs() < 3.0 * sd / (n as f64).sqrt(), "mean {mean}");
    assert!((var / (sd * sd) - 1.0).abs() < 0.1, "var {var}");
}

fn endpoint(kind: &str, steps: usize, x1: &Tensor) -> Tensor {
    let field = GaussianField::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = SamplerConfig {
        t_end: 0.05,
        ..SamplerConfig::new(kind, steps)
    };
    sample(&field, &lin(), &cfg, x1.clone(), &mut rng, None).unwrap()
}

#[test]
fn discretisation_orders() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x1 = normal(&mut rng, &[32, 2]);
    let reference = endpoint("ode_heun", 4096, &x1);
    let err = |kind: &str, steps: usize| endpoint(kind, steps, &x1).max_abs_diff(&reference);
    for steps in [16, 32, 64] {
        let euler = err("ode_euler", steps) / err("ode_euler", 2 * steps);
        let heun = err("ode_heun", steps) / err("ode_heun", 2 * steps);
        assert!((1.6..2.5).contains(&euler), "euler ratio {euler} at {steps}");
        assert!((3.2..5.0).contains(&heun), "heun ratio {heun} at {steps}");
    }
}

#[test]
fn sde_collapses_to_ode_as_diffusion_vanishes() {
    let field = GaussianField::scalar(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x1 = normal(&mut rng, &[64, 1]);
    let ode = sample(&field, &lin(), &SamplerConfig::new("ode_euler", 100), x1.clone(), &mut rng, None).unwrap();
    let mut last = f64::INFINITY;
    for scale in [1e-2, 1e-4, 1e-6, 0.0] {
        let cfg = SamplerConfig {
            diffusion_scale: scale,
            ..SamplerConfig::new("sde_euler_maruyama", 100)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let dev = sample(&field, &lin(), &cfg, x1.clone(), &mut rng, None).unwrap().max_abs_diff(&ode);
        assert!(dev < last, "scale {scale}: {dev} vs {last}");
        if scale > 0.0 {
            assert!(dev < 20.0 * scale.sqrt(), "scale {scale}: {dev}");
        } else {
            assert!(dev < 1e-12);
        }
        last = dev;
    }
}

#[test]
fn sde_samples_gaussian_and_is_seeded() {
    let (mu, sd) = (-0.5, 0.7);
    let field = GaussianField::scalar(mu, sd).unwrap();
    let n = 10_000;
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = normal(&mut rng, &[n, 1]);
        sample(&field, &lin(), &SamplerConfig::new("sde_euler_maruyama", 250), x1, &mut rng, None).unwrap()
    };
    let a = run(16);
    assert!(a.bit_eq(&run(16)));
    let mean = a.mean();
    let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - mu).abs() < 4.0 * sd / (n as f64).sqrt(), "mean {mean}");
    assert!((var / (sd * sd) - 1.0).abs() < 0.1, "var {var}");
}

#[test]
fn non_finite_state_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let err = sample(&Constant(f64::NAN), &lin(), &SamplerConfig::new("ode_heun", 3), Tensor::zeros(&[1, 2]), &mut rng, None);
    assert!(err.is_err());
}

#[test]
fn sampler_registry_lists_builtins() {
    let r = SamplerRegistry::builtin();
    assert_eq!(r.names(), ["ode_euler", "ode_heun", "sde_euler_maruyama"]);
    assert!(sample(&Constant(0.0), &lin(), &SamplerConfig::new("rk4", 2), Tensor::zeros(&[1, 1]), &mut ChaCha8Rng::seed_from_u64(0), None).is_err());
}

#[test]
fn trajectory_dump_has_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = TrajectoryRecorder::new(dir.path(), "ode_heun", 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let field = GaussianField::scalar(0.0, 1.0).unwrap();
    let mut observe = |k: usize, t: f64, x: &Tensor| rec.record(k, t, x);
    let out = sample(&field, &lin(), &SamplerConfig::new("ode_heun", 5), Tensor::full(&[2, 1], 0.5), &mut rng, Some(&mut observe)).unwrap();
    let manifest = rec.finish().unwrap();
    assert_eq!((manifest.steps, manifest.kind.as_str(), manifest.seed), (5, "ode_heun", 42));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(json["steps"], 5);
    let last = diffkit::dump::load(&dir.path().join("step_00005")).unwrap();
    assert!(last.bit_eq(&out));
    assert!(dir.path().join("step_00000.bin").exists());
}
