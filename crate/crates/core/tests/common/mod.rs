#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use tcorr::estimators::{Discriminator, DiscriminatorConfig, Method};
use tcorr::nn::{self, Loss, Mlp};
use tcorr::vae::{composite_loss_and_gradient, ObjectiveConfig, ObjectiveKind, TcTerm, VaeModel};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-4;

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut tcorr::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Largest relative error between central differences of `f` and `analytic`
/// over `coords`.
pub fn max_fd_error(
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    f: impl Fn(&[f64]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for &i in coords {
        let orig = p[i];
        p[i] = orig + FD_STEP;
        let up = f(&p);
        p[i] = orig - FD_STEP;
        let down = f(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let denom = fd.abs().max(analytic[i].abs()).max(FD_FLOOR);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}

pub fn sample_coords(n: usize, count: usize, rng: &mut tcorr::Rng) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

/// Finite-difference check of a supervised loss on a seeded network.
pub fn supervised_grad_error(widths: &[usize], loss: Loss, seed: u64) -> f64 {
    let mut rng = tcorr::rng_from_seed(seed);
    let net = Mlp::new(widths, nn::DEFAULT_LEAKY_SLOPE, &mut rng).unwrap();
    let x = normal_matrix(16, widths[0], &mut rng);
    let out = *widths.last().unwrap();
    let t = match loss {
        Loss::Logistic => DMatrix::from_fn(16, out, |r, _| (r % 2) as f64),
        Loss::Squared => normal_matrix(16, out, &mut rng),
    };
    let (_, grads) = nn::loss_and_gradient(&net, &x, &t, loss).unwrap();
    let params = net.params_flat();
    let coords = sample_coords(params.len(), 24, &mut rng);
    max_fd_error(&params, &grads.to_flat(), &coords, |p| {
        let mut n = net.clone();
        n.set_params_flat(p).unwrap();
        loss.evaluate(&n.forward(&x).unwrap(), &t).unwrap().0
    })
}

/// Every composite-loss configuration exercised by the gradient checks.
pub fn composite_cases() -> Vec<(String, ObjectiveConfig, Option<Method>)> {
    let mut cases = vec![(
        "plain-elbo".to_string(),
        ObjectiveConfig::new(ObjectiveKind::PlainElbo, 0.0),
        None,
    )];
    for m in [
        Method::NaiveMc,
        Method::Mws,
        Method::Mss0,
        Method::Mss1,
        Method::DensityRatio,
    ] {
        cases.push((
            format!("beta-tc/{m}"),
            ObjectiveConfig::new(ObjectiveKind::BetaTc, 4.0),
            Some(m),
        ));
    }
    cases.push((
        "rtc/mss1".into(),
        ObjectiveConfig::new(ObjectiveKind::Rtc, 3.0),
        Some(Method::Mss1),
    ));
    cases.push((
        "rtc/density-ratio".into(),
        ObjectiveConfig::new(ObjectiveKind::Rtc, 3.0),
        Some(Method::DensityRatio),
    ));
    cases.push(("dip-i".into(), ObjectiveConfig::dip_i(0.5), None));
    cases.push(("dip-ii".into(), ObjectiveConfig::dip_ii(2.0), None));
    cases
}

/// Finite-difference check of the composite VAE loss with fixed noise.
pub fn composite_grad_error(config: &ObjectiveConfig, method: Option<Method>, seed: u64) -> f64 {
    let mut rng = tcorr::rng_from_seed(seed);
    let (p, d, m) = (5, 3, 10);
    let model = VaeModel::new(p, d, 8, &mut rng).unwrap();
    let x = normal_matrix(m, p, &mut rng);
    let eps = normal_matrix(m, d, &mut rng);
    let disc_cfg = DiscriminatorConfig {
        layers: 2,
        hidden_width: 8,
        ..Default::default()
    };
    let disc = Discriminator::new(d, &disc_cfg, &mut rng).unwrap();
    let tc = method.map(|method| match method {
        Method::DensityRatio => TcTerm::DensityRatio(&disc),
        method => TcTerm::Minibatch {
            method,
            dataset_size: 40,
        },
    });
    let eta = 7.0;
    let g = composite_loss_and_gradient(&model, &x, &eps, config, eta, tc).unwrap();
    let params = model.params_flat();
    let coords = sample_coords(params.len(), 24, &mut rng);
    max_fd_error(&params, &g.to_flat(), &coords, |q| {
        let mut mm = model.clone();
        mm.set_params_flat(q).unwrap();
        composite_loss_and_gradient(&mm, &x, &eps, config, eta, tc)
            .unwrap()
            .terms
            .loss
    })
}
