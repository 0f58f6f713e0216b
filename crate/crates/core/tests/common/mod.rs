#![allow(dead_code)]

use mpamp_core::allocation::AllocationContext;
use mpamp_core::model::{sigma2_e_for, SignalPrior};

/// Every composition of `steps` budget units into `t` nonnegative parts,
/// scored by running `f1` forward. Ties prefer more rate in later
/// iterations, which is what the DP's smallest-prefix rule selects.
pub fn exhaustive_allocate(
    ctx: &AllocationContext,
    sigma2_0: f64,
    steps: usize,
    t: usize,
    delta_r: f64,
) -> (Vec<usize>, f64, usize) {
    fn walk(left: usize, t: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() + 1 == t {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            walk(left - k, t, prefix, out);
            prefix.pop();
        }
    }
    let mut all = Vec::new();
    walk(steps, t, &mut Vec::new(), &mut all);
    let count = all.len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for alloc in all {
        let mut s = sigma2_0;
        for &k in &alloc {
            s = ctx.f1(s, k as f64 * delta_r).unwrap();
        }
        let better = match &best {
            None => true,
            Some((b, v)) => s < *v || (s == *v && alloc.iter().rev().cmp(b.iter().rev()).is_gt()),
        };
        if better {
            best = Some((alloc, s));
        }
    }
    let (alloc, v) = best.unwrap();
    (alloc, v, count)
}

pub const STD_KAPPA: f64 = 0.3;
pub const STD_SNR_DB: f64 = 20.0;
pub const STD_P: usize = 30;

pub fn std_prior(eps: f64) -> SignalPrior {
    SignalPrior::new(eps, 0.0, 1.0).unwrap()
}

pub fn std_sigma2_e(eps: f64) -> f64 {
    sigma2_e_for(eps, STD_KAPPA, STD_SNR_DB)
}

use mpamp_core::allocation::RdChoice;
use mpamp_core::ratedist::{BaSettings, RdCache};
use std::path::PathBuf;

/// RD curves survive across test runs in the cargo target directory.
pub fn cache_path() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("rd-cache.txt")
}

pub fn std_ctx(eps: f64, choice: RdChoice) -> AllocationContext {
    let cache = RdCache::new();
    let path = cache_path();
    cache.load(&path).unwrap();
    let before = cache.len();
    let ctx = AllocationContext::build(
        std_prior(eps),
        STD_KAPPA,
        std_sigma2_e(eps),
        STD_P,
        choice,
        Some(&cache),
    )
    .unwrap();
    if cache.len() != before {
        // Merge with whatever another test binary saved meanwhile.
        cache.load(&path).unwrap();
        cache.save(&path).unwrap();
    }
    ctx
}

pub fn ba_choice() -> RdChoice {
    RdChoice::Ba {
        nodes: 12,
        settings: BaSettings::default(),
    }
}

/// Posterior mean E[S | S + sqrt(v) Z = f] by composite Simpson over the slab.
pub fn brute_posterior_mean(f: f64, v: f64, p: &SignalPrior) -> f64 {
    let gauss = |x: f64, m: f64, var: f64| {
        (-(x - m) * (x - m) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    };
    // The integrand S pi(S) phi(f - S) concentrates near the posterior slab mean.
    let post_var = p.sigma2_s() * v / (p.sigma2_s() + v);
    let centre = (p.sigma2_s() * f + v * p.mu_s) / (p.sigma2_s() + v);
    let half = 14.0 * post_var.sqrt();
    let n = 20_000;
    let h = 2.0 * half / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let s = centre - half + i as f64 * h;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let g = gauss(s, p.mu_s, p.sigma2_s()) * gauss(f, s, v);
        num += w * s * g;
        den += w * g;
    }
    let slab_num = p.epsilon * num * h / 3.0;
    let slab_den = p.epsilon * den * h / 3.0;
    let spike = (1.0 - p.epsilon) * gauss(f, 0.0, v);
    slab_num / (slab_den + spike)
}
