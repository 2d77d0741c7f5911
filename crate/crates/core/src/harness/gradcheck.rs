use std::fmt;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consistency::{ConsistencyConfig, ConsistencyPolicy, DeterministicPolicy, NetCopy, PolicyBatch};
use crate::critic::{CriticConfig, CriticPair};
use crate::diffnet::{Gradients, Network};
use crate::error::Result;
use crate::intention::{IntentionBatch, IntentionConfig, IntentionLearner};

/// CLI failure threshold on the maximum relative error.
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-3;

const STEP: f64 = 1e-5;
/// Magnitudes below this are compared on an absolute scale.
const FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Policy,
    DeterministicPolicy,
    Critic,
    Encoder,
    Decoder,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Policy, Family::DeterministicPolicy, Family::Critic, Family::Encoder, Family::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Family::Policy => "policy",
            Family::DeterministicPolicy => "deterministic_policy",
            Family::Critic => "critic",
            Family::Encoder => "encoder",
            Family::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyResult {
    pub family: Family,
    pub cases: usize,
    /// Parameters compared across all cases.
    pub checked: usize,
    pub max_rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub results: Vec<FamilyResult>,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self, threshold: f64) -> bool {
        self.results.iter().all(|r| r.max_rel < threshold)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>6} {:>8} {:>12}", "family", "cases", "params", "max_rel")?;
        for r in &self.results {
            writeln!(f, "{:<22} {:>6} {:>8} {:>12.3e}", r.family.name(), r.cases, r.checked, r.max_rel)?;
        }
        Ok(())
    }
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || scale * rng.random_range(-1.0..1.0))
}

fn hidden(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect()
}

/// Central differences over every parameter of `net`; returns `(count, max_rel)`.
fn compare(net: &Network<f64>, analytic: &Gradients<f64>, corrupt: bool, loss: impl Fn(&Network<f64>) -> Result<f64>) -> Result<(usize, f64)> {
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for i in 0..net.num_params() {
        let v = net.param(i);
        probe.set_param(i, v + STEP);
        let lp = loss(&probe)?;
        probe.set_param(i, v - STEP);
        let lm = loss(&probe)?;
        probe.set_param(i, v);
        let fd = (lp - lm) / (2.0 * STEP);
        let mut an = analytic.get(i);
        if corrupt {
            an = an * 1.05 + 1e-3;
        }
        worst = worst.max(rel_err(fd, an));
    }
    Ok((net.num_params(), worst))
}

fn policy_case(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<(usize, f64)> {
    let (od, ad, md, b) = (rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3), 3);
    let cfg = ConsistencyConfig {
        hidden: hidden(rng),
        ..ConsistencyConfig::default()
    };
    // Wide bounds keep the clamp inactive, so `f` is differentiable.
    let policy = ConsistencyPolicy::<f64>::new(&cfg, od, ad, md, vec![-1e9; ad], vec![1e9; ad], rng)?;
    let levels = policy.schedule().levels();
    let tau = Array1::from_shape_simple_fn(b, || policy.schedule().tau(rng.random_range(1..=levels)));
    let obs = uniform(rng, (b, od), 1.0);
    let mut noisy = uniform(rng, (b, ad), 1.0);
    for (i, mut r) in noisy.rows_mut().into_iter().enumerate() {
        r.mapv_inplace(|v| v * (0.5 + tau[i]));
    }
    let psi = uniform(rng, (b, md), 1.0);
    let mask = Array1::from_shape_simple_fn(b, || f64::from(u8::from(rng.random_bool(0.5))));
    let w = uniform(rng, (b, ad), 1.0);
    let out = policy.apply_batch(NetCopy::Online, obs.view(), noisy.view(), psi.view(), mask.view(), tau.view(), true)?;
    let g = policy.backprop(&out, w.view())?;
    compare(policy.net(), &g, corrupt, |net| {
        let mut p = policy.clone();
        *p.net_mut() = net.clone();
        let y = p.apply_batch(NetCopy::Online, obs.view(), noisy.view(), psi.view(), mask.view(), tau.view(), false)?;
        Ok((&y.action * &w).sum())
    })
}

fn deterministic_case(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<(usize, f64)> {
    let (od, ad, md, b) = (rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3), 4);
    let jd = od + rng.random_range(0..=3);
    let policy = DeterministicPolicy::<f64>::new(&hidden(rng), od, ad, md, vec![-1.0; ad], vec![1.0; ad], rng)?;
    let critic = CriticPair::<f64>::new(
        &CriticConfig {
            hidden: hidden(rng),
            ..CriticConfig::default()
        },
        jd,
        ad,
        0.9,
        rng,
    )?;
    let batch = PolicyBatch {
        joint_obs: uniform(rng, (b, jd), 1.0),
        own_obs: uniform(rng, (b, od), 1.0),
        intention: uniform(rng, (b, md), 1.0),
        mask: Array1::from_shape_simple_fn(b, || f64::from(u8::from(rng.random_bool(0.5)))),
    };
    let (_, g) = policy.policy_loss_and_grads(&critic, &batch)?;
    compare(policy.net(), &g, corrupt, |net| {
        let p = DeterministicPolicy::from_network(net.clone(), od, ad, md, vec![-1.0; ad], vec![1.0; ad])?;
        Ok(p.policy_loss_and_grads(&critic, &batch)?.0)
    })
}

fn critic_case(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<(usize, f64)> {
    let (jd, ad, b) = (rng.random_range(1..=5), rng.random_range(1..=3), 4);
    let cfg = CriticConfig {
        hidden: hidden(rng),
        ..CriticConfig::default()
    };
    let pair = CriticPair::<f64>::new(&cfg, jd, ad, 0.9, rng)?;
    let x = uniform(rng, (b, jd + ad), 1.0);
    let y = Array1::from_shape_simple_fn(b, || rng.random_range(-2.0..2.0));
    let (_, g) = CriticPair::regression_loss_and_grads(&pair.q1, x.view(), y.view())?;
    compare(&pair.q1, &g, corrupt, |net| Ok(CriticPair::regression_loss_and_grads(net, x.view(), y.view())?.0))
}

fn intention_setup(rng: &mut ChaCha8Rng) -> Result<(IntentionConfig, IntentionLearner<f64>, IntentionBatch<f64>)> {
    let cfg = IntentionConfig {
        codes: rng.random_range(2..=4),
        dim: rng.random_range(2..=4),
        history: rng.random_range(1..=3),
        hidden: hidden(rng),
        ..IntentionConfig::default()
    };
    let (n, od, sd, b) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4), 3);
    let learner = IntentionLearner::<f64>::new(&cfg, n, od, sd, rng)?;
    let batch = IntentionBatch {
        histories: (0..n).map(|_| uniform(rng, (b, cfg.history * od), 1.0)).collect(),
        states: uniform(rng, (b, sd), 1.0),
    };
    Ok((cfg, learner, batch))
}

/// Encoder gradient of the commitment term with the code assignment fixed.
/// The straight-through copy of the decoder gradient is a surrogate and is
/// excluded.
fn encoder_case(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<(usize, f64)> {
    let (_, learner, batch) = intention_setup(rng)?;
    let g = learner.gradients(&batch)?;
    let views: Vec<_> = batch.histories.iter().map(|h| h.view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    let (_, cache) = learner.encoder.forward_batch(stacked.view())?;
    let upstream = &g.encoder_upstream - &g.straight_through;
    let (analytic, _) = learner.encoder.backward_batch(&cache, upstream.view())?;
    let b = batch.states.nrows() as f64;
    compare(&learner.encoder, &analytic, corrupt, |net| {
        let z = net.predict_batch(stacked.view())?;
        let mut total = 0.0;
        for (r, row) in z.rows().into_iter().enumerate() {
            let code = learner.codebook.code(g.indices[r]);
            total += row.iter().zip(code).map(|(x, c)| (x - c) * (x - c)).sum::<f64>();
        }
        Ok(learner.beta * total / b)
    })
}

fn decoder_case(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<(usize, f64)> {
    let (_, learner, batch) = intention_setup(rng)?;
    let g = learner.gradients(&batch)?;
    compare(&learner.decoder, &g.decoder, corrupt, |net| {
        let mut l = learner.clone();
        l.decoder = net.clone();
        Ok(l.gradients(&batch)?.recon_loss)
    })
}

/// Finite-difference check of every network family over `cases` random
/// networks and inputs each. `fault` corrupts one family's analytic gradient.
pub fn grad_check(cases: usize, seed: u64, fault: Option<Family>) -> Result<GradCheckReport> {
    let mut results = Vec::new();
    for (fi, family) in Family::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fi as u64);
        let corrupt = fault == Some(family);
        let mut checked = 0;
        let mut max_rel = 0.0f64;
        for _ in 0..cases {
            let (n, rel) = match family {
                Family::Policy => policy_case(&mut rng, corrupt)?,
                Family::DeterministicPolicy => deterministic_case(&mut rng, corrupt)?,
                Family::Critic => critic_case(&mut rng, corrupt)?,
                Family::Encoder => encoder_case(&mut rng, corrupt)?,
                Family::Decoder => decoder_case(&mut rng, corrupt)?,
            };
            checked += n;
            max_rel = max_rel.max(rel);
        }
        results.push(FamilyResult {
            family,
            cases,
            checked,
            max_rel,
        });
    }
    Ok(GradCheckReport { results })
}
