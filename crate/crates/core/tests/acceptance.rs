//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Usage: `cargo test -p epo-core --test acceptance [-- 1 3 7]` runs the
//! listed criteria (all by default). The process exits nonzero if any
//! selected criterion fails.

use std::f64::consts::PI;
use std::time::Instant;

use epo_core::config::TrainConfig;
use epo_core::evolution::{self, Crossover, PopulationState, TriggerDecision};
use epo_core::losses::{self, LossParts};
use epo_core::policy::{gaussian_log_prob, ActorCritic, LatentGene};
use epo_core::rollout;
use epo_core::run::{self, RunOptions};
use epo_core::seeding::stream_rng;
use epo_core::tensor::{gradient_check, Activation, Mat};
use epo_core::trainer::{minibatch_loss, LossSettings, OffPolicyBatch, OnPolicyBatch, Trainer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(rows, cols, uniform(rng, rows * cols, -scale, scale)).unwrap()
}

// ---------------------------------------------------------------- 1

struct GradCase {
    net: ActorCritic,
    k: usize,
    flat: Vec<f64>,
    on: OnPolicyBatch,
    off: OffPolicyBatch,
}

fn grad_case(seed: u64, with_off: bool) -> GradCase {
    let mut rng = stream_rng(seed, 1001);
    let (od, ad, lat, k) = (3, 2, 3, 2);
    let net = ActorCritic::new(od, ad, lat, &[8, 6], Activation::Tanh).unwrap();
    let mut params = net.init_params(&mut rng);
    let big = net.actor.init_params(&mut rng, 1.0);
    let range = params.actor_range();
    params.values_mut()[range].copy_from_slice(&big);
    for v in params.log_std_mut() {
        *v = rng.random_range(-0.4..0.2);
    }
    let genes: Vec<LatentGene> = (1..=k).map(|id| LatentGene::random(id, lat, &mut rng)).collect();
    let n = 4;
    let agent: Vec<usize> = (0..n).map(|i| i % k).collect();
    let obs = mat(&mut rng, n, od, 1.0);
    let actions = mat(&mut rng, n, ad, 1.5);
    let behavior = (0..n)
        .map(|r| {
            let one = Mat::from_vec(1, od, obs.row(r).to_vec()).unwrap();
            let m = net.action_means(&params, &genes[agent[r]], &one).unwrap();
            gaussian_log_prob(m.row(0), params.log_std(), actions.row(r)) + rng.random_range(-0.25..0.25)
        })
        .collect();
    let on = OnPolicyBatch {
        agent,
        obs,
        actions,
        behavior_log_probs: behavior,
        advantages: uniform(&mut rng, n, -2.0, 2.0),
        targets: uniform(&mut rng, n, -1.0, 1.0),
    };
    let off = if with_off {
        let obs = mat(&mut rng, n, od, 1.0);
        let actions = mat(&mut rng, n, ad, 1.5);
        let m = net.action_means(&params, &genes[0], &obs).unwrap();
        let old: Vec<f64> = (0..n)
            .map(|r| gaussian_log_prob(m.row(r), params.log_std(), actions.row(r)) + rng.random_range(-0.2..0.2))
            .collect();
        OffPolicyBatch {
            obs,
            actions,
            behavior_log_probs: old.iter().map(|o| o + rng.random_range(-0.3..0.3)).collect(),
            master_old_log_probs: old,
            advantages: uniform(&mut rng, n, -2.0, 2.0),
            targets: uniform(&mut rng, n, -1.0, 1.0),
        }
    } else {
        OffPolicyBatch::empty(od, ad)
    };
    let mut flat = params.values().to_vec();
    flat.extend(genes.iter().flat_map(|g| g.phi.iter().copied()));
    GradCase { net, k, flat, on, off }
}

fn fd_error(c: &GradCase, s: &LossSettings, step: f64) -> f64 {
    let plen = c.flat.len() - c.k * c.net.latent_dim;
    let lat = c.net.latent_dim;
    let split = |x: &[f64]| {
        let p = c.net.params_from_flat(&x[..plen]).unwrap();
        let g: Vec<Vec<f64>> = (0..c.k).map(|i| x[plen + i * lat..plen + (i + 1) * lat].to_vec()).collect();
        (p, g)
    };
    let on_rows: Vec<usize> = (0..c.on.len()).collect();
    let off_rows: Vec<usize> = (0..c.off.len()).collect();
    let (p, g) = split(&c.flat);
    let out = minibatch_loss(&c.net, &p, &g, &c.on, &on_rows, &c.off, &off_rows, s).unwrap();
    let mut analytic = out.param_grad;
    analytic.extend(out.gene_grad);
    let report = gradient_check(
        &c.flat,
        &analytic,
        |x| {
            let (p, g) = split(x);
            minibatch_loss(&c.net, &p, &g, &c.on, &on_rows, &c.off, &off_rows, s).unwrap().breakdown.total
        },
        step,
    );
    report.max_relative_error
}

fn criterion_1() -> Outcome {
    let base = LossSettings {
        eps_clip: 0.1,
        critic_coef: 4.0,
        entropy_coef: 0.0,
        bounds_coef: 0.0,
        bounds_limit: 1.0,
        lambda_off: 1.0,
    };
    let (mut actor_worst, mut critic_worst, mut full_worst) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20 {
        // Actor objective alone: critic weight zero.
        let actor = LossSettings { critic_coef: 0.0, ..base };
        actor_worst = actor_worst.max(fd_error(&grad_case(seed, false), &actor, 1e-6));
        // Critic alone: zero advantages remove every actor gradient.
        let mut c = grad_case(seed, false);
        c.on.advantages.iter_mut().for_each(|a| *a = 0.0);
        critic_worst = critic_worst.max(fd_error(&c, &base, 1e-6));
        // Everything at once, including the off-policy master terms. The
        // larger step keeps cancellation off the ~1e-6 entries.
        let full = LossSettings { entropy_coef: 0.01, bounds_coef: 0.5, bounds_limit: 0.2, lambda_off: 0.7, ..base };
        full_worst = full_worst.max(fd_error(&grad_case(seed, true), &full, 1e-5));
    }
    let worst = actor_worst.max(critic_worst).max(full_worst);
    let detail = format!("max relative error actor {actor_worst:.2e}, critic {critic_worst:.2e}, combined {full_worst:.2e}");
    check(worst < 1e-4, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut rng = stream_rng(2, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..200);
        let eps = rng.random_range(0.05..0.3);
        let behavior = uniform(&mut rng, n, -4.0, 0.0);
        let new: Vec<f64> = behavior.iter().map(|b| b + rng.random_range(-0.5..0.5)).collect();
        let adv = uniform(&mut rng, n, -3.0, 3.0);
        let on = losses::on_policy_surrogate(&new, &behavior, &adv, eps).unwrap();
        let off = losses::off_policy_surrogate(&new, &behavior, &behavior, &adv, eps).unwrap();
        worst = worst.max((on.objective - off.objective).abs());
        check(on.clip_fraction == off.clip_fraction && off.dropped == 0, || "clip fraction or drop count differs".into())?;
    }
    check(worst <= 1e-12, || format!("max difference {worst:.2e}"))?;
    Ok(format!("100 batches, max |on - off| = {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

/// `G^(m)_t = r_t + gamma (1 - d_t) G^(m-1)_{t+1}` with `G^(0)_t = V_t`,
/// and `V_T` the bootstrap value past the horizon.
fn nstep_oracle(r: &[f64], d: &[bool], v: &[f64], boot: f64, gamma: f64, n: usize) -> Vec<f64> {
    let h = r.len();
    let value_at = |t: usize| if t < h { v[t] } else { boot };
    fn g(t: usize, m: usize, h: usize, r: &[f64], d: &[bool], gamma: f64, value_at: &dyn Fn(usize) -> f64) -> f64 {
        if m == 0 || t >= h {
            return value_at(t);
        }
        let cont = if d[t] { 0.0 } else { 1.0 };
        r[t] + gamma * cont * g(t + 1, m - 1, h, r, d, gamma, value_at)
    }
    (0..h).map(|t| g(t, n, h, r, d, gamma, &value_at)).collect()
}

/// Direct sum `A_t = sum_l (gamma lambda)^l delta_{t+l}`, cut after a done.
fn gae_oracle(r: &[f64], d: &[bool], v: &[f64], boot: f64, gamma: f64, lam: f64) -> Vec<f64> {
    let h = r.len();
    let delta: Vec<f64> = (0..h)
        .map(|t| {
            let next = if t + 1 < h { v[t + 1] } else { boot };
            r[t] + if d[t] { 0.0 } else { gamma * next } - v[t]
        })
        .collect();
    (0..h)
        .map(|t| {
            let mut sum = 0.0;
            for l in 0..h - t {
                sum += (gamma * lam).powi(l as i32) * delta[t + l];
                if d[t + l] {
                    break;
                }
            }
            sum
        })
        .collect()
}

fn env_major(data: &[f64], num_envs: usize, e: usize) -> Vec<f64> {
    data.iter().skip(e).step_by(num_envs).copied().collect()
}

fn criterion_3() -> Outcome {
    let mut rng = stream_rng(3, 0);
    let cases = 60;
    let mut worst = 0.0f64;
    let mut note = |label: &str, a: f64, b: f64| -> Result<(), String> {
        let e = (a - b).abs();
        worst = worst.max(e);
        check(e <= 1e-10, || format!("{label}: {a} vs {b}"))
    };

    for _ in 0..cases {
        let num_envs = rng.random_range(1..5);
        let h = rng.random_range(1..20);
        let len = num_envs * h;
        let rewards = uniform(&mut rng, len, -2.0, 2.0);
        let values = uniform(&mut rng, len, -5.0, 5.0);
        let dones: Vec<bool> = (0..len).map(|_| rng.random_bool(0.15)).collect();
        let boot = uniform(&mut rng, num_envs, -5.0, 5.0);
        let gamma = rng.random_range(0.8..1.0);
        let lam = rng.random_range(0.5..1.0);
        let n = rng.random_range(1..6);
        let nst = rollout::n_step_targets(&rewards, &dones, &values, &boot, num_envs, gamma, n).unwrap();
        let gae = rollout::gae_advantages(&rewards, &values, &dones, &boot, num_envs, gamma, lam).unwrap();
        for e in 0..num_envs {
            let r = env_major(&rewards, num_envs, e);
            let v = env_major(&values, num_envs, e);
            let d: Vec<bool> = dones.iter().skip(e).step_by(num_envs).copied().collect();
            let want_n = nstep_oracle(&r, &d, &v, boot[e], gamma, n);
            let want_g = gae_oracle(&r, &d, &v, boot[e], gamma, lam);
            for t in 0..h {
                note("n_step_targets", nst[t * num_envs + e], want_n[t])?;
                note("gae", gae[t * num_envs + e], want_g[t])?;
            }
        }

        let m = rng.random_range(1..50);
        let r = uniform(&mut rng, m, -3.0, 3.0);
        let d: Vec<bool> = (0..m).map(|_| rng.random_bool(0.3)).collect();
        let vn = uniform(&mut rng, m, -5.0, 5.0);
        let one = rollout::one_step_targets(&r, &d, &vn, gamma).unwrap();
        for i in 0..m {
            note("one_step_targets", one[i], r[i] + gamma * vn[i] * if d[i] { 0.0 } else { 1.0 })?;
        }
    }

    for case in 0..cases {
        let k = rng.random_range(2..10);
        let scale = [1e-9, 1.0, 100.0][case % 3];
        let mut scores = uniform(&mut rng, k, -1.0, 1.0);
        scores.iter_mut().for_each(|s| *s *= scale);
        let g = [0.3, 0.5][case % 2];
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let med = if k % 2 == 1 { sorted[k / 2] } else { (sorted[k / 2 - 1] + sorted[k / 2]) / 2.0 };
        let lhs = sorted[k - 1] - sorted[0];
        let rhs = if med.abs() < 1e-6 { g * (sorted[k - 1].abs() + 1e-6) } else { g * med.abs() };
        let got = evolution::fitness_gap(&scores, g);
        note("trigger lhs", got.lhs, lhs)?;
        note("trigger rhs", got.rhs, rhs)?;
        check(got.evolve == (lhs > rhs), || format!("trigger decision for {scores:?}"))?;
    }

    for _ in 0..cases {
        let dim = rng.random_range(1..40);
        let a = uniform(&mut rng, dim, -3.0, 3.0);
        let b = uniform(&mut rng, dim, -3.0, 3.0);
        let (fa, fb) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let mut r = stream_rng(0, 0);
        let avg = evolution::crossover(&a, &b, Crossover::Average, (fa, fb), &mut r).unwrap();
        let fw = evolution::crossover(&a, &b, Crossover::FitnessWeighted, (fa, fb), &mut r).unwrap();
        let low = fa.min(fb);
        let (wa, wb) = (fa - low + 1e-6, fb - low + 1e-6);
        let seed = rng.random::<u64>();
        let uni = evolution::crossover(&a, &b, Crossover::Uniform, (fa, fb), &mut stream_rng(seed, 0)).unwrap();
        let mut coin = stream_rng(seed, 0);
        for i in 0..dim {
            note("average crossover", avg[i], (a[i] + b[i]) / 2.0)?;
            note("fitness-weighted crossover", fw[i], (wa * a[i] + wb * b[i]) / (wa + wb))?;
            let want = if coin.random_bool(0.5) { a[i] } else { b[i] };
            check(uni[i] == want, || "uniform crossover picked the wrong parent".into())?;
        }
    }

    for _ in 0..cases {
        let p = LossParts {
            on_policy_actor: rng.random_range(-5.0..5.0),
            off_policy_actor: rng.random_range(-5.0..5.0),
            critic_on: rng.random_range(0.0..5.0),
            critic_off: rng.random_range(0.0..5.0),
            entropy: rng.random_range(-3.0..3.0),
            bounds: rng.random_range(0.0..1.0),
            ..Default::default()
        };
        let (lam, c, ce) = (rng.random_range(0.0..2.0), rng.random_range(0.0..8.0), rng.random_range(0.0..0.1));
        let b = losses::combine(&p, lam, c, ce).unwrap();
        let want = -(p.on_policy_actor + lam * p.off_policy_actor) + c * (p.critic_on + lam * p.critic_off) - ce * p.entropy + p.bounds;
        note("combine", b.total, want)?;
    }
    Ok(format!("{cases} randomized cases per oracle, max abs error {worst:.2e}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = stream_rng(4, 0);
    for call in 0..200 {
        let k = rng.random_range(4..13);
        let dim = rng.random_range(1..33);
        let genes: Vec<LatentGene> = (1..=k).map(|id| LatentGene::random(id, dim, &mut rng)).collect();
        let pop = PopulationState::new(genes, evolution::default_elite_count(k).unwrap());
        let scores: Vec<f64> = (0..k - 1).map(|_| (rng.random_range(-50.0f64..50.0)).round() / 4.0).collect();
        let strategy = [Crossover::Average, Crossover::Uniform, Crossover::FitnessWeighted][call % 3];
        let sigma = if call % 2 == 0 { 0.0 } else { 0.1 };
        let decision = TriggerDecision { evolve: true, lhs: 1.0, rhs: 0.5 };
        let (next, event) = evolution::evolve(&pop, &scores, strategy, sigma, decision, call as u64, &mut rng).unwrap();

        check(next.genes[0] == pop.genes[0], || format!("call {call}: master gene changed"))?;
        let survivors = 1 + event.elites.len();
        check(survivors == k - 1, || format!("call {call}: |Y| = {survivors}, K = {k}"))?;
        for &e in &event.elites {
            check(next.gene(e).phi == pop.gene(e).phi, || format!("call {call}: elite {e} changed"))?;
        }
        let replaced = event.replaced();
        let worst_elite = event.elites.iter().map(|&e| scores[e - 2]).fold(f64::INFINITY, f64::min);
        for &s in &replaced {
            check(s != 1 && !event.elites.contains(&s), || format!("call {call}: bad slot {s}"))?;
            check(scores[s - 2] <= worst_elite, || format!("call {call}: replaced agent {s} outscored an elite"))?;
        }
        check(replaced.len() + event.elites.len() == k - 1, || format!("call {call}: slots do not cover the followers"))?;
        if sigma == 0.0 {
            for child in &event.children {
                let [a, b] = child.parents;
                let mut fresh = stream_rng(0, 0);
                let phi = &next.gene(child.slot).phi;
                if strategy != Crossover::Uniform {
                    let want =
                        evolution::crossover(&pop.gene(a).phi, &pop.gene(b).phi, strategy, (scores[a - 2], scores[b - 2]), &mut fresh).unwrap();
                    check(phi == &want, || format!("call {call}: sigma=0 child is not the bare crossover"))?;
                } else {
                    let ok = (0..dim).all(|i| phi[i] == pop.gene(a).phi[i] || phi[i] == pop.gene(b).phi[i]);
                    check(ok, || format!("call {call}: sigma=0 uniform child left its parents"))?;
                }
            }
        }
    }
    let mut r = stream_rng(0, 1);
    let phi = uniform(&mut r, 32, -2.0, 2.0);
    check(evolution::mutate(&phi, 0.0, &mut r) == phi, || "sigma=0 mutation changed the gene".into())?;
    Ok("200 evolve() calls satisfy the contract".into())
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let cfg = TrainConfig::default()
        .with_overrides(&[
            "env.task=pendulum",
            "population.K=4",
            "env.num_envs=64",
            "run.total_env_steps=200000",
            "run.eval_episodes=0",
            "run.seed=11",
        ])
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for (name, threads) in [("a", 1), ("b", 1), ("c", 4)] {
        let mut c = cfg.clone();
        c.run.threads = threads;
        let out = dir.path().join(name);
        run::train_run(&c, &out, RunOptions::default()).map_err(|e| e.to_string())?;
        csvs.push(std::fs::read(out.join(run::METRICS)).unwrap());
    }
    check(csvs[0] == csvs[1], || "repeat run metrics differ".into())?;
    check(csvs[0] == csvs[2], || "1-thread and 4-thread metrics differ".into())?;
    let rows = csvs[0].iter().filter(|&&b| b == b'\n').count() - 1;
    Ok(format!("{rows} iterations byte-identical across repeats and 1 vs 4 threads"))
}

// ---------------------------------------------------------------- 6

/// Plain PPO on the captured data of a K=1 trainer, computed without the
/// library's rollout or loss code.
fn criterion_6() -> Outcome {
    let cfg = TrainConfig::default()
        .with_overrides(&["env.task=pendulum", "population.K=1", "env.num_envs=16", "run.seed=5", "run.total_env_steps=1000000"])
        .unwrap();
    let p = &cfg.ppo;
    let mut t = Trainer::new(cfg.clone()).unwrap();
    t.set_capture(true);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..30 {
        let report = t.step().map_err(|e| e.to_string())?;
        let cap = report.capture.unwrap();
        check(cap.off.is_empty(), || "K=1 produced an off-policy batch".into())?;
        let chunk = &cap.chunks[0];
        let ne = chunk.num_envs;
        let h = chunk.records.len() / ne;

        let mut adv = vec![0.0; chunk.records.len()];
        let mut targets = vec![0.0; chunk.records.len()];
        for e in 0..ne {
            let recs: Vec<_> = (0..h).map(|s| &chunk.records[s * ne + e]).collect();
            let r: Vec<f64> = recs
                .iter()
                .map(|x| if x.truncated && p.bootstrap_timeouts { x.reward + p.gamma * x.behavior_value } else { x.reward })
                .collect();
            let d: Vec<bool> = recs.iter().map(|x| x.done).collect();
            let v: Vec<f64> = recs.iter().map(|x| x.behavior_value).collect();
            let a = gae_oracle(&r, &d, &v, chunk.bootstrap_values[e], p.gamma, p.lambda_gae);
            let g = nstep_oracle(&r, &d, &v, chunk.bootstrap_values[e], p.gamma, p.n_step);
            for s in 0..h {
                adv[s * ne + e] = a[s];
                targets[s * ne + e] = g[s];
            }
        }
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let sd = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
        adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
        let vn = &cap.value_normalizer;
        if p.normalize_value {
            targets.iter_mut().for_each(|x| *x = (*x - vn.mean[0]) / (vn.var[0] + 1e-8).sqrt());
        }
        let on = &cell_obs(&cap.normalizer.mean, &cap.normalizer.var, chunk);

        for mb in &cap.minibatches {
            let params = t.net().params_from_flat(&mb.params_before).unwrap();
            let gene = LatentGene { agent_id: 1, phi: mb.genes_before[0].clone() };
            let rows = &mb.on_rows;
            let obs = Mat::from_vec(rows.len(), on.cols(), rows.iter().flat_map(|&r| on.row(r).to_vec()).collect()).unwrap();
            let acts = Mat::from_vec(
                rows.len(),
                t.net().action_dim,
                rows.iter().flat_map(|&r| chunk.records[r].action.clone()).collect(),
            )
            .unwrap();
            let means = t.net().action_means(&params, &gene, &obs).unwrap();
            let values = t.net().value(&params, &gene, &obs).unwrap();
            let ls = params.log_std();
            let (mut sur, mut crit, mut bsum) = (0.0, 0.0, 0.0);
            for (i, &r) in rows.iter().enumerate() {
                let mut lp = 0.0;
                for d in 0..ls.len() {
                    let z = (acts.get(i, d) - means.get(i, d)) / ls[d].exp();
                    lp += -0.5 * z * z - ls[d] - 0.5 * (2.0 * PI).ln();
                    bsum += ((means.get(i, d).abs() - p.bounds_limit).max(0.0)).powi(2);
                }
                let ratio = (lp - chunk.records[r].behavior_log_prob).exp();
                let clipped = ratio.clamp(1.0 - p.eps_clip, 1.0 + p.eps_clip);
                sur += (ratio * adv[r]).min(clipped * adv[r]);
                crit += (values[i] - targets[r]).powi(2);
            }
            let m = rows.len() as f64;
            let (sur, crit) = (sur / m, crit / m);
            let bounds = p.bounds_coef * bsum / (m * ls.len() as f64);
            let entropy: f64 = ls.iter().map(|l| l + 0.5 * (1.0 + (2.0 * PI).ln())).sum();
            let total = -sur + p.critic_coef * crit - p.entropy_coef * entropy + bounds;
            let got = &mb.breakdown;
            for (label, a, b) in [
                ("actor", got.on_policy_actor, sur),
                ("critic", got.critic_on, crit),
                ("bounds", got.bounds, bounds),
                ("entropy", got.entropy, entropy),
                ("total", got.total, total),
                ("off actor", got.off_policy_actor, 0.0),
                ("off critic", got.critic_off, 0.0),
            ] {
                let e = (a - b).abs();
                worst = worst.max(e);
                check(e <= 1e-10, || format!("iteration {}: {label} {a} vs reference {b}", cap.iteration))?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} minibatches over 30 iterations match plain PPO, max abs error {worst:.2e}"))
}

fn cell_obs(mean: &[f64], var: &[f64], chunk: &rollout::CollectedChunk) -> Mat {
    let od = mean.len();
    let data: Vec<f64> = chunk
        .records
        .iter()
        .flat_map(|r| (0..od).map(|d| ((r.obs[d] - mean[d]) / (var[d] + 1e-8).sqrt()).clamp(-10.0, 10.0)).collect::<Vec<_>>())
        .collect();
    Mat::from_vec(chunk.records.len(), od, data).unwrap()
}

// ---------------------------------------------------------------- 7-9

struct Trained {
    mean_return: f64,
    success_rate: f64,
}

fn train_eval(overrides: &[String], seed: u64, eval_episodes: usize) -> Result<Trained, String> {
    let mut cfg = TrainConfig::default().with_overrides(overrides).map_err(|e| e.to_string())?;
    cfg.run.seed = seed;
    let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
    while !t.is_finished() {
        t.step().map_err(|e| e.to_string())?;
    }
    let r = t.evaluate(eval_episodes, 1000 + seed, false).map_err(|e| e.to_string())?;
    Ok(Trained { mean_return: r.master().mean_return, success_rate: r.master().success_rate })
}

fn sweep(label: &str, overrides: &[String], eval_episodes: usize) -> Result<Vec<Trained>, String> {
    (0..5)
        .map(|seed| {
            let start = Instant::now();
            let r = train_eval(overrides, seed, eval_episodes)?;
            eprintln!(
                "  {label} seed {seed}: mean return {:.3}, success {:.2} ({:.0}s)",
                r.mean_return,
                r.success_rate,
                start.elapsed().as_secs_f64()
            );
            Ok(r)
        })
        .collect()
}

fn overrides(task: &str, k: usize) -> Vec<String> {
    vec![
        format!("env.task={task}"),
        "env.num_envs=256".into(),
        format!("population.K={k}"),
        "run.total_env_steps=2000000".into(),
    ]
}

fn list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(",")
}

fn criterion_7() -> Outcome {
    let ppo = sweep("reacher K=1", &overrides("multigoal_reacher", 1), 10)?;
    let epo = sweep("reacher K=8", &overrides("multigoal_reacher", 8), 10)?;
    let reach = |v: &[Trained]| v.iter().filter(|r| r.mean_return >= 9.0).count();
    let (p, e) = (reach(&ppo), reach(&epo));
    let detail = format!(
        "far goal reached with K=8 in {e}/5 seeds [{}], with K=1 in {p}/5 [{}]",
        list(&epo.iter().map(|r| r.mean_return).collect::<Vec<_>>()),
        list(&ppo.iter().map(|r| r.mean_return).collect::<Vec<_>>())
    );
    check(e >= 3 && e >= p + 2, || detail.clone())?;
    Ok(detail)
}

fn median(xs: &[f64]) -> f64 {
    evolution::median(xs)
}

fn stderr(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
}

fn criterion_8() -> Outcome {
    let mut med = Vec::new();
    let mut se = Vec::new();
    for k in [2, 4, 8] {
        let runs = sweep(&format!("mountain car K={k}"), &overrides("sparse_mountain_car", k), 20)?;
        let s: Vec<f64> = runs.iter().map(|r| r.success_rate).collect();
        med.push(median(&s));
        se.push(stderr(&s));
    }
    let mut inversions = 0;
    let mut ok = true;
    for i in 0..2 {
        if med[i + 1] < med[i] {
            inversions += 1;
            ok &= med[i] - med[i + 1] <= se[i].max(se[i + 1]);
        }
    }
    let detail = format!("median success K=2,4,8: [{}], stderr [{}]", list(&med), list(&se));
    check(ok && inversions <= 1, || detail.clone())?;
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let ppo = sweep("pendulum K=1", &overrides("pendulum", 1), 10)?;
    let epo = sweep("pendulum K=8", &overrides("pendulum", 8), 10)?;
    let mean = |v: &[Trained]| v.iter().map(|r| r.mean_return).sum::<f64>() / v.len() as f64;
    let (p, e) = (mean(&ppo), mean(&epo));
    let gap = (e - p).abs() / p.abs();
    let detail = format!("mean final return K=8 {e:.1}, K=1 {p:.1}, relative gap {:.1}%", 100.0 * gap);
    check(gap <= 0.10, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let c = TrainConfig::default();
    let expected = [
        ("ppo.gamma", c.ppo.gamma, 0.99),
        ("opt.lr", c.opt.lr, 1e-4),
        ("opt.kl_threshold", c.opt.kl_threshold, 0.016),
        ("opt.max_grad_norm", c.opt.max_grad_norm, 1.0),
        ("ppo.eps_clip", c.ppo.eps_clip, 0.1),
        ("ppo.critic_coef", c.ppo.critic_coef, 4.0),
        ("ppo.horizon", c.ppo.horizon as f64, 16.0),
        ("ppo.bounds_coef", c.ppo.bounds_coef, 1e-5),
        ("ppo.mini_epochs", c.ppo.mini_epochs as f64, 2.0),
        ("ppo.lambda_off", c.ppo.lambda_off, 1.0),
    ];
    for (key, got, want) in expected {
        check(got == want, || format!("{key} = {got}, expected {want}"))?;
    }
    check([0.3, 0.5].contains(&c.population.gamma_trigger), || "gamma_trigger outside {0.3, 0.5}".into())?;
    for (n, k) in [(256, 8), (64, 4), (24, 1), (512, 16)] {
        let c = TrainConfig::default()
            .with_overrides(&[format!("env.num_envs={n}"), format!("population.K={k}")])
            .map_err(|e| e.to_string())?;
        check(c.minibatch_size() == 4 * n, || format!("minibatch {} for N={n}", c.minibatch_size()))?;
        if k >= 4 {
            check(c.elite_count() == Some(k - 2), || format!("elite count {:?} for K={k}", c.elite_count()))?;
        }
    }
    // The serialized defaults carry the same values under their config keys.
    let v = c.to_value();
    for (path, want) in [
        ("/ppo/gamma", 0.99),
        ("/opt/lr", 1e-4),
        ("/opt/kl_threshold", 0.016),
        ("/ppo/eps_clip", 0.1),
        ("/ppo/critic_coef", 4.0),
        ("/ppo/bounds_coef", 1e-5),
        ("/ppo/lambda_off", 1.0),
    ] {
        check(v.pointer(path).and_then(|x| x.as_f64()) == Some(want), || format!("snapshot {path}"))?;
    }
    check(v.pointer("/population/x_elites") == Some(&serde_json::Value::Null), || "x_elites default should be K-2".into())?;
    Ok("all fixed defaults match".into())
}

// ----------------------------------------------------------------

fn main() {
    let names = [
        "gradient correctness",
        "off-policy reduction",
        "closed-form oracles",
        "evolution contract",
        "determinism",
        "degenerate-config equivalence",
        "exploration on multigoal_reacher",
        "population-size trend on sparse_mountain_car",
        "dense-task parity on pendulum",
        "hyperparameter fidelity",
    ];
    let funcs: [fn() -> Outcome; 10] = [
        criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8, criterion_9,
        criterion_10,
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).filter(|n| (1..=10).contains(n)).collect();
    let selected = if selected.is_empty() { (1..=10).collect() } else { selected };
    let mut failed = 0;
    for n in selected {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(funcs[n - 1]).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({}): {detail} [{secs:.1}s]", names[n - 1]),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({}): {detail} [{secs:.1}s]", names[n - 1]);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
