//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL ...` line
//! and fails when its threshold is not met.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng as _;

use cldc::action_repr::{
    adapt_structure, anchor_penalty, collect_transitions, decode, finetune, make_anchor, prediction_loss,
    ssl_train, AnchorTarget, EncoderDecoder, ReprConfig, Transition, UniformExploration,
};
use cldc::agent::{self, a2c_loss, compute_targets, A2CConfig, AaclAgent, AaclConfig, ActorCritic, Rollout, Step};
use cldc::baselines::{ewc_penalty, DirectHead, EwcAnchor, Reservoir};
use cldc::envs::{self, build_sequence, ActionSpace, Budgets, Dir, Family, GridConfig, GridState, Situation, TaskSpec};
use cldc::harness::{self, Method, RunConfig};
use cldc::metrics::{self, PerfMatrix};
use cldc::numerics::{fd_check, Activation, GradBundle, ParamBundle};
use cldc::rng;

/// Writes to the real stdout so the line shows even when output is captured.
fn verdict(n: u32, ok: bool, detail: String, started: Instant) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {n}: {} {detail} ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let _ = out.flush();
    drop(out);
    assert!(ok, "criterion {n} failed: {detail}");
}

fn task(family: Family, size: usize, k: usize, index: usize, steps: u64) -> TaskSpec {
    TaskSpec {
        index,
        family,
        grid: GridConfig::new(size, size, family),
        space: ActionSpace::prefix(family.catalog(), k).unwrap(),
        train_steps: steps,
    }
}

fn buffer(t: &TaskSpec, n: usize, seed: u64) -> Vec<Transition> {
    let mut policy = UniformExploration::new(rng::substream(seed, "acc-explore", t.index as u64));
    collect_transitions(t, &mut policy, n, seed).unwrap()
}

fn random_fisher(like: &ParamBundle, r: &mut rng::Rng) -> GradBundle {
    let mut f = like.zeros_like();
    for v in f.values_mut() {
        *v = r.gen_range(0.0..1.0);
    }
    f
}

fn perturb(p: &mut ParamBundle, scale: f64, r: &mut rng::Rng) {
    for v in p.values_mut() {
        *v += r.gen_range(-scale..scale);
    }
}

/// Encoder-decoder trained briefly on 3 actions, anchored with a random
/// Fisher, then grown to 5 actions and moved off the anchor.
fn anchored_state(seed: u64) -> (EncoderDecoder, Vec<Transition>, Vec<bool>) {
    let cfg = ReprConfig { dim: 6, encoder_hidden: vec![7], epochs: 1, batch_size: 8, ..ReprConfig::default() };
    let t1 = task(Family::Oriented, 4, 3, 1, 0);
    let t2 = task(Family::Oriented, 4, 5, 2, 0);
    let mut r = rng::substream(seed, "acc-fd", 0);
    let mut state = EncoderDecoder::new(t1.obs_len(), 7, &cfg, &mut r);
    adapt_structure(&mut state, &t1.space, &mut r).unwrap();
    let b1 = buffer(&t1, 24, seed);
    ssl_train(&b1, &mut state, &t1.space.mask, &cfg, &mut r).unwrap();
    let mut anchor = make_anchor(&b1, &state, &t1.space.mask, true).unwrap();
    anchor.decoder_fisher = random_fisher(&anchor.decoder, &mut r);
    if let Some((enc, fis)) = anchor.encoder.as_mut() {
        *fis = random_fisher(enc, &mut r);
    }
    state.anchors.push(anchor);
    adapt_structure(&mut state, &t2.space, &mut r).unwrap();
    perturb(&mut state.encoder, 0.05, &mut r);
    perturb(&mut state.decoder, 0.05, &mut r);
    (state, buffer(&t2, 12, seed + 100), t2.space.mask)
}

#[test]
fn criterion_01_gradient_correctness() {
    let started = Instant::now();
    let h = 1e-6;
    let mut worst = [0.0f64; 4];
    for seed in 0..5u64 {
        let (state, buf, active) = anchored_state(seed);
        let batch: Vec<&Transition> = buf.iter().collect();

        // prediction loss, both parameter groups
        let e = fd_check(
            |enc| {
                let mut s = state.clone();
                s.encoder = enc.clone();
                let (l, ge, _) = prediction_loss(&s, &batch, &active).unwrap();
                (l, ge)
            },
            &state.encoder,
            h,
        );
        let d = fd_check(
            |dec| {
                let mut s = state.clone();
                s.decoder = dec.clone();
                let (l, _, gd) = prediction_loss(&s, &batch, &active).unwrap();
                (l, gd)
            },
            &state.decoder,
            h,
        );
        worst[0] = worst[0].max(e).max(d);

        // anchored fine-tuning loss with λ = 2e4
        let lambda = 2e4;
        let e = fd_check(
            |enc| {
                let mut s = state.clone();
                s.encoder = enc.clone();
                let (l, mut ge, _) = prediction_loss(&s, &batch, &active).unwrap();
                let (p, pe, _) = anchor_penalty(&s, lambda, AnchorTarget::Both).unwrap();
                ge.add_assign(&pe);
                (l + p, ge)
            },
            &state.encoder,
            h,
        );
        let d = fd_check(
            |dec| {
                let mut s = state.clone();
                s.decoder = dec.clone();
                let (l, _, mut gd) = prediction_loss(&s, &batch, &active).unwrap();
                let (p, _, pd) = anchor_penalty(&s, lambda, AnchorTarget::Decoder).unwrap();
                gd.add_assign(&pd);
                (l + p, gd)
            },
            &state.decoder,
            h,
        );
        worst[1] = worst[1].max(e).max(d);

        // actor-critic loss through the decoder
        let a2c = A2CConfig { hidden: vec![5], ..A2CConfig::default() };
        let mut r = rng::substream(seed, "acc-ac", 0);
        let obs_len = state.obs_len;
        let ac = ActorCritic::new(obs_len, state.dim(), state.dim(), Activation::Sigmoid, &a2c, &mut r);
        let in_dim = ac.policy.in_dim();
        let mut input = || (0..in_dim).map(|_| r.gen_range(0.0..1.0)).collect::<Vec<f64>>();
        let steps = vec![
            Step { input: input(), action: 3, reward: 0.0, done: false },
            Step { input: input(), action: 1, reward: 0.7, done: false },
        ];
        let roll = vec![Rollout { steps, bootstrap: input(), active: active.clone() }];
        let targets = compute_targets(&roll, &ac).unwrap();
        let head = agent::DecoderHead { encdec: &state };
        let p = fd_check(
            |pol| {
                let mut probe = ac.clone();
                probe.policy = pol.clone();
                let (t, g, _) = a2c_loss(&roll, &targets, &probe, &head, &[], 0.0, None).unwrap();
                (t.total, g)
            },
            &ac.policy,
            h,
        );
        let v = fd_check(
            |val| {
                let mut probe = ac.clone();
                probe.value = val.clone();
                let (t, _, g) = a2c_loss(&roll, &targets, &probe, &head, &[], 0.0, None).unwrap();
                (t.total, g)
            },
            &ac.value,
            h,
        );
        worst[2] = worst[2].max(p).max(v);

        // direct-logit actor-critic with the EWC penalty
        let direct = DirectHead { catalog_len: 7 };
        let mut bl = ActorCritic::new(obs_len, 7, 7, Activation::Linear, &a2c, &mut r);
        let anchors = vec![EwcAnchor { params: bl.policy.clone(), fisher: random_fisher(&bl.policy, &mut r) }];
        perturb(&mut bl.policy, 0.05, &mut r);
        let in_dim = bl.policy.in_dim();
        let mut input = || (0..in_dim).map(|_| r.gen_range(0.0..1.0)).collect::<Vec<f64>>();
        let steps = vec![
            Step { input: input(), action: 0, reward: 0.0, done: false },
            Step { input: input(), action: 4, reward: 0.9, done: true },
        ];
        let roll = vec![Rollout { steps, bootstrap: input(), active: active.clone() }];
        let targets = compute_targets(&roll, &bl).unwrap();
        let b = fd_check(
            |pol| {
                let mut probe = bl.clone();
                probe.policy = pol.clone();
                let pen = ewc_penalty(pol, &anchors, 1e4);
                let (t, g, _) = a2c_loss(&roll, &targets, &probe, &direct, &[], 0.0, Some(pen)).unwrap();
                (t.total, g)
            },
            &bl.policy,
            h,
        );
        worst[3] = worst[3].max(b);
    }
    let ok = worst.iter().all(|&w| w < 1e-4);
    verdict(
        1,
        ok,
        format!(
            "max rel err: prediction {:.1e}, anchored {:.1e}, actor-critic {:.1e}, ewc {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
        started,
    );
}

/// Straight re-summation, written independently of the metrics module.
fn oracle(p: &[Vec<f64>]) -> (f64, f64, f64) {
    let n = p[0].len();
    let r: f64 = p[n].iter().sum::<f64>() / n as f64;
    let mut fs = Vec::new();
    for i in 2..=n {
        let mut acc = 0.0;
        for j in 0..i - 1 {
            acc += p[i - 1][j] - p[i][j];
        }
        fs.push(acc / (i - 1) as f64);
    }
    let mut ts = Vec::new();
    for i in 1..n {
        let mut acc = 0.0;
        for j in i..n {
            acc += p[i][j] - p[i - 1][j];
        }
        ts.push(acc / (n - i) as f64);
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    (r, mean(&fs), mean(&ts))
}

#[test]
fn criterion_02_metric_oracles() {
    let started = Instant::now();
    let mut ok = true;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;

    let row3 = PerfMatrix::from_rows(vec![
        vec![0.0, 0.0, 0.0],
        vec![0.6, 0.0, 0.0],
        vec![0.6, 0.7, 0.0],
        vec![0.6, 0.7, 0.9],
    ])
    .unwrap();
    ok &= close(metrics::continual_return(&row3, 3).unwrap(), 2.2 / 3.0);

    let forget = PerfMatrix::from_rows(vec![
        vec![0.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.8, 0.9, 0.0],
        vec![0.6, 0.7, 0.9],
    ])
    .unwrap();
    let f = metrics::forgetting(&forget).unwrap();
    ok &= close(f.per_task[0].1, 0.2) && close(f.per_task[1].1, 0.2) && close(f.mean.unwrap(), 0.2);

    let transfer = PerfMatrix::from_rows(vec![
        vec![0.1, 0.1, 0.1],
        vec![0.9, 0.5, 0.3],
        vec![0.9, 0.5, 0.5],
        vec![0.9, 0.5, 0.5],
    ])
    .unwrap();
    ok &= close(metrics::forward_transfer(&transfer).unwrap().per_task[0].1, 0.3);

    let mut r = rng::substream(2, "acc-metrics", 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| r.gen_range(0.0..=1.0)).collect()).collect();
        let p = PerfMatrix::from_rows(rows.clone()).unwrap();
        let (ro, fo, to) = oracle(&rows);
        let rr = metrics::continual_return(&p, 5).unwrap();
        let fm = metrics::forgetting(&p).unwrap().mean.unwrap();
        let tm = metrics::forward_transfer(&p).unwrap().mean.unwrap();
        worst = worst.max((rr - ro).abs()).max((fm - fo).abs()).max((tm - to).abs());
        ok &= (-1.0..=1.0).contains(&fm) && (-1.0..=1.0).contains(&tm);
    }
    ok &= worst < 1e-12;
    ok &= started.elapsed().as_secs_f64() < 1.0;
    verdict(2, ok, format!("worked examples exact, random max abs diff {worst:.1e}"), started);
}

#[test]
fn criterion_03_structural_adaptation() {
    let started = Instant::now();
    let cfg = ReprConfig { dim: 16, encoder_hidden: vec![16], epochs: 5, batch_size: 64, ..ReprConfig::default() };
    let t1 = task(Family::Oriented, 5, 3, 1, 0);
    let t2 = task(Family::Oriented, 5, 5, 2, 0);
    let mut r = rng::substream(3, "acc-struct", 0);
    let mut state = EncoderDecoder::new(t1.obs_len(), 7, &cfg, &mut r);
    adapt_structure(&mut state, &t1.space, &mut r).unwrap();
    let b1 = buffer(&t1, 2000, 3);
    ssl_train(&b1, &mut state, &t1.space.mask, &cfg, &mut r).unwrap();

    let probes: Vec<Vec<f64>> = (0..50).map(|_| (0..cfg.dim).map(|_| r.gen_range(0.0..1.0)).collect()).collect();
    let before: Vec<Vec<f64>> = probes.iter().map(|e| state.logits(e).unwrap().0).collect();
    state.anchors.push(make_anchor(&b1, &state, &t1.space.mask, false).unwrap());
    adapt_structure(&mut state, &t2.space, &mut r).unwrap();
    let preserved = probes.iter().zip(&before).all(|(e, old)| {
        let new = state.logits(e).unwrap().0;
        (0..3).all(|a| new[a].to_bits() == old[a].to_bits())
    });

    let zero_masked = probes.iter().all(|e| {
        let p = decode(&state, e, &t1.space.mask).unwrap();
        p[3..].iter().all(|&v| v == 0.0)
    });

    let anchor_dec = state.anchors[0].decoder.clone();
    let b2 = buffer(&t2, 2000, 4);
    finetune(&b2, &mut state, &t2.space.mask, 1e8, AnchorTarget::Decoder, &cfg, &mut r).unwrap();
    let layer = &state.decoder.layers[0];
    let old = &anchor_dec.layers[0];
    let nw = 3 * layer.in_dim;
    let drift = layer.weights[..nw]
        .iter()
        .zip(&old.weights)
        .chain(layer.bias[..3].iter().zip(&old.bias))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let ok = preserved && zero_masked && drift < 1e-3;
    verdict(
        3,
        ok,
        format!("old logits bit-exact {preserved}, masked probs exactly 0 {zero_masked}, anchored drift {drift:.2e}"),
        started,
    );
}

#[test]
fn criterion_04_ssl_quality() {
    let started = Instant::now();
    let t = task(Family::Oriented, 5, 7, 1, 0);
    let cfg = ReprConfig::default();
    let mut r = rng::substream(4, "acc-ssl", 0);
    let mut state = EncoderDecoder::new(t.obs_len(), 7, &cfg, &mut r);
    adapt_structure(&mut state, &t.space, &mut r).unwrap();
    let train = buffer(&t, 10_000, 40);
    ssl_train(&train, &mut state, &t.space.mask, &cfg, &mut r).unwrap();
    let held_out = buffer(&t, 3_000, 41);
    let s = harness::score_probe(&state, &t, &held_out, 4).unwrap();
    let acc = s.unambiguous_only.unwrap_or(0.0);
    verdict(
        4,
        acc >= 0.95,
        format!("unambiguous accuracy {acc:.4} on {} of {} held-out transitions (overall {:.4})", s.unambiguous, s.transitions, s.overall),
        started,
    );
}

#[test]
fn criterion_05_single_task_learning() {
    let started = Instant::now();
    let t = task(Family::Oriented, 8, 3, 1, 150_000);
    let mut returns = Vec::new();
    for seed in 0..5u64 {
        let mut agent = AaclAgent::new(
            t.obs_len(),
            7,
            ReprConfig::default(),
            A2CConfig::default(),
            AaclConfig::default(),
            seed,
        );
        agent.run_task(&t, 0, &mut agent::SilentHooks).unwrap();
        returns.push(agent.evaluate(&t, 10, rng::derive_seed(seed, "evaluation", 0)).unwrap());
    }
    let hits = returns.iter().filter(|&&v| v >= 0.8).count();
    let shown: Vec<String> = returns.iter().map(|v| format!("{v:.3}")).collect();
    verdict(5, hits >= 4, format!("{hits}/5 seeds >= 0.8 [{}]", shown.join(", ")), started);
}

fn sequence_run(method: Method, situation: Situation, out: &Path) -> metrics::MetricReport {
    let mut cfg = RunConfig {
        method,
        seeds: (0..5).collect(),
        output_dir: out.display().to_string(),
        snapshots: false,
        ..RunConfig::default()
    };
    cfg.sequence.situation = situation;
    cfg.sequence.steps_per_task = vec![150_000];
    cfg.eval.interval = 150_000;
    cfg.eval.probe_transitions = 0;
    harness::run(&cfg.resolved(), 1).unwrap().report
}

#[test]
fn criterion_06_expansion_sequence() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let rep = sequence_run(Method::Aacl, Situation::Expansion, dir.path());
    let f = rep.forgetting.as_ref().unwrap().mean;
    let t = rep.forward_transfer.as_ref().unwrap().mean;
    verdict(
        6,
        f <= 0.10 && t >= 0.20,
        format!("AACL forgetting {f:.3} (<= 0.10), forward transfer {t:.3} (>= 0.20), return {:.3}", rep.continual_return.mean),
        started,
    );
}

#[test]
fn criterion_07_contraction_sequence() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let aacl = sequence_run(Method::Aacl, Situation::Contraction, dir.path());
    let ft = sequence_run(Method::Ft, Situation::Contraction, dir.path());
    let gap = aacl.continual_return.mean - ft.continual_return.mean;
    verdict(
        7,
        gap >= 0.05,
        format!(
            "AACL return {:.3} vs FT {:.3}, gap {gap:.3} (>= 0.05)",
            aacl.continual_return.mean, ft.continual_return.mean
        ),
        started,
    );
}

#[test]
fn criterion_08_consistency_across_tasks() {
    let started = Instant::now();
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for family in [Family::Oriented, Family::Omni] {
        let grid = GridConfig::new(4, 4, family);
        for situation in [
            Situation::Expansion,
            Situation::Contraction,
            Situation::ExpansionContraction,
            Situation::ContractionExpansion,
        ] {
            let seq = build_sequence(situation, family, grid, &Budgets::uniform(0), 0, None).unwrap();
            let dirs: &[Dir] = if family == Family::Oriented { &[Dir::N, Dir::E, Dir::S, Dir::W] } else { &[Dir::E] };
            let cells: Vec<(i32, i32)> = (0..4).flat_map(|x| (0..4).map(move |y| (x, y))).collect();
            for &pos in &cells {
                for &goal in &cells {
                    if goal == pos {
                        continue;
                    }
                    for &dir in dirs {
                        for t in [0, 1, grid.max_steps - 1] {
                            let state = GridState { pos, dir, goal, t, done: false };
                            for a in 0..family.catalog().len() {
                                let outcomes: Vec<_> = seq
                                    .tasks
                                    .iter()
                                    .filter(|task| task.space.contains(a))
                                    .map(|task| envs::env_step(&state, a, task).unwrap())
                                    .collect();
                                for o in outcomes.iter().skip(1) {
                                    checked += 1;
                                    if o.state != outcomes[0].state
                                        || o.observation != outcomes[0].observation
                                        || o.reward.to_bits() != outcomes[0].reward.to_bits()
                                        || o.done != outcomes[0].done
                                    {
                                        mismatches += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    verdict(8, mismatches == 0 && checked > 0, format!("{checked} shared-action comparisons, {mismatches} mismatches"), started);
}

#[test]
fn criterion_09_reproducibility() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{
  "method": "aacl",
  "seeds": [7],
  "sequence": {"width": 5, "height": 5, "steps_per_task": [4000]},
  "eval": {"interval": 2000, "episodes": 3, "probe_transitions": 0},
  "aacl": {"exploration_steps": 1000},
  "repr": {"epochs": 2},
  "snapshots": false
}
"#,
    )
    .unwrap();
    let mut csvs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        let status = Command::new(env!("CARGO_BIN_EXE_cldc"))
            .args(["run", "--config"])
            .arg(&cfg_path)
            .env("CLDC_OUT", &out)
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success());
        csvs.push(std::fs::read(out.join("aacl_expansion_oriented/perf_seed7.csv")).unwrap());
    }
    let same = csvs[0] == csvs[1];
    let rows = String::from_utf8_lossy(&csvs[0]).lines().count() - 1;
    verdict(9, same && rows > 0, format!("perf CSVs bit-identical: {same} ({rows} rows)"), started);
}

#[test]
fn criterion_10_baseline_sanity() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for (method, name) in [(Method::Ft, "ft"), (Method::Ewc, "ewc0")] {
        let mut cfg = RunConfig {
            method,
            seeds: vec![3],
            output_dir: dir.path().display().to_string(),
            name: Some(name.into()),
            ..RunConfig::default()
        };
        cfg.sequence.width = 5;
        cfg.sequence.height = 5;
        cfg.sequence.steps_per_task = vec![6000];
        cfg.eval.interval = 3000;
        cfg.eval.episodes = 3;
        cfg.a2c.log_every = 1;
        cfg.baseline.ewc_lambda = 0.0;
        harness::run(&cfg.resolved(), 1).unwrap();
        let text = std::fs::read_to_string(dir.path().join(name).join("log_seed3.jsonl")).unwrap();
        logs.push(text.lines().skip(1).map(str::to_string).collect::<Vec<_>>());
    }
    let logs_equal = logs[0] == logs[1] && !logs[0].is_empty();

    let (capacity, n, trials) = (10usize, 50usize, 10_000u64);
    let mut counts = vec![0usize; n];
    for trial in 0..trials {
        let mut r = rng::substream(10, "acc-reservoir", trial);
        let mut res = Reservoir::new(capacity);
        for i in 0..n {
            res.insert(i, &mut r);
        }
        for &i in &res.items {
            counts[i] += 1;
        }
    }
    let target = capacity as f64 / n as f64;
    let worst = counts.iter().map(|&c| (c as f64 / trials as f64 - target).abs()).fold(0.0, f64::max);
    let ok = logs_equal && worst <= 0.02;
    verdict(
        10,
        ok,
        format!("EWC(λ=0) log == FT log: {logs_equal} ({} records); reservoir max |freq − C/n| {worst:.4}", logs[0].len()),
        started,
    );
}
