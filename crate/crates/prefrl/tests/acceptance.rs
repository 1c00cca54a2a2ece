//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. `ACCEPTANCE_ONLY=1,4` restricts the run.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use prefrl::config::{ExperimentConfig, Method};
use prefrl::harness::{load_traces, run_experiment, run_lagrange_sweep, OracleHandle, RunManifest, RunOptions};
use prefrl::runner::ThreadedRunner;
use prefrl_core::gridworld::{rollout, EnvConfig, Outcome, RandomPolicy};
use prefrl_core::interpreter::TrajectorySummary;
use prefrl_core::nn::Input;
use prefrl_core::oracle::{build_prompt, parse_answer, PreferenceLabel};
use prefrl_core::policy::{
    ppo_objective, run_episode, MetricsTrace, ObservationEncoder, PolicyParameters, PpoConfig, RolloutBatch,
};
use prefrl_core::reward_model::{
    cross_entropy, fit, gradient, loss, pref_probability, ranking_accuracy, triple_loss, PreparedTriple, RewardPredictor,
    TrainConfig,
};
use prefrl_core::sampler::{scripted_dataset, TrajectorySampler};
use prefrl_core::{seed, TaskId};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn preset(text: &str, dir: &Path) -> ExperimentConfig {
    let mut config = ExperimentConfig::from_toml_str(text).expect("preset parses");
    config.output_dir = dir.to_path_buf();
    config
}

const UNLOCK: &str = include_str!("../../../configs/unlock.toml");
const LAVAGAP: &str = include_str!("../../../configs/lavagap.toml");
const CONSTRAINED: &str = include_str!("../../../configs/unlock_constrained.toml");

fn run_preset(config: &ExperimentConfig) -> Vec<(Method, u64, MetricsTrace)> {
    let manifest: RunManifest =
        run_experiment(config, &mut OracleHandle::Scripted, &ThreadedRunner::new(config.workers), RunOptions::default())
            .expect("pipeline runs");
    load_traces(&config.output_dir, &manifest).expect("metrics load")
}

fn trace_of(runs: &[(Method, u64, MetricsTrace)], method: Method, seed: u64) -> &MetricsTrace {
    &runs.iter().find(|(m, s, _)| *m == method && *s == seed).expect("run exists").2
}

fn criterion_1() -> Verdict {
    let mut rng = seed::rng(1);
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for task in [TaskId::Unlock, TaskId::LavaGapS7] {
        let base = EnvConfig::new(task).max_steps;
        let (mut found, mut episodes) = (0, 0u64);
        while found < 1000 && episodes < 2_000_000 {
            let max_steps = rng.random_range(base..=3 * base);
            let env = EnvConfig::new(task).with_max_steps(max_steps);
            let t = rollout(&RandomPolicy, &env, rng.random()).expect("rollout");
            episodes += 1;
            if t.outcome != Outcome::Success {
                continue;
            }
            found += 1;
            let expected = 1.0 - 0.9 * t.len() as f64 / f64::from(max_steps);
            worst = worst.max((t.env_reward() - expected).abs());
            if t.results[..t.len() - 1].iter().any(|r| r.env_reward != 0.0) {
                worst = f64::INFINITY;
            }
        }
        if found < 1000 {
            return verdict(false, format!("{task}: only {found} successes in {episodes} episodes"));
        }
        notes.push(format!("{task} 1000 successes from {episodes} random episodes"));
    }
    verdict(worst <= 1e-12, format!("{}; max |error| {worst:e}", notes.join(", ")))
}

fn criterion_2() -> Verdict {
    let mut rng = seed::rng(2);
    let (mut sym, mut shift, mut half) = (0.0f64, 0.0f64, true);
    for _ in 0..10_000 {
        let (a, b) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        sym = sym.max((pref_probability(a, b) + pref_probability(b, a) - 1.0).abs());
        half &= pref_probability(a, a) == 0.5;
        // Dyadic rewards and offsets keep the shifted sums exact.
        let d = |rng: &mut seed::Rng| f64::from(rng.random_range(-3072i32..=3072)) / 1024.0;
        let (x, y, c) = (d(&mut rng), d(&mut rng), d(&mut rng));
        for mu in [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]] {
            shift = shift.max((cross_entropy(x + c, y + c, mu) - cross_entropy(x, y, mu)).abs());
        }
    }
    let at_symmetric = cross_entropy(0.7, 0.7, [1.0, 0.0]);
    let total = triple_loss(0.0, 0.0, [1.0, 0.0], 0.0);
    let pass = sym <= 1e-12 && half && shift == 0.0 && (at_symmetric - 0.693147).abs() <= 1e-6 && (total - 0.693147).abs() <= 1e-6;
    verdict(
        pass,
        format!("symmetry error {sym:e}, equal rewards give 0.5: {half}, shift error {shift:e}, loss at symmetric point {at_symmetric:.9}"),
    )
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

fn reward_model_gradients(rng: &mut seed::Rng) -> f64 {
    let mut worst: f64 = 0.0;
    let labels = [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
    for trial in 0..50 {
        let task = if trial % 2 == 0 { TaskId::Unlock } else { TaskId::LavaGapS7 };
        let dim = TrajectorySummary::feature_dim(task);
        let model = RewardPredictor::new(task, 8, rng.random_range(0.0..0.1), trial);
        let batch: Vec<PreparedTriple> = (0..rng.random_range(1..8))
            .map(|_| PreparedTriple {
                features_a: (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
                features_b: (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
                mu: labels[rng.random_range(0..3)],
            })
            .collect();
        let analytic = gradient(&model, &batch);
        let h = 1e-5;
        for k in 0..analytic.len() {
            let (mut plus, mut minus) = (model.clone(), model.clone());
            plus.params_mut()[k] += h;
            minus.params_mut()[k] -= h;
            let numeric = (loss(&plus, &batch) - loss(&minus, &batch)) / (2.0 * h);
            worst = worst.max(rel_error(analytic[k], numeric));
        }
    }
    worst
}

/// Distance of the closest probability ratio to a clip boundary.
fn clip_margin(params: &PolicyParameters, batch: &RolloutBatch, eps: f64) -> f64 {
    (0..batch.len())
        .map(|i| {
            let logits = params.actor.predict(Input::OneHot(batch.input(i)));
            let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
            let r = (logits[batch.actions[i] as usize] - lse - batch.old_log_probs[i]).exp();
            (r - (1.0 - eps)).abs().min((r - (1.0 + eps)).abs())
        })
        .fold(f64::INFINITY, f64::min)
}

fn actor_critic_gradients(rng: &mut seed::Rng) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let (mut done, mut skipped, mut trial) = (0, 0, 0u64);
    let config = PpoConfig { entropy_coef: 0.05, ..PpoConfig::default() };
    while done < 50 {
        trial += 1;
        let task = if trial % 2 == 0 { TaskId::Unlock } else { TaskId::LavaGapS7 };
        let env = EnvConfig::new(task).with_max_steps(rng.random_range(4..12));
        let mut params = PolicyParameters::new(ObservationEncoder { drop_counter: task == TaskId::Unlock }, 5, trial);
        let episodes: Vec<_> = (0..rng.random_range(1..4)).map(|_| run_episode(&params, &env, rng.random()).unwrap()).collect();
        let rewards: Vec<f64> = episodes.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = RolloutBatch::from_episodes(&episodes, &rewards, 0.99, 0.95);
        for p in params.actor.params_mut().iter_mut().chain(params.critic.params_mut()) {
            *p += rng.random_range(-0.2..0.2);
        }
        if clip_margin(&params, &batch, config.clip_epsilon) < 1e-3 {
            skipped += 1;
            continue;
        }
        let idx: Vec<usize> = (0..batch.len()).collect();
        let objective = |p: &PolicyParameters| {
            let (mut ga, mut gc) = (p.actor.zero_grad(), p.critic.zero_grad());
            ppo_objective(p, &batch, &idx, &config, &mut ga, &mut gc).total(&config)
        };
        let (mut ga, mut gc) = (params.actor.zero_grad(), params.critic.zero_grad());
        ppo_objective(&params, &batch, &idx, &config, &mut ga, &mut gc);
        let h = 1e-6;
        for k in 0..ga.len() + gc.len() {
            let (mut plus, mut minus) = (params.clone(), params.clone());
            let analytic = if k < ga.len() {
                plus.actor.params_mut()[k] += h;
                minus.actor.params_mut()[k] -= h;
                ga[k]
            } else {
                plus.critic.params_mut()[k - ga.len()] += h;
                minus.critic.params_mut()[k - ga.len()] -= h;
                gc[k - ga.len()]
            };
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            worst = worst.max(rel_error(analytic, numeric));
        }
        done += 1;
    }
    (worst, skipped)
}

fn criterion_3() -> Verdict {
    let mut rng = seed::rng(3);
    let rm = reward_model_gradients(&mut rng);
    let (ac, skipped) = actor_critic_gradients(&mut rng);
    verdict(
        rm <= 1e-4 && ac <= 1e-4,
        format!("max relative error: reward model {rm:.2e}, actor-critic {ac:.2e} (50 batches each, {skipped} batches next to a clip kink redrawn)"),
    )
}

fn criterion_4() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = preset(UNLOCK, dir.path());
    let runner = ThreadedRunner::new(config.workers);
    let sampler = TrajectorySampler::build(config.env(), &config.sampler.mix, &config.sampler_ppo(), config.data_seed, &runner)
        .expect("sampler");
    let train = scripted_dataset(&sampler, None, 500, config.data_seed).unwrap();
    let held_out = scripted_dataset(&sampler, None, 500, config.data_seed + 1).unwrap();
    let model = fit(&train, &TrainConfig::default()).unwrap().model;
    let (hc, ht) = ranking_accuracy(&model, &held_out.triples);
    let (tc, tt) = ranking_accuracy(&model, &train.triples);
    let (h, t) = (hc as f64 / ht as f64, tc as f64 / tt as f64);
    verdict(
        h >= 0.95 && t >= 0.90,
        format!("held-out ranking accuracy {hc}/{ht} = {h:.3}, training pairs ordered correctly {tc}/{tt} = {t:.3}"),
    )
}

fn criterion_5() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = preset(UNLOCK, dir.path());
    let runs = run_preset(&config);
    let mut holds = 0;
    let mut notes = Vec::new();
    for &s in &config.seeds {
        let pred = trace_of(&runs, Method::Predictor, s);
        let orig = trace_of(&runs, Method::Original, s);
        match pred.first_reaching(0.9).filter(|r| r.env_steps <= 100_000) {
            Some(row) => {
                let other = orig.at(row.env_steps).expect("shared grid").success_rate;
                let ok = other <= row.success_rate - 0.2;
                holds += usize::from(ok);
                notes.push(format!(
                    "seed {s}: predictor {:.2} at {} steps, original {other:.2}{}",
                    row.success_rate,
                    row.env_steps,
                    if ok { "" } else { " (gap < 0.2)" }
                ));
            }
            None => notes.push(format!("seed {s}: predictor never reached 0.9 within 100k steps")),
        }
    }
    verdict(holds >= 2, format!("ordering holds on {holds}/3 seeds; {}", notes.join("; ")))
}

fn criterion_6() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut config = preset(CONSTRAINED, dir.path());
    config.methods = vec![Method::Predictor];
    let runs = run_preset(&config);
    let multipliers = [0.0, 0.01, 0.1, 1.0];
    let sweep = run_lagrange_sweep(&config, &multipliers, &ThreadedRunner::new(config.workers)).expect("sweep runs");
    // The best multiplier is the one with the lowest final cost over seeds.
    let mean_cost = |m: f64| {
        let costs: Vec<f64> = sweep.iter().filter(|(r, _)| r.multiplier == m).map(|(r, _)| r.cost_mean).collect();
        costs.iter().sum::<f64>() / costs.len() as f64
    };
    let best = multipliers.into_iter().min_by(|a, b| mean_cost(*a).total_cmp(&mean_cost(*b))).unwrap();
    let sweep_note: Vec<String> = multipliers.iter().map(|&m| format!("{m}: {:.2}", mean_cost(m))).collect();
    let mut holds = 0;
    let mut notes = Vec::new();
    for &s in &config.seeds {
        let last = *trace_of(&runs, Method::Predictor, s).last().unwrap();
        let (dev, cost) = (last.deviation_mean.unwrap(), last.cost_mean.unwrap());
        let lagrange = sweep.iter().find(|(r, _)| r.multiplier == best && r.seed == s).unwrap().0.cost_mean;
        let ok = dev <= 1.0 && last.success_rate >= 0.8 && lagrange >= cost;
        holds += usize::from(ok);
        notes.push(format!(
            "seed {s}: predictor success {:.2}, mean |drops-3| {dev:.2}, cost {cost:.2} vs lagrange {lagrange:.2}",
            last.success_rate
        ));
    }
    verdict(
        holds >= 2,
        format!(
            "holds on {holds}/3 seeds; best multiplier {best} (mean final cost by multiplier {}); {}",
            sweep_note.join(", "),
            notes.join("; ")
        ),
    )
}

fn criterion_7() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = preset(LAVAGAP, dir.path());
    let runs = run_preset(&config);
    let mut holds = 0;
    let mut notes = Vec::new();
    for &s in &config.seeds {
        let pred = trace_of(&runs, Method::Predictor, s).at(150_000).unwrap().success_rate;
        let orig = trace_of(&runs, Method::Original, s).at(150_000).unwrap().success_rate;
        holds += usize::from(pred > orig);
        notes.push(format!("seed {s}: predictor {pred:.2} vs original {orig:.2}"));
    }
    verdict(holds >= 2, format!("predictor ahead at 150k steps on {holds}/3 seeds; {}", notes.join("; ")))
}

const UNLOCK_TEMPLATE: &str = "In a 2 grid world, there is a key and a gate. The agent needs to first get the key and then it can reach the gate and exit. \n\nWe hope that the agent can get the key and reach the gate successfully in the least steps. \n\nhere are two trajectories of the agent. Please choose the better one.\n\n0.{A}\n\n1.{B}\n\nplease give me which one is better or they are equal.\n\nif the first one is better, you should return 0. otherwise, you should return 1. if they are equal, you should return 2.\n\nYour answer should be structured as follows:\n\nanswer:<your answer(a number)>";

const LAVA_TEMPLATE: &str = "In a two-dimensional world, there exists a green exit and a lava strip. The agent is required to first cross the lava strip and then exit through the green exit.\n\nWe desire that the agent accomplish this by taking as few steps as possible while avoiding falling into the lava, as doing so would result in its demise.\n\nhere are two trajectories of the agent. Please choose the better one.\n\n0. {A}\n\n1. {B}\n\nplease give me which one is better or they are equal.\n\nif the first one is better, you should return 0. otherwise, you should return 1. if they are equal, you should return 2.\n\nYour answer should be structured as follows:\n\nanswer:<your answer(a number)>";

const FILLER: &[&str] = &[
    "Let me think.",
    "Trajectory 0 took fewer steps.",
    "The second agent dropped the key 4 times",
    "so",
    "I will give my answer below.",
    "Both reached the gate after 120 steps.",
    "",
    "\n",
    "Final decision:",
    "**Reasoning**: the first one is faster, 2 vs 1 keys.",
];

fn decorate(digit: u8, rng: &mut seed::Rng) -> String {
    let keyword = ["answer", "Answer", "ANSWER", "final answer", "The answer"][rng.random_range(0..5)];
    let form = match rng.random_range(0..9) {
        0 => format!("{keyword}:{digit}"),
        1 => format!("{keyword}: {digit}"),
        2 => format!("{keyword} : {digit}."),
        3 => format!("**{keyword}:** {digit}"),
        4 => format!("{keyword} is {digit}"),
        5 => format!("{keyword}: <{digit}>"),
        6 => format!("{keyword} = {digit}"),
        7 => format!("`{keyword}: {digit}`"),
        _ => format!("{keyword}:\t\"{digit}\""),
    };
    let mut parts: Vec<String> = (0..rng.random_range(0..4)).map(|_| FILLER[rng.random_range(0..FILLER.len())].to_owned()).collect();
    parts.push(form);
    parts.extend((0..rng.random_range(0..3)).map(|_| FILLER[rng.random_range(0..FILLER.len())].to_owned()));
    parts.join(if rng.random() { " " } else { "\n" })
}

fn criterion_8() -> Verdict {
    let mut rng = seed::rng(8);
    let mut recovered = 0;
    for i in 0..1000 {
        let digit = (i % 3) as u8;
        let text = decorate(digit, &mut rng);
        if parse_answer(&text).ok() == PreferenceLabel::from_answer_digit(digit) {
            recovered += 1;
        }
    }
    let mut flagged = 0;
    for _ in 0..1000 {
        let text: Vec<&str> = (0..rng.random_range(1..6)).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect();
        let text = text.join(" ").replace("answer", "reply");
        flagged += usize::from(parse_answer(&text).is_err());
    }
    let (a, b) = ("{A}", "{B}");
    let unlock = build_prompt(TaskId::Unlock, None, a, b).full_text() == UNLOCK_TEMPLATE;
    let lava = build_prompt(TaskId::LavaGapS7, None, a, b).full_text() == LAVA_TEMPLATE;
    verdict(
        recovered == 1000 && flagged == 1000 && unlock && lava,
        format!("decorated answers recovered {recovered}/1000, answer-free flagged {flagged}/1000, templates match: unlock {unlock}, lavagap {lava}"),
    )
}

fn criterion_9() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut config = preset(UNLOCK, a.path());
    config.methods = vec![Method::Predictor, Method::Original, Method::Shaped, Method::Random];
    config.seeds = vec![0, 1];
    config.pairs = 200;
    config.ppo.total_env_steps = 10_000;
    let first = run_preset(&config);
    config.output_dir = b.path().to_path_buf();
    run_preset(&config);
    let files: Vec<_> = first.iter().map(|(m, s, _)| prefrl::harness::metrics_file(*m, *s)).collect();
    let same = files.iter().filter(|f| std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap()).count();
    verdict(same == files.len(), format!("{same}/{} metrics CSVs byte-identical across two runs", files.len()))
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "success reward formula", criterion_1),
        (2, "preference probability identities", criterion_2),
        (3, "analytic gradients", criterion_3),
        (4, "reward model fidelity", criterion_4),
        (5, "unlock convergence ordering", criterion_5),
        (6, "constrained unlock", criterion_6),
        (7, "lavagap ordering", criterion_7),
        (8, "answer parsing and prompt templates", criterion_8),
        (9, "pipeline determinism", criterion_9),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        failed += usize::from(!v.pass);
        println!(
            "criterion {n} {}: {name}: {} [{:.0}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
