use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhpo_core::envs::{EnvSpec, Pile1Config, Pile1Task, PointMassConfig};
use rhpo_core::policy::{InitScheme, Policy, PolicyKind};
use rhpo_core::replay::TrajectoryStep;
use rhpo_runtime::ablation::{grid, AblationKind};
use rhpo_runtime::actor::Actor;
use rhpo_runtime::analysis::{analyze_similarity, gaussian_bhattacharyya, ComponentUsage};
use rhpo_runtime::checkpoint::{load_run, save_run};
use rhpo_runtime::config::{Algorithm, ExecutionMode, ExperimentConfig, NetworkConfig, TransferMode};
use rhpo_runtime::curves::emit_curves;
use rhpo_runtime::metrics::{read_metrics, MetricsRecord, RecordKind};
use rhpo_runtime::train::{build_learner, run_learner};
use rhpo_core::distributions::{DiagGaussian, PROB_FLOOR};

fn tiny(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        num_actors: 1,
        learner_steps: 6,
        target_period: 2,
        action_samples: 3,
        batch_size: 4,
        snippet_length: 5,
        schedule_period: 10,
        env: EnvSpec::Pile1(Pile1Config { episode_length: 12, ..Pile1Config::default() }),
        network: NetworkConfig {
            policy_torso: Some(vec![8]),
            policy_head: Some(vec![4]),
            critic_torso: Some(vec![8]),
            critic_head: Some(vec![4]),
            layer_norm_tanh: true,
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn defaults_follow_the_tables() {
    let c = ExperimentConfig::default();
    assert_eq!((c.num_actors, c.target_period, c.action_samples, c.batch_size, c.snippet_length), (5, 500, 20, 512, 10));
    assert_eq!((c.epsilon, c.eps_mean, c.eps_cov, c.eps_cat), (0.1, 5e-4, 1e-5, 1e-4));
    assert_eq!((c.gamma, c.learning_rate), (0.99, 2e-4));
    assert_eq!(c.components_or_default(), 7);
    assert_eq!(c.replay_transitions(), 7_000_000);
    let pc = c.policy_config();
    assert_eq!((pc.torso.clone(), pc.head_hidden.clone()), (vec![400, 200], vec![100]));
    let cc = c.critic_config();
    assert_eq!((cc.torso.clone(), cc.head_hidden.clone()), (vec![400, 400], vec![300]));

    let s = ExperimentConfig::single_task();
    assert_eq!((s.action_samples, s.target_period, s.batch_size, s.components), (10, 250, 256, Some(3)));
    assert_eq!(s.replay_transitions(), 2_000_000);

    let mono = ExperimentConfig { algorithm: Algorithm::SacuMonolithic, ..ExperimentConfig::default() };
    assert_eq!(mono.policy_config().head_hidden, vec![200]);
    assert_eq!(mono.policy_config().components, 1);
}

#[test]
fn config_round_trips() {
    let mut c = tiny(3);
    c.algorithm = Algorithm::RhpoSvg;
    c.init = InitScheme::DistinctMeans;
    c.components = Some(4);
    c.run.eval_tasks = Some(vec![1, 6]);
    c.run.max_episodes = Some(17);
    let text = c.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);

    let s = ExperimentConfig::single_task();
    assert_eq!(ExperimentConfig::from_toml(&s.to_toml().unwrap()).unwrap(), s);
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
}

#[test]
fn shipped_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let c = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
            n += 1;
        }
    }
    assert!(n >= 5);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(ExperimentConfig::from_toml("no_such_field = 1").is_err());
    assert!(ExperimentConfig::from_toml("num_actors = 0").is_err());
    assert!(ExperimentConfig::from_toml("eps_cat = -1.0").is_err());
    assert!(ExperimentConfig::from_toml("transfer = \"sequential_only_hl\"").is_err());
    let mono_transfer = "algorithm = \"sacu_monolithic\"\ntransfer = \"sequential\"\npretrained = \"x.ckpt\"";
    assert!(ExperimentConfig::from_toml(mono_transfer).is_err());
}

#[test]
fn zero_steps_emit_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { learner_steps: 0, ..tiny(0) };
    let s = run_learner(&cfg, dir.path()).unwrap();
    assert_eq!(s.checkpoints.len(), 1);
    assert!(s.checkpoints[0].ends_with("step_000000000.ckpt"));
    assert_eq!(std::fs::read_dir(dir.path().join("checkpoints")).unwrap().count(), 1);
    assert_eq!((s.learner_steps, s.target_copies), (0, 0));
    assert_eq!(ExperimentConfig::load(&dir.path().join("config.toml")).unwrap(), cfg);
}

#[test]
fn target_copies_follow_the_period() {
    for (steps, period) in [(7u64, 2u64), (6, 3), (5, 7)] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig { learner_steps: steps, target_period: period, ..tiny(1) };
        cfg.run.checkpoint_every = 3;
        let s = run_learner(&cfg, dir.path()).unwrap();
        assert_eq!(s.learner_steps, steps);
        assert_eq!(s.target_copies, steps / period);
        let expected: Vec<u64> = (0..=steps).filter(|k| k % 3 == 0).chain((steps % 3 != 0).then_some(steps)).collect();
        let got: Vec<u64> = s
            .checkpoints
            .iter()
            .map(|p| p.file_stem().unwrap().to_str().unwrap().trim_start_matches("step_").parse().unwrap())
            .collect();
        assert_eq!(got, expected);
    }
}

#[test]
fn deterministic_mode_is_bitwise_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = tiny(11);
    cfg.run.eval_every = 2;
    let sa = run_learner(&cfg, a.path()).unwrap();
    let sb = run_learner(&cfg, b.path()).unwrap();
    for (x, y) in sa.checkpoints.iter().zip(&sb.checkpoints) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    assert_eq!(
        std::fs::read(a.path().join("metrics.jsonl")).unwrap(),
        std::fs::read(b.path().join("metrics.jsonl")).unwrap()
    );

    let c = tempfile::tempdir().unwrap();
    let sc = run_learner(&ExperimentConfig { seed: 12, ..cfg }, c.path()).unwrap();
    assert_ne!(std::fs::read(sa.checkpoints.last().unwrap()).unwrap(), std::fs::read(sc.checkpoints.last().unwrap()).unwrap());
}

#[test]
fn metrics_are_append_only_and_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig { learner_steps: 8, ..tiny(2) };
    cfg.num_actors = 2;
    cfg.run.eval_every = 3;
    let s = run_learner(&cfg, dir.path()).unwrap();
    let on_disk = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(on_disk, s.records);
    for w in on_disk.windows(2) {
        assert!(w[1].learner_step >= w[0].learner_step);
        assert!(w[1].actor_episodes >= w[0].actor_episodes);
    }
    let episodes = on_disk.iter().filter(|r| r.kind == RecordKind::Episode).count() as u64;
    assert_eq!(episodes, s.actor_episodes);
    assert!(on_disk.iter().filter(|r| r.kind == RecordKind::Episode).all(|r| r.task_returns.iter().all(Option::is_some)));
    assert!(on_disk.iter().any(|r| r.kind == RecordKind::Eval));
    assert!(on_disk.iter().filter_map(|r| r.diagnostics.as_ref()).map(|d| d.steps).sum::<u64>() <= s.learner_steps);
}

#[test]
fn checkpoint_restores_the_learner() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(4);
    let s = run_learner(&cfg, dir.path()).unwrap();
    let path = dir.path().join("again.ckpt");
    save_run(&path, &s.learner, &cfg, s.actor_episodes).unwrap();
    let back = load_run(&path).unwrap();
    assert_eq!(back.meta.learner_steps, s.learner_steps);
    assert_eq!(back.meta.target_copies, s.target_copies);
    assert_eq!(back.meta.config, cfg);
    let obs = vec![0.01; 14];
    for task in 0..7 {
        assert_eq!(back.learner.policy.distribution(&obs, task).unwrap(), s.learner.policy.distribution(&obs, task).unwrap());
        assert_eq!(
            back.learner.target_policy.distribution(&obs, task).unwrap(),
            s.learner.target_policy.distribution(&obs, task).unwrap()
        );
        let a = [0.1, -0.2, 0.3];
        assert_eq!(
            back.learner.critic.q_value(&obs, &a, task, true).unwrap(),
            s.learner.critic.q_value(&obs, &a, task, true).unwrap()
        );
    }
    assert_eq!(back.learner.duals.eta(), s.learner.duals.eta());
    assert_eq!(back.learner.steps(), s.learner.steps());
}

#[test]
fn recorded_behavior_log_probs_match_the_snapshot() {
    let cfg = tiny(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let policy = Policy::new(cfg.policy_config(), &mut rng).unwrap();
    let mut actor = Actor::new(0, &cfg.env, cfg.schedule_period, cfg.seed);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..3 {
        let report = actor.run_episode(&policy).unwrap();
        assert_eq!(report.episode.steps.len(), 12);
        for TrajectoryStep { state, action, rewards, behavior_log_prob, executed_task } in &report.episode.steps {
            assert_eq!(rewards.len(), 7);
            let lp = policy.distribution(state, *executed_task).unwrap().log_prob(action).unwrap();
            assert!((lp - behavior_log_prob).abs() <= 1e-12 * lp.abs().max(1.0));
            assert!(action.iter().all(|a| (-1.0..=1.0).contains(a)));
            seen.insert(*executed_task);
        }
        let summed: Vec<f64> = (0..7).map(|k| report.episode.steps.iter().map(|s| s.rewards[k]).sum()).collect();
        assert_eq!(summed, report.returns);
    }
    // Period 10 over 12 steps: two draws per episode.
    assert!(!seen.is_empty());
}

#[test]
fn one_actor_episode_stream_is_reproducible() {
    let cfg = tiny(6);
    let policy = Policy::new(cfg.policy_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let run = || {
        let mut actor = Actor::new(0, &cfg.env, cfg.schedule_period, cfg.seed);
        (0..3).map(|_| actor.run_episode(&policy).unwrap().episode).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn asynchronous_mode_loses_no_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig { learner_steps: 10, num_actors: 3, ..tiny(7) };
    cfg.run.mode = ExecutionMode::Asynchronous;
    let s = run_learner(&cfg, dir.path()).unwrap();
    assert_eq!(s.learner_steps, 10);
    assert!(s.actor_episodes >= 1);
    assert_eq!(s.replay_episodes, s.actor_episodes);
    let episodes = s.records.iter().filter(|r| r.kind == RecordKind::Episode).count() as u64;
    assert_eq!(episodes, s.actor_episodes);
}

#[test]
fn asynchronous_mode_honours_the_episode_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig { learner_steps: 1_000_000_000, num_actors: 2, ..tiny(8) };
    cfg.run.mode = ExecutionMode::Asynchronous;
    cfg.run.max_episodes = Some(6);
    let s = run_learner(&cfg, dir.path()).unwrap();
    assert_eq!(s.actor_episodes, 6);
    assert_eq!(s.replay_episodes, s.actor_episodes);
}

#[test]
fn only_hl_transfer_trains_fewer_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let six: Vec<Pile1Task> = Pile1Task::LADDER[..6].to_vec();
    let pre_cfg = ExperimentConfig {
        components: Some(7),
        env: EnvSpec::Pile1(Pile1Config { tasks: six, episode_length: 12, ..Pile1Config::default() }),
        ..tiny(9)
    };
    let pre = run_learner(&pre_cfg, &dir.path().join("pre")).unwrap();
    let ckpt = pre.checkpoints.last().unwrap().clone();

    let last = EnvSpec::Pile1(Pile1Config { tasks: vec![Pile1Task::StackAndLeave], episode_length: 12, ..Pile1Config::default() });
    let base = ExperimentConfig { components: Some(7), env: last, ..tiny(10) };
    let trainable = |c: &ExperimentConfig| {
        let l = build_learner(c).unwrap();
        l.policy.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum::<usize>()
    };
    let scratch = trainable(&base);
    let only_hl = ExperimentConfig { transfer: TransferMode::SequentialOnlyHl, pretrained: Some(ckpt.clone()), ..base.clone() };
    let seq = ExperimentConfig { transfer: TransferMode::Sequential, pretrained: Some(ckpt.clone()), ..base.clone() };
    let (n_hl, n_seq) = (trainable(&only_hl), trainable(&seq));
    assert!(n_hl < scratch, "{n_hl} vs {scratch}");
    assert!(n_hl < n_seq && n_seq < scratch);

    // The transferred components are the pretrained ones.
    let l = build_learner(&only_hl).unwrap();
    assert_eq!(l.policy.num_tasks(), 1);
    assert_eq!(l.policy.num_components(), 7);
    let obs = vec![0.02; 14];
    let new = l.policy.distribution(&obs, 0).unwrap();
    let old = pre.learner.policy.distribution(&obs, 0).unwrap();
    assert_eq!(new.components, old.components);
    assert_eq!(build_learner(&seq).unwrap().policy.num_components(), 8);

    let out = run_learner(&only_hl, &dir.path().join("hl")).unwrap();
    let after = out.learner.policy.distribution(&obs, 0).unwrap();
    assert_eq!(after.components, old.components);
}

#[test]
fn similarity_of_one_task_and_component_is_zero() {
    let r = analyze_similarity(&ComponentUsage { counts: vec![vec![5]] }).unwrap();
    assert_eq!(r.task_distance, vec![vec![0.0]]);
    assert_eq!(r.component_distance, vec![vec![0.0]]);
}

#[test]
fn disjoint_tasks_are_at_the_capped_maximum() {
    let usage = ComponentUsage { counts: vec![vec![10, 0, 0], vec![0, 4, 6]] };
    let r = analyze_similarity(&usage).unwrap();
    let cap = -(3.0 * PROB_FLOOR).ln();
    assert!((r.task_distance[0][1] - cap).abs() < 1e-12);
    // Components 1 and 2 are both used only by task 1.
    assert!(r.component_distance[1][2].abs() < 1e-12);
    assert!((r.component_distance[0][1] - -(2.0 * PROB_FLOOR).ln()).abs() < 1e-12);
}

#[test]
fn unused_components_are_maximally_distant() {
    let usage = ComponentUsage { counts: vec![vec![3, 0], vec![5, 0]] };
    let r = analyze_similarity(&usage).unwrap();
    assert_eq!(r.component_to_task[1], vec![0.0, 0.0]);
    assert!((r.component_distance[0][1] - -(2.0 * PROB_FLOOR).ln()).abs() < 1e-12);
}

#[test]
fn similarity_matrices_are_symmetric_with_zero_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    use rand::Rng;
    for _ in 0..50 {
        let (t, m) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let counts = (0..t).map(|_| (0..m).map(|_| rng.gen_range(0..4u64)).collect()).collect();
        let r = analyze_similarity(&ComponentUsage { counts }).unwrap();
        for d in [&r.task_distance, &r.component_distance] {
            for i in 0..d.len() {
                assert_eq!(d[i][i], 0.0);
                for j in 0..d.len() {
                    assert_eq!(d[i][j], d[j][i]);
                    assert!(d[i][j] >= 0.0);
                }
            }
        }
    }
}

#[test]
fn gaussian_bhattacharyya_matches_known_values() {
    let a = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
    let b = DiagGaussian::new(vec![2.0], vec![1.0]).unwrap();
    assert!((gaussian_bhattacharyya(&a, &b) - 0.5).abs() < 1e-15);
    assert_eq!(gaussian_bhattacharyya(&a, &a), 0.0);
    // Equal means, variances 1 and 4: ½ ln(2.5/2).
    let c = DiagGaussian::new(vec![0.0], vec![2.0]).unwrap();
    assert!((gaussian_bhattacharyya(&a, &c) - 0.5 * (1.25f64).ln()).abs() < 1e-15);
}

fn record(kind: RecordKind, episodes: u64, v: f64) -> MetricsRecord {
    MetricsRecord { kind, wall_time: 0.0, learner_step: episodes, actor_episodes: episodes, task_returns: vec![Some(v), None], diagnostics: None }
}

#[test]
fn empty_metrics_give_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let names = vec!["a".to_string(), "b".to_string()];
    assert_eq!(emit_curves(dir.path(), &[], &names, 10).unwrap(), 0);
    assert_eq!(std::fs::read_to_string(dir.path().join("records.csv")).unwrap(), "run,kind,wall_time,learner_step,actor_episodes,a,b\n");
    assert_eq!(std::fs::read_to_string(dir.path().join("bands.csv")).unwrap(), "task,actor_episodes,mean,std,runs\n");
}

#[test]
fn csv_has_one_row_per_record_and_bands_are_one_std() {
    let dir = tempfile::tempdir().unwrap();
    let names = vec!["a".to_string(), "b".to_string()];
    let runs: Vec<Vec<MetricsRecord>> = [1.0, 2.0, 6.0]
        .iter()
        .map(|&v| vec![record(RecordKind::Episode, 1, 0.0), record(RecordKind::Eval, 10, v), record(RecordKind::Eval, 20, 2.0 * v)])
        .collect();
    assert_eq!(emit_curves(dir.path(), &runs, &names, 2).unwrap(), 9);
    let csv = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    assert!(csv.lines().nth(2).unwrap().ends_with(",1,")); // eval row of run 0, task b empty
    let bands = rhpo_runtime::curves::band(&runs, 0, 2);
    assert_eq!(bands.len(), 2);
    // Sample std of {1, 2, 6} is √7.
    assert!((bands[0].mean - 3.0).abs() < 1e-12 && (bands[0].std - 7f64.sqrt()).abs() < 1e-12);
    assert!((bands[1].mean - 6.0).abs() < 1e-12 && (bands[1].std - 2.0 * 7f64.sqrt()).abs() < 1e-12);
    assert_eq!(bands[1].runs, 3);
    assert!(dir.path().join("curve_a.svg").exists());
    assert!(rhpo_runtime::curves::band(&runs, 1, 2).is_empty());
}

#[test]
fn ablation_grids_vary_one_factor() {
    let base = ExperimentConfig::default();
    let kl: Vec<f64> = grid(AblationKind::KlSweep, &base).iter().map(|(_, c)| c.eps_cat).collect();
    assert_eq!(kl, vec![1e-6, 1e-4, 1e-2, 1.0]);
    let m: Vec<Option<usize>> = grid(AblationKind::ComponentCount, &base).iter().map(|(_, c)| c.components).collect();
    assert_eq!(m, vec![Some(2), Some(4), Some(8), Some(16)]);
    let n: Vec<usize> = grid(AblationKind::ActorCount, &base).iter().map(|(_, c)| c.num_actors).collect();
    assert_eq!(n, vec![1, 5, 20]);
    assert_eq!(grid(AblationKind::InitScheme, &base).len(), 2);
    for (_, c) in grid(AblationKind::KlSweep, &base) {
        assert_eq!(ExperimentConfig { eps_cat: base.eps_cat, ..c }, base);
    }
}

#[test]
fn ablation_writes_merged_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig {
        learner_steps: 2,
        env: EnvSpec::PointMass(PointMassConfig { episode_length: 8, ..PointMassConfig::default() }),
        ..tiny(0)
    };
    let runs = rhpo_runtime::ablation::run_ablation(AblationKind::InitScheme, &base, 2, dir.path()).unwrap();
    assert_eq!(runs.len(), 4);
    assert_eq!(runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1, 0, 1]);
    let merged = std::fs::read_to_string(dir.path().join("merged.jsonl")).unwrap();
    assert_eq!(merged.lines().count(), runs.iter().map(|r| r.summary.records.len()).sum::<usize>());
    assert!(dir.path().join("distinct_means/seed_1/metrics.jsonl").exists());
}

#[test]
fn policy_kinds_follow_the_algorithm() {
    for (alg, kind) in [
        (Algorithm::Rhpo, PolicyKind::Hierarchical),
        (Algorithm::RhpoSvg, PolicyKind::Hierarchical),
        (Algorithm::SacuMonolithic, PolicyKind::Monolithic),
        (Algorithm::SacuIndependent, PolicyKind::Independent),
        (Algorithm::SacuSvg, PolicyKind::Independent),
    ] {
        let cfg = ExperimentConfig { algorithm: alg, ..tiny(0) };
        assert_eq!(build_learner(&cfg).unwrap().policy.config().kind, kind);
        let dir = tempfile::tempdir().unwrap();
        run_learner(&ExperimentConfig { learner_steps: 2, ..cfg }, dir.path()).unwrap();
    }
}
