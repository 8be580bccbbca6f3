mod common;

use common::{rng, uniform};
use physgan::discriminator::{discriminate, embed, DiscriminatorConfig, DiscriminatorParams};
use physgan::dynsim::{make_dataset, Dataset, ExcitationFamily, SimConfig, Split};
use physgan::generator::{
    generate, mc_rollout, mle_pretrain, GenOutput, GeneratorConfig, GeneratorParams, MleConfig,
};
use physgan::io::dataset_hash;
use physgan::metrics::quality;
use physgan::nn::{ParamSet, Tensor};
use physgan::physics::PhysicsParams;
use physgan::rng::{derive_seed, stream};
use physgan::training::{
    action_value, adversarial_train, collapse_comparison, evaluate_generator, evaluation_report,
    examples_for, expected_reward, lowshot_sweep, policy_gradient_step, restrict_train,
    BaselineTracker, PgSettings, RewardMode, RewardModel, RunOptions, TrainConfig,
};

fn tiny_gen_cfg() -> GeneratorConfig {
    GeneratorConfig {
        filters: 4,
        hidden: 6,
        ..GeneratorConfig::default()
    }
}

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 2,
        n_mc: 2,
        d_batch: 4,
        d_epochs: 2,
        d_pretrain_epochs: 5,
        aux_epochs: 10,
        metric_every: 2,
        checkpoint_every: 2,
        plateau_patience: 0,
        mle: MleConfig {
            epochs: 5,
            ..MleConfig::default()
        },
        generator: tiny_gen_cfg(),
        discriminator: DiscriminatorConfig {
            widths: vec![2, 4],
            kernels_per_bank: 3,
            gate_bias: -1.0,
        },
        ..TrainConfig::default()
    }
}

fn small_dataset(n: usize) -> Dataset<f64> {
    make_dataset(n, &SimConfig::knee(), ExcitationFamily::Mixed, 5).unwrap()
}

fn zero_head(p: &mut DiscriminatorParams<f64>) {
    p.head_w.fill(0.0);
    p.head_b.fill(0.0);
}

fn toy_gen() -> (GeneratorParams<f64>, Tensor<f64>) {
    let mut p = GeneratorParams::<f64>::new(2, 2, &tiny_gen_cfg(), &mut rng(3));
    p.log_scale.fill(-0.5);
    (p, uniform(&mut rng(4), &[2, 16], 0.0, 1.0))
}

fn disc(seed: u64) -> DiscriminatorParams<f64> {
    let cfg = DiscriminatorConfig {
        widths: vec![2, 4],
        kernels_per_bank: 3,
        gate_bias: -1.0,
    };
    DiscriminatorParams::new(3, &cfg, &mut rng(seed))
}

fn score(out: &GenOutput<f64>, phi: &DiscriminatorParams<f64>) -> f64 {
    discriminate(&embed(&out.forces, &out.theta, phi).unwrap(), phi).unwrap()
}

#[test]
fn flat_discriminator_gives_one_half_everywhere() {
    let (g, emg) = toy_gen();
    let mut phi = disc(1);
    zero_head(&mut phi);
    let out = generate(&emg, &g, Some(2)).unwrap();
    for t in 0..16 {
        assert_eq!(action_value(&emg, &out, t, &g, &phi, 3, 7).unwrap(), 0.5);
    }
}

#[test]
fn last_frame_is_the_full_sequence_score() {
    let (g, emg) = toy_gen();
    let phi = disc(2);
    let out = generate(&emg, &g, Some(3)).unwrap();
    assert_eq!(
        action_value(&emg, &out, 15, &g, &phi, 5, 1).unwrap(),
        score(&out, &phi)
    );
    assert!(action_value(&emg, &out, 16, &g, &phi, 5, 1).is_err());
}

#[test]
fn action_value_converges_to_a_long_rollout_estimate() {
    let (g, emg) = toy_gen();
    let phi = disc(5);
    let out = generate(&emg, &g, Some(6)).unwrap();
    let t = 4;
    let long: Vec<f64> = mc_rollout(&emg, &out, t, &g, 10_000, 999)
        .unwrap()
        .iter()
        .map(|c| score(c, &phi))
        .collect();
    let mu = long.iter().sum::<f64>() / long.len() as f64;
    let var = long.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (long.len() - 1) as f64;
    let se = (var / 64.0).sqrt();
    assert!(se > 0.0);
    let q = action_value(&emg, &out, t, &g, &phi, 64, 31).unwrap();
    assert!((q - mu).abs() < 3.0 * se, "{q} vs {mu} (se {se})");
}

#[test]
fn reward_free_flat_discriminator_expects_one_half() {
    let (g, emg) = toy_gen();
    let mut phi = disc(1);
    zero_head(&mut phi);
    let physics = PhysicsParams::from_config(&SimConfig::knee());
    let batch: Vec<_> = (0..4)
        .map(|s| generate(&emg, &g, Some(s)).unwrap())
        .collect();
    let j = expected_reward(
        &batch,
        &phi,
        &physics,
        &RewardModel::new(RewardMode::None, 1.0),
        0.01,
    )
    .unwrap();
    assert_eq!(j, 0.5);
    assert!(expected_reward(
        &[],
        &phi,
        &physics,
        &RewardModel::new(RewardMode::None, 1.0),
        0.01
    )
    .is_err());
}

fn as_output(forces: Tensor<f64>, theta: Vec<f64>) -> GenOutput<f64> {
    let l = theta.len();
    let n = forces.rows();
    GenOutput {
        forces,
        theta,
        log_density: vec![0.0; l],
        mean: Tensor::zeros(&[n + 1, l]),
        action: Tensor::zeros(&[n + 1, l]),
    }
}

#[test]
fn physics_perfect_batch_earns_full_reward() {
    let data = small_dataset(6);
    let physics = PhysicsParams::from_config(&data.config);
    let batch: Vec<_> = examples_for(&data, Split::Train)
        .unwrap()
        .into_iter()
        .map(|e| as_output(e.forces, e.theta))
        .collect();
    let mut phi = disc(1);
    zero_head(&mut phi);
    let j = expected_reward(
        &batch,
        &phi,
        &physics,
        &RewardModel::new(RewardMode::Physics, 1.0),
        0.01,
    )
    .unwrap();
    assert!((j - 0.5).abs() < 1e-9, "J = {j}");
}

/// Residual written out from the joint equation with its own difference stencils.
fn residual_oracle(theta: &[f64], forces: &Tensor<f64>, cfg: &SimConfig, dt: f64) -> f64 {
    let l = theta.len();
    let mut sum = 0.0;
    for k in 0..l {
        let (v, a) = if k == 0 {
            (
                (-3.0 * theta[0] + 4.0 * theta[1] - theta[2]) / (2.0 * dt),
                (2.0 * theta[0] - 5.0 * theta[1] + 4.0 * theta[2] - theta[3]) / (dt * dt),
            )
        } else if k == l - 1 {
            (
                (3.0 * theta[k] - 4.0 * theta[k - 1] + theta[k - 2]) / (2.0 * dt),
                (2.0 * theta[k] - 5.0 * theta[k - 1] + 4.0 * theta[k - 2] - theta[k - 3])
                    / (dt * dt),
            )
        } else {
            (
                (theta[k + 1] - theta[k - 1]) / (2.0 * dt),
                (theta[k + 1] - 2.0 * theta[k] + theta[k - 1]) / (dt * dt),
            )
        };
        let mut tau = 0.0;
        for (n, m) in cfg.muscles.iter().enumerate() {
            tau += m.sign as f64 * m.moment_arm * forces.at2(n, k);
        }
        let r = cfg.inertia * a + cfg.damping * v + cfg.gravity_torque * theta[k].sin() - tau;
        sum += r * r;
    }
    sum / l as f64
}

#[test]
fn expected_reward_matches_two_loop_summation() {
    let cfg = SimConfig::knee();
    let physics = PhysicsParams::from_config(&cfg);
    let phi = disc(8);
    let mut r = rng(9);
    let batch: Vec<_> = (0..5)
        .map(|_| {
            let f = uniform(&mut r, &[2, 12], 0.0, 30.0);
            let th: Vec<f64> = (0..12).map(|k| 0.3 * (k as f64 * 0.4).sin()).collect();
            as_output(f, th)
        })
        .collect();
    let kappa = 50.0;
    let mut oracle = 0.0;
    for out in &batch {
        let pl = residual_oracle(&out.theta, &out.forces, &cfg, 0.01);
        oracle += (-pl / kappa).exp() * score(out, &phi);
    }
    oracle /= batch.len() as f64;
    let j = expected_reward(
        &batch,
        &phi,
        &physics,
        &RewardModel::new(RewardMode::Physics, kappa),
        0.01,
    )
    .unwrap();
    assert!((j - oracle).abs() < 1e-12, "{j} vs {oracle}");
}

fn pg_inputs() -> (GeneratorParams<f64>, Vec<Tensor<f64>>, PhysicsParams<f64>) {
    let (g, _) = toy_gen();
    let emgs = (0..3)
        .map(|s| uniform(&mut rng(40 + s), &[2, 16], 0.0, 1.0))
        .collect();
    (g, emgs, PhysicsParams::from_config(&SimConfig::knee()))
}

#[test]
fn zero_step_size_is_the_identity() {
    let (mut g, emgs, physics) = pg_inputs();
    let before = g.clone();
    let batch: Vec<&Tensor<f64>> = emgs.iter().collect();
    let settings = PgSettings {
        lr: 0.0,
        n_mc: 2,
        clip_norm: 5.0,
    };
    let d = policy_gradient_step(
        &mut g,
        &before,
        &batch,
        &disc(3),
        &physics,
        &RewardModel::new(RewardMode::None, 1.0),
        0.01,
        &settings,
        &mut BaselineTracker::new(32),
        None,
        1,
    )
    .unwrap();
    assert!(d.grad_norm > 0.0);
    assert_eq!(g, before);
}

#[test]
fn reward_equal_to_baseline_gives_no_update() {
    let (mut g, emgs, physics) = pg_inputs();
    let before = g.clone();
    let batch: Vec<&Tensor<f64>> = emgs.iter().collect();
    let mut phi = disc(3);
    zero_head(&mut phi);
    let mut baseline = BaselineTracker::new(32);
    baseline.push(0.5);
    let settings = PgSettings {
        lr: 1.0,
        n_mc: 2,
        clip_norm: 5.0,
    };
    let d = policy_gradient_step(
        &mut g,
        &before,
        &batch,
        &phi,
        &physics,
        &RewardModel::new(RewardMode::None, 1.0),
        0.01,
        &settings,
        &mut baseline,
        None,
        1,
    )
    .unwrap();
    assert_eq!(d.grad_norm, 0.0);
    assert_eq!(g, before);
}

/// A generator whose only live parameter is the angle-head bias, judged by a
/// discriminator that prefers larger angles.
fn ascent_toy() -> (GeneratorParams<f64>, DiscriminatorParams<f64>, Tensor<f64>) {
    let mut g = GeneratorParams::<f64>::zeros(1, 1, &tiny_gen_cfg());
    g.log_scale.fill(-1.0);
    let cfg = DiscriminatorConfig {
        widths: vec![2],
        kernels_per_bank: 1,
        gate_bias: -30.0,
    };
    let mut phi = DiscriminatorParams::<f64>::zeros(2, &cfg);
    phi.banks[0]
        .kernels
        .data_mut()
        .copy_from_slice(&[0.0, 0.0, 1.0, 1.0]);
    phi.head_w.data_mut().copy_from_slice(&[1.0, -1.0]);
    (g, phi, Tensor::filled(&[1, 10], 0.5))
}

fn j_estimate(
    g: &GeneratorParams<f64>,
    phi: &DiscriminatorParams<f64>,
    emg: &Tensor<f64>,
    seed: u64,
) -> f64 {
    (0..10_000u64)
        .map(|i| {
            score(
                &generate(emg, g, Some(derive_seed(seed, "j", i))).unwrap(),
                phi,
            )
        })
        .sum::<f64>()
        / 10_000.0
}

#[test]
fn one_step_increases_expected_reward() {
    let (g0, phi, emg) = ascent_toy();
    let physics = PhysicsParams {
        inertia: 0.1,
        damping: 0.5,
        gravity_torque: 2.0,
        moment_arms: vec![0.04],
    };
    let reward = RewardModel::new(RewardMode::None, 1.0);
    let settings = PgSettings {
        lr: 0.5,
        n_mc: 4,
        clip_norm: 5.0,
    };
    let before = j_estimate(&g0, &phi, &emg, 0);
    let batch: Vec<&Tensor<f64>> = (0..32).map(|_| &emg).collect();
    let mut wins = 0;
    for trial in 0..100u64 {
        let mut g = g0.clone();
        let mut baseline = BaselineTracker::new(32);
        baseline.push(before);
        policy_gradient_step(
            &mut g,
            &g0,
            &batch,
            &phi,
            &physics,
            &reward,
            0.01,
            &settings,
            &mut baseline,
            None,
            trial,
        )
        .unwrap();
        if j_estimate(&g, &phi, &emg, 1000 + trial) > before {
            wins += 1;
        }
    }
    assert!(wins >= 95, "J increased in {wins}/100 trials");
}

#[test]
fn zero_epochs_returns_the_pretrained_pair() {
    let data = small_dataset(10);
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_train_cfg()
    };
    let out = adversarial_train(&data, &cfg, RunOptions::default()).unwrap();
    assert!(out.report.epochs.is_empty());
    assert_eq!(out.report.mle_curve.len(), 5);
    assert_eq!(out.report.d_pretrain_curve.len(), 5);
    assert_eq!(out.discriminator, out.metric_discriminator);

    let train = examples_for(&data, Split::Train).unwrap();
    let mut sigma =
        GeneratorParams::new(2, 2, &cfg.generator, &mut stream(cfg.seed, "init-gen", 0));
    sigma.fit_output_scales(&train);
    let mle = MleConfig {
        seed: derive_seed(cfg.seed, "mle", 0),
        ..cfg.mle.clone()
    };
    mle_pretrain(&mut sigma, &train, &mle).unwrap();
    assert_eq!(out.generator, sigma);
}

#[test]
fn training_is_deterministic_and_finite() {
    let data = small_dataset(10);
    let cfg = tiny_train_cfg();
    let a = adversarial_train(&data, &cfg, RunOptions::default()).unwrap();
    let b = adversarial_train(&data, &cfg, RunOptions::default()).unwrap();
    let (va, vb) = (a.report.metric_values(), b.report.metric_values());
    assert_eq!(va.len(), vb.len());
    for (x, y) in va.iter().zip(&vb) {
        assert!(x.is_nan() && y.is_nan() || (x - y).abs() <= 1e-12);
    }
    assert_eq!(a.report.epochs.len(), 4);
    assert!(a.report.ablation.is_none());
    for e in &a.report.epochs {
        for v in [
            e.expected_reward,
            e.mean_structural_reward,
            e.mean_action_value,
            e.baseline,
            e.grad_norm,
            e.d_loss,
        ] {
            assert!(v.is_finite());
        }
    }
}

#[test]
fn vanilla_mode_is_tagged_and_reward_free() {
    let data = small_dataset(10);
    let cfg = TrainConfig {
        reward_mode: RewardMode::None,
        ..tiny_train_cfg()
    };
    let out = adversarial_train(&data, &cfg, RunOptions::default()).unwrap();
    assert_eq!(out.report.ablation.as_deref(), Some("vanilla_gan"));
    for e in &out.report.epochs {
        assert_eq!(e.mean_structural_reward, 1.0);
        assert!((e.expected_reward - e.mean_action_value).abs() <= 1e-12);
    }
}

#[test]
fn returned_generator_has_the_lowest_eval_error() {
    let data = small_dataset(10);
    let cfg = TrainConfig {
        epochs: 6,
        lr: 5e-2,
        ..tiny_train_cfg()
    };
    let out = adversarial_train(&data, &cfg, RunOptions::default()).unwrap();
    let eval = examples_for(&data, Split::Eval).unwrap();
    let p: Vec<f64> = eval
        .iter()
        .flat_map(|e| generate(&e.emg, &out.generator, None).unwrap().theta)
        .collect();
    let r: Vec<f64> = eval.iter().flat_map(|e| e.theta.clone()).collect();
    let rmse = quality(&p, &r).unwrap().rmse;
    let logged: Vec<f64> = out.report.epochs.iter().map(|e| e.val_theta_rmse).collect();
    assert!(
        logged.iter().all(|&v| rmse <= v + 1e-12),
        "{rmse} vs {logged:?}"
    );
    let b = out.report.best_epoch;
    if b > 0 {
        assert!((logged[b - 1] - rmse).abs() <= 1e-12);
    }
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let data = small_dataset(10);
    let cfg = TrainConfig {
        epochs: 6,
        ..tiny_train_cfg()
    };
    let full_dir = tempfile::tempdir().unwrap();
    let full = adversarial_train(
        &data,
        &cfg,
        RunOptions {
            checkpoint_dir: Some(full_dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();

    let cut_dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(full_dir.path()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if !name.starts_with("ckpt_000006") {
            std::fs::copy(&path, cut_dir.path().join(&name)).unwrap();
        }
    }
    let resumed = adversarial_train(
        &data,
        &cfg,
        RunOptions {
            checkpoint_dir: Some(cut_dir.path().to_path_buf()),
            resume: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.report.resumed_from, Some(4));
    let (a, b) = (full.report.metric_values(), resumed.report.metric_values());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!(
            x.is_nan() && y.is_nan() || (x - y).abs() <= 1e-10,
            "{x} vs {y}"
        );
    }
    let (ga, gb) = (full.generator.flatten(), resumed.generator.flatten());
    assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() <= 1e-10));
}

#[test]
fn full_shot_count_is_the_baseline() {
    let data = small_dataset(10);
    let cfg = TrainConfig {
        epochs: 2,
        ..tiny_train_cfg()
    };
    let n_train = data.indices(Split::Train).len();
    let table = lowshot_sweep(&data, &cfg, &[n_train]).unwrap();
    let row = &table.rows[0];
    assert_eq!(row.psnr_ratio, 100.0);
    assert_eq!(row.rmse_ratio, 100.0);
    assert_eq!(row.r2_ratio, Some(100.0));
    assert_eq!(row.srcc_ratio, Some(100.0));
    assert!(lowshot_sweep(&data, &cfg, &[n_train + 1]).is_err());
}

#[test]
fn one_shot_training_runs_without_snapshots() {
    let data = small_dataset(10);
    let one = restrict_train(&data, 1).unwrap();
    assert_eq!(one.indices(Split::Train).len(), 1);
    let out = adversarial_train(&one, &tiny_train_cfg(), RunOptions::default()).unwrap();
    assert_eq!(out.report.epochs.len(), 4);
    assert!(out.report.snapshots.is_empty());
    let table = lowshot_sweep(
        &data,
        &TrainConfig {
            epochs: 2,
            ..tiny_train_cfg()
        },
        &[1],
    )
    .unwrap();
    assert!(table.rows[0].rmse_ratio.is_finite());
}

#[test]
fn collapse_pairs_share_their_data() {
    let data = small_dataset(10);
    let cfg = TrainConfig {
        epochs: 2,
        ..tiny_train_cfg()
    };
    let pairs = collapse_comparison(&data, &cfg, &[0, 1]).unwrap();
    let hash = dataset_hash(&data);
    for p in &pairs {
        assert_eq!(p.physics.dataset_hash, hash);
        assert_eq!(p.vanilla.dataset_hash, hash);
        assert_eq!(p.physics.reward_mode, RewardMode::Physics);
        assert_eq!(p.vanilla.reward_mode, RewardMode::None);
        assert_eq!(p.physics.snapshots.len(), p.vanilla.snapshots.len());
        assert!((p.fid_delta - (p.vanilla.final_fid - p.physics.final_fid)).abs() < 1e-12);
    }
}

#[test]
fn references_scored_against_themselves_are_perfect() {
    let data = small_dataset(40);
    let refs = examples_for(&data, Split::Test).unwrap();
    let pairs: Vec<_> = refs
        .iter()
        .map(|e| (e.forces.clone(), e.theta.clone()))
        .collect();
    let mut phi = disc(4);
    let raw: Vec<_> = refs
        .iter()
        .map(|e| physgan::discriminator::embed_raw(&e.forces, &e.theta).unwrap())
        .collect();
    phi.fit_standardization(&raw);
    let report = evaluation_report("test", &pairs, &pairs, &refs, &phi, None).unwrap();
    assert_eq!(report.quality.theta.r2, Some(1.0));
    assert_eq!(report.quality.theta.rmse, 0.0);
    assert!(report.fid.unwrap() < 1e-9);
}

#[test]
fn untrained_generator_scores_poorly() {
    let data = small_dataset(40);
    let train = examples_for(&data, Split::Train).unwrap();
    let mut sigma = GeneratorParams::<f64>::new(2, 2, &GeneratorConfig::default(), &mut rng(0));
    sigma.fit_output_scales(&train);
    let phi = DiscriminatorParams::<f64>::new(3, &DiscriminatorConfig::default(), &mut rng(1));
    let report = evaluate_generator(&sigma, &data, Split::Test, &phi, None, 0).unwrap();
    assert!(
        report.quality.theta.r2.unwrap() < 0.5,
        "R² {:?}",
        report.quality.theta.r2
    );
}
