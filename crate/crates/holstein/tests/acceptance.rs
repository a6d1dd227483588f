//! Acceptance suite: one pass/fail line per criterion, run sequentially so
//! expensive fixtures (datasets, trained surrogates) are built once and
//! shared.  Exits nonzero if any criterion fails.
//!
//! Run with `cargo test --test acceptance` (or `--release` for headroom;
//! the dev profile already builds with opt-level 3 here).

use std::time::Instant;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use holstein::analysis::{
    climate_report, order_param_rho, ExactStepper, ModelStepper, Stepper,
};
use holstein::datagen::{
    compute_scaling_coefficients, generate_deep_dataset, generate_shallow_dataset,
    Dataset, QuenchProtocol, ScalingCoefficients, Trajectory,
};
use holstein::dynamics::{
    cdw_ground_state, free_fermi_ground_state, rk4_step, total_energy, LatticeState,
    PhysicsParams, Rk4,
};
use holstein::model::{embed_state, Model, ModelConfig};
use holstein::tensor::{directional_derivative_max_rel_error, TensorError};
use holstein::trainer::{normalized_state_error, train, CurriculumStage, TrainingConfig};

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct Runner {
    failures: usize,
}

impl Runner {
    fn run<F>(&mut self, number: usize, title: &str, body: F)
    where
        F: FnOnce() -> Result<String, String>,
    {
        let started = Instant::now();
        let outcome = body();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                println!("criterion {number:2} PASS  {title} [{secs:.1}s] — {detail}");
            }
            Err(detail) => {
                self.failures += 1;
                println!("criterion {number:2} FAIL  {title} [{secs:.1}s] — {detail}");
            }
        }
    }
}

fn main() {
    let total = Instant::now();
    let mut r = Runner { failures: 0 };

    // ---- 1. Integrator order -------------------------------------------
    r.run(1, "RK4 error scales as dt^4 against a dt/10 reference", || {
        // One prediction interval of the shallow protocol, integrated at
        // step dt and at dt/10; halving dt must shrink the gap ~16x.  (A
        // literal single step shows the local dt^5 rate instead, which the
        // [3.5, 4.5] bracket on the global rate deliberately excludes.)
        let params = PhysicsParams::new(16, 0.8).map_err(err)?;
        let state = shallow_quench_state(16)?;
        let horizon = 0.64;
        let run = |dt: f64| -> LatticeState {
            let n = (horizon / dt).round() as usize;
            let mut s = state.clone();
            for _ in 0..n {
                s = rk4_step(&s, &params, dt);
            }
            s
        };
        let order_err = |dt: f64| state_max_abs_diff(&run(dt), &run(dt / 10.0));
        let e1 = order_err(0.04);
        let e2 = order_err(0.02);
        let ratio = (e1 / e2).log2();
        if (3.5..=4.5).contains(&ratio) {
            Ok(format!("log2 error ratio {ratio:.3} in [3.5, 4.5]"))
        } else {
            Err(format!("log2 error ratio {ratio:.3} outside [3.5, 4.5]"))
        }
    });

    // ---- 2. Conservation suite -----------------------------------------
    r.run(2, "conservation over 1e4 steps at g = 0.8", || {
        let params = PhysicsParams::new(16, 0.8).map_err(err)?;
        let mut state = shallow_quench_state(16)?;
        let n_electrons = 8.0;
        let e0 = total_energy(&state, &params);
        let spectrum0 = state.occupation_spectrum();
        let mut rk4 = Rk4::new(params.clone(), 0.01);
        let mut trace_drift = 0.0_f64;
        let mut presym = 0.0_f64;
        let mut energy_drift = 0.0_f64;
        for _ in 0..10_000 {
            rk4.step(&mut state);
            trace_drift = trace_drift.max((state.trace() - n_electrons).abs());
            presym = presym.max(rk4.last_presym_asymmetry);
            energy_drift =
                energy_drift.max(((total_energy(&state, &params) - e0) / e0).abs());
        }
        let spectrum_drift = state
            .occupation_spectrum()
            .iter()
            .zip(&spectrum0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        let detail = format!(
            "trace {trace_drift:.1e}, pre-sym Hermiticity {presym:.1e}, \
             rel energy {energy_drift:.1e}, spectrum {spectrum_drift:.1e}"
        );
        if trace_drift < 1e-8 && presym < 1e-9 && energy_drift < 1e-6 && spectrum_drift < 1e-6 {
            Ok(detail)
        } else {
            Err(detail)
        }
    });

    // ---- 3. Free-gas stationarity --------------------------------------
    r.run(3, "free gas (g = 0) is stationary for 1e3 steps", || {
        let params = PhysicsParams::new(16, 0.0).map_err(err)?;
        let mut state = free_fermi_ground_state(&params);
        let rho0 = state.rho.clone();
        let mut rk4 = Rk4::new(params, 0.01);
        let mut worst = 0.0_f64;
        for _ in 0..1_000 {
            rk4.step(&mut state);
            let dev = state
                .rho
                .iter()
                .zip(rho0.iter())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0_f64, f64::max);
            worst = worst.max(dev);
        }
        if worst < 1e-10 {
            Ok(format!("max |rho(t) - rho(0)| = {worst:.1e}"))
        } else {
            Err(format!("max |rho(t) - rho(0)| = {worst:.1e} >= 1e-10"))
        }
    });

    // ---- 4. Autodiff gradient check ------------------------------------
    r.run(4, "gradient check on a 2-block network (f64)", || {
        let mut config = ModelConfig::standard(8);
        config.dropout_p = 0.0;
        let n_params = config.parameter_count();
        if n_params < 1_000 {
            return Err(format!("only {n_params} parameters, need >= 1000"));
        }
        let model = Model::<f64>::new(config, probe_scaling(), 29).map_err(err)?;
        let state = shallow_quench_state(8)?;
        let embedded = embed_state::<f64>(&state.rho, &state.q, &state.p).map_err(err)?;
        let model_ref = &model;
        let embedded_ref = &embedded;
        let mut params = model.params().clone();
        let worst = directional_derivative_max_rel_error(
            &mut params,
            move |p, tape| {
                let mut probe = model_ref.clone();
                *probe.params_mut() = p.clone();
                let input = tape.constant(embedded_ref.clone())?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let nodes = probe
                    .step_on_tape(tape, input, &mut rng)
                    .map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
                let sq = tape.square(nodes.update_normalized)?;
                tape.sum(sq)
            },
            24,
            1e-5,
            41,
        )
        .map_err(err)?;
        if worst < 1e-6 {
            Ok(format!(
                "{n_params} parameters, max relative error {worst:.1e}"
            ))
        } else {
            Err(format!("max relative error {worst:.1e} >= 1e-6"))
        }
    });

    // ---- 5. Equivariance ------------------------------------------------
    r.run(5, "model commutes with cyclic shifts (f32)", || {
        let state = shallow_quench_state(16)?;
        let mut worst = 0.0_f64;
        for config in [ModelConfig::standard(16), ModelConfig::parc(16)] {
            let model = Model::<f32>::new(config, probe_scaling(), 11).map_err(err)?;
            for shift in [1, 5] {
                let shifted = state.cyclic_shift(shift);
                let next = model.predict_step(&state, 0.64).map_err(err)?;
                let next_shifted = model.predict_step(&shifted, 0.64).map_err(err)?;
                let expected = next.cyclic_shift(shift);
                worst = worst.max(state_max_abs_diff(&next_shifted, &expected));
            }
        }
        if worst < 1e-4 {
            Ok(format!("worst deviation {worst:.1e} over both variants"))
        } else {
            Err(format!("worst deviation {worst:.1e} >= 1e-4"))
        }
    });

    // ---- 6. Shallow-quench surrogate -----------------------------------
    let shallow = generate_shallow_dataset(16, &QuenchProtocol::shallow());
    let mut shallow_outcome: Option<(f64, usize, usize)> = None;
    r.run(6, "standard surrogate tracks the shallow quench", || {
        let dataset = shallow.as_ref().map_err(err)?;
        let scaling = compute_scaling_coefficients(dataset).map_err(err)?;
        let mut model =
            Model::<f32>::new(ModelConfig::standard(16), scaling, 7).map_err(err)?;
        let config = TrainingConfig {
            stages: vec![
                CurriculumStage { rollout_steps: 1, noise_sigma: 0.0, n_epochs: 3 },
                CurriculumStage { rollout_steps: 2, noise_sigma: 2e-3, n_epochs: 2 },
                CurriculumStage { rollout_steps: 4, noise_sigma: 5e-3, n_epochs: 2 },
            ],
            steps_per_epoch: Some(250),
            warmup_steps: 100,
            validation_trajectories: 2,
            ..TrainingConfig::default()
        };
        train(&mut model, dataset, &config).map_err(err)?;

        // Held-out phase offset: the first test-split trajectory.
        let held_out = dataset
            .test_trajectories()
            .next()
            .ok_or("shallow dataset has no test trajectories")?;
        let truth = &held_out.snapshots;
        let dt_pred = dataset.protocol.dt_prediction();
        let rollout = model
            .rollout(&truth[0], 100, dt_pred)
            .map_err(|e| format!("rollout failed: {e}"))?;
        let pred_trace: Vec<f64> =
            rollout[1..].iter().map(order_param_rho).collect();
        let true_trace: Vec<f64> =
            truth[1..=100].iter().map(order_param_rho).collect();
        let num: f64 = pred_trace
            .iter()
            .zip(&true_trace)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den: f64 = true_trace.iter().map(|x| x * x).sum();
        let rel_l2 = (num / den).sqrt();
        let osc_pred = oscillation_count(&pred_trace);
        let osc_true = oscillation_count(&true_trace);
        shallow_outcome = Some((rel_l2, osc_pred, osc_true));
        let detail = format!(
            "relative L2 of the order-parameter trace {:.1}%, oscillations {} vs {} (truth)",
            100.0 * rel_l2,
            osc_pred,
            osc_true
        );
        if rel_l2 < 0.10 && osc_pred.abs_diff(osc_true) <= 1 {
            Ok(detail)
        } else {
            Err(detail)
        }
    });

    // ---- 7. Deep-quench PARC surrogate ---------------------------------
    let deep_protocol = QuenchProtocol {
        n_trajectories: 32,
        n_prediction_steps: 300,
        ..QuenchProtocol::deep()
    };
    let deep = generate_deep_dataset(16, &deep_protocol);
    let mut parc_model: Option<Model<f32>> = None;
    r.run(7, "PARC surrogate holds the deep-quench short horizon", || {
        let dataset = deep.as_ref().map_err(err)?;
        let scaling = compute_scaling_coefficients(dataset).map_err(err)?;
        let mut model =
            Model::<f32>::new(ModelConfig::parc(16), scaling.clone(), 7).map_err(err)?;
        let config = TrainingConfig {
            stages: vec![
                CurriculumStage { rollout_steps: 1, noise_sigma: 0.0, n_epochs: 2 },
                CurriculumStage { rollout_steps: 2, noise_sigma: 2e-3, n_epochs: 2 },
                CurriculumStage { rollout_steps: 4, noise_sigma: 5e-3, n_epochs: 1 },
            ],
            steps_per_epoch: Some(150),
            warmup_steps: 100,
            validation_trajectories: 2,
            ..TrainingConfig::default()
        };
        train(&mut model, dataset, &config).map_err(err)?;

        let held_out = dataset
            .test_trajectories()
            .next()
            .ok_or("deep dataset has no test trajectories")?;
        let truth = &held_out.snapshots;
        let dt_pred = dataset.protocol.dt_prediction();
        let rollout = model
            .rollout(&truth[0], 40, dt_pred)
            .map_err(|e| format!("40-step rollout failed: {e}"))?;
        let mut worst_early = 0.0_f64;
        for k in 1..=10 {
            worst_early =
                worst_early.max(normalized_state_error(&rollout[k], &truth[k], &scaling));
        }
        // Long-horizon stability: 1000 self-fed steps without divergence.
        model
            .rollout(&truth[0], 1000, dt_pred)
            .map_err(|e| format!("1000-step rollout diverged: {e}"))?;
        parc_model = Some(model);
        let detail = format!(
            "max normalized error over steps 1-10: {worst_early:.3}; 1000-step rollout finite"
        );
        if worst_early < 0.3 {
            Ok(detail)
        } else {
            Err(detail)
        }
    });

    // ---- 8. Climate ------------------------------------------------------
    let eval_protocol = QuenchProtocol {
        n_trajectories: 32,
        n_prediction_steps: 300,
        seed: 4242,
        ..QuenchProtocol::deep()
    };
    let eval_ds = generate_deep_dataset(16, &eval_protocol);
    r.run(8, "ensemble climate within 0.2; oracle exact", || {
        let dataset = eval_ds.as_ref().map_err(err)?;
        let model = parc_model
            .as_ref()
            .ok_or("no trained PARC model (criterion 7 failed)")?;
        let truth: Vec<&[LatticeState]> = dataset
            .trajectories
            .iter()
            .map(|t| t.snapshots.as_slice())
            .collect();

        let mut oracle = ExactStepper::from_dataset(dataset).map_err(err)?;
        let oracle_report =
            climate_report(&mut oracle as &mut dyn Stepper, &truth, 300, 50).map_err(err)?;
        if oracle_report.max_dev() != 0.0 {
            return Err(format!(
                "oracle deviation {:.3e} != 0",
                oracle_report.max_dev()
            ));
        }

        let mut stepper = ModelStepper::new(model, dataset.protocol.dt_prediction());
        let report =
            climate_report(&mut stepper as &mut dyn Stepper, &truth, 300, 50).map_err(err)?;
        if report.acf_rho_model[0] != 1.0 || report.acf_q_model[0] != 1.0 {
            return Err("A_pred(0) is not exactly 1".into());
        }
        let detail = format!(
            "{} trajectories ({} divergent): max |dA_rho| {:.3}, max |dA_Q| {:.3}; oracle 0",
            report.n_trajectories, report.n_divergent, report.max_dev_rho, report.max_dev_q
        );
        if report.max_dev_rho < 0.2 && report.max_dev_q < 0.2 && report.n_divergent == 0 {
            Ok(detail)
        } else {
            Err(detail)
        }
    });

    // ---- 9. Dataset contracts -------------------------------------------
    r.run(9, "dataset contracts and bitwise round trip", || {
        // Shallow default: 64 x 1201 snapshots spanning 768 time units.
        let dataset = shallow.as_ref().map_err(err)?;
        if dataset.trajectories.len() != 64 {
            return Err(format!(
                "shallow trajectory count {} != 64",
                dataset.trajectories.len()
            ));
        }
        for t in &dataset.trajectories {
            if t.snapshots.len() != 1201 {
                return Err(format!(
                    "shallow trajectory {} has {} snapshots, want 1201",
                    t.index,
                    t.snapshots.len()
                ));
            }
            let span = t.snapshots.last().unwrap().time - t.snapshots[0].time;
            if (span - 768.0).abs() > 1e-9 {
                return Err(format!(
                    "shallow trajectory {} spans {span} time units, want 768",
                    t.index
                ));
            }
        }

        // The paper-scale deep configuration validates as-is.
        QuenchProtocol::deep().validate().map_err(err)?;

        // Reduced deep run: 8 x (1001 snapshots + 1000 midpoints).
        let deep8_protocol = QuenchProtocol {
            n_trajectories: 8,
            ..QuenchProtocol::deep()
        };
        let deep8 = generate_deep_dataset(16, &deep8_protocol).map_err(err)?;
        for t in &deep8.trajectories {
            if t.snapshots.len() != 1001 || t.midpoints.len() != 1000 {
                return Err(format!(
                    "deep trajectory {} has {} snapshots / {} midpoints, want 1001 / 1000",
                    t.index,
                    t.snapshots.len(),
                    t.midpoints.len()
                ));
            }
        }

        // Scaling coefficients reproduce the worked example exactly.
        let c = compute_scaling_coefficients(&synthetic_extremes_dataset()).map_err(err)?;
        if (c.r, c.q, c.p) != (0.88, 1.62, 0.75) {
            return Err(format!(
                "synthetic scaling ({}, {}, {}) != (0.88, 1.62, 0.75)",
                c.r, c.q, c.p
            ));
        }

        // Write/read round trip is bitwise exact.
        let dir = tempfile::tempdir().map_err(err)?;
        holstein::datagen::write_dataset(&deep8, dir.path(), false).map_err(err)?;
        let back = holstein::datagen::read_dataset(dir.path()).map_err(err)?;
        datasets_bitwise_equal(&deep8, &back)?;

        Ok(format!(
            "shallow 64x1201 over 768 t.u.; deep 8x(1001+1000); scaling 0.88/1.62/0.75; \
             round trip bitwise"
        ))
    });

    // ---- 10. Determinism -------------------------------------------------
    r.run(10, "generation and training are bitwise deterministic", || {
        // Same protocol, two runs, byte-identical files on disk.
        let small = QuenchProtocol {
            n_trajectories: 4,
            n_prediction_steps: 150,
            ..QuenchProtocol::deep()
        };
        let a = generate_deep_dataset(16, &small).map_err(err)?;
        let b = generate_deep_dataset(16, &small).map_err(err)?;
        datasets_bitwise_equal(&a, &b)?;
        let dir_a = tempfile::tempdir().map_err(err)?;
        let dir_b = tempfile::tempdir().map_err(err)?;
        holstein::datagen::write_dataset(&a, dir_a.path(), false).map_err(err)?;
        holstein::datagen::write_dataset(&b, dir_b.path(), false).map_err(err)?;
        dirs_byte_equal(dir_a.path(), dir_b.path())?;

        // Two training runs from the same seeds end in identical weights.
        let dataset = shallow.as_ref().map_err(err)?;
        let scaling = compute_scaling_coefficients(dataset).map_err(err)?;
        let config = TrainingConfig {
            stages: vec![CurriculumStage {
                rollout_steps: 1,
                noise_sigma: 0.0,
                n_epochs: 1,
            }],
            steps_per_epoch: Some(15),
            warmup_steps: 10,
            validation_trajectories: 1,
            ..TrainingConfig::default()
        };
        let run = |()| -> Result<(Model<f32>, Vec<f64>), String> {
            let mut model =
                Model::<f32>::new(ModelConfig::standard(16), scaling.clone(), 7)
                    .map_err(err)?;
            let report = train(&mut model, dataset, &config).map_err(err)?;
            let losses = report.metrics.iter().map(|m| m.loss_total).collect();
            Ok((model, losses))
        };
        let (model_a, losses_a) = run(())?;
        let (model_b, losses_b) = run(())?;
        if losses_a
            .iter()
            .zip(&losses_b)
            .any(|(x, y)| x.to_bits() != y.to_bits())
        {
            return Err("training loss curves differ between identical runs".into());
        }
        for (ea, eb) in model_a.params().iter().zip(model_b.params().iter()) {
            if ea.name != eb.name || ea.value.data() != eb.value.data() {
                return Err(format!("weights differ after retraining: {}", ea.name));
            }
        }
        // And the serialized checkpoints agree byte for byte.
        let dir = tempfile::tempdir().map_err(err)?;
        let ck_a = dir.path().join("a.ckpt");
        let ck_b = dir.path().join("b.ckpt");
        model_a.save_checkpoint(&ck_a).map_err(err)?;
        model_b.save_checkpoint(&ck_b).map_err(err)?;
        let bytes_a = std::fs::read(&ck_a).map_err(err)?;
        let bytes_b = std::fs::read(&ck_b).map_err(err)?;
        if bytes_a != bytes_b {
            return Err("checkpoint files differ between identical runs".into());
        }
        Ok(format!(
            "dataset files and {}-step training runs byte-identical",
            losses_a.len()
        ))
    });

    println!(
        "acceptance: {} of 10 criteria passed in {:.0}s",
        10 - r.failures,
        total.elapsed().as_secs_f64()
    );
    if r.failures > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// A generic post-quench state: the CDW ground state at g = 0.5 evolved
/// briefly at g = 0.8, so rho has complex off-diagonal structure and the
/// momenta are nonzero.
fn shallow_quench_state(l: usize) -> Result<LatticeState, String> {
    let prepare = PhysicsParams::new(l, 0.5).map_err(err)?;
    let evolve = PhysicsParams::new(l, 0.8).map_err(err)?;
    let mut state = cdw_ground_state(&prepare).map_err(err)?;
    let mut rk4 = Rk4::new(evolve, 0.01);
    for _ in 0..200 {
        rk4.step(&mut state);
    }
    Ok(state)
}

fn state_max_abs_diff(a: &LatticeState, b: &LatticeState) -> f64 {
    let mut worst = 0.0_f64;
    for (x, y) in a.q.iter().zip(b.q.iter()) {
        worst = worst.max((x - y).abs());
    }
    for (x, y) in a.p.iter().zip(b.p.iter()) {
        worst = worst.max((x - y).abs());
    }
    for (x, y) in a.rho.iter().zip(b.rho.iter()) {
        let d = x - y;
        worst = worst.max(d.re.abs()).max(d.im.abs());
    }
    worst
}

/// Oscillations of a trace: sign changes of the mean-centered series, two
/// crossings per full period.
fn oscillation_count(xs: &[f64]) -> usize {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let mut crossings = 0usize;
    let mut last_sign = 0.0_f64;
    for &x in xs {
        let c = x - mean;
        if c == 0.0 {
            continue;
        }
        let sign = c.signum();
        if last_sign != 0.0 && sign != last_sign {
            crossings += 1;
        }
        last_sign = sign;
    }
    crossings / 2
}

/// Fixed non-unit scaling for network-only probes (gradients, equivariance),
/// where no dataset is in play.
fn probe_scaling() -> ScalingCoefficients {
    ScalingCoefficients {
        r: 0.9,
        q: 1.4,
        p: 0.7,
        r_d: 0.35,
        q_d: 0.8,
        p_d: 0.5,
        r_delta: 0.12,
        q_delta: 0.3,
        p_delta: 0.2,
    }
}

/// The worked scaling example: one trajectory whose extreme entries are
/// placed by hand at |rho| = 0.88, |Q| = 1.62, |P| = 0.75.
fn synthetic_extremes_dataset() -> Dataset {
    let l = 4;
    let mk_state = |scale: f64| {
        let mut rho = Array2::<Complex64>::zeros((l, l));
        for i in 0..l {
            rho[[i, i]] = Complex64::new(0.5, 0.0);
        }
        rho[[0, 1]] = Complex64::new(0.88 * scale, -0.1);
        rho[[1, 0]] = rho[[0, 1]].conj();
        let mut q = Array1::zeros(l);
        q[1] = -1.62 * scale;
        q[2] = 0.3;
        let mut p = Array1::zeros(l);
        p[0] = 0.75 * scale;
        p[3] = -0.2;
        LatticeState::from_parts_unchecked(q, p, rho, 0.0)
    };
    Dataset {
        l,
        generator: "synthetic".into(),
        protocol: QuenchProtocol {
            g_initial: 0.0,
            g_final: 1.0,
            dt_integration: 0.01,
            prediction_stride: 2,
            n_prediction_steps: 1,
            n_trajectories: 1,
            transient_skip: 0.0,
            q_noise_sigma: 0.0,
            record_midpoints: false,
            seed: 0,
        },
        trajectories: vec![Trajectory {
            index: 0,
            seed: 0,
            offset: 0,
            snapshots: vec![mk_state(0.5), mk_state(1.0)],
            midpoints: vec![],
        }],
    }
}

fn states_bitwise_equal(a: &LatticeState, b: &LatticeState, what: &str) -> Result<(), String> {
    let same = a.time.to_bits() == b.time.to_bits()
        && a.q.iter().zip(b.q.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.p.iter().zip(b.p.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.rho.iter().zip(b.rho.iter()).all(|(x, y)| {
            x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits()
        });
    if same {
        Ok(())
    } else {
        Err(format!("{what}: states differ bitwise"))
    }
}

fn datasets_bitwise_equal(a: &Dataset, b: &Dataset) -> Result<(), String> {
    if a.l != b.l || a.trajectories.len() != b.trajectories.len() {
        return Err("dataset shapes differ".into());
    }
    for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
        if ta.index != tb.index
            || ta.seed != tb.seed
            || ta.snapshots.len() != tb.snapshots.len()
            || ta.midpoints.len() != tb.midpoints.len()
        {
            return Err(format!("trajectory {} metadata differs", ta.index));
        }
        for (i, (sa, sb)) in ta.snapshots.iter().zip(&tb.snapshots).enumerate() {
            states_bitwise_equal(sa, sb, &format!("trajectory {} snapshot {i}", ta.index))?;
        }
        for (i, (sa, sb)) in ta.midpoints.iter().zip(&tb.midpoints).enumerate() {
            states_bitwise_equal(sa, sb, &format!("trajectory {} midpoint {i}", ta.index))?;
        }
    }
    Ok(())
}

fn dirs_byte_equal(a: &std::path::Path, b: &std::path::Path) -> Result<(), String> {
    let list = |d: &std::path::Path| -> Result<Vec<std::path::PathBuf>, String> {
        let mut names: Vec<_> = std::fs::read_dir(d)
            .map_err(err)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        names.sort();
        Ok(names)
    };
    let files_a = list(a)?;
    let files_b = list(b)?;
    if files_a.len() != files_b.len() {
        return Err("directories hold different file counts".into());
    }
    for (fa, fb) in files_a.iter().zip(&files_b) {
        if fa.file_name() != fb.file_name() {
            return Err("directories hold different file names".into());
        }
        let ba = std::fs::read(fa).map_err(err)?;
        let bb = std::fs::read(fb).map_err(err)?;
        if ba != bb {
            return Err(format!("{:?} differs between runs", fa.file_name().unwrap()));
        }
    }
    Ok(())
}
