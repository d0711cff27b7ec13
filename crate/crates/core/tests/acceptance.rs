//! Acceptance criteria. Runs as a plain binary so that every criterion
//! prints one pass/fail line under `cargo test`; the process fails if any
//! criterion fails.

use std::path::Path;
use std::time::Instant;

use dreg_lab::cli::config::{Experiment, ModelKind};
use dreg_lab::cli::{bias_test, main_with_args, toy_snr, train, ExperimentConfig};
use dreg_lab::diagnostics::loglog_slope;
use dreg_lab::estimators::{
    dreg_alpha_phi_grad, iwae_bound, iwae_grad_dreg, iwae_grad_standard, iwae_grad_stl, jvi1_estimate, log_weights,
    rws_dreg_phi_grad, rws_theta_grad, rws_wake_phi_grad, surrogate_loss, surrogate_loss_anchored, EstimatorId,
    LogWeightBatch, SurrogateKind,
};
use dreg_lab::gaussian::{NoiseBatch, LN_2PI};
use dreg_lab::models::toy::POSTERIOR_VARIANCE;
use dreg_lab::models::{LatentModel, MlpVae, ParamVector, ToyModel};
use dreg_lab::tape::{finite_diff_check, TapeGraph};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn labelled(what: &'static str) -> impl Fn(String) -> String {
    move |err| format!("{what}: {err}")
}

fn rel_close(a: &[f64], b: &[f64], rel: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("length {} vs {}", a.len(), b.len()));
    }
    let scale = a.iter().chain(b).fold(1e-300f64, |m, v| m.max(v.abs()));
    for (i, (u, v)) in a.iter().zip(b).enumerate() {
        if (u - v).abs() > rel * scale {
            return Err(format!("coordinate {i}: {u} vs {v}"));
        }
    }
    Ok(())
}

fn toy_config(ids: &[&str], k_grid: &[usize]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.estimator.ids = ids.iter().map(|s| s.to_string()).collect();
    cfg.estimator.k_grid = k_grid.to_vec();
    cfg
}

fn slope(points: &[(f64, f64)]) -> Result<f64, String> {
    loglog_slope(points).map(|f| f.slope).map_err(|e| e.to_string())
}

/// SNR and variance scaling on the toy model. DReG is measured at the
/// configured perturbation; the standard estimator's SNR is so small there
/// that it sits on the `1 / sqrt(n)` noise floor, so its slope is measured
/// further from the optimum with ten times the samples.
fn criterion_1() -> Outcome {
    let ks = [8usize, 64, 512];
    let cfg = toy_config(&["iwae-dreg"], &ks);
    let dreg = toy_snr::sweep(&cfg).map_err(|e| e.to_string())?;
    let mut far = toy_config(&["iwae"], &ks);
    far.measurement.perturbation = 0.1;
    far.measurement.samples = 10_000;
    let iwae = toy_snr::sweep(&far).map_err(|e| e.to_string())?;

    let cell = |r: &toy_snr::ToySnrReport, id, k| r.summary(id, k).ok_or(format!("missing {id} K={k}"));
    let mut snr_d = Vec::new();
    let mut var_d = Vec::new();
    let mut snr_i = Vec::new();
    for &k in &ks {
        let d = cell(&dreg, EstimatorId::IwaeDreg, k)?;
        snr_d.push((k as f64, d.snr));
        var_d.push((k as f64, d.variance));
        snr_i.push((k as f64, cell(&iwae, EstimatorId::Iwae, k)?.snr));
    }
    let (si, sd, vd) = (slope(&snr_i)?, slope(&snr_d)?, slope(&var_d)?);
    let ok = (-0.65..=-0.35).contains(&si) && (0.35..=0.65).contains(&sd) && (-3.3..=-2.7).contains(&vd);
    check(
        ok,
        format!("SNR slope iwae {si:.3} (sigma 0.1), iwae-dreg {sd:.3}; iwae-dreg variance slope {vd:.3}"),
    )
}

fn criterion_2() -> Outcome {
    let mut cfg = toy_config(&["iwae-dreg", "rws-dreg", "jvi1-dreg", "stl"], &[64]);
    cfg.experiment = Experiment::BiasTest;
    cfg.measurement.samples = 100_000;
    let entries = bias_test::battery(&cfg).map_err(|e| e.to_string())?;
    let mut ok = entries.len() == 4;
    let mut parts = Vec::new();
    for e in &entries {
        let p = e.min_p();
        let pass = if e.estimator == EstimatorId::Stl { p < 1e-3 } else { p >= 0.01 };
        ok &= pass && e.tests.iter().all(|t| t.n == 100_000);
        parts.push(format!("{} vs {} min p {p:.3e}", e.estimator, e.reference));
    }
    check(ok, parts.join("; "))
}

fn toy_batch(m: &ToyModel, p: &ParamVector, x: &[f64], k: usize, draw: u64) -> Result<LogWeightBatch, String> {
    let eps = NoiseBatch::draw(31, 4, draw, k, m.dim());
    log_weights(m, p, x, &eps).map_err(|e| e.to_string())
}

fn surrogate_grad<M: LatentModel>(kind: SurrogateKind, m: &M, p: &ParamVector, x: &[f64], eps: &NoiseBatch) -> Result<Vec<f64>, String> {
    let mut g = TapeGraph::new();
    let leaves = g.leaves_from(p.flat()).map_err(|e| e.to_string())?;
    let s = surrogate_loss(kind, m, &mut g, &leaves, x, eps).map_err(|e| e.to_string())?;
    Ok(g.backward(s).map_err(|e| e.to_string())?.wrt_all(&leaves))
}

/// Dense ascent direction of the direct estimator a surrogate encodes; the
/// RWS inference updates are descent directions, hence the negation.
fn direct(kind: SurrogateKind, lw: &LogWeightBatch, p: &ParamVector) -> Result<Vec<f64>, String> {
    let r = p.roles();
    let est = match kind {
        SurrogateKind::Iwae => iwae_grad_standard(lw),
        SurrogateKind::DregIwae => iwae_grad_dreg(lw),
        SurrogateKind::Stl => iwae_grad_stl(lw),
        SurrogateKind::DregAlpha(a) => dreg_alpha_phi_grad(a, lw),
        SurrogateKind::Rws | SurrogateKind::DregRws => {
            let phi = if kind == SurrogateKind::Rws { rws_wake_phi_grad(lw) } else { rws_dreg_phi_grad(lw) };
            phi.and_then(|mut g| {
                g.phi_grad.iter_mut().for_each(|v| *v = -*v);
                g.theta_grad = rws_theta_grad(lw)?.theta_grad;
                Ok(g)
            })
        }
    };
    Ok(est.map_err(|e| e.to_string())?.dense(r))
}

const KINDS: [SurrogateKind; 6] = [
    SurrogateKind::Iwae,
    SurrogateKind::DregIwae,
    SurrogateKind::Rws,
    SurrogateKind::DregRws,
    SurrogateKind::Stl,
    SurrogateKind::DregAlpha(0.3),
];

fn criterion_3() -> Outcome {
    let tol = 1e-12;
    let m = ToyModel::new(3);
    let x = [0.4, -1.3, 2.2];
    let p = m
        .optimal_params(&[0.5, -0.2, 1.1])
        .map_err(|e| e.to_string())?
        .perturbed(0.3, 7, 0);
    for draw in 0..20 {
        let one = toy_batch(&m, &p, &x, 1, draw)?;
        let dreg1 = iwae_grad_dreg(&one).map_err(|e| e.to_string())?;
        rel_close(&dreg1.phi_grad, &iwae_grad_stl(&one).map_err(|e| e.to_string())?.phi_grad, tol)
            .map_err(labelled("K=1 DReG vs STL"))?;
        if rws_dreg_phi_grad(&one).map_err(|e| e.to_string())?.phi_grad.iter().any(|&v| v != 0.0) {
            return Err("K=1 RWS-DReG is not zero".into());
        }
        for k in [2, 5, 16] {
            let lw = toy_batch(&m, &p, &x, k, draw)?;
            let dreg = iwae_grad_dreg(&lw).map_err(|e| e.to_string())?;
            let a0 = dreg_alpha_phi_grad(0.0, &lw).map_err(|e| e.to_string())?;
            rel_close(&a0.phi_grad, &dreg.phi_grad, tol).map_err(labelled("alpha 0 vs DReG"))?;
            let a1 = dreg_alpha_phi_grad(1.0, &lw).map_err(|e| e.to_string())?;
            let neg: Vec<f64> = rws_dreg_phi_grad(&lw).map_err(|e| e.to_string())?.phi_grad.iter().map(|v| -v).collect();
            rel_close(&a1.phi_grad, &neg, tol).map_err(labelled("alpha 1 vs -RWS-DReG"))?;
            rel_close(
                &rws_theta_grad(&lw).map_err(|e| e.to_string())?.theta_grad,
                &iwae_grad_standard(&lw).map_err(|e| e.to_string())?.theta_grad,
                tol,
            )
            .map_err(labelled("RWS theta vs IWAE theta"))?;
        }
    }

    // Surrogates with disjoint parameters: the untied toy model and the
    // autoencoder.
    let eps = NoiseBatch::draw(3, 9, 0, 6, 3);
    let lw = log_weights(&m, &p, &x, &eps).map_err(|e| e.to_string())?;
    let vae = MlpVae::new(3, 5, 8);
    let vp = vae.init_scaled(4, 1.3);
    let vx = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
    let veps = NoiseBatch::draw(3, 10, 0, 5, 3);
    let vlw = log_weights(&vae, &vp, &vx, &veps).map_err(|e| e.to_string())?;
    for kind in KINDS {
        rel_close(&surrogate_grad(kind, &m, &p, &x, &eps)?, &direct(kind, &lw, &p)?, tol)
            .map_err(|err| format!("toy surrogate {kind}: {err}"))?;
        rel_close(&surrogate_grad(kind, &vae, &vp, &vx, &veps)?, &direct(kind, &vlw, &vp)?, tol)
            .map_err(|err| format!("autoencoder surrogate {kind}: {err}"))?;
    }

    // Exact posterior: every per-sample path term vanishes.
    let exact = ToyModel::new(3).with_q_variance(POSTERIOR_VARIANCE);
    let po = exact.optimal_params(&[0.5, -0.2, 1.1]).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for draw in 0..20 {
        let lw = log_weights(&exact, &po, &x, &NoiseBatch::draw(5, 1, draw, 8, 3)).map_err(|e| e.to_string())?;
        let phi = po.phi_indices();
        for s in lw.samples() {
            worst = phi.iter().fold(worst, |w, &i| w.max(s.path[i].abs()));
        }
        worst = iwae_grad_dreg(&lw).map_err(|e| e.to_string())?.phi_grad.iter().fold(worst, |w, v| w.max(v.abs()));
    }
    check(
        worst <= tol,
        format!("all identities hold at 1e-12; largest DReG term at the exact posterior {worst:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    // Surrogate gradients against central differences, with shared
    // parameters (tied toy) and disjoint ones (untied toy, autoencoder).
    let tied = ToyModel::tied(2);
    let tp = tied.params(&[0.3, -0.6], &[0.4, 0.1, -0.2, 0.6], &[]).map_err(|e| e.to_string())?;
    let untied = ToyModel::new(2);
    let up = untied.optimal_params(&[0.3, -0.6]).map_err(|e| e.to_string())?.perturbed(0.2, 1, 0);
    let x = [0.8, 0.2];
    let eps = NoiseBatch::draw(5, 0, 0, 4, 2);
    let vae = MlpVae::new(2, 3, 4);
    let vp = vae.init_scaled(6, 1.2);
    let vx = [1.0, 0.0, 1.0, 1.0];
    let kinds = KINDS.into_iter().chain([SurrogateKind::DregAlpha(0.0), SurrogateKind::DregAlpha(1.0)]);
    let mut worst: f64 = 0.0;
    for kind in kinds {
        let toy_err = |m: &ToyModel, p: &ParamVector| {
            finite_diff_check(
                |g, v| Ok(surrogate_loss_anchored(kind, m, g, v, p.flat(), &x, &eps).expect("surrogate")),
                p.flat(),
                1e-6,
            )
        };
        worst = worst.max(toy_err(&tied, &tp).map_err(|e| e.to_string())?);
        worst = worst.max(toy_err(&untied, &up).map_err(|e| e.to_string())?);
        let v = finite_diff_check(
            |g, v| Ok(surrogate_loss_anchored(kind, &vae, g, v, vp.flat(), &vx, &eps).expect("surrogate")),
            vp.flat(),
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(v);
    }

    // E_q[f(z) d/dphi log q(z)] = E_eps[f'(z) dz/dphi] with f = log w at
    // fixed phi, by trapezoid quadrature over eps on the d = 1 model.
    let m = ToyModel::new(1);
    let p = m.params(&[0.4], &[0.7], &[-0.3]).map_err(|e| e.to_string())?;
    let x1 = [1.1];
    let (lo, hi, n) = (-12.0, 12.0, 24_000);
    let h = (hi - lo) / n as f64;
    let phi = p.phi_indices();
    let mut reinforce = vec![0.0; phi.len()];
    let mut reparam = vec![0.0; phi.len()];
    for i in 0..=n {
        let e = lo + i as f64 * h;
        let wt = if i == 0 || i == n { 0.5 } else { 1.0 } * h * (-0.5 * e * e - 0.5 * LN_2PI).exp();
        let s = m.sample_partials(p.flat(), &x1, &[e]).map_err(|e| e.to_string())?;
        for (c, &j) in phi.iter().enumerate() {
            reinforce[c] += wt * s.log_w * s.score[j];
            reparam[c] += wt * s.path[j];
        }
    }
    let identity_err = reinforce.iter().zip(&reparam).fold(0.0f64, |w, (a, b)| w.max((a - b).abs()));

    // Closed-form marginal against a z-grid quadrature of the joint.
    let mut g = TapeGraph::new();
    let leaves = g.leaves_from(p.flat()).map_err(|e| e.to_string())?;
    let (zlo, zhi, zn) = (-15.0, 15.0, 30_000);
    let zh = (zhi - zlo) / zn as f64;
    let mut lj = Vec::with_capacity(zn + 1);
    for i in 0..=zn {
        let z = g.constant(zlo + i as f64 * zh).map_err(|e| e.to_string())?;
        lj.push(m.log_joint(&mut g, &leaves, &x1, &[z]).map_err(|e| e.to_string())?.value());
    }
    let quad = dreg_lab::estimators::log_sum_exp(&lj) + zh.ln();
    let marginal_err = (quad - m.log_marginal(&p, &x1).map_err(|e| e.to_string())?).abs();
    check(
        worst < 1e-5 && identity_err < 1e-6 && marginal_err < 1e-5,
        format!(
            "finite differences rel err {worst:.1e}; score/path identity err {identity_err:.1e}; marginal err {marginal_err:.1e}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let m = ToyModel::new(1);
    let p = m.optimal_params(&[0.3]).map_err(|e| e.to_string())?;
    let x = [1.1];
    let truth = m.log_marginal(&p, &x).map_err(|e| e.to_string())?;
    let n = 100_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [4usize, 8, 16] {
        let (mut si, mut si2, mut sj, mut sj2, mut sd, mut sd2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let mut lw = vec![0.0; k];
        for r in 0..n as u64 {
            let eps = NoiseBatch::draw(17, k as u64, r, k, 1);
            for (i, l) in lw.iter_mut().enumerate() {
                *l = m.log_weight_value(p.flat(), &x, eps.row(i)).map_err(|e| e.to_string())?;
            }
            let b = iwae_bound(&lw).map_err(|e| e.to_string())? - truth;
            let j = jvi1_estimate(&lw).map_err(|e| e.to_string())? - truth;
            si += b;
            si2 += b * b;
            sj += j;
            sj2 += j * j;
            sd += b - j;
            sd2 += (b - j) * (b - j);
        }
        let nf = n as f64;
        let se = |s: f64, s2: f64| ((s2 / nf - (s / nf).powi(2)) * nf / (nf - 1.0) / nf).sqrt();
        let (gi, gj) = (si / nf, sj / nf);
        let (ei, ej, ed) = (se(si, si2), se(sj, sj2), se(sd, sd2));
        // The IWAE gap is resolved from zero, and the reduction in gap is
        // resolved by the paired difference of the two estimates.
        let pass = gj.abs() < gi.abs() && gi.abs() > 3.0 * ei && gi.abs() - gj.abs() > 3.0 * ed;
        ok &= pass;
        parts.push(format!("K={k}: iwae gap {gi:.2e} (se {ei:.1e}), jvi gap {gj:.2e} (se {ej:.1e}), paired se {ed:.1e}"));
    }
    check(ok, parts.join("; "))
}

fn criterion_6() -> Outcome {
    let mut cfg = ExperimentConfig {
        experiment: Experiment::Train,
        ..Default::default()
    };
    cfg.model.kind = ModelKind::Vae;
    cfg.model.latent_dim = 10;
    cfg.model.hidden_dim = 20;
    cfg.model.obs_dim = 64;
    cfg.training.max_steps = 2000;
    let data = train::load_data(&cfg).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    let mut traces = Vec::new();
    for id in [EstimatorId::Iwae, EstimatorId::IwaeDreg, EstimatorId::RwsDreg, EstimatorId::Jvi1Dreg] {
        let run = train::train_one(&cfg, &data, id, 8).map_err(|e| e.to_string())?;
        let gain = run.final_bound() - run.initial_bound();
        ok &= gain >= 1.0 && run.rows.last().map(|r| r.step) == Some(2000);
        parts.push(format!("{id} +{gain:.2} nats"));
        if matches!(id, EstimatorId::Iwae | EstimatorId::IwaeDreg) {
            traces.push(run.rows);
        }
    }
    let after: Vec<(f64, f64)> = traces[0]
        .iter()
        .zip(&traces[1])
        .filter(|(a, _)| a.step > 200)
        .map(|(a, b)| (a.var_trace_phi, b.var_trace_phi))
        .collect();
    let below = after.iter().filter(|(a, b)| b < a).count() as f64 / after.len() as f64;
    ok &= below >= 0.9;
    parts.push(format!("iwae-dreg phi trace below iwae at {:.1}% of steps after 200", 100.0 * below));
    check(ok, parts.join("; "))
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).expect("write config");
    p
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("read output")
        .map(|e| e.expect("entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = tmp.path();
    let configs = [
        (
            "toy-snr",
            "experiment = \"toy-snr\"\nseed = 3\n[estimator]\nk_grid = [2, 8]\n[measurement]\ntrials = 2\nsamples = 200\nreference_samples = 100\n",
        ),
        (
            "bias-test",
            "experiment = \"bias-test\"\nseed = 4\n[estimator]\nk_grid = [4]\n[measurement]\nsamples = 500\n",
        ),
        (
            "train",
            "experiment = \"train\"\nseed = 5\n[model]\nkind = \"vae\"\nlatent_dim = 3\nhidden_dim = 6\nobs_dim = 16\n\
             [estimator]\nids = [\"iwae-dreg\", \"rws-wake\", \"jvi1\"]\nk_grid = [4]\n\
             [training]\nmax_steps = 40\neval_images = 20\n[data]\nsynthetic_size = 200\n",
        ),
    ];
    let mut parts = Vec::new();
    for (cmd, text) in configs {
        let cfg = write_config(t, &format!("{cmd}.toml"), text);
        let first = t.join(format!("{cmd}-a"));
        let second = t.join(format!("{cmd}-b"));
        let code = main_with_args(["dreg-lab", cmd, "--config", cfg.to_str().unwrap(), "--out", first.to_str().unwrap()]);
        if code != 0 {
            return Err(format!("{cmd} exited with {code}"));
        }
        let manifest = first.join("manifest.toml");
        let code = main_with_args([
            "dreg-lab",
            cmd,
            "--config",
            manifest.to_str().unwrap(),
            "--out",
            second.to_str().unwrap(),
        ]);
        if code != 0 {
            return Err(format!("{cmd} rerun exited with {code}"));
        }
        let (a, b) = (csv_files(&first), csv_files(&second));
        if a.is_empty() || a != b {
            return Err(format!("{cmd}: CSV output differs on rerun"));
        }
        parts.push(format!("{cmd} {} CSV", a.len()));
    }
    Ok(format!("byte-identical reruns from manifests: {}", parts.join(", ")))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 7] = [
        ("toy SNR and variance scaling", criterion_1),
        ("unbiasedness battery", criterion_2),
        ("exact identities", criterion_3),
        ("oracle equivalences", criterion_4),
        ("JVI debiasing", criterion_5),
        ("desk-scale training", criterion_6),
        ("determinism", criterion_7),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = f();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {}: PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
