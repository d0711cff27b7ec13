use dreg_lab::cli::config::{Experiment, ModelKind};
use dreg_lab::cli::{train, ExperimentConfig};
use dreg_lab::estimators::EstimatorId;

fn desk() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        experiment: Experiment::Train,
        ..Default::default()
    };
    cfg.model.kind = ModelKind::Vae;
    cfg.model.latent_dim = 10;
    cfg.model.hidden_dim = 20;
    cfg.model.obs_dim = 64;
    cfg.training.max_steps = 500;
    cfg.training.log_every = 50;
    cfg.training.eval_images = 200;
    cfg
}

#[test]
fn five_hundred_steps_beat_the_initialization() {
    let cfg = desk();
    let data = train::load_data(&cfg).unwrap();
    for id in [EstimatorId::IwaeDreg, EstimatorId::RwsWake] {
        let run = train::train_one(&cfg, &data, id, 8).unwrap();
        assert!(run.final_bound() > run.initial_bound(), "{id}: {} -> {}", run.initial_bound(), run.final_bound());
        assert_ne!(run.params, train::initial_params(&cfg));
    }
}

#[test]
fn matched_seeds_share_the_starting_point() {
    let mut cfg = desk();
    cfg.training.max_steps = 20;
    cfg.training.log_every = 10;
    let data = train::load_data(&cfg).unwrap();
    let a = train::train_one(&cfg, &data, EstimatorId::Iwae, 4).unwrap();
    let b = train::train_one(&cfg, &data, EstimatorId::IwaeDreg, 4).unwrap();
    assert_eq!(a.rows[0].heldout_bound, b.rows[0].heldout_bound);
    assert_eq!(a.rows[0].train_objective, b.rows[0].train_objective);
    assert_eq!(a.rows[0].var_trace_theta, b.rows[0].var_trace_theta);
    assert_ne!(a.rows[2].heldout_bound, b.rows[2].heldout_bound);
}

#[test]
fn jvi_training_reports_the_jackknife_estimate() {
    let mut cfg = desk();
    cfg.training.max_steps = 20;
    cfg.training.log_every = 10;
    let data = train::load_data(&cfg).unwrap();
    let run = train::train_one(&cfg, &data, EstimatorId::Jvi1, 4).unwrap();
    assert_eq!(run.jvi_rows.len(), run.rows.len());
    assert!(run.jvi_rows.iter().all(|r| r.heldout_jvi.is_finite()));
}
