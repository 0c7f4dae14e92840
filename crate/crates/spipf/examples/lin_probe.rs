use spipf::harness::{Algorithm, ConfigFile};

fn main() {
    let text = r#"
[system]
name = "bouncing_ball"
horizon = 0.7
sigma_b = 0.01

[filter]
K = 50
H = 10
dt = 0.01
epsilon = 0.1
gamma_thres = 0.5
resampling_enabled = true
seed = 20250810

[[filter.prior.modes]]
mode = 0
prob = 1.0
mean = [1.0, 0.0]
cov_diag = [0.01, 0.01]

[experiment]
sweep = "none"
n_trials = 1
algorithms = ["spipf"]
output_dir = "/tmp/dbg"
"#;
    let cfg: ConfigFile = toml::from_str(text).unwrap();
    let fc = cfg.build_filter_config();
    for trial in [2usize] { let r = spipf::harness::run_trial(&cfg, &fc, f64::NAN, trial, &[Algorithm::Spipf]); println!("trial {trial}: post {:.4} mean {:.4}", r.algos[0].post_mean_mse, r.algos[0].mean_mse); }
    let r = spipf::harness::run_trial(&cfg, &fc, f64::NAN, 2, &[Algorithm::Spipf]);
    let a = &r.algos[0];
    let tr = r.true_transition_step.unwrap();
    println!("impact step {tr}");
    for j in 40..a.sq_err.len() {
        println!("step {j:3}: sqerr {:9.4} esse {:.3} acc {}", a.sq_err[j], a.esse[j], a.mode_correct[j]);
    }
}
