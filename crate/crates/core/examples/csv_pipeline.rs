//! The batch pipeline driven through the CLI entry point: simulate a data
//! set, stack a small grid over it, and score the stacked predictions.

use std::fs;

fn main() {
    let dir = std::env::temp_dir().join("trajstack-csv-pipeline");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    fs::write(
        dir.join("run.toml"),
        r#"
[simulate]
family = "continuous_dgp"
path_len = 200
n_train = 100
n_holdout = 50
p = 2
sigma = 1.0
delta_beta = 1.0
delta_z = 1.0
phi1 = 0.5
phi2 = 0.5
xi = 0.5
covariate_sd = 2.0
seed = 0

[data]
path = "sim/data.csv"
truth = "sim/truth.csv"

[stacking]
folds = { scheme = "random_k_fold", k = 5 }

[stacking.continuous]
phi1 = [0.5, 2.0]
phi2 = [0.5]
xi = [0.5]
delta_beta = [1.0, 3.0]
delta_z = [1.0]
predictive = "full"

[metrics]
predictions = "stack/predictions.csv"
truth = "sim/truth.csv"
"#,
    )
    .unwrap();
    let cfg = dir.join("run.toml");
    let cfg = cfg.to_str().unwrap();
    for (cmd, out) in [("simulate", "sim"), ("stack", "stack"), ("metrics", "scored")] {
        let out = dir.join(out);
        let code = trajstack::cli::main_with_args(["trajstack", cmd, "--config", cfg, "--seed", "42", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{cmd} failed");
    }
    println!("{}", fs::read_to_string(dir.join("stack/weights.csv")).unwrap());
    println!("{}", fs::read_to_string(dir.join("scored/metrics.csv")).unwrap());
}
