//! Training runs end to end at toy scale: determinism, resume, metrics and
//! plot aggregation.

use mvd_core::harness::{aggregate, plot_export, resolve, Checkpoint, MetricsTable, RunConfig, Trainer};

fn tiny(extra: &str) -> RunConfig {
    let text = format!(
        "[env]\nimage_size = 16\nepisode_length = 10\n\
         [algo]\nbatch_size = 4\ninit_steps = 20\nhidden_dim = 16\nrepr_dim = 4\nreplay_capacity = 300\n\
         [run]\ntotal_steps = 80\neval_interval = 20\neval_episodes = 2\ncheckpoint_interval = 40\n{extra}"
    );
    resolve(&text, "tiny", None).unwrap()
}

fn read(p: &std::path::Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn same_seed_gives_identical_metrics_and_other_seeds_differ() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: u64, name: &str| {
        let out = dir.path().join(name);
        let mut t = Trainer::new(tiny(""), seed, &out).unwrap();
        t.run_until(80).unwrap();
        read(&out.join("metrics.csv"))
    };
    let a = run(1, "a");
    assert_eq!(a, run(1, "b"));
    assert_ne!(a, run(2, "c"));
}

#[test]
fn resumed_runs_match_uninterrupted_ones_bitwise() {
    for mode in ["sac", "drq"] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny("");
        cfg.algo.mode = if mode == "sac" { mvd_core::rl::AlgoMode::Sac } else { mvd_core::rl::AlgoMode::Drq };
        let full = dir.path().join("full");
        let mut t = Trainer::new(cfg.clone(), 5, &full).unwrap();
        t.run_until(140).unwrap();
        let full_params = t.checkpoint();

        // Resume from the mid-episode checkpoint at step 40: 100 more steps.
        let ckpt = Checkpoint::load(&full.join("step_40.ckpt")).unwrap();
        let resumed = dir.path().join("resumed");
        let mut r = Trainer::resume(&ckpt, &resumed).unwrap();
        assert_eq!(r.env_step(), 40);
        r.run_until(140).unwrap();
        assert_eq!(read(&full.join("metrics.csv")), read(&resumed.join("metrics.csv")), "{mode}");
        for name in full_params.names().filter(|n| n.starts_with("param/") || n.starts_with("adam/")) {
            assert_eq!(full_params.get(name).unwrap(), r.checkpoint().get(name).unwrap(), "{mode}: {name}");
        }
    }
}

#[test]
fn metrics_are_parseable_mid_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny(""), 0, dir.path()).unwrap();
    let mut last_rows = 0;
    for target in [10, 25, 47, 80] {
        t.run_until(target).unwrap();
        let table = MetricsTable::read(t.metrics_path()).unwrap();
        let steps = table.series("env_step");
        assert!(steps.len() >= last_rows);
        last_rows = steps.len();
        assert_eq!(table.columns[0], "env_step");
    }
    let table = MetricsTable::read(t.metrics_path()).unwrap();
    let evals = table.series("success_all");
    assert_eq!(evals.iter().map(|p| p.0).collect::<Vec<_>>(), vec![20.0, 40.0, 60.0, 80.0]);
    // Updates start at init_steps.
    let critic = table.series("loss_critic");
    assert_eq!(critic[0].0, 20.0);
    assert!(!table.series("loss_mvd").is_empty());
}

#[test]
fn aggregation_matches_hand_computation_on_three_files() {
    let files = [
        "env_step,success_all,success_ego\n10,0.2,0.5\n20,0.4,1\n",
        "env_step,success_all,success_ego\n10,0.6,0.5\n20,0.8,0\n",
        "env_step,success_all,success_ego\n10,1,0.5\n20,0.3,0.5\n",
    ];
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.path().join(format!("m{i}.csv"));
            std::fs::write(&p, f).unwrap();
            p
        })
        .collect();
    let agg = plot_export(&paths, &dir.path().join("plots")).unwrap();
    assert!(agg.warnings.is_empty());
    // Population mean and standard deviation, worked by hand.
    let hand = |v: [f64; 3]| {
        let m = (v[0] + v[1] + v[2]) / 3.0;
        let var = ((v[0] - m).powi(2) + (v[1] - m).powi(2) + (v[2] - m).powi(2)) / 3.0;
        (m, var.sqrt())
    };
    let expect = [
        ("all", [hand([0.2, 0.6, 1.0]), hand([0.4, 0.8, 0.3])]),
        ("ego", [(0.5, 0.0), hand([1.0, 0.0, 0.5])]),
    ];
    for ((cond, pts), (want_cond, want)) in agg.conditions.iter().zip(expect) {
        assert_eq!(cond, want_cond);
        for (p, (m, s)) in pts.iter().zip(want) {
            assert!((p.mean - m).abs() < 1e-12 && (p.std - s).abs() < 1e-12, "{cond}: {p:?} vs {m} {s}");
            assert_eq!(p.n, 3);
        }
    }
    let csv = read(&dir.path().join("plots/curves.csv"));
    assert!(csv.starts_with("condition,env_step,mean,std,n\nall,10,"));
    assert!(dir.path().join("plots/success_ego.svg").exists());

    // Two identical files: mean equals either, zero band.
    let t = MetricsTable::parse(files[0]).unwrap();
    let twin = aggregate(&[t.clone(), t]).unwrap();
    assert!(twin.conditions.iter().all(|(_, pts)| pts.iter().all(|p| p.std == 0.0)));
    assert_eq!(twin.conditions[0].1[1].mean, 0.4);
}
