use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sohkit::analysis::correlation_report;
use sohkit::estimation::{run_scenario, ModelSpec, Scenario, Target};
use sohkit::io;
use sohkit::simulator::{campaign_features, extract_campaign, CampaignSpec, CellSpec, Protocol};
use sohkit::{Feature, Indicator, ToolkitConfig};
use tempfile::TempDir;

fn sohkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sohkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sohkit(args);
    assert!(
        out.status.success(),
        "sohkit {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn spec() -> CampaignSpec {
    let cells = [("A", 0.25), ("B", 0.5), ("C", 1.0)]
        .iter()
        .map(|(id, rate)| CellSpec {
            fade_ah_per_cycle: 0.0015 * 4.85,
            r_growth_ohm_per_cycle: 2e-5,
            sigma_v: 1e-3,
            sigma_i: 1e-3,
            ..CellSpec::new(id, *rate)
        })
        .collect();
    CampaignSpec {
        seed: 5,
        dt_s: 1.0,
        batches: vec![6; 4],
        cells,
        protocol: Protocol::default(),
    }
}

/// A simulated campaign on disk.
struct Campaign {
    dir: TempDir,
    spec: CampaignSpec,
}

impl Campaign {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let spec = spec();
        io::write_json(&dir.path().join("spec.json"), &spec).unwrap();
        ok(&["simulate", "--spec", p(&dir.path().join("spec.json")), "--out", p(&dir.path().join("data"))]);
        Self { dir, spec }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn extract(&self, out: &str, extra: &[&str]) -> PathBuf {
        let target = self.path(out);
        let manifest = self.path("data/manifest.json");
        let mut args = vec!["extract", "--manifest", p(&manifest), "--out", p(&target)];
        args.extend_from_slice(extra);
        ok(&args);
        target
    }

    fn features(&self) -> PathBuf {
        let f = self.path("features.csv");
        self.extract(
            "ind.csv",
            &["--rpt", p(&self.path("data/rpt.csv")), "--features-out", p(&f)],
        );
        f
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_deterministic_and_counts_cycles() {
    let c = Campaign::new();
    ok(&["simulate", "--spec", p(&c.path("spec.json")), "--out", p(&c.path("again"))]);
    assert_eq!(tree(&c.path("data")), tree(&c.path("again")));
    let manifest = io::Manifest::load(&c.path("data/manifest.json")).unwrap();
    assert_eq!(manifest.cycles.len(), 3 * 24);
    let rpts = io::read_rpt_csv(&c.path("data/rpt.csv")).unwrap();
    assert_eq!(rpts.len(), 3 * 5);

    ok(&["simulate", "--spec", p(&c.path("spec.json")), "--out", p(&c.path("reseeded")), "--seed", "6"]);
    let ledger: serde_json::Value = io::read_json(&c.path("reseeded/ledger.json")).unwrap();
    assert_eq!(ledger["seed"], 6);
    assert_ne!(
        fs::read(c.path("data/cycles/A/cycle_0001.csv")).unwrap(),
        fs::read(c.path("reseeded/cycles/A/cycle_0001.csv")).unwrap()
    );
}

#[test]
fn extract_matches_the_library_for_any_job_count() {
    let c = Campaign::new();
    let one = c.extract("ind1.csv", &["--jobs", "1"]);
    let three = c.extract("ind3.csv", &["--jobs", "3"]);
    assert_eq!(fs::read(&one).unwrap(), fs::read(&three).unwrap());

    let (rows, _) = extract_campaign(&c.spec, &ToolkitConfig::default()).unwrap();
    assert_eq!(rows.len(), 72);
    let golden = c.path("golden.csv");
    io::write_indicators_csv(&golden, &rows).unwrap();
    assert_eq!(fs::read(&one).unwrap(), fs::read(&golden).unwrap());
}

#[test]
fn extract_uses_the_configured_windows() {
    let c = Campaign::new();
    let cfg_path = c.path("narrow.toml");
    fs::write(&cfg_path, "[windows]\ne_ch = [3.65, 3.85]\n").unwrap();
    let out = c.extract("ind.csv", &["--config", p(&cfg_path)]);
    let config = ToolkitConfig::load(&cfg_path).unwrap();
    let (rows, _) = extract_campaign(&c.spec, &config).unwrap();
    let got = io::read_indicators_csv(&out).unwrap();
    let default = extract_campaign(&c.spec, &ToolkitConfig::default()).unwrap().0;
    for ((g, want), d) in got.iter().zip(&rows).zip(&default) {
        assert_eq!(g.get(Indicator::ECh), want.get(Indicator::ECh));
        assert!(g.get(Indicator::ECh).unwrap() < d.get(Indicator::ECh).unwrap());
    }
}

#[test]
fn extract_feature_selection_blanks_other_columns() {
    let c = Campaign::new();
    let out = c.extract("ind.csv", &["--features", "E_ch,E_dis"]);
    for r in io::read_indicators_csv(&out).unwrap() {
        assert_eq!(r.valid_mask(), "000011");
    }
}

#[test]
fn extract_fails_only_when_nothing_succeeds() {
    let c = Campaign::new();
    let first = c.path("data/cycles/A/cycle_0001.csv");
    fs::write(&first, "time_s,voltage_V,current_A\n0,3.5,1\n").unwrap();
    let out = c.extract("ind.csv", &[]);
    let rows = io::read_indicators_csv(&out).unwrap();
    assert_eq!(rows.len(), 72);
    assert_eq!(rows[0].valid_mask(), "000000");

    let dir = c.path("broken");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("x.csv"), "time_s,voltage_V\n0,3.5\n").unwrap();
    fs::write(
        dir.join("manifest.json"),
        r#"[{"cell_id":"X","cycle_index":1,"batch_index":1,"cc_a_rate":0.5,"file":"x.csv"}]"#,
    )
    .unwrap();
    let out = sohkit(&["extract", "--manifest", p(&dir.join("manifest.json")), "--out", p(&dir.join("o.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("current_A"));

    fs::write(dir.join("x.csv"), "time_s,voltage_V,current_A\n0,3.5,1\n1,3.5,1\n").unwrap();
    let out = sohkit(&["extract", "--manifest", p(&dir.join("manifest.json")), "--out", p(&dir.join("o.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn correlate_matches_the_library() {
    let c = Campaign::new();
    let features = c.features();
    let out = c.path("corr.csv");
    ok(&["correlate", "--matrix", p(&features), "--out", p(&out)]);
    let (rows, ledger) = extract_campaign(&c.spec, &ToolkitConfig::default()).unwrap();
    let matrix = campaign_features(&rows, &ledger, 1.0).unwrap();
    let golden = c.path("golden.csv");
    io::write_correlation_csv(&golden, &correlation_report(&matrix, &Feature::ALL, true)).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap(), fs::read_to_string(&golden).unwrap());

    let via_tables = c.path("corr2.csv");
    ok(&[
        "correlate",
        "--indicators",
        p(&c.path("ind.csv")),
        "--rpt",
        p(&c.path("data/rpt.csv")),
        "--out",
        p(&via_tables),
    ]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&via_tables).unwrap());
}

#[test]
fn sweep_writes_fifteen_windows_per_cell() {
    let c = Campaign::new();
    let run = |dir: &str, jobs: &str| {
        ok(&[
            "sweep",
            "--kind",
            "impedance",
            "--manifest",
            p(&c.path("data/manifest.json")),
            "--rpt",
            p(&c.path("data/rpt.csv")),
            "--out-dir",
            p(&c.path(dir)),
            "--jobs",
            jobs,
        ]);
    };
    run("s1", "1");
    run("s2", "2");
    assert_eq!(tree(&c.path("s1")), tree(&c.path("s2")));
    for cell in ["A", "B", "C"] {
        let text = fs::read_to_string(c.path(&format!("s1/{cell}.csv"))).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 16);
        assert!(lines[1].starts_with("3.6,3.65,"));
    }
}

#[test]
fn train_estimate_report_round_trip() {
    let c = Campaign::new();
    let features = c.features();
    let model = c.path("model.json");
    ok(&[
        "train", "--scenario", "single:B", "--matrix", p(&features), "--features", "dE_ch,dE_dis", "--model", "lrm",
        "--out", p(&model),
    ]);
    let eval = c.path("eval");
    ok(&["estimate", "--model", p(&model), "--matrix", p(&features), "--out-dir", p(&eval)]);
    let mut names: Vec<String> = fs::read_dir(&eval)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["A.csv", "C.csv"]);

    let matrix = io::read_features_csv(&features).unwrap();
    let data = matrix.select(&[Feature::ECh, Feature::EDis]).unwrap();
    let lib = run_scenario(&data, &Scenario::SingleTrain("B".into()), &ModelSpec::Lrm, Target::Capacity).unwrap();
    for cell in ["A", "C"] {
        let got = io::read_evaluation_csv(&eval.join(format!("{cell}.csv"))).unwrap();
        assert_eq!(got.q_est_ah, lib.reports[cell].q_est_ah);
        assert_eq!(got.max_ape_pct, lib.reports[cell].max_ape_pct);
    }

    let summary = c.path("summary.json");
    let tracks = c.path("tracks.csv");
    ok(&["report", "--eval-dir", p(&eval), "--out", p(&summary), "--tracks", p(&tracks)]);
    let schema: serde_json::Value =
        io::read_json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json")).unwrap();
    let doc: serde_json::Value = io::read_json(&summary).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    let max = lib.max_ape_pct();
    assert_eq!(doc["max_ape_pct"].as_f64().unwrap(), max);
    assert_eq!(fs::read_to_string(&tracks).unwrap().lines().count(), 1 + 48);

    let again = c.path("summary2.json");
    ok(&["report", "--eval-dir", p(&eval), "--out", p(&again)]);
    assert_eq!(fs::read(&summary).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn loo_training_writes_one_model_per_fold() {
    let c = Campaign::new();
    let features = c.features();
    let model = c.path("loo.json");
    ok(&["train", "--scenario", "loo", "--matrix", p(&features), "--features", "dE_ch,dE_dis", "--out", p(&model)]);
    let file = io::read_models(&model).unwrap();
    assert_eq!(file.models().len(), 3);
    let eval = c.path("eval");
    ok(&["estimate", "--model", p(&model), "--matrix", p(&features), "--out-dir", p(&eval)]);
    assert_eq!(fs::read_dir(&eval).unwrap().count(), 3);
}

#[test]
fn armax_grid_logs_sixty_four_points() {
    let c = Campaign::new();
    let features = c.features();
    let log = c.path("grid.csv");
    let model = c.path("armax.json");
    let args = [
        "train", "--scenario", "single:A", "--matrix", p(&features), "--features", "dE_ch,dE_dis", "--model", "armax",
        "--armax-grid", "0:3", "--out", p(&model), "--grid-log", p(&log),
    ];
    ok(&args);
    let text = fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 1 + 64);
    assert_eq!(text.lines().filter(|l| l.contains(",true,")).count(), 1);
    let first = fs::read(&model).unwrap();
    ok(&args);
    assert_eq!(fs::read(&model).unwrap(), first);
    assert_eq!(fs::read_to_string(&log).unwrap(), text);
}

#[test]
fn input_errors_exit_with_two() {
    let c = Campaign::new();
    let out = sohkit(&["simulate", "--spec", "/no/such/spec.json", "--out", p(&c.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/spec.json"));

    let bad = c.path("bad.csv");
    fs::write(&bad, "cell_id,cycle,dP_autocorr,dR,dE_ch,dE_dis,Q_Ah,Q_loss_pct\nA,1,0,0,0,0,4.8,0\n").unwrap();
    let out = sohkit(&["correlate", "--matrix", p(&bad), "--out", p(&c.path("corr.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dZ_norm"));

    let cfg = c.path("bad.toml");
    fs::write(&cfg, "[windows]\nnot_a_key = 1\n").unwrap();
    let out = sohkit(&["--config", p(&cfg), "extract", "--manifest", "m.json", "--out", "o.csv"]);
    assert_eq!(out.status.code(), Some(2));

    let out = sohkit(&["train", "--scenario", "sideways", "--matrix", "m.csv", "--features", "dE_ch", "--out", "o.json"]);
    assert_eq!(out.status.code(), Some(2));

    let out = sohkit(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn version_names_the_schema() {
    let out = ok(&["--version"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(env!("CARGO_PKG_VERSION")));
    assert!(text.contains(&format!("schema {}", io::SCHEMA_VERSION)));
}
