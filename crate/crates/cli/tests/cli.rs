use std::path::Path;
use std::process::{Command, Output};

use calcscore_cli::documented_flags;

fn calcscore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calcscore")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_documents_every_flag_and_exit_code() {
    let top = String::from_utf8(calcscore(&["--help"]).stdout).unwrap();
    for code in ["0", "2", "3", "4", "5", "6"] {
        assert!(top.contains(&format!("  {code}  ")), "exit code {code} missing:\n{top}");
    }
    for (sub, flags) in documented_flags() {
        let args: Vec<&str> = if sub.is_empty() { vec!["--help"] } else { vec![sub.as_str(), "--help"] };
        let o = calcscore(&args);
        assert!(o.status.success());
        let help = String::from_utf8(o.stdout).unwrap();
        for flag in flags {
            let line = help.lines().find(|l| l.contains(&format!("--{flag}"))).unwrap_or_else(|| panic!("{sub}: --{flag}"));
            if flag != "help" && flag != "version" {
                assert!(line.split("--").nth(1).unwrap().split_whitespace().count() > 1, "{sub}: --{flag} has no description");
            }
        }
    }
}

#[test]
fn kappa_prints_two_decimals() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.txt");
    std::fs::write(&m, "90 17 1 0\n3 59 4 0\n0 2 99 2\n0 0 1 32\n").unwrap();
    let o = calcscore(&["kappa", path(&m)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "0.91\n");

    std::fs::write(&m, "1 2\n3\n").unwrap();
    let o = calcscore(&["kappa", path(&m)]);
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).starts_with("error[data]:"), "{}", stderr(&o));
}

#[test]
fn rf_follows_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[stage1]\nreceptive_field = 67\npatch = 67\n").unwrap();
    let text = String::from_utf8(calcscore(&["rf", "--config", path(&cfg)]).stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "stage1 67 dilations 1,1,2,4,8,16,1");
    assert!(text.contains("stage2 patch 65 65x65"));
}

#[test]
fn exit_codes_by_category() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let o = calcscore(&["rf", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = d.join("bad.toml");
    std::fs::write(&bad, "[stage1]\nwidht = 3\n").unwrap();
    let o = calcscore(&["rf", "--config", path(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[config]:"));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);

    let o = calcscore(&["kappa", path(&d.join("absent.txt"))]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).starts_with("error[missing]:"));

    let o = calcscore(&["eval", "--pred", path(&d.join("p")), "--reference", path(&d.join("r")), "--out", path(&d.join("o.json"))]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn mismatched_weights_are_rejected() {
    use calc_neural::NetworkWeights;
    use calcscore::config::PipelineConfig;
    use calcscore::imagegrid::{save_volume, CtVolume, Grid};
    use calcscore::stage1::{self, Cnn1};
    use calcscore::stage2::{self, Cnn2};

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = "[stage1]\nreceptive_field = 35\nwidth = 4\nfusion_width = 8\npatch = 35\n[stage2]\nwidths = [4, 4, 4]\nhidden = 8\n";
    let cfg = PipelineConfig::from_toml(small).unwrap();
    let w1: NetworkWeights = stage1::capture_weights(&Cnn1::<f32>::new(cfg.stage1_spec().unwrap(), 1).unwrap(), 1, 0).unwrap();
    let w2 = stage2::capture_weights(&Cnn2::<f32>::new(cfg.stage2_spec().unwrap(), 2).unwrap(), 2, 0).unwrap();
    w1.save(&d.join("stage1.weights")).unwrap();
    w2.save(&d.join("stage2.weights")).unwrap();
    std::fs::write(d.join("config.toml"), cfg.to_toml()).unwrap();
    let v = CtVolume::filled(Grid::new([4, 40, 40], [3.0, 0.66, 0.66], [0.0; 3]).unwrap(), 3.0, 40.0).unwrap();
    let scan = d.join("scan.vhdr");
    save_volume(&v, &scan).unwrap();

    let out = d.join("out");
    let o = calcscore(&["score", path(&scan), "--weights", path(d), "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("I"));
    assert!(out.join("scan_labels.vhdr").exists() && out.join("scan_score.json").exists());

    let other = d.join("other.toml");
    std::fs::write(&other, small.replace("width = 4", "width = 6")).unwrap();
    let o = calcscore(&["score", path(&scan), "--weights", path(d), "--config", path(&other), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[fingerprint]:"));
}
