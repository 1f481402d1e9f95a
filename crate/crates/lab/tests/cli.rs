use std::process::Command;

fn oprenew(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_oprenew")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn tails_reports_beta_hat_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tails");
    let (code, stdout, _) = oprenew(&["tails", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    let line = stdout.lines().find(|l| l.contains("beta_hat:")).expect("beta_hat line");
    let value: f64 = line.split("beta_hat:").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!((0.73..=0.77).contains(&value), "{line}");
    for f in ["tails.csv", "partition.csv", "summary.txt", "manifest.toml"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("tails.csv")).unwrap();
    assert!(csv.starts_with("n,tail,fitted,residual,ell\n"));
}

#[test]
fn rank_one_renewal_prints_oracle_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    // small sizes: only the rank-one and scalar parts matter here
    std::fs::write(&cfg, "[renewal]\nm = 256\nn = 200\nscalar_n = 20000\n").unwrap();
    let out = dir.path().join("r");
    let (code, stdout, stderr) = oprenew(&["renewal", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("oracle equivalence: PASS"), "{stdout}{stderr}");
    assert!(code == 0 || code == 1);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[tails]\nn_max = 0\n").unwrap();
    assert_eq!(oprenew(&["tails", "--config", bad.to_str().unwrap()]).0, 2);
    std::fs::write(&bad, "no_such_field = 1\n").unwrap();
    assert_eq!(oprenew(&["tails", "--config", bad.to_str().unwrap()]).0, 2);
    assert_eq!(oprenew(&["tails", "--config", dir.path().join("missing.toml").to_str().unwrap()]).0, 2);
    assert_eq!(oprenew(&["print-config", "--gate-slack", "-1"]).0, 2);

    // rates needs a Markov map
    let nm = dir.path().join("nm.toml");
    std::fs::write(&nm, "[map]\nkind = \"non_markov\"\n").unwrap();
    let out = dir.path().join("o");
    let (code, _, stderr) = oprenew(&["rates", "--config", nm.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn gate_failures_exit_1_and_name_the_gate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    // a tiny slack makes every tolerance unreachable
    let (code, stdout, _) = oprenew(&["tails", "--gate-slack", "1e-9", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stdout.contains("FAIL beta_hat"), "{stdout}");
}

#[test]
fn printed_config_round_trips() {
    let (code, text, _) = oprenew(&["print-config", "--seed", "42"]);
    assert_eq!(code, 0);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, &text).unwrap();
    let (code, again, _) = oprenew(&["print-config", "--config", p.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(text, again);
    assert!(text.contains("seed = 42"));
}

#[test]
fn shipped_config_is_the_default() {
    let shipped = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/default.toml");
    let (_, text, _) = oprenew(&["print-config", "--config", shipped]);
    let (_, default, _) = oprenew(&["print-config"]);
    assert_eq!(text, default);
}
