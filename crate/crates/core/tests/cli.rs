use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ami_core::data::{save_vocab_file, VocabFile, Vocabulary};
use ami_core::report::canonical_body;

fn ami(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ami"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("AMI_THREADS", "2")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let r = rows(csv);
    let i = r[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    r[1..].iter().map(|row| row[i].clone()).collect()
}

const GAUSSIAN_FC: &str = "seed = 4\n[data]\nsource = \"gaussian\"\nl_x = 4\nd_x = 16\n[game]\ntrials = 200\n";

#[test]
fn gaussian_fc_game_has_full_advantage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", GAUSSIAN_FC);
    let out = stdout(&ami(&["game"], &cfg));
    assert!(out.starts_with("# ami-report/1\nrun_id,source,attack,variant,dp_mechanism,epsilon,n,l_X,d_X,"));
    assert_eq!(column(&out, "advantage"), ["1.0"]);
    assert_eq!(column(&out, "tau_origin"), ["fallback"]);
    assert_eq!(column(&out, "score_kind"), ["max_abs_grad"]);
}

#[test]
fn json_matches_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", GAUSSIAN_FC);
    let csv = stdout(&ami(&["game"], &cfg));
    let json: serde_json::Value = serde_json::from_str(&stdout(&ami(&["game", "--format", "json"], &cfg))).unwrap();
    assert_eq!(json["schema"], "ami-report/1");
    let row = json["rows"][0].as_object().unwrap();
    let r = rows(&csv);
    assert_eq!(row.len(), r[0].len());
    for (h, v) in r[0].iter().zip(&r[1]) {
        let j = &row[h];
        match j {
            serde_json::Value::String(s) => assert_eq!(s, v, "{h}"),
            serde_json::Value::Null => assert!(v == "NaN" || v == "inf", "{h}"),
            serde_json::Value::Number(n) => {
                if h != "wall_ms" {
                    assert_eq!(n.as_f64().unwrap(), v.parse::<f64>().unwrap(), "{h}")
                }
            }
            other => panic!("{h}: unexpected {other}"),
        }
    }
}

#[test]
fn reports_are_reproducible_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "g.toml",
        "seed = 1\n[data]\nsource = \"onehot\"\nl_x = 3\nd_x = 32\n[dp]\nmechanism = \"grr\"\nepsilon = 3\n[attack]\nkind = \"fc\"\nvariant = \"token\"\n[game]\ntrials = 80\nn = 6\n",
    );
    let a = canonical_body(&stdout(&ami(&["game"], &cfg))).unwrap();
    let b = canonical_body(&stdout(&ami(&["game"], &cfg))).unwrap();
    assert_eq!(a, b);
    let c = canonical_body(&stdout(&ami(&["game", "--seed", "2"], &cfg))).unwrap();
    assert_ne!(a, c);
}

#[test]
fn out_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", GAUSSIAN_FC);
    let out = dir.path().join("sub/report.csv");
    let o = ami(&["game", "--out", out.to_str().unwrap()], &cfg);
    assert!(stdout(&o).is_empty());
    assert!(std::fs::read_to_string(out).unwrap().starts_with("# ami-report/1"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        "[data]\nsource = \"onehot\"\nl_x = 2\nd_x = 8\n[dp]\nmechanism = \"grr\"\n",
        "[data]\nsource = \"gaussian\"\nl_x = 2\nd_x = 8\nbogus = 1\n",
        "[data]\nsource = \"onehot\"\nl_x = 9\nd_x = 8\n",
        "[data]\nsource = \"gaussian\"\nl_x = 2\nd_x = 8\n[dp]\nmechanism = \"grr\"\nepsilon = 1\n",
        "[data]\nsource = \"gaussian\"\nl_x = 2\nd_x = 8\n[game]\ntrials = 0\n",
        "[data\n",
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = write(dir.path(), &format!("c{i}.toml"), text);
        let o = ami(&["game"], &cfg);
        assert_eq!(o.status.code(), Some(2), "case {i}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = ami(&["game"], &dir.path().join("missing.toml"));
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_ami")).arg("nonsense").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_key_diagnostic_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[data]\nsource = \"gaussian\"\nl_x = 2\nd_x = 8\n[attack]\nbetta = 3\n");
    let o = ami(&["game"], &cfg);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(2));
    assert!(err.contains("betta") && err.contains("line 6"), "{err}");
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "broken.amie", "AMIE");
    let cfg = write(dir.path(), "c.toml", "[data]\nsource = \"embed_file\"\npath = \"broken.amie\"\n");
    assert_eq!(ami(&["game"], &cfg).status.code(), Some(1));
}

#[test]
fn bounds_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "b.toml",
        "[bounds]\nsources = [\"gaussian\", \"onehot\"]\nl_x = [5]\nd_x = [16, 64]\nsamples = 20000\n",
    );
    let out = stdout(&ami(&["bounds"], &cfg));
    assert!(out.starts_with(
        "# ami-bounds/1\nsource,d_X,l_X,beta,p_proj,p_proj_iid,p_box,bar_delta,lower_bound,condition_ratio,samples,"
    ));
    let src = column(&out, "source");
    let beta = column(&out, "beta");
    let d = column(&out, "d_X");
    for i in 0..src.len() {
        let d: f64 = d[i].parse().unwrap();
        let want = if src[i] == "gaussian" { 10.0 / d } else { 10.0 };
        assert_eq!(beta[i].parse::<f64>().unwrap(), want);
    }
    for (s, lb) in src.iter().zip(column(&out, "lower_bound")) {
        if s == "onehot" {
            assert!((lb.parse::<f64>().unwrap() - 1.0).abs() <= 0.01);
        }
    }
    let empty = write(dir.path(), "e.toml", "[bounds]\nsources = [\"onehot\"]\nl_x = []\nd_x = [16]\n");
    assert_eq!(ami(&["bounds"], &empty).status.code(), Some(2));
}

#[test]
fn dp_check_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(
        dir.path(),
        "d.toml",
        "[dp]\nmechanism = \"grr\"\nepsilon = 1.0986122886681098\nk = 3\n[dp_check]\ntrials = 100000\n",
    );
    let out = stdout(&ami(&["dp-check"], &good));
    let emp: f64 = column(&out, "empirical")[0].parse().unwrap();
    assert!((emp - 0.6).abs() < 0.005, "{emp}");
    assert_eq!(column(&out, "pass"), ["true"]);

    let ident = write(
        dir.path(),
        "i.toml",
        "[dp_check]\nmechanisms = [\"grr\", \"rappor\", \"dbitflippm\"]\nepsilons = [50]\nk = [16]\ntrials = 20000\n",
    );
    let out = stdout(&ami(&["dp-check"], &ident));
    assert!(column(&out, "pass").iter().all(|p| p == "true"));

    let corrupt = write(
        dir.path(),
        "c.toml",
        "[dp]\nmechanism = \"grr\"\nepsilon = 1.0986122886681098\nk = 3\n[dp_check]\ntrials = 100000\nexpected_offset = 0.05\n",
    );
    assert_eq!(ami(&["dp-check"], &corrupt).status.code(), Some(1));
}

const SWEEP: &str = "seed = 9\n[data]\nsource = \"onehot\"\nl_x = 3\nd_x = 64\n[game]\ntrials = 30\nn = 6\n\
[sweep]\nmechanisms = [\"grr\", \"rappor\", \"the\", \"dbitflippm\"]\nepsilons = [5, 7.5, 10]\nattacks = [\"fc-token\", \"attn\"]\n";

#[test]
fn sweep_row_count_and_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SWEEP);
    let out = stdout(&ami(&["sweep"], &cfg));
    let r = rows(&out);
    assert_eq!(r.len() - 1, 24);
    let keys: Vec<(String, String, f64)> = r[1..]
        .iter()
        .map(|row| (row[2].clone(), row[4].clone(), row[5].parse().unwrap()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)).then(a.2.total_cmp(&b.2)));
    assert_eq!(keys, sorted);
}

#[test]
fn sweep_none_row_matches_game() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = write(
        dir.path(),
        "s.toml",
        &SWEEP.replace("mechanisms = [\"grr\", \"rappor\", \"the\", \"dbitflippm\"]", "mechanisms = [\"none\", \"grr\"]")
            .replace("[\"fc-token\", \"attn\"]", "[\"attn\"]"),
    );
    let game = write(
        dir.path(),
        "g.toml",
        "seed = 9\n[data]\nsource = \"onehot\"\nl_x = 3\nd_x = 64\n[game]\ntrials = 30\nn = 6\n[attack]\nkind = \"attn\"\n",
    );
    let s = stdout(&ami(&["sweep"], &sweep));
    let g = stdout(&ami(&["game"], &game));
    let strip = |row: &[String]| row[1..row.len() - 1].to_vec();
    let none_row = rows(&s).into_iter().find(|r| r[4] == "none").unwrap();
    assert_eq!(strip(&none_row), strip(&rows(&g)[1]));
}

#[test]
fn index_file_game_with_dp() {
    let dir = tempfile::tempdir().unwrap();
    let (k, d, l, count) = (12usize, 12usize, 2usize, 30usize);
    let table: Vec<f64> = (0..k * d).map(|i| ((i / d == i % d) as u8) as f64).collect();
    let ids: Vec<u32> = (0..count * l).map(|i| ((i * 5 + i / l) % k) as u32).collect();
    let vf = VocabFile { vocab: Vocabulary::new(k, d, table).unwrap(), count, l_x: l, ids };
    save_vocab_file(dir.path().join("v.amiv"), &vf).unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "[data]\nsource = \"index_file\"\npath = \"v.amiv\"\n[dp]\nmechanism = \"grr\"\nepsilon = 50\n[attack]\nkind = \"fc\"\nvariant = \"token\"\n[game]\ntrials = 40\nn = 1\n",
    );
    let out = stdout(&ami(&["game"], &cfg));
    assert_eq!(column(&out, "acc"), ["1.0"]);
    assert_eq!(column(&out, "tau_origin"), ["vocabulary"]);
}
