//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ami_core::attack_attn::{craft_attn, AttnAttackConfig};
use ami_core::attack_fc::{craft_fc, l1_distance, FcAttackConfig, FcVariant};
use ami_core::bounds::{sweep_grid, BetaRule, BoundEstimate, DeltaMode, SweepConfig, DEFAULT_SAMPLES};
use ami_core::data::{DataSource, TokenDistribution};
use ami_core::game::{AttackConfig, GameConfig, GameEngine};
use ami_core::ldp::{keep_probability, perturb_index, self_test, DpConfig, Mechanism};
use ami_core::metrics::{auc_bruteforce, auc_rank};
use ami_core::nn::linalg::{from_columns, max_abs, max_abs_diff};
use ami_core::nn::{attn_backward, attn_loss, fc_backward, fc_forward, fc_loss, AttnHead, AttnParams, FcParams, Matrix};
use ami_core::report::canonical_body;
use ami_core::rng::seeded;
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

/// Collects named sub-checks; the criterion passes when all of them do.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    count: usize,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.count += 1;
        if !ok {
            self.failed.push(what());
        }
    }

    fn finish(self, summary: String) -> Outcome {
        if self.failed.is_empty() {
            Outcome::new(true, format!("{summary}; {} checks", self.count))
        } else {
            let shown: Vec<_> = self.failed.iter().take(12).cloned().collect();
            Outcome::new(
                false,
                format!("{summary}; {}/{} checks failed: {}", self.failed.len(), self.count, shown.join("; ")),
            )
        }
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn powers_of_two(lo: usize, hi: usize) -> Vec<usize> {
    (0..).map(|i| lo << i).take_while(|&d| d <= hi).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut checks = Checks::default();
    let src = DataSource::synthetic(TokenDistribution::Gaussian, 8, 64).unwrap();
    for variant in [FcVariant::Full, FcVariant::Token] {
        let cfg = GameConfig::new(src.clone(), AttackConfig::Fc(FcAttackConfig::new(variant)), 200, 40, 1);
        let run = single_thread(|| GameEngine::new(cfg).unwrap().run().unwrap());
        let m = run.metrics;
        checks.check([m.acc, m.f1, m.auc, m.advantage] == [1.0; 4], || {
            format!("fc-{variant}: acc {} f1 {} auc {} adv {}", m.acc, m.f1, m.auc, m.advantage)
        });
    }
    let elapsed = start.elapsed();
    checks.check(elapsed < Duration::from_secs(10), || format!("runtime {elapsed:?} >= 10 s"));
    checks.finish(format!("FC-Full and FC-Token on Gaussian tokens, single thread, {:.2} s", elapsed.as_secs_f64()))
}

fn bound_grid(sources: Vec<TokenDistribution>, samples: usize, seed: u64) -> Vec<BoundEstimate> {
    let cfg = SweepConfig {
        sources,
        l_x: vec![5, 10, 15],
        d_x: powers_of_two(16, 1024),
        samples,
        n: 1,
        beta_rule: BetaRule::Table,
        delta_mode: DeltaMode::Expected,
        seed,
    };
    sweep_grid(&cfg).unwrap()
}

fn criterion_2() -> Outcome {
    let mut checks = Checks::default();
    for b in bound_grid(vec![TokenDistribution::OneHot], DEFAULT_SAMPLES, 2) {
        checks.check(b.beta == 10.0 && (b.lower_bound - 1.0).abs() <= 0.01, || {
            format!("d {} l {}: beta {} lower bound {}", b.d_x, b.l_x, b.beta, b.lower_bound)
        });
    }
    let src = DataSource::synthetic(TokenDistribution::OneHot, 10, 128).unwrap();
    let cfg = GameConfig::new(src, AttackConfig::Attn(AttnAttackConfig::new(10.0)), 200, 5, 2);
    let acc = GameEngine::new(cfg).unwrap().run().unwrap().metrics.acc;
    checks.check(acc >= 0.995, || format!("attention accuracy {acc} < 0.995"));
    checks.finish(format!("one-hot bounds at beta 10 over 21 grid points; attention accuracy {acc}"))
}

fn criterion_3() -> Outcome {
    let mut checks = Checks::default();
    let rows = bound_grid(vec![TokenDistribution::Spherical, TokenDistribution::Gaussian], DEFAULT_SAMPLES, 3);
    for r in &rows {
        let want_beta = match r.source {
            TokenDistribution::Gaussian => 10.0 / r.d_x as f64,
            _ => 10.0,
        };
        checks.check(r.beta == want_beta, || format!("{:?} d {}: beta {}", r.source, r.d_x, r.beta));
        checks.check(r.condition_ratio > 1.0, || {
            format!("{:?} d {} l {}: condition ratio {}", r.source, r.d_x, r.l_x, r.condition_ratio)
        });
    }
    for src in [TokenDistribution::Spherical, TokenDistribution::Gaussian] {
        for l in [5, 10, 15] {
            let mut series: Vec<&BoundEstimate> = rows.iter().filter(|r| r.source == src && r.l_x == l).collect();
            series.sort_by_key(|r| r.d_x);
            for w in series.windows(2) {
                checks.check(w[1].lower_bound >= w[0].lower_bound - 0.05, || {
                    format!("{src:?} l {l}: bound {} at d {} after {} at d {}", w[1].lower_bound, w[1].d_x, w[0].lower_bound, w[0].d_x)
                });
            }
        }
    }
    let min_ratio = rows.iter().map(|r| r.condition_ratio).fold(f64::INFINITY, f64::min);
    checks.finish(format!("spherical and Gaussian bounds over d 16..1024; min condition ratio {min_ratio:.4}"))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut checks = Checks::default();
    let mut rates = Vec::new();
    let src = DataSource::synthetic(TokenDistribution::OneHot, 4, 512).unwrap();
    for n in [40, 100, 500] {
        let cfg = GameConfig::new(src.clone(), AttackConfig::Attn(AttnAttackConfig::new(10.0)), 200, n, 4);
        let acc = GameEngine::new(cfg).unwrap().run().unwrap().metrics.acc;
        rates.push(format!("n {n}: {acc}"));
        checks.check((acc - 1.0).abs() <= 0.01, || format!("n {n}: success rate {acc}"));
    }
    let elapsed = start.elapsed();
    checks.check(elapsed < Duration::from_secs(300), || format!("runtime {elapsed:?} >= 5 min"));
    checks.finish(format!("attention on one-hot d 512, l 4, 200 games per size ({}); {:.1} s", rates.join(", "), elapsed.as_secs_f64()))
}

fn criterion_5() -> Outcome {
    const TOL: f64 = 0.03;
    let (k, l_x, n, trials, seed) = (1024, 4, 40, 200, 5);
    let src = DataSource::synthetic(TokenDistribution::OneHot, l_x, k).unwrap();
    let eps = [5.0, 7.5, 10.0];
    let mechs = Mechanism::ALL;
    let dps: Vec<DpConfig> = mechs
        .iter()
        .flat_map(|&m| eps.iter().map(move |&e| DpConfig::new(m, e, k)))
        .collect();
    let attacks = [
        ("fc-full", AttackConfig::Fc(FcAttackConfig::new(FcVariant::Full))),
        ("fc-token", AttackConfig::Fc(FcAttackConfig::new(FcVariant::Token))),
        ("attn", AttackConfig::Attn(AttnAttackConfig::new(10.0))),
    ];
    // auc[attack][mechanism][epsilon]
    let mut auc = vec![vec![vec![0.0; eps.len()]; mechs.len()]; attacks.len()];
    for (a, (_, attack)) in attacks.iter().enumerate() {
        let cfg = GameConfig::new(src.clone(), attack.clone(), trials, n, seed);
        let runs = GameEngine::new(cfg).unwrap().run_multi(&dps).unwrap();
        for (i, run) in runs.iter().enumerate() {
            auc[a][i / eps.len()][i % eps.len()] = run.metrics.auc;
        }
    }
    let mut checks = Checks::default();
    let mut table = Vec::new();
    for (mi, m) in mechs.iter().enumerate() {
        for (a, (name, _)) in attacks.iter().enumerate() {
            let v = &auc[a][mi];
            table.push(format!("{m}/{name} {:.3} {:.3} {:.3}", v[0], v[1], v[2]));
            checks.check(v[2] > v[1] - TOL && v[1] > v[0] - TOL, || {
                format!("{m} {name}: AUC not increasing in epsilon ({:.3}, {:.3}, {:.3})", v[0], v[1], v[2])
            });
        }
        for (ei, e) in eps.iter().enumerate() {
            for a in 0..2 {
                let (fc, at) = (auc[a][mi][ei], auc[2][mi][ei]);
                checks.check(fc >= at - TOL, || format!("{m} eps {e}: {} AUC {fc:.3} < attn {at:.3}", attacks[a].0));
            }
        }
    }
    checks.finish(format!("k {k}, n {n}, {trials} games per cell; AUC at eps 5/7.5/10: {}", table.join(", ")))
}

fn randn(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

const H: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

fn fc_gradient_case(rng: &mut impl Rng) -> f64 {
    loop {
        let (d, n) = (rng.random_range(1..6), rng.random_range(1..6));
        let width = 2 * d;
        let w1 = randn(width, d, 1.0, rng);
        let b1: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b2 = rng.random_range(-0.5..1.5);
        let xs = randn(d, n, 1.0, rng);
        let p = FcParams::new(w1.clone(), b1.clone(), w2.clone(), b2).unwrap();
        let h = p.hidden_pre(&xs).unwrap();
        let near_kink = (0..n).any(|j| {
            let col = h.col_as_slice(j);
            let out: f64 = b2 + col.iter().zip(&w2).map(|(v, w)| w * v.max(0.0)).sum::<f64>();
            out.abs() < KINK_MARGIN || col.iter().any(|v| v.abs() < KINK_MARGIN)
        });
        if near_kink {
            continue;
        }
        let report = fc_backward(&p, &xs).unwrap();
        let loss = |b1: &[f64], w2: &[f64], b2: f64| fc_loss(&FcParams::new(w1.clone(), b1.to_vec(), w2.to_vec(), b2).unwrap(), &xs).unwrap();
        let mut worst = rel_err(report.get("b_2_1").unwrap()[(0, 0)], (loss(&b1, &w2, b2 + H) - loss(&b1, &w2, b2 - H)) / (2.0 * H));
        for r in 0..width {
            let (mut up, mut dn) = (w2.clone(), w2.clone());
            up[r] += H;
            dn[r] -= H;
            let num = (loss(&b1, &up, b2) - loss(&b1, &dn, b2)) / (2.0 * H);
            worst = worst.max(rel_err(report.get("W_2_row").unwrap()[(r, 0)], num));
            let (mut up, mut dn) = (b1.clone(), b1.clone());
            up[r] += H;
            dn[r] -= H;
            let num = (loss(&up, &w2, b2) - loss(&dn, &w2, b2)) / (2.0 * H);
            worst = worst.max(rel_err(report.get("b_1").unwrap()[(r, 0)], num));
        }
        return worst;
    }
}

fn attn_gradient_case(rng: &mut impl Rng) -> f64 {
    loop {
        let (d, l, n) = (rng.random_range(2..5), rng.random_range(1..4), rng.random_range(1..4));
        let heads: Vec<AttnHead> = (0..4)
            .map(|_| AttnHead { w_q: randn(d - 1, d, 1.0, rng), w_k: randn(d - 1, d, 1.0, rng), w_v: randn(d, d, 1.0, rng) })
            .collect();
        let w_o = randn(2 * d, 4 * d, 0.5, rng);
        let b_o: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let p = AttnParams::new(heads, w_o.clone(), b_o.clone()).unwrap();
        let batch: Vec<Matrix> = (0..n).map(|_| randn(d, l, 1.0, rng)).collect();
        let near_kink = batch.iter().any(|x| {
            let pre = p.output_pre(&p.head_outputs(x).unwrap());
            (0..pre.ncols()).any(|j| pre.col_as_slice(j).iter().any(|v| v.abs() < KINK_MARGIN))
        });
        if near_kink {
            continue;
        }
        let g = attn_backward(&p, &batch).unwrap();
        let g = g.get("W_O").unwrap();
        let mut worst = 0.0f64;
        for i in 0..w_o.nrows() {
            for c in 0..w_o.ncols() {
                let mut up = w_o.clone();
                up[(i, c)] += H;
                let mut dn = w_o.clone();
                dn[(i, c)] -= H;
                let lu = attn_loss(&p.with_output(up, b_o.clone()).unwrap(), &batch).unwrap();
                let ld = attn_loss(&p.with_output(dn, b_o.clone()).unwrap(), &batch).unwrap();
                worst = worst.max(rel_err(g[(i, c)], (lu - ld) / (2.0 * H)));
            }
        }
        return worst;
    }
}

fn criterion_6() -> Outcome {
    let mut rng = seeded(6);
    let mut checks = Checks::default();
    let (mut fc_worst, mut attn_worst) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let e = fc_gradient_case(&mut rng);
        fc_worst = fc_worst.max(e);
        checks.check(e <= 1e-5, || format!("fc case {case}: relative error {e:.2e}"));
        let e = attn_gradient_case(&mut rng);
        attn_worst = attn_worst.max(e);
        checks.check(e <= 1e-5, || format!("attn case {case}: relative error {e:.2e}"));
    }
    checks.finish(format!("central differences h 1e-5; worst relative error fc {fc_worst:.2e}, attn {attn_worst:.2e}"))
}

fn criterion_7() -> Outcome {
    let mut rng = seeded(7);
    let mut checks = Checks::default();
    let mut worst = [0.0f64; 3];
    for case in 0..100 {
        let d = rng.random_range(2..33);
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let beta = rng.random_range(0.5..20.0);
        let seed = rng.random::<u64>();
        let p = craft_attn(&v, beta, 1e-3, &mut seeded(seed)).unwrap();
        checks.check((p.d_attn(), p.d_x(), p.d_y()) == (d - 1, d, 2 * d), || {
            format!("case {case}: dims ({}, {}, {})", p.d_attn(), p.d_x(), p.d_y())
        });
        let h = p.heads();
        let filtered = max_abs(&(&h[0].w_q * &from_columns(&v, d, 1)));
        worst[0] = worst[0].max(filtered);
        checks.check(filtered <= 1e-10, || format!("case {case}: |W_Q^1 v| = {filtered:.2e}"));
        for (hi, head) in h.iter().take(2).enumerate() {
            let raw = head.w_k.transpose() * &head.w_q;
            let proj = Matrix::from_fn(d, d, |i, j| raw[(i, j)] / beta);
            let idem = max_abs_diff(&(&proj * &proj), &proj);
            let sym = max_abs_diff(&proj.transpose().to_owned(), &proj);
            worst[1] = worst[1].max(idem.max(sym));
            checks.check(idem <= 1e-8 && sym <= 1e-8, || {
                format!("case {case} head {}: idempotence {idem:.2e} symmetry {sym:.2e}", hi + 1)
            });
        }
        let scaled = Matrix::from_fn(d - 1, d, |i, j| beta * h[0].w_q[(i, j)]);
        let key = max_abs_diff(&h[0].w_k, &scaled);
        worst[2] = worst[2].max(key);
        checks.check(key <= 1e-10, || format!("case {case}: |W_K^1 - beta W_Q^1| = {key:.2e}"));
        checks.check(h[2] == h[0] && h[3] == h[1], || format!("case {case}: heads 3 and 4 do not copy 1 and 2"));
    }
    checks.finish(format!(
        "100 random (v, seed); worst filter {:.2e}, projector {:.2e}, key {:.2e}",
        worst[0], worst[1], worst[2]
    ))
}

fn criterion_8() -> Outcome {
    let mut checks = Checks::default();
    let mut rng = seeded(8);
    let mut notes = Vec::new();
    for m in Mechanism::ALL {
        for (eps, k) in [(3f64.ln(), 3), (5.0, 100), (10.0, 1024)] {
            let cfg = DpConfig::new(m, eps, k);
            for r in self_test(&cfg, 100_000, 0.0, &mut rng).unwrap() {
                checks.check(r.pass, || {
                    format!(
                        "{m} {} eps {eps:.3} k {k}: {:.5} vs {:.5} (sigma {:.1e})",
                        r.statistic, r.empirical, r.expected, r.sigma
                    )
                });
            }
        }
        let cfg = DpConfig::new(m, 50.0, 100);
        let trials = 100_000u32;
        let mut changed = 0u32;
        for t in 0..trials {
            let i = t % 100;
            changed += (perturb_index(i, &cfg, &mut rng).unwrap() != i) as u32;
        }
        notes.push(format!("{m} eps 50: {changed} changes (expected {:.1})", trials as f64 * (1.0 - keep_probability(&cfg))));
        checks.check(changed == 0, || format!("{m} is not the identity at eps 50: {changed}/{trials} indices changed"));
    }
    checks.finish(format!("1e5 draws per case; {}", notes.join(", ")))
}

fn criterion_9() -> Outcome {
    let mut rng = seeded(9);
    let mut checks = Checks::default();
    let mut worst_auc = 0.0f64;
    for case in 0..50 {
        let (np, nn) = (rng.random_range(1..60), rng.random_range(1..60));
        let levels = rng.random_range(2..20) as f64;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| (rng.random::<f64>() * levels).floor() / levels).collect() };
        let (pos, neg) = (draw(np), draw(nn));
        let diff = (auc_rank(&pos, &neg) - auc_bruteforce(&pos, &neg).unwrap()).abs();
        worst_auc = worst_auc.max(diff);
        checks.check(diff <= 1e-12, || format!("auc case {case}: difference {diff:.2e}"));
    }
    let mut worst_fc = 0.0f64;
    let mut active = 0;
    for case in 0..1000 {
        let d = rng.random_range(1..40);
        let t: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let tau = rng.random_range(0.01..5.0);
        let spread = [0.0, 0.01, 0.1, 1.0][case % 4];
        let x: Vec<f64> = t.iter().map(|&v| v + spread * rng.sample::<f64, _>(StandardNormal)).collect();
        let p = craft_fc(&t, tau).unwrap();
        let want = (tau - l1_distance(&x, &t)).max(0.0);
        active += (want > 0.0) as usize;
        let diff = (fc_forward(&p, &x).unwrap() - want).abs();
        worst_fc = worst_fc.max(diff);
        checks.check(diff <= 1e-12, || format!("fc case {case}: difference {diff:.2e}"));
    }
    checks.finish(format!(
        "worst AUC gap {worst_auc:.1e} over 50 sets; worst FC gap {worst_fc:.1e} over 1000 inputs ({active} active)"
    ))
}

fn run_cli(bin: &str, cmd: &str, config: &Path, threads: &str) -> std::result::Result<String, String> {
    let out = Command::new(bin)
        .args([cmd, "--config"])
        .arg(config)
        .env("AMI_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{cmd} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    canonical_body(&String::from_utf8_lossy(&out.stdout)).map_err(|e| e.to_string())
}

fn criterion_10() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_ami");
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        (
            "game",
            "seed = 10\n[data]\nsource = \"onehot\"\nl_x = 4\nd_x = 64\n[dp]\nmechanism = \"rappor\"\nepsilon = 8\n\
             [attack]\nkind = \"attn\"\n[game]\ntrials = 64\nn = 8\n",
        ),
        ("game", "seed = 11\n[data]\nsource = \"gaussian\"\nl_x = 3\nd_x = 16\n[attack]\nkind = \"fc\"\nvariant = \"full\"\n[game]\ntrials = 64\nn = 12\n"),
        (
            "bounds",
            "seed = 12\n[bounds]\nsources = [\"onehot\", \"spherical\", \"gaussian\"]\nl_x = [5, 10]\nd_x = [16, 64, 128]\nsamples = 20000\nn = 3\n",
        ),
    ];
    let mut checks = Checks::default();
    for (i, (cmd, text)) in configs.iter().enumerate() {
        let path = dir.path().join(format!("c{i}.toml"));
        std::fs::write(&path, text).unwrap();
        let runs: Vec<_> = ["1", "1", "8", "8"].iter().map(|t| run_cli(bin, cmd, &path, t)).collect();
        match &runs[0] {
            Err(e) => checks.check(false, || format!("config {i}: {e}")),
            Ok(first) => {
                for (j, r) in runs.iter().enumerate().skip(1) {
                    checks.check(r.as_ref() == Ok(first), || format!("config {i} ({cmd}): run {j} differs from run 0"));
                }
            }
        }
    }
    checks.finish("two game and one bounds config, each run twice under AMI_THREADS 1 and 8".to_string())
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "FC advantage is exactly 1", criterion_1),
        (2, "one-hot bound and attention accuracy", criterion_2),
        (3, "spherical/Gaussian bound trend and condition", criterion_3),
        (4, "attention success at large batch sizes", criterion_4),
        (5, "LDP sweep trends", criterion_5),
        (6, "gradients match finite differences", criterion_6),
        (7, "crafted attention invariants", criterion_7),
        (8, "LDP mechanism statistics", criterion_8),
        (9, "AUC and FC closed-form oracles", criterion_9),
        (10, "byte-identical reports", criterion_10),
    ];
    let only: Option<u32> = std::env::var("AMI_CRITERION").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        failed += !o.pass as usize;
        println!(
            "criterion {id:>2} {} {name} ({:.1} s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
