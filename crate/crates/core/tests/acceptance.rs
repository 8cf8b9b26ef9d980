//! Acceptance criteria 1-10, one PASS/FAIL line each. Exits non-zero on any failure.
//!
//! Criteria 7 and 8 train three models for 2,000 steps each and dominate the
//! runtime. Set `SHADOWFREE_ACCEPT_ONLY=2,3` to run a subset.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use shadowfree::config::Config;
use shadowfree::data::{SHADOW_DIR, SHADOW_FREE_DIR};
use shadowfree::evaluate::EvalReport;
use shadowfree::pipeline::{self, EVAL_REPORT, IMAGES_DIR, REPORTS_DIR};

const DESK_TRAIN: usize = 200;
const DESK_TEST: usize = 40;
const DESK_SIZE: usize = 64;
const DESK_STEPS: u64 = 2000;
const DESK_SEED: u64 = 1;
const DESK_PRESET: &str = "tiny";

fn c1() -> Check {
    Ok("benchmark-table numbers (real datasets, full-scale training) are not reproduced at desk scale; \
        criteria 2-10 substitute property and trend checks"
        .into())
}

fn c2() -> Check {
    let start = Instant::now();
    let r = check_prior_oracles(200, 1e-6);
    let secs = start.elapsed().as_secs_f64();
    let r = r.map(|d| format!("{d}, {secs:.1}s")).map_err(|d| format!("{d}, {secs:.1}s"));
    match r {
        Ok(d) if secs >= 30.0 => Err(format!("{d} (over 30s)")),
        other => other,
    }
}

fn c3() -> Check {
    check_agba_algebra(100)
}

fn c4() -> Check {
    let start = Instant::now();
    let parts = [
        ("agba_forward", grad_agba(12)),
        ("loss_dm", grad_loss_dm(12)),
        ("loss_high", grad_loss_high(12)),
        ("loss_cssim", grad_loss_cssim(12)),
    ];
    let secs = start.elapsed().as_secs_f64();
    let worst = parts.iter().map(|p| p.1 .0).fold(0.0, f64::max);
    let detail = parts
        .iter()
        .map(|(n, (e, _))| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    let detail = format!("12x12 f64, eps 1e-4: max rel err {detail}; {secs:.1}s");
    if worst < 1e-3 && secs < 120.0 {
        Ok(detail)
    } else {
        let at = parts.iter().max_by(|a, b| a.1 .0.total_cmp(&b.1 .0)).unwrap();
        Err(format!("{detail}; worst at {}: {}", at.0, at.1 .1))
    }
}

fn c5() -> Check {
    let a = check_q_sample_stats(10_000, 1000);
    let b = check_oracle_chain(10, 8);
    match (a, b) {
        (Ok(x), Ok(y)) => Ok(format!("{x}; {y}")),
        (x, y) => Err(format!("{}; {}", x.unwrap_or_else(|e| e), y.unwrap_or_else(|e| e))),
    }
}

fn c6() -> Check {
    check_loss_fixed_points()
}

struct DeskRuns {
    identity: EvalReport,
    full: EvalReport,
    no_agba: EvalReport,
    no_conditions: EvalReport,
    minutes: Vec<f64>,
}

fn desk_config(extra: &[&str]) -> Config {
    let mut o = vec![
        format!("data.resolution={DESK_SIZE}"),
        format!("train.max_steps={DESK_STEPS}"),
        format!("train.checkpoint_every={DESK_STEPS}"),
    ];
    o.extend(extra.iter().map(|s| s.to_string()));
    Config::preset(DESK_PRESET).unwrap().with_overrides(&o).unwrap()
}

fn desk_variant(name: &str, cfg: &Config, data: &Path, root: &Path) -> Result<EvalReport, String> {
    let out = root.join(name);
    let trained = pipeline::train(cfg, data, &out, None, false).map_err(|e| format!("{name}: {e}"))?;
    let test = data.join("test");
    pipeline::infer(&trained.last_checkpoint, &test.join(SHADOW_DIR), &out, None, cfg.train.seed, None, false)
        .map_err(|e| format!("{name}: {e}"))?;
    pipeline::eval(
        &out.join(IMAGES_DIR),
        &test.join(SHADOW_FREE_DIR),
        DESK_SIZE,
        &out.join(REPORTS_DIR).join(EVAL_REPORT),
        false,
    )
    .map_err(|e| format!("{name}: {e}"))
}

fn desk_runs(root: &Path) -> Result<DeskRuns, String> {
    let data = root.join("data");
    pipeline::make_synthetic(&data, DESK_TRAIN, DESK_TEST, DESK_SIZE, DESK_SEED, false).map_err(|e| e.to_string())?;
    let test = data.join("test");
    let identity = shadowfree::evaluate::evaluate_dir(&test.join(SHADOW_DIR), &test.join(SHADOW_FREE_DIR), DESK_SIZE)
        .map_err(|e| e.to_string())?;
    let mut minutes = Vec::new();
    let mut run = |name: &str, extra: &[&str]| {
        let start = Instant::now();
        let r = desk_variant(name, &desk_config(extra), &data, root);
        minutes.push(start.elapsed().as_secs_f64() / 60.0);
        if let Ok(rep) = &r {
            eprintln!("  [{name}] PSNR {:.3} dB SSIM {:.4}", rep.mean_psnr, rep.mean_ssim);
        }
        r
    };
    let full = run("full", &[])?;
    let no_agba = run("no_agba", &["model.use_agba=false"])?;
    let no_conditions = run("no_conditions", &["model.use_agba=false", "diffusion.condition_on_priors=false"])?;
    Ok(DeskRuns {
        identity,
        full,
        no_agba,
        no_conditions,
        minutes,
    })
}

fn c7(runs: &Result<DeskRuns, String>) -> Check {
    let r = runs.as_ref().map_err(|e| e.clone())?;
    let dp = r.full.mean_psnr - r.identity.mean_psnr;
    let ds = r.full.mean_ssim - r.identity.mean_ssim;
    let detail = format!(
        "{DESK_TRAIN} pairs {DESK_SIZE}x{DESK_SIZE}, {DESK_STEPS} steps ({DESK_PRESET} preset, {:.1} min): \
         PSNR {:.3} vs identity {:.3} ({dp:+.3} dB), SSIM {:.4} vs {:.4} ({ds:+.4})",
        r.minutes[0], r.full.mean_psnr, r.identity.mean_psnr, r.full.mean_ssim, r.identity.mean_ssim
    );
    if dp >= 3.0 && ds >= 0.02 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c8(runs: &Result<DeskRuns, String>) -> Check {
    let r = runs.as_ref().map_err(|e| e.clone())?;
    let (a, b, c) = (r.full.mean_psnr, r.no_agba.mean_psnr, r.no_conditions.mean_psnr);
    let detail = format!(
        "PSNR full {a:.3} / no-AGBA {b:.3} / no-conditions {c:.3}; gaps {:+.3}, {:+.3} dB",
        a - b,
        b - c
    );
    if a - b >= 0.3 && b - c >= 0.3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tree_bytes(root: &Path, sub: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let dir = root.join(sub);
    if let Ok(rd) = std::fs::read_dir(&dir) {
        for e in rd {
            let p = e.unwrap().path();
            out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn c9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = Config::preset("desk").unwrap();
    let mut minutes = Vec::new();
    for name in ["a", "b"] {
        let start = Instant::now();
        pipeline::smoke(&cfg, &dir.path().join(name), false).map_err(|e| e.to_string())?;
        minutes.push(start.elapsed().as_secs_f64() / 60.0);
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut same = Vec::new();
    for sub in ["checkpoints", "images"] {
        let (x, y) = (tree_bytes(&a, sub), tree_bytes(&b, sub));
        same.push((sub, !x.is_empty() && x == y, x.len()));
    }
    let ea = std::fs::read(a.join(REPORTS_DIR).join(EVAL_REPORT)).map_err(|e| e.to_string())?;
    let eb = std::fs::read(b.join(REPORTS_DIR).join(EVAL_REPORT)).map_err(|e| e.to_string())?;
    same.push(("eval tsv", ea == eb, 1));
    let detail = format!(
        "two desk smoke runs ({:.1} / {:.1} min): {}",
        minutes[0],
        minutes[1],
        same.iter()
            .map(|(k, ok, n)| format!("{k} ({n}) identical {ok}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    if same.iter().all(|s| s.1) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c10() -> Check {
    match (check_ema_contracts(), check_resume(6, 3)) {
        (Ok(x), Ok(y)) => Ok(format!("{x}; {y}")),
        (x, y) => Err(format!("{}; {}", x.unwrap_or_else(|e| e), y.unwrap_or_else(|e| e))),
    }
}

fn selected() -> Option<Vec<usize>> {
    let v = std::env::var("SHADOWFREE_ACCEPT_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let want = |n: usize| only.as_ref().is_none_or(|v| v.contains(&n));
    let desk_root = tempfile::tempdir().expect("tempdir");
    let desk = if want(7) || want(8) {
        desk_runs(desk_root.path())
    } else {
        Err("not run".into())
    };
    let checks: Vec<(usize, &str, Box<dyn Fn() -> Check + '_>)> = vec![
        (1, "benchmark-number disclosure", Box::new(c1)),
        (2, "prior oracles", Box::new(c2)),
        (3, "AGBA algebra", Box::new(c3)),
        (4, "gradient suite", Box::new(c4)),
        (5, "diffusion statistics", Box::new(c5)),
        (6, "loss fixed points", Box::new(c6)),
        (7, "end-to-end desk run", Box::new(|| c7(&desk))),
        (8, "ablation ordering", Box::new(|| c8(&desk))),
        (9, "pipeline determinism", Box::new(c9)),
        (10, "trainer contracts", Box::new(c10)),
    ];
    let mut failed = 0;
    for (n, name, f) in checks {
        if !want(n) {
            continue;
        }
        match f() {
            Ok(d) => println!("PASS {n:>2} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
