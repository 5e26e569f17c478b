//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::*;
use painterly::attention::{attention_diagnostics, shared_attention, AttentionProjections, MaskEntry, SimilarityMask, Source};
use painterly::image::{BBox, Image};
use painterly::metrics::{compute_metrics, Embedder, MetricReport, RandomConvEmbedder};
use painterly::pipeline::{composite_paste, CompositeInput, Harmonizer, PipelineConfig, ShareGate, ShareMode};
use painterly::solver::{dpm_invert, dpm_sample, gaussian_score_model, NoiseSchedule};
use painterly::tensor::{block_concat, block_split, BlockIndex, Tensor};

/// Round-trip tolerance of the toy backbone at 25 steps.
const TOY_ROUND_TRIP_TOL: f64 = 2e-2;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Check {
    Check { pass, detail }
}

fn criterion(id: u8, name: &str, budget_secs: f64, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match res {
        Ok(c) => (c.pass && secs < budget_secs, c.detail),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "[{}] criterion {id}: {name}: {detail} ({secs:.2} s, budget {budget_secs} s)",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

/// Deterministic small integers from a seed.
fn pick(seed: u64, salt: u64, n: u64) -> u64 {
    let mut z = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z ^= z >> 31;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 29)) % n
}

fn random_instance(seed: u64, max_m: usize, max_d: usize) -> AttentionProjections {
    let m = 1 + pick(seed, 1, max_m as u64) as usize;
    let widths: Vec<usize> = [4, 8, 16, 32].into_iter().filter(|&d| d <= max_d).collect();
    let d = widths[pick(seed, 2, widths.len() as u64) as usize];
    let heads = [1, 2, 4][pick(seed, 3, 3) as usize];
    let q = Tensor::randn(&[3 * m, d], seed * 3 + 100);
    let k = Tensor::randn(&[3 * m, d], seed * 3 + 101);
    let v = Tensor::randn(&[3 * m, d], seed * 3 + 102);
    AttentionProjections::new(q, k, v, heads, BlockIndex::triplet(m).unwrap()).unwrap()
}

fn random_entry(seed: u64, salt: u64) -> MaskEntry {
    if pick(seed, salt, 3) == 0 {
        MaskEntry::Blocked
    } else {
        MaskEntry::Weight(0.2 + 1.8 * pick(seed, salt + 50, 1000) as f64 / 1000.0)
    }
}

fn random_mask(seed: u64) -> SimilarityMask {
    let (a, b, g) = (random_entry(seed, 11), random_entry(seed, 12), random_entry(seed, 13));
    let g = if a.is_blocked() && b.is_blocked() && g.is_blocked() {
        MaskEntry::Weight(1.0)
    } else {
        g
    };
    SimilarityMask::new(a, b, g).unwrap()
}

/// Dense reference: full `3m × 3m` logits per head, blocked pairs receive an
/// additive `-inf`, finite entries scale the similarity.
fn dense_reference(p: &AttentionProjections, mask: &SimilarityMask) -> Vec<f64> {
    let n = p.q.rows();
    let d = p.q.cols();
    let m = p.block.m;
    let hw = d / p.head_count;
    let source = |i: usize| Source::ALL[i / m];
    let mut out = vec![0.0; n * d];
    for h in 0..p.head_count {
        let cols = h * hw..(h + 1) * hw;
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for (j, l) in logits.iter_mut().enumerate() {
                let dot: f64 = cols.clone().map(|c| p.q.get(i, c) * p.k.get(j, c)).sum();
                *l = match mask.entry(source(i), source(j)) {
                    MaskEntry::Weight(w) => w * dot / (hw as f64).sqrt(),
                    MaskEntry::Blocked => dot / (hw as f64).sqrt() + f64::NEG_INFINITY,
                };
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i * d + c] = (0..n).map(|j| e[j] / z * p.v.get(j, c)).sum();
            }
        }
    }
    out
}

/// Plain per-image attention `softmax(q kᵀ/√d) v` for one block, per head.
fn block_self_attention(p: &AttentionProjections, block: usize) -> Vec<f64> {
    let r = p.block.range(block);
    let d = p.q.cols();
    let hw = d / p.head_count;
    let mut out = vec![0.0; r.len() * d];
    for h in 0..p.head_count {
        let cols = h * hw..(h + 1) * hw;
        for (oi, i) in r.clone().enumerate() {
            let logits: Vec<f64> = r
                .clone()
                .map(|j| cols.clone().map(|c| p.q.get(i, c) * p.k.get(j, c)).sum::<f64>() / (hw as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[oi * d + c] = r.clone().enumerate().map(|(jj, j)| e[jj] / z * p.v.get(j, c)).sum();
            }
        }
    }
    out
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn block_of(t: &Tensor, p: &AttentionProjections, b: usize) -> Vec<f64> {
    let r = p.block.range(b);
    t.slice_rows(r.start, r.end).unwrap().into_data()
}

fn c1_reduction() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let p = random_instance(seed, 64, 32);
        let out = shared_attention(&p, &SimilarityMask::RECONSTRUCT).unwrap();
        for b in 0..3 {
            worst = worst.max(max_abs(&block_of(&out, &p, b), &block_self_attention(&p, b)));
        }
    }
    check(worst <= 1e-12, format!("max |Δ| = {worst:.2e} ≤ 1e-12 over 100 instances"))
}

fn c2_intactness() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let p = random_instance(seed + 1000, 48, 32);
        let mask = random_mask(seed);
        let out = shared_attention(&p, &mask).unwrap();
        for b in 0..2 {
            worst = worst.max(max_abs(&block_of(&out, &p, b), &block_self_attention(&p, b)));
        }
    }
    check(worst <= 1e-12, format!("reference blocks max |Δ| = {worst:.2e} ≤ 1e-12 over 100 masks"))
}

fn c3_disentangle(fixtures: &Fixtures) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let p = random_instance(seed + 2000, 48, 32);
        let mask = SimilarityMask::new(random_entry(seed, 21), MaskEntry::Weight(1.0), MaskEntry::Blocked).unwrap();
        let base = shared_attention(&p, &mask).unwrap();
        let r = p.block.range(2);
        let (mut k, mut v) = (p.k.clone(), p.v.clone());
        let junk = Tensor::randn(&[p.q.rows(), p.q.cols()], seed + 77).scale(5.0);
        for i in r.clone() {
            k.row_mut(i).copy_from_slice(junk.row(i));
            v.row_mut(i).copy_from_slice(junk.row(r.end - 1 - (i - r.start)));
        }
        let alt = AttentionProjections::new(p.q.clone(), k, v, p.head_count, p.block).unwrap();
        let out = shared_attention(&alt, &mask).unwrap();
        worst = worst.max(max_abs(&block_of(&base, &p, 2), &block_of(&out, &p, 2)));
    }
    // End to end: composite cut from the foreground at its own position.
    let h = Harmonizer::new(PipelineConfig::default()).unwrap();
    let inv = h
        .invert(&fixtures.fg, &fixtures.bg, &CompositeInput::Image(fixtures.aligned.clone()))
        .unwrap();
    let rec = h.reconstruct(&fixtures.aligned).unwrap();
    let gate = ShareGate {
        alpha: MaskEntry::Weight(1.0),
        beta: MaskEntry::Weight(1.0),
        ..h.config().gate()
    };
    let out = h.sample(&inv, ShareMode::Gated(gate), None).unwrap();
    let comp = block_split(&out.tokens, BlockIndex::triplet(h.codec().tokens()).unwrap()).unwrap()[2].clone();
    let dist = comp.relative_l2(&rec.tokens).unwrap();
    check(
        worst <= 1e-12 && dist <= TOY_ROUND_TRIP_TOL && rec.relative_error <= TOY_ROUND_TRIP_TOL,
        format!(
            "composite K/V replacement max |Δ| = {worst:.2e} ≤ 1e-12; harmonize(1,1) vs reconstruct = {dist:.2e} ≤ {TOY_ROUND_TRIP_TOL:.0e} (round trip {:.2e})",
            rec.relative_error
        ),
    )
}

fn c4_reweighting() -> Check {
    let m = 8;
    let d = 16;
    let mut worst = 0.0f64;
    let mut order_ok = true;
    for (bi, &beta) in [0.5, 0.9, 1.0, 1.1, 1.5].iter().enumerate() {
        let q = Tensor::randn(&[3 * m, d], 500 + bi as u64);
        let k = Tensor::randn(&[3 * m, d], 600 + bi as u64);
        // Background values are one-hot, so outputs read back the weights.
        let mut v = Tensor::zeros(&[3 * m, d]);
        for j in 0..m {
            v.row_mut(m + j)[j] = 1.0;
        }
        let p = AttentionProjections::new(q.clone(), k.clone(), v, 1, BlockIndex::triplet(m).unwrap()).unwrap();
        let mask = SimilarityMask::new(MaskEntry::Weight(1.0), MaskEntry::Weight(beta), MaskEntry::Blocked).unwrap();
        let out = shared_attention(&p, &mask).unwrap();
        for i in 2 * m..3 * m {
            let s: Vec<f64> = (0..m)
                .map(|j| q.row(i).iter().zip(k.row(m + j)).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let w = &out.row(i)[..m];
            for a in 0..m {
                for b in 0..m {
                    let expect = (beta * (s[a] - s[b])).exp();
                    worst = worst.max((w[a] / w[b] / expect - 1.0).abs());
                    if (s[a] > s[b]) != (w[a] > w[b]) && s[a] != s[b] {
                        order_ok = false;
                    }
                }
            }
        }
    }
    let mut increased = 0;
    let mut gaps = Vec::new();
    for seed in 0..20u64 {
        let p = shared_layer_projections(seed);
        let plain = attention_diagnostics(&p, &SimilarityMask::DISENTANGLE).unwrap();
        let rew = attention_diagnostics(&p, &SimilarityMask::REWEIGHT).unwrap();
        let gap = rew.mean_mass(Source::Background) - plain.mean_mass(Source::Background);
        gaps.push(gap);
        if gap > 0.0 {
            increased += 1;
        }
    }
    let min_gap = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    check(
        worst <= 1e-9 && order_ok && increased == 20,
        format!(
            "max relative ratio error {worst:.2e} ≤ 1e-9, order preserved: {order_ok}; composite→bg mass rises from (1,1) to (0.9,1.1) on {increased}/20 fixtures (min gain {min_gap:.3e})"
        ),
    )
}

/// Q/K/V entering the first shared layer of the toy backbone for a seeded
/// paste composite: model seed, stripe phase and paste position vary.
fn shared_layer_projections(seed: u64) -> AttentionProjections {
    let config = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let h = Harmonizer::new(config).unwrap();
    let fg = foreground(32);
    let phase = seed as f64 * 0.37;
    let bg = Image::from_fn(32, 32, |x, y| {
        let s = ((x as f64 * 0.7 + y as f64 * 0.3) + phase).sin() * 0.5 + 0.5;
        [0.3 + 0.5 * s, 0.6 * s, 0.8 - 0.4 * s]
    });
    let at = 2 * (seed as usize % 8);
    let (comp, _) = composite_paste(&bg, &fg, BBox::new(at, 16 - at, 16, 16), None).unwrap();
    let stacked = block_concat(&[
        h.encode(&fg).unwrap(),
        h.encode(&bg).unwrap(),
        h.encode(&comp).unwrap(),
    ])
    .unwrap();
    let shared = h.config().l_share + 1;
    let layers = h.config().layer_count();
    let mut seen = None;
    let mut observe = |layer: usize, p: &AttentionProjections, _: &SimilarityMask| {
        if layer == shared {
            seen = Some(p.clone());
        }
        Ok(())
    };
    h.denoiser()
        .forward_triplet(&stacked, &vec![SimilarityMask::RECONSTRUCT; layers], Some(&mut observe))
        .unwrap();
    seen.unwrap()
}

fn c5_dense() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let p = random_instance(seed + 4000, 40, 32);
        let mask = random_mask(seed + 4000);
        let out = shared_attention(&p, &mask).unwrap();
        worst = worst.max(max_abs(out.data(), &dense_reference(&p, &mask)));
    }
    check(worst <= 1e-9, format!("max |Δ| = {worst:.2e} ≤ 1e-9 over 50 instances"))
}

fn c6_solver() -> Check {
    let g = gaussian_score_model(1.0).unwrap();
    let z0 = Tensor::randn(&[1, 32], 9);
    let err = |n: usize| {
        let sched = NoiseSchedule::scaled_linear(n);
        let zt = dpm_invert(&z0, &g, &sched).unwrap();
        dpm_sample(&zt, &g, &sched).unwrap().relative_l2(&z0).unwrap()
    };
    let e: Vec<(usize, f64)> = [10, 25, 50, 100, 200].into_iter().map(|n| (n, err(n))).collect();
    let e25 = e[1].1;
    let monotone = e[0].1 > e[1].1 && e[1].1 > e[2].1;
    let ratios: Vec<f64> = e[1..].windows(2).map(|w| w[0].1 / w[1].1).collect();
    let min_ratio = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    check(
        e25 <= 1e-2 && monotone && min_ratio >= 3.0,
        format!(
            "round trip at 25 steps {e25:.2e} ≤ 1e-2; errors {:?}; halving ratios 25→200 {:?} (min {min_ratio:.2} ≥ 3)",
            e.iter().map(|(n, x)| format!("{n}:{x:.2e}")).collect::<Vec<_>>(),
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>()
        ),
    )
}

fn c7_gate(fixtures: &Fixtures, dir: &Path) -> Check {
    let (fg, bg, comp) = (dir.join("fg.png"), dir.join("bg.png"), dir.join("comp.png"));
    let (h0, rt) = (dir.join("gate_closed.png"), dir.join("roundtrip.png"));
    let a = painterly(&[
        "harmonize", "--fg", s(&fg), "--bg", s(&bg), "--composite", s(&comp), "--t-share", "0", "--output", s(&h0),
    ]);
    let b = painterly(&["roundtrip", "--input", s(&comp), "--output", s(&rt)]);
    let identical = code(&a) == 0 && code(&b) == 0 && std::fs::read(&h0).unwrap() == std::fs::read(&rt).unwrap();

    let h = Harmonizer::new(PipelineConfig::default()).unwrap();
    let inv = h.invert(&fixtures.fg, &fixtures.bg, &fixtures.paste).unwrap();
    let reference = h.reconstruct(&inv.composite).unwrap().tokens;
    let blocks = BlockIndex::triplet(h.codec().tokens()).unwrap();
    let mut dists = Vec::new();
    for t_share in [0, 15, 20, 25] {
        let gate = ShareGate {
            t_share,
            ..h.config().gate()
        };
        let out = h.sample(&inv, ShareMode::Gated(gate), None).unwrap();
        let comp = &block_split(&out.tokens, blocks).unwrap()[2];
        dists.push(comp.relative_l2(&reference).unwrap());
    }
    let monotone = dists.windows(2).all(|w| w[1] >= w[0]);
    check(
        identical && monotone && dists[0] == 0.0,
        format!(
            "CLI --t-share 0 output byte-identical to roundtrip: {identical}; distance to reconstruction over T_share 0/15/20/25 = {:?}, non-decreasing: {monotone}",
            dists.iter().map(|d| format!("{d:.3e}")).collect::<Vec<_>>()
        ),
    )
}

const ALPHA_BETA_GRID: &str = "alpha=1\nbeta=1\n\nalpha=0.9\nbeta=1.1\n\nalpha=0.9\nbeta=1.5\n\nalpha=0.5\nbeta=1.5\n\nalpha=1.5\nbeta=1.5\n\nalpha=0.5\nbeta=0.5\n";

fn run_sweep_cli(dir: &Path, tag: &str) -> (std::process::Output, std::path::PathBuf, std::path::PathBuf) {
    let grid = dir.join("grid.txt");
    std::fs::write(&grid, ALPHA_BETA_GRID).unwrap();
    let (report, tiles) = (dir.join(format!("report_{tag}.json")), dir.join(format!("tiles_{tag}.png")));
    let o = painterly(&[
        "sweep", "--fg", s(&dir.join("fg.png")), "--bg", s(&dir.join("bg.png")), "--bbox", "8,8,16,16", "--grid",
        s(&grid), "--report", s(&report), "--grid-image", s(&tiles),
    ]);
    (o, report, tiles)
}

fn c8_metrics(fixtures: &Fixtures, dir: &Path) -> Check {
    let embedders = [RandomConvEmbedder::new(1), RandomConvEmbedder::new(2)];
    let mut ident_err = 0.0f64;
    let images = [&fixtures.fg, &fixtures.bg, &fixtures.aligned];
    for emb in &embedders {
        for img in images {
            ident_err = ident_err.max(emb.distance(img, img).unwrap().abs());
            let m = compute_metrics(img, img, img, img, &fixtures.region, emb).unwrap();
            ident_err = ident_err.max(m.lp_bg.abs()).max(m.lp_fg.abs()).max((m.cp_img - 100.0).abs());
        }
    }
    let (o, report_path, tiles) = run_sweep_cli(dir, "a");
    let text = std::fs::read_to_string(&report_path).unwrap_or_default();
    let report = MetricReport::from_json(&text);
    let Ok(report) = report else {
        return check(false, format!("sweep exit {}, report unreadable", code(&o)));
    };
    let lossless = MetricReport::from_json(&report.to_json().unwrap()).unwrap() == report
        && reserializes_identically(&text, &report);
    let mut bracket = report.bounds.len() == 5;
    for (name, b) in &report.bounds {
        let vals: Vec<f64> = report.records.iter().filter_map(|r| r.metrics()?.get(name)).collect();
        bracket &= b.lower <= b.upper && vals.iter().all(|v| b.lower <= *v && *v <= b.upper);
        bracket &= report.records[b.lower_config].metrics().and_then(|m| m.get(name)) == Some(b.lower);
        bracket &= report.records[b.upper_config].metrics().and_then(|m| m.get(name)) == Some(b.upper);
    }
    let cp_in_range = report
        .records
        .iter()
        .filter_map(|r| r.metrics())
        .all(|m| [m.cp_img, m.cp_st, m.cp_dir].iter().all(|v| (-100.0..=100.0).contains(v)) && m.lp_bg >= 0.0 && m.lp_fg >= 0.0);
    let ok = code(&o) == 0 && report.succeeded() == 6 && report.manifest.len() == 6 && tiles.exists();
    check(
        ident_err <= 1e-6 && lossless && bracket && cp_in_range && ok,
        format!(
            "identity error {ident_err:.1e} ≤ 1e-6 over 2 embedders; 6-pair grid: {}/6 runs ok, bounds bracket raw values: {bracket}, JSON lossless: {lossless}",
            report.succeeded()
        ),
    )
}

/// Re-serializing the parsed report reproduces the file byte for byte.
fn reserializes_identically(text: &str, report: &MetricReport) -> bool {
    report.to_json().map(|t| t == text).unwrap_or(false)
}

fn c9_determinism(dir: &Path) -> Check {
    let (fg, bg, comp) = (dir.join("fg.png"), dir.join("bg.png"), dir.join("comp.png"));
    let mut same = Vec::new();
    // Harmonize and roundtrip repeat the invocations of criterion 7.
    let h1 = dir.join("gate_closed_2.png");
    let a = painterly(&[
        "harmonize", "--fg", s(&fg), "--bg", s(&bg), "--composite", s(&comp), "--t-share", "0", "--output", s(&h1),
    ]);
    same.push(("harmonize", code(&a) == 0 && std::fs::read(&h1).unwrap() == std::fs::read(dir.join("gate_closed.png")).unwrap()));
    let r1 = dir.join("roundtrip_2.png");
    let b = painterly(&["roundtrip", "--input", s(&comp), "--output", s(&r1)]);
    same.push(("roundtrip", code(&b) == 0 && std::fs::read(&r1).unwrap() == std::fs::read(dir.join("roundtrip.png")).unwrap()));
    let (o, rep, tiles) = run_sweep_cli(dir, "b");
    same.push((
        "sweep",
        code(&o) == 0
            && std::fs::read(&rep).unwrap() == std::fs::read(dir.join("report_a.json")).unwrap()
            && std::fs::read(&tiles).unwrap() == std::fs::read(dir.join("tiles_a.png")).unwrap(),
    ));
    let vis = |tag: &str| {
        let out = dir.join(format!("vis_{tag}"));
        let o = painterly(&[
            "visualize", "--fg", s(&fg), "--bg", s(&bg), "--bbox", "4,4,8,8", "--steps", "4", "--layers", "15",
            "--size", "16", "--out-dir", s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
            .iter()
            .map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap()))
            .collect::<Vec<_>>()
    };
    let (v1, v2) = (vis("a"), vis("b"));
    same.push(("visualize", !v1.is_empty() && v1 == v2));
    let all = same.iter().all(|(_, ok)| *ok);
    check(
        all,
        format!(
            "byte-identical repeats: {}",
            same.iter().map(|(n, ok)| format!("{n}={ok}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

struct Fixtures {
    fg: Image,
    bg: Image,
    /// Composite whose pasted pixels sit where they are in `fg`.
    aligned: Image,
    region: painterly::pipeline::RegionMask,
    paste: CompositeInput,
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path();
    let (fg_path, bg_path) = write_inputs(path, 32);
    let fg = Image::from_rgb8(32, 32, &load_rgb(&fg_path)).unwrap();
    let bg = Image::from_rgb8(32, 32, &load_rgb(&bg_path)).unwrap();
    let bbox = BBox::new(8, 8, 16, 16);
    let (aligned, region) = composite_paste(&bg, &fg.crop(&bbox).unwrap(), bbox, None).unwrap();
    let (pasted, _) = composite_paste(&bg, &fg, bbox, None).unwrap();
    save_png(&pasted, &path.join("comp.png"));
    let fx = Fixtures {
        fg,
        bg,
        aligned,
        region,
        paste: CompositeInput::Paste { bbox, mask: None },
    };

    let results = [
        criterion(1, "reduction equivalence", 5.0, c1_reduction),
        criterion(2, "reference intactness", 5.0, c2_intactness),
        criterion(3, "disentanglement", 30.0, || c3_disentangle(&fx)),
        criterion(4, "reweighting law", 10.0, c4_reweighting),
        criterion(5, "block-vs-dense oracle", 10.0, c5_dense),
        criterion(6, "solver correctness", 30.0, c6_solver),
        criterion(7, "gate semantics", 120.0, || c7_gate(&fx, path)),
        criterion(8, "metric identities and report contract", 180.0, || c8_metrics(&fx, path)),
        criterion(9, "determinism", 180.0, || c9_determinism(path)),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
