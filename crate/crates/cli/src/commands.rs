use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dcag_core::attention::{attention_weights, joint_attention, project_qkv};
use dcag_core::harness::{iso_contour, sweep, ToyStack};
use dcag_core::invariants::run_checks;
use dcag_core::profiler::{pearson, profile_stack_with, RatioMode};
use dcag_core::report::{fmt_f64, write_heatmap_pgm, write_polylines, write_profile_csv, write_sweep_csv};
use dcag_core::{apply_dcag, GuidanceConfig, Tensor};
use serde_json::Value;

use crate::args::{AttendArgs, ProfileArgs, SweepArgs};
use crate::manifest::{num, RunManifest};

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating output directory {}", path.display()))
}

pub fn profile(args: &ProfileArgs) -> Result<()> {
    let dims = &args.dims;
    let stack = ToyStack::new(dims.shape(), dims.seed)?;
    let input = stack.random_input();
    let mode = if args.per_head { RatioMode::PerHead } else { RatioMode::TokenFlattened };
    let (k, v) = profile_stack_with(&stack, &input, mode)?;

    out_dir(&dims.out)?;
    let mut manifest = RunManifest::new("profile", dims);
    manifest
        .param("heatmap", args.heatmap)
        .param("ratio_mode", if args.per_head { "per-head" } else { "token-flattened" });

    let mut csv = Vec::new();
    write_profile_csv(&mut csv, &k, &v)?;
    manifest.write_artifact(&dims.out, "ratios.csv", &csv)?;
    if args.heatmap {
        for (name, p) in [("heatmap_k.pgm", &k), ("heatmap_v.pgm", &v)] {
            let mut bytes = Vec::new();
            write_heatmap_pgm(&mut bytes, p)?;
            manifest.write_artifact(&dims.out, name, &bytes)?;
        }
    }

    let r = pearson(k.ratios(), v.ratios()).ok();
    let r_text = r.map(fmt_f64).unwrap_or_else(|| "undefined".into());
    println!("mean_ratio_k {}", fmt_f64(k.mean()));
    println!("mean_ratio_v {}", fmt_f64(v.mean()));
    println!("pearson_r {r_text}");
    manifest
        .summary("mean_ratio_k", num(k.mean()))
        .summary("mean_ratio_v", num(v.mean()))
        .summary("pearson_r", r.map(num).unwrap_or(Value::Null));
    manifest.finish(&dims.out)
}

pub fn sweep_cmd(args: &SweepArgs) -> Result<()> {
    let dims = &args.dims;
    let stack = ToyStack::new(dims.shape(), dims.seed)?;
    let input = stack.random_input();
    let result = sweep(&stack, &input, &args.dk.values, &args.dv.values)?;

    out_dir(&dims.out)?;
    let mut manifest = RunManifest::new("sweep", dims);
    manifest
        .param("dk", args.dk.text.as_str())
        .param("dv", args.dv.text.as_str())
        .param("dk_values", args.dk.values.iter().map(|&v| num(v)).collect::<Vec<_>>())
        .param("dv_values", args.dv.values.iter().map(|&v| num(v)).collect::<Vec<_>>())
        .param("contour", args.contour.iter().map(|c| c.text.clone()).collect::<Vec<_>>());

    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &result)?;
    manifest.write_artifact(&dims.out, "sweep.csv", &csv)?;

    let mut contours = Vec::new();
    for (i, spec) in args.contour.iter().enumerate() {
        let lines = iso_contour(&result, spec.metric, spec.level)?;
        let name = format!("contour_{i}_{}.csv", spec.metric);
        let mut bytes = Vec::new();
        write_polylines(&mut bytes, &lines)?;
        manifest.write_artifact(&dims.out, &name, &bytes)?;
        println!("contour {} -> {name} ({} polylines)", spec.text, lines.len());
        contours.push(serde_json::json!({
            "metric": spec.metric.to_string(),
            "level": num(spec.level),
            "file": name,
            "polylines": lines.len(),
        }));
    }

    let min_ssim = result.records.iter().map(|r| r.ssim).fold(f64::INFINITY, f64::min);
    let max_mse = result.records.iter().map(|r| r.mse).fold(f64::NEG_INFINITY, f64::max);
    println!("grid_points {}", result.records.len());
    println!("min_ssim {}", fmt_f64(min_ssim));
    println!("max_mse {}", fmt_f64(max_mse));
    manifest
        .summary("grid_points", result.records.len())
        .summary("min_ssim", num(min_ssim))
        .summary("max_mse", num(max_mse))
        .summary("contours", contours);
    manifest.finish(&dims.out)
}

/// Rows of a `[S, ...]` tensor as `token,c0,c1,...`.
fn block_csv(t: &Tensor) -> String {
    let width = t.row_len();
    let mut s = String::from("token");
    for c in 0..width {
        let _ = write!(s, ",c{c}");
    }
    s.push('\n');
    for i in 0..t.rows() {
        let _ = write!(s, "{i}");
        for v in t.row(i) {
            let _ = write!(s, ",{}", fmt_f64(*v));
        }
        s.push('\n');
    }
    s
}

/// Returns whether every requested check passed.
pub fn attend(args: &AttendArgs) -> Result<bool> {
    let dims = &args.dims;
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read config file {}", args.config.display()))?;
    let stack = ToyStack::new(dims.shape(), dims.seed)?;
    let input = stack.random_input();
    let cfg = GuidanceConfig::from_document(&text, Some(input.image_range()))
        .with_context(|| format!("invalid configuration in {}", args.config.display()))?;
    let layer = &stack.layers()[0];
    let effective = if cfg.guides_layer(0) {
        cfg.clone()
    } else {
        GuidanceConfig::identity(cfg.token_range.clone())
    };

    let qkv = project_qkv(&input, layer)?;
    let guided = apply_dcag(qkv.clone(), &effective)?;
    let weights = attention_weights(&guided)?;
    let out = joint_attention(&guided)?;
    let range = qkv.image_range();

    out_dir(&dims.out)?;
    let mut manifest = RunManifest::new("attend", dims);
    manifest
        .param("config", args.config.display().to_string())
        .param("delta_k", num(cfg.delta_k))
        .param("delta_v", num(cfg.delta_v))
        .param("lambda_k", num(cfg.lambda_k))
        .param("lambda_v", num(cfg.lambda_v))
        .param("token_range", vec![cfg.token_range.start, cfg.token_range.end])
        .param("guided_layers", cfg.guided_layers.iter().copied().collect::<Vec<_>>())
        .param("layer", 0)
        .param("check", args.check);

    for (name, t) in [
        ("k_pre.csv", qkv.k()),
        ("k_post.csv", guided.k()),
        ("v_pre.csv", qkv.v()),
        ("v_post.csv", guided.v()),
    ] {
        let block = t.slice_rows(range.clone())?;
        manifest.write_artifact(&dims.out, name, block_csv(&block).as_bytes())?;
    }

    let s = qkv.seq_len();
    let mut csv = String::from("head,query,key,weight\n");
    for (idx, w) in weights.data().iter().enumerate() {
        let (h, rest) = (idx / (s * s), idx % (s * s));
        let _ = writeln!(csv, "{h},{},{},{}", rest / s, rest % s, fmt_f64(*w));
    }
    manifest.write_artifact(&dims.out, "attention.csv", csv.as_bytes())?;

    let joined = out.txt().concat_rows(out.img())?;
    manifest.write_artifact(&dims.out, "output.csv", block_csv(&joined).as_bytes())?;

    let mut all_passed = true;
    if args.check {
        let outcomes = run_checks(&input, layer, &effective)?;
        let mut checks = Vec::new();
        for o in &outcomes {
            println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            all_passed &= o.passed;
            checks.push(serde_json::json!({ "name": o.name, "passed": o.passed, "detail": o.detail }));
        }
        manifest.summary("checks", checks).summary("all_passed", all_passed);
    }
    println!("output_max_abs {}", fmt_f64(joined.max_abs()));
    manifest.summary("output_max_abs", num(joined.max_abs()));
    manifest.finish(&dims.out)?;
    Ok(all_passed)
}
