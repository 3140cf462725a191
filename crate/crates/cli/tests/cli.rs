use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sptok_core::io::netpbm::Image;
use sptok_core::io::{assoc, config};
use sptok_core::network::{count_flops, ModelConfig};
use sptok_core::superpixel::argmax_labels;
use sptok_core::{synthetic, Rng, Tensor};
use tempfile::TempDir;

fn sptok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sptok")).args(args).output().expect("spawn sptok")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn write_image(dir: &Path, name: &str, t: &Tensor) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, Image::from_tensor(t).unwrap().encode()).unwrap();
    path
}

struct ForwardInputs {
    dir: TempDir,
    rgb: PathBuf,
    depth: PathBuf,
    config: PathBuf,
}

fn forward_inputs() -> ForwardInputs {
    let dir = TempDir::new().unwrap();
    let pair = synthetic::saliency_pair(40, &mut Rng::new(5));
    let rgb = write_image(dir.path(), "rgb.ppm", &pair.rgb);
    let depth = write_image(dir.path(), "depth.pgm", &pair.depth.reshape(&[1, 40, 40]).unwrap());
    let config = dir.path().join("tiny.cfg");
    fs::write(&config, config::serialize(&ModelConfig::tiny())).unwrap();
    ForwardInputs { dir, rgb, depth, config }
}

fn run_forward(inp: &ForwardInputs, rgb: &Path, config: &Path, out: &Path) -> Output {
    sptok(&[
        "forward",
        "--rgb",
        path_str(rgb),
        "--depth",
        path_str(&inp.depth),
        "--config",
        path_str(config),
        "--out",
        path_str(out),
    ])
}

#[test]
fn forward_writes_a_deterministic_map_at_input_resolution() {
    let inp = forward_inputs();
    let (a, b) = (inp.dir.path().join("a.pgm"), inp.dir.path().join("b.pgm"));
    for out in [&a, &b] {
        let o = run_forward(&inp, &inp.rgb, &inp.config, out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bytes = fs::read(&a).unwrap();
    assert!(bytes.starts_with(b"P5"));
    let img = Image::decode(&bytes).unwrap();
    assert_eq!((img.width, img.height, img.channels), (32, 32, 1));
    assert_eq!(bytes, fs::read(&b).unwrap());
}

#[test]
fn forward_dumps_every_scale() {
    let inp = forward_inputs();
    let scales = inp.dir.path().join("scales");
    let out = inp.dir.path().join("sm.pgm");
    let o = sptok(&[
        "forward",
        "--rgb",
        path_str(&inp.rgb),
        "--depth",
        path_str(&inp.depth),
        "--config",
        path_str(&inp.config),
        "--out",
        path_str(&out),
        "--dump-scales",
        path_str(&scales),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 1..=4 {
        let img = Image::decode(&fs::read(scales.join(format!("sm{i}.pgm"))).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (32, 32));
    }
    assert_eq!(fs::read(scales.join("sm1.pgm")).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn forward_rejects_truncated_image_without_output() {
    let inp = forward_inputs();
    let bytes = fs::read(&inp.rgb).unwrap();
    let cut = inp.dir.path().join("cut.ppm");
    fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let out = inp.dir.path().join("never.pgm");
    let o = run_forward(&inp, &cut, &inp.config, &out);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn forward_rejects_bad_configs() {
    let inp = forward_inputs();
    let out = inp.dir.path().join("never.pgm");
    for (name, text) in [
        ("garbled.cfg", "input_size = many\n"),
        ("unknown.cfg", "depth_layers = 3\n"),
        ("invalid.cfg", "input_size = 30\n"),
    ] {
        let path = inp.dir.path().join(name);
        fs::write(&path, text).unwrap();
        let o = run_forward(&inp, &inp.rgb, &path, &out);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
        assert!(!out.exists());
    }
}

fn superpixels(input: &Path, cell: usize, out: &Path, extra: &[&str]) -> Output {
    let cell = cell.to_string();
    let mut args = vec!["superpixels", "--input", path_str(input), "--cell", &cell, "--out", path_str(out)];
    args.extend_from_slice(extra);
    sptok(&args)
}

#[test]
fn constant_image_is_unchanged() {
    let dir = TempDir::new().unwrap();
    let mut t = Tensor::zeros(&[3, 12, 12]);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = [0.2, 0.6, 0.9][i / 144];
    }
    let input = write_image(dir.path(), "flat.ppm", &t);
    let out = dir.path().join("out.ppm");
    let o = superpixels(&input, 3, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&input).unwrap());
}

#[test]
fn one_cell_paints_the_global_mean() {
    let dir = TempDir::new().unwrap();
    let pic = synthetic::two_region(8, &mut Rng::new(2));
    let input = write_image(dir.path(), "in.ppm", &pic.rgb);
    let out = dir.path().join("out.ppm");
    let o = superpixels(&input, 8, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let src = Image::decode(&fs::read(&input).unwrap()).unwrap().to_tensor();
    let img = Image::decode(&fs::read(&out).unwrap()).unwrap();
    for ch in 0..3 {
        let plane = &src.data()[ch * 64..(ch + 1) * 64];
        let mean = plane.iter().sum::<f64>() / 64.0;
        let want = (mean * 255.0).round() as u8;
        assert!(img.data.chunks(3).all(|px| px[ch] == want), "channel {ch}");
    }
}

#[test]
fn non_dividing_cell_is_a_geometry_error() {
    let dir = TempDir::new().unwrap();
    let input = write_image(dir.path(), "in.ppm", &Tensor::full(&[3, 10, 10], 0.5));
    let out = dir.path().join("out.ppm");
    let o = superpixels(&input, 3, &out, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn two_region_superpixels_are_pure() {
    let dir = TempDir::new().unwrap();
    let mut purities = Vec::new();
    for seed in 0..5 {
        let pic = synthetic::two_region(24, &mut Rng::new(seed));
        let input = write_image(dir.path(), "in.ppm", &pic.rgb);
        let (out, dump) = (dir.path().join("out.ppm"), dir.path().join("a.spas"));
        let o = superpixels(&input, 4, &out, &["--assoc", path_str(&dump)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let a = assoc::decode(&fs::read(&dump).unwrap()).unwrap();
        assert_eq!(a.shape(), &[576, 36]);
        purities.push(synthetic::cluster_purity(&argmax_labels(&a), &pic.labels));
    }
    let mean = purities.iter().sum::<f64>() / purities.len() as f64;
    assert!(mean >= 0.95, "purities {purities:?}");
}

#[test]
fn flops_totals_match_the_counter() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("tiny.cfg");
    let cfg = ModelConfig::tiny();
    fs::write(&path, config::serialize(&cfg)).unwrap();
    let o = sptok(&["flops", "--config", path_str(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let report = count_flops(&cfg).unwrap();
    let total = text.lines().find(|l| l.starts_with("total flops")).unwrap();
    assert_eq!(total.split_whitespace().last().unwrap(), report.total().to_string());
    let dense = text.lines().find(|l| l.starts_with("dense-attention total")).unwrap();
    assert_eq!(dense.split_whitespace().last().unwrap(), report.dense_total().to_string());
    assert_eq!(text.lines().filter(|l| l.contains("attention: sparse")).count(), 4);
}

#[test]
fn gradcheck_reports_pass() {
    let o = sptok(&["gradcheck", "--module", "loss"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l == "pass"));
}

#[test]
fn unknown_module_prints_usage() {
    let o = sptok(&["gradcheck", "--module", "decoder"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn oracle_with_no_trials_reports_zero_cases() {
    let o = sptok(&["oracle", "--suite", "topk", "--trials", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "topk: 0 cases");
}

#[test]
fn oracle_mask_suite_passes() {
    let o = sptok(&["oracle", "--suite", "mask", "--trials", "50", "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    assert!(last.starts_with("mask: 50 cases, 0 failed"), "{last}");
}
