use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sptok_core::gradcheck::suites::{self, Module};
use sptok_core::io::netpbm::{resize_chw, Image};
use sptok_core::io::{assoc, config};
use sptok_core::network::{count_flops, ModelConfig, Network, STAGES};
use sptok_core::superpixel::{self, GridGeometry, NeighborhoodSpec, SuperpixelParams};
use sptok_core::{synthetic, ParamStore, Rng, Tape, Tensor};
use sptok_oracle::{run_suite, Suite};

use crate::exit::{Failure, Outcome};

/// Writes through a temporary file in the destination directory, renamed
/// into place only once everything is on disk.
fn write_atomic(path: &Path, bytes: &[u8]) -> Outcome {
    let io = |e: std::io::Error| Failure::Io(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn load_config(path: &Path) -> Result<ModelConfig, Failure> {
    let bad = |m: String| Failure::Config(format!("{}: {m}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let cfg = config::parse(&text).map_err(|e| bad(e.to_string()))?;
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    Ok(cfg)
}

fn load_image(path: &Path, channels: usize) -> Result<Image, Failure> {
    let bad = |m: String| Failure::Io(format!("{}: {m}", path.display()));
    let bytes = fs::read(path).map_err(|e| bad(e.to_string()))?;
    let img = Image::decode(&bytes).map_err(|e| bad(e.to_string()))?;
    if img.channels != channels {
        let want = if channels == 3 { "P6" } else { "P5" };
        return Err(bad(format!("expected a {want} image")));
    }
    Ok(img)
}

fn resized(img: &Image, side: usize) -> Result<Tensor, Failure> {
    resize_chw(&img.to_tensor(), side, side).map_err(|e| Failure::Io(e.to_string()))
}

fn encode_map(map: &Tensor) -> Result<Vec<u8>, Failure> {
    Image::from_tensor(map)
        .map(|i| i.encode())
        .map_err(|e| Failure::Io(e.to_string()))
}

pub fn forward(rgb: &Path, depth: &Path, config: &Path, out: &Path, dump_scales: Option<&Path>) -> Outcome {
    let cfg = load_config(config)?;
    let (rgb_img, depth_img) = (load_image(rgb, 3)?, load_image(depth, 1)?);
    let size = cfg.input_size;
    let (rgb_t, depth_t) = (resized(&rgb_img, size)?, resized(&depth_img, size)?);
    let net = Network::new(cfg).map_err(|e| Failure::Config(e.to_string()))?;
    let maps = net
        .predict(&rgb_t, &depth_t)
        .map_err(|e| Failure::Io(format!("forward pass: {e}")))?;
    write_atomic(out, &encode_map(maps.prediction())?)?;
    println!("wrote {} ({size}x{size})", out.display());
    if let Some(dir) = dump_scales {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
        for i in 1..=STAGES {
            let path = dir.join(format!("sm{i}.pgm"));
            write_atomic(&path, &encode_map(maps.sm(i))?)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

pub struct SuperpixelArgs {
    pub input: PathBuf,
    pub cell: usize,
    pub radius: usize,
    pub iters: usize,
    pub out: PathBuf,
    pub assoc: Option<PathBuf>,
    pub size: Option<usize>,
    pub seed: u64,
}

/// `[3, H, W]` image where every pixel takes the mean color of its label.
fn paint_means(image: &Tensor, labels: &[usize], m: usize) -> Tensor {
    let hw = labels.len();
    let mut sums = vec![[0.0; 3]; m];
    let mut counts = vec![0usize; m];
    for (p, &l) in labels.iter().enumerate() {
        for (ch, s) in sums[l].iter_mut().enumerate() {
            *s += image.data()[ch * hw + p];
        }
        counts[l] += 1;
    }
    let mut out = vec![0.0; 3 * hw];
    for (p, &l) in labels.iter().enumerate() {
        for ch in 0..3 {
            out[ch * hw + p] = sums[l][ch] / counts[l] as f64;
        }
    }
    Tensor::new(image.shape(), out).expect("same shape as input")
}

pub fn superpixels(args: &SuperpixelArgs) -> Outcome {
    let img = load_image(&args.input, 3)?;
    let image = match args.size {
        Some(0) => return Err(Failure::Geometry("--size must be positive".into())),
        Some(s) => resized(&img, s)?,
        None => img.to_tensor(),
    };
    let (h, w) = (image.dim(1), image.dim(2));
    let geo = GridGeometry::new(h, w, args.cell).map_err(|e| Failure::Geometry(e.to_string()))?;
    let spec = NeighborhoodSpec::new(args.radius, args.cell);

    let mut store = ParamStore::new();
    let params = SuperpixelParams::new(&mut store, "sp", 3, &mut Rng::new(args.seed));
    let mut tape = Tape::inference(&store);
    let x = tape.constant(synthetic::centered_features(&image));
    let state = superpixel::generate(&mut tape, x, &geo, &spec, &params, args.iters)
        .map_err(|e| Failure::Io(format!("superpixel generation: {e}")))?;
    let labels = superpixel::argmax_labels(&state.assoc);

    write_atomic(&args.out, &encode_map(&paint_means(&image, &labels, geo.m()))?)?;
    println!(
        "wrote {} ({w}x{h}, {} superpixels of {}x{})",
        args.out.display(),
        geo.m(),
        args.cell,
        args.cell
    );
    if let Some(path) = &args.assoc {
        let bytes = assoc::encode(&state.assoc).map_err(|e| Failure::Io(e.to_string()))?;
        write_atomic(path, &bytes)?;
        println!("wrote {} ({} x {} association)", path.display(), geo.n(), geo.m());
    }
    Ok(())
}

/// Aligned per-stage table of a flop report.
pub fn flops_table(cfg: &ModelConfig) -> Result<String, Failure> {
    let report = count_flops(cfg).map_err(|e| Failure::Config(e.to_string()))?;
    let mut out = String::new();
    let line = |cells: [String; 10]| {
        format!(
            "{:>5} {:>6} {:>5} {:>12} {:>12} {:>12} {:>12} {:>12} {:>14} {:>10}\n",
            cells[0], cells[1], cells[2], cells[3], cells[4], cells[5], cells[6], cells[7], cells[8], cells[9]
        )
    };
    out += &line(
        ["stage", "HW", "M", "encoder", "sagem", "salrm", "fusion", "decoder", "dense_sagem", "HW/M"].map(String::from),
    );
    for (s, (st, &(hw, m))) in report.stages.iter().zip(&report.sizes).enumerate() {
        let ratio = st.sagem.dense_attention as f64 / st.sagem.attention as f64;
        out += &line([
            format!("{}", s + 1),
            hw.to_string(),
            m.to_string(),
            st.encoder.to_string(),
            st.sagem.total().to_string(),
            st.salrm.total().to_string(),
            st.fusion.to_string(),
            st.decoder.to_string(),
            (st.sagem.total() - st.sagem.attention + st.sagem.dense_attention).to_string(),
            format!("{ratio:.4}"),
        ]);
    }
    let (total, dense) = (report.total(), report.dense_total());
    out += &format!("total flops          {total}\n");
    out += &format!("dense-attention total {dense}\n");
    out += &format!("dense / sparse        {:.4}\n", dense as f64 / total as f64);
    for (s, st) in report.stages.iter().enumerate() {
        let (hw, m) = report.sizes[s];
        out += &format!(
            "stage {} attention: sparse {} dense {} (HW/M = {hw}/{m})\n",
            s + 1,
            st.sagem.attention,
            st.sagem.dense_attention
        );
    }
    Ok(out)
}

pub fn flops(config: &Path) -> Outcome {
    let cfg = load_config(config)?;
    print!("{}", flops_table(&cfg)?);
    Ok(())
}

pub fn gradcheck(module: Module, seed: u64, eps: f64) -> Outcome {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Failure::Config(format!("--eps must be positive, got {eps}")));
    }
    let r = suites::run(module, seed, eps).map_err(|e| Failure::Io(format!("gradient check: {e}")))?;
    let tol = module.tolerance();
    println!(
        "{} seed {seed} eps {eps:e}: {} coordinates, worst relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}), tolerance {tol:e}",
        module.name(),
        r.checked,
        r.worst_rel,
        r.worst_param,
        r.worst_index,
        r.analytic,
        r.numeric
    );
    if r.passes(tol) {
        println!("pass");
        Ok(())
    } else {
        Err(Failure::Threshold(format!("{} gradient check exceeded {tol:e}", module.name())))
    }
}

pub fn oracle(suite: Suite, trials: usize, seed: u64) -> Outcome {
    if trials == 0 {
        println!("{suite}: 0 cases");
        return Ok(());
    }
    let reports = run_suite(suite, trials, seed).map_err(|e| Failure::Io(format!("oracle suite: {e}")))?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    let worst = reports.iter().map(|r| r.max_dev).fold(0.0, f64::max);
    println!(
        "{suite}: {} cases, {failed} failed, worst deviation {worst:.3e} (tolerance {:e})",
        reports.len(),
        suite.tolerance()
    );
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Threshold(format!("{failed} {suite} cases deviate beyond tolerance")))
    }
}
