use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use comer_core::checkpoint;
use comer_core::count;
use comer_core::gradcheck::GradCheck;
use comer_core::oracle::{self, OracleErrors};
use comer_core::pyramid::STRIDES;
use comer_core::toy::{self, PATTERNS};
use comer_core::train::train_toy;
use comer_core::verify;
use comer_core::{CoMer, CoMerConfig, DType, Error, Result, Scalar, Tape, Tensor, Toggles, Variant};

use crate::pgm;
use crate::report::{sci, Report};
use crate::run_config::RunConfig;

/// Absolute tolerance of the loop-oracle comparisons.
pub const ORACLE_TOL: f64 = 1e-10;

fn dims(d: &[usize]) -> String {
    d.iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn note_f64_only(rc: &RunConfig, cmd: &str) {
    if rc.dtype == Some(DType::F32) {
        eprintln!("note: {cmd} always runs in f64");
    }
}

pub fn shapes(rc: &RunConfig) -> Result<Report> {
    match rc.dtype.unwrap_or(DType::F32) {
        DType::F32 => shapes_as::<f32>(rc),
        DType::F64 => shapes_as::<f64>(rc),
    }
}

fn shapes_as<T: Scalar>(rc: &RunConfig) -> Result<Report> {
    let cfg = &rc.model;
    let mut r = Report::default();
    r.info("variant", cfg.variant.name());
    r.info("input", dims(&[3, cfg.vit.img_h, cfg.vit.img_w]));
    for c in verify::shape_checks::<T>(cfg, rc.seed)? {
        r.check(c.name.as_str(), c.passes(), dims(&c.got), format!("={}", dims(&c.expected)));
    }
    Ok(r)
}

pub fn gradcheck(rc: &RunConfig) -> Result<Report> {
    note_f64_only(rc, "gradcheck");
    let gc = GradCheck {
        eps: rc.eps,
        samples_per_tensor: rc.samples,
        seed: rc.seed,
    };
    let reports = verify::gradcheck_model(&rc.model, rc.seed, &gc)?;
    let mut r = Report::default();
    r.info("eps", sci(rc.eps));
    for g in verify::by_group(&reports) {
        r.check(
            format!("grad/{}", g.name),
            g.passes(rc.tol),
            sci(g.max_rel),
            format!("<{}", sci(rc.tol)),
        );
    }
    let checked: usize = reports.iter().map(|t| t.checked).sum();
    let crossed: usize = reports.iter().map(|t| t.crossed).sum();
    r.info("entries_checked", checked);
    r.info("entries_crossing_cells", crossed);
    let alphas: Vec<_> = reports.iter().filter(|t| t.name.ends_with(".alpha")).collect();
    if !alphas.is_empty() {
        let g = alphas.iter().map(|t| t.max_grad).fold(f64::INFINITY, f64::min);
        r.check("alpha_grad_nonzero", g > 0.0, sci(g), ">0");
    }
    Ok(r)
}

pub fn equiv_init(rc: &RunConfig, alpha: Option<f64>) -> Result<Report> {
    note_f64_only(rc, "equiv-init");
    let eq = verify::equiv_init(&rc.model, rc.seed, alpha)?;
    let mut r = Report::default();
    if let Some(a) = alpha {
        r.info("alpha_override", a);
    }
    for (i, &d) in eq.layers.iter().enumerate() {
        let name = if i == 0 { "embed".to_string() } else { format!("block_{}", i - 1) };
        r.check(format!("layer/{name}"), d == 0.0, sci(d), "=0");
    }
    r.check("max_abs_diff", eq.max() == 0.0, sci(eq.max()), "=0");
    if let Some(i) = eq.first_mismatch() {
        r.check("first_differing_layer", false, i, "none");
    }
    Ok(r)
}

pub fn oracle(rc: &RunConfig) -> Result<Report> {
    note_f64_only(rc, "oracle");
    let mut worst = OracleErrors::default();
    for s in 0..rc.oracle_seeds {
        worst.merge(&oracle::check_all(&rc.model, rc.seed + s)?);
    }
    let mut r = Report::default();
    r.info("seeds", rc.oracle_seeds);
    for (name, err) in worst.entries() {
        r.check(name, err <= ORACLE_TOL, sci(err), format!("<={}", sci(ORACLE_TOL)));
    }
    let img = (rc.model.vit.img_h, rc.model.vit.img_w);
    let z = oracle::check_zero_offset(rc.seed, rc.model.dim(), rc.model.cti.heads, img)?;
    r.check("deform_zero_offset", z <= ORACLE_TOL, sci(z), format!("<={}", sci(ORACLE_TOL)));
    Ok(r)
}

/// Published overhead (CoMer minus plain ViT) per variant, in parameters.
pub fn published_overhead(v: Variant) -> Option<f64> {
    match v {
        Variant::Tiny => Some(3e6),
        Variant::Small => Some(6e6),
        Variant::Base => Some(15e6),
        _ => None,
    }
}

pub fn params(rc: &RunConfig, variant: Option<Variant>, allocate: bool) -> Result<Report> {
    let cfg = match variant {
        Some(v) => CoMerConfig::variant(v),
        None => rc.model.clone(),
    };
    cfg.validate()?;
    let b = count::analytic(&cfg);
    let mut r = Report::default();
    r.info("variant", cfg.variant.name());
    for (name, n) in b.entries() {
        r.info(format!("params/{name}"), n);
    }
    r.info("plain_vit", count::plain_vit(&cfg));
    r.info("total", b.total());
    r.info("overhead", b.overhead());
    if let Some(target) = published_overhead(cfg.variant) {
        let ratio = b.overhead() as f64 / target;
        r.check(
            "overhead_vs_published",
            (0.75..=1.25).contains(&ratio),
            format!("{:.2}M (x{ratio:.2})", b.overhead() as f64 / 1e6),
            format!("{}M +-25%", target / 1e6),
        );
    }
    if allocate || cfg.variant == Variant::Toy {
        let model = CoMer::<f32>::new(&cfg, rc.seed)?;
        let alloc = model.store.numel();
        r.check(
            "analytic_equals_allocated",
            model.breakdown() == b && alloc == b.total(),
            format!("{alloc} allocated, {} analytic", b.total()),
            "exact",
        );
    }
    let ladder: Vec<usize> = Toggles::ladder()
        .iter()
        .map(|(_, t)| count::analytic(&CoMerConfig { toggles: *t, ..cfg.clone() }).total())
        .collect();
    let increasing = ladder.windows(2).all(|w| w[0] < w[1]);
    let shown: Vec<String> = ladder.iter().map(ToString::to_string).collect();
    r.check("ladder_increasing", increasing, shown.join(" < "), "strict");
    Ok(r)
}

pub fn train(rc: &RunConfig) -> Result<Report> {
    match rc.dtype.unwrap_or(DType::F32) {
        DType::F32 => train_as::<f32>(rc),
        DType::F64 => train_as::<f64>(rc),
    }
}

fn train_as<T: Scalar>(rc: &RunConfig) -> Result<Report> {
    fs::create_dir_all(&rc.out).map_err(io(&rc.out))?;
    let csv_path = rc.out.join("loss.csv");
    let mut csv = BufWriter::new(fs::File::create(&csv_path).map_err(io(&csv_path))?);
    writeln!(csv, "step,loss").map_err(io(&csv_path))?;
    let mut write_err = None;

    let mut tc = rc.train.clone();
    tc.seed = rc.seed;
    let model = CoMer::<T>::new(&rc.model, rc.seed)?;
    let out = train_toy(model, &tc, |step, loss| {
        if write_err.is_none() {
            write_err = writeln!(csv, "{step},{loss}").err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(io(&csv_path)(e));
    }
    csv.flush().map_err(io(&csv_path))?;
    let ckpt = rc.checkpoint_path();
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    checkpoint::save(&out.model, &ckpt)?;

    let mut r = Report::default();
    r.info("dtype", T::DTYPE);
    r.info("steps", tc.steps);
    r.info("batch_size", tc.batch_size);
    if let (Some(first), Some(last)) = (out.losses.first(), out.losses.last()) {
        r.info("initial_loss", format!("{first:.6}"));
        r.info("last_batch_loss", format!("{last:.6}"));
    }
    r.info("loss_csv", csv_path.display());
    r.info("checkpoint", ckpt.display());
    r.check(
        "final_loss",
        out.final_loss < rc.threshold,
        format!("{:.6}", out.final_loss),
        format!("<{}", rc.threshold),
    );
    Ok(r)
}

pub fn export_features(rc: &RunConfig) -> Result<Report> {
    let path = rc.checkpoint_path();
    let bytes = checkpoint::read(&path)?;
    let header = checkpoint::inspect(&bytes)?;
    let dtype = header
        .dtype()
        .ok_or_else(|| Error::Checkpoint("mixed or missing tensor dtypes".into()))?;
    if let Some(want) = rc.dtype.filter(|&d| d != dtype) {
        return Err(Error::Dtype {
            expected: want.name(),
            found: dtype.name(),
        });
    }
    match dtype {
        DType::F32 => export_as(rc, checkpoint::decode::<f32>(&bytes)?),
        DType::F64 => export_as(rc, checkpoint::decode::<f64>(&bytes)?),
    }
}

fn input_image<T: Scalar>(rc: &RunConfig, cfg: &CoMerConfig) -> Result<Tensor<T>> {
    let path = Path::new(&rc.image);
    if path.is_file() {
        return Ok(pgm::read_image(path)?.cast());
    }
    if PATTERNS.contains(&rc.image.as_str()) {
        return toy::pattern(&rc.image, cfg.vit.img_h, cfg.vit.img_w, rc.seed);
    }
    Err(Error::Config(format!(
        "image `{}` is neither a file nor a pattern ({})",
        rc.image,
        PATTERNS.join(", ")
    )))
}

fn export_as<T: Scalar>(rc: &RunConfig, model: CoMer<T>) -> Result<Report> {
    let image = input_image::<T>(rc, &model.cfg)?;
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let img = tape.constant(image);
    let feats = model.forward(&mut tape, &p, img)?;
    let mut vit = [feats.vit_map; 3];
    for (l, v) in vit.iter_mut().enumerate() {
        let (h, w) = feats.shapes.shapes[l];
        if tape.dims(*v)[1..] != [h, w] {
            *v = tape.bilinear_resize(*v, h, w)?;
        }
    }
    fs::create_dir_all(&rc.out).map_err(io(&rc.out))?;
    let mut r = Report::default();
    let mut written = 0;
    for (branch, levels) in [("vit", vit), ("cnn", feats.cnn), ("fused", feats.out)] {
        for (l, &s) in STRIDES.iter().enumerate() {
            let t = tape.value(levels[l]);
            let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
            let data = t.data();
            let mean: Vec<f64> = (0..h * w)
                .map(|i| (0..c).map(|ch| data[ch * h * w + i].to_f64()).sum::<f64>() / c as f64)
                .collect();
            let file = rc.out.join(format!("{branch}_{s}.pgm"));
            pgm::write_pgm(&file, w, h, &pgm::normalize(&mean))?;
            r.info(format!("{branch}_{s}"), format!("{}x{} {}", w, h, file.display()));
            written += 1;
        }
    }
    r.check("files_written", written == 9, written, "=9");
    Ok(r)
}
