use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use edgemix::backbone::{EdgeNetwork, Trainer};
use edgemix::datapipe::{
    expand_all, load_dataset, read_png_gray, read_png_rgb, write_gray_png, write_samples,
};
use edgemix::evalkit::{evaluate, export_pr, BinaryMap, EdgeMap, EvalReport};
use edgemix::tensor::Tensor;
use edgemix::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn augment(cfg: &RunConfig, manifest: &Path, out_dir: &Path) -> Result<()> {
    let sources = load_dataset(manifest)?;
    if sources.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no samples",
            manifest.display()
        )));
    }
    let out = expand_all(&sources, &cfg.augment)?;
    let written = write_samples(&out, out_dir)?;
    println!("sources {}", sources.len());
    println!("emitted {}", out.len());
    eprintln!("wrote {}", written.display());
    Ok(())
}

/// Sample indices for global step `step`: consecutive slices of per-epoch
/// shuffles, so a resumed run draws the same batches.
pub fn batch_indices(n: usize, batch: usize, step: u64, seed: u64) -> Vec<usize> {
    let start = step as usize * batch;
    let mut cache: Option<(usize, Vec<usize>)> = None;
    (start..start + batch)
        .map(|k| {
            let epoch = k / n;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(
                    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                ));
                cache = Some((epoch, order));
            }
            cache.as_ref().unwrap().1[k % n]
        })
        .collect()
}

pub struct TrainPaths<'a> {
    pub data: &'a Path,
    pub checkpoint: &'a Path,
    pub loss_log: Option<&'a Path>,
    pub resume: bool,
}

pub fn train(cfg: &RunConfig, paths: TrainPaths) -> Result<()> {
    let samples = load_dataset(paths.data)?;
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no samples",
            paths.data.display()
        )));
    }
    let mut trainer = if paths.resume {
        let t = Trainer::resume(paths.checkpoint, cfg.train.adam)?;
        if t.net.config().to_echo() != cfg.net.to_echo() {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different network config",
                paths.checkpoint.display()
            )));
        }
        t
    } else {
        Trainer::new(
            EdgeNetwork::build(cfg.net.clone(), cfg.seed)?,
            cfg.train.adam,
        )
    };
    eprintln!(
        "network has {} parameters; starting at step {}",
        trainer.net.param_count(),
        trainer.step_count()
    );

    let log_path = paths
        .loss_log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| paths.checkpoint.with_extension("loss.csv"));
    let fresh = !paths.resume || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    if fresh {
        writeln!(log, "step,total,s1,s2,s3,s4,s5,s6,fused").map_err(io_err(&log_path))?;
    }

    let mut first = None;
    let mut last = None;
    while trainer.step_count() < cfg.train.steps {
        let idx = batch_indices(
            samples.len(),
            cfg.train.batch_size,
            trainer.step_count(),
            cfg.seed,
        );
        let batch: Vec<(Tensor, Tensor)> = idx
            .iter()
            .map(|&i| (samples[i].image.clone(), samples[i].gt.clone()))
            .collect();
        let r = trainer.train_step(&batch)?;
        let sides: Vec<String> = r.sides.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(
            log,
            "{},{:.6},{},{:.6}",
            r.step,
            r.loss,
            sides.join(","),
            r.fused
        )
        .map_err(io_err(&log_path))?;
        first.get_or_insert(r.loss);
        last = Some(r.loss);
        if trainer.step_count() % cfg.train.checkpoint_every == 0 {
            trainer.save(paths.checkpoint)?;
            eprintln!("step {} loss {:.4}; checkpoint saved", r.step, r.loss);
        }
    }
    trainer.save(paths.checkpoint)?;
    println!("steps {}", trainer.step_count());
    if let (Some(a), Some(b)) = (first, last) {
        println!("first_loss {a:.6}");
        println!("final_loss {b:.6}");
    }
    Ok(())
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Extends `t` at the bottom and right by mirroring interior rows and columns.
pub fn reflect_pad(t: &Tensor, h: usize, w: usize) -> Tensor {
    let [c, oh, ow] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    Tensor::from_fn([c, h, w], |k| {
        let (ch, y, x) = (k / (h * w), k / w % h, k % w);
        t.at3(ch, reflect(y, oh), reflect(x, ow))
    })
}

pub fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let c = t.shape()[0];
    Tensor::from_fn([c, h, w], |k| t.at3(k / (h * w), k / w % h, k % w))
}

fn collect_pngs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(Error::Data(format!("no such input {}", p.display())));
        }
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn infer(checkpoint: &Path, inputs: &[PathBuf], out_dir: &Path, side_maps: bool) -> Result<()> {
    let (net, _) = EdgeNetwork::<f32>::load(checkpoint)?;
    let files = collect_pngs(inputs)?;
    if files.is_empty() {
        return Err(Error::Data("no input images".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let f = net.config().max_factor();
    for file in &files {
        let image = read_png_rgb(file)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
        let padded = if (ph, pw) != (h, w) {
            eprintln!(
                "warning: {} is {h}x{w}, not a multiple of {f}; reflect-padding to {ph}x{pw}",
                file.display()
            );
            reflect_pad(&image, ph, pw)
        } else {
            image
        };
        let out = net.predict(&padded)?;
        let name = stem(file);
        write_gray_png(
            &crop(&out.fused, h, w),
            out_dir.join(format!("{name}_fused.png")),
        )?;
        if side_maps {
            for (i, s) in out.sides.iter().enumerate() {
                write_gray_png(
                    &crop(s, h, w),
                    out_dir.join(format!("{name}_s{}.png", i + 1)),
                )?;
            }
        }
    }
    println!("images {}", files.len());
    Ok(())
}

/// Prediction stem with an inference suffix removed; side maps yield `None`.
fn prediction_key(stem: &str) -> Option<&str> {
    if let Some((_, tail)) = stem.rsplit_once("_s") {
        if matches!(tail, "1" | "2" | "3" | "4" | "5" | "6") {
            return None;
        }
    }
    Some(stem.strip_suffix("_fused").unwrap_or(stem))
}

fn pairs(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut preds = BTreeMap::new();
    for p in collect_pngs(&[pred_dir.to_path_buf()])? {
        let s = stem(&p);
        if let Some(key) = prediction_key(&s) {
            preds.insert(key.to_string(), p);
        }
    }
    let gts: BTreeMap<String, PathBuf> = collect_pngs(&[gt_dir.to_path_buf()])?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    let no_gt: Vec<&str> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(String::as_str)
        .collect();
    let no_pred: Vec<&str> = gts
        .keys()
        .filter(|k| !preds.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !no_gt.is_empty() || !no_pred.is_empty() {
        let mut msg = Vec::new();
        if !no_gt.is_empty() {
            msg.push(format!("missing gt for {}", no_gt.join(", ")));
        }
        if !no_pred.is_empty() {
            msg.push(format!("missing prediction for {}", no_pred.join(", ")));
        }
        return Err(Error::Data(msg.join("; ")));
    }
    if preds.is_empty() {
        return Err(Error::Data(format!(
            "no PNG predictions in {}",
            pred_dir.display()
        )));
    }
    Ok(preds
        .into_iter()
        .map(|(k, p)| (p, gts[&k].clone()))
        .collect())
}

fn run_eval(cfg: &RunConfig, pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let mut preds = Vec::new();
    let mut gts: Vec<BinaryMap> = Vec::new();
    for (p, g) in pairs(pred_dir, gt_dir)? {
        preds.push(EdgeMap::from_tensor(&read_png_gray(&p)?)?);
        gts.push(EdgeMap::from_tensor(&read_png_gray(&g)?)?.binarize(0.5));
    }
    evaluate(&preds, &gts, &cfg.eval)
}

pub fn eval(cfg: &RunConfig, pred_dir: &Path, gt_dir: &Path, pr_csv: Option<&Path>) -> Result<()> {
    let rep = run_eval(cfg, pred_dir, gt_dir)?;
    if let Some(path) = pr_csv {
        export_pr(&rep, path)?;
        eprintln!("wrote {}", path.display());
    }
    println!("ODS {}", rep.ods.f);
    println!("ODS_threshold {}", rep.ods.threshold);
    println!("OIS {}", rep.ois);
    println!("AP {}", rep.ap);
    Ok(())
}

pub fn pr_export(cfg: &RunConfig, pred_dir: &Path, gt_dir: &Path, out: &Path) -> Result<()> {
    let rep = run_eval(cfg, pred_dir, gt_dir)?;
    export_pr(&rep, out)?;
    println!("{}", out.display());
    Ok(())
}
