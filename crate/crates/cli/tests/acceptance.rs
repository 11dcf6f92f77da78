//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any failed.
//!
//! The learning and ablation runs train a reduced-width network (base 4) on
//! a 64x64 synthetic set so the whole suite fits on one desktop core.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mdae::data::synth::{gaussian_blur, synth_subject, SynthRecord};
use mdae::data::{load_volume, mvol, save_volume, Manifest, SliceSet, SynthParams, Volume};
use mdae::graph::{backward_through, Group, Mode, ModelSpec, ParamRegistry};
use mdae::metrics::{
    dice, edge_profile_stats, histogram_match, mean_sq_err, psnr, psnr_from_mse, ssim,
};
use mdae::model::{average, MergedAutoencoder};
use mdae::tensor::{gradcheck, mse, Dims, Tensor4};
use mdae::trainer::{compute_gradients, lr_at_epoch, slice_psnrs, Checkpoint, TrainConfig};
use mdae_cli::{
    cmd_synth, cmd_train, SynthArgs, TrainArgs, TrainSummary, CHECKPOINT_FILE, HISTORY_FILE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const BASE: usize = 4;
const EPOCHS: usize = 50;
const SEEDS: [u64; 3] = [0, 1, 2];

/// 28 subjects x 10 slices split 20/4/4: 200 train, 40 val, 40 test slices.
struct Task {
    dir: PathBuf,
    manifest: PathBuf,
    record: SynthRecord,
}

impl Task {
    fn new(root: &Path) -> Self {
        let dir = root.join("data");
        cmd_synth(&SynthArgs {
            out: dir.clone(),
            count: 28,
            size: 64,
            seed: 0,
            slices: 10,
            blur: 1.5,
            gamma: 0.7,
            noise: 0.02,
        })
        .expect("synthesize");
        let record = serde_json::from_slice(&fs::read(dir.join("synth.json")).unwrap()).unwrap();
        Self {
            manifest: dir.join("manifest.json"),
            dir,
            record,
        }
    }

    fn train(&self, out: &Path, seed: u64, merge: bool) -> (TrainSummary, f64) {
        let t = Instant::now();
        let s = cmd_train(&TrainArgs {
            manifest: Some(self.manifest.clone()),
            out: Some(out.to_path_buf()),
            epochs: Some(EPOCHS),
            seed: Some(seed),
            batch_size: Some(8),
            base: Some(BASE),
            split: Some([20, 4, 4]),
            split_seed: Some(0),
            no_merge: !merge,
            ..TrainArgs::default()
        })
        .expect("training run");
        let secs = t.elapsed().as_secs_f64();
        println!(
            "    run seed {seed} merge {merge}: best val {:.3} dB at epoch {:?}, {:.1} min",
            s.best_val_psnr,
            s.best_epoch,
            secs / 60.0
        );
        (s, secs)
    }

    fn slices(&self, ids: &[String], multiple: usize) -> SliceSet {
        let m = Manifest::load(&self.manifest).unwrap();
        SliceSet::from_subjects(&m.load_subjects(ids).unwrap(), None, multiple).unwrap()
    }
}

fn final_val(out: &Path) -> f64 {
    let csv = fs::read_to_string(out.join(HISTORY_FILE)).unwrap();
    let last = csv.lines().last().unwrap();
    last.rsplit(',').next().unwrap().parse().unwrap()
}

fn p1() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_adj: f64 = 0.0;
    let mut failures = Vec::new();
    let mut count = 0;
    for seed in 0..3 {
        for r in gradcheck::suite(seed).map_err(|e| e.to_string())? {
            count += 1;
            worst = worst.max(r.max_rel_err());
            if !(r.passed() && r.tolerance <= 1e-4) {
                failures.push(format!("{} {}", r.op, r.dims));
            }
        }
        for r in gradcheck::adjoint_suite(seed).map_err(|e| e.to_string())? {
            count += 1;
            worst_adj = worst_adj.max(r.rel_err());
            if !r.passed() {
                failures.push(format!("{} adjoint", r.op));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        failures.is_empty() && secs < 60.0 && gradcheck::FD_STEP == 1e-5 && gradcheck::LINEAR_TOL <= 1e-10,
        format!(
            "{count} checks, max FD rel err {worst:.2e} (< 1e-4), max adjoint rel err {worst_adj:.2e} (< 1e-10), {secs:.1} s; failed {failures:?}"
        ),
    )
}

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        encoder_channels: vec![2, 4, 8],
        bottleneck_channels: 16,
        decoder_channels: vec![16, 8, 4],
        decoders: 3,
        ..ModelSpec::default()
    }
}

fn grads_of(reg: &ParamRegistry<f32>, g: Group) -> Vec<Vec<f32>> {
    reg.iter()
        .filter(|(_, p)| p.group == g && p.trainable)
        .map(|(_, p)| p.grad.data().to_vec())
        .collect()
}

fn p2() -> Outcome {
    let t = Instant::now();
    let mut selected = Vec::new();
    for seed in 0..6u64 {
        let model = MergedAutoencoder::<f32>::new(tiny_spec(), seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = Tensor4::<f32>::random_uniform(Dims::new(4, 1, 8, 8), 0.0, 1.0, &mut rng);
        let y = Tensor4::<f32>::random_uniform(Dims::new(4, 1, 8, 8), 0.0, 1.0, &mut rng);

        let single = |k: usize| {
            let mut m = model.clone();
            let out = m.forward_all(&x, Mode::Train).unwrap();
            m.absorb_batch_stats(&out.cache);
            let losses: Vec<f64> = out.outputs.iter().map(|o| mse(o, &y).unwrap().0).collect();
            let g = mse(&out.outputs[k], &y).unwrap().1.backward(1.0).unwrap();
            let dc = out.cache.decoders.into_iter().nth(k).unwrap();
            let mut reg = m.registry().clone();
            reg.zero_grads();
            backward_through(
                &mut reg,
                m.encoder(),
                &m.decoders()[k],
                out.cache.encoder,
                dc,
                &g,
            )
            .unwrap();
            (losses, reg)
        };
        let (losses, _) = single(0);
        let k = (0..losses.len()).fold(0, |b, i| if losses[i] < losses[b] { i } else { b });

        let mut trained = model.clone();
        let step = compute_gradients(&mut trained, &x, &y).map_err(|e| e.to_string())?;
        if step.selected != k {
            return Err(format!(
                "seed {seed}: selected {} but argmin is {k}",
                step.selected
            ));
        }
        let (_, oracle) = single(k);
        if grads_of(trained.registry(), Group::Encoder) != grads_of(&oracle, Group::Encoder) {
            return Err(format!(
                "seed {seed}: encoder gradients differ from the single-path oracle"
            ));
        }
        for j in 0..3 {
            let (_, own) = single(j);
            let got = grads_of(trained.registry(), Group::Decoder(j));
            if got != grads_of(&own, Group::Decoder(j)) {
                return Err(format!(
                    "seed {seed}: decoder {j} gradients differ from its own-loss backward"
                ));
            }
            if got.iter().all(|g| g.iter().all(|&v| v == 0.0)) {
                return Err(format!("seed {seed}: decoder {j} received no gradient"));
            }
        }
        selected.push(k);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        secs < 10.0,
        format!("6 batches bit-identical, argmin decoders {selected:?}, {secs:.2} s"),
    )
}

struct Learned {
    test_psnr: f64,
    baseline: f64,
    secs: f64,
    model: MergedAutoencoder<f32>,
    test: SliceSet,
}

fn p3(task: &Task, root: &Path) -> (Outcome, Option<Learned>) {
    let out = root.join("merge_seed0");
    let (summary, secs) = task.train(&out, 0, true);
    let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    let test = task.slices(&summary.split.test, ck.model.spec().size_multiple());
    let train_n = task.slices(&summary.split.train, 8).len();
    let val_n = task.slices(&summary.split.val, 8).len();
    let ps = slice_psnrs(&ck.model, &test).unwrap();
    let test_psnr = ps.iter().sum::<f64>() / ps.len() as f64;
    let base: Vec<f64> = task
        .record
        .subjects
        .iter()
        .filter(|s| summary.split.test.contains(&s.id))
        .flat_map(|s| s.slice_psnr.iter().copied())
        .collect();
    let baseline = base.iter().sum::<f64>() / base.len() as f64;
    let outcome = ensure(
        test_psnr >= baseline + 2.0 && (train_n, val_n, test.len()) == (200, 40, 40),
        format!(
            "{train_n}/{val_n}/{} slices, test PSNR {test_psnr:.3} dB vs degraded input {baseline:.3} dB \
             (all subjects {:.3} dB), gain {:.3} dB (>= 2), {:.1} min (target < 20)",
            test.len(),
            task.record.mean_psnr,
            test_psnr - baseline,
            secs / 60.0
        ),
    );
    (
        outcome,
        Some(Learned {
            test_psnr,
            baseline,
            secs,
            model: ck.model,
            test,
        }),
    )
}

fn p4(l: &Learned) -> Outcome {
    let mut worst_gap = f64::INFINITY;
    for i in 0..l.test.len() {
        let b = l.test.batch(&[i]).unwrap();
        let outs = l.model.forward_all(&b.lf, Mode::Infer).unwrap().outputs;
        let truth = l.test.crop(&l.test.hf[i]);
        let per: Vec<f64> = outs
            .iter()
            .map(|o| mean_sq_err(&l.test.crop(o.sample(0)), &truth).unwrap())
            .collect();
        let avg = average(&outs);
        let avg_mse = mean_sq_err(&l.test.crop(avg.sample(0)), &truth).unwrap();
        let mean_mse = per.iter().sum::<f64>() / per.len() as f64;
        let avg_psnr = psnr_from_mse(avg_mse, 1.0);
        let min_psnr = per
            .iter()
            .map(|&m| psnr_from_mse(m, 1.0))
            .fold(f64::INFINITY, f64::min);
        if avg_mse > mean_mse + 1e-9 {
            return Err(format!(
                "slice {i}: MSE(avg) {avg_mse:e} > mean MSE {mean_mse:e}"
            ));
        }
        if avg_psnr < psnr_from_mse(mean_mse, 1.0) - 1e-9
            || psnr_from_mse(mean_mse, 1.0) < min_psnr - 1e-9
        {
            return Err(format!("slice {i}: PSNR ordering violated"));
        }
        worst_gap = worst_gap.min(mean_mse - avg_mse);
    }
    Ok(format!(
        "{} test slices, smallest margin mean MSE - MSE(avg) = {worst_gap:.3e}",
        l.test.len()
    ))
}

fn p5(task: &Task, root: &Path) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let with = root.join(format!("merge_seed{seed}"));
        if !with.join(HISTORY_FILE).exists() {
            task.train(&with, seed, true);
        }
        let without = root.join(format!("nomerge_seed{seed}"));
        task.train(&without, seed, false);
        let (a, b) = (final_val(&with), final_val(&without));
        if a - b > 0.3 {
            wins += 1;
        }
        rows.push(format!("seed {seed}: {a:.3} vs {b:.3} ({:+.3})", a - b));
    }
    ensure(
        wins * 2 > SEEDS.len(),
        format!(
            "final val PSNR with vs without merge: {}; {wins}/3 beat by > 0.3 dB",
            rows.join("; ")
        ),
    )
}

fn p6() -> Outcome {
    let cfg = TrainConfig::default();
    let want = [(0, 1e-3), (20, 9e-4), (45, 8.1e-4)];
    let got: Vec<f64> = want.iter().map(|&(e, _)| lr_at_epoch(&cfg, e)).collect();
    let ok = want
        .iter()
        .zip(&got)
        .all(|(&(_, w), &g)| ((g - w) / w).abs() <= 1e-12);
    ensure(ok, format!("lr at epochs 0/20/45 = {got:?}"))
}

fn p7(root: &Path) -> Outcome {
    let dir = root.join("p7");
    fs::create_dir_all(&dir).unwrap();
    let mut m = MergedAutoencoder::<f32>::new(ModelSpec::with_base(2), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor4::<f32>::random_uniform(Dims::new(2, 1, 16, 16), 0.0, 1.0, &mut rng);
    let out = m.forward_all(&x, Mode::Train).unwrap();
    m.absorb_batch_stats(&out.cache);
    let ck = Checkpoint {
        model: m,
        epoch: 3,
        val_psnr: 27.25,
    };
    let before = ck.model.predict_average(&x).unwrap();
    let p = dir.join("model.mdae");
    ck.save(&p).unwrap();
    let bytes = fs::read(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    let p2 = dir.join("again.mdae");
    back.save(&p2).unwrap();
    let ck_same = fs::read(&p2).unwrap() == bytes;
    let after = back.model.predict_average(&x).unwrap();
    let bits = |t: &Tensor4<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let infer_same = bits(&before) == bits(&after);

    let mut data: Vec<f32> = (0..3 * 16 * 16).map(|i| (i as f32 * 0.37).sin()).collect();
    data[5] = f32::from_bits(0x7fc0_1234);
    data[6] = f32::NEG_INFINITY;
    let v = Volume::from_vec([3, 16, 16], data).unwrap();
    let vp = dir.join("v.mvol");
    save_volume(&vp, &v).unwrap();
    let vbytes = fs::read(&vp).unwrap();
    let loaded = load_volume(&vp).unwrap();
    let mvol_same = mvol::encode_f32(&loaded).unwrap() == vbytes
        && loaded
            .data()
            .iter()
            .zip(v.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(
        ck_same && infer_same && mvol_same,
        format!(
            "checkpoint re-save identical {ck_same} ({} bytes), inference bit-identical {infer_same}, \
             MVOL identical incl. NaN payload {mvol_same} ({} bytes)",
            bytes.len(),
            vbytes.len()
        ),
    )
}

fn p8() -> Outcome {
    let a: Vec<f32> = (0..64 * 64)
        .map(|i| 0.2 + 0.5 * ((i % 64) as f32 / 63.0))
        .collect();
    let b: Vec<f32> = a.iter().map(|v| v + 0.1).collect();
    let p = psnr(&a, &b, 1.0).unwrap();
    let s = ssim(&a, &a, 64, 64, 1.0).unwrap();
    let one = dice(&[1, 2, 2, 0], &[1, 2, 2, 0], 2).unwrap();
    let zero = dice(&[2, 2, 0, 0], &[0, 0, 2, 2], 2).unwrap();
    let half = dice(&[3, 3, 3, 0], &[3, 0, 0, 0], 3).unwrap();

    let img: Vec<f32> = a.iter().map(|v| (v * v).min(1.0)).collect();
    let hm = histogram_match(&img, &img, 256);
    let hm_err = img
        .iter()
        .zip(&hm)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);

    let phantom = synth_subject(&SynthParams::default(), 0);
    let (h, w) = phantom.hf.slice_dims();
    let slice: Vec<f64> = phantom.hf.slice(5).iter().map(|&v| v as f64).collect();
    let mask: Vec<bool> = slice.iter().map(|&v| v > 0.0).collect();
    let stats: Vec<_> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&sigma| {
            let blurred: Vec<f32> = gaussian_blur(&slice, h, w, sigma)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            edge_profile_stats(&blurred, &mask, h, w).unwrap()
        })
        .collect();
    let mono = stats
        .windows(2)
        .all(|p| p[1].edge_width > p[0].edge_width && p[1].sharpness < p[0].sharpness);

    ensure(
        (p - 20.0).abs() < 1e-4 && s == 1.0 && one == 1.0 && zero == 0.0 && half == 0.5 && hm_err <= 1.0 / 256.0 && mono,
        format!(
            "PSNR {p:.4} dB, SSIM(a,a) {s}, dice {one}/{zero}/{half}, HM idempotence err {hm_err:.2e}, \
             edge width {:.3}/{:.3}/{:.3} sharpness {:.3}/{:.3}/{:.3} at sigma 0.5/1/2",
            stats[0].edge_width,
            stats[1].edge_width,
            stats[2].edge_width,
            stats[0].sharpness,
            stats[1].sharpness,
            stats[2].sharpness
        ),
    )
}

fn p9(task: &Task, root: &Path) -> Outcome {
    let run = |name: &str| {
        let out = root.join(name);
        cmd_train(&TrainArgs {
            manifest: Some(task.manifest.clone()),
            out: Some(out.clone()),
            epochs: Some(3),
            seed: Some(9),
            batch_size: Some(8),
            base: Some(BASE),
            split: Some([6, 2, 0]),
            split_seed: Some(4),
            ..TrainArgs::default()
        })
        .expect("training run");
        (
            fs::read(out.join(HISTORY_FILE)).unwrap(),
            fs::read(out.join(CHECKPOINT_FILE)).unwrap(),
        )
    };
    let (h1, c1) = run("det_a");
    let (h2, c2) = run("det_b");
    ensure(
        h1 == h2 && c1 == c2,
        format!(
            "history.csv identical {} ({} bytes), checkpoint identical {} ({} bytes)",
            h1 == h2,
            h1.len(),
            c1 == c2,
            c1.len()
        ),
    )
}

fn report(name: &str, what: &str, o: &Outcome) -> bool {
    let (tag, detail) = match o {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{name} {tag} {what}: {detail}");
    o.is_ok()
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let task = Task::new(root);
    println!("acceptance data in {}", task.dir.display());
    let mut ok = true;

    ok &= report("P1", "gradient correctness", &p1());
    ok &= report("P2", "selective routing oracle", &p2());
    println!("    training {EPOCHS}-epoch runs at base width {BASE}");
    let (o3, learned) = p3(&task, root);
    ok &= report("P3", "desk-scale learning", &o3);
    let o4 = match &learned {
        Some(l) => p4(l),
        None => Err("no trained model".into()),
    };
    ok &= report("P4", "averaging inequality", &o4);
    ok &= report("P5", "merge ablation direction", &p5(&task, root));
    ok &= report("P6", "schedule exactness", &p6());
    ok &= report("P7", "serialization", &p7(root));
    ok &= report("P8", "metric known values", &p8());
    ok &= report("P9", "determinism", &p9(&task, root));
    if let Some(l) = learned {
        println!(
            "    P3 summary: test {:.3} dB, baseline {:.3} dB, run {:.1} min",
            l.test_psnr,
            l.baseline,
            l.secs / 60.0
        );
    }
    if !ok {
        std::process::exit(1);
    }
}
