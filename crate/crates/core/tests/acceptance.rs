//! Acceptance suite. Prints one `PASS`/`FAIL`/`SKIP` line per criterion and
//! exits non-zero if any criterion that ran failed.
//!
//! By default only the fast criteria run (1, 6, 7). Training experiments
//! (2, 3, 4 at desk scale, and 5) run with `--include-ignored`; the
//! full-scale card experiment additionally needs `--full-scale`:
//!
//! ```text
//! cargo test --release -p dklvae-core --test acceptance -- --include-ignored
//! cargo test --release -p dklvae-core --test acceptance -- --include-ignored --full-scale
//! ```

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dklvae_core::cards::{affine_transform, render_suit_glyph, Suit};
use dklvae_core::checkpoint::{load_checkpoint, optimizer_blob, params_blob, save_checkpoint};
use dklvae_core::config::DatasetConfig;
use dklvae_core::metrics::percentile;
use dklvae_core::run::{evaluation_reports, prepare_data, train_experiment, PreparedData};
use dklvae_core::sequences::{
    generate_synthetic_sequences, one_hot_decode, one_hot_encode, Alphabet,
};
use dklvae_core::store::StoredDataset;
use dklvae_core::trainer::{dkl_phase, generate_for_target, DklVaeModel, GenerateConfig};
use dklvae_core::{ExperimentConfig, Matrix, Rng, VaeArchitecture};

struct Line {
    id: String,
    pass: Option<bool>,
    detail: String,
}

impl Line {
    fn new(id: &str, pass: bool, detail: String) -> Self {
        Line {
            id: id.into(),
            pass: Some(pass),
            detail,
        }
    }

    fn skip(id: &str, detail: &str) -> Self {
        Line {
            id: id.into(),
            pass: None,
            detail: detail.into(),
        }
    }

    fn print(&self) {
        let tag = match self.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        println!("criterion {:<22} {tag}  {}", self.id, self.detail);
    }
}

fn recipes_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes")
}

fn recipe(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&recipes_dir().join(format!("{name}.toml"))).expect("recipe loads")
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let dense = common::gp_dense_oracle(200, 11);
    let fd = [
        common::mlp_backward_fd(3),
        common::elbo_fd(0),
        common::elbo_fd(1),
        common::gp_grad_fd(20, 5),
        common::dkl_fd(0),
        common::dkl_fd(1),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let kl = common::kl_monte_carlo(1_000_000, 8)
        .into_iter()
        .map(|(a, e)| (a - e).abs())
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = dense <= 1e-8 && fd <= 1e-4 && kl <= 1e-2 && secs < 60.0;
    Line::new(
        "1 numerical oracles",
        pass,
        format!("dense rel {dense:.1e} (<=1e-8), fd rel {fd:.1e} (<=1e-4), kl abs {kl:.1e} (<=1e-2), {secs:.1}s"),
    )
}

struct CardRun {
    label: &'static str,
    cfg: ExperimentConfig,
    data: PreparedData,
    model: DklVaeModel,
    elapsed: Duration,
    rmse: f64,
    r2: f64,
    ssim: Vec<f64>,
    prediction: Vec<f64>,
    groups: Vec<String>,
}

fn train_recipe(cfg: &ExperimentConfig) -> (PreparedData, DklVaeModel, Duration) {
    let start = Instant::now();
    let data = prepare_data(cfg, None).expect("dataset");
    let dir = tempfile::tempdir().unwrap();
    let outcome = train_experiment(cfg, &data, dir.path(), false).expect("training");
    (data, outcome.model, start.elapsed())
}

fn card_run(label: &'static str, recipe_name: &str) -> CardRun {
    let cfg = recipe(recipe_name);
    let (data, model, elapsed) = train_recipe(&cfg);
    let (_, ev) = evaluation_reports(&model, &data.train, &data.test).expect("evaluation");
    CardRun {
        label,
        cfg,
        groups: data.test.groups.clone(),
        data,
        model,
        elapsed,
        rmse: ev.rmse,
        r2: ev.r2,
        ssim: ev.per_sample_quality,
        prediction: ev.prediction,
    }
}

fn criterion_2(run: &CardRun, rmse_max: f64, r2_min: f64, limit: Option<Duration>) -> Line {
    let time_ok = limit.is_none_or(|l| run.elapsed <= l);
    let mut by_suit = BTreeMap::<&str, (f64, usize)>::new();
    for ((g, p), t) in run.groups.iter().zip(&run.prediction).zip(&run.data.test.targets) {
        let e = by_suit.entry(g).or_default();
        e.0 += (p - t).powi(2);
        e.1 += 1;
    }
    let suits: Vec<String> = by_suit
        .iter()
        .map(|(g, (s, n))| format!("{g} {:.2}", (s / *n as f64).sqrt()))
        .collect();
    Line::new(
        &format!("2 card split ({})", run.label),
        run.rmse <= rmse_max && run.r2 >= r2_min && time_ok,
        format!(
            "test rmse {:.3} (<={rmse_max}), r2 {:.3} (>={r2_min}), {:.0}s{}; per suit rmse: {}",
            run.rmse,
            run.r2,
            run.elapsed.as_secs_f64(),
            limit.map(|l| format!(" (<={}s)", l.as_secs())).unwrap_or_default(),
            suits.join(", ")
        ),
    )
}

fn criterion_3(run: &CardRun) -> Line {
    let mean = run.ssim.iter().sum::<f64>() / run.ssim.len() as f64;
    let p10 = percentile(&run.ssim, 0.1).unwrap();
    let mut by_suit = BTreeMap::<&str, (f64, usize)>::new();
    for (g, s) in run.groups.iter().zip(&run.ssim) {
        let e = by_suit.entry(g).or_default();
        e.0 += s;
        e.1 += 1;
    }
    let mut order: Vec<(&str, f64)> = by_suit.iter().map(|(g, (s, n))| (*g, s / *n as f64)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    let ordering: Vec<String> = order.iter().map(|(g, s)| format!("{g} {s:.3}")).collect();
    Line::new(
        &format!("3 reconstruction ({})", run.label),
        mean >= 0.65 && p10 >= 0.5,
        format!(
            "mean ssim {mean:.3} (>=0.65), p10 {p10:.3} (>=0.5); worst to best: {}",
            ordering.join(", ")
        ),
    )
}

fn criterion_4(run: &CardRun) -> Line {
    let [lo, hi] = run.cfg.split.test_range.expect("card split has a test band");
    let inside = run
        .prediction
        .iter()
        .filter(|&&p| p >= lo - 2.0 && p <= hi + 2.0)
        .count();
    let frac = inside as f64 / run.prediction.len() as f64;
    Line::new(
        &format!("4 interpolation ({})", run.label),
        frac >= 0.9,
        format!("{:.1}% of test predictions in [{}, {}] (>=90%)", 100.0 * frac, lo - 2.0, hi + 2.0),
    )
}

/// Not a gated criterion: reports how close generated cards come to a target,
/// both in latent space and after decoding and re-encoding the image.
fn generation_note(run: &CardRun) {
    let predictor = run.model.predictor(&run.data.train).unwrap();
    let target = 7.5;
    let cands = generate_for_target(
        &run.model,
        &predictor,
        target,
        1,
        &GenerateConfig::default(),
        &mut Rng::new(0),
    )
    .unwrap();
    let image = Matrix::from_vec(1, cands[0].probs.len(), cands[0].probs.clone()).unwrap();
    let z = run.model.embed(&image).unwrap();
    let again = predictor.predict_latent(&z).unwrap().mean[0];
    println!(
        "note generation ({}): target {target}, top candidate predicted {:.3}, re-encoded image predicted {again:.3}",
        run.label, cands[0].predicted
    );
}

fn criterion_5() -> Line {
    let cfg = recipe("sequences-synthetic");
    let (data, model, elapsed) = train_recipe(&cfg);
    let (reports, ev) = evaluation_reports(&model, &data.train, &data.test).expect("evaluation");
    let below3 = reports
        .iter()
        .find(|r| r.metric == "below_3_row_errors")
        .map(|r| r.overall)
        .unwrap();
    let DatasetConfig::SequencesSynthetic { target_range, .. } = cfg.dataset else {
        unreachable!()
    };
    let rmse_max = 0.1 * (target_range[1] - target_range[0]);
    let pass = ev.quality >= 0.5 && ev.rmse <= rmse_max && below3 >= 0.85 && elapsed.as_secs() <= 3600;
    Line::new(
        "5 sequences",
        pass,
        format!(
            "exact match {:.3} (>=0.5), rmse {:.2} (<={rmse_max}), <3 row errors {:.3} (>=0.85), r2 {:.3}, {:.0}s (<=3600s)",
            ev.quality,
            ev.rmse,
            below3,
            ev.r2,
            elapsed.as_secs_f64()
        ),
    )
}

fn small_card_config() -> ExperimentConfig {
    let mut cfg = recipe("cards-split-small");
    cfg.dataset = DatasetConfig::Cards {
        count: 48,
        seed: 3,
        angle: [-30.0, 30.0],
        shear: [-10.0, 10.0],
        translation: [-0.1, 0.1],
    };
    cfg.train.epochs = 4;
    cfg.train.eval_every = 2;
    cfg.output.checkpoint_every_eval = true;
    cfg
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timing.csv" {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_6() -> Line {
    let cfg = small_card_config();
    let data = prepare_data(&cfg, None).unwrap();
    let arch = cfg.model.architecture(data.train.x.cols());

    // dkl_scale = 0, fresh optimizer: phase 2 must not move the encoder.
    let mut zero = cfg.train.clone();
    zero.dkl_scale = 0.0;
    let mut model = DklVaeModel::new(&arch, &zero, &data.train.targets).unwrap();
    let before = params_blob(&model.vae);
    dkl_phase(&mut model, &data.train, &zero, &mut Rng::new(1)).unwrap();
    let encoder_frozen = params_blob(&model.vae) == before;

    // Phase 2 at full scale must leave the decoder and the VAE optimizer alone.
    let mut model = DklVaeModel::new(&arch, &cfg.train, &data.train.targets).unwrap();
    let dec = model.vae.decoder.params().to_vec();
    let vae_opt = model.vae_opt.clone();
    let enc = model.vae.encoder_trunk.params().to_vec();
    dkl_phase(&mut model, &data.train, &cfg.train, &mut Rng::new(1)).unwrap();
    let decoder_untouched = model.vae.decoder.params() == dec.as_slice()
        && model.vae_opt == vae_opt
        && model.vae.encoder_trunk.params() != enc.as_slice();

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_experiment(&cfg, &prepare_data(&cfg, None).unwrap(), a.path(), false).unwrap();
    train_experiment(&cfg, &prepare_data(&cfg, None).unwrap(), b.path(), false).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    let identical = ta == tb && ta.contains_key("history.csv") && ta.keys().any(|k| k.ends_with("params.bin"));
    Line::new(
        "6 trainer invariants",
        encoder_frozen && decoder_untouched && identical,
        format!(
            "zero-scale encoder frozen {encoder_frozen}, decoder untouched by phase 2 {decoder_untouched}, \
             rerun byte-identical ({} files) {identical}",
            ta.len()
        ),
    )
}

fn criterion_7() -> Line {
    let identity = Suit::ALL.iter().all(|&s| {
        let g = render_suit_glyph(s);
        affine_transform(&g, 0.0, 0.0, 0.0, 0.0) == g
    });

    let alphabet = Alphabet::synthetic(27).unwrap();
    let symbols: Vec<String> = alphabet
        .tokens()
        .iter()
        .filter(|t| *t != alphabet.padding_token())
        .cloned()
        .collect();
    let mut rng = Rng::new(21);
    let mut round_trips = 0;
    for _ in 0..10_000 {
        let len = rng.below(22) as usize;
        let tokens: Vec<String> = (0..len)
            .map(|_| symbols[rng.below(symbols.len() as u64) as usize].clone())
            .collect();
        let m = one_hot_encode(&tokens, &alphabet, 21).unwrap();
        let dec = one_hot_decode(&m, &alphabet).unwrap();
        if dec.tokens == tokens && dec.onehot == m {
            round_trips += 1;
        }
    }

    let cfg = small_card_config();
    let data = prepare_data(&cfg, None).unwrap();
    let arch: VaeArchitecture = cfg.model.architecture(data.train.x.cols());
    let dir = tempfile::tempdir().unwrap();
    let out = train_experiment(&cfg, &data, dir.path(), false).unwrap();
    let ck = dir.path().join("again");
    save_checkpoint(&ck, &out.model, &arch, 1, "h", "cfg").unwrap();
    let (_, back) = load_checkpoint(&ck).unwrap();
    let checkpoint_exact = params_blob(&back.vae) == params_blob(&out.model.vae)
        && optimizer_blob(&back) == optimizer_blob(&out.model)
        && back.gp_raw.lengthscale.to_bits() == out.model.gp_raw.lengthscale.to_bits()
        && back.gp_raw.output_scale.to_bits() == out.model.gp_raw.output_scale.to_bits()
        && back.gp_raw.noise.to_bits() == out.model.gp_raw.noise.to_bits()
        && back.epoch == out.model.epoch;

    let mut datasets_exact = true;
    for dc in [
        cfg.dataset.clone(),
        DatasetConfig::SequencesSynthetic {
            count: 300,
            seed: 5,
            length: 21,
            alphabet_size: 27,
            target_range: [-500.0, -200.0],
        },
    ] {
        let d = StoredDataset::from_config(&dc).unwrap();
        let p = tempfile::tempdir().unwrap();
        d.save(p.path()).unwrap();
        datasets_exact &= StoredDataset::load(p.path()).unwrap() == d;
    }

    let corpus = generate_synthetic_sequences(2000, &alphabet, 21, [-500.0, -200.0], &Rng::new(9)).unwrap();
    let raw: Vec<i64> = corpus.samples.iter().map(|s| common::reference_raw_target(&s.tokens)).collect();
    let (lo, hi) = (*raw.iter().min().unwrap() as f64, *raw.iter().max().unwrap() as f64);
    let targets_exact = corpus
        .samples
        .iter()
        .zip(&raw)
        .all(|(s, &r)| s.target == -500.0 + (r as f64 - lo) * 300.0 / (hi - lo));

    Line::new(
        "7 formats and datasets",
        identity && round_trips == 10_000 && checkpoint_exact && datasets_exact && targets_exact,
        format!(
            "identity transform exact {identity}, one-hot round trips {round_trips}/10000, \
             checkpoint exact {checkpoint_exact}, dataset files exact {datasets_exact}, \
             synthetic targets recompute {targets_exact}"
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let heavy = args.iter().any(|a| a == "--include-ignored" || a == "--ignored");
    let full_scale = args.iter().any(|a| a == "--full-scale");

    let mut lines = Vec::new();
    let mut report = |l: Line| {
        l.print();
        lines.push(l);
    };
    report(criterion_1());
    if heavy {
        let small = card_run("desk scale", "cards-split-small");
        report(criterion_2(&small, 2.5, 0.85, Some(Duration::from_secs(15 * 60))));
        report(criterion_3(&small));
        report(criterion_4(&small));
        generation_note(&small);
        if full_scale {
            let full = card_run("full scale", "cards-split");
            report(criterion_2(&full, 1.5, 0.90, None));
            report(criterion_3(&full));
            report(criterion_4(&full));
            generation_note(&full);
        } else {
            report(Line::skip("2 card split (full scale)", "needs --full-scale"));
        }
        report(criterion_5());
    } else {
        for id in ["2 card split", "3 reconstruction", "4 interpolation", "5 sequences"] {
            report(Line::skip(id, "training run; pass --include-ignored"));
        }
    }
    report(criterion_6());
    report(criterion_7());

    let failed = lines.iter().filter(|l| l.pass == Some(false)).count();
    let passed = lines.iter().filter(|l| l.pass == Some(true)).count();
    let skipped = lines.iter().filter(|l| l.pass.is_none()).count();
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if failed > 0 {
        std::process::exit(1);
    }
}
