//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, for example
//! `cargo test -p stylehead --test acceptance -- 1 2 7`.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stylehead::animation::{generate_batch, AnimationConfig, AudioEncoder, Decoder};
use stylehead::annotation::{
    annotate_corpus, build_caption, quantize_au_level, read_au_tables, render_sentence, write_records, AuClause,
    AuLevel, AuLookup, DropConfig, EmotionFile,
};
use stylehead::discriminators::{
    bce_with_logits, ConvSpec, SyncConfig, SyncDiscriminator, TemporalConfig, TemporalDiscriminator,
};
use stylehead::losses::{
    loss_cos, loss_rec, loss_tem_d, loss_tem_g, ssim, total_loss, LossTerms, LossWeights, DEFAULT_MU,
};
use stylehead::metrics::{
    cpbd, evaluate, landmark_matrix, lmd, mouth_correlation, project_landmarks, ssim_image, EvalReport, GrayImage,
    ALL_LANDMARKS, MOUTH_LANDMARKS, NUM_LANDMARKS,
};
use stylehead::nn::{gradcheck, GradCheck, ParamSet};
use stylehead::synthdata::{make_dataset, measure_au, write_corpus, Corpus, Split, WorldConfig};
use stylehead::tape::{Mat, Tape};
use stylehead::textstyle::{blend, blend_var, Adapter, BackboneConfig, StyleTower, TextBackbone, Tokenizer};
use stylehead::trainer::{
    pretrain_modules, run_training, select_style_source, train_step, Ablations, Checkpoint, InferenceModel,
    Pretrained, RunOptions, Schedule, StyleSource, TrainConfig, TrainState,
};
use stylehead::videostyle::{VideoStyleConfig, VideoStyleEncoder};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn artifacts() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("artifact directory");
    dir
}

// ---------------------------------------------------------------- 1

fn blend_correctness() -> Outcome {
    let (e_s, e_t) = ([1.0, 0.0, -2.0], [0.0, 1.0, 4.0]);
    check(blend(&e_s, &e_t, 0.0).map_err(|e| e.to_string())? == e_t.to_vec(), "beta = 0 must return e_t")?;
    check(blend(&e_s, &e_t, 1.0).map_err(|e| e.to_string())? == e_s.to_vec(), "beta = 1 must return e_s")?;
    let mid = blend(&[1.0, 0.0], &[0.0, 1.0], 0.6).map_err(|e| e.to_string())?;
    check(mid == vec![0.6, 0.4], format!("beta = 0.6 gave {mid:?}"))?;

    let mut tape = Tape::new();
    let s = tape.constant(Mat::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap());
    let t = tape.constant(Mat::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap());
    let out = blend_var(&mut tape, s, t, 0.6);
    let row = tape.value(out).row(0).to_vec();
    check(row == vec![0.6, 0.4], format!("tape blend gave {row:?}"))?;
    Ok("beta 0, 1, 0.6 exact (value and tape paths)".into())
}

// ---------------------------------------------------------------- 2

fn loss_arithmetic() -> Outcome {
    let v = [0.3, -1.2, 2.0];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let same = loss_cos(&v, &v).map_err(|e| e.to_string())?;
    let anti = loss_cos(&v, &neg).map_err(|e| e.to_string())?;
    let orth = loss_cos(&[1.0, 0.0], &[0.0, 3.0]).map_err(|e| e.to_string())?;
    check(same == 0.0 && anti == 2.0 && orth == 1.0, format!("cos cases gave {same}, {anti}, {orth}"))?;
    let d = loss_tem_d(&[1.0], &[-1.0]);
    check(d == 0.0, format!("hinge d-loss at r=1, f=-1 gave {d}"))?;
    check(loss_tem_d(&[0.0], &[0.0]) == 2.0, "hinge d-loss at r=0, f=0 must be 2")?;
    check(loss_tem_g(&[0.5, 1.5]) == -1.0, "generator hinge must be -mean(fake)")?;
    let t = total_loss(LossTerms { rec: 1.0, cos: 0.0, sync: 0.0, tem: 0.0 }, LossWeights::default())
        .map_err(|e| e.to_string())?;
    check(t.total == 88.0, format!("weighted sum gave {}", t.total))?;
    Ok("cos 0/2/1, hinge 0, 88 * 1 = 88".into())
}

// ---------------------------------------------------------------- 3

fn worst(name: &str, checks: Vec<GradCheck>, acc: &mut Vec<(String, f64)>) {
    let w = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    match acc.iter_mut().find(|(n, _)| n == name) {
        Some((_, e)) => *e = e.max(w),
        None => acc.push((name.to_string(), w)),
    }
}

fn jitter(params: &mut ParamSet, rng: &mut ChaCha8Rng, amount: f64) {
    for v in params.values_mut() {
        v.mapv_inplace(|x| x + rng.random_range(-amount..amount));
    }
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn squared_error(t: &mut Tape, out: stylehead::tape::Var, target: &Mat) -> stylehead::tape::Var {
    let y = t.constant(target.clone());
    let d = t.sub(out, y);
    let sq = t.mul(d, d);
    t.sum_all(sq)
}

fn gradient_verification() -> Outcome {
    let mut acc = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);

        let mut adapter = Adapter::new(8, &mut rng);
        jitter(&mut adapter.params, &mut rng, 0.3);
        let e_t = uniform(3, 8, &mut rng);
        let target = uniform(3, 8, &mut rng);
        worst(
            "adapter",
            gradcheck(&adapter.params, |t, p| {
                let x = t.constant(e_t.clone());
                let e_s = adapter.forward(t, p, x);
                let s = blend_var(t, e_s, x, 0.6);
                squared_error(t, s, &target)
            }),
            &mut acc,
        );

        let video = VideoStyleEncoder::new(VideoStyleConfig { expr_dim: 3, hidden: 4, style_dim: 2 }, &mut rng);
        let x = uniform(16, 3, &mut rng);
        let target = uniform(2, 2, &mut rng);
        worst(
            "video style encoder",
            gradcheck(&video.params, |t, p| {
                let xv = t.constant(x.clone());
                let out = video.forward(t, p, xv, 2, 8).unwrap();
                squared_error(t, out, &target)
            }),
            &mut acc,
        );

        let cfg = AnimationConfig {
            audio_dim: 2,
            expr_dim: 3,
            style_dim: 2,
            window: 1,
            encoder_hidden: 4,
            feature_dim: 3,
            decoder_hidden: 4,
        };
        let enc = AudioEncoder::new(cfg, &mut rng);
        let mut dec = Decoder::new(cfg, &mut rng);
        jitter(&mut dec.params, &mut rng, 0.3);
        let audio = uniform(8, 2, &mut rng);
        let styles = uniform(2, 2, &mut rng);
        let target = uniform(8, 3, &mut rng);
        let anim_loss = |t: &mut Tape, pe: &stylehead::nn::Bound, pd: &stylehead::nn::Bound| {
            let a = t.constant(audio.clone());
            let s = t.constant(styles.clone());
            let out = generate_batch(t, &enc, pe, &dec, pd, a, s, 2, 4);
            squared_error(t, out, &target)
        };
        worst(
            "audio encoder",
            gradcheck(&enc.params, |t, pe| {
                let pd = dec.params.bind(t, false);
                anim_loss(t, pe, &pd)
            }),
            &mut acc,
        );
        worst(
            "decoder incl. modulation",
            gradcheck(&dec.params, |t, pd| {
                let pe = enc.params.bind(t, false);
                anim_loss(t, &pe, pd)
            }),
            &mut acc,
        );

        let tcfg = TemporalConfig {
            expr_dim: 3,
            length: 12,
            layers: vec![
                ConvSpec { kernel: 4, stride: 2, out_channels: 4 },
                ConvSpec { kernel: 3, stride: 1, out_channels: 1 },
            ],
        };
        let d_tem = TemporalDiscriminator::new(tcfg, &mut rng).unwrap();
        let x = uniform(24, 3, &mut rng);
        let w = uniform(6, 1, &mut rng);
        worst(
            "temporal discriminator",
            gradcheck(&d_tem.params, |t, p| {
                let xv = t.constant(x.clone());
                let s = d_tem.forward(t, p, xv, 2).unwrap();
                let wv = t.constant(w.clone());
                let m = t.mul(s, wv);
                let m = t.tanh(m);
                t.sum_all(m)
            }),
            &mut acc,
        );

        let scfg = SyncConfig { window: 3, expr_dim: 4, mouth_start: 0, mouth_len: 2, audio_dim: 2, hidden: 4, embed: 3 };
        let d_sync = SyncDiscriminator::new(scfg, &mut rng);
        let e = uniform(8, 4, &mut rng);
        let a = uniform(8, 2, &mut rng);
        let labels = Mat::from_shape_fn((6, 1), |(i, _)| (i % 2) as f64);
        worst(
            "sync discriminator",
            gradcheck(&d_sync.params, |t, p| {
                let ev = t.constant(e.clone());
                let av = t.constant(a.clone());
                let (ew, aw) = d_sync.gather_windows(t, ev, av, &[0, 1, 2, 3, 4, 5], &[0, 4, 2, 0, 4, 1]);
                let z = d_sync.logits(t, p, ew, aw);
                let y = t.constant(labels.clone());
                bce_with_logits(t, z, y)
            }),
            &mut acc,
        );

        let tok = Tokenizer::build(["a man is happy .", "a woman speaks with lips parted ."], 32);
        let backbone = TextBackbone::new(tok, BackboneConfig { embed_dim: 6, hidden: 5, style_dim: 4 }, &mut rng);
        let tokens = backbone.tokenize_all(&["a man is happy.", "a woman qq speaks."]).unwrap();
        let target = uniform(2, 4, &mut rng);
        worst(
            "text backbone",
            gradcheck(&backbone.params, |t, p| {
                let out = backbone.forward(t, p, &tokens);
                squared_error(t, out, &target)
            }),
            &mut acc,
        );

        let tower = StyleTower::new(5, 4, &mut rng);
        let feats = uniform(3, 5, &mut rng);
        let target = uniform(3, 4, &mut rng);
        worst(
            "style tower",
            gradcheck(&tower.params, |t, p| {
                let x = t.constant(feats.clone());
                let out = tower.forward(t, p, x);
                squared_error(t, out, &target)
            }),
            &mut acc,
        );
    }
    let summary = acc.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    let failed: Vec<_> = acc.iter().filter(|(_, e)| !(*e < 1e-4)).collect();
    check(failed.is_empty(), format!("relative error >= 1e-4: {failed:?}"))?;
    Ok(format!("5 points each, worst rel. error: {summary}"))
}

// ---------------------------------------------------------------- 4

fn tiny_config(ablations: Ablations) -> TrainConfig {
    let mut c = TrainConfig {
        seed: 5,
        schedule: Schedule { stage1_iterations: 3, stage2_iterations: 3, p_start: 0.0, p_end: 0.5 },
        batch: 4,
        validation_clips: 8,
        ablations,
        ..TrainConfig::default()
    };
    c.temporal = TemporalConfig {
        expr_dim: 16,
        length: 32,
        layers: vec![
            ConvSpec { kernel: 4, stride: 2, out_channels: 8 },
            ConvSpec { kernel: 3, stride: 1, out_channels: 1 },
        ],
    };
    c.text_pretrain.iterations = 4;
    c.sync_pretrain.epochs = 1;
    c
}

fn freezing_contracts() -> Outcome {
    let corpus = make_dataset(&WorldConfig::default(), 160, 32, 11).map_err(|e| e.to_string())?;
    let variants = [
        Ablations::default(),
        Ablations { sim_anno: true, ..Ablations::default() },
        Ablations { no_adapter: true, ..Ablations::default() },
        Ablations { no_vg: true, ..Ablations::default() },
        Ablations { no_clip: true, ..Ablations::default() },
    ];
    let mut steps = 0;
    for ablations in variants {
        let config = tiny_config(ablations);
        let pre = pretrain_modules(&corpus, &config).map_err(|e| e.to_string())?;
        let mut state = TrainState::new(&config, pre.backbone, pre.d_sync).map_err(|e| e.to_string())?;
        let backbone = state.models.backbone.params.clone();
        let d_sync = state.models.d_sync.params.clone();
        for _ in 0..config.schedule.total() {
            train_step(&mut state, &corpus, &config).map_err(|e| e.to_string())?;
            steps += 1;
            check(state.models.backbone.params == backbone, format!("backbone changed under {}", ablations.label()))?;
            check(state.models.d_sync.params == d_sync, format!("sync discriminator changed under {}", ablations.label()))?;
        }
    }
    Ok(format!("backbone and sync discriminator bit-identical after each of {steps} steps (5 variants)"))
}

// ---------------------------------------------------------------- 5

fn schedule() -> Outcome {
    let s = Schedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for it in 0..s.stage1_iterations {
        for _ in 0..5 {
            check(select_style_source(it, &s, &mut rng) == StyleSource::Video, format!("text chosen at stage-1 step {it}"))?;
        }
    }
    let last = s.total() - 1;
    check(s.p(last) == 0.5, format!("p at the last iteration is {}", s.p(last)))?;
    let text = (0..10_000).filter(|_| select_style_source(last, &s, &mut rng) == StyleSource::Text).count();
    let frac = text as f64 / 10_000.0;
    check((frac - 0.5).abs() <= 0.015, format!("text fraction {frac}"))?;
    Ok(format!("stage 1 always video; text fraction at p = 0.5: {frac:.4}"))
}

// ---------------------------------------------------------------- 6

fn annotation_pipeline() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = make_dataset(&WorldConfig::default(), 120, 64, 21).map_err(|e| e.to_string())?;
    write_corpus(dir.path(), &corpus, 21).map_err(|e| e.to_string())?;
    let tables = read_au_tables(&dir.path().join("au_tables.csv")).map_err(|e| e.to_string())?;
    let emotions = EmotionFile::load(&dir.path().join("emotions.json")).map_err(|e| e.to_string())?;
    let drop = DropConfig { emotion: 0.25, au: 0.25 };
    let run = |seed: u64, name: &str| -> Result<Vec<u8>, String> {
        let records = annotate_corpus(&tables, &emotions.table, &emotions.clips, &corpus.lookup, seed, drop)
            .map_err(|e| e.to_string())?;
        let path = dir.path().join(name);
        write_records(&path, &records).map_err(|e| e.to_string())?;
        std::fs::read(&path).map_err(|e| e.to_string())
    };
    let a = run(9, "a.jsonl")?;
    let b = run(9, "b.jsonl")?;
    check(a == b, "annotation output differs between runs with the same seed")?;
    check(a != run(10, "c.jsonl")?, "annotation output ignores the seed")?;

    let lookup = AuLookup::default();
    for entry in &lookup.entries {
        let mut prev = AuLevel::None.rank();
        for i in 0..=5000 {
            let r = quantize_au_level(i as f64 * 1e-3, entry).map_err(|e| e.to_string())?.rank();
            check(r >= prev, format!("{} quantization not monotone at {}", entry.au_id, i as f64 * 1e-3))?;
            prev = r;
        }
        check(prev == AuLevel::High.rank(), "top intensity must quantize to the highest level")?;
    }

    let labels = vec!["happy".to_string(), "cheerful".to_string()];
    let levels = vec![("AU12".to_string(), AuLevel::Mid), ("AU25".to_string(), AuLevel::Low)];
    let mut worst_dev: f64 = 0.0;
    for cfg in [DropConfig { emotion: 0.25, au: 0.25 }, DropConfig { emotion: 0.1, au: 0.4 }] {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (mut no_emotion, mut no_au) = (0usize, 0usize);
        let n = 10_000;
        for _ in 0..n {
            let c = build_caption("A woman", &labels, &levels, &lookup, &mut rng, cfg).map_err(|e| e.to_string())?;
            check(c.emotion_label.is_some() || !c.au_clauses.is_empty(), "both clauses dropped")?;
            no_emotion += c.emotion_label.is_none() as usize;
            no_au += c.au_clauses.is_empty() as usize;
        }
        let fe = no_emotion as f64 / n as f64;
        let fa = no_au as f64 / n as f64;
        worst_dev = worst_dev.max((fe - cfg.emotion).abs()).max((fa - cfg.au).abs());
        check((fe - cfg.emotion).abs() <= 0.02, format!("emotion drop rate {fe} for target {}", cfg.emotion))?;
        check((fa - cfg.au).abs() <= 0.02, format!("AU drop rate {fa} for target {}", cfg.au))?;
    }
    Ok(format!("byte-deterministic, monotone quantization, worst drop-rate deviation {worst_dev:.4}"))
}

// ---------------------------------------------------------------- 7

fn ssim_oracle(a: &Mat, b: &Mat, range: f64) -> f64 {
    let (h, w) = a.dim();
    let (wh, ww) = (7.min(h), 7.min(w));
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..=h - wh {
        for j in 0..=w - ww {
            let (mut ma, mut mb) = (0.0, 0.0);
            for di in 0..wh {
                for dj in 0..ww {
                    ma += a[[i + di, j + dj]];
                    mb += b[[i + di, j + dj]];
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for di in 0..wh {
                for dj in 0..ww {
                    let x = a[[i + di, j + dj]] - ma;
                    let y = b[[i + di, j + dj]] - mb;
                    va += x * x;
                    vb += y * y;
                    cov += x * y;
                }
            }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    total / count
}

fn lmd_oracle(pred: &Mat, gt: &Mat, subset: &[usize]) -> f64 {
    let m = landmark_matrix(pred.ncols());
    let base = project_landmarks(&vec![0.0; pred.ncols()]);
    let point = |row: ndarray::ArrayView1<f64>, k: usize, axis: usize| {
        let mut v = base[[k, axis]];
        for c in 0..row.len() {
            v += m[[2 * k + axis, c]] * row[c];
        }
        v
    };
    let mut total = 0.0;
    for t in 0..pred.nrows() {
        for &k in subset {
            let dx = point(pred.row(t), k, 0) - point(gt.row(t), k, 0);
            let dy = point(pred.row(t), k, 1) - point(gt.row(t), k, 1);
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    total / (pred.nrows() * subset.len()) as f64
}

fn edge_grid() -> Mat {
    Mat::from_shape_fn((128, 128), |(_, j)| if (j / 16) % 2 == 0 { 0.2 } else { 0.8 })
}

fn gaussian_blur(img: &Mat, sigma: f64) -> Mat {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let (h, w) = img.dim();
    let mut tmp = Mat::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (d, wt) in (-r..=r).zip(&k) {
                s += wt * img[[i, (j as isize + d).clamp(0, w as isize - 1) as usize]];
            }
            tmp[[i, j]] = s / norm;
        }
    }
    let mut out = Mat::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (d, wt) in (-r..=r).zip(&k) {
                s += wt * tmp[[(i as isize + d).clamp(0, h as isize - 1) as usize, j]];
            }
            out[[i, j]] = s / norm;
        }
    }
    out
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut worst: f64 = 0.0;
    for &(h, w) in &[(9, 11), (7, 7), (12, 5), (4, 3)] {
        for _ in 0..4 {
            let a = uniform(h, w, &mut rng);
            let b = a.mapv(|x| x * 0.7 + 0.1) + uniform(h, w, &mut rng) * 0.3;
            let hi = a.iter().chain(b.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = a.iter().chain(b.iter()).cloned().fold(f64::INFINITY, f64::min);
            let range = hi - lo;
            let got = ssim(&a, &b, range).map_err(|e| e.to_string())?;
            worst = worst.max((got - ssim_oracle(&a, &b, range)).abs());

            let mut l1 = 0.0;
            for i in 0..h {
                for j in 0..w {
                    l1 += (a[[i, j]] - b[[i, j]]).abs();
                }
            }
            l1 /= (h * w) as f64;
            let want = DEFAULT_MU * l1 + (1.0 - DEFAULT_MU) * (1.0 - ssim_oracle(&a, &b, range));
            worst = worst.max((loss_rec(&a, &b, DEFAULT_MU).map_err(|e| e.to_string())? - want).abs());

            let ia = a.mapv(|x| (x + 1.0) / 2.0);
            let ib = b.mapv(|x| ((x + 1.0) / 2.0).clamp(0.0, 1.0));
            let img = ssim_image(&GrayImage::new(ia.clone()).unwrap(), &GrayImage::new(ib.clone()).unwrap())
                .map_err(|e| e.to_string())?;
            worst = worst.max((img - ssim_oracle(&ia, &ib, 1.0)).abs());
        }
    }
    for _ in 0..5 {
        let p = uniform(6, 16, &mut rng);
        let g = uniform(6, 16, &mut rng);
        for subset in [&ALL_LANDMARKS[..], &MOUTH_LANDMARKS[..]] {
            let got = lmd(&p, &g, subset).map_err(|e| e.to_string())?;
            worst = worst.max((got - lmd_oracle(&p, &g, subset)).abs());
        }
    }
    check(ALL_LANDMARKS.len() == NUM_LANDMARKS, "landmark subset size")?;
    check(worst <= 1e-9, format!("max deviation from oracle {worst:e}"))?;

    let sharp = cpbd(&GrayImage::new(edge_grid()).unwrap()).map_err(|e| e.to_string())?.value;
    let mut values = vec![sharp];
    for sigma in [1.0, 2.0, 4.0] {
        let v = cpbd(&GrayImage::new(gaussian_blur(&edge_grid(), sigma)).unwrap()).map_err(|e| e.to_string())?.value;
        check(sharp > v, format!("CPBD sharp {sharp} not above blur sigma {sigma}: {v}"))?;
        values.push(v);
    }
    let vals = values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" > ");
    Ok(format!("SSIM/loss_rec/LMD max deviation {worst:.1e}; CPBD {vals}"))
}

// ---------------------------------------------------------------- 8 - 10

const DESK_CLIPS: usize = 2000;
const DESK_SEED: u64 = 7;
const STEERING_AU: &str = "AU12";

struct Trained {
    model: InferenceModel,
    report: EvalReport,
    cos: (Option<f64>, Option<f64>),
    train_seconds: f64,
}

fn desk_config(ablations: Ablations) -> TrainConfig {
    TrainConfig { seed: DESK_SEED, ablations, ..TrainConfig::default() }
}

fn train_variant(corpus: &Corpus, pre: &Pretrained, ablations: Ablations) -> Result<Trained, String> {
    let config = desk_config(ablations);
    let (state, report) = run_training(corpus, &config, pre.backbone.clone(), pre.d_sync.clone(), RunOptions::default())
        .map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::capture(&state, &config);
    let label = ablations.label();
    let dir = artifacts();
    ckpt.save(&dir.join(format!("checkpoint_{label}.json"))).map_err(|e| e.to_string())?;
    let model = InferenceModel::from_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let eval = evaluate(&model, &pre.d_sync, corpus, Split::Test, usize::MAX, &label).map_err(|e| e.to_string())?;
    std::fs::write(dir.join(format!("report_{label}.json")), serde_json::to_string_pretty(&eval).unwrap())
        .map_err(|e| e.to_string())?;
    Ok(Trained {
        model,
        report: eval,
        cos: (report.initial_validation_cos, report.final_validation_cos),
        train_seconds: report.seconds,
    })
}

struct Desk {
    corpus: Corpus,
    pre: Pretrained,
    pretrain_seconds: f64,
    full: Result<Trained, String>,
}

fn desk_setup() -> Result<Desk, String> {
    let started = Instant::now();
    let corpus = make_dataset(&WorldConfig::default(), DESK_CLIPS, 64, DESK_SEED).map_err(|e| e.to_string())?;
    let pre = pretrain_modules(&corpus, &desk_config(Ablations::default())).map_err(|e| e.to_string())?;
    let pretrain_seconds = started.elapsed().as_secs_f64();
    let full = train_variant(&corpus, &pre, Ablations::default());
    Ok(Desk { corpus, pre, pretrain_seconds, full })
}

fn desk_end_to_end(desk: &Result<Desk, String>) -> Outcome {
    let desk = desk.as_ref().map_err(|e| e.clone())?;
    let full = desk.full.as_ref().map_err(|e| e.clone())?;
    let corpus = &desk.corpus;
    let mut failures = Vec::new();
    let mut notes = Vec::new();

    let minutes = (desk.pretrain_seconds + full.train_seconds) / 60.0;
    notes.push(format!("{minutes:.1} min"));
    if minutes >= 30.0 {
        failures.push(format!("took {minutes:.1} min"));
    }

    match full.cos {
        (Some(a), Some(b)) => {
            notes.push(format!("(a) L_cos {a:.3} -> {b:.3}"));
            if !(b <= 0.5 * a) {
                failures.push("(a) L_cos reduced by less than half".into());
            }
        }
        _ => failures.push("(a) no validation cosine recorded".into()),
    }

    let fidelity = full.report.text_fidelity_within_one;
    notes.push(format!("(b) fidelity {fidelity:.3}"));
    if !(fidelity >= 0.8) {
        failures.push("(b) fidelity below 0.8".into());
    }

    let test = corpus.split(Split::Test);
    let (mut aligned, mut shuffled) = (0.0, 0.0);
    for (i, s) in test.iter().enumerate() {
        let other = test[(i + test.len() / 2) % test.len()];
        let p = full.model.generate(&s.sentence, &s.audio).map_err(|e| e.to_string())?;
        aligned += mouth_correlation(&p, &s.expression, &corpus.world);
        let q = full.model.generate(&s.sentence, &other.audio).map_err(|e| e.to_string())?;
        shuffled += mouth_correlation(&q, &s.expression, &corpus.world);
    }
    aligned /= test.len() as f64;
    shuffled /= test.len() as f64;
    notes.push(format!("(c) mouth corr {aligned:.3}, shuffled {shuffled:.3}"));
    if !(aligned >= 0.8 && aligned - shuffled >= 0.3) {
        failures.push("(c) mouth correlation criterion".into());
    }

    let k = corpus.lookup.au_ids().iter().position(|a| a == STEERING_AU).ok_or("steering AU missing")?;
    let entry = corpus.lookup.get(STEERING_AU).ok_or("steering AU missing")?;
    let mut readouts = Vec::new();
    for level in [AuLevel::Low, AuLevel::Mid, AuLevel::High] {
        let clause = AuClause { au: STEERING_AU.into(), level, phrase: entry.phrase(level).ok_or("no phrase")? };
        let caption = render_sentence("A man", None, &[clause]);
        let mut sum = 0.0;
        for s in test.iter().take(20) {
            let p = full.model.generate(&caption, &s.audio).map_err(|e| e.to_string())?;
            sum += measure_au(&corpus.world, &p)[k];
        }
        readouts.push(sum / 20.0);
    }
    notes.push(format!(
        "(d) {STEERING_AU} readouts {:.2} < {:.2} < {:.2}",
        readouts[0], readouts[1], readouts[2]
    ));
    if !(readouts[0] < readouts[1] && readouts[1] < readouts[2]) {
        failures.push("(d) steering not strictly increasing".into());
    }

    let summary = notes.join("; ");
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}: {summary}", failures.join(", ")))
    }
}

fn ablation_direction(desk: &Result<Desk, String>) -> Outcome {
    let desk = desk.as_ref().map_err(|e| e.clone())?;
    let full = desk.full.as_ref().map_err(|e| e.clone())?;
    let base = full.report.text_fidelity_within_one;
    let mut rows = vec![format!("full {base:.4}")];
    let mut worse = Vec::new();
    for ablations in [
        Ablations { sim_anno: true, ..Ablations::default() },
        Ablations { no_adapter: true, ..Ablations::default() },
        Ablations { no_vg: true, ..Ablations::default() },
    ] {
        let t = train_variant(&desk.corpus, &desk.pre, ablations)?;
        let f = t.report.text_fidelity_within_one;
        rows.push(format!("{} {f:.4}", ablations.label()));
        if !(base >= f) {
            worse.push(ablations.label());
        }
    }
    let summary = format!("{} (reports in {})", rows.join(", "), artifacts().display());
    if worse.is_empty() {
        Ok(summary)
    } else {
        Err(format!("full below {}: {summary}", worse.join(", ")))
    }
}

fn unseen_words(desk: &Result<Desk, String>) -> Outcome {
    let desk = desk.as_ref().map_err(|e| e.clone())?;
    let full = desk.full.as_ref().map_err(|e| e.clone())?;
    let started = Instant::now();
    let audio = &desk.corpus.split(Split::Test)[0].audio;
    let out = full
        .model
        .generate("A quixotic zephyr snarfles über-jauntily, lips parted", audio)
        .map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    check(out.dim() == (audio.nrows(), 16), format!("output shape {:?}", out.dim()))?;
    check(out.iter().all(|x| x.is_finite()), "non-finite output")?;
    check(secs < 10.0, format!("took {secs:.2} s"))?;
    Ok(format!("{} finite frames in {secs:.3} s", out.nrows()))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: usize, title: &str, run: &dyn Fn() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {title} [{secs:.1} s]: {detail}"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL  {title} [{secs:.1} s]: {detail}");
                failed.push(n);
            }
        }
    };
    report(1, "blend correctness", &blend_correctness);
    report(2, "loss arithmetic", &loss_arithmetic);
    report(3, "gradient verification", &gradient_verification);
    report(4, "freezing contracts", &freezing_contracts);
    report(5, "style-source schedule", &schedule);
    report(6, "annotation pipeline", &annotation_pipeline);
    report(7, "metric oracles", &metric_oracles);

    if [8, 9, 10].iter().any(|&n| wanted(n)) {
        let started = Instant::now();
        let desk = desk_setup();
        println!("desk-scale setup (corpus, pretraining, full training, evaluation): {:.1} s", started.elapsed().as_secs_f64());
        report(8, "desk-scale end-to-end", &|| desk_end_to_end(&desk));
        report(9, "ablation direction", &|| ablation_direction(&desk));
        report(10, "out-of-domain text", &|| unseen_words(&desk));
    }

    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
