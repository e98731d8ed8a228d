//! Acceptance suite: one PASS/FAIL line per criterion, each checked against
//! its tolerance and wall-clock budget. Pass criterion numbers as arguments
//! to run a subset (`cargo test --test acceptance -- 3 8`).

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use cochstream_cli::commands::eval::{run_probe, ProbeCmdConfig};
use cochstream_cli::commands::invert::{run_rollout, RolloutConfig};
use cochstream_cli::commands::lm::{run_train as run_lm, LmTrainCmdConfig};
use cochstream_cli::commands::synth::{run as synth, SynthCorpusConfig};
use cochstream_cli::commands::wavcoch::{run_ablate, run_train as run_wavcoch, AblateVocabConfig, TrainWavCochConfig};
use cochstream_cli::commands::{load_labeled, tokenize_wav};
use cochstream_core::audio::{Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use cochstream_core::auristream::train::{LmTrainConfig, LmTrainer, TokenCorpus};
use cochstream_core::auristream::{AuriStream, LmConfig};
use cochstream_core::cochlea::{
    self, read_pgm, CochleaGraph, COCHLEAR_CHANNELS, FRAMES_PER_CLIP, HOP_SAMPLES, WINDOW_SAMPLES,
};
use cochstream_core::corpus::Clip;
use cochstream_core::evalsuite::{
    accuracy, average_ranks, pearson, phoneme_purity, spearman, train_linear_probe, weighted_accuracy, LabelKind,
    ProbeConfig, Split,
};
use cochstream_core::inversion::{invert_cochleagram, InversionConfig};
use cochstream_core::synth::{chirp, tone};
use cochstream_core::wavcoch::train::{evaluate, train_wavcoch, PreparedCorpus, WavCochTrainConfig};
use cochstream_core::wavcoch::{
    bits_to_id, codebook_stats, entropy_penalty, id_to_bits, write_ctok, CochlearTokenSeq, Quantizer, WavCoch,
    WavCochConfig,
};
use cochstream_numerics::gradcheck::{compare_gradients, grad_check, grad_check_sampled};
use cochstream_numerics::{Array, NumericsError, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIN: u64 = 60;

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---------------------------------------------------------------- 1 -------

fn shape_contract() -> Result<String> {
    let model = WavCoch::<f32>::init(WavCochConfig::tiny())?;
    let mut worst = 0.0f64;
    for w in [chirp(80.0, 7000.0, 0.5, CLIP_SAMPLES), tone(1234.0, 0.2, CLIP_SAMPLES)] {
        let t = Instant::now();
        let seq = model.tokenize(&w)?;
        ensure!(seq.len() == FRAMES_PER_CLIP, "{} tokens", seq.len());
        ensure!(seq.ids.iter().all(|&id| id < 1 << model.config.bit_width), "token outside 2^B");
        let c = model.detokenize(&seq)?;
        ensure!((c.rows, c.cols) == (COCHLEAR_CHANNELS, FRAMES_PER_CLIP), "detokenized {}x{}", c.rows, c.cols);
        worst = worst.max(t.elapsed().as_secs_f64());
    }
    ensure!(worst < 5.0, "tokenize + detokenize took {worst:.2} s");
    Ok(format!("988 tokens < 2^13, 211x988 output, slowest clip {worst:.2} s"))
}

// ---------------------------------------------------------------- 2 -------

fn lfq_bijection() -> Result<String> {
    for b in [12u32, 13, 14] {
        for id in 0..1u32 << b {
            let bits = id_to_bits(id, b)?;
            ensure!(bits.len() == b as usize && bits_to_id(&bits)? == id, "B={b}: id {id} does not round-trip");
        }
    }
    Ok("4096 + 8192 + 16384 codes round-trip".into())
}

// ---------------------------------------------------------------- 3 -------

fn cochleagram_causality(rng: &mut ChaCha8Rng) -> Result<usize> {
    let n = 4000;
    let base: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let reference = cochlea::cochleagram_any(&Waveform::new(base.clone(), SAMPLE_RATE)?)?;
    let mut violations = 0;
    for _ in 0..100 {
        let s = rng.random_range(0..n);
        let mut x = base.clone();
        x[s] += 0.25;
        let c = cochlea::cochleagram_any(&Waveform::new(x, SAMPLE_RATE)?)?;
        for t in 0..c.cols {
            let covers = s >= t * HOP_SAMPLES && s < t * HOP_SAMPLES + WINDOW_SAMPLES;
            if !covers && (0..c.rows).any(|r| c.get(r, t) != reference.get(r, t)) {
                violations += 1;
            }
        }
    }
    Ok(violations)
}

fn changed_frames(a: &[f32], b: &[f32], width: usize) -> Vec<usize> {
    a.chunks(width).zip(b.chunks(width)).enumerate().filter(|(_, (x, y))| x != y).map(|(t, _)| t).collect()
}

fn wavcoch_causality(rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    let m = WavCoch::<f32>::init(WavCochConfig::tiny())?;
    let (t, f, nb, rows) = (24, m.config.input.features(), m.config.bit_width as usize, m.config.output_rows());
    let run = |input: &Array<f32>, encoder: bool| -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let vars = m.params.on_tape_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let y = if encoder { m.encode_on(&mut tape, &vars, x)? } else { m.decode_on(&mut tape, &vars, x)? };
        Ok(tape.value(y).data().to_vec())
    };
    let frames = Array::new(&[1, t, f], (0..t * f).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
    let bits = Array::new(&[1, t, nb], (0..t * nb).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect())?;
    let (enc_ref, dec_ref) = (run(&frames, true)?, run(&bits, false)?);
    let (erf, drf) = (m.config.encoder_receptive_field(), m.config.decoder_receptive_field());
    let (mut enc_bad, mut dec_bad) = (0, 0);
    for _ in 0..100 {
        let s = rng.random_range(0..t);
        let mut x = frames.clone();
        x.data_mut()[s * f + rng.random_range(0..f)] += 1.0;
        enc_bad += changed_frames(&enc_ref, &run(&x, true)?, nb).iter().filter(|&&k| k < s || k > s + erf).count();
        let mut b = bits.clone();
        let k = s * nb + rng.random_range(0..nb);
        b.data_mut()[k] = -b.data()[k];
        dec_bad += changed_frames(&dec_ref, &run(&b, false)?, rows).iter().filter(|&&k| k < s || k > s + drf).count();
    }
    Ok((enc_bad, dec_bad))
}

fn lm_causality(rng: &mut ChaCha8Rng) -> Result<usize> {
    let model = AuriStream::<f32>::init(LmConfig::tiny())?;
    let (seq, v) = (64, model.config.vocab);
    let base: Vec<u32> = (0..seq).map(|_| rng.random_range(0..v as u32)).collect();
    let reference = model.forward_logits(&base)?;
    let mut violations = 0;
    for _ in 0..100 {
        let s = rng.random_range(0..seq);
        let mut x = base.clone();
        x[s] = (x[s] + rng.random_range(1..v as u32)) % v as u32;
        let logits = model.forward_logits(&x)?;
        violations += (0..s).filter(|&t| logits.data()[t * v..(t + 1) * v] != reference.data()[t * v..(t + 1) * v]).count();
    }
    Ok(violations)
}

fn causality() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = cochleagram_causality(&mut rng)?;
    let (e, d) = wavcoch_causality(&mut rng)?;
    let l = lm_causality(&mut rng)?;
    ensure!(c + e + d + l == 0, "violations: cochleagram {c}, encoder {e}, decoder {d}, LM {l}");
    Ok("0 violations in 4 x 100 probes".into())
}

// ---------------------------------------------------------------- 4 -------

fn to_numerics<E: std::fmt::Display>(e: E) -> NumericsError {
    NumericsError::Invalid(e.to_string())
}

fn gradient_fidelity() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let clock = Instant::now();

    let wc = WavCoch::<f32>::init(WavCochConfig::tiny())?.cast::<f64>();
    let (t, f, rows) = (6, wc.config.input.features(), wc.config.output_rows());
    let frames = Array::new(&[2, t, f], (0..2 * t * f).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let target = Array::new(&[2, t, rows], (0..2 * t * rows).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let wc_loss = |p: &[Array<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.iter().map(|a| tape.param(a.clone())).collect();
        let (x, y) = (tape.constant(frames.clone()), tape.constant(target.clone()));
        let l = wc.loss_on(&mut tape, &vars, x, y, Quantizer::Frozen).map_err(to_numerics)?;
        let mut g = tape.backward(l.loss)?;
        let grads = vars.iter().zip(p).map(|(v, a)| g.take(*v).unwrap_or_else(|| Array::zeros(a.shape()))).collect();
        Ok((tape.value(l.loss).item(), grads))
    };
    let wc_err = grad_check_sampled(wc_loss, &wc.params.tensors, 1e-5, 40)?;
    let wc_secs = clock.elapsed().as_secs_f64();

    let lm = AuriStream::<f32>::init(LmConfig::tiny())?.cast::<f64>();
    let (batch, seq) = (2, 8);
    let tokens: Vec<u32> = (0..batch * seq).map(|_| rng.random_range(0..lm.config.vocab as u32)).collect();
    let lm_loss = |p: &[Array<f64>], tape: &mut Tape<f64>| -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = p.iter().map(|a| tape.param(a.clone())).collect();
        let loss = lm.loss_on(tape, &vars, &tokens, batch, seq, None)?;
        Ok((vars, loss))
    };
    let mut tape = Tape::new();
    let (vars, loss) = lm_loss(&lm.params.tensors, &mut tape)?;
    let mut g = tape.backward(loss)?;
    let analytic: Vec<Array<f64>> =
        vars.iter().zip(&lm.params.tensors).map(|(v, a)| g.take(*v).unwrap_or_else(|| Array::zeros(a.shape()))).collect();
    let value = |p: &[Array<f64>]| {
        let mut tape = Tape::new();
        let (_, loss) = lm_loss(p, &mut tape).map_err(to_numerics)?;
        Ok(tape.value(loss).item())
    };
    let lm_err = compare_gradients(value, &analytic, &lm.params.tensors, 1e-3, 24)?;
    let lm_secs = clock.elapsed().as_secs_f64() - wc_secs;

    let graph = CochleaGraph::<f64>::new()?;
    let n = WINDOW_SAMPLES + 2 * HOP_SAMPLES;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let floor = cochlea::cochleagram_any(&Waveform::new(x.iter().map(|&v| v as f32).collect(), SAMPLE_RATE)?)?
        .values
        .iter()
        .fold(f32::INFINITY, |a, &b| a.min(b));
    ensure!(floor > 1e-3, "test point too close to the compression singularity ({floor})");
    let weights: Vec<f64> = (0..3 * COCHLEAR_CHANNELS).map(|i| ((i * 31 % 11) as f64 - 5.0) / 5.0).collect();
    let c_loss = |p: &[Array<f64>]| {
        let mut tape = Tape::new();
        let w = tape.param(p[0].clone());
        let c = graph.apply(&mut tape, w).map_err(to_numerics)?;
        let k = tape.constant(Array::new(&[3, COCHLEAR_CHANNELS], weights.clone())?);
        let prod = tape.mul(c, k)?;
        let loss = tape.sum(prod);
        let g = tape.backward(loss)?;
        Ok((tape.value(loss).item(), vec![g.get(w).unwrap().clone()]))
    };
    let c_err = grad_check(c_loss, &[Array::new(&[n], x)?], 1e-4)?;

    ensure!(
        wc_err < 1e-4 && lm_err < 1e-4 && c_err < 1e-3,
        "max relative errors: WavCoch {wc_err:.2e}, LM {lm_err:.2e}, cochleagram {c_err:.2e}"
    );
    let c_secs = clock.elapsed().as_secs_f64() - wc_secs - lm_secs;
    Ok(format!(
        "max relative error WavCoch {wc_err:.1e} ({wc_secs:.0} s), LM {lm_err:.1e} ({lm_secs:.0} s), cochleagram {c_err:.1e} ({c_secs:.0} s)"
    ))
}

// ---------------------------------------------------------------- 5 -------

fn entropy_fixed_points() -> Result<String> {
    let b = 13u32;
    let balanced = entropy_penalty(&Array::zeros(&[64, b as usize]))?;
    let mut rows = Vec::with_capacity((1 << b) * b as usize);
    for id in 0..1u32 << b {
        rows.extend(id_to_bits(id, b)?.iter().map(|&v| 40.0 * v as f64));
    }
    let saturated = entropy_penalty(&Array::new(&[1 << b, b as usize], rows)?)?;
    let want = -(b as f64) * std::f64::consts::LN_2;
    ensure!(balanced.abs() < 1e-6, "balanced logits give {balanced}");
    ensure!((saturated - want).abs() < 1e-6, "saturated uniform codes give {saturated}, expected {want}");
    Ok(format!("balanced {balanced:.1e}, saturated {saturated:.6} (expected {want:.6})"))
}

// ---------------------------------------------------------------- 6 -------

fn lm_calibration() -> Result<String> {
    let model = AuriStream::<f32>::init(LmConfig::tiny())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seqs: Vec<Vec<u32>> = (0..4).map(|_| (0..512).map(|_| rng.random_range(0..8192)).collect()).collect();
    let ce = model.lm_loss(&seqs)?;
    let uniform = 8192f64.ln();
    let rel = (ce - uniform).abs() / uniform;
    ensure!(rel < 0.02, "CE {ce:.4} is {:.2}% from ln 8192", 100.0 * rel);
    Ok(format!("CE {ce:.4} vs ln 8192 = {uniform:.4} ({:.2}%)", 100.0 * rel))
}

// ---------------------------------------------------------------- 7 -------

fn wavcoch_overfit() -> Result<String> {
    let clips: Vec<Clip> = (0..10)
        .map(|i| {
            let wave = if i % 2 == 0 {
                chirp(100.0 + 60.0 * i as f64, 1500.0 + 600.0 * i as f64, 0.3, CLIP_SAMPLES)
            } else {
                tone(200.0 * i as f64, 0.3, CLIP_SAMPLES)
            };
            Clip { id: format!("synthetic{i}"), source: format!("synthetic{i}.wav").into(), offset: 0, wave }
        })
        .collect();
    let cfg = WavCochTrainConfig { steps: 1000, batch_size: 4, log_every: 1000, ..WavCochTrainConfig::desk() };
    let data = PreparedCorpus::prepare(&clips, &cfg.model)?;
    let all: Vec<usize> = (0..clips.len()).collect();
    let (initial, _) = evaluate(&WavCoch::<f32>::init(cfg.model.clone())?, &data, &all)?;
    let out = train_wavcoch(&cfg, &data, None, None)?;
    let (fin, usage) = evaluate(&out.model, &data, &all)?;
    let ratio = fin / initial;
    ensure!(ratio <= 0.1, "MSE {initial:.4} -> {fin:.4} ({:.1}% of initial) after {} steps", 100.0 * ratio, cfg.steps);
    Ok(format!("MSE {initial:.4} -> {fin:.4} ({:.1}% of initial) in {} steps, {usage} codes", 100.0 * ratio, cfg.steps))
}

fn lm_overfit() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seq: Vec<u32> = (0..512).map(|_| rng.random_range(0..8192)).collect();
    let cfg = LmTrainConfig {
        model: LmConfig { dropout: 0.0, ..LmConfig::tiny() },
        steps: 2000,
        batch_size: 1,
        warmup_steps: 20,
        log_every: 2000,
        ..LmTrainConfig::desk()
    };
    let mut trainer = LmTrainer::new(cfg, TokenCorpus::pack(std::slice::from_ref(&seq), 512)?)?;
    while !trainer.is_done() {
        if trainer.step()? < 0.1 {
            break;
        }
    }
    let ce = trainer.model.lm_loss(&[seq])?;
    ensure!(ce < 0.1, "CE {ce:.4} after {} steps", trainer.completed());
    Ok(format!("CE {ce:.4} after {} steps", trainer.completed()))
}

// ---------------------------------------------------------------- 8 -------

fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let tied = x.iter().filter(|&&u| u == v).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect()
}

/// Tie-corrected rank formula (Sx + Sy - sum d^2) / (2 sqrt(Sx Sy)).
fn rank_formula(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let ties = |v: &[f64]| {
        let mut g: BTreeMap<u64, f64> = BTreeMap::new();
        v.iter().for_each(|a| *g.entry(a.to_bits()).or_default() += 1.0);
        g.values().map(|t| t * t * t - t).sum::<f64>()
    };
    let (sx, sy) = ((n * n * n - n - ties(x)) / 12.0, (n * n * n - n - ties(y)) / 12.0);
    let d2: f64 = brute_ranks(x).iter().zip(brute_ranks(y)).map(|(a, b)| (a - b) * (a - b)).sum();
    (sx + sy - d2) / (2.0 * (sx * sy).sqrt())
}

fn oracle_objective(p: &[f64], x: &[Vec<f64>], y: &[usize], k: usize, l2: f64) -> (f64, Vec<f64>) {
    let (dim, n) = (x[0].len(), x.len() as f64);
    let mut g = vec![0.0; p.len()];
    let mut loss = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let z: Vec<f64> = (0..k).map(|c| p[dim * k + c] + (0..dim).map(|i| row[i] * p[i * k + c]).sum::<f64>()).collect();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        loss += (lse - z[label]) / n;
        for c in 0..k {
            let d = ((z[c] - lse).exp() - f64::from(u8::from(c == label))) / n;
            (0..dim).for_each(|i| g[i * k + c] += row[i] * d);
            g[dim * k + c] += d;
        }
    }
    for i in 0..dim * k {
        loss += 0.5 * l2 * p[i] * p[i];
        g[i] += l2 * p[i];
    }
    (loss, g)
}

fn metric_oracles() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut vectors = 0;
    while vectors < 1000 {
        let n = rng.random_range(2..12);
        let levels = rng.random_range(2..8);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        ensure!(average_ranks(&x) == brute_ranks(&x), "ranks of {x:?}");
        if x.iter().all(|&a| a == x[0]) || y.iter().all(|&a| a == y[0]) {
            continue;
        }
        let (got, want) = (spearman(&x, &y)?, rank_formula(&x, &y));
        ensure!((got - want).abs() < 1e-12, "spearman {x:?} {y:?}: {got} vs {want}");
        vectors += 1;
    }

    let labels = ["a", "b", "c", "d"];
    for _ in 0..100 {
        let pairs: Vec<(u32, &str)> =
            (0..rng.random_range(1..200)).map(|_| (rng.random_range(0..16), labels[rng.random_range(0..4)])).collect();
        let report = phoneme_purity(pairs.iter().copied())?;
        let top: usize = pairs
            .iter()
            .map(|p| p.0)
            .collect::<HashSet<_>>()
            .iter()
            .map(|&t| labels.iter().map(|l| pairs.iter().filter(|p| p.0 == t && p.1 == *l).count()).max().unwrap())
            .sum();
        ensure!(report.mean == top as f64 / pairs.len() as f64, "purity {} vs {}", report.mean, top as f64 / pairs.len() as f64);
        let seq = CochlearTokenSeq::new((0..rng.random_range(0..300)).map(|_| rng.random_range(0..4096)).collect(), 12)?;
        let distinct = seq.ids.iter().collect::<HashSet<_>>().len();
        ensure!(codebook_stats([&seq], 12)?.usage() == distinct, "usage mismatch");
    }

    let (n, dim, k, l2) = (100, 3, 5, 1e-3);
    let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let x: Vec<Vec<f64>> = y.iter().map(|&c| centres[c].iter().map(|m| m + rng.random_range(-1.0..1.0)).collect()).collect();
    let mut p = vec![0.0; (dim + 1) * k];
    let mut best = f64::INFINITY;
    for _ in 0..100_000 {
        let (loss, g) = oracle_objective(&p, &x, &y, k, l2);
        best = best.min(loss);
        p.iter_mut().zip(&g).for_each(|(w, d)| *w -= 0.5 * d);
    }
    let model = train_linear_probe(&x.concat(), &y, k, &ProbeConfig { l2_strength: l2, ..Default::default() })?;
    let mut params = model.weights.clone();
    params.extend(&model.bias);
    let probe_ce = oracle_objective(&params, &x, &y, k, l2).0;
    ensure!((probe_ce - best).abs() < 1e-3, "probe objective {probe_ce} vs oracle {best}");

    for _ in 0..1000 {
        let m = rng.random_range(1..60);
        let kk = rng.random_range(1..9);
        let truth: Vec<usize> = (0..m).map(|_| rng.random_range(0..kk)).collect();
        let preds: Vec<usize> = (0..m).map(|_| rng.random_range(0..kk)).collect();
        let (w, a) = (weighted_accuracy(&preds, &truth)?, accuracy(&preds, &truth)?);
        ensure!((w - a).abs() < 1e-12, "weighted {w} vs plain {a}");
    }
    Ok(format!("spearman x1000, purity/usage x100, probe CE gap {:.1e}, accuracy x1000", (probe_ce - best).abs()))
}

// ---------------------------------------------------------------- 9 -------

fn inversion() -> Result<String> {
    let cases = [("1 kHz tone", tone(1000.0, 0.3, CLIP_SAMPLES)), ("chirp", chirp(200.0, 4000.0, 0.3, CLIP_SAMPLES))];
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    for (name, wave) in cases {
        let t = Instant::now();
        let target = cochlea::cochleagram(&wave)?;
        let inv = invert_cochleagram(&target, &InversionConfig::default())?;
        let recon = cochlea::cochleagram(&inv.waveform)?;
        let as64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let r = pearson(&as64(&target.values), &as64(&recon.values))?;
        let ratio = inv.final_loss() / inv.initial_loss();
        let took = t.elapsed();
        let note = format!("{name}: loss ratio {ratio:.3}, r {r:.3}, {:.0} s", took.as_secs_f64());
        if ratio > 0.1 || r <= 0.9 || took > secs(5 * MIN) {
            failures.push(note.clone());
        }
        notes.push(note);
    }
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------- 10 ------

struct Pipeline {
    _dir: tempfile::TempDir,
    wavcoch: PathBuf,
    lm: PathBuf,
    manifest: PathBuf,
    test_wav: PathBuf,
}

fn build_pipeline() -> Result<Pipeline> {
    let dir = tempfile::tempdir()?;
    let root = dir.path();
    let corpus = synth(&SynthCorpusConfig { out_dir: root.join("corpus"), ..Default::default() })?;
    let wc = run_wavcoch(&TrainWavCochConfig {
        corpus: corpus.manifest.clone(),
        out_dir: root.join("wavcoch"),
        steps: 1500,
        batch_size: 4,
        ..Default::default()
    })?;

    // The language model only ever sees train-split audio.
    let ds = load_labeled(&corpus.manifest, LabelKind::Phoneme)?;
    let model = WavCoch::<f32>::load(Path::new(&wc.checkpoint))?;
    let tokens = root.join("tokens");
    std::fs::create_dir_all(&tokens)?;
    for (i, u) in ds.split(Split::Train).enumerate() {
        write_ctok(&tokens.join(format!("train{i:03}.ctok")), &tokenize_wav(&model, &u.wav)?)?;
    }
    let lm = run_lm(&LmTrainCmdConfig {
        tokens,
        out_dir: root.join("lm"),
        steps: 300,
        batch_size: 4,
        ..Default::default()
    })?;
    let test_wav = ds.split(Split::Test).next().context("synthetic corpus has no test split")?.wav.clone();
    Ok(Pipeline {
        wavcoch: wc.checkpoint.into(),
        lm: lm.checkpoint.into(),
        manifest: corpus.manifest,
        test_wav,
        _dir: dir,
    })
}

fn end_to_end(pipeline: &mut Option<Pipeline>) -> Result<String> {
    let p = pipeline.insert(build_pipeline()?);
    let probe = run_probe(&ProbeCmdConfig {
        wavcoch: p.wavcoch.clone(),
        lm: p.lm.clone(),
        manifest: p.manifest.clone(),
        ..Default::default()
    })?;
    let margin = probe.test.plain - probe.majority_baseline;
    let note = format!(
        "test accuracy {:.1}% vs majority {:.1}% (+{:.1} pp; balanced {:.1}%), layer {} {:?}, {} test spans",
        100.0 * probe.test.plain,
        100.0 * probe.majority_baseline,
        100.0 * margin,
        100.0 * probe.test.balanced,
        probe.layer,
        probe.pooling,
        probe.n_test
    );
    ensure!(margin >= 0.20, "{note}");
    Ok(note)
}

// ---------------------------------------------------------------- 11 ------

fn ablation() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let corpus = synth(&SynthCorpusConfig { out_dir: dir.path().join("corpus"), ..Default::default() })?;
    let out = dir.path().join("ablation");
    let result = run_ablate(&AblateVocabConfig {
        manifest: corpus.manifest,
        out_dir: out.clone(),
        steps: 500,
        ..Default::default()
    })?;
    let bits: Vec<u32> = result.rows.iter().map(|r| r.bits).collect();
    ensure!(bits == [12, 13, 14], "rows for {bits:?}");
    ensure!(result.rows.iter().all(|r| r.l2.is_finite() && r.usage > 0 && r.purity > 0.0), "degenerate row");
    let table = std::fs::read_to_string(out.join("ablation.csv"))?;
    ensure!(table.lines().count() == 4 && table.starts_with("bits,vocab,L2,usage,purity"), "table:\n{table}");
    ensure!(result.identical_clip_order, "variants saw different clip orders");
    let rows: Vec<String> =
        result.rows.iter().map(|r| format!("{}b L2 {:.4} usage {} purity {:.3}", r.bits, r.l2, r.usage, r.purity)).collect();
    Ok(format!("{}; ordering {:?}", rows.join(", "), result.ordering))
}

// ---------------------------------------------------------------- 12 ------

fn rollout(p: &Pipeline) -> Result<String> {
    let dir = tempfile::tempdir()?;
    let out = dir.path().join("rollout");
    let seeds = vec![0, 1, 2];
    let r = run_rollout(&RolloutConfig {
        wavcoch: p.wavcoch.clone(),
        lm: p.lm.clone(),
        wav: p.test_wav.clone(),
        out_dir: out.clone(),
        seeds: seeds.clone(),
        invert_steps: 300,
        ..Default::default()
    })?;
    ensure!(r.prompt_tokens == 494 && r.total_tokens == FRAMES_PER_CLIP, "{} prompt of {} tokens", r.prompt_tokens, r.total_tokens);
    ensure!(r.prompt_identical, "prompt region differs between seeds");
    ensure!(r.rollouts.len() == seeds.len() && r.rollouts.iter().all(|x| x.wav.is_some()), "missing rollouts");
    let (w, h, px) = read_pgm(Path::new(&r.figure_pgm))?;
    let panels = 1 + seeds.len();
    ensure!(w == FRAMES_PER_CLIP && h == panels * COCHLEAR_CHANNELS + 4 * seeds.len(), "figure is {w}x{h}");
    for panel in 0..panels {
        let top = panel * (COCHLEAR_CHANNELS + 4);
        let marked = (top..top + COCHLEAR_CHANNELS).all(|row| px[row * w + r.prompt_tokens] == 255);
        ensure!(marked, "panel {panel} lacks the cut marker at column {}", r.prompt_tokens);
    }
    for name in ["ground_truth.pgm", "ground_truth_plain.pgm", "rollout.json"] {
        ensure!(out.join(name).is_file(), "missing {name}");
    }
    Ok(format!(
        "GT + {} seeds, {} distinct continuations, cut at frame {}",
        seeds.len(),
        r.distinct_continuations,
        r.prompt_tokens
    ))
}

// ---------------------------------------------------------------- main ----

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let _ = rayon::ThreadPoolBuilder::new().build_global();
    let mut pipeline: Option<Pipeline> = None;
    let mut failed = Vec::new();
    let mut check = |n: u32, name: &str, budget: Duration, f: &mut dyn FnMut() -> Result<String>| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let outcome = f().and_then(|note| {
            if t.elapsed() > budget {
                bail!("over budget: {note}");
            }
            Ok(note)
        });
        let took = t.elapsed().as_secs_f64();
        let budget = budget.as_secs_f64();
        match outcome {
            Ok(note) => println!("PASS {n:>2} {name} [{took:.1} s / {budget:.0} s] {note}"),
            Err(e) => {
                println!("FAIL {n:>2} {name} [{took:.1} s / {budget:.0} s] {e:#}");
                failed.push(n);
            }
        }
    };
    check(1, "shape/rate contract", secs(5), &mut shape_contract);
    check(2, "LFQ bijection", secs(1), &mut lfq_bijection);
    check(3, "causality suite", secs(2 * MIN), &mut causality);
    check(4, "gradient fidelity", secs(2 * MIN), &mut gradient_fidelity);
    check(5, "entropy penalty fixed points", secs(1), &mut entropy_fixed_points);
    check(6, "untrained LM calibration", secs(30), &mut lm_calibration);
    check(7, "overfit: tiny WavCoch", secs(10 * MIN), &mut wavcoch_overfit);
    check(7, "overfit: tiny LM", secs(5 * MIN), &mut lm_overfit);
    check(8, "metric oracles", secs(2 * MIN), &mut metric_oracles);
    check(9, "inversion", secs(10 * MIN), &mut inversion);
    check(10, "end-to-end probe", secs(30 * MIN), &mut || end_to_end(&mut pipeline));
    check(11, "vocabulary ablation", secs(45 * MIN), &mut ablation);
    if wanted(12) && pipeline.is_none() {
        match build_pipeline() {
            Ok(p) => pipeline = Some(p),
            Err(e) => println!("note: could not train rollout models: {e:#}"),
        }
    }
    check(12, "rollout figure", secs(5 * MIN), &mut || match &pipeline {
        Some(p) => rollout(p),
        None => bail!("no trained models"),
    });
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
