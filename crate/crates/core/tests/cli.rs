mod common;

use std::path::{Path, PathBuf};
use std::process::Command as Process;

use common::rng;
use diffem::channels::{ChannelKind, CorruptionChannel, MatrixDescriptor, Observation};
use diffem::cli::artifacts::{JsonLog, RunDir, RunLock};
use diffem::cli::config::{RunConfig, Scope};
use diffem::cli::format::{
    decode_observations, decode_samples, encode_observations, encode_samples, load_samples,
    Checkpoint,
};
use diffem::cli::{run, Cli, CliError, Command};
use diffem::em::e_step;
use diffem::numerics::Tensor;
use diffem::rng::normal_vec;
use proptest::prelude::*;

const TINY: &str = r#"
name = "tiny"
seed = 3

data.task = "manifold"
data.n = 96

channel.kind = "sphere"
channel.rows = 2
channel.dim = 5
channel.sigma_y = 0.01

schedule.sigma0 = 1e-3
schedule.sigma1 = 10.0

weighting.alpha = 3.5
weighting.beta = 1.5

model.hidden = [16]

[em]
iterations = 2
estep_batch = 32
init = { strategy = "gaussian-prior" }
sampler = { kind = "predictor-corrector", steps = 12 }
init_train = { epochs = 2, batch_size = 32, lr_initial = 1e-3, lr_final = 1e-4 }
train = { epochs = 1, batch_size = 32, lr_initial = 1e-3, lr_final = 1e-4 }

[prior]
epochs = 1
batch_size = 32
lr_initial = 1e-3
lr_final = 1e-4

[eval]
sinkhorn = { lambda = 1e-2, sample_size = 64 }

[theory]
models = 3
trials = 4
instances = 4
"#;

fn tiny_with(iterations: usize) -> String {
    TINY.replace("iterations = 2", &format!("iterations = {iterations}"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn cli(config: &Path, output: &Path, command: Command) -> Cli {
    Cli {
        config: Some(config.to_path_buf()),
        seed: None,
        output: Some(output.to_path_buf()),
        allow_fingerprint_mismatch: false,
        command,
    }
}

fn run_em(resume: bool) -> Command {
    Command::RunEm {
        resume,
        observations: None,
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn shipped_configs_parse() {
    for name in ["smoke.toml", "manifold-desk.toml"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        RunConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    RunConfig::parse(TINY).unwrap();
}

#[test]
fn unknown_and_invalid_keys_are_rejected() {
    let typo = TINY.replace("model.hidden", "model.hiden");
    assert!(matches!(RunConfig::parse(&typo), Err(CliError::Config(_))));
    let extra = format!("{TINY}\n[em.extra]\nfoo = 1\n");
    assert!(RunConfig::parse(&extra).is_err());
    let bad_sampler = TINY.replace("kind = \"predictor-corrector\"", "kind = \"heun\"");
    assert!(RunConfig::parse(&bad_sampler).is_err());
    let wrong_dim = TINY.replace("channel.dim = 5", "channel.dim = 4");
    assert!(matches!(RunConfig::parse(&wrong_dim), Err(CliError::Config(_))));
    let zero_n = TINY.replace("data.n = 96", "data.n = 0");
    assert!(RunConfig::parse(&zero_n).is_err());
}

#[test]
fn fingerprint_scopes() {
    let base = RunConfig::parse(TINY).unwrap();
    let more_iters = RunConfig::parse(&tiny_with(5)).unwrap();
    assert_eq!(base.fingerprint(Scope::Model), more_iters.fingerprint(Scope::Model));
    assert_ne!(base.fingerprint(Scope::Full), more_iters.fingerprint(Scope::Full));

    let other_eval = RunConfig::parse(&TINY.replace("lambda = 1e-2", "lambda = 1e-3")).unwrap();
    assert_eq!(base.fingerprint(Scope::Model), other_eval.fingerprint(Scope::Model));

    let wider = RunConfig::parse(&TINY.replace("model.hidden = [16]", "model.hidden = [24]")).unwrap();
    assert_eq!(base.fingerprint(Scope::Data), wider.fingerprint(Scope::Data));
    assert_ne!(base.fingerprint(Scope::Model), wider.fingerprint(Scope::Model));

    let reseeded = RunConfig::parse(&TINY.replace("seed = 3", "seed = 4")).unwrap();
    assert_ne!(base.fingerprint(Scope::Data), reseeded.fingerprint(Scope::Data));
}

fn arb_observation(dim: usize) -> impl Strategy<Value = Observation> {
    let y = proptest::collection::vec(-1e3f64..1e3, dim);
    let dense = (1usize..4, proptest::collection::vec(-5.0f64..5.0, 4 * dim)).prop_map(move |(r, v)| {
        MatrixDescriptor::Dense(Tensor::new(vec![r, dim], v[..r * dim].to_vec()).unwrap())
    });
    let mask = proptest::collection::vec(any::<bool>(), dim).prop_map(|b| MatrixDescriptor::Mask(b.into_iter().collect()));
    let blur = (0.1f64..3.0).prop_map(move |sigma| MatrixDescriptor::Blur { sigma, height: 1, width: dim });
    (y, prop_oneof![dense, mask, blur]).prop_map(|(y, a)| Observation { y, a })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sample_files_round_trip_at_f32(n in 1usize..20, d in 1usize..7, seed in any::<u64>(), fp in any::<[u8; 32]>()) {
        let data = normal_vec(&mut rng("fmt", seed), n * d).iter().map(|v| v * 100.0).collect();
        let x = Tensor::new(vec![n, d], data).unwrap();
        let (back, fp2) = decode_samples(&encode_samples(&x, &fp).unwrap()).unwrap();
        prop_assert_eq!(fp, fp2);
        prop_assert_eq!(back.shape(), x.shape());
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
        // a second trip is lossless
        let again = decode_samples(&encode_samples(&back, &fp).unwrap()).unwrap().0;
        prop_assert_eq!(again.data(), back.data());
    }

    #[test]
    fn observation_files_round_trip(obs in proptest::collection::vec(arb_observation(4), 1..12), fp in any::<[u8; 32]>()) {
        let bytes = encode_observations(&obs, &fp).unwrap();
        let (back, fp2) = decode_observations(&bytes).unwrap();
        prop_assert_eq!(fp, fp2);
        prop_assert_eq!(back.len(), obs.len());
        for (o, b) in obs.iter().zip(&back) {
            prop_assert_eq!(&o.a, &b.a);
            let y32: Vec<f64> = o.y.iter().map(|v| *v as f32 as f64).collect();
            prop_assert_eq!(&y32, &b.y);
        }
        // truncation anywhere is a format error, never a panic
        let cut = bytes.len() / 2;
        prop_assert!(matches!(decode_observations(&bytes[..cut]), Err(CliError::Format(_))));
    }
}

#[test]
fn malformed_files_are_rejected() {
    let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut bytes = encode_samples(&x, &[0; 32]).unwrap();
    assert!(decode_observations(&bytes).is_err(), "content tag is checked");
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_samples(&longer).is_err(), "trailing bytes are rejected");
    bytes[0] = b'X';
    assert!(matches!(decode_samples(&bytes), Err(CliError::Format(_))));
    assert!(Checkpoint::decode(b"DFCK").is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_e_step_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "tiny.toml", &tiny_with(1));
    let out = dir.path().join("run");
    run(cli(&cfg_path, &out, Command::GenerateData { n: None })).unwrap();
    run(cli(&cfg_path, &out, Command::Init { observations: None })).unwrap();

    let rd = RunDir::new(&out);
    let ck = Checkpoint::load(&rd.checkpoint(0)).unwrap();
    let bytes = ck.encode(false).unwrap();
    let again = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(again, ck);
    assert_eq!(again.encode(false).unwrap(), bytes);

    let cfg = RunConfig::parse(&tiny_with(1)).unwrap();
    let (obs, _) = diffem::cli::format::load_observations(&rd.observations()).unwrap();
    let a = e_step(&ck.model, &obs, &ck.schedule, &cfg.em.sampler, Some(&ck.init_mean), 32, 1, 1).unwrap();
    let b = e_step(&again.model, &obs, &again.schedule, &cfg.em.sampler, Some(&again.init_mean), 32, 1, 1).unwrap();
    assert_eq!(a.data(), b.data());

    // the EMA and optimizer blocks are optional
    let with_opt = ck.encode(true).unwrap();
    assert!(with_opt.len() >= bytes.len());
    assert_eq!(Checkpoint::decode(&with_opt).unwrap().model.params, ck.model.params);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let one = write_config(dir.path(), "one.toml", &tiny_with(1));
    let two = write_config(dir.path(), "two.toml", &tiny_with(2));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));

    run(cli(&two, &a, Command::GenerateData { n: None })).unwrap();
    run(cli(&two, &a, run_em(false))).unwrap();

    run(cli(&one, &b, Command::GenerateData { n: None })).unwrap();
    run(cli(&one, &b, run_em(false))).unwrap();
    assert!(matches!(run(cli(&two, &b, run_em(false))), Err(CliError::Usage(_))));
    let stale = read(RunDir::new(&b).prior());
    let summary = run(cli(&two, &b, run_em(true))).unwrap();
    assert_eq!(summary["k"], 2);

    let (ra, rb) = (RunDir::new(&a), RunDir::new(&b));
    for k in 0..=2 {
        assert_eq!(read(ra.checkpoint(k)), read(rb.checkpoint(k)), "checkpoint {k}");
        assert_eq!(read(ra.recon(k)), read(rb.recon(k)), "recon {k}");
    }
    assert_eq!(read(ra.metrics()), read(rb.metrics()));
    assert_eq!(read(ra.prior()), read(rb.prior()));
    assert_ne!(stale, read(rb.prior()), "the prior follows the final reconstructions");
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("r{i}"))).collect();
    for o in &outs {
        run(cli(&cfg, o, Command::GenerateData { n: None })).unwrap();
        run(cli(&cfg, o, run_em(false))).unwrap();
    }
    let (a, b) = (RunDir::new(&outs[0]), RunDir::new(&outs[1]));
    for p in [a.clean(), a.observations(), a.metrics(), a.prior(), a.checkpoint(2), a.recon(2)] {
        let rel = p.strip_prefix(&outs[0]).unwrap();
        assert_eq!(read(&p), read(b.root.join(rel)), "{}", rel.display());
    }
    let records = JsonLog::open(&a.metrics(), "diffem-metrics", &RunConfig::parse(TINY).unwrap().fingerprint(Scope::Model), None, false)
        .unwrap()
        .records()
        .unwrap();
    assert_eq!(records.len(), 3);
    for (k, r) in records.iter().enumerate() {
        assert_eq!(r["k"], k);
        assert!(r["sinkhorn"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn sample_eval_and_theory_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", &tiny_with(1));
    let out = dir.path().join("run");
    run(cli(&cfg, &out, Command::GenerateData { n: Some(80) })).unwrap();
    run(cli(&cfg, &out, run_em(false))).unwrap();
    let rd = RunDir::new(&out);

    // a conditional checkpoint needs observations
    let cond = Command::Sample { checkpoint: rd.checkpoint(1), observations: None, n: None };
    assert!(matches!(run(cli(&cfg, &out, cond)), Err(CliError::Usage(_))));
    let cond = Command::Sample { checkpoint: rd.checkpoint(1), observations: Some(rd.observations()), n: Some(40) };
    let s = run(cli(&cfg, &out, cond)).unwrap();
    assert_eq!(s["n"], 40);
    assert_eq!(load_samples(&rd.samples()).unwrap().0.shape(), &[40, 5]);

    let uncond = Command::Sample { checkpoint: rd.prior(), observations: None, n: Some(50) };
    run(cli(&cfg, &out, uncond)).unwrap();
    let e = run(cli(&cfg, &out, Command::Eval { a: rd.samples(), b: rd.clean() })).unwrap();
    assert!(e["sinkhorn"].as_f64().unwrap() >= -1e-9);
    assert!(e["frechet"].as_f64().unwrap() >= 0.0);

    let t = run(cli(&cfg, &out, Command::VerifyTheory)).unwrap();
    assert_eq!(t["failed"], 0);
    assert!(rd.theory().exists());
}

#[test]
fn mismatched_artifacts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", &tiny_with(1));
    let other = write_config(dir.path(), "other.toml", &tiny_with(1).replace("seed = 3", "seed = 8"));
    let out = dir.path().join("run");
    run(cli(&cfg, &out, Command::GenerateData { n: None })).unwrap();
    assert!(matches!(run(cli(&other, &out, Command::Init { observations: None })), Err(CliError::Fingerprint(_))));
    let mut forced = cli(&other, &out, Command::Init { observations: None });
    forced.allow_fingerprint_mismatch = true;
    run(forced).unwrap();
}

#[test]
fn run_directory_lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.lock");
    let held = RunLock::acquire(&path).unwrap();
    assert!(matches!(RunLock::acquire(&path), Err(CliError::Locked(_))));

    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let rd = RunDir::new(dir.path());
    assert!(matches!(run(cli(&cfg, &rd.root, Command::GenerateData { n: None })), Err(CliError::Locked(_))));
    drop(held);
    assert!(!path.exists());
    run(cli(&cfg, &rd.root, Command::GenerateData { n: Some(8) })).unwrap();
    assert!(!path.exists(), "commands release the lock");
}

#[test]
fn errors_are_one_json_line() {
    let bin = env!("CARGO_BIN_EXE_diffem");
    let dir = tempfile::tempdir().unwrap();
    let out = Process::new(bin)
        .args(["--config", "/nonexistent/config.toml", "verify-theory"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let last = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["error"], "io");
    assert!(v["message"].as_str().unwrap().contains("nonexistent"));

    let bad = write_config(dir.path(), "bad.toml", &TINY.replace("model.hidden", "model.hiden"));
    let out = Process::new(bin).arg("--config").arg(&bad).arg("init").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["error"], "config");

    let out = Process::new(bin).arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["error"], "usage");

    let out = Process::new(bin).arg("--help").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("run-em"));
}

#[test]
fn masks_survive_the_observation_file() {
    let ch = CorruptionChannel::new(ChannelKind::RandomMask { rho: 0.5, dim: 13 }, 0.1).unwrap();
    let mut g = rng("mask-file", 0);
    let obs: Vec<Observation> = (0..30).map(|_| ch.observe(&normal_vec(&mut g, 13), &mut g).unwrap()).collect();
    let (back, _) = decode_observations(&encode_observations(&obs, &[7; 32]).unwrap()).unwrap();
    for (a, b) in obs.iter().zip(&back) {
        assert_eq!(a.a, b.a);
    }
}
