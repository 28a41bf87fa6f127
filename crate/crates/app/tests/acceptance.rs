//! Acceptance suite: one PASS/FAIL line per criterion, then a hard assert.
//!
//! The report goes straight to stderr, so it shows even when libtest captures
//! output.

mod common;

use std::collections::HashSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration as StdDuration, Instant};

use base64::Engine as _;
use ccpauth::export_timings_csv;
use ccpauth_core::analysis::{simulate, AttackerKind, AttackerModel, Ratio};
use ccpauth_core::auth::TimingRecord;
use ccpauth_core::otp::OtpError;
use ccpauth_core::vault::{Requester, VaultError};
use ccpauth_core::{
    password_space, ContentType, GridCell, GridLabel, LabelingStatus, MasterKey, OtpDigits, OtpStore, Owner,
    SessionId, SpaceParams, UserId, Vault,
};
use chrono::{DateTime, Duration, Utc};
use common::{scripted_login, Mutation, Server, GOLDEN};
use num_bigint::BigUint;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn t0() -> DateTime<Utc> {
    DateTime::from_timestamp(1_700_000_000, 0).unwrap()
}

fn labeling_algebra() -> Check {
    let start = Instant::now();
    let cells: Vec<GridCell> = GridCell::all().collect();
    ensure(cells.len() == 9, "grid must have 9 cells")?;
    for s in LabelingStatus::ALL {
        let labels: HashSet<u8> = cells.iter().map(|c| s.label_of(*c).value()).collect();
        ensure(labels == (1..=9).collect(), format!("{s} is not a bijection"))?;
        for c in &cells {
            ensure(s.cell_of(s.label_of(*c)) == *c, format!("{s}: cell_of∘label_of ≠ id at {c}"))?;
        }
        for l in GridLabel::all() {
            ensure(s.label_of(s.cell_of(l)) == l, format!("{s}: label_of∘cell_of ≠ id at {l}"))?;
        }
    }
    for (i, a) in LabelingStatus::ALL.iter().enumerate() {
        for b in &LabelingStatus::ALL[i + 1..] {
            ensure(cells.iter().any(|c| a.label_of(*c) != b.label_of(*c)), format!("{a} = {b}"))?;
        }
    }
    let took = start.elapsed();
    ensure(took < StdDuration::from_secs(1), format!("took {took:?}"))?;
    Ok(format!("4 statuses × 9 cells exhaustive in {took:?}"))
}

fn naive_space(p: &SpaceParams) -> u128 {
    let base = u128::from(p.w) * u128::from(p.h) / (u128::from(p.t) * u128::from(p.t)) * u128::from(p.m);
    let mut level = 1u128;
    for _ in 0..p.n {
        level *= base;
    }
    let mut total = 1u128;
    for _ in 0..p.c {
        total *= level;
    }
    total
}

fn cli_space(p: &SpaceParams) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_authcli"))
        .args(["space", "--w", &p.w.to_string(), "--h", &p.h.to_string(), "--t", &p.t.to_string()])
        .args(["--m", &p.m.to_string(), "--n", &p.n.to_string(), "--c", &p.c.to_string()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("authcli exited {:?}", out.status.code()))?;
    let text = String::from_utf8(out.stdout).map_err(|e| e.to_string())?;
    Ok(text.split_whitespace().next().unwrap_or_default().to_string())
}

fn password_space_check() -> Check {
    let start = Instant::now();
    let defaults = cli_space(&SpaceParams::default())?;
    ensure(defaults == "4738381338321616896", format!("defaults printed {defaults}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ace);
    for i in 0..200 {
        // Small enough that the u128 oracle cannot overflow: base ≤ 2400, exponent ≤ 9.
        let t = rng.gen_range(10..=50u64);
        let p = SpaceParams {
            w: rng.gen_range(t..=200),
            h: rng.gen_range(t..=200),
            t,
            m: rng.gen_range(1..=6),
            n: rng.gen_range(1..=3),
            c: rng.gen_range(1..=3),
        };
        let exact = password_space(&p).map_err(|e| e.to_string())?;
        ensure(exact == BigUint::from(naive_space(&p)), format!("mismatch for {p:?}"))?;
        if i % 10 == 0 {
            ensure(cli_space(&p)? == exact.to_string(), format!("cli mismatch for {p:?}"))?;
        }
    }
    let bad = Command::new(env!("CARGO_BIN_EXE_authcli")).args(["space", "--t", "500"]).status();
    ensure(bad.ok().and_then(|s| s.code()) == Some(2), "t > w must exit 2")?;
    let took = start.elapsed();
    ensure(took < StdDuration::from_secs(1), format!("took {took:?}"))?;
    Ok(format!("defaults = 4738381338321616896; 200 random sets match the u128 oracle ({took:?})"))
}

fn golden_login() -> Check {
    let start = Instant::now();
    let server = Server::default_seeded(2024);
    let (_, images) = server.register("golden", GOLDEN);
    let result = scripted_login(&server, "golden", &images, GOLDEN, Mutation::None);
    ensure(result == "success", format!("unmutated login gave {result}"))?;
    let mutations = [
        Mutation::WrongImage(0),
        Mutation::WrongImage(1),
        Mutation::WrongImage(2),
        Mutation::WrongCell(0),
        Mutation::WrongCell(1),
        Mutation::WrongCell(2),
    ];
    for (i, m) in mutations.into_iter().enumerate() {
        // Fresh user per mutation so lockout never masks the verdict.
        let name = format!("mutant{i}");
        let (_, imgs) = server.register(&name, GOLDEN);
        let result = scripted_login(&server, &name, &imgs, GOLDEN, m);
        ensure(result == "failure", format!("{m:?} gave {result}"))?;
        let control = scripted_login(&server, &name, &imgs, GOLDEN, Mutation::None);
        ensure(control == "success", format!("control after {m:?} gave {control}"))?;
    }
    let took = start.elapsed();
    ensure(took < StdDuration::from_secs(10), format!("took {took:?}"))?;
    Ok(format!("LR/RL/TB over HTTP with file-dropped keys; all 6 mutations fail ({took:?})"))
}

fn implicit_feedback() -> Check {
    let server = Server::default_seeded(7);
    let (_, images) = server.register("quiet", GOLDEN);
    let mut responses = Vec::new();
    for correct in [true, false] {
        server.reseed(99);
        let (status, body) = server.start_login("quiet");
        ensure(status == 201, format!("start gave {status}"))?;
        let sid = body["session_id"].as_str().unwrap().to_string();
        let digit = server.otp(&sid).labels()[0];
        let right = ccpauth_core::expected_cell(GOLDEN[0], digit);
        let wrong = GridCell::all().find(|c| *c != right).unwrap();
        let (status, text) = server.click(&sid, &images[0], if correct { right } else { wrong });
        ensure(status == 200, format!("click gave {status}"))?;
        responses.push(text.replace(&sid, "<sid>"));
    }
    ensure(
        responses[0] == responses[1],
        format!("responses differ:\n  {}\n  {}", responses[0], responses[1]),
    )?;
    Ok(format!("correct and wrong level-1 clicks both returned {} bytes, identical", responses[0].len()))
}

fn otp_contract() -> Check {
    // Single use under contention.
    for round in 0..50u64 {
        let store = Arc::new(OtpStore::default());
        let sid = SessionId::from(format!("race{round}"));
        store
            .generate(&sid, t0(), &mut ChaCha8Rng::seed_from_u64(round))
            .map_err(|e| e.to_string())?;
        let barrier = Arc::new(Barrier::new(2));
        let handles: Vec<_> = (0..2)
            .map(|_| {
                let (store, sid, barrier) = (store.clone(), sid.clone(), barrier.clone());
                thread::spawn(move || {
                    barrier.wait();
                    store.consume(&sid, t0()).is_ok()
                })
            })
            .collect();
        let wins = handles.into_iter().map(|h| h.join().unwrap()).filter(|w| *w).count();
        ensure(wins == 1, format!("{wins} concurrent consumes succeeded"))?;
    }

    // TTL boundary.
    let store = OtpStore::new(Duration::seconds(120));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (SessionId::from("edge"), SessionId::from("late"));
    store.generate(&a, t0(), &mut rng).map_err(|e| e.to_string())?;
    store.generate(&b, t0(), &mut rng).map_err(|e| e.to_string())?;
    ensure(store.consume(&a, t0() + Duration::seconds(120)).is_ok(), "key rejected at exactly the TTL")?;
    ensure(
        store.consume(&b, t0() + Duration::seconds(121)) == Err(OtpError::Expired),
        "key accepted at TTL + 1 s",
    )?;

    // Distribution.
    const N: u64 = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x0770);
    let mut counts = [[0u64; 10]; 3];
    for _ in 0..N {
        for (pos, d) in OtpDigits::random(&mut rng).labels().iter().enumerate() {
            counts[pos][usize::from(d.value())] += 1;
        }
    }
    let p = 1.0 / 9.0;
    let sigma = (N as f64 * p * (1.0 - p)).sqrt();
    let mut worst = 0.0f64;
    for row in &counts {
        ensure(row[0] == 0, "zero digit drawn")?;
        for &n in &row[1..] {
            worst = worst.max((n as f64 - N as f64 * p).abs() / sigma);
        }
    }
    ensure(worst <= 3.0, format!("max |z| = {worst:.2}"))?;
    Ok(format!("1 winner of 2 racers ×50; valid at TTL, expired at TTL+1s; 10⁶ keys, no zero, max |z| = {worst:.2}"))
}

fn vault_checks() -> Check {
    let vault = Vault::in_memory(MasterKey::from_bytes([0x11; 32]));
    let owner = Owner::User(UserId::from("acceptance"));
    let mut rng = ChaCha8Rng::seed_from_u64(0xb10b);
    for _ in 0..10_000 {
        let mut blob = vec![0u8; rng.gen_range(1..=4096)];
        rng.fill_bytes(&mut blob);
        let rec = vault.seal(&blob, owner.clone(), ContentType::Png).map_err(|e| e.to_string())?;
        let back = vault.open(&rec.image_id, Requester::Owner(&owner)).map_err(|e| e.to_string())?;
        ensure(back == blob, "round trip changed the blob")?;
    }

    for case in 0..100 {
        let mut blob = vec![0u8; rng.gen_range(1..=2048)];
        rng.fill_bytes(&mut blob);
        let mut rec = vault.seal(&blob, owner.clone(), ContentType::Jpeg).map_err(|e| e.to_string())?;
        let bits = (rec.nonce.len() + rec.ciphertext.len()) * 8;
        let bit = rng.gen_range(0..bits);
        let byte = bit / 8;
        if byte < rec.nonce.len() {
            rec.nonce[byte] ^= 1 << (bit % 8);
        } else {
            rec.ciphertext[byte - rec.nonce.len()] ^= 1 << (bit % 8);
        }
        ensure(
            matches!(vault.open_record(&rec), Err(VaultError::Integrity)),
            format!("flip {case} at bit {bit} not detected"),
        )?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let disk = Vault::open_dir(dir.path(), MasterKey::from_bytes([0x12; 32])).map_err(|e| e.to_string())?;
    let mut sentinel = vec![0u8; 1024];
    rng.fill_bytes(&mut sentinel);
    disk.seal(&sentinel, owner.clone(), ContentType::Png).map_err(|e| e.to_string())?;
    disk.add_decoy(&sentinel, ContentType::Png).map_err(|e| e.to_string())?;
    let windows: HashSet<&[u8]> = sentinel.windows(16).collect();
    let encoded = base64::engine::general_purpose::STANDARD.encode(&sentinel);
    let mut files = 0;
    for entry in walk(dir.path()) {
        let bytes = std::fs::read(&entry).map_err(|e| e.to_string())?;
        files += 1;
        ensure(!bytes.windows(16).any(|w| windows.contains(w)), format!("raw sentinel in {}", entry.display()))?;
        let text = String::from_utf8_lossy(&bytes);
        ensure(!text.contains(&encoded[..64]), format!("encoded sentinel in {}", entry.display()))?;
    }
    ensure(files >= 2, "expected records on disk")?;
    Ok(format!("10⁴ round trips; 100/100 bit flips rejected; 1 KiB sentinel absent from {files} files"))
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).into_iter().flatten().flatten() {
        let path = entry.path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn attack_rates() -> Check {
    let start = Instant::now();
    let mut parts = Vec::new();
    for (kind, expected) in [
        (AttackerKind::BlindGuess, Some(Ratio::new(1, 46_656))),
        (AttackerKind::KnownImages, Some(Ratio::new(1, 729))),
        (AttackerKind::SessionObserver, None),
    ] {
        let report = simulate(&AttackerModel { kind, trials: 1_000_000, seed: 1 }).map_err(|e| e.to_string())?;
        if let Some(r) = expected {
            ensure(report.reference == r, format!("{kind} reference {} ≠ {r}", report.reference))?;
        }
        ensure(
            report.within_sigmas(3.0),
            format!("{kind}: rate {:.3e} vs {} (z = {:+.2})", report.rate, report.reference, report.z_score()),
        )?;
        parts.push(format!("{kind} {:.3e} vs {} z={:+.2}", report.rate, report.reference, report.z_score()));
    }
    let took = start.elapsed();
    ensure(took < StdDuration::from_secs(120), format!("took {took:?}"))?;
    Ok(format!("{} ({took:.1?})", parts.join("; ")))
}

fn metrics_csv() -> Check {
    let header = "Sl.No,Registration Time(s),Login Time-1(s),Login Time-2(s),Login Time-3(s)";
    let csv = export_timings_csv(&[TimingRecord {
        serial: 1,
        registration_seconds: Some(76.0),
        login_seconds: vec![55.0, 37.0, 29.0],
    }]);
    let lines: Vec<&str> = csv.lines().collect();
    ensure(lines == [header, "1,76,55,37,29"], format!("got {lines:?}"))?;

    let server = Server::default_seeded(3);
    let (status, _, body) = server.get("/api/metrics/timings.csv");
    let body = String::from_utf8(body).map_err(|e| e.to_string())?;
    ensure(status == 200 && body.lines().collect::<Vec<_>>() == [header], format!("empty export: {status} {body:?}"))?;
    Ok("header verbatim; 76/55/37/29 → 1,76,55,37,29; empty export is header-only".into())
}

fn headless() -> Check {
    let server = Server::default_seeded(11);
    let (_, images) = server.register("headless", GOLDEN);
    let result = scripted_login(&server, "headless", &images, GOLDEN, Mutation::None);
    ensure(result == "success", format!("scripted client got {result}"))?;
    Ok("suite drives the service with a scripted HTTP client only; no browser assets built".into())
}

fn report(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

#[test]
fn acceptance() {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 9] = [
        ("labeling algebra", labeling_algebra),
        ("password space", password_space_check),
        ("end-to-end golden login", golden_login),
        ("implicit feedback", implicit_feedback),
        ("otp contract", otp_contract),
        ("vault", vault_checks),
        ("attack rates", attack_rates),
        ("metrics csv", metrics_csv),
        ("headless suite", headless),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => report(&format!("PASS  {name}: {detail}")),
            Err(why) => {
                report(&format!("FAIL  {name}: {why}"));
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
