//! End-to-end runs of the `spot` binary against on-disk fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spot_core::pe::PeImage;
use spot_testkit::{proggen, PeBuilder, Rng};

fn spot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spot")).args(args).output().expect("spawn spot")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn write_fixture(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

fn three_block_fixture() -> Vec<u8> {
    PeBuilder::new32().text(&[0x31, 0xC0, 0x75, 0x02, 0x31, 0xC9, 0xC3]).entry(0).build().0
}

#[test]
fn analyze_writes_block_list() {
    let dir = tempfile::tempdir().unwrap();
    let target = write_fixture(dir.path(), "t.exe", &three_block_fixture());
    let out = dir.path().join("blocks.json");
    let r = spot(&["analyze", target.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["blocks"].as_array().unwrap().len(), 3);
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("3 blocks"), "stdout: {stdout}");
}

#[test]
fn analyze_missing_file_exits_1() {
    let r = spot(&["analyze", "/nonexistent/file.exe", "--out", "/tmp/x.json"]);
    assert_eq!(code(&r), 1);
}

#[test]
fn analyze_unwritable_out_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let target = write_fixture(dir.path(), "t.exe", &three_block_fixture());
    let r = spot(&[
        "analyze",
        target.to_str().unwrap(),
        "--out",
        "/nonexistent-dir/blocks.json",
    ]);
    assert_eq!(code(&r), 1);
}

#[test]
fn usage_errors_exit_2() {
    // clap-level
    let r = spot(&["analyze"]);
    assert_eq!(code(&r), 2);
    // validated flags
    let dir = tempfile::tempdir().unwrap();
    let target = write_fixture(dir.path(), "t.exe", &three_block_fixture());
    let out = dir.path().join("o.exe");
    let r = spot(&[
        "instrument",
        target.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--map-size",
        "30",
    ]);
    assert_eq!(code(&r), 2);
    let r = spot(&[
        "instrument",
        target.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--include",
        "zzz",
    ]);
    assert_eq!(code(&r), 2);
    assert!(!out.exists(), "failed runs must not leave output");
}

#[test]
fn instrument_defaults_produce_valid_pe_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(77);
    let fix = proggen::random_program(&mut rng, spot_testkit::asm::Mode::Bits32, 40);
    let target = write_fixture(dir.path(), "t.exe", &fix.bytes);
    let out = dir.path().join("t.instr.exe");
    let r = spot(&["instrument", target.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let img = PeImage::parse(&std::fs::read(&out).unwrap()).unwrap();
    assert!(img.section_by_name(".spot0").is_some());
    assert!(img.verify_checksum());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("t.instr.exe.report.json")).unwrap())
            .unwrap();
    let planned = report["instrumented"].as_u64().unwrap()
        + report["skipped_too_small"].as_u64().unwrap();
    assert!(planned > 0);

    // byte-identical on re-run
    let first = std::fs::read(&out).unwrap();
    let r = spot(&["instrument", target.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 0);
    assert_eq!(first, std::fs::read(&out).unwrap());
}

#[test]
fn memory_select_is_subset() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(11);
    let fix = proggen::random_program(&mut rng, spot_testkit::asm::Mode::Bits32, 48);
    let target = write_fixture(dir.path(), "t.exe", &fix.bytes);
    let all = dir.path().join("all.exe");
    let mem = dir.path().join("mem.exe");
    assert_eq!(code(&spot(&["instrument", target.to_str().unwrap(), "--out", all.to_str().unwrap()])), 0);
    assert_eq!(
        code(&spot(&[
            "instrument",
            target.to_str().unwrap(),
            "--out",
            mem.to_str().unwrap(),
            "--select",
            "memory"
        ])),
        0
    );
    let count = |p: &Path| -> u64 {
        let r: serde_json::Value = serde_json::from_slice(
            &std::fs::read(format!("{}.report.json", p.display())).unwrap(),
        )
        .unwrap();
        r["instrumented"].as_u64().unwrap()
    };
    assert!(count(&mem) <= count(&all));
}

#[test]
fn inline_multi_has_tls_section() {
    let dir = tempfile::tempdir().unwrap();
    let target = write_fixture(dir.path(), "t.exe", &three_block_fixture());
    let out = dir.path().join("o.exe");
    let r = spot(&[
        "instrument",
        target.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--mode",
        "inline",
        "--threads",
        "multi",
    ]);
    assert_eq!(code(&r), 0, "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let img = PeImage::parse(&std::fs::read(&out).unwrap()).unwrap();
    assert!(img.section_by_name(".spot2").is_some());
}

#[test]
fn analyze_then_instrument_matches_direct() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(5);
    let fix = proggen::random_program(&mut rng, spot_testkit::asm::Mode::Bits64, 40);
    let target = write_fixture(dir.path(), "t.exe", &fix.bytes);
    let blocks = dir.path().join("blocks.json");
    let direct = dir.path().join("direct.exe");
    let staged = dir.path().join("staged.exe");
    assert_eq!(
        code(&spot(&["analyze", target.to_str().unwrap(), "--out", blocks.to_str().unwrap()])),
        0
    );
    assert_eq!(
        code(&spot(&["instrument", target.to_str().unwrap(), "--out", direct.to_str().unwrap()])),
        0
    );
    assert_eq!(
        code(&spot(&[
            "instrument",
            target.to_str().unwrap(),
            "--out",
            staged.to_str().unwrap(),
            "--blocks",
            blocks.to_str().unwrap()
        ])),
        0
    );
    assert_eq!(std::fs::read(&direct).unwrap(), std::fs::read(&staged).unwrap());
}

fn instrumented_crash_target(dir: &Path) -> PathBuf {
    let fix = proggen::guarded_crash_fixture();
    let target = write_fixture(dir, "bug.exe", &fix.bytes);
    let out = dir.join("bug.instr.exe");
    let r = spot(&[
        "instrument",
        target.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--map-size",
        "12",
    ]);
    assert_eq!(code(&r), 0, "stderr: {}", String::from_utf8_lossy(&r.stderr));
    out
}

#[test]
fn fuzz_sandbox_campaign_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let target = instrumented_crash_target(dir.path());
    let seeds = dir.path().join("seeds");
    std::fs::create_dir(&seeds).unwrap();
    std::fs::write(seeds.join("seed0"), b"aaaa").unwrap();

    let run = |name: &str| -> (i32, String, Vec<u8>) {
        let out = dir.path().join(name);
        let r = spot(&[
            "fuzz",
            target.to_str().unwrap(),
            "--backend",
            "sandbox",
            "--in",
            seeds.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--execs",
            "1000",
            "--seed",
            "9",
        ]);
        let stats = std::fs::read(out.join("stats.jsonl")).unwrap();
        (code(&r), String::from_utf8_lossy(&r.stdout).into_owned(), stats)
    };
    let (c1, out1, stats1) = run("c1");
    let (c2, out2, stats2) = run("c2");
    assert_eq!(c1, 0, "stdout: {out1}");
    assert_eq!(c2, 0);
    assert_eq!(out1, out2, "campaign summary must be reproducible");
    assert_eq!(stats1, stats2, "stats.jsonl must be reproducible");
}

#[test]
fn fuzz_finds_planted_crash() {
    let dir = tempfile::tempdir().unwrap();
    let target = instrumented_crash_target(dir.path());
    let seeds = dir.path().join("seeds");
    std::fs::create_dir(&seeds).unwrap();
    std::fs::write(seeds.join("seed0"), b"aaaa").unwrap();
    let out = dir.path().join("campaign");
    let r = spot(&[
        "fuzz",
        target.to_str().unwrap(),
        "--backend",
        "sandbox",
        "--in",
        seeds.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--execs",
        "200000",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&r), 0);
    assert!(out.join("crashes/id_000000").exists(), "campaign must record a crash");
    let input = std::fs::read(out.join("crashes/id_000000")).unwrap();
    assert!(input.starts_with(b"SPD"));
}

#[test]
fn fuzz_empty_seed_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let target = instrumented_crash_target(dir.path());
    let seeds = dir.path().join("seeds");
    std::fs::create_dir(&seeds).unwrap();
    let r = spot(&[
        "fuzz",
        target.to_str().unwrap(),
        "--backend",
        "sandbox",
        "--in",
        seeds.to_str().unwrap(),
        "--out",
        dir.path().join("c").to_str().unwrap(),
        "--execs",
        "10",
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn fuzz_requires_one_budget() {
    let dir = tempfile::tempdir().unwrap();
    let target = instrumented_crash_target(dir.path());
    let seeds = dir.path().join("seeds");
    std::fs::create_dir(&seeds).unwrap();
    std::fs::write(seeds.join("s"), b"x").unwrap();
    let out = dir.path().join("c");
    let r = spot(&[
        "fuzz",
        target.to_str().unwrap(),
        "--backend",
        "sandbox",
        "--in",
        seeds.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 2);
}

#[cfg(unix)]
#[test]
fn fuzz_spawn_backend_runs_mock_target() {
    // a shell script standing in for an instrumented binary: writes a
    // fake coverage byte into the SPOT_SHM object and exits by input
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("target.sh");
    std::fs::write(
        &script,
        "#!/bin/sh\n\
         printf 'X' | dd of=\"$SPOT_SHM\" bs=1 seek=$((64 + $(wc -c < \"$1\") % 16)) conv=notrunc 2>/dev/null\n\
         grep -q BOOM \"$1\" && exit 77\n\
         exit 0\n",
    )
    .unwrap();
    std::os::unix::fs::PermissionsExt::set_mode(
        &mut std::fs::metadata(&script).unwrap().permissions(),
        0o755,
    );
    let perms = std::os::unix::fs::PermissionsExt::from_mode(0o755);
    std::fs::set_permissions(&script, perms).unwrap();

    let seeds = dir.path().join("seeds");
    std::fs::create_dir(&seeds).unwrap();
    std::fs::write(seeds.join("s"), b"hello").unwrap();
    let out = dir.path().join("campaign");
    let r = spot(&[
        "fuzz",
        script.to_str().unwrap(),
        "--backend",
        "spawn",
        "--in",
        seeds.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--execs",
        "40",
        "--map-size",
        "10",
        "--target-args",
        "@@",
    ]);
    assert_eq!(code(&r), 0, "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let stats = std::fs::read_to_string(out.join("stats.jsonl")).unwrap();
    assert!(!stats.is_empty());
}
