//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Criteria 1-9 run in-process through the verification suite so their
//! runtimes can be measured; criterion 10 runs the binary twice.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rkb_cli::verify::{Status, Suite};
use rkb_cli::{Context, GlobalArgs};

const CRITERIA: [(&str, Option<Duration>); 9] = [
    ("Riccati correctness", Some(Duration::from_secs(1))),
    ("Reduction identity", None),
    ("Matched-drift MSE", Some(Duration::from_secs(30))),
    ("Error-oracle agreement", None),
    ("Girsanov normalization and equality case", None),
    ("Decomposition identity (ode kernel)", None),
    ("Printed-kernel audit", None),
    ("Saddle report", None),
    ("Innovation whiteness", None),
];

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn determinism() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for threads in ["1", "4"] {
        let dir = tmp.path().join(format!("threads-{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_rkb"))
            .args(["verify", "--seed", "7", "--threads", threads, "--out"])
            .arg(&dir)
            .output()
            .unwrap();
        if !status.status.success() {
            return (false, format!("verify exited with {:?} at --threads {threads}", status.status.code()));
        }
        dirs.push(files(&dir));
    }
    let same = dirs[0] == dirs[1];
    let names: Vec<&str> = dirs[0].iter().map(|f| f.0.as_str()).collect();
    let detail = format!(
        "{} for files {}",
        if same { "byte-identical" } else { "outputs differ" },
        names.join(", ")
    );
    (same && !names.is_empty(), detail)
}

fn main() {
    let out = tempfile::tempdir().unwrap();
    let global = GlobalArgs {
        config: None,
        seed: None,
        threads: None,
        out: Some(out.path().to_path_buf()),
    };
    let ctx = Context::load(&global, "verify").unwrap();
    let suite = Suite::new(&ctx, None).unwrap();

    let mut failed = 0;
    for (i, &(name, limit)) in CRITERIA.iter().enumerate() {
        let started = Instant::now();
        let res = suite.run(i + 1);
        let elapsed = started.elapsed();
        let in_time = limit.is_none_or(|l| elapsed < l);
        let pass = res.status == Status::Pass && in_time;
        failed += usize::from(!pass);
        let timing = match limit {
            Some(l) => format!(" [{:.2}s, limit {}s]", elapsed.as_secs_f64(), l.as_secs()),
            None => String::new(),
        };
        println!(
            "criterion {:>2} {}  {name}: {}{timing}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            res.summary
        );
    }

    let (pass, detail) = determinism();
    failed += usize::from(!pass);
    println!("criterion 10 {}  Determinism: {detail}", if pass { "PASS" } else { "FAIL" });

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 10 acceptance criteria passed");
}
