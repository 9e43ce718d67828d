use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use serde_json::{json, Value};
use sifter_core::config::JobConfig;
use sifter_core::corpus;
use sifter_core::eval::{paired_t_test, relative_ratings, Condition, RatingSample};
use sifter_core::filters::{self, FilterVerdict};
use sifter_core::sim::{self, WorkerProfile};
use sifter_core::Execution;

fn sifter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sifter")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_frames(dir: &Path, kind: u8) {
    std::fs::create_dir_all(dir).unwrap();
    for f in 0..5u32 {
        let img = RgbImage::from_fn(48, 48, |x, y| match kind {
            0 => Rgb([128, 128, 128]),
            _ => {
                let t = (x + 2 * y + f * 9) % 48;
                Rgb([(t * 5) as u8, 250 - (t * 5) as u8, ((y * 5) ^ (f * 30)) as u8])
            }
        });
        img.save(dir.join(format!("f{f}.png"))).unwrap();
    }
}

/// Small corpus: six magic clips covering several removal reasons plus
/// two unrelated clips.
fn fixture(dir: &Path) -> PathBuf {
    write_frames(&dir.join("frames/good"), 1);
    write_frames(&dir.join("frames/flat"), 0);
    let rows = [
        json!({"id": "m1", "uploader_id": "a", "posted_at": 1000, "duration_s": 14.0, "caption": "Magic tricks at home", "frames": "frames/good"}),
        json!({"id": "m2", "uploader_id": "a", "posted_at": 1060, "duration_s": 14.0, "caption": "more magic", "frames": "frames/good"}),
        json!({"id": "m3", "uploader_id": "b", "posted_at": "2024-01-01T00:00:00Z", "duration_s": 1.5, "caption": "magic!", "frames": "frames/good"}),
        json!({"id": "m4", "uploader_id": "c", "posted_at": 5000, "duration_s": 9.0, "caption": "card tricks", "frames": "frames/flat"}),
        json!({"id": "m5", "uploader_id": "d", "posted_at": 5000, "duration_s": 9.0, "caption": "magic", "frames": "frames/missing"}),
        json!({"id": "m6", "uploader_id": "e", "posted_at": 9000, "duration_s": 30.0, "caption": "MAGIC show", "frames": "frames/good"}),
        json!({"id": "x1", "uploader_id": "f", "posted_at": 9000, "duration_s": 30.0, "caption": "cooking pasta", "frames": "frames/good"}),
        json!({"id": "x2", "uploader_id": "g", "posted_at": 9000, "duration_s": 30.0, "caption": "magical kittens", "frames": "frames/good"}),
    ];
    let manifest = dir.join("corpus.jsonl");
    std::fs::write(&manifest, rows.iter().map(|r| r.to_string() + "\n").collect::<String>()).unwrap();
    let job = dir.join("c1.json");
    std::fs::write(
        &job,
        json!({"theme": "Magic Wins", "keywords": ["magic", "tricks"], "corpus": "corpus.jsonl"}).to_string(),
    )
    .unwrap();
    job
}

#[test]
fn search_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    let manifest = tmp.path().join("corpus.jsonl");
    let out = sifter(&["search", "--keywords", "magic, tricks", "--corpus", p(&manifest)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let printed: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(String::from).collect();

    let m = corpus::ingest_manifest(&manifest).unwrap();
    let expected: Vec<String> = corpus::search_by_keywords(&["magic", "tricks"], &m)
        .unwrap()
        .into_iter()
        .map(|a| a.id.clone())
        .collect();
    assert_eq!(printed, expected);
    assert_eq!(printed, ["m1", "m2", "m3", "m4", "m5", "m6"]);
}

#[test]
fn ingest_summarizes_and_normalizes() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    let norm = tmp.path().join("norm.jsonl");
    let out = sifter(&["ingest", "--corpus", p(&tmp.path().join("corpus.jsonl")), "--out", p(&norm)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("videos: 8"));
    assert!(text.contains("uploaders: 7"));
    let rows: Vec<Value> = std::fs::read_to_string(&norm)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[2]["posted_at"], 1_704_067_200);
}

#[test]
fn run_r1_writes_one_verdict_per_hit() {
    let tmp = tempfile::tempdir().unwrap();
    let job = fixture(tmp.path());
    let verdicts = tmp.path().join("verdicts.jsonl");
    let events = tmp.path().join("events.jsonl");
    let out = sifter(&[
        "run-r1",
        "--job",
        p(&job),
        "--out",
        p(&verdicts),
        "--events",
        p(&events),
        "--seed",
        "9",
        "--sequential",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let got: Vec<FilterVerdict> = std::fs::read_to_string(&verdicts)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(got.len(), 6);

    // same result as calling the library
    let cfg = JobConfig::load(&job).unwrap();
    let m = corpus::ingest_manifest(cfg.corpus.as_ref().unwrap()).unwrap();
    let hits: Vec<_> = corpus::search_by_keywords(&cfg.keywords, &m).unwrap().into_iter().cloned().collect();
    let loader = corpus::FsFrameLoader::new(m.base_dir());
    let lib = filters::run_r1(&hits, &cfg.r1, &loader, Execution::Sequential).unwrap();
    assert_eq!(got, lib.verdicts);

    let reasons: Vec<String> = got
        .iter()
        .map(|v| serde_json::to_value(v.reason).unwrap().as_str().unwrap().to_string())
        .collect();
    assert_eq!(
        reasons,
        ["kept", "same_session_duplicate", "too_short", "static_content", "unreadable", "kept"]
    );

    // the event log replays, but the job has not finished
    let out = sifter(&["export", "--events", p(&events)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("not finalized"));

    // thresholds come from flags
    let out = sifter(&["run-r1", "--job", p(&job), "--out", p(&verdicts), "--min-duration", "20"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let kept = std::fs::read_to_string(&verdicts)
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"kept\":true"))
        .count();
    assert_eq!(kept, 1);
}

#[test]
fn usage_and_domain_errors() {
    let out = sifter(&["search", "--bogus"]);
    assert_eq!(code(&out), 2);
    let out = sifter(&[]);
    assert_eq!(code(&out), 2);
    let out = sifter(&["frobnicate"]);
    assert_eq!(code(&out), 2);

    let out = sifter(&["search", "--keywords", "x", "--corpus", "/nonexistent/c.jsonl"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).starts_with("error:"));

    let out = sifter(&["eval", "--m", "12"]);
    assert_eq!(code(&out), 1);

    let out = sifter(&["serve", "--job", "/nonexistent/job.json"]);
    assert_eq!(code(&out), 1);
}

fn rating(rater: &str, c: Condition, video: &str, score: u8) -> RatingSample {
    RatingSample {
        rater_id: rater.into(),
        condition: c,
        video_id: video.into(),
        score,
        job_id: None,
    }
}

#[test]
fn eval_reports_bonferroni_threshold() {
    let tmp = tempfile::tempdir().unwrap();
    let mut samples = Vec::new();
    let table = [("r1", 2, [4, 5], [3, 3]), ("r2", 3, [5, 5], [3, 4]), ("r3", 3, [4, 4], [4, 3]), ("r4", 2, [5, 4], [2, 3])];
    let mut csv = String::from("rater_id,condition,video_id,score\n");
    for (r, base, sif, cur) in table {
        for (c, scores) in [(Condition::Baseline, [base, base]), (Condition::Sifter, sif), (Condition::Curator, cur)] {
            for (i, s) in scores.iter().enumerate() {
                let name = serde_json::to_value(c).unwrap();
                csv.push_str(&format!("{r},{},v{i},{s}\n", name.as_str().unwrap()));
                samples.push(rating(r, c, &format!("v{i}"), *s));
            }
        }
    }
    let ratings = tmp.path().join("ratings.csv");
    std::fs::write(&ratings, csv).unwrap();

    let timings = tmp.path().join("timings.json");
    std::fs::write(
        &timings,
        json!([
            {"job_id": "c1", "videos": 10, "durations": [
                {"worker": "s1", "stage": "selection", "minutes": 5.0},
                {"worker": "s2", "stage": "selection", "minutes": 7.0},
                {"worker": "a1", "stage": "agreement", "minutes": 4.0},
                {"worker": "a2", "stage": "agreement", "minutes": 6.0}]}
        ])
        .to_string(),
    )
    .unwrap();
    let queries = tmp.path().join("queries.json");
    std::fs::write(
        &queries,
        json!([
            {"curator_id": "k", "at": "2024-01-01T00:00:00Z"},
            {"curator_id": "k", "at": "2024-01-01T00:10:00Z"},
            {"curator_id": "k", "at": "2024-01-01T00:50:00Z"}
        ])
        .to_string(),
    )
    .unwrap();

    let report = tmp.path().join("eval.json");
    let out = sifter(&[
        "eval",
        "--timings",
        p(&timings),
        "--query-log",
        p(&queries),
        "--ratings",
        p(&ratings),
        "--m",
        "12",
        "--report",
        p(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!((rep["threshold"].as_f64().unwrap() - 0.05 / 12.0).abs() < 1e-15);
    assert_eq!(rep["sifter"]["per_job"][0]["minutes"], 13.0);
    assert_eq!(rep["curator"]["per_job"][0]["minutes"], 10.0);

    // oracle: per-rater mean relative scores, then a paired test
    let base: Vec<_> = samples.iter().filter(|s| s.condition == Condition::Baseline).cloned().collect();
    let per_rater = |c: Condition| {
        let rel = relative_ratings(
            &samples.iter().filter(|s| s.condition == c).cloned().collect::<Vec<_>>(),
            &base,
        )
        .unwrap();
        let mut m: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for s in rel.scores {
            m.entry(s.rater_id).or_default().push(s.relative);
        }
        m.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect::<Vec<_>>()
    };
    let t = paired_t_test(&per_rater(Condition::Sifter), &per_rater(Condition::Curator)).unwrap();
    let c = &rep["ratings"][0];
    assert!((c["test"]["p"].as_f64().unwrap() - t.p).abs() < 1e-12);
    assert!((c["test"]["t"].as_f64().unwrap() - t.t).abs() < 1e-12);
    assert_eq!(c["significant"].as_bool().unwrap(), t.p < 0.05 / 12.0);
}

#[test]
fn simulate_then_export() {
    let tmp = tempfile::tempdir().unwrap();
    let job = tmp.path().join("sim.json");
    std::fs::write(&job, json!({"job_id": "sim", "theme": "Magic", "keywords": ["magic"]}).to_string()).unwrap();
    let mut profiles = vec![WorkerProfile::new("sel0", 0.5, 0.1)];
    for i in 0..4 {
        profiles.push(WorkerProfile::new(format!("agr{i}"), 0.5, 0.3));
    }
    let prof_path = tmp.path().join("profiles.json");
    std::fs::write(&prof_path, serde_json::to_string(&profiles).unwrap()).unwrap();
    let report = tmp.path().join("report.json");
    let events = tmp.path().join("events.jsonl");
    let out = sifter(&[
        "simulate",
        "--job",
        p(&job),
        "--profiles",
        p(&prof_path),
        "--seed",
        "42",
        "--trials",
        "3",
        "--report",
        p(&report),
        "--events",
        p(&events),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["per_trial"].as_array().unwrap().len(), 3);

    let cfg = JobConfig::load(&job).unwrap();
    let lib = sim::run_trials(&cfg, &profiles, 1000, 42, 3, Execution::Sequential).unwrap();
    assert_eq!(rep, serde_json::to_value(&lib).unwrap());

    let exported = tmp.path().join("output.json");
    let out = sifter(&["export", "--events", p(&events), "--out", p(&exported)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let output: Value = serde_json::from_str(&std::fs::read_to_string(&exported).unwrap()).unwrap();
    assert_eq!(output["videos"].as_array().unwrap().len(), lib.per_trial[0].output_size);
    assert_eq!(output["consent_set_size"], lib.per_trial[0].consent_set_size);
}
