use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nldbench::client::http::{HttpBackend, HttpEmbedder, RetryPolicy};
use nldbench::client::{Backend, MockEmbedder};
use nldbench::commands::{run_with, CommandOptions, ExitStatus};
use nldbench::config::Overrides;
use nldbench::metrics::bertscore::{bert_score, Prf};
use nldbench::metrics::mauve::{mauve, mauve_from_embeddings};
use nldbench::metrics::{bleu, meteor, rouge_l, tokenize, TokenScheme};
use nldbench::prompting::{build_generator_prompt, builtin_guidance, PromptBuilder};
use nldbench::report::{build_report, comparison_table, parse_comparison_csv, Metric, ReportOptions};
use nldbench::{
    ChatBackend, ClientError, CodeExample, DecodingParams, Embedder, Lang, MetricConfig,
    ModelEndpoint, PromptStyle, ScoreCard,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::stub::{Reply, StubServer};
use crate::{oracle, within, Verdict};

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Verdict::Fail(format!($($fmt)+));
        }
    };
}

pub fn exhaustive_oracles() -> Verdict {
    let start = Instant::now();
    let space = oracle::Space::new();
    if let Err(e) = oracle::check_invariance(&space, 100_000, 11) {
        return Verdict::Fail(format!("symmetry reduction unsound: {e}"));
    }
    let outcome = oracle::run_exhaustive(&space);
    let n = space.len() as u64;
    ensure!(
        outcome.mismatches.is_empty(),
        "{} mismatches, first: {}",
        outcome.mismatches.len(),
        outcome.mismatches[0]
    );
    ensure!(
        outcome.covered_pairs == n * n,
        "covered {} of {} pairs",
        outcome.covered_pairs,
        n * n
    );
    within(
        Duration::from_secs(60),
        start.elapsed(),
        format!(
            "{} pairs via {} representatives, 0 mismatches",
            outcome.covered_pairs, outcome.representatives
        ),
    )
}

const WORDS: &[&str] = &[
    "returns", "return", "returning", "the", "sum", "of", "two", "integers", "a", "list", "node",
    "frees", "free", "memory", "buffer", "buffers", "copies", "copy", "string", "strings", "checks",
    "whether", "pointer", "is", "null", "and", "sorts", "array", "in", "place", "reads", "file",
    "into", "computes", "length", "swap", "swaps", "values", "prints", "output", "error", "count",
];

const PUNCT: &[&str] = &[".", ",", ";", "(x)", "a->b", "size_t", "-1", "\u{2019}"];

fn random_text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.random_range(1..=max_words);
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let w = match rng.random_range(0..10) {
            0 => PUNCT.choose(rng).unwrap().to_string(),
            1 => (0..rng.random_range(1..6))
                .map(|_| rng.random_range(b'a'..=b'z') as char)
                .collect(),
            2 => WORDS.choose(rng).unwrap().to_uppercase(),
            _ => WORDS.choose(rng).unwrap().to_string(),
        };
        words.push(w);
    }
    let mut t = words.join(" ");
    if rng.random_bool(0.3) {
        t.push('.');
    }
    t
}

pub fn identity_suite() -> Verdict {
    let start = Instant::now();
    let cfg = MetricConfig::default();
    let embedder = MockEmbedder::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let text = random_text(&mut rng, 40);
        let t = tokenize(&text, TokenScheme::Default);
        let m = t.len();
        let b = bleu(&t, std::slice::from_ref(&t), &cfg).unwrap();
        ensure!(b == 1.0, "bleu({text:?}) = {b}");
        let r = rouge_l(&t, &t, cfg.rouge_beta);
        ensure!(r.f == 1.0, "rouge_l({text:?}).f = {}", r.f);
        let bs = bert_score(&text, &text, &embedder, &cfg, None).unwrap();
        ensure!((bs.f - 1.0).abs() <= 1e-9, "bert_score({text:?}).f = {}", bs.f);
        let mt = meteor(&t, &t, &cfg).unwrap();
        let expected = 1.0 - 0.5 * (1.0 / m as f64).powf(3.0);
        ensure!(mt == expected, "meteor({text:?}) = {mt}, expected {expected}");
    }
    within(Duration::from_secs(10), start.elapsed(), "100 texts".into())
}

fn in_unit(x: f64) -> bool {
    x.is_finite() && (0.0..=1.0).contains(&x)
}

fn in_signed_unit(p: &Prf) -> bool {
    [p.precision, p.recall, p.f]
        .iter()
        .all(|x| x.is_finite() && (-1.0..=1.0).contains(x))
}

pub fn range_property() -> Verdict {
    let start = Instant::now();
    let cfg = MetricConfig::default();
    let embedder = MockEmbedder::new(5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut texts = Vec::new();
    for _ in 0..10_000 {
        let (a, b) = (random_text(&mut rng, 30), random_text(&mut rng, 30));
        let (c, r) = (tokenize(&a, TokenScheme::Default), tokenize(&b, TokenScheme::Default));
        let bl = bleu(&c, std::slice::from_ref(&r), &cfg).unwrap();
        ensure!(in_unit(bl), "bleu({a:?}, {b:?}) = {bl}");
        let rl = rouge_l(&c, &r, cfg.rouge_beta);
        ensure!(
            in_unit(rl.precision) && in_unit(rl.recall) && in_unit(rl.f),
            "rouge_l({a:?}, {b:?}) = {rl:?}"
        );
        let mt = meteor(&c, &r, &cfg).unwrap();
        ensure!(in_unit(mt), "meteor({a:?}, {b:?}) = {mt}");
        let bs = bert_score(&a, &b, &embedder, &cfg, None).unwrap();
        ensure!(in_signed_unit(&bs), "bert_score({a:?}, {b:?}) = {bs:?}");
        texts.push(a);
    }
    for chunk in texts.chunks(50).take(40) {
        let (h, m) = chunk.split_at(25);
        let res = mauve(h, m, &embedder, &cfg).unwrap();
        ensure!(in_unit(res.score), "mauve = {}", res.score);
    }
    within(
        Duration::from_secs(60),
        start.elapsed(),
        "10000 pairs and 40 MAUVE sets in range".into(),
    )
}

fn cluster(rng: &mut ChaCha8Rng, center: [f64; 2], n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            center
                .iter()
                .map(|c| c + rng.random_range(-0.5..0.5))
                .collect()
        })
        .collect()
}

pub fn mauve_sanity() -> Verdict {
    let cfg = MetricConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut human = cluster(&mut rng, [0.0, 0.0], 20);
    human.extend(cluster(&mut rng, [10.0, 0.0], 20));
    let mut shuffled = human.clone();
    shuffled.reverse();
    let same = mauve_from_embeddings(&human, &shuffled, &cfg).unwrap().score;
    ensure!((same - 1.0).abs() <= 1e-6, "identical multisets scored {same}");

    let far = cluster(&mut rng, [0.0, 10.0], 40);
    let mut half = cluster(&mut rng, [0.0, 0.0], 20);
    half.extend(cluster(&mut rng, [0.0, 10.0], 20));
    let disjoint = mauve_from_embeddings(&human, &far, &cfg).unwrap().score;
    let overlap = mauve_from_embeddings(&human, &half, &cfg).unwrap().score;
    ensure!(
        disjoint < overlap,
        "disjoint {disjoint} not below half-overlap {overlap}"
    );

    let texts: Vec<String> = (0..30).map(|_| random_text(&mut rng, 12)).collect();
    let embedder = MockEmbedder::new(9);
    let (h, m) = texts.split_at(15);
    let runs: Vec<u64> = (0..3)
        .map(|_| mauve(h, m, &embedder, &cfg).unwrap().score.to_bits())
        .collect();
    ensure!(runs.iter().all(|b| *b == runs[0]), "repeated runs differ: {runs:?}");
    let fixture_runs: Vec<u64> = (0..3)
        .map(|_| mauve_from_embeddings(&human, &half, &cfg).unwrap().score.to_bits())
        .collect();
    ensure!(
        fixture_runs.iter().all(|b| *b == fixture_runs[0]),
        "repeated fixture runs differ"
    );
    Verdict::Pass(format!(
        "identical {same:.6}, disjoint {disjoint:.4} < half-overlap {overlap:.4}, repeat bit-identical"
    ))
}

fn sample_corpus_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("resources/sample_corpus.jsonl")
}

fn determinism_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"corpus_path = {corpus:?}
output_dir = "out"
seed = 42

[[models]]
model_id = "mock-a"
base_url = "mock://mock-a"

[[models]]
model_id = "mock-b"
base_url = "mock://mock-b"

[embedding]
model_id = "mock-embedder"
base_url = "mock://mock-embedder"

[run]
style = "concise_one_line"
refine_iterations = 2
"#,
        corpus = sample_corpus_path().display().to_string()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Artifact bytes keyed by run-relative path, with record timestamps removed.
fn artifacts(run_dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for name in ["generations.jsonl", "scores.csv", "corpus_metrics.json", "errors.jsonl"] {
        files.insert(name.to_string(), fs::read(run_dir.join(name)).unwrap());
    }
    let mut report: Vec<PathBuf> = fs::read_dir(run_dir.join("report"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    report.sort();
    for p in report {
        let name = format!("report/{}", p.file_name().unwrap().to_string_lossy());
        files.insert(name, fs::read(p).unwrap());
    }
    let gens = String::from_utf8(files["generations.jsonl"].clone()).unwrap();
    let stripped: Vec<String> = gens
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("created_at");
            v.to_string()
        })
        .collect();
    files.insert("generations.jsonl".into(), stripped.join("\n").into_bytes());
    // The stamp digests the raw generations file, timestamps included.
    let mut metrics: serde_json::Value =
        serde_json::from_slice(&files["corpus_metrics.json"]).unwrap();
    metrics.as_object_mut().unwrap().remove("stamp");
    files.insert("corpus_metrics.json".into(), metrics.to_string().into_bytes());
    files
}

pub fn end_to_end_determinism() -> Verdict {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let config = determinism_config(tmp.path());
    let mut runs = Vec::new();
    for (i, p) in [1usize, 8, 1, 8].into_iter().enumerate() {
        let run_id = format!("det-{i}");
        let opts = CommandOptions {
            overrides: Overrides {
                run_id: Some(run_id.clone()),
                parallelism: Some(p),
                ..Overrides::default()
            },
            force: false,
        };
        let status = run_with(&config, &opts, &Backend::new(42), None);
        ensure!(status == ExitStatus::Success, "run at parallelism {p} exited {status:?}");
        let dir = tmp.path().join("out/runs").join(&run_id);
        let mut files = artifacts(&dir);
        // report.json names its run.
        if let Some(json) = files.get_mut("report/report.json") {
            let text = String::from_utf8(json.clone()).unwrap();
            *json = text.replace(&format!("\"{run_id}\""), "\"RUN\"").into_bytes();
        }
        runs.push((p, files));
    }
    let records = String::from_utf8_lossy(&runs[0].1["generations.jsonl"]).lines().count();
    ensure!(records == 40, "expected 40 records, found {records}");
    let (_, first) = &runs[0];
    for (p, files) in &runs[1..] {
        ensure!(
            files.keys().eq(first.keys()),
            "file sets differ at parallelism {p}"
        );
        for (name, bytes) in files {
            ensure!(
                *bytes == first[name],
                "{name} differs between parallelism 1 and {p}"
            );
        }
    }
    within(
        Duration::from_secs(30),
        start.elapsed(),
        format!("{} files identical across 4 runs at parallelism 1 and 8", first.len()),
    )
}

/// Per-model means: BLEU, ROUGE-L F, METEOR, BERTScore F.
const FIVE_MODEL_FIXTURE: [(&str, [f64; 4]); 5] = [
    ("Qwen", [0.0365, 0.2517, 0.2999, 0.8853]),
    ("DeepSeek", [0.0053, 0.1113, 0.1869, 0.8478]),
    ("Phi", [0.0108, 0.1410, 0.1558, 0.8349]),
    ("LLaMA", [0.0413, 0.2239, 0.2444, 0.8752]),
    ("Mistral", [0.0110, 0.1432, 0.2094, 0.8565]),
];

fn fixture_cards() -> Vec<ScoreCard> {
    // Three records per model spread symmetrically around the mean.
    let spread = [-0.003, 0.0, 0.003];
    let mut cards = Vec::new();
    for (model, means) in FIVE_MODEL_FIXTURE {
        for (i, d) in spread.iter().enumerate() {
            let [b, r, m, f] = means.map(|v| v + d);
            cards.push(ScoreCard {
                example_id: format!("ex{i}"),
                model_id: model.to_string(),
                bleu: b,
                rouge_l: Prf { precision: r, recall: r, f: r },
                meteor: m,
                bertscore: Some(Prf { precision: f, recall: f, f }),
            });
        }
    }
    cards
}

pub fn five_model_fixture() -> Verdict {
    let order: Vec<String> = FIVE_MODEL_FIXTURE.iter().map(|(m, _)| m.to_string()).collect();
    let opts = ReportOptions {
        model_order: order.clone(),
        ..ReportOptions::default()
    };
    let report = build_report("fixture", &fixture_cards(), &opts).unwrap();
    let table = comparison_table(&report.summaries, None);
    let rows = parse_comparison_csv(&table.to_csv()).unwrap();
    ensure!(rows.len() == 5, "table has {} rows", rows.len());
    for ((model, values), (want_model, want)) in rows.iter().zip(FIVE_MODEL_FIXTURE) {
        ensure!(model == want_model, "row {model} where {want_model} expected");
        for (got, want) in values.iter().zip(want) {
            let got = got.unwrap();
            ensure!(
                format!("{got:.4}") == format!("{want:.4}"),
                "{model}: {got:.4} vs {want:.4}"
            );
        }
    }
    let argmax = |m: Metric| {
        report
            .summaries
            .iter()
            .max_by(|a, b| a.value(m).unwrap().total_cmp(&b.value(m).unwrap()))
            .map(|s| (s.model_id.clone(), s.value(m).unwrap()))
            .unwrap()
    };
    let (bleu_top, bleu_val) = argmax(Metric::Bleu);
    ensure!(
        bleu_top == "LLaMA" && format!("{bleu_val:.4}") == "0.0413",
        "BLEU argmax {bleu_top} {bleu_val:.4}"
    );
    for m in [Metric::RougeLF, Metric::Meteor, Metric::BertF] {
        let (top, _) = argmax(m);
        ensure!(top == "Qwen", "{} argmax {top}", m.label());
    }
    for row in &report.stacked {
        ensure!(
            row.largest() == Some(Metric::BertF),
            "{}: largest segment {:?}",
            row.model_id,
            row.largest()
        );
    }
    Verdict::Pass("table matches at 4 decimals, argmaxes and stacked segments as expected".into())
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn style_key(style: PromptStyle) -> String {
    serde_json::to_value(style).unwrap().as_str().unwrap().to_string()
}

pub fn prompt_fidelity() -> Verdict {
    let builder = PromptBuilder::default();
    for style in PromptStyle::ALL {
        let want = golden(&format!("styles/{}.txt", style_key(style)));
        let want = want.trim_end_matches('\n');
        ensure!(style.task_text() == want, "{style}: task text differs from golden");
        let rendered = builder.system_text(style, &[]);
        ensure!(
            rendered.starts_with(want),
            "{style}: rendered system message does not open with the task text"
        );
    }
    let ex = CodeExample::new("g1", Lang::C, "int add(int a, int b) { return a + b; }", "Adds two ints.");
    let bundle = build_generator_prompt(PromptStyle::ConciseOneLine, &builtin_guidance(), &ex);
    let system = bundle.system_text().unwrap_or_default();
    let want = golden("concise_full_guidance_system.txt");
    ensure!(system == want.trim_end_matches('\n'), "full-guidance system message differs from golden");
    let points = golden("guidance.txt");
    let points: Vec<&str> = points.lines().collect();
    ensure!(points.len() == 8, "golden lists {} guidance points", points.len());
    for p in &points {
        ensure!(system.contains(p), "missing guidance point {p:?}");
    }
    ensure!(system.contains("Use no more than 50 words."), "word limit missing");
    Verdict::Pass("6 style texts and full-guidance prompt match golden files".into())
}

fn fast_backend() -> HttpBackend {
    HttpBackend::new(RetryPolicy {
        base: Duration::from_millis(20),
        cap: Duration::from_millis(100),
    })
}

fn endpoint(stub: &StubServer, retries: u32) -> ModelEndpoint {
    let mut ep = ModelEndpoint::new("stub-model", stub.base_url.clone());
    ep.max_retries = retries;
    ep.timeout_secs = 5.0;
    ep
}

fn generator_bundle() -> nldbench::PromptBundle {
    let ex = CodeExample::new("w1", Lang::Cpp, "void f() {}", "Does nothing.");
    build_generator_prompt(PromptStyle::ConciseOneLine, &builtin_guidance(), &ex)
}

fn complete(stub: &StubServer, retries: u32) -> Result<String, ClientError> {
    fast_backend()
        .complete(&endpoint(stub, retries), &generator_bundle(), &DecodingParams::default())
        .map(|r| r.text)
}

pub fn wire_conformance() -> Verdict {
    // Defaults on the wire.
    let stub = StubServer::start(vec![], Reply::ok_chat("Does nothing."));
    let out = complete(&stub, 3);
    ensure!(out.as_deref() == Ok("Does nothing."), "plain completion: {out:?}");
    let reqs = stub.requests();
    ensure!(reqs.len() == 1, "{} requests for one call", reqs.len());
    let req = &reqs[0];
    ensure!(
        req.method == "POST" && req.path == "/v1/chat/completions",
        "{} {}",
        req.method,
        req.path
    );
    let body = req.json();
    ensure!(body["temperature"] == 0.7, "temperature {}", body["temperature"]);
    ensure!(body["top_p"] == 0.9, "top_p {}", body["top_p"]);
    ensure!(body["model"] == "stub-model", "model {}", body["model"]);
    ensure!(
        body["messages"][0]["role"] == "system" && body["messages"][1]["role"] == "user",
        "messages {}",
        body["messages"]
    );

    // Transient failures are retried with growing delays.
    let stub = StubServer::start(
        vec![Reply::status(429), Reply::status(503), Reply::Hangup],
        Reply::ok_chat("ok"),
    );
    let start = Instant::now();
    let out = complete(&stub, 3);
    let waited = start.elapsed();
    ensure!(out.as_deref() == Ok("ok"), "after retries: {out:?}");
    ensure!(stub.requests().len() == 4, "{} attempts", stub.requests().len());
    ensure!(
        waited >= Duration::from_millis(20 + 40 + 80),
        "backoff too short: {waited:?}"
    );

    // Retries are bounded.
    let stub = StubServer::start(vec![], Reply::status(500));
    let out = complete(&stub, 2);
    ensure!(
        matches!(out, Err(ClientError::HttpStatus { code: 500, .. })),
        "persistent 500: {out:?}"
    );
    ensure!(stub.requests().len() == 3, "{} attempts for 2 retries", stub.requests().len());

    // Client errors and bad payloads are not retried.
    let cases: [(Reply, fn(&ClientError) -> bool); 3] = [
        (Reply::status(400), |e| matches!(e, ClientError::HttpStatus { code: 400, .. })),
        (Reply::Body(200, "not json".into()), |e| {
            matches!(e, ClientError::MalformedResponse(_))
        }),
        (Reply::Body(200, r#"{"choices":[]}"#.into()), |e| {
            matches!(e, ClientError::MalformedResponse(_))
        }),
    ];
    for (reply, expected) in cases {
        let stub = StubServer::start(vec![], reply.clone());
        let out = complete(&stub, 3);
        ensure!(
            out.as_ref().is_err_and(expected),
            "{reply:?} mapped to {out:?}"
        );
        ensure!(stub.requests().len() == 1, "{reply:?} was retried");
    }

    // Timeouts.
    let stub = StubServer::start(
        vec![],
        Reply::Delayed(Duration::from_millis(1500), Box::new(Reply::ok_chat("late"))),
    );
    let mut ep = endpoint(&stub, 0);
    ep.timeout_secs = 0.2;
    let out = fast_backend().complete(&ep, &generator_bundle(), &DecodingParams::default());
    ensure!(matches!(out, Err(ClientError::Timeout(_))), "slow server: {out:?}");

    // Credentials come from the named environment variable.
    std::env::set_var("NLDBENCH_STUB_KEY", "sk-test");
    let stub = StubServer::start(vec![], Reply::ok_chat("ok"));
    let mut ep = endpoint(&stub, 0);
    ep.api_key_ref = Some("NLDBENCH_STUB_KEY".into());
    let out = fast_backend().complete(&ep, &generator_bundle(), &DecodingParams::default());
    ensure!(out.is_ok(), "authenticated call: {out:?}");
    let auth = stub.requests()[0].header("authorization").map(str::to_string);
    ensure!(auth.as_deref() == Some("Bearer sk-test"), "auth header {auth:?}");
    ep.api_key_ref = Some("NLDBENCH_STUB_KEY_UNSET".into());
    let out = fast_backend().complete(&ep, &generator_bundle(), &DecodingParams::default());
    ensure!(
        matches!(out, Err(ClientError::InvalidRequest(_))),
        "missing key: {out:?}"
    );
    ensure!(stub.requests().len() == 1, "request sent without a key");

    // Embeddings.
    let reply = r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#;
    let stub = StubServer::start(vec![Reply::status(502)], Reply::Body(200, reply.into()));
    let embedder = HttpEmbedder::new(endpoint(&stub, 2), fast_backend());
    let rows = embedder.embed(&["a".to_string(), "b".to_string()]);
    ensure!(
        rows.as_ref().map(|m| m.rows().to_vec()) == Ok(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        "embeddings: {rows:?}"
    );
    let reqs = stub.requests();
    ensure!(
        reqs.len() == 2 && reqs[1].path == "/v1/embeddings",
        "embedding requests {:?}",
        reqs.iter().map(|r| r.path.clone()).collect::<Vec<_>>()
    );
    ensure!(reqs[1].json()["input"] == serde_json::json!(["a", "b"]), "embedding input");
    Verdict::Pass("defaults 0.7/0.9, retry/backoff, error mapping, auth and embeddings".into())
}

pub fn live_ranges() -> Verdict {
    // Needs live model endpoints; the offline mocks say nothing about these ranges.
    Verdict::Skip("informational, requires live model endpoints".into())
}
